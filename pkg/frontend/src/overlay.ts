/** Pure mask-overlay compositing on raw RGBA pixel buffers. */

export interface OverlayColor {
  r: number;
  g: number;
  b: number;
}

export const MASK_COLOR: OverlayColor = { r: 66, g: 133, b: 244 };

/** Blend a binary mask over an RGBA image buffer at the given opacity.
 * Pure: identical (image, mask, opacity, color) always produce identical
 * output bytes, and the inputs are never mutated. */
export function renderOverlay(
  image: Uint8ClampedArray,
  mask: Uint8Array,
  opacity: number,
  color: OverlayColor = MASK_COLOR,
): Uint8ClampedArray {
  if (image.length !== mask.length * 4) {
    throw new RangeError(`image has ${image.length} bytes but mask has ${mask.length} pixels`);
  }
  if (!(opacity >= 0 && opacity <= 1)) {
    throw new RangeError(`opacity ${opacity} outside [0, 1]`);
  }
  const out = new Uint8ClampedArray(image.length);
  for (let i = 0; i < mask.length; i++) {
    const o = i * 4;
    if (mask[i]) {
      out[o] = Math.round((1 - opacity) * image[o] + opacity * color.r);
      out[o + 1] = Math.round((1 - opacity) * image[o + 1] + opacity * color.g);
      out[o + 2] = Math.round((1 - opacity) * image[o + 2] + opacity * color.b);
    } else {
      out[o] = image[o];
      out[o + 1] = image[o + 1];
      out[o + 2] = image[o + 2];
    }
    out[o + 3] = 255;
  }
  return out;
}

/** Decode an 8-bit grayscale mask buffer (0/255 PNG pixels already unpacked
 * to one byte per pixel) into the 0/1 form renderOverlay expects. */
export function thresholdGray(gray: Uint8ClampedArray | Uint8Array): Uint8Array {
  const out = new Uint8Array(gray.length);
  for (let i = 0; i < gray.length; i++) {
    out[i] = gray[i] > 127 ? 1 : 0;
  }
  return out;
}
