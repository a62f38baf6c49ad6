"""Image/mask data model, file I/O, dataset splitting, and synthetic fixtures.

Pixel conventions used throughout the package:
  * images are float32 arrays of shape (H, W, C), C in {1, 3}, values in [0, 1]
  * masks are uint8 arrays of shape (H, W) with values in {0, 1}
  * probability maps are float arrays of shape (H, W) with values in [0, 1]
  * (row, col) indexing; pixel centers sit at (row + 0.5, col + 0.5)
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy import ndimage

from .errors import (
    DecodeError,
    EmptyMaskError,
    InsufficientDataError,
    ShapeError,
)

RATIO_TOL = 1e-9


@dataclass(frozen=True)
class RasterImage:
    """A (H, W, C) float image with values in [0, 1], C in {1, 3}."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3 or arr.shape[2] not in (1, 3):
            raise ShapeError(f"image must be (H, W, 1|3), got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("image contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("image values must lie in [0, 1]")
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def gray(self) -> np.ndarray:
        """Channel-average luminance, shape (H, W)."""
        return self.data.mean(axis=2)


@dataclass(frozen=True)
class BinaryMask:
    """A (H, W) mask with values in {0, 1}."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2:
            raise ShapeError(f"mask must be 2-D, got shape {arr.shape}")
        uniq = np.unique(arr)
        if not np.isin(uniq, (0, 1)).all():
            raise ValueError(f"mask values must be 0/1, got {uniq[:8]}")
        object.__setattr__(self, "data", arr.astype(np.uint8))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    def count(self) -> int:
        return int(self.data.sum())


@dataclass(frozen=True)
class ProbMap:
    """A (H, W) per-pixel probability grid with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=np.float32)
        if arr.ndim != 2:
            raise ShapeError(f"prob map must be 2-D, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("prob map contains non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValueError("prob map values must lie in [0, 1]")
        object.__setattr__(self, "data", arr)

    def threshold(self, value: float = 0.5) -> BinaryMask:
        """Binarize with a strict > comparison (ties go to background)."""
        return BinaryMask((self.data > value).astype(np.uint8))


@dataclass(frozen=True)
class LabeledSample:
    image: RasterImage
    mask: BinaryMask
    id: str

    def __post_init__(self):
        if (self.image.height, self.image.width) != (self.mask.height, self.mask.width):
            raise ShapeError(
                f"sample {self.id!r}: image {self.image.data.shape[:2]} "
                f"vs mask {self.mask.data.shape}"
            )


@dataclass(frozen=True)
class DatasetSplit:
    """Disjoint train/val/test id lists covering the input sample set."""

    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    seed: int


@dataclass
class SplitData:
    """A dataset split resolved back to its samples."""

    samples: dict[str, LabeledSample]
    split: DatasetSplit

    def _resolve(self, ids) -> list[LabeledSample]:
        return [self.samples[i] for i in ids]

    @property
    def train(self) -> list[LabeledSample]:
        return self._resolve(self.split.train)

    @property
    def val(self) -> list[LabeledSample]:
        return self._resolve(self.split.val)

    @property
    def test(self) -> list[LabeledSample]:
        return self._resolve(self.split.test)


def load_image(path) -> RasterImage:
    """Load a PNG/JPEG file as a RasterImage scaled to [0, 1].

    Grayscale files keep one channel, color files three. 16-bit inputs are
    rejected; 8-bit values are scaled by 1/255.
    """
    path = Path(path)
    try:
        with Image.open(path) as img:
            if img.mode in ("I", "I;16", "I;16B", "I;16L", "F"):
                raise DecodeError(f"{path}: unsupported bit depth (mode {img.mode})")
            if img.mode in ("L",):
                arr = np.asarray(img, dtype=np.float32) / 255.0
                return RasterImage(arr[:, :, None])
            converted = img.convert("RGB")
            arr = np.asarray(converted, dtype=np.float32) / 255.0
            return RasterImage(arr)
    except DecodeError:
        raise
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise DecodeError(f"cannot decode image {path}: {exc}") from exc


def save_image(image: RasterImage, path) -> None:
    """Write an image as 8-bit PNG (values rounded to nearest /255 level)."""
    arr = np.clip(np.rint(image.data * 255.0), 0, 255).astype(np.uint8)
    if arr.shape[2] == 1:
        pil = Image.fromarray(arr[:, :, 0], mode="L")
    else:
        pil = Image.fromarray(arr, mode="RGB")
    pil.save(Path(path), format="PNG")


def save_mask(mask: BinaryMask, path) -> None:
    """Write a mask as an 8-bit grayscale PNG with 0/255 values."""
    arr = (mask.data * 255).astype(np.uint8)
    try:
        Image.fromarray(arr, mode="L").save(Path(path), format="PNG")
    except OSError as exc:
        raise OSError(f"cannot write mask to {path}: {exc}") from exc


def load_mask(path) -> BinaryMask:
    """Load a mask PNG written by save_mask (any value > 127 counts as 1)."""
    path = Path(path)
    try:
        with Image.open(path) as img:
            arr = np.asarray(img.convert("L"))
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode mask {path}: {exc}") from exc
    return BinaryMask((arr > 127).astype(np.uint8))


def split_dataset(samples, ratios, seed: int) -> DatasetSplit:
    """Shuffle sample ids by seed and split into train/val/test.

    Sizes follow |val| = floor(r_val*n), |test| = floor(r_test*n), remainder
    to train. Raises InsufficientDataError when a positive ratio would
    receive zero samples.
    """
    r_train, r_val, r_test = ratios
    if min(ratios) < 0:
        raise ValueError(f"ratios must be nonnegative, got {ratios}")
    if abs(sum(ratios) - 1.0) > RATIO_TOL:
        raise ValueError(f"ratios must sum to 1, got {ratios}")

    ids = [s if isinstance(s, str) else s.id for s in samples]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate sample ids")
    n = len(ids)
    n_val = math.floor(r_val * n)
    n_test = math.floor(r_test * n)
    n_train = n - n_val - n_test
    for name, ratio, size in (("train", r_train, n_train),
                              ("val", r_val, n_val),
                              ("test", r_test, n_test)):
        if ratio > 0 and size == 0:
            raise InsufficientDataError(
                f"{name} split would receive 0 of {n} samples at ratio {ratio}"
            )

    order = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in order]
    return DatasetSplit(
        train=tuple(shuffled[:n_train]),
        val=tuple(shuffled[n_train:n_train + n_val]),
        test=tuple(shuffled[n_train + n_val:]),
        seed=seed,
    )


def mask_bbox(mask: BinaryMask) -> tuple[int, int, int, int]:
    """Tight foreground bounding box as (row0, col0, row1, col1), end-exclusive."""
    rows = np.flatnonzero(mask.data.any(axis=1))
    cols = np.flatnonzero(mask.data.any(axis=0))
    if rows.size == 0:
        raise EmptyMaskError("mask has no foreground pixels")
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


def extract_patch(image: RasterImage, mask: BinaryMask, pad: int = 0) -> RasterImage:
    """Zero out background and crop to the padded mask bounding box.

    The box is the tight foreground bounding box expanded by `pad` pixels on
    every side, clipped to the image bounds.
    """
    if (image.height, image.width) != (mask.height, mask.width):
        raise ShapeError("image and mask grids differ")
    r0, c0, r1, c1 = mask_bbox(mask)
    r0 = max(0, r0 - pad)
    c0 = max(0, c0 - pad)
    r1 = min(image.height, r1 + pad)
    c1 = min(image.width, c1 + pad)
    masked = image.data * mask.data[:, :, None]
    return RasterImage(masked[r0:r1, c0:c1])


def _value_noise(rng: np.random.Generator, size: int, cells: int, channels: int) -> np.ndarray:
    """Smooth per-channel noise in [0, 1] from a bilinearly upsampled coarse grid."""
    coarse = rng.uniform(0.0, 1.0, size=(cells, cells, channels))
    zoom = (size / cells, size / cells, 1)
    out = ndimage.zoom(coarse, zoom, order=1, mode="nearest", grid_mode=True)
    return np.clip(out[:size, :size], 0.0, 1.0)


def _ellipse_field(size: int, cx: float, cy: float, a: float, b: float, theta: float) -> np.ndarray:
    """Quadratic ellipse form q(r, c) evaluated at pixel centers; q <= 1 is inside."""
    ys, xs = np.mgrid[0:size, 0:size]
    x = xs + 0.5 - cx
    y = ys + 0.5 - cy
    u = x * math.cos(theta) + y * math.sin(theta)
    v = -x * math.sin(theta) + y * math.cos(theta)
    return (u / a) ** 2 + (v / b) ** 2


def synth_fixture(seed: int, n: int, size: int = 64) -> list[LabeledSample]:
    """Generate n tongue-like samples: filled ellipses over textured backgrounds.

    Each sample draws a randomized ellipse (center, axes, rotation, hue) on a
    randomized cool-toned background. The mask is the exact set of pixels
    whose centers satisfy the ellipse inequality. Deterministic given seed.
    """
    if size < 16:
        raise ValueError(f"size must be >= 16, got {size}")
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n):
        cx = rng.uniform(0.35, 0.65) * size
        cy = rng.uniform(0.35, 0.65) * size
        a = rng.uniform(0.16, 0.30) * size
        b = rng.uniform(0.13, 0.26) * size
        theta = rng.uniform(0.0, math.pi)

        # cool background: red channel kept below green/blue
        bg_g = rng.uniform(0.30, 0.75)
        bg_b = rng.uniform(0.30, 0.75)
        bg_r = rng.uniform(0.10, min(bg_g, bg_b) - 0.05)
        bg = np.array([bg_r, bg_g, bg_b], dtype=np.float32)
        texture = _value_noise(rng, size, max(2, size // 8), 3)
        img = np.clip(bg[None, None, :] * (0.75 + 0.5 * texture), 0.0, 1.0)

        # warm foreground with radial shading and speckle
        fg_r = rng.uniform(0.62, 0.92)
        fg_g = rng.uniform(0.22, 0.42)
        fg_b = rng.uniform(0.28, 0.50)
        fg = np.array([fg_r, fg_g, fg_b], dtype=np.float32)
        q = _ellipse_field(size, cx, cy, a, b, theta)
        shading = np.clip(1.05 - 0.25 * q, 0.6, 1.05)
        speckle = rng.normal(0.0, 0.02, size=(size, size, 3))
        fg_img = np.clip(fg[None, None, :] * shading[:, :, None] + speckle, 0.0, 1.0)

        # soft 1px-ish edge in the image only; the mask stays exact
        alpha = np.clip((1.0 - q) / 0.2 + 0.5, 0.0, 1.0)[:, :, None]
        img = alpha * fg_img + (1.0 - alpha) * img
        img = np.clip(img + rng.normal(0.0, 0.01, size=img.shape), 0.0, 1.0)

        mask = (q <= 1.0).astype(np.uint8)
        samples.append(
            LabeledSample(
                image=RasterImage(img.astype(np.float32)),
                mask=BinaryMask(mask),
                id=f"synth-{seed}-{i:04d}",
            )
        )
    return samples


def write_dataset(directory, samples) -> Path:
    """Write samples as PNG pairs plus a `manifest.tsv` index.

    Manifest lines are `id<TAB>image_path<TAB>mask_path` with paths relative
    to the dataset directory. Returns the manifest path.
    """
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    (directory / "masks").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        img_rel = f"images/{s.id}.png"
        mask_rel = f"masks/{s.id}.png"
        save_image(s.image, directory / img_rel)
        save_mask(s.mask, directory / mask_rel)
        lines.append(f"{s.id}\t{img_rel}\t{mask_rel}")
    manifest = directory / "manifest.tsv"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def load_dataset(directory) -> list[LabeledSample]:
    """Load samples listed in `<directory>/manifest.tsv`."""
    directory = Path(directory)
    manifest = directory / "manifest.tsv"
    if not manifest.exists():
        raise InsufficientDataError(f"no manifest.tsv in {directory}")
    samples = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        sample_id, img_rel, mask_rel = line.split("\t")
        samples.append(
            LabeledSample(
                image=load_image(directory / img_rel),
                mask=load_mask(directory / mask_rel),
                id=sample_id,
            )
        )
    return samples
