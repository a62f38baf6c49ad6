"""Spatial prompts (boxes, labeled points, hybrids) and their generation.

Coordinates follow image axes: x is the column, y is the row. Boxes are
inclusive-exclusive: a pixel (x, y) is inside iff x0 <= x < x1 and
y0 <= y < y1. The JSON wire format is:

    {"box": [x0, y0, x1, y1]?, "points": [{"x": .., "y": .., "label": "fg"|"bg"}]?}

with at least one of the two keys present.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .errors import (
    EmptyMaskError,
    EmptyPromptError,
    InsufficientPixelsError,
    NoDetectionError,
)
from .imaging import BinaryMask, RasterImage, mask_bbox

CONFIDENCE_FLOOR = 0.25
DEFAULT_N_FG = 4
DEFAULT_N_BG = 4

FG = "fg"
BG = "bg"


@dataclass(frozen=True)
class BoxPrompt:
    x0: int
    y0: int
    x1: int
    y1: int

    def __post_init__(self):
        if not (0 <= self.x0 < self.x1 and 0 <= self.y0 < self.y1):
            raise ValueError(f"degenerate box ({self.x0},{self.y0},{self.x1},{self.y1})")

    def clipped(self, width: int, height: int) -> "BoxPrompt":
        return BoxPrompt(
            x0=max(0, self.x0),
            y0=max(0, self.y0),
            x1=min(width, self.x1),
            y1=min(height, self.y1),
        )


@dataclass(frozen=True)
class PointPrompt:
    """Labeled points [(x, y, label)], label in {"fg", "bg"}."""

    points: tuple[tuple[int, int, str], ...]

    def __post_init__(self):
        if not self.points:
            raise EmptyPromptError("point prompt must contain at least one point")
        for x, y, label in self.points:
            if label not in (FG, BG):
                raise ValueError(f"unknown point label {label!r}")
            if x < 0 or y < 0:
                raise ValueError(f"negative point coordinate ({x},{y})")


@dataclass(frozen=True)
class HybridPrompt:
    box: BoxPrompt
    points: PointPrompt


Prompt = BoxPrompt | PointPrompt | HybridPrompt


@dataclass(frozen=True)
class Detection:
    box: BoxPrompt
    confidence: float


class DetectorInterface(Protocol):
    def detect(self, image: RasterImage) -> list[Detection]: ...


class MaskOracleDetector:
    """Ground-truth fallback detector: returns the mask bounding box.

    Stands in for an object detector during training and tests; pair each
    image with its mask via the constructor.
    """

    def __init__(self, masks: dict[str, BinaryMask] | None = None, pad: int = 2):
        self.masks = masks or {}
        self.pad = pad
        self._current: BinaryMask | None = None

    def bind(self, mask: BinaryMask) -> "MaskOracleDetector":
        self._current = mask
        return self

    def detect(self, image: RasterImage) -> list[Detection]:
        if self._current is None:
            return []
        try:
            box = box_from_mask(self._current, pad=self.pad)
        except EmptyMaskError:
            return []
        box = box.clipped(image.width, image.height)
        return [Detection(box=box, confidence=1.0)]


def box_from_mask(mask: BinaryMask, pad: int = 0) -> BoxPrompt:
    """Tight foreground box expanded by pad, clipped to the mask grid."""
    r0, c0, r1, c1 = mask_bbox(mask)
    return BoxPrompt(
        x0=max(0, c0 - pad),
        y0=max(0, r0 - pad),
        x1=min(mask.width, c1 + pad),
        y1=min(mask.height, r1 + pad),
    )


def detect_box(image: RasterImage, detector: DetectorInterface) -> BoxPrompt:
    """Highest-confidence detector box above the confidence floor."""
    detections = detector.detect(image)
    usable = [d for d in detections if d.confidence >= CONFIDENCE_FLOOR]
    if not usable:
        raise NoDetectionError(
            f"no detection with confidence >= {CONFIDENCE_FLOOR} "
            f"({len(detections)} raw detections)"
        )
    best = max(usable, key=lambda d: d.confidence)
    return best.box.clipped(image.width, image.height)


def sample_points(mask: BinaryMask, n_fg: int = DEFAULT_N_FG, n_bg: int = DEFAULT_N_BG,
                  seed: int = 0) -> PointPrompt:
    """Sample labeled points uniformly without replacement from the mask.

    n_fg points come from foreground pixels and n_bg from background, in
    seed-determined order (foreground first).
    """
    if n_fg == 0 and n_bg == 0:
        raise EmptyPromptError("requested zero points; empty prompts are forbidden")
    rng = np.random.default_rng(seed)
    points: list[tuple[int, int, str]] = []
    for label, n_wanted, selector in ((FG, n_fg, 1), (BG, n_bg, 0)):
        if n_wanted == 0:
            continue
        rows, cols = np.nonzero(mask.data == selector)
        if rows.size < n_wanted:
            raise InsufficientPixelsError(
                f"mask has {rows.size} {label} pixels, need {n_wanted}"
            )
        chosen = rng.choice(rows.size, size=n_wanted, replace=False)
        points.extend((int(cols[i]), int(rows[i]), label) for i in chosen)
    return PointPrompt(points=tuple(points))


def make_hybrid(box: BoxPrompt, points: PointPrompt) -> HybridPrompt:
    """Pair a box with points verbatim; no geometric reconciliation."""
    return HybridPrompt(box=box, points=points)


def prompt_to_json(prompt: Prompt) -> dict:
    """Serialize a prompt to the wire-format dict."""
    if isinstance(prompt, HybridPrompt):
        out = prompt_to_json(prompt.box)
        out.update(prompt_to_json(prompt.points))
        return out
    if isinstance(prompt, BoxPrompt):
        return {"box": [prompt.x0, prompt.y0, prompt.x1, prompt.y1]}
    if isinstance(prompt, PointPrompt):
        return {"points": [{"x": x, "y": y, "label": label} for x, y, label in prompt.points]}
    raise TypeError(f"not a prompt: {type(prompt)!r}")


def prompt_from_json(obj: dict, width: int | None = None, height: int | None = None) -> Prompt:
    """Parse the wire format, optionally validating against image bounds."""
    if not isinstance(obj, dict) or not ("box" in obj or "points" in obj):
        raise ValueError("prompt JSON needs a 'box' and/or 'points' key")
    box = None
    points = None
    if "box" in obj:
        coords = obj["box"]
        if not (isinstance(coords, (list, tuple)) and len(coords) == 4):
            raise ValueError(f"'box' must be [x0, y0, x1, y1], got {coords!r}")
        box = BoxPrompt(*(int(v) for v in coords))
        if width is not None and (box.x1 > width or box.y1 > height):
            raise ValueError("box exceeds image bounds")
    if "points" in obj:
        raw = obj["points"]
        if not isinstance(raw, list) or not raw:
            raise ValueError("'points' must be a nonempty list")
        parsed = []
        for p in raw:
            try:
                x, y, label = int(p["x"]), int(p["y"]), p["label"]
            except (KeyError, TypeError) as exc:
                raise ValueError(f"bad point entry {p!r}") from exc
            if label not in (FG, BG):
                raise ValueError(f"point label must be 'fg' or 'bg', got {label!r}")
            if width is not None and not (0 <= x < width and 0 <= y < height):
                raise ValueError(f"point ({x},{y}) outside image bounds")
            parsed.append((x, y, label))
        points = PointPrompt(points=tuple(parsed))
    if box is not None and points is not None:
        return HybridPrompt(box=box, points=points)
    return box if box is not None else points
