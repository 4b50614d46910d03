"""Axis-aligned box arithmetic and the person-patch affine transform.

Boxes are ``(x, y, w, h)`` in continuous pixel coordinates with the origin at
the top-left corner of the frame. No pixel-grid snapping happens here.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import cv2
import numpy as np

PATCH_W = 192
PATCH_H = 256
DEFAULT_NWD_C = 12.8


class ContractError(ValueError):
    """Raised when an input violates a documented precondition."""


@dataclass(frozen=True)
class Box:
    x: float
    y: float
    w: float
    h: float
    score: Optional[float] = None

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ContractError(f"box extents must be non-negative, got w={self.w} h={self.h}")

    @property
    def area(self) -> float:
        return self.w * self.h

    @property
    def center(self) -> Tuple[float, float]:
        return self.x + self.w / 2.0, self.y + self.h / 2.0

    @property
    def x2(self) -> float:
        return self.x + self.w

    @property
    def y2(self) -> float:
        return self.y + self.h

    def to_list(self):
        return [float(self.x), float(self.y), float(self.w), float(self.h)]

    @classmethod
    def from_list(cls, xywh: Sequence[float], score: Optional[float] = None) -> "Box":
        if len(xywh) != 4:
            raise ContractError(f"bbox needs 4 numbers, got {len(xywh)}")
        x, y, w, h = (float(v) for v in xywh)
        return cls(x, y, w, h, score)

    def with_score(self, score: Optional[float]) -> "Box":
        return Box(self.x, self.y, self.w, self.h, score)


@dataclass(frozen=True)
class NwdConfig:
    c: float = DEFAULT_NWD_C

    def __post_init__(self):
        if not self.c > 0:
            raise ContractError(f"NWD constant must be positive, got {self.c}")


def _corner_area(b: Box) -> float:
    # same arithmetic as the intersection, so iou(a, a) is exactly 1
    return (b.x2 - b.x) * (b.y2 - b.y)


def intersection(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    return iw * ih


def iou(a: Box, b: Box) -> float:
    inter = intersection(a, b)
    union = _corner_area(a) + _corner_area(b) - inter
    if union <= 0:
        return 0.0
    return min(inter / union, 1.0)


def giou(a: Box, b: Box) -> float:
    """IoU minus the fraction of the enclosing box not covered by the union."""
    inter = intersection(a, b)
    union = _corner_area(a) + _corner_area(b) - inter
    enclose = (max(a.x2, b.x2) - min(a.x, b.x)) * (max(a.y2, b.y2) - min(a.y, b.y))
    overlap = min(inter / union, 1.0) if union > 0 else 0.0
    if enclose <= 0:
        return overlap
    return overlap - max(enclose - union, 0.0) / enclose


def wasserstein2(a: Box, b: Box) -> float:
    """Closed-form W2 distance between the Gaussians fitted to two boxes.

    Each box becomes N(center, diag((w/2)^2, (h/2)^2)); for diagonal
    covariances W2 reduces to a Euclidean norm over (cx, cy, w/2, h/2).
    """
    (ax, ay), (bx, by) = a.center, b.center
    return math.sqrt(
        (ax - bx) ** 2 + (ay - by) ** 2 + (a.w / 2 - b.w / 2) ** 2 + (a.h / 2 - b.h / 2) ** 2
    )


def nwd(a: Box, b: Box, cfg: NwdConfig = NwdConfig()) -> float:
    if a.w <= 0 or a.h <= 0 or b.w <= 0 or b.h <= 0:
        raise ContractError("nwd is undefined for zero-extent boxes")
    return math.exp(-wasserstein2(a, b) / cfg.c)


def clip_box(b: Box, frame_w: float, frame_h: float) -> Box:
    x1 = min(max(b.x, 0.0), frame_w)
    y1 = min(max(b.y, 0.0), frame_h)
    x2 = min(max(b.x2, 0.0), frame_w)
    y2 = min(max(b.y2, 0.0), frame_h)
    return Box(x1, y1, max(x2 - x1, 0.0), max(y2 - y1, 0.0), b.score)


def expand_box(b: Box, factor: float) -> Box:
    if factor <= 0:
        raise ContractError(f"expansion factor must be positive, got {factor}")
    cx, cy = b.center
    w, h = b.w * factor, b.h * factor
    return Box(cx - w / 2, cy - h / 2, w, h, b.score)


@dataclass(frozen=True)
class PatchTransform:
    """Aspect-preserving map from a source box to a fixed-size centred patch.

    ``patch = (image - src_origin) * scale + pad``
    """

    scale: float
    pad_x: float
    pad_y: float
    src_box: Box
    dst_size: Tuple[int, int] = (PATCH_W, PATCH_H)

    def to_record(self):
        """Six numbers: source box, then destination width and height."""
        return self.src_box.to_list() + [int(self.dst_size[0]), int(self.dst_size[1])]

    @classmethod
    def from_record(cls, rec: Sequence[float]) -> "PatchTransform":
        x, y, w, h, dw, dh = rec
        return _fit(Box(x, y, w, h), int(dw), int(dh))

    def affine_matrix(self) -> np.ndarray:
        """2x3 image->patch matrix in continuous coordinates."""
        s = self.scale
        return np.array(
            [[s, 0.0, self.pad_x - s * self.src_box.x], [0.0, s, self.pad_y - s * self.src_box.y]]
        )


def _fit(src: Box, dst_w: int, dst_h: int) -> PatchTransform:
    if src.w <= 0 or src.h <= 0:
        raise ContractError(f"cannot build a patch from a box with extents {src.w}x{src.h}")
    scale = min(dst_w / src.w, dst_h / src.h)
    pad_x = max((dst_w - src.w * scale) / 2.0, 0.0)
    pad_y = max((dst_h - src.h * scale) / 2.0, 0.0)
    return PatchTransform(scale, pad_x, pad_y, src, (dst_w, dst_h))


def make_patch_transform(
    det: Box,
    frame_w: float,
    frame_h: float,
    expansion: float = 1.0,
    dst_size: Tuple[int, int] = (PATCH_W, PATCH_H),
) -> PatchTransform:
    """Scale ``det`` so its larger relative side fills the patch, centred.

    ``frame_w``/``frame_h`` are accepted for validation only: the source box
    may extend past the frame, in which case cropping fills with zeros.
    """
    if frame_w <= 0 or frame_h <= 0:
        raise ContractError("frame dimensions must be positive")
    src = expand_box(det, expansion) if expansion != 1.0 else det
    return _fit(src, dst_size[0], dst_size[1])


def image_to_patch(t: PatchTransform, p: Sequence[float]) -> Tuple[float, float]:
    return (
        (p[0] - t.src_box.x) * t.scale + t.pad_x,
        (p[1] - t.src_box.y) * t.scale + t.pad_y,
    )


def patch_to_image(t: PatchTransform, p: Sequence[float]) -> Tuple[float, float]:
    return (
        t.src_box.x + (p[0] - t.pad_x) / t.scale,
        t.src_box.y + (p[1] - t.pad_y) / t.scale,
    )


def patch_to_image_array(t: PatchTransform, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    out = np.empty_like(pts)
    out[..., 0] = t.src_box.x + (pts[..., 0] - t.pad_x) / t.scale
    out[..., 1] = t.src_box.y + (pts[..., 1] - t.pad_y) / t.scale
    return out


def image_to_patch_array(t: PatchTransform, pts: np.ndarray) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    out = np.empty_like(pts)
    out[..., 0] = (pts[..., 0] - t.src_box.x) * t.scale + t.pad_x
    out[..., 1] = (pts[..., 1] - t.src_box.y) * t.scale + t.pad_y
    return out


def crop_patch(image: np.ndarray, t: PatchTransform) -> np.ndarray:
    """Warp ``image`` into the patch canvas with bilinear sampling.

    OpenCV addresses pixel centres at integer indices while the transform
    works in continuous coordinates, hence the half-pixel correction.
    """
    m = t.affine_matrix()
    s = t.scale
    m[:, 2] += 0.5 * s - 0.5
    return cv2.warpAffine(
        image,
        m,
        t.dst_size,
        flags=cv2.INTER_LINEAR,
        borderMode=cv2.BORDER_CONSTANT,
        borderValue=0,
    )
