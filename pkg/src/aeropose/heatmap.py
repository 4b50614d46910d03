"""Gaussian heatmap targets, the MSE heatmap objective, and peak decoding.

Coordinate convention: heatmap cell ``(row, col)`` samples the patch point
``(col * stride, row * stride)``. ``encode`` and ``decode`` both use it, so
a keypoint lying on a cell sample point decodes back exactly.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import maximum_filter

from .geometry import PATCH_H, PATCH_W, ContractError, PatchTransform, patch_to_image_array
from .keypoints import NUM_KEYPOINTS, KeypointSet

STRIDE = 4
HM_W = PATCH_W // STRIDE
HM_H = PATCH_H // STRIDE

_HEADER = struct.Struct("<4sIIII")
_MAGIC = b"HMS1"


@dataclass(frozen=True)
class CodecConfig:
    sigma: float = 2.0
    peak_window: int = 1
    kp_conf_threshold: float = 0.4
    refine: bool = True
    stride: int = STRIDE

    def __post_init__(self):
        if not self.sigma > 0:
            raise ContractError(f"sigma must be positive, got {self.sigma}")
        if self.peak_window < 1:
            raise ContractError(f"peak_window must be >= 1, got {self.peak_window}")
        if not 0.0 <= self.kp_conf_threshold <= 1.0:
            raise ContractError(f"threshold must lie in [0, 1], got {self.kp_conf_threshold}")
        if self.stride < 1:
            raise ContractError(f"stride must be >= 1, got {self.stride}")


@dataclass(frozen=True, eq=False)
class HeatmapStack:
    maps: np.ndarray  # (channels, height, width)
    stride: int = STRIDE

    def __post_init__(self):
        maps = np.asarray(self.maps, dtype=np.float32)
        if maps.ndim != 3:
            raise ContractError(f"heatmaps must be 3-D, got shape {maps.shape}")
        object.__setattr__(self, "maps", maps)

    @property
    def shape(self):
        return self.maps.shape

    @classmethod
    def zeros(cls, cfg: CodecConfig = CodecConfig(), size=(PATCH_W, PATCH_H)) -> "HeatmapStack":
        w, h = size[0] // cfg.stride, size[1] // cfg.stride
        return cls(np.zeros((NUM_KEYPOINTS, h, w), np.float32), cfg.stride)

    def to_bytes(self) -> bytes:
        c, h, w = self.maps.shape
        header = _HEADER.pack(_MAGIC, c, h, w, self.stride)
        return header + np.ascontiguousarray(self.maps, dtype="<f4").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "HeatmapStack":
        if len(buf) < _HEADER.size:
            raise ContractError("heatmap payload shorter than its header")
        magic, c, h, w, stride = _HEADER.unpack_from(buf)
        if magic != _MAGIC:
            raise ContractError(f"bad heatmap magic {magic!r}")
        body = buf[_HEADER.size:]
        if len(body) != 4 * c * h * w:
            raise ContractError(f"heatmap payload has {len(body)} bytes, expected {4 * c * h * w}")
        maps = np.frombuffer(body, dtype="<f4").reshape(c, h, w).astype(np.float32)
        return cls(maps, stride)


def encode(kps: KeypointSet, cfg: CodecConfig = CodecConfig(), size=(PATCH_W, PATCH_H)) -> HeatmapStack:
    """Render one Gaussian per visible keypoint (patch coordinates in)."""
    w, h = size[0] // cfg.stride, size[1] // cfg.stride
    cols = np.arange(w, dtype=np.float64)
    rows = np.arange(h, dtype=np.float64)
    maps = np.zeros((NUM_KEYPOINTS, h, w), np.float64)
    for i in range(NUM_KEYPOINTS):
        if kps.v[i] == 0:
            continue
        mx, my = kps.xy[i] / cfg.stride
        gx = np.exp(-((cols - mx) ** 2) / (2 * cfg.sigma**2))
        gy = np.exp(-((rows - my) ** 2) / (2 * cfg.sigma**2))
        maps[i] = np.outer(gy, gx)
    return HeatmapStack(maps.astype(np.float32), cfg.stride)


def mse_loss(pred: HeatmapStack, gt: HeatmapStack, vis_mask) -> float:
    """Mean squared error over the channels selected by ``vis_mask``.

    An all-false mask yields 0.0.
    """
    if pred.maps.shape != gt.maps.shape:
        raise ContractError(f"shape mismatch {pred.maps.shape} vs {gt.maps.shape}")
    mask = np.asarray(vis_mask, dtype=bool)
    if mask.shape != (pred.maps.shape[0],):
        raise ContractError(f"mask needs {pred.maps.shape[0]} entries, got {mask.shape}")
    if not mask.any():
        return 0.0
    diff = pred.maps[mask].astype(np.float64) - gt.maps[mask].astype(np.float64)
    return float(np.mean(diff**2))


def find_peaks(hm: HeatmapStack, cfg: CodecConfig = CodecConfig()):
    """Per-channel peak cell, value, and refined (col, row) position.

    Peaks are the local maxima surviving a (2*peak_window+1)^2 max filter;
    the strongest one (first in row-major order on ties) wins. Refinement
    moves a quarter cell toward the larger neighbour on each axis.
    """
    maps = hm.maps.astype(np.float64)
    c, h, w = maps.shape
    size = (1, 2 * cfg.peak_window + 1, 2 * cfg.peak_window + 1)
    is_peak = maps == maximum_filter(maps, size=size, mode="constant", cval=-np.inf)
    cand = np.where(is_peak, maps, -np.inf).reshape(c, -1)
    flat = np.argmax(cand, axis=1)
    rows, cols = np.divmod(flat, w)
    vals = maps.reshape(c, -1)[np.arange(c), flat]
    pos = np.stack([cols, rows], axis=1).astype(np.float64)
    if cfg.refine:
        for k in range(c):
            r, q = rows[k], cols[k]
            m = maps[k]
            if 0 < q < w - 1:
                pos[k, 0] += 0.25 * np.sign(m[r, q + 1] - m[r, q - 1])
            if 0 < r < h - 1:
                pos[k, 1] += 0.25 * np.sign(m[r + 1, q] - m[r - 1, q])
    return pos, vals


def decode(hm: HeatmapStack, t: PatchTransform, cfg: CodecConfig = CodecConfig()) -> KeypointSet:
    """Heatmaps to image-frame keypoints with confidences.

    Points whose peak is below ``kp_conf_threshold`` keep their raw
    coordinates but are flagged ``v = 0``.
    """
    pos, vals = find_peaks(hm, cfg)
    image_xy = patch_to_image_array(t, pos * hm.stride)
    conf = np.clip(vals, 0.0, None)
    v = np.where(conf < cfg.kp_conf_threshold, 0, 2)
    return KeypointSet(image_xy, v, conf=vals)
