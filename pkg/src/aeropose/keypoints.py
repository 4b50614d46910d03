"""COCO 17-keypoint conventions and the KeypointSet value type."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

NUM_KEYPOINTS = 17

KEYPOINT_NAMES = (
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
)

FACIAL = tuple(range(0, 5))
BODY = tuple(range(5, 17))

# COCO per-keypoint sigmas; OKS uses k = 2 * sigma.
COCO_SIGMAS = np.array(
    [0.26, 0.25, 0.25, 0.35, 0.35, 0.79, 0.79, 0.72, 0.72, 0.62, 0.62, 1.07, 1.07, 0.87, 0.87, 0.89, 0.89]
) / 10.0
COCO_KP_K = tuple(float(k) for k in 2.0 * COCO_SIGMAS)

# 0-indexed limb pairs, COCO ordering.
SKELETON = (
    (15, 13), (13, 11), (16, 14), (14, 12), (11, 12), (5, 11), (6, 12), (5, 6), (5, 7),
    (6, 8), (7, 9), (8, 10), (1, 2), (0, 1), (0, 2), (1, 3), (2, 4), (3, 5), (4, 6),
)


@dataclass(frozen=True, eq=False)
class KeypointSet:
    """17 keypoints as ``xy`` (17, 2), visibility ``v`` (17,) in {0, 1, 2}
    and optional per-point ``conf`` (17,)."""

    xy: np.ndarray
    v: np.ndarray
    conf: Optional[np.ndarray] = None

    def __post_init__(self):
        xy = np.asarray(self.xy, dtype=np.float64).reshape(NUM_KEYPOINTS, 2)
        v = np.asarray(self.v, dtype=np.int64).reshape(NUM_KEYPOINTS)
        if not np.isin(v, (0, 1, 2)).all():
            raise ValueError(f"visibility flags must be 0, 1 or 2, got {sorted(set(v.tolist()))}")
        object.__setattr__(self, "xy", xy)
        object.__setattr__(self, "v", v)
        if self.conf is not None:
            object.__setattr__(
                self, "conf", np.asarray(self.conf, dtype=np.float64).reshape(NUM_KEYPOINTS)
            )

    @property
    def num_visible(self) -> int:
        return int((self.v > 0).sum())

    def to_flat(self, third: str = "v") -> list:
        """Flat 51-number COCO list; ``third`` picks visibility or confidence."""
        col = self.conf if third == "conf" else self.v
        if col is None:
            raise ValueError("no confidences stored")
        out = np.empty((NUM_KEYPOINTS, 3))
        out[:, :2] = self.xy
        out[:, 2] = col
        return [int(x) if third == "v" and i % 3 == 2 else float(x) for i, x in enumerate(out.ravel())]

    @classmethod
    def from_flat(cls, flat: Sequence[float], third: str = "v") -> "KeypointSet":
        arr = np.asarray(flat, dtype=np.float64)
        if arr.size != 3 * NUM_KEYPOINTS:
            raise ValueError(f"expected {3 * NUM_KEYPOINTS} keypoint numbers, got {arr.size}")
        arr = arr.reshape(NUM_KEYPOINTS, 3)
        if third == "conf":
            return cls(arr[:, :2], np.where(arr[:, 2] > 0, 2, 0), conf=arr[:, 2])
        if not np.all(arr[:, 2] == np.round(arr[:, 2])):
            raise ValueError("visibility flags must be integers")
        return cls(arr[:, :2], arr[:, 2].astype(np.int64))

    def __eq__(self, other):
        if not isinstance(other, KeypointSet):
            return NotImplemented
        if (self.conf is None) != (other.conf is None):
            return False
        same_conf = self.conf is None or np.array_equal(self.conf, other.conf)
        return np.array_equal(self.xy, other.xy) and np.array_equal(self.v, other.v) and same_conf

    __hash__ = None
