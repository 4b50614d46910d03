"""Down-then-up resampling that mimics small, distant persons."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import cv2
import numpy as np

from .geometry import ContractError


@dataclass(frozen=True)
class DownscaleSpec:
    min_factor: float = 0.05
    max_factor: float = 0.20
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.min_factor <= self.max_factor < 1.0:
            raise ContractError(
                f"need 0 <= min_factor <= max_factor < 1, got {self.min_factor}, {self.max_factor}"
            )

    def generator(self) -> np.random.Generator:
        return np.random.default_rng(self.seed)


def sample_factor(spec: DownscaleSpec, stream: np.random.Generator) -> float:
    # always consume one draw so call counts stay aligned across specs
    u = stream.random()
    return spec.min_factor + (spec.max_factor - spec.min_factor) * u


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def reduced_size(width: int, height: int, factor: float):
    return (
        max(1, _round_half_up((1.0 - factor) * width)),
        max(1, _round_half_up((1.0 - factor) * height)),
    )


def downscale_with_factor(patch: np.ndarray, factor: float) -> np.ndarray:
    if patch.size == 0 or patch.ndim < 2:
        raise ContractError("cannot downscale an empty patch")
    h, w = patch.shape[:2]
    sw, sh = reduced_size(w, h, factor)
    if (sw, sh) == (w, h):
        return patch.copy()
    small = cv2.resize(patch, (sw, sh), interpolation=cv2.INTER_LINEAR)
    return cv2.resize(small, (w, h), interpolation=cv2.INTER_LINEAR)


def downscale_patch(
    patch: np.ndarray, spec: DownscaleSpec, stream: Optional[np.random.Generator] = None
) -> np.ndarray:
    """Resample ``patch`` through a smaller size and back.

    The factor comes from ``stream``; without one, a fresh generator seeded
    from ``spec.seed`` is used, which makes single calls reproducible.
    """
    if patch.size == 0 or patch.ndim < 2:
        raise ContractError("cannot downscale an empty patch")
    if stream is None:
        stream = spec.generator()
    return downscale_with_factor(patch, sample_factor(spec, stream))
