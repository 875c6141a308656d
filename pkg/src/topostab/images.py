"""Persistence images and the per-graph H0||H1 feature vector.

Each windowed interval (b, d) becomes the point (b, d - b) in
birth-persistence coordinates and spreads a normalised isotropic Gaussian
weighted by ``(d - b) / (r1 - r0)``. The image is that density sampled at the
centres of a ``res x res`` grid over ``[r0, r1] x [0, r1 - r0]`` and multiplied
by the pixel area. Rows index birth, columns index persistence, flattened
row-major.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .persistence import WindowedDiagram, build_rips, compute_persistence, window_intervals


@dataclass(frozen=True)
class PiParams:
    r0: float = 0.4
    r1: float = 1.2
    res: int = 10
    sigma: float = 0.1

    def __post_init__(self):
        if not self.r0 < self.r1:
            raise ValueError(f"need r0 < r1, got {self.r0}, {self.r1}")
        if self.res < 1:
            raise ValueError("res must be at least 1")
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")

    @property
    def dim(self) -> int:
        return 2 * self.res * self.res

    @property
    def pixel_size(self) -> float:
        return (self.r1 - self.r0) / self.res

    def pixel_centers(self):
        h = self.pixel_size
        births = self.r0 + h * (np.arange(self.res) + 0.5)
        pers = h * (np.arange(self.res) + 0.5)
        return births, pers


def persistence_image(diag, params: PiParams) -> np.ndarray:
    """Flattened ``res * res`` image of a windowed diagram."""
    iv = diag.intervals if isinstance(diag, WindowedDiagram) else np.asarray(diag, dtype=np.float64).reshape(-1, 2)
    out = np.zeros((params.res, params.res))
    if len(iv) == 0:
        return out.ravel()
    births, deaths = iv[:, 0], iv[:, 1]
    pers = deaths - births
    weight = pers / (params.r1 - params.r0)
    cb, cp = params.pixel_centers()
    s2 = params.sigma**2
    gb = np.exp(-((cb[:, None] - births[None, :]) ** 2) / (2 * s2))  # (res, k)
    gp = np.exp(-((cp[:, None] - pers[None, :]) ** 2) / (2 * s2))
    out = (gb * weight[None, :]) @ gp.T
    out *= params.pixel_size**2 / (2 * np.pi * s2)
    return out.ravel()


def hk_feature_vector(dist: np.ndarray, params: PiParams) -> np.ndarray:
    """Rips up to r1, H0/H1 diagrams, windowing, two images concatenated."""
    complex_ = build_rips(dist, params.r1)
    h0, h1 = compute_persistence(complex_)
    img0 = persistence_image(window_intervals(h0, params.r0, params.r1), params)
    img1 = persistence_image(window_intervals(h1, params.r0, params.r1), params)
    return np.concatenate([img0, img1])
