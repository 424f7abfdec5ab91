"""Triplane scene representation: three axis-aligned feature grids whose
per-point bilinear samples multiply into a single feature vector."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import TapeTensor


@dataclass
class Triplane:
    """Feature planes hw [F, N_H, N_W], hz [F, N_H, N_Z], wz [F, N_W, N_Z].

    Grid coordinates are (h, w, z) in (-1, 1); each plane is indexed by the
    two axes in its name.
    """

    hw: TapeTensor
    hz: TapeTensor
    wz: TapeTensor

    def __post_init__(self):
        f, nh, nw = self.hw.shape
        f2, nh2, nz = self.hz.shape
        f3, nw2, nz2 = self.wz.shape
        if not (f == f2 == f3):
            raise ValueError(f"planes disagree on channels: {f}, {f2}, {f3}")
        if nh != nh2 or nw != nw2 or nz != nz2:
            raise ValueError(
                f"planes disagree on shared axis resolutions: "
                f"hw={self.hw.shape}, hz={self.hz.shape}, wz={self.wz.shape}"
            )

    @property
    def channels(self) -> int:
        return self.hw.shape[0]

    @property
    def resolutions(self) -> tuple[int, int, int]:
        return self.hw.shape[1], self.hw.shape[2], self.hz.shape[2]

    @property
    def planes(self) -> tuple[TapeTensor, TapeTensor, TapeTensor]:
        return self.hw, self.hz, self.wz

    @classmethod
    def create(cls, channels: int, n_h: int, n_w: int, n_z: int,
               rng: np.random.Generator | None = None, init_range: float = 0.1,
               dtype=np.float64) -> "Triplane":
        """Planes filled from a zero-mean uniform distribution of total width
        ``init_range`` (zeros when no rng is given)."""
        def make(shape):
            if rng is None:
                data = np.zeros(shape, dtype=dtype)
            else:
                half = init_range / 2.0
                data = rng.uniform(-half, half, size=shape).astype(dtype)
            return TapeTensor(data, requires_grad=True)

        return cls(
            hw=make((channels, n_h, n_w)),
            hz=make((channels, n_h, n_z)),
            wz=make((channels, n_w, n_z)),
        )


def _plane_coords(points: np.ndarray, row_axis: int, col_axis: int) -> TapeTensor:
    # bilinear_sample2d expects (u=column, v=row)
    return dc.constant(np.stack([points[:, col_axis], points[:, row_axis]], axis=1))


def sample_triplane(tri: Triplane, grid_points: np.ndarray) -> TapeTensor:
    """Hadamard-aggregated bilinear features for a batch of grid points [n, 3]."""
    pts = np.asarray(grid_points, dtype=np.float64)
    f_hw, _ = dc.bilinear_sample2d(tri.hw, _plane_coords(pts, 0, 1))
    f_hz, _ = dc.bilinear_sample2d(tri.hz, _plane_coords(pts, 0, 2))
    f_wz, _ = dc.bilinear_sample2d(tri.wz, _plane_coords(pts, 1, 2))
    return dc.mul(dc.mul(f_hw, f_hz), f_wz)


def _plane_tv(plane: TapeTensor) -> TapeTensor:
    _, rows, cols = plane.shape
    terms = []
    if rows > 1:
        d = dc.sub(dc.slice_axis(plane, 1, 1, rows), dc.slice_axis(plane, 1, 0, rows - 1))
        terms.append(dc.tsum(dc.mul(d, d)))
    if cols > 1:
        d = dc.sub(dc.slice_axis(plane, 2, 1, cols), dc.slice_axis(plane, 2, 0, cols - 1))
        terms.append(dc.tsum(dc.mul(d, d)))
    if not terms:
        return dc.constant(0.0)
    total = terms[0]
    for t in terms[1:]:
        total = dc.add(total, t)
    return total


def tv_loss(tri: Triplane) -> TapeTensor:
    """Total-variation penalty: squared adjacent-cell differences, each plane
    normalized by its own cell count, averaged over the three planes."""
    total = None
    for plane in tri.planes:
        cells = plane.shape[1] * plane.shape[2]
        term = dc.scale(_plane_tv(plane), 1.0 / cells)
        total = term if total is None else dc.add(total, term)
    return dc.scale(total, 1.0 / 3.0)
