"""Preservation metrics on voxel point sets and axis-aligned projections.

Projections stand in for rendered views: each pixel is the mean feature
magnitude of the occupied voxels along one axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.spatial import cKDTree

from .errors import ParameterError, ShapeError
from .lattice import BinaryMask3D, DenseLatentGrid, SparseLatentSet, scatter_features

PSNR_CAP = 99.0
SSIM_WINDOW = 7
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
AXES = {"x": 0, "y": 1, "z": 2}


@dataclass(frozen=True, eq=False)
class PointSet:
    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ParameterError("point coordinates must be finite")
        object.__setattr__(self, "points", p)

    def __len__(self) -> int:
        return len(self.points)

    @classmethod
    def from_coords(cls, coords, resolution: int) -> "PointSet":
        """Voxel centers scaled into the unit cube."""
        return cls((np.asarray(coords, dtype=np.float64).reshape(-1, 3) + 0.5) / resolution)

    @classmethod
    def from_occupancy(cls, occupancy: np.ndarray, where: np.ndarray | None = None) -> "PointSet":
        occ = np.asarray(occupancy, dtype=bool)
        if where is not None:
            occ = occ & np.asarray(where, dtype=bool)
        return cls.from_coords(np.argwhere(occ), occ.shape[0])

    @classmethod
    def from_slat(cls, slat: SparseLatentSet) -> "PointSet":
        return cls.from_coords(slat.coords, slat.resolution)


def _points(x) -> np.ndarray:
    return x.points if isinstance(x, PointSet) else PointSet(x).points


def chamfer(a, b) -> float:
    """Half the sum of both directed mean nearest-neighbour distances (unsquared)."""
    pa, pb = _points(a), _points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise ParameterError("chamfer distance needs two nonempty point sets")
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


def chamfer_bruteforce(a, b) -> float:
    pa, pb = _points(a), _points(b)
    if len(pa) == 0 or len(pb) == 0:
        raise ParameterError("chamfer distance needs two nonempty point sets")
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=-1))
    return 0.5 * (float(d.min(axis=1).mean()) + float(d.min(axis=0).mean()))


# -- projections --------------------------------------------------------------


def _axis(axis) -> int:
    if isinstance(axis, str):
        if axis not in AXES:
            raise ParameterError(f"axis must be one of x, y, z; got {axis!r}")
        return AXES[axis]
    if axis not in (0, 1, 2):
        raise ParameterError(f"axis must be 0, 1 or 2; got {axis!r}")
    return int(axis)


def project_ortho(grid, axis="z") -> np.ndarray:
    """Mean L2 feature magnitude of occupied voxels along ``axis``; 0 for empty columns.

    A voxel counts as occupied when any of its channels is nonzero.
    """
    values = grid.values if isinstance(grid, DenseLatentGrid) else np.asarray(grid, dtype=np.float64)
    if values.ndim == 3:
        values = values[..., None]
    a = _axis(axis)
    mag = np.sqrt(np.sum(values**2, axis=-1))
    occ = np.any(values != 0, axis=-1)
    count = occ.sum(axis=a)
    total = np.where(occ, mag, 0.0).sum(axis=a)
    return np.where(count > 0, total / np.maximum(count, 1), 0.0)


def project_mask(mask, axis="z") -> np.ndarray:
    """Pixels whose column meets the 3D mask."""
    bits = mask.bits if isinstance(mask, BinaryMask3D) else np.asarray(mask, dtype=bool)
    return bits.any(axis=_axis(axis))


def normalize_pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Shared min-max rescale of two images into [0, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    lo = min(a.min(), b.min())
    span = max(a.max(), b.max()) - lo
    if span == 0:
        return np.zeros_like(a), np.zeros_like(b)
    return (a - lo) / span, (b - lo) / span


# -- image metrics ------------------------------------------------------------------


def _check_images(a, b, mask2d):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    m = np.asarray(mask2d).astype(bool)
    if a.shape != b.shape or a.shape != m.shape or a.ndim != 2:
        raise ShapeError(f"image/mask shapes differ: {a.shape}, {b.shape}, {m.shape}")
    if not m.any():
        raise ParameterError("metric mask selects no pixels")
    return a, b, m


def masked_psnr(a, b, mask2d) -> float:
    """PSNR over masked pixels on unit range, capped at 99 dB."""
    a, b, m = _check_images(a, b, mask2d)
    mse = float(np.mean((a[m] - b[m]) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def ssim_map(a, b, window: int = SSIM_WINDOW) -> np.ndarray:
    """Local SSIM for every fully contained ``window x window`` patch (uniform weights, population moments)."""
    wa = sliding_window_view(a, (window, window))
    wb = sliding_window_view(b, (window, window))
    mu_a = wa.mean(axis=(-2, -1))
    mu_b = wb.mean(axis=(-2, -1))
    var_a = wa.var(axis=(-2, -1))
    var_b = wb.var(axis=(-2, -1))
    cov = (wa * wb).mean(axis=(-2, -1)) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def masked_ssim(a, b, mask2d, window: int = SSIM_WINDOW) -> float:
    """Mean local SSIM over windows whose center pixel is masked."""
    a, b, m = _check_images(a, b, mask2d)
    if min(a.shape) < window:
        raise ShapeError(f"images {a.shape} smaller than the {window}x{window} window")
    half = window // 2
    centers = m[half : a.shape[0] - half, half : a.shape[1] - half]
    if not centers.any():
        raise ParameterError("no SSIM window is centered on a masked pixel")
    return float(ssim_map(a, b, window)[centers].mean())


# -- asset comparison ---------------------------------------------------------------


def preservation_metrics(source, edited, region: BinaryMask3D, axis="z", threshold: float = 0.5) -> dict:
    """Chamfer over the preserved occupancy and masked image metrics on projections.

    The image mask is the complement of the projected edit region.
    """
    keep3d = ~region.bits
    occ_a = source.st_grid.values[..., 0] > threshold
    occ_b = edited.st_grid.values[..., 0] > threshold
    out = {}
    pa = PointSet.from_occupancy(occ_a, keep3d)
    pb = PointSet.from_occupancy(occ_b, keep3d)
    out["chamfer_preserved"] = chamfer(pa, pb) if len(pa) and len(pb) else (0.0 if len(pa) == len(pb) else float("inf"))
    img_a = project_ortho(scatter_features(source.slat), axis)
    img_b = project_ortho(scatter_features(edited.slat), axis)
    na, nb = normalize_pair(img_a, img_b)
    mask2d = ~project_mask(region, axis)
    out["image_mask_pixels"] = int(mask2d.sum())
    if mask2d.any():
        out["masked_psnr"] = masked_psnr(na, nb, mask2d)
        try:
            out["masked_ssim"] = masked_ssim(na, nb, mask2d)
        except (ParameterError, ShapeError) as exc:
            out["masked_ssim_note"] = str(exc)
    return out

