"""
Volume comparison: rotational alignment, relative error and Fourier shell
correlation.

Volumes are (n, n, n) real grids with axes (z, y, x) on centered pixel offsets.
"""
import logging
from dataclasses import dataclass

import numpy as np
import pandas as pd
from scipy import ndimage
from scipy.spatial.transform import Rotation as ScipyRotation

import cryo_forward as cf
import numcore
from numcore import RTensor

logger = logging.getLogger(__name__)

ALIGN_Q1 = 100
ALIGN_Q2 = 12


# ==================== ROTATION ====================

def rotate_volume(grid: RTensor, R: np.ndarray) -> RTensor:
    """
    u(x) = v(R^T x) by trilinear interpolation; samples outside the grid are 0.
    """
    n = grid.shape[0]
    p = numcore.pixel_offsets(n)
    z, y, x = np.meshgrid(p, p, p, indexing="ij")
    pts = np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)   # (x, y, z) columns
    src = pts @ np.asarray(R)                                   # rows R^T x
    coords = (src[:, ::-1] + n // 2).T                          # (z, y, x) index rows
    out = ndimage.map_coordinates(grid, coords, order=1, mode="constant", cval=0.0)
    return out.reshape(grid.shape)


def alignment_grid(q1: int = ALIGN_Q1, q2: int = ALIGN_Q2) -> np.ndarray:
    """Quadrature rotations with the identity prepended."""
    rotations = cf.build_quadrature(q1, q2).rotations
    return np.concatenate([np.eye(3)[None], rotations])


def _perturbations(step: float) -> np.ndarray:
    vecs = []
    for scale in (step, step / 2):
        for axis in np.eye(3):
            vecs += [scale * axis, -scale * axis]
    return ScipyRotation.from_rotvec(np.array(vecs)).as_matrix()


@dataclass(frozen=True, eq=False)
class Alignment:
    rotation: np.ndarray
    error: float
    grid_index: int
    refined: bool


def _errors(u: RTensor, v: RTensor, rotations: np.ndarray, workers: int) -> np.ndarray:
    denom = np.linalg.norm(v)
    return np.array(numcore.parallel_map(
        lambda R: float(np.linalg.norm(rotate_volume(v, R) - u) / denom), list(rotations), workers))


def align_volumes(u: RTensor,
                  v: RTensor,
                  search: np.ndarray | None = None,
                  refine: bool = True,
                  workers: int = 1) -> Alignment:
    """
    Rotation R from the search grid minimizing |R.v - u|_F, followed by one
    pass over small perturbations of the winner (kept only if strictly better).
    Ties go to the lowest grid index.

    Raises:
        ValueError: empty search grid, shape mismatch or zero v
    """
    if u.shape != v.shape:
        raise ValueError(f"volume shapes differ: {u.shape} vs {v.shape}")
    if np.linalg.norm(v) == 0:
        raise ValueError("reference volume has zero norm")
    search = alignment_grid() if search is None else np.asarray(search)
    if len(search) == 0:
        raise ValueError("search grid is empty")
    errors = _errors(u, v, search, workers)
    best = int(np.argmin(errors))
    R, err, refined = search[best], float(errors[best]), False
    if refine and len(search) > 1:
        # about half the in-plane spacing of the default grid
        neighbors = _perturbations(np.pi / ALIGN_Q2) @ R
        local = _errors(u, v, neighbors, workers)
        j = int(np.argmin(local))
        if local[j] < err:
            R, err, refined = neighbors[j], float(local[j]), True
    logger.debug("Aligned volumes: grid index %d, error %.4f%s", best, err, " (refined)" if refined else "")
    return Alignment(R, err, best, refined)


def relative_error_volume(u: RTensor, v: RTensor, search: np.ndarray | None = None,
                          workers: int = 1) -> float:
    """min over the search grid of |R.v - u|_F / |v|_F."""
    return align_volumes(u, v, search, workers=workers).error


# ==================== FOURIER SHELL CORRELATION ====================

@dataclass(frozen=True, eq=False)
class FscCurve:
    shell_freq: RTensor     # 1 / Angstrom
    correlation: RTensor
    voxel_size: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"shell_freq": self.shell_freq, "correlation": self.correlation})


def fsc(u: RTensor, v: RTensor, voxel_size: float = 1.0) -> FscCurve:
    """
    Per-shell normalized correlation of the 3D transforms, shells one
    frequency bin wide from 0 to n // 2.

    Raises:
        ValueError: shape mismatch or an empty shell
    """
    if u.shape != v.shape:
        raise ValueError(f"volume shapes differ: {u.shape} vs {v.shape}")
    n = u.shape[0]
    p = numcore.pixel_offsets(n)
    z, y, x = np.meshgrid(p, p, p, indexing="ij")
    labels = np.rint(np.sqrt(x * x + y * y + z * z)).astype(int)
    shells = np.arange(n // 2 + 1)
    counts = ndimage.sum(np.ones_like(u), labels=labels, index=shells)
    if np.any(counts == 0):
        raise ValueError(f"grid n={n} leaves an empty frequency shell")
    F1 = numcore.fft(u, dims=(0, 1, 2))
    F2 = numcore.fft(v, dims=(0, 1, 2))
    num = ndimage.sum(np.real(F1 * np.conj(F2)), labels=labels, index=shells)
    t1 = ndimage.sum(np.abs(F1) ** 2, labels=labels, index=shells)
    t2 = ndimage.sum(np.abs(F2) ** 2, labels=labels, index=shells)
    denom = np.sqrt(t1 * t2)
    corr = np.divide(num, denom, out=np.zeros_like(num), where=denom > 0)
    return FscCurve(shells / (n * voxel_size), np.clip(corr, -1.0, 1.0), voxel_size)


def resolution(curve: FscCurve, threshold: float = 0.5) -> float:
    """
    Inverse frequency (Angstrom) where the curve first drops below threshold,
    interpolating linearly between shells. A curve that never drops reports
    the Nyquist limit 2 * voxel_size.
    """
    c, f = curve.correlation, curve.shell_freq
    below = np.flatnonzero(c < threshold)
    if len(below) == 0:
        return 2.0 * curve.voxel_size
    i = int(below[0])
    if i == 0:
        return float("inf")
    t = (c[i - 1] - threshold) / (c[i - 1] - c[i])
    freq = f[i - 1] + t * (f[i] - f[i - 1])
    return float(1.0 / freq)


def aligned_fsc(reference: RTensor, estimate: RTensor, voxel_size: float = 1.0,
                search: np.ndarray | None = None, workers: int = 1) -> tuple[FscCurve, Alignment]:
    """FSC after rotating the estimate onto the reference."""
    alignment = align_volumes(reference, estimate, search, workers=workers)
    return fsc(reference, rotate_volume(estimate, alignment.rotation), voxel_size), alignment
