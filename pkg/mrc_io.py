"""
MRC2014 density maps: reading, Fourier cropping to the working grid, writing.
"""
import logging
from dataclasses import dataclass
from pathlib import Path

import mrcfile
import numpy as np

import numcore
from errors import ArtifactError
from numcore import RTensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class DensityMap:
    """Cubic map with axes (z, y, x) and isotropic voxel size in Angstrom."""
    data: RTensor
    voxel_size: float

    @property
    def n(self) -> int:
        return self.data.shape[0]


def load_mrc(path: str | Path) -> DensityMap:
    """
    Read a cubic MRC map as float64.

    Raises:
        ArtifactError: unreadable file or non-cubic map
    """
    try:
        with mrcfile.open(path, permissive=True) as mrc:
            if mrc.data is None:
                raise ArtifactError(f"{path} has no data block")
            data = np.asarray(mrc.data, dtype=np.float64).copy()
            voxel = float(mrc.voxel_size.x)
    except ValueError as e:
        raise ArtifactError(f"cannot parse MRC file {path}: {e}") from e
    except OSError as e:
        if isinstance(e, ArtifactError):
            raise
        raise ArtifactError(f"cannot read {path}: {e}") from e
    if data.ndim != 3 or len(set(data.shape)) != 1:
        raise ArtifactError(f"{path} is not a cubic volume (shape {data.shape})")
    if voxel <= 0:
        voxel = 1.0
        logger.warning("%s has no voxel size, assuming 1 A", path)
    logger.debug("Loaded %s: n=%d, voxel %.3f A", path, data.shape[0], voxel)
    return DensityMap(data, voxel)


def save_mrc(path: str | Path, grid: RTensor, voxel_size: float = 1.0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with mrcfile.new(path, overwrite=True) as mrc:
        mrc.set_data(np.asarray(grid, dtype=np.float32))
        mrc.voxel_size = voxel_size
    return path


def fourier_crop(grid: RTensor, n: int) -> RTensor:
    """
    Downsample by keeping the central n^3 block of the centered transform.

    The result samples the same band-limited function on a coarser grid,
    so per-voxel values keep their scale.
    """
    big = grid.shape[0]
    if n > big:
        raise ValueError(f"cannot crop a {big}^3 map up to {n}^3")
    if n == big:
        return grid.copy()
    spec = numcore.fft(grid, dims=(0, 1, 2), norm="backward")
    lo = big // 2 - n // 2
    block = spec[lo:lo + n, lo:lo + n, lo:lo + n]
    small = numcore.ifft(block, dims=(0, 1, 2), norm="backward")
    return np.real(small) * (n / big) ** 3


def prepare_map(density: DensityMap, n: int) -> DensityMap:
    """Crop to n^3 and scale to unit Frobenius norm; the voxel size grows accordingly."""
    small = fourier_crop(density.data, n)
    norm = np.linalg.norm(small)
    if norm == 0:
        raise ArtifactError("map is identically zero after cropping")
    return DensityMap(small / norm, density.voxel_size * density.n / n)


MRC_SUFFIXES = (".mrc", ".map", ".rec")


def load_volume(path: str | Path) -> DensityMap:
    """
    Read a cubic volume from MRC or OMT1, chosen by suffix.

    OMT1 grids take their voxel size from the sidecar (1 A if absent).
    """
    path = Path(path)
    if path.suffix.lower() in MRC_SUFFIXES:
        return load_mrc(path)
    data, meta = numcore.read_tensor(path)
    if np.iscomplexobj(data):
        raise ArtifactError(f"{path} holds a complex tensor, expected a real volume")
    if data.ndim != 3 or len(set(data.shape)) != 1:
        raise ArtifactError(f"{path} is not a cubic volume (shape {data.shape})")
    return DensityMap(data, float(meta.get("voxel_size", 1.0)))


def save_volume(out_dir: str | Path, stem: str, grid: RTensor, voxel_size: float = 1.0,
                meta: dict | None = None) -> list[Path]:
    """Write `<stem>.omt` and `<stem>.mrc` side by side."""
    out_dir = Path(out_dir)
    info = {"n": int(grid.shape[0]), "voxel_size": voxel_size, **(meta or {})}
    return [numcore.write_tensor(out_dir / f"{stem}.omt", grid, info),
            save_mrc(out_dir / f"{stem}.mrc", grid, voxel_size)]
