"""
Numerical core shared by every pipeline stage.

Provides unitary centered FFTs, grid coordinates, counter-based seeded
random streams, deterministic blocked summation, an ordered worker pool
and the OMT1 binary tensor container.

Conventions:
    - Arrays are numpy ndarrays in row-major order; complex data is complex128.
    - Index j on an n-point axis is the centered offset p = j - n // 2,
      which is the ordering produced by np.fft.fftshift.
    - Frequencies are k = 2*pi*p / n, so a real-space shift by s pixels
      multiplies the transform by exp(-i k s).
"""
import hashlib
import json
import logging
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np
import numpy.typing as npt

from errors import ArtifactError, NumericalError

logger = logging.getLogger(__name__)

RTensor = npt.NDArray[np.float64]
CTensor = npt.NDArray[np.complex128]

T = TypeVar("T")
R = TypeVar("R")

# Pairwise reduction leaves hold at most this many summands
REDUCE_BLOCK = 1024

OMT_MAGIC = b"OMT1"
OMT_VERSION = 1
DTYPE_CODES = {0: np.dtype("<f8"), 1: np.dtype("<c16")}


# ==================== VALIDATION ====================

def ensure_finite(x: np.ndarray, name: str = "tensor") -> np.ndarray:
    """
    Reject NaN/inf entries.

    Raises:
        NumericalError: if any entry of x is not finite
    """
    if not np.all(np.isfinite(x)):
        bad = int(np.size(x) - np.count_nonzero(np.isfinite(x)))
        raise NumericalError(f"{name} has {bad} non-finite entries")
    return x


# ==================== GRIDS ====================

def pixel_offsets(n: int) -> RTensor:
    """Centered integer offsets p = j - n // 2 for j = 0..n-1, as floats."""
    return np.arange(n, dtype=np.float64) - n // 2


def frequency_grid(n: int) -> RTensor:
    """K1: n equispaced frequencies 2*pi*p/n in [-pi, pi)."""
    return 2.0 * np.pi * pixel_offsets(n) / n


def position_grid(n: int) -> RTensor:
    """X1: n equispaced points p/n in the unit interval [-1/2, 1/2)."""
    return pixel_offsets(n) / n


def frequency_grid_nd(n: int, dims: int) -> RTensor:
    """
    Flattened frequency grid K_dims as an (n**dims, dims) array.

    Axis order follows the array layout: the last coordinate varies fastest,
    and column 0 holds the x-coordinate (the fastest axis).
    """
    k = frequency_grid(n)
    mesh = np.meshgrid(*([k] * dims), indexing="ij")
    # mesh[-1] is the fastest-varying axis: call it x
    return np.stack([m.ravel() for m in reversed(mesh)], axis=1)


def negated_index(n: int) -> npt.NDArray[np.intp]:
    """Index map j -> index of -k_j on a centered n-point frequency axis (mod n)."""
    c = n // 2
    return (2 * c - np.arange(n)) % n


# ==================== FOURIER TRANSFORMS ====================

def fft(x: np.ndarray, dims: Sequence[int] | int = -1, norm: str = "ortho") -> CTensor:
    """
    Centered DFT along `dims`; unitary by default (F* F = I).

    Args:
        x: input array, real or complex
        dims: axis or axes to transform
        norm: numpy norm mode; "backward" gives the unnormalized sum

    Returns:
        Complex array in centered (fftshift) frequency order

    Example:
        fft(np.array([0, 0, 1, 0]))  # delta at offset 0 -> all 0.5
    """
    axes = (dims,) if isinstance(dims, int) else tuple(dims)
    for a in axes:
        if x.shape[a] < 1:
            raise ValueError(f"axis {a} has zero extent")
    ensure_finite(x, "fft input")
    shifted = np.fft.ifftshift(x, axes=axes)
    out = np.fft.fftn(shifted, axes=axes, norm=norm)
    return np.fft.fftshift(out, axes=axes)


def ifft(x: np.ndarray, dims: Sequence[int] | int = -1, norm: str = "ortho") -> CTensor:
    """Inverse of fft() with the same centering and norm."""
    axes = (dims,) if isinstance(dims, int) else tuple(dims)
    ensure_finite(x, "ifft input")
    shifted = np.fft.ifftshift(x, axes=axes)
    out = np.fft.ifftn(shifted, axes=axes, norm=norm)
    return np.fft.fftshift(out, axes=axes)


def dft_matrix(n: int) -> CTensor:
    """Explicit unitary centered DFT matrix F with fft(v) == F @ v."""
    return fft(np.eye(n, dtype=np.complex128), dims=0)


# ==================== SEEDED RANDOMNESS ====================

@dataclass(frozen=True)
class SeededRng:
    """
    Counter-based random stream keyed by (seed, stream_label).

    Draws for chunk c come from a Philox generator whose counter starts at
    c * 2**192, so chunk streams never overlap and do not depend on which
    worker evaluates them.
    """
    seed: int
    stream_label: str = "default"

    def key(self) -> int:
        digest = hashlib.blake2b(
            f"{self.seed}:{self.stream_label}".encode(), digest_size=16
        ).digest()
        return int.from_bytes(digest, "little")

    def generator(self, chunk: int = 0) -> np.random.Generator:
        counter = np.array([0, 0, 0, chunk], dtype=np.uint64)
        return np.random.Generator(np.random.Philox(key=self.key(), counter=counter))

    def child(self, label: str) -> "SeededRng":
        """Derive an independent stream for a sub-task."""
        return SeededRng(self.seed, f"{self.stream_label}/{label}")


def rng_draw(rng: SeededRng,
             dist: str,
             shape: int | tuple[int, ...],
             *,
             mean: float = 0.0,
             sigma: float = 1.0,
             low: float = 0.0,
             high: float = 1.0,
             chunk: int = 0) -> RTensor:
    """
    Draw a reproducible real tensor.

    Args:
        rng: the keyed stream
        dist: "uniform" on [low, high) or "gaussian" with (mean, sigma)
        shape: output shape
        chunk: stream chunk index (see SeededRng)

    Raises:
        ValueError: unknown distribution, sigma < 0 or high < low
    """
    gen = rng.generator(chunk)
    if dist == "gaussian":
        if sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {sigma}")
        return mean + sigma * gen.standard_normal(shape)
    if dist == "uniform":
        if high < low:
            raise ValueError(f"uniform range is empty: [{low}, {high})")
        return gen.uniform(low, high, shape)
    raise ValueError(f"unknown distribution '{dist}'")


# ==================== DETERMINISTIC REDUCTION ====================

def _pairwise(values: list[np.ndarray]) -> np.ndarray:
    while len(values) > 1:
        nxt = [values[i] + values[i + 1] for i in range(0, len(values) - 1, 2)]
        if len(values) % 2:
            nxt.append(values[-1])
        values = nxt
    return values[0]


def reduce_sum(chunks: Sequence[np.ndarray], workers: int = 1) -> np.ndarray:
    """
    Fixed-order blocked summation.

    Chunks are grouped into consecutive blocks of REDUCE_BLOCK, each block is
    summed left to right, and the block sums are combined by a pairwise tree.
    The grouping depends only on positions, so the result is bit-identical
    for every worker count.

    Raises:
        ValueError: empty input or shape mismatch
    """
    if len(chunks) == 0:
        raise ValueError("reduce_sum needs at least one chunk")
    shape = np.shape(chunks[0])
    for i, c in enumerate(chunks):
        if np.shape(c) != shape:
            raise ValueError(f"chunk {i} has shape {np.shape(c)}, expected {shape}")

    blocks = [chunks[i:i + REDUCE_BLOCK] for i in range(0, len(chunks), REDUCE_BLOCK)]

    def block_sum(block: Sequence[np.ndarray]) -> np.ndarray:
        acc = np.array(block[0], copy=True)
        for c in block[1:]:
            acc = acc + c
        return acc

    partials = parallel_map(block_sum, blocks, workers)
    return _pairwise(partials)


def parallel_map(fn: Callable[[T], R], items: Iterable[T], workers: int = 1) -> list[R]:
    """Map fn over items with a thread pool, returning results in input order."""
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def chunk_sizes(total: int, chunk: int) -> list[int]:
    """Split `total` items into consecutive chunks of at most `chunk`."""
    if total < 0 or chunk < 1:
        raise ValueError(f"bad chunking total={total} chunk={chunk}")
    sizes = [chunk] * (total // chunk)
    if total % chunk:
        sizes.append(total % chunk)
    return sizes


# ==================== OMT1 CONTAINER ====================

def write_tensor(path: str | Path, x: np.ndarray, meta: dict | None = None) -> Path:
    """
    Write x as an OMT1 file; `meta` goes to the JSON sidecar `<path>.json`.

    Layout: magic "OMT1", u32 version, u32 dtype code (0=f64, 1=c128),
    u32 rank, rank x u64 extents, little-endian payload.
    """
    path = Path(path)
    if np.iscomplexobj(x):
        code, data = 1, np.ascontiguousarray(x, dtype="<c16")
    else:
        code, data = 0, np.ascontiguousarray(x, dtype="<f8")
    header = OMT_MAGIC + struct.pack("<III", OMT_VERSION, code, data.ndim)
    header += struct.pack(f"<{data.ndim}Q", *data.shape)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.tobytes(order="C"))
    if meta is not None:
        Path(f"{path}.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def read_tensor(path: str | Path) -> tuple[np.ndarray, dict]:
    """
    Read an OMT1 file and its optional sidecar.

    Raises:
        ArtifactError: missing file, bad magic, unsupported version or dtype,
            truncated payload
    """
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise ArtifactError(f"cannot read {path}: {e}") from e
    if raw[:4] != OMT_MAGIC:
        raise ArtifactError(f"{path} is not an OMT1 file")
    if len(raw) < 16:
        raise ArtifactError(f"{path} has a truncated header")
    version, code, rank = struct.unpack_from("<III", raw, 4)
    if version != OMT_VERSION:
        raise ArtifactError(f"{path} has OMT1 version {version}, expected {OMT_VERSION}")
    if code not in DTYPE_CODES:
        raise ArtifactError(f"{path} has unknown dtype code {code}")
    offset = 16 + 8 * rank
    if len(raw) < offset:
        raise ArtifactError(f"{path} has a truncated header")
    shape = struct.unpack_from(f"<{rank}Q", raw, 16)
    dtype = DTYPE_CODES[code]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    if len(raw) - offset != expected:
        raise ArtifactError(f"{path} payload is {len(raw) - offset} bytes, expected {expected}")
    data = np.frombuffer(raw, dtype=dtype, offset=offset).reshape(shape).copy()
    sidecar = Path(f"{path}.json")
    meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
    return data, meta


def content_hash(path: str | Path) -> str:
    """SHA-256 hex digest of a file's bytes."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()
