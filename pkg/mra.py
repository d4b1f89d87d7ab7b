"""
Multireference alignment: forward model, moments, spectral inversion and
error metrics.

A signal v lives on the n-point grid X1 of the unit interval and is observed
through random cyclic shifts plus white gaussian noise. Shifts are measured
in pixels; the density rho(X1)[j] is the probability of shifting by the
centered offset p_j = j - n // 2.
"""
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Literal

import numpy as np
import scipy.linalg

import numcore
from errors import ArtifactError, NumericalError
from numcore import CTensor, RTensor, SeededRng

logger = logging.getLogger(__name__)

# Wrapped gaussians are summed over images -WRAPS..WRAPS of the unit interval
WRAPS = 5
# Rows per simulation / accumulation chunk; fixed so results do not depend on workers
MOMENT_CHUNK = 4096
HERMITIAN_TOL = 1e-10


class DegenerateSpectrumWarning(UserWarning):
    """Eigenvalues too close to match eigenvectors to DFT columns reliably"""


# ==================== DOMAIN TYPES ====================

@dataclass(frozen=True)
class MixtureSpec1D:
    """Mixture of (wrapped) gaussians on the unit interval [-1/2, 1/2)."""
    components: tuple[tuple[float, float, float], ...]  # (weight, mean, stddev)
    wrap: bool = True

    def __post_init__(self):
        if not self.components:
            raise ValueError("mixture needs at least one component")
        weights = np.array([c[0] for c in self.components])
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-10:
            raise ValueError(f"mixture weights must be >= 0 and sum to 1, got {weights}")
        for w, mean, sd in self.components:
            if sd <= 0:
                raise ValueError(f"stddev must be > 0, got {sd}")

    @classmethod
    def random(cls,
               n_components: int,
               gen: np.random.Generator,
               stddev_range: tuple[float, float] = (0.05, 0.2)) -> "MixtureSpec1D":
        """Draw a mixture: means uniform over the interval, stddevs uniform in range, dirichlet weights."""
        weights = gen.dirichlet(np.ones(n_components)) if n_components > 1 else np.ones(1)
        weights = weights / weights.sum()
        means = gen.uniform(-0.5, 0.5, n_components)
        sds = gen.uniform(stddev_range[0], stddev_range[1], n_components)
        return cls(tuple((float(w), float(m), float(s)) for w, m, s in zip(weights, means, sds)))

    def to_dict(self) -> dict:
        return {"components": [list(c) for c in self.components], "wrap": self.wrap}


@dataclass(frozen=True, eq=False)
class MraSignal:
    """Signal samples v(X1) and its unitary transform v_hat(K1)."""
    values_real: RTensor
    values_fourier: CTensor = field(default=None)

    def __post_init__(self):
        numcore.ensure_finite(self.values_real, "signal")
        if self.values_fourier is None:
            object.__setattr__(self, "values_fourier", numcore.fft(self.values_real))

    @property
    def n(self) -> int:
        return len(self.values_real)

    @classmethod
    def from_fourier(cls, v_hat: CTensor) -> "MraSignal":
        return cls(np.real(numcore.ifft(v_hat)), np.asarray(v_hat, dtype=np.complex128))


@dataclass(frozen=True, eq=False)
class MraDensity:
    """Shift distribution rho(X1): nonnegative, unit mass."""
    mass: RTensor

    def __post_init__(self):
        numcore.ensure_finite(self.mass, "density")
        if np.any(self.mass < 0):
            raise ValueError("density has negative entries")
        if abs(self.mass.sum() - 1.0) > 1e-10:
            raise ValueError(f"density sums to {self.mass.sum()}, expected 1")

    @property
    def n(self) -> int:
        return len(self.mass)

    @classmethod
    def uniform(cls, n: int) -> "MraDensity":
        return cls(np.full(n, 1.0 / n))

    @classmethod
    def delta(cls, n: int, offset: int = 0) -> "MraDensity":
        mass = np.zeros(n)
        mass[(offset + n // 2) % n] = 1.0
        return cls(mass)


@dataclass(frozen=True, eq=False)
class MomentPair:
    """First moment (n-vector) and second moment (Hermitian n x n)."""
    m1: CTensor
    m2: CTensor
    kind: Literal["analytic", "empirical"] = "analytic"
    sigma: float | None = None
    count: int | None = None

    def __post_init__(self):
        n = len(self.m1)
        if self.m2.shape != (n, n):
            raise ValueError(f"m2 shape {self.m2.shape} does not match m1 length {n}")
        asym = np.linalg.norm(self.m2 - self.m2.conj().T)
        if asym > HERMITIAN_TOL * max(1.0, np.linalg.norm(self.m2)):
            raise ValueError(f"m2 is not Hermitian (asymmetry {asym:.3e})")

    @property
    def n(self) -> int:
        return len(self.m1)


@dataclass(frozen=True, eq=False)
class ObservationBatch:
    """Noisy shifted copies of a signal, one per row, plus the drawn shifts."""
    rows: RTensor
    shifts: np.ndarray
    sigma: float


# ==================== MIXTURES ====================

def mixture_pdf(spec: MixtureSpec1D, x: RTensor) -> RTensor:
    """Pointwise (wrapped) mixture density at positions x."""
    wraps = np.arange(-WRAPS, WRAPS + 1) if spec.wrap else np.zeros(1)
    out = np.zeros_like(x, dtype=np.float64)
    for w, mean, sd in spec.components:
        d = x[..., None] - mean + wraps
        out += w * np.exp(-0.5 * (d / sd) ** 2).sum(axis=-1) / (sd * np.sqrt(2 * np.pi))
    return out


def sample_mixture(spec: MixtureSpec1D,
                   n: int,
                   kind: Literal["signal", "density"] = "density") -> MraSignal | MraDensity:
    """
    Evaluate a mixture on X1.

    The signal variant keeps the raw density values; the density variant is
    renormalized to unit mass on the grid.
    """
    values = mixture_pdf(spec, numcore.position_grid(n))
    if kind == "signal":
        return MraSignal(values)
    return MraDensity(values / values.sum())


# ==================== FORWARD MODEL ====================

def shift_fourier(v_hat: CTensor, s: float) -> CTensor:
    """
    Multiply by the phase exp(i K1 s).

    With the centered DFT this moves the real-space signal by -s pixels.
    """
    k = numcore.frequency_grid(len(v_hat))
    return np.exp(1j * k * s) * v_hat


def shift_phases(n: int, offsets: RTensor | None = None) -> CTensor:
    """Rows exp(-i K1 s_j) for every shift s_j (default: every grid offset)."""
    s = numcore.pixel_offsets(n) if offsets is None else np.asarray(offsets, dtype=np.float64)
    return np.exp(-1j * np.outer(s, numcore.frequency_grid(n)))


def cyclic_shift_rows(v: RTensor, shifts: np.ndarray) -> RTensor:
    """Row i is v moved by shifts[i] pixels: out[i, j] = v[(j - shifts[i]) mod n]."""
    n = len(v)
    idx = (np.arange(n)[None, :] - np.asarray(shifts)[:, None]) % n
    return v[idx]


def simulate_observations(signal: MraSignal,
                          density: MraDensity,
                          count: int,
                          sigma: float,
                          rng: SeededRng,
                          workers: int = 1) -> ObservationBatch:
    """
    Draw `count` noisy shifted copies of the signal.

    Each chunk of MOMENT_CHUNK rows comes from its own stream chunk, so the
    batch is identical for every worker count.

    Raises:
        ValueError: count < 1, sigma < 0 or mismatched grid sizes
    """
    if count < 1:
        raise ValueError(f"need at least one observation, got {count}")
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    if signal.n != density.n:
        raise ValueError(f"signal has n={signal.n} but density has n={density.n}")

    sizes = numcore.chunk_sizes(count, MOMENT_CHUNK)

    def make_chunk(c: int) -> tuple[RTensor, np.ndarray]:
        gen = rng.generator(c)
        idx = gen.choice(signal.n, size=sizes[c], p=density.mass)
        shifts = idx - signal.n // 2
        rows = cyclic_shift_rows(signal.values_real, shifts)
        if sigma > 0:
            rows = rows + sigma * gen.standard_normal(rows.shape)
        return rows, shifts

    parts = numcore.parallel_map(make_chunk, range(len(sizes)), workers)
    rows = np.concatenate([p[0] for p in parts])
    shifts = np.concatenate([p[1] for p in parts])
    logger.debug("Simulated %d observations (n=%d, sigma=%g)", count, signal.n, sigma)
    return ObservationBatch(rows, shifts, sigma)


# ==================== MOMENTS ====================

def shift_moments(v_hat: CTensor, weights: RTensor) -> tuple[CTensor, CTensor]:
    """
    Finite-sum moments of a Fourier signal under a weighted set of grid shifts.

    m1 = sum_j w_j exp(-i K1 s_j) * v_hat
    m2 = sum_j w_j (exp(-i K1 s_j) * v_hat)(exp(-i K1 s_j) * v_hat)^*
    """
    u = shift_phases(len(v_hat)) * v_hat[None, :]
    m1 = weights @ u
    m2 = (u.T * weights) @ u.conj()
    return m1, 0.5 * (m2 + m2.conj().T)


def analytic_moments(signal: MraSignal, density: MraDensity) -> MomentPair:
    """Exact moments of the shifted-signal model."""
    if signal.n != density.n:
        raise ValueError(f"signal has n={signal.n} but density has n={density.n}")
    m1, m2 = shift_moments(signal.values_fourier, density.mass)
    return MomentPair(m1, m2, kind="analytic")


def accumulate_moments(chunks: Iterable[RTensor],
                       sigma: float,
                       workers: int = 1) -> MomentPair:
    """
    Unbiased moments from observation chunks.

    m1 = mean(F v_j),  m2 = mean((F v_j)(F v_j)^*) - sigma^2 I
    """
    chunks = list(chunks)
    if not chunks or sum(len(c) for c in chunks) == 0:
        raise ValueError("empirical moments need a nonempty batch")
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")

    def partial(rows: RTensor) -> tuple[CTensor, CTensor]:
        y = numcore.fft(rows, dims=1)
        return y.sum(axis=0), y.T @ y.conj()

    parts = numcore.parallel_map(partial, chunks, workers)
    count = sum(len(c) for c in chunks)
    s1 = numcore.reduce_sum([p[0] for p in parts], workers)
    s2 = numcore.reduce_sum([p[1] for p in parts], workers)
    n = s1.shape[0]
    m2 = s2 / count - sigma ** 2 * np.eye(n)
    m2 = 0.5 * (m2 + m2.conj().T)
    return MomentPair(s1 / count, m2, kind="empirical", sigma=sigma, count=count)


def empirical_moments(batch: ObservationBatch | RTensor,
                      sigma: float | None = None,
                      workers: int = 1) -> MomentPair:
    """Unbiased moment estimators from a batch of observations."""
    rows = batch.rows if isinstance(batch, ObservationBatch) else np.atleast_2d(batch)
    if sigma is None:
        if not isinstance(batch, ObservationBatch):
            raise ValueError("sigma is required for a bare observation array")
        sigma = batch.sigma
    if rows.shape[0] == 0:
        raise ValueError("empirical moments need a nonempty batch")
    numcore.ensure_finite(rows, "observations")
    chunks = [rows[i:i + MOMENT_CHUNK] for i in range(0, len(rows), MOMENT_CHUNK)]
    return accumulate_moments(chunks, sigma, workers)


def simulate_moments(signal: MraSignal,
                     density: MraDensity,
                     count: int,
                     sigma: float,
                     rng: SeededRng,
                     workers: int = 1) -> MomentPair:
    """Simulate and accumulate chunk by chunk without holding the whole batch."""
    if count < 1:
        raise ValueError(f"need at least one observation, got {count}")
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    sizes = numcore.chunk_sizes(count, MOMENT_CHUNK)

    def partial(c: int) -> tuple[CTensor, CTensor]:
        gen = rng.generator(c)
        idx = gen.choice(signal.n, size=sizes[c], p=density.mass)
        rows = cyclic_shift_rows(signal.values_real, idx - signal.n // 2)
        if sigma > 0:
            rows = rows + sigma * gen.standard_normal(rows.shape)
        y = numcore.fft(rows, dims=1)
        return y.sum(axis=0), y.T @ y.conj()

    parts = numcore.parallel_map(partial, range(len(sizes)), workers)
    s1 = numcore.reduce_sum([p[0] for p in parts], workers)
    s2 = numcore.reduce_sum([p[1] for p in parts], workers)
    m2 = s2 / count - sigma ** 2 * np.eye(signal.n)
    return MomentPair(s1 / count, 0.5 * (m2 + m2.conj().T),
                      kind="empirical", sigma=sigma, count=count)


def save_moments(pair: MomentPair, out_dir: str | Path, meta: dict | None = None) -> list[Path]:
    out_dir = Path(out_dir)
    info = {"n": pair.n, "kind": pair.kind, "sigma": pair.sigma, "count": pair.count, **(meta or {})}
    return [numcore.write_tensor(out_dir / "m1.omt", pair.m1, info),
            numcore.write_tensor(out_dir / "m2.omt", pair.m2, info)]


def load_moments(in_dir: str | Path) -> MomentPair:
    """
    Read m1.omt / m2.omt from a directory.

    Raises:
        ArtifactError: missing files or inconsistent shapes
    """
    in_dir = Path(in_dir)
    m1, meta = numcore.read_tensor(in_dir / "m1.omt")
    m2, _ = numcore.read_tensor(in_dir / "m2.omt")
    try:
        return MomentPair(m1.astype(np.complex128), m2.astype(np.complex128),
                          kind=meta.get("kind", "empirical"), sigma=meta.get("sigma"),
                          count=meta.get("count"))
    except ValueError as e:
        raise ArtifactError(f"{in_dir}: {e}") from e


# ==================== SPECTRAL INVERSION ====================

@dataclass(frozen=True, eq=False)
class SpectralInversion:
    """Output of spectral_invert, determined up to one global shift."""
    v_hat: CTensor
    rho: RTensor
    eigenvalues: RTensor
    degenerate: bool
    method: str


def _power_eigenpairs(m2: CTensor, max_iter: int = 20000, tol: float = 1e-13) -> tuple[RTensor, CTensor]:
    """
    Eigenpairs by repeated normalized multiplication with deflation.

    Each pass applies u -> M u / |M u| until u stops moving (up to phase),
    reads the eigenvalue as <u, M u>, then removes it from M.
    """
    n = m2.shape[0]
    work = m2.copy()
    values = np.zeros(n)
    vectors = np.zeros((n, n), dtype=np.complex128)
    start = np.exp(1j * np.arange(n) * 0.7) * (1.0 + np.arange(n) / n)
    for i in range(n):
        u = start / np.linalg.norm(start)
        for _ in range(max_iter):
            w = work @ u
            norm = np.linalg.norm(w)
            if norm == 0.0:
                break
            w = w / norm
            phase = np.vdot(u, w)
            phase = phase / abs(phase) if abs(phase) > 0 else 1.0
            if np.linalg.norm(w - phase * u) < tol:
                u = w
                break
            u = w
        lam = float(np.real(np.vdot(u, work @ u)))
        values[i], vectors[:, i] = lam, u
        work = work - lam * np.outer(u, u.conj())
    return values, vectors


def spectral_invert(m2: CTensor,
                    assume_unit_modulus: bool = True,
                    m1: CTensor | None = None,
                    method: Literal["eigh", "power"] = "eigh",
                    tol: float = 1e-6) -> SpectralInversion:
    """
    Recover (v_hat, rho) from a second moment with unit-modulus v_hat.

    Under |v_hat| = 1 the second moment factors as
    diag(v_hat) F* diag(n rho) F diag(v_hat)^*, so its eigenvalues are
    n * rho and each eigenvector is v_hat times a DFT column.

    Steps:
        1. eigendecompose (dense Hermitian solver, or power iteration)
        2. top eigenvector divided by the zero-offset DFT column gives v_hat,
           up to a unit phase fixed by Hermitian symmetry and a global sign
        3. every eigenvector is matched to the DFT column maximizing
           |<e, v_hat * F[:, j]>|; its eigenvalue / trace is rho at that offset

    m2 is unchanged by v_hat -> -v_hat, so the sign comes from m1 when given
    (v_hat[center] agrees with m1[center]). Without m1 the sign is chosen so
    that v_hat[center] > 0: a signal with negative mean comes back negated.

    Raises:
        ValueError: m2 not Hermitian or the unit-modulus assumption not declared
        NumericalError: eigen-solver failure
    """
    n = m2.shape[0]
    if m2.shape != (n, n):
        raise ValueError(f"m2 must be square, got {m2.shape}")
    if np.linalg.norm(m2 - m2.conj().T) > 1e-8 * max(1.0, np.linalg.norm(m2)):
        raise ValueError("m2 is not Hermitian")
    if not assume_unit_modulus:
        raise ValueError("spectral inversion needs |v_hat(k)| = 1; use the encoder for general signals")
    numcore.ensure_finite(m2, "m2")

    if method == "eigh":
        try:
            values, vectors = scipy.linalg.eigh(m2)
        except (np.linalg.LinAlgError, ValueError) as e:
            raise NumericalError(f"eigendecomposition failed: {e}") from e
    elif method == "power":
        values, vectors = _power_eigenpairs(m2)
    else:
        raise ValueError(f"unknown method '{method}'")
    order = np.argsort(-values, kind="stable")
    values, vectors = values[order], vectors[:, order]

    dft = numcore.dft_matrix(n)
    center = n // 2
    # l2 step: divide the top eigenvector by the (constant) zero-offset column
    w = vectors[:, 0] / dft[:, center]
    neg = numcore.negated_index(n)
    c2 = np.sum(w * w[neg]) / np.sum(np.abs(w) ** 2)
    c = np.sqrt(c2 / abs(c2)) if abs(c2) > 0 else 1.0
    v_hat = w / c
    ref = np.real(v_hat[center] * np.conj(m1[center])) if m1 is not None else np.real(v_hat[center])
    if ref < 0:
        v_hat = -v_hat

    trace = float(np.real(np.trace(m2)))
    if trace <= 0:
        raise NumericalError("m2 has non-positive trace")

    # l3 step: eigenvalues as density values, placed by greedy column matching
    candidates = (v_hat[:, None] * dft) / np.sqrt(np.sum(np.abs(v_hat) ** 2) / n)
    scores = np.abs(vectors.conj().T @ candidates)
    rho = np.zeros(n)
    taken = np.zeros(n, dtype=bool)
    for i in range(n):
        row = np.where(taken, -np.inf, scores[i])
        j = int(np.argmax(row))
        taken[j] = True
        rho[j] = values[i] / trace

    gaps = np.abs(np.diff(values))
    degenerate = bool(np.any(gaps < tol * max(abs(values[0]), 1e-300)))
    if degenerate:
        warnings.warn(
            f"near-degenerate eigenvalues (min gap {gaps.min():.3e}); "
            "column matching may be ambiguous",
            DegenerateSpectrumWarning,
            stacklevel=2,
        )
    return SpectralInversion(v_hat, rho, values / trace, degenerate, method)


# ==================== ERROR METRICS ====================

def _min_shift_error(u_hat: CTensor, v_hat: CTensor, upsample: int) -> float:
    n = len(v_hat)
    denom = np.linalg.norm(v_hat)
    if denom == 0:
        raise ValueError("reference has zero norm")
    shifts = np.arange(n, dtype=np.float64)
    best = np.min(np.linalg.norm(shift_phases(n, shifts) * v_hat - u_hat, axis=1))
    if upsample > 1:
        fine = np.arange(n * upsample, dtype=np.float64) / upsample
        best = min(best, np.min(np.linalg.norm(shift_phases(n, fine) * v_hat - u_hat, axis=1)))
    return float(best / denom)


def relative_error_signal(u: RTensor, v: RTensor, upsample: int = 1) -> float:
    """
    min over cyclic shifts s of |s.v - u| / |v|.

    Grid shifts are exact; upsample > 1 adds fractional shifts on a finer
    grid through Fourier interpolation.

    Raises:
        ValueError: length mismatch or |v| = 0
    """
    u, v = np.asarray(u, dtype=np.float64), np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValueError(f"length mismatch {u.shape} vs {v.shape}")
    return _min_shift_error(numcore.fft(u), numcore.fft(v), upsample)


def relative_error_fourier(z: CTensor, v_hat: CTensor, upsample: int = 1) -> float:
    """Shift-aligned relative error of a Fourier-domain estimate z of v_hat."""
    if np.shape(z) != np.shape(v_hat):
        raise ValueError(f"length mismatch {np.shape(z)} vs {np.shape(v_hat)}")
    return _min_shift_error(np.asarray(z, dtype=np.complex128), v_hat, upsample)


def relative_error_moments(pair: MomentPair, ref: MomentPair) -> tuple[float, float]:
    """
    (|ref.m1 - pair.m1| / |pair.m1|, |ref.m2 - pair.m2| / |pair.m2|).

    `pair` is the estimator being scored and provides the normalization.
    """
    if pair.n != ref.n:
        raise ValueError(f"moment sizes differ: {pair.n} vs {ref.n}")
    d1, d2 = np.linalg.norm(pair.m1), np.linalg.norm(pair.m2)
    if d1 == 0 or d2 == 0:
        raise ValueError("estimator moment has zero norm")
    return (float(np.linalg.norm(ref.m1 - pair.m1) / d1),
            float(np.linalg.norm(ref.m2 - pair.m2) / d2))
