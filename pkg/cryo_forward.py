"""
Simplified cryo-EM forward model.

A volume is handled through its Fourier transform v_hat, given as an
evaluator: any callable taking (M, 3) frequency points and returning M complex
values. An image for rotation R is the inverse unitary 2D DFT of the central
slice v_hat(R^T (kx, ky, 0)) on K2, plus white gaussian noise.

Rotations are (3, 3) numpy arrays, batches are (N, 3, 3). The viewing
direction of R is its third row R^T e_z.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from scipy.ndimage import map_coordinates
from scipy.spatial.transform import Rotation as ScipyRotation
from tqdm import tqdm

import autonn as nn
import numcore
import spherical_design
from errors import ArtifactError
from numcore import CTensor, RTensor, SeededRng

logger = logging.getLogger(__name__)

ROTATION_TOL = 1e-12
IMAGE_CHUNK = 4096
HERMITIAN_TOL = 1e-10


class VolumeEvaluator(Protocol):
    def __call__(self, k: RTensor) -> CTensor: ...


# ==================== ROTATIONS ====================

def is_rotation(R: np.ndarray, tol: float = ROTATION_TOL) -> bool:
    R = np.asarray(R)
    eye = np.eye(3)
    ortho = np.max(np.abs(np.swapaxes(R, -1, -2) @ R - eye))
    return bool(ortho <= tol and np.max(np.abs(np.linalg.det(R) - 1.0)) <= tol)


def in_plane(alpha: np.ndarray) -> np.ndarray:
    """Rotations about z, (N, 3, 3)."""
    return ScipyRotation.from_euler("z", np.atleast_1d(alpha)).as_matrix()


def direction_frames(directions: np.ndarray) -> np.ndarray:
    """
    Rotations whose third row is the given unit direction, (N, 3, 3).

    The first row is the component of a helper axis orthogonal to the
    direction; the second completes a right-handed frame.
    """
    d = np.atleast_2d(directions)
    helper = np.where(np.abs(d[:, :1]) < 0.9, [[1.0, 0.0, 0.0]], [[0.0, 1.0, 0.0]])
    e1 = helper - np.sum(helper * d, axis=1, keepdims=True) * d
    e1 /= np.linalg.norm(e1, axis=1, keepdims=True)
    e2 = np.cross(d, e1)
    return np.stack([e1, e2, d], axis=1)


def compose(directions: np.ndarray, alphas: np.ndarray) -> np.ndarray:
    """R = R_z(alpha) @ frame(direction); keeps the viewing direction."""
    return in_plane(alphas) @ direction_frames(directions)


def viewing_directions(rotations: np.ndarray) -> np.ndarray:
    R = np.asarray(rotations)
    return (R[None] if R.ndim == 2 else R)[:, 2, :]


# ==================== QUADRATURE ====================

@dataclass(frozen=True, eq=False)
class QuadratureSet:
    """q1 viewing directions x q2 equispaced in-plane angles, direction-major."""
    rotations: np.ndarray   # (q1 * q2, 3, 3)
    directions: np.ndarray  # (q1, 3)
    q1: int
    q2: int
    degree: int | None

    def __len__(self) -> int:
        return len(self.rotations)


def build_quadrature(design: np.ndarray | int, q2: int, degree: int | None = None) -> QuadratureSet:
    """
    Cross a set of viewing directions with q2 in-plane angles 2*pi*j/q2.

    Args:
        design: (q1, 3) unit vectors, or q1 to look one up in spherical_design
        q2: in-plane angle count
        degree: design degree when passing explicit points

    Raises:
        ValueError: non-unit design point or q2 < 1
    """
    if isinstance(design, (int, np.integer)):
        points, degree = spherical_design.design_points(int(design))
    else:
        points = np.asarray(design, dtype=np.float64)
    if q2 < 1:
        raise ValueError(f"q2 must be >= 1, got {q2}")
    norms = np.linalg.norm(points, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-9):
        bad = int(np.argmax(np.abs(norms - 1.0)))
        raise ValueError(f"design point {bad} has norm {norms[bad]:.12f}")
    q1 = len(points)
    alphas = 2.0 * np.pi * np.arange(q2) / q2
    dirs = np.repeat(points, q2, axis=0)
    rotations = compose(dirs, np.tile(alphas, q1))
    return QuadratureSet(rotations, points, q1, q2, degree)


# ==================== VON MISES-FISHER ====================

@dataclass(frozen=True)
class VmfMixtureSpec:
    components: tuple[tuple[float, tuple[float, float, float], float], ...]  # (weight, mu, kappa)

    def __post_init__(self):
        if not self.components:
            raise ValueError("vMF mixture needs at least one component")
        weights = np.array([c[0] for c in self.components])
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-10:
            raise ValueError(f"vMF weights must be >= 0 and sum to 1, got {weights}")
        for _, mu, kappa in self.components:
            if kappa < 0:
                raise ValueError(f"kappa must be >= 0, got {kappa}")
            if abs(np.linalg.norm(mu) - 1.0) > 1e-9:
                raise ValueError(f"mean direction {mu} is not unit-norm")

    def to_dict(self) -> dict:
        return {"components": [[w, list(mu), k] for w, mu, k in self.components]}


def default_vmf_mixture(kappa: float = 20.0) -> VmfMixtureSpec:
    """Eight equal-weight components at the normalized cube corners."""
    corners = np.array([[x, y, z] for x in (-1, 1) for y in (-1, 1) for z in (-1, 1)]) / np.sqrt(3.0)
    return VmfMixtureSpec(tuple((1.0 / 8, tuple(float(c) for c in mu), kappa) for mu in corners))


def sample_vmf(mu: np.ndarray, kappa: float, count: int, gen: np.random.Generator) -> np.ndarray:
    """
    Draw unit vectors from vMF(mu, kappa).

    The cosine to mu comes from the inverse CDF 1 + log(u + (1 - u) e^{-2 kappa}) / kappa
    (uniform on [-1, 1] when kappa = 0); the tangent part is a normalized
    gaussian projected orthogonal to mu.
    """
    if kappa < 0:
        raise ValueError(f"kappa must be >= 0, got {kappa}")
    mu = np.asarray(mu, dtype=np.float64)
    u = gen.uniform(size=count)
    if kappa == 0:
        w = 2.0 * u - 1.0
    else:
        w = 1.0 + np.log(u + (1.0 - u) * np.exp(-2.0 * kappa)) / kappa
    w = np.clip(w, -1.0, 1.0)
    g = gen.standard_normal((count, 3))
    g -= (g @ mu)[:, None] * mu
    g /= np.linalg.norm(g, axis=1, keepdims=True)
    return w[:, None] * mu + np.sqrt(1.0 - w * w)[:, None] * g


def sample_rotations(spec: VmfMixtureSpec, count: int, rng: SeededRng, workers: int = 1) -> np.ndarray:
    """
    Random rotations: vMF-mixture viewing direction, independent uniform in-plane angle.

    Chunk c of IMAGE_CHUNK rotations uses stream chunk c.
    """
    if count < 1:
        raise ValueError(f"need at least one rotation, got {count}")
    weights = np.array([c[0] for c in spec.components])
    sizes = numcore.chunk_sizes(count, IMAGE_CHUNK)

    def chunk(c: int) -> np.ndarray:
        gen = rng.generator(c)
        which = gen.choice(len(weights), size=sizes[c], p=weights)
        dirs = np.zeros((sizes[c], 3))
        for i, (_, mu, kappa) in enumerate(spec.components):
            mask = which == i
            if mask.any():
                dirs[mask] = sample_vmf(np.array(mu), kappa, int(mask.sum()), gen)
        alphas = gen.uniform(0.0, 2.0 * np.pi, sizes[c])
        return compose(dirs, alphas)

    return np.concatenate(numcore.parallel_map(chunk, range(len(sizes)), workers))


def vmf_density(spec: VmfMixtureSpec, directions: np.ndarray) -> RTensor:
    """Mixture density on S^2 (w.r.t. surface area) at unit vectors."""
    x = np.atleast_2d(directions)
    out = np.zeros(len(x))
    for w, mu, kappa in spec.components:
        if kappa == 0:
            out += w / (4.0 * np.pi)
            continue
        norm = kappa / (2.0 * np.pi * (1.0 - np.exp(-2.0 * kappa)))
        out += w * norm * np.exp(kappa * (x @ np.asarray(mu) - 1.0))
    return out


def discretize_on_quadrature(spec: VmfMixtureSpec, quadrature: QuadratureSet) -> RTensor:
    """vMF density at each element's viewing direction, normalized to unit mass over Q."""
    mass = vmf_density(spec, viewing_directions(quadrature.rotations))
    return mass / mass.sum()


# ==================== GAUSSIAN VOLUMES ====================

@dataclass(frozen=True)
class GaussianVolumeSpec:
    """Isotropic gaussians (weight, center in the unit cube, stddev in cube units)."""
    components: tuple[tuple[float, tuple[float, float, float], float], ...]

    def __post_init__(self):
        if not self.components:
            raise ValueError("volume needs at least one gaussian")
        for _, _, sd in self.components:
            if sd <= 0:
                raise ValueError(f"stddev must be > 0, got {sd}")

    def to_dict(self) -> dict:
        return {"components": [[w, list(c), s] for w, c, s in self.components]}


def default_gaussian_volume() -> GaussianVolumeSpec:
    """Four gaussians whose centers do not share a plane."""
    return GaussianVolumeSpec((
        (1.0, (0.15, 0.0, -0.05), 0.08),
        (0.8, (-0.1, 0.14, 0.0), 0.08),
        (0.6, (-0.05, -0.12, 0.1), 0.07),
        (0.9, (0.02, 0.03, 0.18), 0.09),
    ))


def gaussian_volume_fourier(spec: GaussianVolumeSpec, k: RTensor, n: int) -> CTensor:
    """
    Continuous Fourier transform in pixel units at frequencies k (M, 3).

    v_hat(k) = sum w exp(-(n sd)^2 |k|^2 / 2) exp(-i n k . c)
    Column order of k and centers is (x, y, z).
    """
    k = np.atleast_2d(k)
    out = np.zeros(len(k), dtype=np.complex128)
    k2 = np.sum(k * k, axis=1)
    for w, c, sd in spec.components:
        out += w * np.exp(-0.5 * (n * sd) ** 2 * k2) * np.exp(-1j * n * (k @ np.asarray(c)))
    return out


@dataclass(frozen=True)
class GaussianEvaluator:
    spec: GaussianVolumeSpec
    n: int

    def __call__(self, k: RTensor) -> CTensor:
        return gaussian_volume_fourier(self.spec, k, self.n)


def rasterize_volume(spec: GaussianVolumeSpec, n: int, R: np.ndarray | None = None) -> RTensor:
    """
    Sample the (rotated) gaussian mixture on the n^3 pixel grid, axes (z, y, x).

    With R the grid holds u(x) = v(R^T x), whose transform is v_hat(R^T k).
    """
    p = numcore.pixel_offsets(n)
    z, y, x = np.meshgrid(p, p, p, indexing="ij")
    pts = np.stack([x, y, z], axis=-1)
    out = np.zeros((n, n, n))
    for w, c, sd in spec.components:
        center = n * np.asarray(c)
        if R is not None:
            center = np.asarray(R) @ center
        s = n * sd
        d2 = np.sum((pts - center) ** 2, axis=-1)
        out += w * np.exp(-0.5 * d2 / s ** 2) / (2.0 * np.pi * s ** 2) ** 1.5
    return out


def project_volume(grid: RTensor) -> RTensor:
    """Sum along z (axis 0)."""
    return grid.sum(axis=0)


def volume_fourier_grid(evaluator: VolumeEvaluator, n: int) -> CTensor:
    """Evaluator on K3, reshaped to (n, n, n) with axes (z, y, x)."""
    return evaluator(numcore.frequency_grid_nd(n, 3)).reshape(n, n, n)


def rasterize_evaluator(evaluator: VolumeEvaluator, n: int) -> RTensor:
    """Real-space grid whose unnormalized centered DFT is the evaluator on K3."""
    return np.real(numcore.ifft(volume_fourier_grid(evaluator, n), dims=(0, 1, 2), norm="backward"))


@dataclass(frozen=True, eq=False)
class GridEvaluator:
    """
    Evaluator backed by an n^3 real-space grid.

    Exact on K3 and on any point set obtained by rotating it only up to the
    trilinear interpolation of the Fourier grid; points outside the cube give 0.
    """
    grid: RTensor

    def __post_init__(self):
        n = self.grid.shape[0]
        object.__setattr__(self, "_fourier", numcore.fft(self.grid, dims=(0, 1, 2), norm="backward"))
        object.__setattr__(self, "_n", n)

    def __call__(self, k: RTensor) -> CTensor:
        n = self._n
        k = np.atleast_2d(k)
        idx = k * n / (2.0 * np.pi) + n // 2    # fractional index per axis (x, y, z)
        coords = idx[:, ::-1].T                # (z, y, x) rows
        re = map_coordinates(self._fourier.real, coords, order=1, mode="constant", cval=0.0)
        im = map_coordinates(self._fourier.imag, coords, order=1, mode="constant", cval=0.0)
        return re + 1j * im


# ==================== NEURAL VOLUMES ====================

@dataclass
class NeuralVolume:
    """
    v_hat(k) = a(k) exp(i b(k)) with coordinate MLPs a (amplitude) and b (phase).

    Inputs are [k / pi, sin(w_l k), cos(w_l k)] for octave frequencies
    w_l = (n / 2) 2^(l - L + 1), l = 0..L-1, optionally followed by a latent
    vector. Values are Hermitian-symmetrized and zero outside |k| <= pi.
    """
    n: int
    order: int
    amplitude: nn.NetworkParams
    phase: nn.NetworkParams
    latent_width: int = 0

    def flat(self) -> list[np.ndarray]:
        return list(self.amplitude.tensors) + list(self.phase.tensors)

    def with_flat(self, tensors: Sequence[np.ndarray]) -> "NeuralVolume":
        k = len(self.amplitude.tensors)
        return NeuralVolume(self.n, self.order, self.amplitude.with_tensors(list(tensors[:k])),
                            self.phase.with_tensors(list(tensors[k:])), self.latent_width)

    def count(self) -> int:
        return self.amplitude.count() + self.phase.count()

    def nets(self) -> dict[str, nn.NetworkParams]:
        return {"volume.amplitude": self.amplitude, "volume.phase": self.phase}


def feature_width(order: int, latent_width: int = 0) -> int:
    return 3 + 6 * order + latent_width


def build_neural_volume(n: int,
                        order: int = 8,
                        width: int = 64,
                        depth: int = 3,
                        latent_width: int = 0,
                        seed: int = 0) -> NeuralVolume:
    hidden = []
    for _ in range(depth):
        hidden += [nn.full(width), nn.act("lrelu")]
    chain = tuple(hidden) + (nn.full(1), nn.act("linear"))
    in_shape = (feature_width(order, latent_width),)
    return NeuralVolume(
        n, order,
        nn.NetworkParams.build(chain, in_shape, seed, "volume/amplitude"),
        nn.NetworkParams.build(chain, in_shape, seed, "volume/phase"),
        latent_width,
    )


def volume_from_nets(nets: dict[str, nn.NetworkParams], n: int, order: int) -> NeuralVolume:
    amp, phase = nets["volume.amplitude"], nets["volume.phase"]
    latent = amp.in_shape[0] - feature_width(order)
    return NeuralVolume(n, order, amp, phase, latent)


def positional_features(k: RTensor, n: int, order: int) -> RTensor:
    k = np.atleast_2d(k)
    omegas = (n / 2.0) * 2.0 ** (np.arange(order) - order + 1)
    arg = (k[:, None, :] * omegas[None, :, None]).reshape(len(k), -1)
    return np.concatenate([k / np.pi, np.sin(arg), np.cos(arg)], axis=1)


def _raw_node(vol: NeuralVolume, feats: RTensor, tape: nn.Tape, params: Sequence[nn.Node],
              z_v: np.ndarray | nn.Node | None) -> nn.Node:
    """f(k) = a(k) exp(i b(k)) as an (M,) node."""
    x = tape.constant(feats)
    if vol.latent_width:
        if z_v is None:
            raise ValueError("this volume expects a latent vector")
        zrow = nn.reshape(z_v if isinstance(z_v, nn.Node) else tape.constant(np.asarray(z_v)),
                          (1, vol.latent_width))
        ones = tape.constant(np.ones((len(feats), 1)))
        x = nn.concat([x, nn.matmul(ones, zrow)], axis=1)
    k = len(vol.amplitude.tensors)
    a = nn.forward(vol.amplitude, x, tape, params[:k])
    b = nn.forward(vol.phase, x, tape, params[k:])
    return nn.reshape(nn.mul(a, nn.exp_i(b)), (len(feats),))


def neural_values_node(vol: NeuralVolume,
                       k: RTensor,
                       tape: nn.Tape,
                       params: Sequence[nn.Node],
                       z_v=None,
                       mirror: np.ndarray | None = None) -> nn.Node:
    """
    Symmetrized, band-limited values at points k on the tape.

    `mirror` maps each row of k to the row holding -k; without it the
    network is evaluated a second time at -k.
    """
    k = np.atleast_2d(k)
    mask = (np.linalg.norm(k, axis=1) <= np.pi + 1e-12).astype(np.float64)
    f = _raw_node(vol, positional_features(k, vol.n, vol.order), tape, params, z_v)
    if mirror is not None:
        f_neg = nn.index(f, mirror)
    else:
        f_neg = _raw_node(vol, positional_features(-k, vol.n, vol.order), tape, params, z_v)
    sym = nn.scale(nn.add(f, nn.conj(f_neg)), 0.5)
    return nn.mul(sym, mask)


def eval_neural_volume(vol: NeuralVolume, k: RTensor, z_v: np.ndarray | None = None) -> CTensor:
    """Plain evaluation of the neural volume at points k (M, 3)."""
    tape = nn.Tape()
    params = [tape.constant(t) for t in vol.flat()]
    return neural_values_node(vol, k, tape, params, z_v).value


@dataclass(frozen=True, eq=False)
class NeuralEvaluator:
    vol: NeuralVolume
    z_v: np.ndarray | None = None

    def __call__(self, k: RTensor) -> CTensor:
        return eval_neural_volume(self.vol, k, self.z_v)


# ==================== SLICES AND IMAGES ====================

def plane_points(n: int) -> RTensor:
    """K2 embedded in the kz = 0 plane, (n^2, 3), y slow and x fast."""
    k2 = numcore.frequency_grid_nd(n, 2)
    return np.concatenate([k2, np.zeros((len(k2), 1))], axis=1)


def slice_points(rotations: np.ndarray, n: int) -> RTensor:
    """R^T (kx, ky, 0) for every rotation, (N, n^2, 3)."""
    rot = np.asarray(rotations)
    rot = rot[None] if rot.ndim == 2 else rot
    return np.einsum("mi,bij->bmj", plane_points(n), rot)


def slice_mirror(n: int, count: int = 1) -> np.ndarray | None:
    """
    Index of -k for every slice point of `count` stacked slices (odd n only).

    On an odd grid -k of a slice point is the flipped grid point of the same slice.
    """
    if n % 2 == 0:
        return None
    neg = numcore.negated_index(n)
    single = (neg[:, None] * n + neg[None, :]).ravel()
    return (np.arange(count)[:, None] * n * n + single[None, :]).ravel()


def slice_volume(evaluator: VolumeEvaluator, R: np.ndarray, n: int) -> CTensor:
    """
    Central slice v_hat(R^T (kx, ky, 0)) on K2 as an n^2-vector (one rotation)
    or (N, n^2) array (a batch).
    """
    pts = slice_points(R, n)
    values = evaluator(pts.reshape(-1, 3)).reshape(pts.shape[0], n * n)
    return values[0] if np.asarray(R).ndim == 2 else values


def slices_to_images(slices: CTensor, n: int) -> RTensor:
    """Inverse unitary 2D DFT of (N, n^2) slices -> (N, n, n) real images."""
    numcore.ensure_finite(slices, "slice values")
    return np.real(numcore.ifft(slices.reshape(-1, n, n), dims=(1, 2)))


def simulate_images(evaluator: VolumeEvaluator,
                    rotations: np.ndarray,
                    sigma: float,
                    n: int,
                    rng: SeededRng,
                    workers: int = 1) -> RTensor:
    """
    Noisy images (N, n, n), chunk c of IMAGE_CHUNK images drawing noise from stream chunk c.

    Raises:
        ValueError: sigma < 0
        NumericalError: non-finite slice values
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    sizes = numcore.chunk_sizes(len(rotations), IMAGE_CHUNK)
    starts = np.concatenate([[0], np.cumsum(sizes)])

    def chunk(c: int) -> RTensor:
        rots = rotations[starts[c]:starts[c + 1]]
        images = slices_to_images(slice_volume(evaluator, rots, n), n)
        if sigma > 0:
            images = images + sigma * rng.generator(c).standard_normal(images.shape)
        return images

    return np.concatenate(numcore.parallel_map(chunk, range(len(sizes)), workers))


# ==================== 2D MOMENTS ====================

@dataclass(frozen=True, eq=False)
class CryoMomentPair:
    """m1 (n^2) and Hermitian m2 (n^2 x n^2) of image transforms on K2."""
    m1: CTensor
    m2: CTensor
    kind: str = "analytic"
    sigma: float | None = None
    count: int | None = None

    def __post_init__(self):
        d = len(self.m1)
        n = int(round(np.sqrt(d)))
        if n * n != d:
            raise ValueError(f"m1 length {d} is not a square grid")
        if self.m2.shape != (d, d):
            raise ValueError(f"m2 shape {self.m2.shape} does not match m1 length {d}")
        asym = np.linalg.norm(self.m2 - self.m2.conj().T)
        if asym > HERMITIAN_TOL * max(1.0, np.linalg.norm(self.m2)):
            raise ValueError(f"m2 is not Hermitian (asymmetry {asym:.3e})")

    @property
    def n(self) -> int:
        return int(round(np.sqrt(len(self.m1))))


def save_moments_2d(pair: CryoMomentPair, out_dir: str | Path, meta: dict | None = None) -> list[Path]:
    out_dir = Path(out_dir)
    info = {"n": pair.n, "kind": pair.kind, "sigma": pair.sigma, "count": pair.count, **(meta or {})}
    return [numcore.write_tensor(out_dir / "m1.omt", pair.m1, info),
            numcore.write_tensor(out_dir / "m2.omt", pair.m2, info)]


def load_moments_2d(in_dir: str | Path) -> CryoMomentPair:
    in_dir = Path(in_dir)
    m1, meta = numcore.read_tensor(in_dir / "m1.omt")
    m2, _ = numcore.read_tensor(in_dir / "m2.omt")
    try:
        return CryoMomentPair(m1.astype(np.complex128), m2.astype(np.complex128),
                              meta.get("kind", "empirical"), meta.get("sigma"), meta.get("count"))
    except ValueError as e:
        raise ArtifactError(f"{in_dir}: {e}") from e


def _partial_moments(images: RTensor) -> tuple[CTensor, CTensor]:
    y = numcore.fft(images, dims=(1, 2)).reshape(len(images), -1)
    return y.sum(axis=0), y.T @ y.conj()


def _finish(s1: CTensor, s2: CTensor, count: int, sigma: float) -> CryoMomentPair:
    m2 = s2 / count - sigma ** 2 * np.eye(len(s1))
    return CryoMomentPair(s1 / count, 0.5 * (m2 + m2.conj().T), "empirical", sigma, count)


def empirical_moments_2d(images: RTensor, sigma: float, workers: int = 1) -> CryoMomentPair:
    """
    m1 = mean F2 v_j,  m2 = mean (F2 v_j)(F2 v_j)^* - sigma^2 I

    Raises:
        ValueError: empty batch or sigma < 0
    """
    if len(images) == 0:
        raise ValueError("empirical moments need a nonempty batch")
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    numcore.ensure_finite(images, "images")
    chunks = [images[i:i + IMAGE_CHUNK] for i in range(0, len(images), IMAGE_CHUNK)]
    parts = numcore.parallel_map(_partial_moments, chunks, workers)
    s1 = numcore.reduce_sum([p[0] for p in parts], workers)
    s2 = numcore.reduce_sum([p[1] for p in parts], workers)
    return _finish(s1, s2, len(images), sigma)


def simulate_moments_2d(evaluator: VolumeEvaluator,
                        spec: VmfMixtureSpec,
                        count: int,
                        sigma: float,
                        n: int,
                        rng: SeededRng,
                        workers: int = 1,
                        progress: bool = False) -> CryoMomentPair:
    """
    Draw rotations, simulate images and accumulate moments chunk by chunk,
    never holding more than IMAGE_CHUNK images per worker.

    Equals empirical_moments_2d(simulate_images(...)) for the same streams.
    """
    if count < 1:
        raise ValueError(f"need at least one image, got {count}")
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    rotations = sample_rotations(spec, count, rng.child("rotations"), workers)
    noise = rng.child("noise")
    sizes = numcore.chunk_sizes(count, IMAGE_CHUNK)
    starts = np.concatenate([[0], np.cumsum(sizes)])

    def chunk(c: int) -> tuple[CTensor, CTensor]:
        images = slices_to_images(slice_volume(evaluator, rotations[starts[c]:starts[c + 1]], n), n)
        if sigma > 0:
            images = images + sigma * noise.generator(c).standard_normal(images.shape)
        return _partial_moments(images)

    batches = [list(range(i, min(i + max(workers, 1), len(sizes)))) for i in range(0, len(sizes), max(workers, 1))]
    parts = []
    for batch in tqdm(batches, desc="images", disable=not progress):
        parts.extend(numcore.parallel_map(chunk, batch, workers))
    s1 = numcore.reduce_sum([p[0] for p in parts], workers)
    s2 = numcore.reduce_sum([p[1] for p in parts], workers)
    logger.info("Accumulated moments of %d images (n=%d, sigma=%g)", count, n, sigma)
    return _finish(s1, s2, count, sigma)
