"""
Cryo-EM reconstruction by moment matching.

The rotation distribution is discretized on a quadrature set Q, so the
moments of a volume under a density z_rho on Q are finite sums over slices:
    m1 = sum_j z_rho[j] S_j,    m2 = sum_j z_rho[j] S_j S_j^*
An encoder reads the measured moments and proposes z_rho; a neural volume
provides the slices. Both are fitted jointly so the quadrature moments match
the measured ones.
"""
import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

import autonn as nn
import cryo_forward as cf
import numcore
from cryo_forward import CryoMomentPair, NeuralVolume, QuadratureSet, VmfMixtureSpec
from errors import NumericalError
from numcore import CTensor, RTensor

logger = logging.getLogger(__name__)

STACKED_CHANNELS = 6
QUADRATURE_CHUNK = 64


# ==================== QUADRATURE DENSITIES ====================

@dataclass(frozen=True, eq=False)
class QuadratureDensity:
    """Probability of each rotation in a quadrature set."""
    mass: RTensor

    def __post_init__(self):
        numcore.ensure_finite(self.mass, "quadrature density")
        if np.any(self.mass < 0):
            raise ValueError("quadrature density has negative entries")
        if abs(self.mass.sum() - 1.0) > 1e-10:
            raise ValueError(f"quadrature density sums to {self.mass.sum()}, expected 1")

    def __len__(self) -> int:
        return len(self.mass)

    @classmethod
    def uniform(cls, size: int) -> "QuadratureDensity":
        return cls(np.full(size, 1.0 / size))

    @classmethod
    def project(cls, z: RTensor) -> "QuadratureDensity":
        """Clip negatives and renormalize (uniform if nothing is left)."""
        clipped = np.clip(np.asarray(z, dtype=np.float64), 0.0, None)
        total = clipped.sum()
        return cls(clipped / total if total > 0 else np.full(len(clipped), 1.0 / len(clipped)))


def ground_truth_density(spec: VmfMixtureSpec, quadrature: QuadratureSet) -> QuadratureDensity:
    return QuadratureDensity(cf.discretize_on_quadrature(spec, quadrature))


# ==================== QUADRATURE MOMENTS ====================

def quadrature_moments(evaluator: cf.VolumeEvaluator,
                       z_rho: QuadratureDensity,
                       quadrature: QuadratureSet,
                       n: int,
                       workers: int = 1) -> CryoMomentPair:
    """
    Moments of the volume under z_rho on Q.

    Slices are evaluated in fixed blocks of QUADRATURE_CHUNK rotations and the
    partial sums combined in block order.

    Raises:
        ValueError: |z_rho| != |Q|
    """
    if len(z_rho) != len(quadrature):
        raise ValueError(f"density has {len(z_rho)} entries, quadrature has {len(quadrature)}")
    blocks = [slice(i, i + QUADRATURE_CHUNK) for i in range(0, len(quadrature), QUADRATURE_CHUNK)]

    def partial(block: slice) -> tuple[CTensor, CTensor]:
        S = cf.slice_volume(evaluator, quadrature.rotations[block], n)
        w = z_rho.mass[block]
        return w @ S, (S.T * w) @ S.conj()

    parts = numcore.parallel_map(partial, blocks, workers)
    m1 = numcore.reduce_sum([p[0] for p in parts], workers)
    m2 = numcore.reduce_sum([p[1] for p in parts], workers)
    return CryoMomentPair(m1, 0.5 * (m2 + m2.conj().T), kind="analytic")


def quadrature_moments_node(slices: nn.Node, z_rho: nn.Node) -> tuple[nn.Node, nn.Node]:
    """Tape version: slices (|Q|, n^2), z_rho (|Q|,) -> m1 (n^2,), m2 (n^2, n^2)."""
    q, d = slices.shape
    m1 = nn.reshape(nn.matmul(nn.reshape(z_rho, (1, q)), slices), (d,))
    weighted = nn.mul(nn.transpose(slices, (1, 0)), nn.reshape(z_rho, (1, q)))
    return m1, nn.matmul(weighted, nn.conj(slices))


def neural_slices_node(vol: NeuralVolume,
                       quadrature: QuadratureSet,
                       tape: nn.Tape,
                       params: Sequence[nn.Node],
                       z_v=None) -> nn.Node:
    """Neural-volume slices for every rotation of Q, (|Q|, n^2) on the tape."""
    n = vol.n
    pts = cf.slice_points(quadrature.rotations, n).reshape(-1, 3)
    values = cf.neural_values_node(vol, pts, tape, params, z_v, mirror=cf.slice_mirror(n, len(quadrature)))
    return nn.reshape(values, (len(quadrature), n * n))


# ==================== NEURAL GROUND TRUTH ====================

@dataclass
class FitResult:
    volume: NeuralVolume
    error: float
    trace: pd.DataFrame


def _volume_mirror(n: int) -> np.ndarray | None:
    if n % 2 == 0:
        return None
    neg = numcore.negated_index(n)
    return (neg[:, None, None] * n * n + neg[None, :, None] * n + neg[None, None, :]).ravel()


def relative_error_at_identity(u: RTensor, v: RTensor) -> float:
    """|u - v|_F / |v|_F without alignment."""
    denom = np.linalg.norm(v)
    if denom == 0:
        raise ValueError("reference volume has zero norm")
    return float(np.linalg.norm(u - v) / denom)


def fit_neural_gt(target: cf.VolumeEvaluator | RTensor,
                  vol: NeuralVolume,
                  schedule: Sequence[tuple[float, int]] = ((1e-3, 3000), (1e-4, 1000)),
                  progress: bool = False) -> FitResult:
    """
    Least-squares fit of a neural volume to target Fourier values on K3.

    Only frequencies inside the band-limit ball enter the loss. The reported
    error compares the rasterized fit with the rasterized target in real space.

    Args:
        target: an evaluator, or an (n, n, n) real-space grid
        vol: initial network
        schedule: (lr, steps) pairs for Adam

    Raises:
        ValueError: zero target (nothing to compare against)
        NumericalError: non-finite loss
    """
    n = vol.n
    k3 = numcore.frequency_grid_nd(n, 3)
    if isinstance(target, np.ndarray):
        truth_grid = np.asarray(target, dtype=np.float64)
        values = numcore.fft(truth_grid, dims=(0, 1, 2), norm="backward").ravel()
    else:
        values = target(k3)
        truth_grid = np.real(numcore.ifft(values.reshape(n, n, n), dims=(0, 1, 2), norm="backward"))
    inside = np.linalg.norm(k3, axis=1) <= np.pi + 1e-12
    scale_ = np.mean(np.abs(values[inside]) ** 2)
    if scale_ == 0:
        raise ValueError("target volume is identically zero")
    target_in = values[inside]
    mirror = _volume_mirror(n)

    params = vol.flat()
    state = nn.AdamState.zeros_like(params)
    rows = []
    for step, lr in enumerate(tqdm(nn.expand_schedule(schedule), desc="fit volume", disable=not progress)):
        tape = nn.Tape()
        leaves = tape.parameters(params)
        fitted = cf.neural_values_node(vol, k3, tape, leaves, mirror=mirror)
        diff = nn.sub(nn.index(fitted, np.flatnonzero(inside)), target_in)
        loss = nn.scale(nn.mean(nn.abs2(diff)), 1.0 / scale_)
        value = float(loss.value)
        if not np.isfinite(value):
            raise NumericalError(f"volume fit diverged at step {step}",
                                 {"step": step, "last_row": rows[-1] if rows else None})
        rows.append({"step": step, "lr": lr, "loss": value})
        params, state = nn.adam_step(params, tape.backward(loss, leaves), state, lr)

    fitted_vol = vol.with_flat(params)
    fitted_grid = cf.rasterize_evaluator(cf.NeuralEvaluator(fitted_vol), n)
    error = relative_error_at_identity(fitted_grid, truth_grid)
    logger.info("Neural volume fit: relative error %.4f after %d steps", error, len(rows))
    return FitResult(fitted_vol, error, pd.DataFrame(rows, columns=["step", "lr", "loss"]))


# ==================== ENCODER ====================

@dataclass
class CryoEncoder:
    n: int
    quadrature_size: int
    latent_width: int
    nets: dict[str, nn.NetworkParams]

    PARTS = ("branch_m1", "branch_m2", "merged")

    def flat(self) -> list[np.ndarray]:
        return [t for p in self.PARTS for t in self.nets[p].tensors]

    def with_flat(self, tensors: Sequence[np.ndarray]) -> "CryoEncoder":
        nets, i = {}, 0
        for p in self.PARTS:
            k = len(self.nets[p].tensors)
            nets[p] = self.nets[p].with_tensors(list(tensors[i:i + k]))
            i += k
        return CryoEncoder(self.n, self.quadrature_size, self.latent_width, nets)

    def count(self) -> int:
        return sum(self.nets[p].count() for p in self.PARTS)

    def named_nets(self) -> dict[str, nn.NetworkParams]:
        return {f"encoder.{p}": self.nets[p] for p in self.PARTS}


def build_cryo_encoder(n: int,
                       quadrature_size: int,
                       use_latent_zv: bool = False,
                       latent_width: int = 16,
                       hidden: int = 256,
                       seed: int = 0) -> CryoEncoder:
    """
    2D analogue of the MRA encoder.

    m1 enters as a 2-channel (re, im) n x n field. m2 enters as a 2-channel
    n^2 x n^2 image, reduced to an n x n field by a stride-n convolution
    before its stride-1 layers. The branches stack to 6 channels; the head
    ends in |Q| logits (plus the optional z_v latent).

    Raises:
        ValueError: n < 5 or empty quadrature
    """
    if n < 5:
        raise ValueError(f"cryo encoder needs n >= 5, got {n}")
    if quadrature_size < 1:
        raise ValueError("quadrature set is empty")
    latent = latent_width if use_latent_zv else 0
    lr = nn.act("lrelu")
    branch_m1 = (nn.conv2(5, 8), lr, nn.conv2(5, 8), lr, nn.conv2(5, 3), lr)
    branch_m2 = (nn.conv2(n, 16, stride=n), lr, nn.conv2(5, 16), lr, nn.conv2(5, 3), lr)
    merged = (nn.conv2(5, 8), lr, nn.conv2(5, 8), lr,
              nn.full(hidden), lr, nn.full(quadrature_size + latent), nn.act("linear"))
    nets = {
        "branch_m1": nn.NetworkParams.build(branch_m1, (2, n, n), seed, "cryo/branch_m1"),
        "branch_m2": nn.NetworkParams.build(branch_m2, (2, n * n, n * n), seed, "cryo/branch_m2"),
        "merged": nn.NetworkParams.build(merged, (STACKED_CHANNELS, n, n), seed, "cryo/merged"),
    }
    enc = CryoEncoder(n, quadrature_size, latent, nets)
    logger.debug("Built cryo encoder (n=%d, |Q|=%d) with %d parameters", n, quadrature_size, enc.count())
    return enc


def cryo_fields(moments: CryoMomentPair) -> tuple[RTensor, RTensor]:
    n = moments.n
    m1 = moments.m1.reshape(1, n, n)
    f1 = np.stack([m1.real, m1.imag], axis=1)
    f2 = np.stack([moments.m2.real, moments.m2.imag], axis=0)[None]
    return f1, f2


def encode_cryo(enc: CryoEncoder,
                moments: CryoMomentPair,
                tape: nn.Tape | None = None,
                params: Sequence[nn.Node] | None = None):
    """
    Returns (z_rho, z_v): z_rho a (|Q|,) softmax, z_v the latent or None.
    Arrays without a tape, Nodes with one.
    """
    own = tape is None
    tape = tape or nn.Tape()
    if params is None:
        params = [tape.constant(t) for t in enc.flat()]
    k1, k2 = len(enc.nets["branch_m1"].tensors), len(enc.nets["branch_m2"].tensors)
    f1, f2 = cryo_fields(moments)
    h1 = nn.forward(enc.nets["branch_m1"], tape.constant(f1), tape, params[:k1])
    h2 = nn.forward(enc.nets["branch_m2"], tape.constant(f2), tape, params[k1:k1 + k2])
    out = nn.forward(enc.nets["merged"], nn.concat([h1, h2], axis=1), tape, params[k1 + k2:])
    q = enc.quadrature_size
    z_rho = nn.reshape(nn.softmax(out[:, :q], axis=-1), (q,))
    z_v = nn.reshape(out[:, q:], (enc.latent_width,)) if enc.latent_width else None
    if own:
        return z_rho.value, (z_v.value if z_v is not None else None)
    return z_rho, z_v


# ==================== RECONSTRUCTION ====================

@dataclass(frozen=True)
class CryoReconConfig:
    lam: float = 1.0
    schedule: tuple[tuple[float, int], ...] = ((1e-3, 1500), (1e-4, 500))
    normalize: bool = False
    use_latent_zv: bool = False
    latent_width: int = 16
    q1: int = 36
    q2: int = 8
    order: int = 8
    width: int = 64
    depth: int = 3
    stagnation_window: int = 1000
    stagnation_tol: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        nn.expand_schedule(self.schedule)
        if self.q1 < 1 or self.q2 < 1:
            raise ValueError(f"quadrature sizes must be >= 1, got {self.q1} x {self.q2}")


@dataclass
class ReconResult:
    volume: NeuralVolume
    z_rho: QuadratureDensity
    z_v: np.ndarray | None
    encoder: CryoEncoder | None
    trace: pd.DataFrame
    stagnated: bool

    @property
    def final_loss(self) -> float:
        return float(self.trace["loss"].iloc[-1])


def reconstruct(moments: CryoMomentPair,
                cfg: CryoReconConfig,
                quadrature: QuadratureSet | None = None,
                volume: NeuralVolume | None = None,
                encoder: CryoEncoder | None = None,
                fixed_density: QuadratureDensity | None = None,
                progress: bool = False) -> ReconResult:
    """
    Jointly fit encoder and neural volume to the measured moments.

    loss = |m1_hat - M1|_F + lam |m2_hat - M2|_F (each term divided by
    |m_hat|_F when cfg.normalize), with z_rho = encoder(m1_hat, m2_hat) unless
    `fixed_density` pins it. The trace has one row per epoch plus a final row.

    Stagnation (relative loss decrease below cfg.stagnation_tol over
    cfg.stagnation_window epochs) is logged once and flagged on the result.

    Raises:
        NumericalError: non-finite loss
    """
    n = moments.n
    quadrature = quadrature or cf.build_quadrature(cfg.q1, cfg.q2)
    latent = cfg.latent_width if cfg.use_latent_zv and fixed_density is None else 0
    volume = volume or cf.build_neural_volume(n, cfg.order, cfg.width, cfg.depth, latent, cfg.seed)
    if volume.n != n:
        raise ValueError(f"volume grid n={volume.n} does not match moments n={n}")
    if fixed_density is None:
        encoder = encoder or build_cryo_encoder(n, len(quadrature), cfg.use_latent_zv,
                                                cfg.latent_width, seed=cfg.seed)
        if encoder.quadrature_size != len(quadrature):
            raise ValueError(f"encoder outputs {encoder.quadrature_size} weights for |Q|={len(quadrature)}")
    elif len(fixed_density) != len(quadrature):
        raise ValueError(f"density has {len(fixed_density)} entries, quadrature has {len(quadrature)}")

    w1 = 1.0 / np.linalg.norm(moments.m1) if cfg.normalize else 1.0
    w2 = cfg.lam / np.linalg.norm(moments.m2) if cfg.normalize else cfg.lam
    norm1, norm2 = np.linalg.norm(moments.m1), np.linalg.norm(moments.m2)

    enc_params = encoder.flat() if fixed_density is None else []
    split = len(enc_params)
    params = enc_params + volume.flat()
    state = nn.AdamState.zeros_like(params)
    lrs = nn.expand_schedule(cfg.schedule)
    rows: list[dict] = []
    stagnated = False
    z_rho_val, z_v_val = None, None

    for epoch in tqdm(range(len(lrs) + 1), desc="reconstruct", disable=not progress):
        tape = nn.Tape()
        leaves = tape.parameters(params)
        if fixed_density is None:
            z_rho, z_v = encode_cryo(encoder, moments, tape, leaves[:split])
        else:
            z_rho, z_v = tape.constant(fixed_density.mass), None
        S = neural_slices_node(volume, quadrature, tape, leaves[split:], z_v)
        M1, M2 = quadrature_moments_node(S, z_rho)
        loss = nn.add(nn.scale(nn.frobenius_norm(nn.sub(M1, moments.m1)), w1),
                      nn.scale(nn.frobenius_norm(nn.sub(M2, moments.m2)), w2))
        value = float(loss.value)
        if not np.isfinite(value):
            raise NumericalError(f"reconstruction loss is non-finite at epoch {epoch}",
                                 {"epoch": epoch, "last_row": rows[-1] if rows else None})
        rows.append({
            "epoch": epoch,
            "loss": value,
            "m1_rel_err": float(np.linalg.norm(moments.m1 - M1.value) / norm1),
            "m2_rel_err": float(np.linalg.norm(moments.m2 - M2.value) / norm2),
        })
        z_rho_val = np.real(z_rho.value).copy()
        z_v_val = None if z_v is None else z_v.value.copy()

        window = cfg.stagnation_window
        if not stagnated and epoch >= window > 0:
            before = rows[epoch - window]["loss"]
            if before > 0 and (before - value) / before < cfg.stagnation_tol:
                stagnated = True
                logger.warning("Reconstruction stagnated at epoch %d (loss %.4e)", epoch, value)
        if epoch == len(lrs):
            break
        params, state = nn.adam_step(params, tape.backward(loss, leaves), state, lrs[epoch])

    trace = pd.DataFrame(rows, columns=["epoch", "loss", "m1_rel_err", "m2_rel_err"])
    logger.info("Reconstruction: loss %.4e -> %.4e, moment errors %.4f / %.4f",
                trace["loss"].iloc[0], trace["loss"].iloc[-1],
                trace["m1_rel_err"].iloc[-1], trace["m2_rel_err"].iloc[-1])
    fitted_encoder = encoder.with_flat(params[:split]) if fixed_density is None else None
    return ReconResult(
        volume.with_flat(params[split:]),
        QuadratureDensity.project(z_rho_val),
        z_v_val,
        fitted_encoder,
        trace,
        stagnated,
    )
