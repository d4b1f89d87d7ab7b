"""
Moment encoders for multireference alignment.

Two encoders map a moment pair (m1, m2) to latents: one predicts the shift
density z_rho on X1, the other the Fourier signal z_v on K1. They are trained
on simulated (moments -> signal, density) pairs and then refined on a single
measured moment pair by fitting the moments their latents produce.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import pandas as pd
from tqdm import tqdm

import autonn as nn
import mra
import numcore
from errors import NumericalError
from mra import MixtureSpec1D, MomentPair, MraDensity, MraSignal
from numcore import CTensor, RTensor, SeededRng

logger = logging.getLogger(__name__)

Head = Literal["rho", "v"]
NET_PARTS = ("branch_m1", "branch_m2", "merged")
STACKED_CHANNELS = 6
EVAL_BATCH = 512


# ==================== ARCHITECTURE ====================

def _default_branch_m1() -> tuple[nn.LayerSpec, ...]:
    return (nn.conv1d(5, 8), nn.act("lrelu"),
            nn.conv1d(5, 8), nn.act("lrelu"),
            nn.conv1d(5, 3), nn.act("lrelu"))


def _default_branch_m2() -> tuple[nn.LayerSpec, ...]:
    return (nn.conv1d(5, 32), nn.act("lrelu"),
            nn.conv1d(5, 16), nn.act("lrelu"),
            nn.conv1d(5, 3), nn.act("lrelu"))


def _default_merged() -> tuple[nn.LayerSpec, ...]:
    return (nn.conv1d(5, 8), nn.act("lrelu"),
            nn.conv1d(5, 8), nn.act("lrelu"))


@dataclass(frozen=True)
class EncoderArch:
    """
    Layer chains of the encoder.

    branch_m1 sees m1 as a 2-channel (re, im) field over K1.
    branch_m2 sees m2 as a 2n-channel field: channel d holds the d-th cyclic
    diagonal m2[i, i + d], so a joint rotation of both frequency indices
    becomes a rotation of the field.
    The two branch outputs are stacked to 6 channels, run through `merged`,
    then a hidden fully connected layer (width 2n unless `hidden` is set) and
    the output layer.
    """
    branch_m1: tuple[nn.LayerSpec, ...] = field(default_factory=_default_branch_m1)
    branch_m2: tuple[nn.LayerSpec, ...] = field(default_factory=_default_branch_m2)
    merged: tuple[nn.LayerSpec, ...] = field(default_factory=_default_merged)
    hidden: int | None = None

    def __post_init__(self):
        def last_channels(chain):
            convs = [s for s in chain if s.kind == "conv1d_periodic"]
            if not convs or any(s.kind in ("fully_connected", "conv2d") for s in chain):
                raise ValueError("encoder branches must be conv1d_periodic chains")
            return convs[-1].channels
        if last_channels(self.branch_m1) + last_channels(self.branch_m2) != STACKED_CHANNELS:
            raise ValueError(f"branch outputs must stack to {STACKED_CHANNELS} channels")
        if any(s.kind in ("fully_connected", "conv2d") for s in self.merged):
            raise ValueError("merged chain must keep the (channels, n) layout")


@dataclass
class MraEncoder:
    n: int
    head: Head
    nets: dict[str, nn.NetworkParams]

    def flat(self) -> list[np.ndarray]:
        return [t for part in NET_PARTS for t in self.nets[part].tensors]

    def with_flat(self, tensors: Sequence[np.ndarray]) -> "MraEncoder":
        nets, i = {}, 0
        for part in NET_PARTS:
            k = len(self.nets[part].tensors)
            nets[part] = self.nets[part].with_tensors(list(tensors[i:i + k]))
            i += k
        return MraEncoder(self.n, self.head, nets)

    def count(self) -> int:
        return sum(self.nets[p].count() for p in NET_PARTS)

    @property
    def out_width(self) -> int:
        return self.n if self.head == "rho" else 2 * self.n


def build_encoder(n: int, head: Head, arch: EncoderArch | None = None, seed: int = 0) -> MraEncoder:
    """
    Build a randomly initialized encoder.

    Raises:
        ValueError: n < 3, unknown head or inconsistent architecture
    """
    if n < 3:
        raise ValueError(f"encoder needs n >= 3, got {n}")
    if head not in ("rho", "v"):
        raise ValueError(f"unknown head '{head}'")
    arch = arch or EncoderArch()
    out = n if head == "rho" else 2 * n
    head_chain = (nn.full(arch.hidden or 2 * n), nn.act("lrelu"), nn.full(out), nn.act("linear"))
    nets = {
        "branch_m1": nn.NetworkParams.build(arch.branch_m1, (2, n), seed, f"{head}/branch_m1"),
        "branch_m2": nn.NetworkParams.build(arch.branch_m2, (2 * n, n), seed, f"{head}/branch_m2"),
        "merged": nn.NetworkParams.build(arch.merged + head_chain, (STACKED_CHANNELS, n), seed,
                                         f"{head}/merged"),
    }
    enc = MraEncoder(n, head, nets)
    logger.debug("Built %s encoder for n=%d with %d parameters", head, n, enc.count())
    return enc


def m1_field(m1: CTensor) -> RTensor:
    """(B, n) complex -> (B, 2, n) real channels."""
    m1 = np.atleast_2d(m1)
    return np.stack([m1.real, m1.imag], axis=1)


def m2_field(m2: CTensor) -> RTensor:
    """(B, n, n) complex -> (B, 2n, n): channel d, position i holds m2[i, (i + d) mod n]."""
    m2 = m2[None] if m2.ndim == 2 else m2
    n = m2.shape[-1]
    i = np.arange(n)[None, :]
    d = np.arange(n)[:, None]
    diag = m2[:, np.broadcast_to(i, (n, n)), (i + d) % n]
    return np.concatenate([diag.real, diag.imag], axis=1)


def encode(enc: MraEncoder,
           m1: CTensor,
           m2: CTensor,
           tape: nn.Tape | None = None,
           params: Sequence[nn.Node] | None = None):
    """
    Run the encoder on a batch of moments.

    Returns the (B, out_width) output: an array without a tape, a Node with one.
    """
    own = tape is None
    tape = tape or nn.Tape()
    if params is None:
        params = [tape.constant(t) for t in enc.flat()]
    sizes = [len(enc.nets[p].tensors) for p in NET_PARTS]
    p1 = params[:sizes[0]]
    p2 = params[sizes[0]:sizes[0] + sizes[1]]
    p3 = params[sizes[0] + sizes[1]:]
    h1 = nn.forward(enc.nets["branch_m1"], tape.constant(m1_field(m1)), tape, p1)
    h2 = nn.forward(enc.nets["branch_m2"], tape.constant(m2_field(m2)), tape, p2)
    out = nn.forward(enc.nets["merged"], nn.concat([h1, h2], axis=1), tape, p3)
    return out.value if own else out


def output_to_latent(head: Head, out: np.ndarray) -> np.ndarray:
    """Encoder output rows -> z_rho (real) or z_v (complex)."""
    if head == "rho":
        return out
    n = out.shape[-1] // 2
    return out[..., :n] + 1j * out[..., n:]


def encoder_nets(enc: MraEncoder) -> dict[str, nn.NetworkParams]:
    return {f"{enc.head}.{p}": enc.nets[p] for p in NET_PARTS}


def encoder_from_nets(nets: dict[str, nn.NetworkParams], head: Head) -> MraEncoder:
    try:
        parts = {p: nets[f"{head}.{p}"] for p in NET_PARTS}
    except KeyError as e:
        raise ValueError(f"parameter file has no {head} encoder ({e})") from e
    return MraEncoder(parts["branch_m1"].in_shape[-1], head, parts)


# ==================== DATASETS ====================

@dataclass(frozen=True, eq=False)
class MraDataset:
    """Noise-free moments with the signals and densities that produced them."""
    m1: CTensor      # (N, n)
    m2: CTensor      # (N, n, n)
    rho: RTensor     # (N, n)
    v_hat: CTensor   # (N, n)

    def __len__(self) -> int:
        return len(self.rho)

    @property
    def n(self) -> int:
        return self.rho.shape[1]

    def subset(self, idx) -> "MraDataset":
        return MraDataset(self.m1[idx], self.m2[idx], self.rho[idx], self.v_hat[idx])

    def split(self, test_fraction: float) -> tuple["MraDataset", "MraDataset"]:
        """Leading rows train, trailing rows test."""
        n_test = int(round(len(self) * test_fraction))
        n_train = len(self) - n_test
        if n_train < 1:
            raise ValueError(f"test fraction {test_fraction} leaves no training pairs")
        return self.subset(slice(0, n_train)), self.subset(slice(n_train, None))

    def targets(self, head: Head) -> np.ndarray:
        return self.rho if head == "rho" else self.v_hat


def make_dataset(n_components: int,
                 count: int,
                 n: int,
                 rng: SeededRng,
                 stddev_range: tuple[float, float] = (0.05, 0.2),
                 workers: int = 1) -> MraDataset:
    """
    Draw `count` random (signal, density) mixture pairs and their analytic moments.

    Sample i uses stream chunk i, so datasets are identical for any worker count.
    """
    if count < 1:
        raise ValueError(f"dataset needs at least one pair, got {count}")

    def draw(i: int):
        gen = rng.generator(i)
        signal = mra.sample_mixture(MixtureSpec1D.random(n_components, gen, stddev_range), n, "signal")
        density = mra.sample_mixture(MixtureSpec1D.random(n_components, gen, stddev_range), n, "density")
        pair = mra.analytic_moments(signal, density)
        return pair.m1, pair.m2, density.mass, signal.values_fourier

    rows = numcore.parallel_map(draw, range(count), workers)
    return MraDataset(
        np.stack([r[0] for r in rows]),
        np.stack([r[1] for r in rows]),
        np.stack([r[2] for r in rows]),
        np.stack([r[3] for r in rows]),
    )


def save_dataset(ds: MraDataset, out_dir: str | Path, meta: dict | None = None) -> list[Path]:
    out_dir = Path(out_dir)
    return [numcore.write_tensor(out_dir / f"{name}.omt", getattr(ds, name), meta or {})
            for name in ("m1", "m2", "rho", "v_hat")]


def load_dataset(in_dir: str | Path) -> MraDataset:
    in_dir = Path(in_dir)
    arrays = {name: numcore.read_tensor(in_dir / f"{name}.omt")[0] for name in ("m1", "m2", "rho", "v_hat")}
    return MraDataset(arrays["m1"].astype(np.complex128), arrays["m2"].astype(np.complex128),
                      np.real(arrays["rho"]), arrays["v_hat"].astype(np.complex128))


# ==================== SUPERVISED TRAINING ====================

@dataclass(frozen=True)
class TrainConfig:
    dataset_size: int = 60000
    test_fraction: float = 0.125
    batch_size: int = 128
    schedule: tuple[tuple[float, int], ...] = ((1e-3, 20), (1e-4, 10), (1e-5, 5))
    seed: int = 0
    augment_sigma: float = 0.0

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.test_fraction < 1.0:
            raise ValueError(f"test_fraction must be in [0, 1), got {self.test_fraction}")
        for lr, epochs in self.schedule:
            if lr <= 0 or epochs < 0:
                raise ValueError(f"bad schedule entry ({lr}, {epochs})")
        if self.augment_sigma < 0:
            raise ValueError(f"augment_sigma must be >= 0, got {self.augment_sigma}")


@dataclass
class TrainResult:
    encoder: MraEncoder
    train_error: float
    test_error: float
    trace: pd.DataFrame


def _target_rows(head: Head, targets: np.ndarray) -> np.ndarray:
    """Targets in the encoder output layout."""
    if head == "rho":
        return targets
    return np.concatenate([targets.real, targets.imag], axis=-1)


def aligned_targets(head: Head, pred: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """
    Replace each target by its cyclic shift closest to the prediction.

    Moments do not change under a global shift, so the encoder is only
    asked for some member of the target's shift orbit.
    """
    n = targets.shape[-1]
    if head == "rho":
        idx = (np.arange(n)[None, :] + np.arange(n)[:, None]) % n  # row s: roll by -s
        orbit = targets[:, idx]                                    # (B, n shifts, n)
    else:
        orbit = mra.shift_phases(n)[None, :, :] * targets[:, None, :]
    orbit_rows = _target_rows(head, orbit)
    dist = np.sum((orbit_rows - pred[:, None, :]) ** 2, axis=-1)
    best = np.argmin(dist, axis=1)
    return orbit_rows[np.arange(len(pred)), best]


def _augment(m1: CTensor, m2: CTensor, sigma: float, gen: np.random.Generator) -> tuple[CTensor, CTensor]:
    """Gaussian perturbation of the moments; m2 stays Hermitian."""
    b, n = m1.shape
    noise1 = (gen.standard_normal((b, n)) + 1j * gen.standard_normal((b, n))) / np.sqrt(2)
    g = (gen.standard_normal((b, n, n)) + 1j * gen.standard_normal((b, n, n))) / np.sqrt(2)
    noise2 = 0.5 * (g + np.conj(np.swapaxes(g, 1, 2)))
    return m1 + sigma * noise1, m2 + sigma * noise2


def predict(enc: MraEncoder, m1: CTensor, m2: CTensor) -> np.ndarray:
    """Latents for a batch of moments, evaluated in blocks of EVAL_BATCH."""
    outs = [encode(enc, m1[i:i + EVAL_BATCH], m2[i:i + EVAL_BATCH])
            for i in range(0, len(m1), EVAL_BATCH)]
    return output_to_latent(enc.head, np.concatenate(outs))


def dataset_error(enc: MraEncoder, ds: MraDataset) -> float:
    """Mean shift-aligned relative error of the encoder's latents on a dataset."""
    if len(ds) == 0:
        return float("nan")
    z = predict(enc, ds.m1, ds.m2)
    if enc.head == "rho":
        errs = [mra.relative_error_signal(z[i], ds.rho[i]) for i in range(len(ds))]
    else:
        errs = [mra.relative_error_fourier(z[i], ds.v_hat[i]) for i in range(len(ds))]
    return float(np.mean(errs))


def train_supervised(enc: MraEncoder,
                     dataset: MraDataset,
                     cfg: TrainConfig,
                     progress: bool = False) -> TrainResult:
    """
    Fit the encoder to dataset targets with Adam on a shift-aligned MSE.

    Raises:
        ValueError: empty dataset or mismatched n
        NumericalError: non-finite loss (diagnostics carry epoch, batch, last loss)
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    if dataset.n != enc.n:
        raise ValueError(f"dataset has n={dataset.n}, encoder expects n={enc.n}")
    train, test = dataset.split(cfg.test_fraction)
    params = enc.flat()
    state = nn.AdamState.zeros_like(params)
    shuffle = SeededRng(cfg.seed, f"shuffle/{enc.head}")
    noise = SeededRng(cfg.seed, f"augment/{enc.head}")
    rows = []
    last = float("nan")
    epochs = [lr for lr, count in cfg.schedule for _ in range(count)]
    step = 0
    for epoch, lr in enumerate(tqdm(epochs, desc=f"train {enc.head}", disable=not progress)):
        order = shuffle.generator(epoch).permutation(len(train))
        losses = []
        for b, start in enumerate(range(0, len(train), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            m1, m2 = train.m1[idx], train.m2[idx]
            if cfg.augment_sigma > 0:
                m1, m2 = _augment(m1, m2, cfg.augment_sigma, noise.generator(step))
            tape = nn.Tape()
            leaves = tape.parameters(params)
            out = encode(enc, m1, m2, tape, leaves)
            target = aligned_targets(enc.head, out.value, train.targets(enc.head)[idx])
            loss = nn.mean(nn.abs2(out - target))
            value = float(loss.value)
            if not np.isfinite(value):
                raise NumericalError(
                    f"training loss diverged at epoch {epoch}, batch {b}",
                    {"epoch": epoch, "batch": b, "last_loss": last},
                )
            grads = tape.backward(loss, leaves)
            params, state = nn.adam_step(params, grads, state, lr)
            losses.append(value)
            last = value
            step += 1
        rows.append({"epoch": epoch, "lr": lr, "loss": float(np.mean(losses))})
        logger.debug("epoch %d (%s): loss %.4e", epoch, enc.head, rows[-1]["loss"])

    trained = enc.with_flat(params)
    train_err = dataset_error(trained, train)
    test_err = dataset_error(trained, test)
    logger.info("Trained %s encoder: train error %.4f, test error %.4f", enc.head, train_err, test_err)
    return TrainResult(trained, train_err, test_err,
                       pd.DataFrame(rows, columns=["epoch", "lr", "loss"]))


# ==================== LATENT MOMENTS ====================

def project_simplex(z: RTensor) -> RTensor:
    """Clip negatives and renormalize; all-nonpositive input maps to uniform."""
    clipped = np.clip(z, 0.0, None)
    total = clipped.sum()
    return clipped / total if total > 0 else np.full(len(z), 1.0 / len(z))


def latents_to_moments(z_v: CTensor, z_rho: RTensor) -> MomentPair:
    """
    Moments generated by the latents; z_rho is projected to the simplex
    first if it has negative entries.
    """
    z_rho = np.asarray(z_rho, dtype=np.float64)
    if np.any(z_rho < 0):
        z_rho = project_simplex(z_rho)
    m1, m2 = mra.shift_moments(np.asarray(z_v, dtype=np.complex128), z_rho)
    return MomentPair(m1, m2, kind="analytic")


def _project_node(z: nn.Node) -> nn.Node:
    clipped = nn.lrelu(z, slope=0.0)
    total = nn.sum_(clipped, keepdims=True)
    if float(total.value[0]) <= 0:
        return z.tape.constant(np.full(z.shape, 1.0 / z.shape[0]))
    return nn.mul(clipped, nn.reciprocal(total))


def latent_moments_node(z_v: nn.Node, z_rho: nn.Node) -> tuple[nn.Node, nn.Node]:
    """Tape version of the finite-sum moments for (n,) latents."""
    n = z_v.shape[0]
    u = nn.mul(z_v.tape.constant(mra.shift_phases(n)), z_v)          # (n shifts, n)
    m1 = nn.reshape(nn.matmul(nn.reshape(z_rho, (1, n)), u), (n,))
    weighted = nn.mul(nn.transpose(u, (1, 0)), nn.reshape(z_rho, (1, n)))
    m2 = nn.matmul(weighted, nn.conj(u))
    return m1, m2


def moment_loss_node(m1: nn.Node, m2: nn.Node, target: MomentPair, lam: float) -> nn.Node:
    return nn.frobenius_norm(nn.sub(m1, target.m1)) + \
        nn.scale(nn.frobenius_norm(nn.sub(m2, target.m2)), lam)


def moment_loss(pair: MomentPair, target: MomentPair, lam: float) -> float:
    return float(np.linalg.norm(target.m1 - pair.m1) + lam * np.linalg.norm(target.m2 - pair.m2))


def align_latents(z_v: CTensor,
                  z_rho: RTensor,
                  m1: CTensor,
                  m2: CTensor,
                  lam: float = 1.0) -> tuple[CTensor, RTensor, int]:
    """
    Best of the n candidates (z_v, roll(z_rho, s)).

    The two encoders settle on their own shift frames; this picks the
    relative frame whose moments best match (m1, m2). A joint shift leaves the
    moments unchanged, so rolling the density alone reaches every relative
    frame. Ties keep s = 0.

    Returns:
        z_v, the rolled z_rho, the chosen s in 0..n-1
    """
    target = MomentPair(np.asarray(m1), np.asarray(m2))
    n = len(z_v)
    best_s, best_loss = 0, np.inf
    for s in range(n):
        loss = moment_loss(latents_to_moments(z_v, np.roll(z_rho, s)), target, lam)
        if loss < best_loss:
            best_s, best_loss = s, loss
    return np.asarray(z_v), np.roll(z_rho, best_s), best_s


# ==================== REFINEMENT ====================

@dataclass(frozen=True)
class ReconConfig:
    lam: float = 1.0
    iterations: int = 3000
    lr: float = 1e-4
    schedule: tuple[tuple[float, int], ...] = ()
    project_density: bool = True
    align: bool = True

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"lambda must be >= 0, got {self.lam}")
        if self.iterations < 0:
            raise ValueError(f"iterations must be >= 0, got {self.iterations}")

    def learning_rates(self) -> list[float]:
        return nn.expand_schedule(self.schedule or ((self.lr, self.iterations),))


@dataclass
class RefineResult:
    z_v: CTensor
    z_rho: RTensor
    shift: int
    trace: pd.DataFrame
    encoders: tuple[MraEncoder, MraEncoder]

    @property
    def final_loss(self) -> float:
        return float(self.trace["loss"].iloc[-1])


TRACE_COLUMNS = ["iteration", "loss", "m1_rel_err", "m2_rel_err", "moment_rel_err",
                 "signal_rel_err", "density_rel_err"]


def refine(enc_v: MraEncoder,
           enc_rho: MraEncoder,
           moments: MomentPair,
           cfg: ReconConfig = ReconConfig(),
           truth: tuple[MraSignal, MraDensity] | None = None,
           progress: bool = False) -> RefineResult:
    """
    Fit both encoders so their latents reproduce the measured moments.

    loss = |m1_hat - M1[z_v, z_rho]|_F + lam * |m2_hat - M2[z_v, z_rho]|_F
    with (z_v, z_rho) the encoder outputs on (m1_hat, m2_hat). The relative
    frame found by align_latents at the start (a roll of z_rho) is held fixed.

    Returns latents, chosen shift and a per-iteration trace (row 0 is the
    starting point). Signal and density errors are NaN without `truth`.

    Raises:
        NumericalError: non-finite loss or gradient
    """
    n = moments.n
    if enc_v.n != n or enc_rho.n != n:
        raise ValueError(f"encoders expect n={enc_v.n}/{enc_rho.n}, moments have n={n}")
    m1 = moments.m1[None]
    m2 = moments.m2[None]
    norm1, norm2 = np.linalg.norm(moments.m1), np.linalg.norm(moments.m2)

    shift = 0
    if cfg.align:
        z_v0 = predict(enc_v, m1, m2)[0]
        z_rho0 = predict(enc_rho, m1, m2)[0]
        if cfg.project_density:
            z_rho0 = project_simplex(z_rho0)
        _, _, shift = align_latents(z_v0, z_rho0, moments.m1, moments.m2, cfg.lam)
    roll_idx = (np.arange(n) - shift) % n   # roll(z_rho, shift)

    params_v, params_rho = enc_v.flat(), enc_rho.flat()
    split = len(params_v)
    params = params_v + params_rho
    state = nn.AdamState.zeros_like(params)
    rows = []
    lrs = cfg.learning_rates()
    z_v = z_rho = None
    for it in tqdm(range(len(lrs) + 1), desc="refine", disable=not progress):
        tape = nn.Tape()
        leaves = tape.parameters(params)
        out_v = encode(enc_v, m1, m2, tape, leaves[:split])
        out_rho = encode(enc_rho, m1, m2, tape, leaves[split:])
        zv = nn.make_complex(out_v[0, :n], out_v[0, n:])
        zr = nn.index(nn.reshape(out_rho, (n,)), roll_idx)
        if cfg.project_density:
            zr = _project_node(zr)
        M1, M2 = latent_moments_node(zv, zr)
        loss = moment_loss_node(M1, M2, moments, cfg.lam)
        value = float(loss.value)
        z_v, z_rho = zv.value.copy(), np.real(zr.value).copy()
        row = {
            "iteration": it,
            "loss": value,
            "m1_rel_err": float(np.linalg.norm(moments.m1 - M1.value) / norm1),
            "m2_rel_err": float(np.linalg.norm(moments.m2 - M2.value) / norm2),
        }
        row["moment_rel_err"] = row["m1_rel_err"] + row["m2_rel_err"]
        if truth is not None:
            row["signal_rel_err"] = mra.relative_error_fourier(z_v, truth[0].values_fourier)
            row["density_rel_err"] = mra.relative_error_signal(z_rho, truth[1].mass)
        else:
            row["signal_rel_err"] = row["density_rel_err"] = float("nan")
        if not np.isfinite(value):
            raise NumericalError(f"refinement loss is non-finite at iteration {it}",
                                 {"iteration": it, "last_row": rows[-1] if rows else None})
        rows.append(row)
        if it == len(lrs):
            break
        grads = tape.backward(loss, leaves)
        params, state = nn.adam_step(params, grads, state, lrs[it])

    trace = pd.DataFrame(rows, columns=TRACE_COLUMNS)
    logger.info("Refinement: loss %.4e -> %.4e over %d iterations (shift %d)",
                trace["loss"].iloc[0], trace["loss"].iloc[-1], len(lrs), shift)
    return RefineResult(z_v, z_rho, shift, trace,
                        (enc_v.with_flat(params[:split]), enc_rho.with_flat(params[split:])))


# ==================== WARM-START STUDY ====================

@dataclass
class WarmStartReport:
    curves: pd.DataFrame      # iteration, warm/cold mean errors
    instances: pd.DataFrame   # per instance final errors and winner

    @property
    def wins(self) -> int:
        return int(self.instances["warm_wins"].sum())


def warm_start_study(enc_v: MraEncoder,
                     enc_rho: MraEncoder,
                     instances: int,
                     n_components: int,
                     observations: int,
                     sigma: float,
                     cfg: ReconConfig,
                     seed: int,
                     workers: int = 1) -> WarmStartReport:
    """
    Refine trained and freshly initialized encoders on the same simulated
    moment pairs and compare their error curves.

    The compared error is the shift-aligned signal error; the summed moment
    error is reported alongside.
    """
    n = enc_v.n
    rng = SeededRng(seed, "warm-start")

    def run(i: int) -> tuple[pd.DataFrame, pd.DataFrame]:
        gen = rng.child("instance").generator(i)
        signal = mra.sample_mixture(MixtureSpec1D.random(n_components, gen), n, "signal")
        density = mra.sample_mixture(MixtureSpec1D.random(n_components, gen), n, "density")
        moments = mra.simulate_moments(signal, density, observations, sigma, rng.child(f"obs{i}"))
        warm = refine(enc_v, enc_rho, moments, cfg, (signal, density)).trace
        cold_v = build_encoder(n, "v", seed=seed + 1000 + i)
        cold_rho = build_encoder(n, "rho", seed=seed + 1000 + i)
        cold = refine(cold_v, cold_rho, moments, cfg, (signal, density)).trace
        return warm, cold

    results = numcore.parallel_map(run, range(instances), workers)
    warm = np.stack([r[0]["signal_rel_err"].to_numpy() for r in results])
    cold = np.stack([r[1]["signal_rel_err"].to_numpy() for r in results])
    warm_m = np.stack([r[0]["moment_rel_err"].to_numpy() for r in results])
    cold_m = np.stack([r[1]["moment_rel_err"].to_numpy() for r in results])
    curves = pd.DataFrame({
        "iteration": results[0][0]["iteration"],
        "warm_signal_err": warm.mean(axis=0),
        "cold_signal_err": cold.mean(axis=0),
        "warm_log10_moment_err": np.log10(warm_m).mean(axis=0),
        "cold_log10_moment_err": np.log10(cold_m).mean(axis=0),
    })
    per = pd.DataFrame({
        "instance": np.arange(instances),
        "warm_final": warm[:, -1],
        "cold_final": cold[:, -1],
    })
    per["warm_wins"] = per["warm_final"] < per["cold_final"]
    logger.info("Warm start won %d/%d instances (mean final %.4f vs %.4f)",
                int(per["warm_wins"].sum()), instances, warm[:, -1].mean(), cold[:, -1].mean())
    return WarmStartReport(curves, per)
