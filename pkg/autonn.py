"""
Minimal reverse-mode differentiation on numpy arrays, the layer vocabulary
used by the encoders and neural volumes, and an Adam optimizer.

Gradients of a real loss L with respect to a complex node z are stored as
    g = dL/dRe(z) + i * dL/dIm(z)
For a holomorphic op y = f(z) the chain rule is g_z = g_y * conj(f'(z)).
Whenever a gradient flows into a real-valued node its real part is kept.

Usage:
    tape = Tape()
    leaves = tape.parameters(net.tensors)
    out = forward(net, tape.constant(x), tape, leaves)
    loss = mean(abs2(out - tape.constant(target)))
    grads = tape.backward(loss, leaves)
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Literal, Sequence

import numpy as np

import numcore
from errors import ArtifactError, NumericalError

logger = logging.getLogger(__name__)

LRELU_SLOPE = 0.02
NORM_EPS = 1e-12

Vjp = Callable[[np.ndarray], np.ndarray]


# ==================== TAPE ====================

class Node:
    """One recorded value. Parents are (node, vjp) pairs."""

    __slots__ = ("tape", "index", "value", "parents", "requires_grad")

    def __init__(self, tape: "Tape", index: int, value: np.ndarray,
                 parents: list[tuple["Node", Vjp]], requires_grad: bool):
        self.tape = tape
        self.index = index
        self.value = value
        self.parents = parents
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, key):
        return index(self, key)

    def __repr__(self) -> str:
        return f"Node(#{self.index}, shape={self.value.shape}, dtype={self.value.dtype})"


class Tape:
    """Append-only record of primitive operations; recording order is topological."""

    def __init__(self):
        self.nodes: list[Node] = []

    def _push(self, value, parents, requires_grad) -> Node:
        node = Node(self, len(self.nodes), value, parents, requires_grad)
        self.nodes.append(node)
        return node

    def leaf(self, value: np.ndarray) -> Node:
        """A differentiable input."""
        return self._push(np.asarray(value), [], True)

    def constant(self, value) -> Node:
        return self._push(np.asarray(value), [], False)

    def parameters(self, tensors: Sequence[np.ndarray]) -> list[Node]:
        return [self.leaf(t) for t in tensors]

    def record(self, value: np.ndarray, parents: Sequence[tuple[Node, Vjp]]) -> Node:
        live = [(p, fn) for p, fn in parents if p.requires_grad]
        return self._push(value, live, bool(live))

    def backward(self, loss: Node, wrt: Sequence[Node]) -> list[np.ndarray]:
        """
        Exact gradients of a real scalar loss with respect to `wrt`.

        Raises:
            ValueError: loss not a real scalar, or a node not recorded on this tape
        """
        for node in (loss, *wrt):
            if node.tape is not self or node.index >= len(self.nodes) or self.nodes[node.index] is not node:
                raise ValueError(f"{node!r} was not recorded on this tape")
        if loss.value.size != 1:
            raise ValueError(f"loss must be a scalar, got shape {loss.value.shape}")
        if np.iscomplexobj(loss.value) and np.any(np.imag(loss.value) != 0):
            raise ValueError("loss must be real")

        wanted = {n.index for n in wrt}
        found: dict[int, np.ndarray] = {}
        grads: dict[int, np.ndarray] = {loss.index: np.ones_like(np.real(loss.value))}
        for node in reversed(self.nodes[: loss.index + 1]):
            g = grads.pop(node.index, None)
            if g is None:
                continue
            if node.index in wanted:
                found[node.index] = g
            for parent, vjp in node.parents:
                contrib = vjp(g)
                if not np.iscomplexobj(parent.value):
                    contrib = np.real(contrib)
                if parent.index in grads:
                    grads[parent.index] = grads[parent.index] + contrib
                else:
                    grads[parent.index] = contrib
        out = []
        for n in wrt:
            g = found.get(n.index)
            out.append(np.zeros_like(n.value) if g is None else np.reshape(g, n.value.shape))
        return out


def _lift(tape: Tape, x) -> Node:
    return x if isinstance(x, Node) else tape.constant(x)


def _tape_of(*xs) -> Tape:
    for x in xs:
        if isinstance(x, Node):
            return x.tape
    raise ValueError("at least one operand must be a recorded node")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ==================== PRIMITIVES ====================

def add(a, b) -> Node:
    """a + b; b may broadcast against a."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    return tape.record(a.value + b.value, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    ])


def sub(a, b) -> Node:
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    return tape.record(a.value - b.value, [
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: -_unbroadcast(g, b.shape)),
    ])


def mul(a, b) -> Node:
    """Elementwise product; b may broadcast against a."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    return tape.record(a.value * b.value, [
        (a, lambda g: _unbroadcast(g * np.conj(b.value), a.shape)),
        (b, lambda g: _unbroadcast(g * np.conj(a.value), b.shape)),
    ])


def scale(a: Node, c: complex) -> Node:
    return a.tape.record(a.value * c, [(a, lambda g: g * np.conj(c))])


def matmul(a, b) -> Node:
    """Batched matrix product over the last two axes (both operands at least 2-D)."""
    tape = _tape_of(a, b)
    a, b = _lift(tape, a), _lift(tape, b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ValueError("matmul operands must be at least 2-D")
    return tape.record(a.value @ b.value, [
        (a, lambda g: _unbroadcast(g @ np.conj(np.swapaxes(b.value, -1, -2)), a.shape)),
        (b, lambda g: _unbroadcast(np.conj(np.swapaxes(a.value, -1, -2)) @ g, b.shape)),
    ])


def sum_(a: Node, axis=None, keepdims: bool = False) -> Node:
    value = np.sum(a.value, axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return np.broadcast_to(g, a.shape).copy()
    return a.tape.record(value, [(a, vjp)])


def mean(a: Node, axis=None) -> Node:
    count = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum_(a, axis=axis), 1.0 / count)


def reshape(a: Node, shape: tuple[int, ...]) -> Node:
    return a.tape.record(a.value.reshape(shape), [(a, lambda g: g.reshape(a.shape))])


def transpose(a: Node, axes: tuple[int, ...]) -> Node:
    inverse = tuple(np.argsort(axes))
    return a.tape.record(np.transpose(a.value, axes), [(a, lambda g: np.transpose(g, inverse))])


def concat(parts: Sequence[Node], axis: int = 0) -> Node:
    tape = _tape_of(*parts)
    parts = [_lift(tape, p) for p in parts]
    bounds = np.cumsum([0] + [p.shape[axis] for p in parts])
    value = np.concatenate([p.value for p in parts], axis=axis)

    def make_vjp(lo, hi):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            return g[tuple(sl)]
        return vjp
    return tape.record(value, [(p, make_vjp(bounds[i], bounds[i + 1])) for i, p in enumerate(parts)])


def index(a: Node, key) -> Node:
    """Basic or advanced indexing; repeated indices accumulate in the backward pass."""
    def vjp(g):
        out = np.zeros(a.shape, dtype=np.result_type(g, a.value))
        np.add.at(out, key, g)
        return out
    return a.tape.record(a.value[key], [(a, vjp)])


def conj(a: Node) -> Node:
    return a.tape.record(np.conj(a.value), [(a, lambda g: np.conj(g))])


def real(a: Node) -> Node:
    return a.tape.record(np.real(a.value).copy(), [(a, lambda g: g.astype(np.complex128))])


def imag(a: Node) -> Node:
    return a.tape.record(np.imag(a.value).copy(), [(a, lambda g: 1j * g)])


def make_complex(re: Node, im: Node) -> Node:
    """re + i*im from two real nodes."""
    tape = _tape_of(re, im)
    re, im = _lift(tape, re), _lift(tape, im)
    return tape.record(re.value + 1j * im.value, [
        (re, lambda g: np.real(g)),
        (im, lambda g: np.imag(g)),
    ])


def exp_i(b: Node) -> Node:
    """Unit phase exp(i*b) of a real node."""
    value = np.exp(1j * b.value)
    return b.tape.record(value, [(b, lambda g: -1j * g * np.conj(value))])


def exp(a: Node) -> Node:
    value = np.exp(a.value)
    return a.tape.record(value, [(a, lambda g: g * np.conj(value))])


def sin(a: Node) -> Node:
    return a.tape.record(np.sin(a.value), [(a, lambda g: g * np.cos(a.value))])


def cos(a: Node) -> Node:
    return a.tape.record(np.cos(a.value), [(a, lambda g: -g * np.sin(a.value))])


def abs2(a: Node) -> Node:
    """|a|^2 elementwise (real)."""
    return a.tape.record(np.abs(a.value) ** 2, [(a, lambda g: 2.0 * g * a.value)])


def sqrt(a: Node) -> Node:
    value = np.sqrt(a.value)
    return a.tape.record(value, [(a, lambda g: g / (2.0 * value))])


def reciprocal(a: Node) -> Node:
    value = 1.0 / a.value
    return a.tape.record(value, [(a, lambda g: -g * np.conj(value ** 2))])


def lrelu(a: Node, slope: float = LRELU_SLOPE) -> Node:
    mask = np.where(a.value > 0, 1.0, slope)
    return a.tape.record(a.value * mask, [(a, lambda g: g * mask)])


def tanh(a: Node) -> Node:
    value = np.tanh(a.value)
    return a.tape.record(value, [(a, lambda g: g * (1.0 - value ** 2))])


def softmax(a: Node, axis: int = -1) -> Node:
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    value = e / e.sum(axis=axis, keepdims=True)
    return a.tape.record(value, [
        (a, lambda g: value * (g - np.sum(g * value, axis=axis, keepdims=True)))
    ])


def frobenius_norm(a: Node, eps: float = NORM_EPS) -> Node:
    """sqrt(sum |a|^2 + eps), smooth at zero."""
    return sqrt(add(sum_(abs2(a)), eps))


def conv1d_periodic(x: Node, w: Node, b: Node) -> Node:
    """
    Circular 1D convolution (cross-correlation).

    x: (B, C, n), w: (O, C, K) with K odd, b: (O,) -> (B, O, n)
    out[b, o, i] = sum_{c,t} w[o, c, t] * x[b, c, (i + t - K//2) mod n] + b[o]
    """
    K = w.shape[-1]
    h = K // 2
    cols = np.stack([np.roll(x.value, -(t - h), axis=-1) for t in range(K)], axis=2)
    out = np.tensordot(cols, w.value, axes=([1, 2], [1, 2])).transpose(0, 2, 1)
    out = out + b.value[None, :, None]

    def vjp_x(g):
        gcols = np.tensordot(g, w.value, axes=([1], [0]))  # (B, n, C, K)
        gx = np.zeros(x.shape, dtype=np.result_type(g, w.value))
        for t in range(K):
            gx += np.roll(gcols[..., t].transpose(0, 2, 1), t - h, axis=-1)
        return gx

    return x.tape.record(out, [
        (x, vjp_x),
        (w, lambda g: np.tensordot(g, cols, axes=([0, 2], [0, 3]))),
        (b, lambda g: g.sum(axis=(0, 2))),
    ])


def conv2d(x: Node, w: Node, b: Node, stride: int = 1) -> Node:
    """
    2D convolution.

    stride 1: circular padding, output keeps the spatial size.
    stride s > 1: requires window == s and non-overlapping 'valid' patches,
    output spatial size divided by s.
    x: (B, C, H, W), w: (O, C, K, K), b: (O,) -> (B, O, H', W')
    """
    K = w.shape[-1]
    if stride == 1:
        h = K // 2
        taps = [(ty, tx) for ty in range(K) for tx in range(K)]
        cols = np.stack(
            [np.roll(x.value, (-(ty - h), -(tx - h)), axis=(-2, -1)) for ty, tx in taps],
            axis=2,
        ).reshape(x.shape[0], x.shape[1], K, K, x.shape[2], x.shape[3])
        out = np.tensordot(cols, w.value, axes=([1, 2, 3], [1, 2, 3])).transpose(0, 3, 1, 2)
        out = out + b.value[None, :, None, None]

        def vjp_x(g):
            gcols = np.tensordot(g, w.value, axes=([1], [0]))  # (B, H, W, C, K, K)
            gx = np.zeros(x.shape, dtype=np.result_type(g, w.value))
            for ty, tx in taps:
                gx += np.roll(gcols[..., ty, tx].transpose(0, 3, 1, 2), (ty - h, tx - h), axis=(-2, -1))
            return gx

        return x.tape.record(out, [
            (x, vjp_x),
            (w, lambda g: np.tensordot(g, cols, axes=([0, 2, 3], [0, 4, 5]))),
            (b, lambda g: g.sum(axis=(0, 2, 3))),
        ])

    if K != stride:
        raise ValueError(f"strided conv2d needs window == stride, got {K} and {stride}")
    B, C, H, W = x.shape
    if H % K or W % K:
        raise ValueError(f"input {H}x{W} is not divisible by stride {K}")
    patches = x.value.reshape(B, C, H // K, K, W // K, K)
    out = np.einsum("bciyjx,ocyx->boij", patches, w.value, optimize=True)
    out = out + b.value[None, :, None, None]
    return x.tape.record(out, [
        (x, lambda g: np.einsum("boij,ocyx->bciyjx", g, w.value, optimize=True).reshape(x.shape)),
        (w, lambda g: np.einsum("boij,bciyjx->ocyx", g, patches, optimize=True)),
        (b, lambda g: g.sum(axis=(0, 2, 3))),
    ])


# ==================== LAYERS AND NETWORKS ====================

LayerKind = Literal["conv1d_periodic", "conv2d", "fully_connected", "lrelu", "tanh", "linear", "softmax"]
PARAMETRIC = ("conv1d_periodic", "conv2d", "fully_connected")


@dataclass(frozen=True)
class LayerSpec:
    """
    One layer of a chain.

    conv kinds: `window` (odd unless strided), output `channels`, optional `stride`
    fully_connected: output `width`
    lrelu / tanh / linear / softmax: no parameters
    """
    kind: LayerKind
    window: int = 1
    channels: int = 1
    width: int = 0
    stride: int = 1

    def __post_init__(self):
        if self.kind in ("conv1d_periodic", "conv2d"):
            if self.window < 1 or (self.stride == 1 and self.window % 2 == 0):
                raise ValueError(f"{self.kind} window must be odd and >= 1, got {self.window}")
            if self.stride > 1 and self.window != self.stride:
                raise ValueError(f"strided {self.kind} needs window == stride, got {self.window}/{self.stride}")
            if self.channels < 1:
                raise ValueError(f"{self.kind} channels must be >= 1, got {self.channels}")
        if self.kind == "fully_connected" and self.width < 1:
            raise ValueError(f"fully_connected width must be >= 1, got {self.width}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "window": self.window, "channels": self.channels,
                "width": self.width, "stride": self.stride}


def conv1d(window: int, channels: int) -> LayerSpec:
    return LayerSpec("conv1d_periodic", window=window, channels=channels)


def conv2(window: int, channels: int, stride: int = 1) -> LayerSpec:
    return LayerSpec("conv2d", window=window, channels=channels, stride=stride)


def full(width: int) -> LayerSpec:
    return LayerSpec("fully_connected", width=width)


def act(kind: LayerKind) -> LayerSpec:
    return LayerSpec(kind)


def _infer_shapes(specs: Sequence[LayerSpec],
                  in_shape: tuple[int, ...]) -> tuple[list[tuple[tuple[int, ...], ...]], tuple[int, ...]]:
    """Weight/bias shapes per layer and the output sample shape."""
    shape = tuple(in_shape)
    params = []
    for i, spec in enumerate(specs):
        if spec.kind == "conv1d_periodic":
            if len(shape) != 2:
                raise ValueError(f"layer {i}: conv1d needs (C, n) input, got {shape}")
            params.append(((spec.channels, shape[0], spec.window), (spec.channels,)))
            shape = (spec.channels, shape[1])
        elif spec.kind == "conv2d":
            if len(shape) != 3:
                raise ValueError(f"layer {i}: conv2d needs (C, H, W) input, got {shape}")
            params.append(((spec.channels, shape[0], spec.window, spec.window), (spec.channels,)))
            s = spec.stride
            if s > 1 and (shape[1] % s or shape[2] % s or spec.window != s):
                raise ValueError(f"layer {i}: stride {s} incompatible with {shape} / window {spec.window}")
            shape = (spec.channels, shape[1] // s, shape[2] // s)
        elif spec.kind == "fully_connected":
            params.append(((int(np.prod(shape)), spec.width), (spec.width,)))
            shape = (spec.width,)
        else:
            params.append(())
    return params, shape


@dataclass
class NetworkParams:
    """Weights of a layer chain, flattened as [w0, b0, w1, b1, ...] over parametric layers."""
    specs: tuple[LayerSpec, ...]
    in_shape: tuple[int, ...]
    tensors: list[np.ndarray]
    init_seed: int = 0

    @classmethod
    def build(cls, specs: Sequence[LayerSpec], in_shape: tuple[int, ...], seed: int,
              label: str = "net") -> "NetworkParams":
        """
        Glorot-uniform weights (+-sqrt(6 / (fan_in + fan_out))), zero biases.

        `label` separates the init streams of networks built from one seed.
        """
        shapes, _ = _infer_shapes(specs, in_shape)
        gen = numcore.SeededRng(seed, f"init/{label}").generator()
        tensors = []
        for spec, layer in zip(specs, shapes):
            if not layer:
                continue
            w_shape, b_shape = layer
            if spec.kind == "fully_connected":
                fan_in, fan_out = w_shape
            else:
                receptive = int(np.prod(w_shape[2:]))
                fan_in, fan_out = w_shape[1] * receptive, w_shape[0] * receptive
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            tensors.append(gen.uniform(-limit, limit, w_shape))
            tensors.append(np.zeros(b_shape))
        return cls(tuple(specs), tuple(in_shape), tensors, seed)

    @property
    def out_shape(self) -> tuple[int, ...]:
        return _infer_shapes(self.specs, self.in_shape)[1]

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors))

    def with_tensors(self, tensors: list[np.ndarray]) -> "NetworkParams":
        return NetworkParams(self.specs, self.in_shape, tensors, self.init_seed)

    def architecture(self) -> dict:
        return {"specs": [s.to_dict() for s in self.specs],
                "in_shape": list(self.in_shape),
                "init_seed": self.init_seed,
                "shapes": [list(t.shape) for t in self.tensors]}


def forward(net: NetworkParams,
            x,
            tape: Tape | None = None,
            params: Sequence[Node] | None = None):
    """
    Evaluate a layer chain on a batch.

    Args:
        net: specs and weights
        x: batch of shape (B, *net.in_shape), ndarray or Node
        tape: record on this tape; without one the plain output array is returned
        params: leaves for net.tensors on `tape` (created as constants if omitted)

    Raises:
        ValueError: input shape does not match the first layer
    """
    own = tape is None
    tape = tape or Tape()
    x = _lift(tape, x)
    if tuple(x.shape[1:]) != tuple(net.in_shape):
        raise ValueError(f"input sample shape {x.shape[1:]} != expected {net.in_shape}")
    if params is None:
        params = [tape.constant(t) for t in net.tensors]
    it = iter(params)
    for spec in net.specs:
        if spec.kind == "conv1d_periodic":
            x = conv1d_periodic(x, next(it), next(it))
        elif spec.kind == "conv2d":
            x = conv2d(x, next(it), next(it), stride=spec.stride)
        elif spec.kind == "fully_connected":
            w, b = next(it), next(it)
            x = add(matmul(reshape(x, (x.shape[0], -1)), w), b)
        elif spec.kind == "lrelu":
            x = lrelu(x)
        elif spec.kind == "tanh":
            x = tanh(x)
        elif spec.kind == "softmax":
            x = softmax(x, axis=-1)
        # linear: identity
    return x.value if own else x


# ==================== OPTIMIZER ====================

@dataclass
class AdamState:
    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls(0, [np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params: Sequence[np.ndarray],
              grads: Sequence[np.ndarray],
              state: AdamState,
              lr: float) -> tuple[list[np.ndarray], AdamState]:
    """
    One bias-corrected Adam update.

    Raises:
        ValueError: lr <= 0 or shape disagreement
        NumericalError: non-finite gradient
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree in length")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalError("non-finite gradient")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** step)
        v_hat = v / (1 - b2 ** step)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, AdamState(step, new_m, new_v, b1, b2, state.eps)


def expand_schedule(schedule: Sequence[tuple[float, int]]) -> list[float]:
    """[(lr, steps), ...] -> one learning rate per step."""
    out = []
    for lr, steps in schedule:
        if lr <= 0 or steps < 0:
            raise ValueError(f"bad schedule entry ({lr}, {steps})")
        out.extend([float(lr)] * int(steps))
    return out


# ==================== PARAMETER FILES ====================

PARAMS_FORMAT = "orbit-moments-params"


def save_params(nets: dict[str, NetworkParams], path: str | Path, extra: dict | None = None) -> Path:
    """
    Store one or more networks in a single OMT1 file.

    The payload is every tensor flattened and concatenated in (name, layer)
    order; the JSON sidecar carries the architectures plus `extra`.
    """
    names = sorted(nets)
    flat = [t.ravel() for name in names for t in nets[name].tensors]
    payload = np.concatenate(flat) if flat else np.zeros(0)
    meta = {"format": PARAMS_FORMAT,
            "networks": {n: nets[n].architecture() for n in names},
            "extra": extra or {}}
    return numcore.write_tensor(path, payload, meta)


def params_extra(path: str | Path) -> dict:
    """The `extra` block of a parameter file's sidecar, without reading the payload."""
    sidecar = Path(f"{path}.json")
    try:
        meta = json.loads(sidecar.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ArtifactError(f"cannot read parameter metadata {sidecar}: {e}") from e
    if meta.get("format") != PARAMS_FORMAT:
        raise ArtifactError(f"{path} is not a parameter file")
    return meta.get("extra", {})


def load_params(path: str | Path,
                expected: dict[str, NetworkParams] | None = None) -> dict[str, NetworkParams]:
    """
    Read networks written by save_params.

    Raises:
        ArtifactError: not a parameter file, or payload/header disagreement
        ValueError: architecture differs from `expected`
    """
    payload, meta = numcore.read_tensor(path)
    if meta.get("format") != PARAMS_FORMAT:
        raise ArtifactError(f"{path} is not a parameter file")
    nets = {}
    offset = 0
    for name in sorted(meta["networks"]):
        arch = meta["networks"][name]
        specs = tuple(LayerSpec(**s) for s in arch["specs"])
        tensors = []
        for shape in arch["shapes"]:
            size = int(np.prod(shape))
            if offset + size > payload.size:
                raise ArtifactError(f"{path} payload is shorter than its header")
            tensors.append(payload[offset:offset + size].reshape(shape).copy())
            offset += size
        nets[name] = NetworkParams(specs, tuple(arch["in_shape"]), tensors, arch["init_seed"])
    if offset != payload.size:
        raise ArtifactError(f"{path} payload is longer than its header")
    if expected is not None:
        for name, ref in expected.items():
            got = nets.get(name)
            if got is None:
                raise ValueError(f"network '{name}' missing from {path}")
            if got.specs != ref.specs or got.in_shape != ref.in_shape or \
                    [t.shape for t in got.tensors] != [t.shape for t in ref.tensors]:
                raise ValueError(f"network '{name}' in {path} has a different architecture (shape mismatch)")
    return nets


# ==================== GRADIENT CHECK ====================

def gradient_check(loss_fn: Callable[[Tape, list[Node]], Node],
                   tensors: Sequence[np.ndarray],
                   h: float = 1e-5,
                   samples: int = 20,
                   seed: int = 0) -> float:
    """
    Compare tape gradients with central differences on sampled entries.

    Returns:
        max over tensors of |g_tape - g_fd| / max(|g_fd|, |g_tape|, 1e-12)
        computed over the sampled entries of each tensor
    """
    tape = Tape()
    leaves = tape.parameters([np.array(t, dtype=np.float64) for t in tensors])
    grads = tape.backward(loss_fn(tape, leaves), leaves)
    gen = np.random.default_rng(seed)

    def value_at(values):
        t = Tape()
        return float(np.real(loss_fn(t, t.parameters(values)).value))

    worst = 0.0
    base = [np.array(t, dtype=np.float64) for t in tensors]
    for i, t in enumerate(base):
        picks = gen.choice(t.size, size=min(samples, t.size), replace=False)
        fd = np.zeros(len(picks))
        for j, flat in enumerate(picks):
            plus = [b.copy() for b in base]
            minus = [b.copy() for b in base]
            plus[i].flat[flat] += h
            minus[i].flat[flat] -= h
            fd[j] = (value_at(plus) - value_at(minus)) / (2 * h)
        ad = grads[i].ravel()[picks]
        scale_ = max(np.linalg.norm(fd), np.linalg.norm(ad), 1e-12)
        worst = max(worst, float(np.linalg.norm(ad - fd) / scale_))
    return worst
