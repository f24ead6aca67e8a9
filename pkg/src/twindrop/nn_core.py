"""Dense-network substrate: layers, inverted dropout, backprop, Adam.

Everything is plain float64 numpy. The networks built on top are small
fixed-shape MLPs, so backprop is written out by hand for a stack of
dense layers with optional dropout after each hidden activation.

Dropout uses the inverted convention: a sampled mask entry is 0 with
probability p and 1/(1-p) otherwise, so a deterministic pass (no mask)
equals the mean of stochastic passes in expectation. That identity is
exact only where the mask feeds a linear map; through a further ReLU it
holds to first order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ShapeError

RELU = "relu"
IDENTITY = "identity"
ACTIVATIONS = (RELU, IDENTITY)


class RngStream:
    """Seeded random stream with deterministic child derivation.

    Identical (seed, path, draw sequence) gives bit-identical output.
    Children derived via ``child`` are statistically independent of the
    parent and of each other, so concurrent consumers can each own one.
    """

    def __init__(self, seed: int, _path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.path = tuple(int(i) for i in _path)
        self._gen = np.random.default_rng(
            np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        )

    def child(self, *indices: int) -> "RngStream":
        """Independent stream at a fixed index path below this one."""
        return RngStream(self.seed, self.path + tuple(indices))

    def random(self, size=None):
        return self._gen.random(size)

    def uniform(self, low, high, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path})"


@dataclass
class DropoutSpec:
    """Dropout rate; 0 <= rate < 1."""

    rate: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.rate < 1.0):
            raise ValueError(f"dropout rate must be in [0, 1), got {self.rate}")


@dataclass
class DenseLayer:
    """Fully-connected layer: out = activation(x @ weights + bias).

    weights is (fan_in, fan_out), bias is (fan_out,).
    """

    weights: np.ndarray
    bias: np.ndarray
    activation: str = IDENTITY

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.ndim != 1:
            raise ShapeError(
                f"weights must be 2-d and bias 1-d, got {self.weights.shape} "
                f"and {self.bias.shape}"
            )
        if self.bias.shape[0] != self.weights.shape[1]:
            raise ShapeError(
                f"bias length {self.bias.shape[0]} != fan_out "
                f"{self.weights.shape[1]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def fan_in(self) -> int:
        return self.weights.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weights.shape[1]


def init_dense(fan_in: int, fan_out: int, activation: str, rng: RngStream) -> DenseLayer:
    """He-uniform weights (limit sqrt(6/fan_in)), zero bias."""
    limit = np.sqrt(6.0 / fan_in)
    w = rng.uniform(-limit, limit, (fan_in, fan_out))
    return DenseLayer(w, np.zeros(fan_out), activation)


def dense_forward(layer: DenseLayer, x: np.ndarray) -> np.ndarray:
    """activation(x @ W + b) for a row batch x of shape (n, fan_in)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != layer.fan_in:
        raise ShapeError(
            f"input shape {x.shape} incompatible with layer weights "
            f"{layer.weights.shape}"
        )
    out = x @ layer.weights + layer.bias
    if layer.activation == RELU:
        out = np.maximum(out, 0.0)
    return out


def dropout_mask(shape, spec: DropoutSpec, rng: RngStream) -> np.ndarray:
    """Inverted-dropout mask: entries 0 w.p. rate, else 1/(1-rate)."""
    if spec.rate == 0.0:
        return np.ones(shape)
    keep = rng.random(shape) >= spec.rate
    return keep / (1.0 - spec.rate)


def stack_forward(
    layers: list[DenseLayer],
    x: np.ndarray,
    spec: DropoutSpec | None = None,
    rng: RngStream | None = None,
    stochastic: bool = False,
):
    """Forward pass through a dense stack with dropout after each ReLU.

    Dropout attaches to ReLU activations only, which encodes the model
    convention: every hidden unit is masked, the input, any linear
    projection, and the output unit never are. When ``stochastic`` is
    false (or the rate is 0) the pass is deterministic and no stream is
    consumed.

    Returns (output, cache); the cache holds inputs, pre-activations and
    the sampled masks so stack_backward replays exactly this pass.
    """
    use_dropout = stochastic and spec is not None and spec.rate > 0.0
    if use_dropout and rng is None:
        raise ValueError("stochastic forward pass requires an RngStream")
    cache = []
    out = np.asarray(x, dtype=np.float64)
    for layer in layers:
        x_in = out
        if x_in.ndim != 2 or x_in.shape[1] != layer.fan_in:
            raise ShapeError(
                f"input shape {x_in.shape} incompatible with layer weights "
                f"{layer.weights.shape}"
            )
        pre = x_in @ layer.weights + layer.bias
        out = np.maximum(pre, 0.0) if layer.activation == RELU else pre
        mask = None
        if layer.activation == RELU and use_dropout:
            mask = dropout_mask(out.shape, spec, rng)
            out = out * mask
        cache.append((x_in, pre, mask))
    return out, cache


def stack_backward(layers: list[DenseLayer], cache, d_out: np.ndarray):
    """Gradients for a cached stack_forward pass.

    Forward masks are reapplied on the backward path. Returns
    (grads, d_input) with grads a list of (d_weights, d_bias) aligned
    with ``layers``.
    """
    grads = [None] * len(layers)
    d = np.asarray(d_out, dtype=np.float64)
    for i in range(len(layers) - 1, -1, -1):
        layer = layers[i]
        x_in, pre, mask = cache[i]
        if d.shape != (x_in.shape[0], layer.fan_out):
            raise ShapeError(
                f"upstream gradient shape {d.shape} incompatible with layer "
                f"output ({x_in.shape[0]}, {layer.fan_out})"
            )
        if mask is not None:
            d = d * mask
        if layer.activation == RELU:
            d = d * (pre > 0.0)
        grads[i] = (x_in.T @ d, d.sum(axis=0))
        d = d @ layer.weights.T
    return grads, d


@dataclass
class AdamState:
    """Adam accumulators for one parameter group.

    Weight decay is decoupled: applied directly to the parameters as an
    extra -lr*wd*theta term, never folded into the moment estimates.
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8,
                   weight_decay=0.0) -> "AdamState":
        return cls(
            lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay,
            m=[np.zeros_like(p) for p in params],
            v=[np.zeros_like(p) for p in params],
        )


def adam_step(params, grads, state: AdamState):
    """One Adam update. Returns (new_params, new_state); inputs untouched."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(
            f"got {len(params)} params, {len(grads)} grads, "
            f"{len(state.m)} accumulator slots"
        )
    t = state.t + 1
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(
                f"parameter shape {p.shape} != gradient shape {g.shape}"
            )
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        step = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        if state.weight_decay:
            step = step + state.lr * state.weight_decay * p
        new_params.append(p - step)
        new_m.append(m)
        new_v.append(v)
    return new_params, replace(state, t=t, m=new_m, v=new_v)
