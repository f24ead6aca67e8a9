"""Twin network: shared encoder feeding two outcome heads.

The encoder maps covariates x in R^p to a latent z in R^d; two
identically-shaped heads map z to scalar outcome predictions for the
control and treated arms. Dropout masks in the encoder and in the heads
can be switched on independently at inference, which is what lets the
predictive variance be split into a representation part and a
prediction part (see ``uncertainty``).

Training minimizes the factual mean-squared error: each unit's loss
uses only the head matching its observed treatment. Both heads are
still evaluated on every unit at inference time, which is where the
counterfactual prediction and the effect estimate come from.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import DataError, ShapeError
from .nn_core import (
    IDENTITY,
    RELU,
    AdamState,
    DenseLayer,
    DropoutSpec,
    RngStream,
    adam_step,
    init_dense,
    stack_backward,
    stack_forward,
)

CHECKPOINT_FORMAT = "twindrop-checkpoint"
CHECKPOINT_VERSION = 1


class DropoutMode(Enum):
    """Which subnetwork samples dropout masks at inference.

    TOTAL: encoder and heads stochastic. REP_ONLY: encoder only.
    PRED_ONLY: heads only. OFF: fully deterministic.
    """

    TOTAL = "total"
    REP_ONLY = "rep_only"
    PRED_ONLY = "pred_only"
    OFF = "off"

    @classmethod
    def from_string(cls, name: str) -> "DropoutMode":
        try:
            return cls(name)
        except ValueError:
            valid = ", ".join(m.value for m in cls)
            raise ValueError(f"unknown dropout mode {name!r} (valid: {valid})")

    @property
    def encoder_stochastic(self) -> bool:
        return self in (DropoutMode.TOTAL, DropoutMode.REP_ONLY)

    @property
    def heads_stochastic(self) -> bool:
        return self in (DropoutMode.TOTAL, DropoutMode.PRED_ONLY)


@dataclass
class TwinNetConfig:
    """Architecture and training hyperparameters."""

    input_dim: int
    latent_dim: int = 32
    encoder_hidden: tuple[int, ...] = (64, 64)
    head_hidden: tuple[int, ...] = (32,)
    dropout: float = 0.2
    epochs: int = 50
    batch_size: int = 128
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        self.encoder_hidden = tuple(int(w) for w in self.encoder_hidden)
        self.head_hidden = tuple(int(w) for w in self.head_hidden)
        widths = (self.input_dim, self.latent_dim) + self.encoder_hidden + self.head_hidden
        if any(w < 1 for w in widths):
            raise ValueError(f"all widths must be >= 1, got {widths}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        DropoutSpec(self.dropout)  # validates the rate

    def to_dict(self) -> dict:
        d = self.__dict__.copy()
        d["encoder_hidden"] = list(self.encoder_hidden)
        d["head_hidden"] = list(self.head_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TwinNetConfig":
        d = dict(d)
        d["encoder_hidden"] = tuple(d.get("encoder_hidden", (64, 64)))
        d["head_hidden"] = tuple(d.get("head_hidden", (32,)))
        return cls(**d)


@dataclass
class LabeledDataset:
    """Covariates, binary treatment, observed outcome, optional ground truth.

    When the data is synthetic, y0_true/y1_true hold the realized
    potential outcomes (noise included) and tau_true their difference.
    ``ood`` flags test rows judged out-of-distribution.
    """

    x: np.ndarray
    t: np.ndarray
    y: np.ndarray
    y0_true: np.ndarray | None = None
    y1_true: np.ndarray | None = None
    tau_true: np.ndarray | None = None
    ood: np.ndarray | None = None

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.float64)
        if self.x.ndim != 2:
            raise ShapeError(f"x must be 2-d, got shape {self.x.shape}")
        n = self.x.shape[0]
        for name in ("y0_true", "y1_true", "tau_true"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.asarray(v, dtype=np.float64))
        for name in ("t", "y", "y0_true", "y1_true", "tau_true", "ood"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.asarray(v)
            if v.shape != (n,):
                raise ShapeError(f"{name} has shape {v.shape}, expected ({n},)")
        if self.t.size and not np.isin(self.t, (0, 1)).all():
            raise DataError("treatment indicator must be 0 or 1")
        if self.tau_true is not None and self.y0_true is not None and self.y1_true is not None:
            if not np.allclose(self.tau_true, self.y1_true - self.y0_true, rtol=0, atol=1e-12):
                raise DataError("tau_true != y1_true - y0_true")
        if self.ood is not None:
            self.ood = np.asarray(self.ood, dtype=bool)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    def subset(self, idx: np.ndarray) -> "LabeledDataset":
        pick = lambda v: None if v is None else np.asarray(v)[idx]
        return LabeledDataset(
            self.x[idx], self.t[idx], self.y[idx],
            pick(self.y0_true), pick(self.y1_true), pick(self.tau_true),
            pick(self.ood),
        )


@dataclass
class TwinNet:
    """Trained (or freshly initialized) twin network."""

    encoder: list[DenseLayer]
    head0: list[DenseLayer]
    head1: list[DenseLayer]
    config: TwinNetConfig
    train_loss: list[float] = field(default_factory=list)


def build_twin_net(config: TwinNetConfig, rng: RngStream | None = None) -> TwinNet:
    """Fresh network with He-uniform weights and zero biases.

    Encoder: ReLU hidden layers then a linear projection to the latent.
    Heads: ReLU hidden layers then a linear scalar output. Heads are
    identically shaped and independently initialized.
    """
    if rng is None:
        rng = RngStream(config.seed).child(0)

    def make_stack(dims_hidden, d_in, d_out, stream):
        layers = []
        prev = d_in
        for i, w in enumerate(dims_hidden):
            layers.append(init_dense(prev, w, RELU, stream.child(i)))
            prev = w
        layers.append(init_dense(prev, d_out, IDENTITY, stream.child(len(dims_hidden))))
        return layers

    encoder = make_stack(config.encoder_hidden, config.input_dim, config.latent_dim, rng.child(0))
    head0 = make_stack(config.head_hidden, config.latent_dim, 1, rng.child(1))
    head1 = make_stack(config.head_hidden, config.latent_dim, 1, rng.child(2))
    return TwinNet(encoder, head0, head1, config)


def forward(
    net: TwinNet,
    x: np.ndarray,
    t: int,
    mode: DropoutMode = DropoutMode.OFF,
    rng: RngStream | None = None,
) -> np.ndarray:
    """One forward pass f_t(encoder(x)) with masks sampled per the mode.

    Each call samples a fresh mask set from ``rng``; with mode OFF (or
    dropout rate 0) the pass is deterministic and rng may be None.
    Returns a vector of length x.shape[0].
    """
    if t not in (0, 1):
        raise DataError(f"treatment arm must be 0 or 1, got {t}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.config.input_dim:
        raise ShapeError(
            f"input shape {x.shape} incompatible with input_dim {net.config.input_dim}"
        )
    spec = DropoutSpec(net.config.dropout)
    needs_rng = spec.rate > 0.0 and (mode.encoder_stochastic or mode.heads_stochastic)
    if needs_rng and rng is None:
        raise ValueError(f"mode {mode.value!r} with dropout {spec.rate} requires an RngStream")
    z, _ = stack_forward(net.encoder, x, spec, rng, stochastic=mode.encoder_stochastic)
    head = net.head1 if t == 1 else net.head0
    out, _ = stack_forward(head, z, spec, rng, stochastic=mode.heads_stochastic)
    return out[:, 0]


def predict_tau(net: TwinNet, x: np.ndarray) -> np.ndarray:
    """Deterministic effect estimate f1(encoder(x)) - f0(encoder(x))."""
    return forward(net, x, 1, DropoutMode.OFF) - forward(net, x, 0, DropoutMode.OFF)


def _group_params(layers: list[DenseLayer]) -> list[np.ndarray]:
    out = []
    for layer in layers:
        out.append(layer.weights)
        out.append(layer.bias)
    return out


def _set_group_params(layers: list[DenseLayer], params: list[np.ndarray]) -> None:
    for i, layer in enumerate(layers):
        layer.weights = params[2 * i]
        layer.bias = params[2 * i + 1]


def train(
    data: LabeledDataset,
    config: TwinNetConfig,
    initial_net: TwinNet | None = None,
) -> TwinNet:
    """Train by factual MSE with dropout active (mode TOTAL).

    Data is reshuffled every epoch from the seeded stream; the final
    partial batch is kept, with the gradient averaged over its actual
    size. Adam runs per parameter group (encoder, head0, head1) and a
    head's group is stepped only when its arm appears in the batch, so
    a batch without t=0 samples leaves head0 bit-identical.

    Appends the per-epoch mean factual loss to ``net.train_loss``.
    """
    if data.n == 0:
        raise DataError("cannot train on an empty dataset")
    if not np.isfinite(data.x).all():
        raise DataError("covariates contain non-finite values")
    if not np.isfinite(data.y).all():
        raise DataError("outcomes contain non-finite values")
    if data.x.shape[1] != config.input_dim:
        raise ShapeError(
            f"dataset has {data.x.shape[1]} covariates, config expects {config.input_dim}"
        )

    rng = RngStream(config.seed)
    net = initial_net if initial_net is not None else build_twin_net(config, rng.child(0))
    spec = DropoutSpec(config.dropout)

    groups = (net.encoder, net.head0, net.head1)
    adam_kwargs = dict(
        lr=config.lr, beta1=config.beta1, beta2=config.beta2,
        eps=config.eps, weight_decay=config.weight_decay,
    )
    states = [AdamState.for_params(_group_params(g), **adam_kwargs) for g in groups]

    n = data.n
    for epoch in range(config.epochs):
        order = rng.child(1, epoch).permutation(n)
        sse = 0.0
        for bi, start in enumerate(range(0, n, config.batch_size)):
            rows = order[start:start + config.batch_size]
            sse += _train_step(net, states, data, rows, spec, rng.child(2, epoch, bi))
        net.train_loss.append(sse / n)
    return net


def _train_step(net, states, data, rows, spec, mask_rng) -> float:
    """One minibatch step; returns the batch's summed squared error."""
    x = data.x[rows]
    y = data.y[rows]
    t = data.t[rows]
    b = len(rows)

    z, enc_cache = stack_forward(net.encoder, x, spec, mask_rng.child(0), stochastic=True)
    d_z = np.zeros_like(z)
    sse = 0.0

    heads = ((0, net.head0), (1, net.head1))
    for arm, head in heads:
        idx = np.flatnonzero(t == arm)
        if idx.size == 0:
            continue
        out, cache = stack_forward(head, z[idx], spec, mask_rng.child(1 + arm), stochastic=True)
        resid = out[:, 0] - y[idx]
        sse += float(resid @ resid)
        d_out = (2.0 / b) * resid[:, None]
        head_grads, d_zi = stack_backward(head, cache, d_out)
        d_z[idx] = d_zi
        flat = [g for pair in head_grads for g in pair]
        new_params, states[1 + arm] = adam_step(_group_params(head), flat, states[1 + arm])
        _set_group_params(head, new_params)

    enc_grads, _ = stack_backward(net.encoder, enc_cache, d_z)
    flat = [g for pair in enc_grads for g in pair]
    new_params, states[0] = adam_step(_group_params(net.encoder), flat, states[0])
    _set_group_params(net.encoder, new_params)
    return sse


# -- checkpoint io ----------------------------------------------------------

def _layer_to_dict(layer: DenseLayer) -> dict:
    return {
        "weights": layer.weights.tolist(),
        "bias": layer.bias.tolist(),
        "activation": layer.activation,
    }


def _layer_from_dict(d: dict) -> DenseLayer:
    return DenseLayer(np.array(d["weights"], dtype=np.float64),
                      np.array(d["bias"], dtype=np.float64),
                      d["activation"])


def _checkpoint_payload(net: TwinNet) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": net.config.to_dict(),
        "train_loss": [float(v) for v in net.train_loss],
        "params": {
            "encoder": [_layer_to_dict(l) for l in net.encoder],
            "head0": [_layer_to_dict(l) for l in net.head0],
            "head1": [_layer_to_dict(l) for l in net.head1],
        },
    }


def _payload_digest(payload: dict) -> str:
    body = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(body.encode("utf-8")).hexdigest()


def save_checkpoint(net: TwinNet, path) -> None:
    """Write a JSON checkpoint; floats round-trip bit-exactly via repr."""
    payload = _checkpoint_payload(net)
    doc = {"sha256": _payload_digest(payload), "payload": payload}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path) -> TwinNet:
    """Load and checksum-verify a checkpoint written by save_checkpoint."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise DataError(f"checkpoint {path} is not valid JSON: {e}")
    payload = doc.get("payload")
    if payload is None or "sha256" not in doc:
        raise DataError(f"checkpoint {path} missing payload or checksum")
    if _payload_digest(payload) != doc["sha256"]:
        raise DataError(f"checkpoint {path} failed its checksum; file is corrupt")
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"checkpoint {path} has unknown format {payload.get('format')!r}")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"checkpoint {path} has unsupported version {payload.get('version')!r}")
    config = TwinNetConfig.from_dict(payload["config"])
    params = payload["params"]
    net = TwinNet(
        encoder=[_layer_from_dict(d) for d in params["encoder"]],
        head0=[_layer_from_dict(d) for d in params["head0"]],
        head1=[_layer_from_dict(d) for d in params["head1"]],
        config=config,
        train_loss=list(payload.get("train_loss", [])),
    )
    return net
