"""Small fully-connected networks with hand-written backprop and Adam.

Inputs may be a single vector ``(d,)`` or a batch ``(B, d)``. ``backward``
returns gradients *summed* over the batch; callers scale them (e.g. by
``1/B``) before stepping, so mini-batch semantics stay explicit.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np

from .errors import NonFiniteInput, SchemaError, ShapeMismatch

CHECKPOINT_FORMAT = "abrkit.mlp"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    output_head: Literal["linear", "softmax"] = "linear"

    def __post_init__(self) -> None:
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        dims = (self.input_dim, *self.hidden, self.output_dim)
        if any(d < 1 for d in dims):
            raise ValueError(f"all layer widths must be >= 1, got {dims}")
        if self.output_head not in ("linear", "softmax"):
            raise ValueError(f"unknown output head {self.output_head!r}")
        if self.output_head == "softmax" and self.output_dim < 2:
            raise ValueError("a softmax head needs output_dim >= 2")

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim)

    def n_params(self) -> int:
        d = self.dims
        return sum(d[i] * d[i + 1] + d[i + 1] for i in range(len(d) - 1))

    def to_dict(self) -> dict:
        return {"input_dim": self.input_dim, "hidden": list(self.hidden),
                "output_dim": self.output_dim, "output_head": self.output_head}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpSpec":
        return cls(int(d["input_dim"]), tuple(d["hidden"]), int(d["output_dim"]), d["output_head"])


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")


# A gradient structure mirrors the parameter list: [(dW, db), ...]
Grads = list[tuple[np.ndarray, np.ndarray]]


@dataclass
class Cache:
    """Activations from one forward pass, consumed by ``backward``."""

    inputs: list[np.ndarray]  # input to each layer (post-activation of the previous one)
    pre: list[np.ndarray]  # pre-activation of each layer
    output: np.ndarray
    batched: bool


@dataclass
class MlpModel:
    spec: MlpSpec
    weights: list[np.ndarray]  # (fan_in, fan_out)
    biases: list[np.ndarray]
    m: list[np.ndarray] = field(default_factory=list)  # Adam first moments, W then b per layer
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.m:
            self.m = [np.zeros_like(p) for p in self.parameters()]
            self.v = [np.zeros_like(p) for p in self.parameters()]

    def parameters(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpModel":
        return MlpModel(self.spec, [w.copy() for w in self.weights], [b.copy() for b in self.biases],
                        [a.copy() for a in self.m], [a.copy() for a in self.v], self.step,
                        json.loads(json.dumps(self.meta)))

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(p)) for p in self.parameters())

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)[0]


def init(spec: MlpSpec, seed: int) -> MlpModel:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    d = spec.dims
    for fan_in, fan_out in zip(d[:-1], d[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MlpModel(spec, weights, biases)


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(model: MlpModel, x: np.ndarray) -> tuple[np.ndarray, Cache]:
    x = np.asarray(x, dtype=np.float64)
    batched = x.ndim == 2
    h = x if batched else x[None, :]
    if h.shape[1] != model.spec.input_dim:
        raise ShapeMismatch(f"expected input dim {model.spec.input_dim}, got {h.shape[1]}")
    if not np.all(np.isfinite(h)):
        raise NonFiniteInput("input contains NaN or inf")
    inputs, pre = [], []
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        inputs.append(h)
        z = h @ w + b
        pre.append(z)
        h = np.maximum(z, 0.0) if i < last else z
    out = softmax(h) if model.spec.output_head == "softmax" else h
    cache = Cache(inputs, pre, out, batched)
    return (out if batched else out[0]), cache


def backward(model: MlpModel, cache: Cache, grad_out: np.ndarray) -> Grads:
    """Gradients of ``sum(grad_out * output)`` w.r.t. every parameter.

    For a softmax head ``grad_out`` is taken w.r.t. the probabilities.
    """
    g = np.asarray(grad_out, dtype=np.float64)
    if not cache.batched:
        g = g[None, :]
    if g.shape != cache.output.shape:
        raise ShapeMismatch(f"output gradient shape {g.shape} != output shape {cache.output.shape}")
    if model.spec.output_head == "softmax":
        p = cache.output
        g = p * (g - (g * p).sum(axis=1, keepdims=True))
    grads: Grads = []
    for i in range(len(model.weights) - 1, -1, -1):
        if i < len(model.weights) - 1:
            g = g * (cache.pre[i] > 0)
        dw = cache.inputs[i].T @ g
        db = g.sum(axis=0)
        grads.append((dw, db))
        if i > 0:
            g = g @ model.weights[i].T
    grads.reverse()
    return grads


def scale_grads(grads: Grads, factor: float) -> Grads:
    return [(dw * factor, db * factor) for dw, db in grads]


def add_grads(a: Grads, b: Grads) -> Grads:
    return [(aw + bw, ab + bb) for (aw, ab), (bw, bb) in zip(a, b)]


def _check_shapes(model: MlpModel, grads: Grads) -> None:
    if len(grads) != len(model.weights):
        raise ShapeMismatch("gradient structure has the wrong number of layers")
    for (dw, db), w, b in zip(grads, model.weights, model.biases):
        if dw.shape != w.shape or db.shape != b.shape:
            raise ShapeMismatch(f"gradient shapes {dw.shape}/{db.shape} vs {w.shape}/{b.shape}")


def adam_step(model: MlpModel, grads: Grads, cfg: AdamConfig) -> MlpModel:
    """In-place bias-corrected Adam update; returns ``model`` for chaining."""
    _check_shapes(model, grads)
    model.step += 1
    t = model.step
    c1 = 1.0 - cfg.beta1 ** t
    c2 = 1.0 - cfg.beta2 ** t
    flat = []
    for dw, db in grads:
        flat += [dw, db]
    for p, g, m, v in zip(model.parameters(), flat, model.m, model.v):
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.epsilon)
    return model


def sgd_step(model: MlpModel, grads: Grads, learning_rate: float) -> MlpModel:
    _check_shapes(model, grads)
    for (dw, db), w, b in zip(grads, model.weights, model.biases):
        w -= learning_rate * dw
        b -= learning_rate * db
    model.step += 1
    return model


# ---------------------------------------------------------------------------
# Checkpoints: JSON with base64 little-endian float64 payloads (lossless)


def _enc(a: np.ndarray) -> dict:
    return {"shape": list(a.shape),
            "data": base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")}


def _dec(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(d["shape"]).astype(np.float64)


def to_dict(model: MlpModel) -> dict:
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": model.spec.to_dict(),
        "meta": model.meta,
        "weights": [_enc(w) for w in model.weights],
        "biases": [_enc(b) for b in model.biases],
        "adam": {"step": model.step, "m": [_enc(a) for a in model.m], "v": [_enc(a) for a in model.v]},
    }


def from_dict(d: dict, expect: MlpSpec | None = None) -> MlpModel:
    if not isinstance(d, dict):
        raise SchemaError("checkpoint must be a JSON object")
    try:
        if d.get("format") != CHECKPOINT_FORMAT:
            raise SchemaError(f"not an {CHECKPOINT_FORMAT} checkpoint")
        if d.get("version") != CHECKPOINT_VERSION:
            raise SchemaError(f"unsupported checkpoint version {d.get('version')}")
        spec = MlpSpec.from_dict(d["spec"])
        weights = [_dec(w) for w in d["weights"]]
        biases = [_dec(b) for b in d["biases"]]
        m = [_dec(a) for a in d["adam"]["m"]]
        v = [_dec(a) for a in d["adam"]["v"]]
        step = int(d["adam"]["step"])
        meta = d.get("meta", {})
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"malformed checkpoint: {exc!r}") from exc
    if expect is not None and expect != spec:
        raise ShapeMismatch(f"checkpoint spec {spec} does not match expected {expect}")
    dims = spec.dims
    shapes = [(dims[i], dims[i + 1]) for i in range(len(dims) - 1)]
    if [w.shape for w in weights] != shapes or [b.shape for b in biases] != [(s[1],) for s in shapes]:
        raise ShapeMismatch("stored parameter shapes disagree with the stored spec")
    model = MlpModel(spec, weights, biases, m, v, step, meta)
    if [a.shape for a in model.m] != [p.shape for p in model.parameters()]:
        raise ShapeMismatch("optimizer state shapes disagree with parameters")
    return model


def save(model: MlpModel, path: str | Path) -> None:
    Path(path).write_text(json.dumps(to_dict(model), sort_keys=True) + "\n", encoding="utf-8")


def load(path: str | Path, expect: MlpSpec | None = None) -> MlpModel:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON: {exc}") from exc
    return from_dict(d, expect)
