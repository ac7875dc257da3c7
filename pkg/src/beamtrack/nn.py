"""A small numpy neural-network core: dense layers, stacked (bi)GRUs, dropout,
softmax cross-entropy, Adam, and a finite-difference gradient checker.

Every layer keeps its parameters in ``params`` and accumulates gradients into
``grads`` (same keys) during ``backward``. Models expose a flat, namespaced
parameter dict so optimizers and checkpoints can treat them uniformly.
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1000
    num_layers: int = 4
    hidden_dim: int = 256
    epochs_uni: int = 12
    epochs_bi: int = 50
    epochs_embed: int = 20
    dropout: float = 0.2
    grad_clip: float | None = 5.0
    dtype: str = "float64"
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if min(self.batch_size, self.num_layers, self.hidden_dim) < 1:
            raise ValueError("batch_size, num_layers and hidden_dim must be positive")
        if min(self.epochs_uni, self.epochs_bi, self.epochs_embed) < 0:
            raise ValueError("epoch counts must be non-negative")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        return asdict(self)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _uniform(rng, shape, fan_in, dtype):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    params: dict[str, np.ndarray]
    grads: dict[str, np.ndarray]

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)


class Dense(Layer):
    def __init__(self, in_dim: int, out_dim: int, rng=None, dtype="float64"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_dim, self.out_dim = in_dim, out_dim
        self.params = {
            "W": _uniform(rng, (in_dim, out_dim), in_dim, dtype),
            "b": _uniform(rng, (out_dim,), in_dim, dtype),
        }
        self.grads = {}
        self.zero_grad()

    def forward(self, x):
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"Dense expects input dim {self.in_dim}, got {x.shape[-1]}")
        self._x = x
        return x @ self.params["W"] + self.params["b"]

    def backward(self, dy):
        x2 = self._x.reshape(-1, self.in_dim)
        dy2 = dy.reshape(-1, self.out_dim)
        self.grads["W"] += x2.T @ dy2
        self.grads["b"] += dy2.sum(axis=0)
        return dy @ self.params["W"].T


ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    # derivative expressed through the activation output y
    "linear": (lambda x: x, lambda y: np.ones_like(y)),
    "relu": (lambda x: np.maximum(x, 0.0), lambda y: (y > 0).astype(y.dtype)),
    "tanh": (np.tanh, lambda y: 1.0 - y * y),
    "sigmoid": (sigmoid, lambda y: y * (1.0 - y)),
}


class MLP:
    """Dense stack; ``activations[i]`` follows layer i."""

    def __init__(self, sizes: list[int], activations: list[str], rng=None, dtype="float64"):
        if len(activations) != len(sizes) - 1:
            raise ValueError("need one activation per layer")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.sizes = list(sizes)
        self.activations = list(activations)
        self.layers = [Dense(a, b, rng, dtype) for a, b in zip(sizes[:-1], sizes[1:])]

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, l in enumerate(self.layers) for k, v in l.params.items()}

    @property
    def grads(self) -> dict[str, np.ndarray]:
        return {f"{i}.{k}": v for i, l in enumerate(self.layers) for k, v in l.grads.items()}

    def zero_grad(self):
        for l in self.layers:
            l.zero_grad()

    def forward(self, x, upto: int | None = None):
        """Output of the whole stack, or of the first ``upto`` layers."""
        self._outs = []
        for i, (layer, act) in enumerate(zip(self.layers, self.activations)):
            if upto is not None and i >= upto:
                break
            x = ACTIVATIONS[act][0](layer.forward(x))
            self._outs.append(x)
        return x

    def backward(self, dy):
        for layer, act, y in reversed(list(zip(self.layers, self.activations, self._outs))):
            dy = layer.backward(dy * ACTIVATIONS[act][1](y))
        return dy


class GRULayer(Layer):
    """One GRU layer run over a whole sequence.

    z = sig(x W_z + h U_z + b_z), r = sig(x W_r + h U_r + b_r),
    c = tanh(x W_h + (r*h) U_h + b_h), h' = (1 - z) h + z c.
    """

    GATES = ("z", "r", "h")

    def __init__(self, input_dim: int, hidden_dim: int, rng=None, dtype="float64"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_dim, self.hidden_dim = input_dim, hidden_dim
        self.params = {}
        for g in self.GATES:
            self.params[f"W_{g}"] = _uniform(rng, (input_dim, hidden_dim), input_dim, dtype)
        for g in self.GATES:
            self.params[f"U_{g}"] = _uniform(rng, (hidden_dim, hidden_dim), hidden_dim, dtype)
        for g in self.GATES:
            self.params[f"b_{g}"] = _uniform(rng, (hidden_dim,), hidden_dim, dtype)
        self.grads = {}
        self.zero_grad()

    def cell(self, x, h):
        return gru_cell_forward(self.params, x, h)

    def forward(self, X, reverse: bool = False):
        """X (B, T, in) -> hidden states (B, T, hidden) in input time order."""
        B, T, D = X.shape
        if D != self.input_dim:
            raise ValueError(f"GRU expects input dim {self.input_dim}, got {D}")
        p = self.params
        Xs = X[:, ::-1] if reverse else X
        X2 = Xs.reshape(B * T, D)
        pre = {g: (X2 @ p[f"W_{g}"] + p[f"b_{g}"]).reshape(B, T, -1) for g in self.GATES}
        h = np.zeros((B, self.hidden_dim), dtype=X.dtype)
        H = np.empty((B, T, self.hidden_dim), dtype=X.dtype)
        cache = []
        for t in range(T):
            z = sigmoid(pre["z"][:, t] + h @ p["U_z"])
            r = sigmoid(pre["r"][:, t] + h @ p["U_r"])
            c = np.tanh(pre["h"][:, t] + (r * h) @ p["U_h"])
            cache.append((h, z, r, c))
            h = (1.0 - z) * h + z * c
            H[:, t] = h
        self._cache = (Xs, cache, reverse)
        return H[:, ::-1] if reverse else H

    def backward(self, dH):
        """dH (B, T, hidden) in input time order -> dX (B, T, in)."""
        Xs, cache, reverse = self._cache
        p = self.params
        dH = dH[:, ::-1] if reverse else dH
        B, T, _ = dH.shape
        dpre = {g: np.empty_like(dH) for g in self.GATES}
        dh = np.zeros((B, self.hidden_dim), dtype=dH.dtype)
        for t in range(T - 1, -1, -1):
            h, z, r, c = cache[t]
            dh = dh + dH[:, t]
            da_z = dh * (c - h) * z * (1.0 - z)
            da_h = dh * z * (1.0 - c * c)
            drh = da_h @ p["U_h"].T
            da_r = drh * h * r * (1.0 - r)
            self.grads["U_z"] += h.T @ da_z
            self.grads["U_r"] += h.T @ da_r
            self.grads["U_h"] += (r * h).T @ da_h
            dh = dh * (1.0 - z) + da_z @ p["U_z"].T + da_r @ p["U_r"].T + drh * r
            dpre["z"][:, t], dpre["r"][:, t], dpre["h"][:, t] = da_z, da_r, da_h
        X2 = Xs.reshape(B * T, -1)
        dX = np.zeros_like(X2)
        for g in self.GATES:
            d2 = dpre[g].reshape(B * T, -1)
            self.grads[f"W_{g}"] += X2.T @ d2
            self.grads[f"b_{g}"] += d2.sum(axis=0)
            dX += d2 @ p[f"W_{g}"].T
        dX = dX.reshape(B, T, -1)
        return dX[:, ::-1] if reverse else dX


def gru_cell_forward(params: dict[str, np.ndarray], x, h):
    """One GRU step for x (..., in) and h (..., hidden) with layer-style params."""
    p = params
    x = np.asarray(x)
    h = np.asarray(h)
    if p["W_z"].shape[0] != x.shape[-1] or p["U_z"].shape[0] != h.shape[-1]:
        raise ValueError("GRU parameter shapes do not match x/h dimensions")
    z = sigmoid(x @ p["W_z"] + h @ p["U_z"] + p["b_z"])
    r = sigmoid(x @ p["W_r"] + h @ p["U_r"] + p["b_r"])
    c = np.tanh(x @ p["W_h"] + (r * h) @ p["U_h"] + p["b_h"])
    return (1.0 - z) * h + z * c


class GRUStack:
    """Stacked uni- or bidirectional GRU with inverted dropout between layers.

    The representation is the top forward layer's last state, concatenated with
    the top backward layer's state at the first time step when bidirectional.
    """

    def __init__(self, input_dim: int, hidden_dim: int, num_layers: int,
                 bidirectional: bool = False, dropout: float = 0.0, rng=None, dtype="float64"):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.input_dim, self.hidden_dim = input_dim, hidden_dim
        self.num_layers, self.bidirectional, self.dropout = num_layers, bidirectional, dropout
        dirs = 2 if bidirectional else 1
        self.fwd, self.bwd = [], []
        for l in range(num_layers):
            d_in = input_dim if l == 0 else dirs * hidden_dim
            self.fwd.append(GRULayer(d_in, hidden_dim, rng, dtype))
            if bidirectional:
                self.bwd.append(GRULayer(d_in, hidden_dim, rng, dtype))

    @property
    def output_dim(self) -> int:
        return self.hidden_dim * (2 if self.bidirectional else 1)

    def named_layers(self):
        for l in range(self.num_layers):
            yield f"l{l}.fwd", self.fwd[l]
            if self.bidirectional:
                yield f"l{l}.bwd", self.bwd[l]

    def forward(self, X, train: bool = False, rng=None):
        if X.shape[-1] != self.input_dim:
            raise ValueError(f"sequence width {X.shape[-1]} != GRU input dim {self.input_dim}")
        self._masks = []
        inp = X
        for l in range(self.num_layers):
            Hf = self.fwd[l].forward(inp)
            out = np.concatenate([Hf, self.bwd[l].forward(inp, reverse=True)], axis=-1) \
                if self.bidirectional else Hf
            mask = None
            if train and self.dropout > 0 and l < self.num_layers - 1:
                if rng is None:
                    raise ValueError("training-mode dropout needs an rng")
                mask = (rng.random(out.shape) >= self.dropout).astype(out.dtype) / (1 - self.dropout)
                out = out * mask
            self._masks.append(mask)
            inp = out
        h = self.hidden_dim
        self._T = X.shape[1]
        if self.bidirectional:
            return np.concatenate([inp[:, -1, :h], inp[:, 0, h:]], axis=-1)
        return inp[:, -1]

    def backward(self, drep):
        B, h, T = drep.shape[0], self.hidden_dim, self._T
        dout = np.zeros((B, T, self.output_dim), dtype=drep.dtype)
        dout[:, -1, :h] = drep[:, :h]
        if self.bidirectional:
            dout[:, 0, h:] = drep[:, h:]
        for l in range(self.num_layers - 1, -1, -1):
            if self._masks[l] is not None:
                dout = dout * self._masks[l]
            dinp = self.fwd[l].backward(dout[..., :h])
            if self.bidirectional:
                dinp = dinp + self.bwd[l].backward(dout[..., h:])
            dout = dinp
        return dout


def gru_sequence_forward(stack: GRUStack, seq, dropout: float | None = None,
                         bidirectional: bool | None = None, train: bool = False, rng=None):
    """Final representation of each sequence in ``seq`` (B, T, D)."""
    if bidirectional is not None and bidirectional != stack.bidirectional:
        raise ValueError("direction does not match the stack")
    if dropout is not None:
        stack.dropout = dropout
    return stack.forward(np.asarray(seq), train=train, rng=rng)


def softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def cross_entropy(logits, labels):
    """Mean over all rows of -log softmax(row)[label]; logits (..., Q), labels (...)."""
    loss, _ = softmax_cross_entropy(logits, labels)
    return loss


def softmax_cross_entropy(logits, labels):
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    Q = logits.shape[-1]
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= Q):
        raise IndexError(f"label out of range [0, {Q})")
    lp = log_softmax(logits)
    picked = np.take_along_axis(lp, labels[..., None], axis=-1)[..., 0]
    n = labels.size
    grad = np.exp(lp)
    np.put_along_axis(grad, labels[..., None],
                      np.take_along_axis(grad, labels[..., None], axis=-1) - 1.0, axis=-1)
    return float(-picked.sum() / n), grad / n


def binary_cross_entropy_with_logits(logits, targets):
    """Mean elementwise BCE; returns (loss, dlogits)."""
    x = np.asarray(logits)
    y = np.asarray(targets, dtype=x.dtype)
    loss = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    return float(loss.mean()), (sigmoid(x) - y) / x.size


def mse_loss(pred, target):
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


class PredictionHead:
    """Dense layer from a representation to m x Q logits."""

    def __init__(self, in_dim: int, m: int, num_beams: int, rng=None, dtype="float64"):
        self.m, self.num_beams = m, num_beams
        self.dense = Dense(in_dim, m * num_beams, rng, dtype)

    def forward(self, rep):
        return self.dense.forward(rep).reshape(rep.shape[0], self.m, self.num_beams)

    def backward(self, dlogits):
        return self.dense.backward(dlogits.reshape(dlogits.shape[0], -1))


def prediction_head(head: PredictionHead, representation):
    return head.forward(np.atleast_2d(representation))


class SequenceClassifier:
    """GRU stack + prediction head, trained with per-step cross-entropy."""

    def __init__(self, input_dim: int, hidden_dim: int, num_layers: int, m: int, num_beams: int,
                 bidirectional: bool = False, dropout: float = 0.0, seed: int = 0,
                 dtype: str = "float64"):
        rng = np.random.Generator(np.random.PCG64(seed))
        self.dtype = dtype
        self.gru = GRUStack(input_dim, hidden_dim, num_layers, bidirectional, dropout, rng, dtype)
        self.head = PredictionHead(self.gru.output_dim, m, num_beams, rng, dtype)

    def _parts(self):
        yield from self.gru.named_layers()
        yield "head", self.head.dense

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, l in self._parts() for k, v in l.params.items()}

    @property
    def grads(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, l in self._parts() for k, v in l.grads.items()}

    def zero_grad(self):
        for _, l in self._parts():
            l.zero_grad()

    def forward(self, X, train: bool = False, rng=None):
        return self.head.forward(self.gru.forward(np.asarray(X, dtype=self.dtype), train, rng))

    def loss_and_grads(self, X, labels, train: bool = False, rng=None):
        self.zero_grad()
        logits = self.forward(X, train, rng)
        loss, dlogits = softmax_cross_entropy(logits, labels)
        self.gru.backward(self.head.backward(dlogits))
        return loss, self.grads


class DenseClassifier:
    """Flattened input -> dense -> m x Q logits; the smallest model the harness checks."""

    def __init__(self, input_dim: int, m: int, num_beams: int, seed: int = 0,
                 dtype: str = "float64"):
        rng = np.random.Generator(np.random.PCG64(seed))
        self.dtype = dtype
        self.head = PredictionHead(input_dim, m, num_beams, rng, dtype)

    @property
    def params(self) -> dict[str, np.ndarray]:
        return {f"head.{k}": v for k, v in self.head.dense.params.items()}

    @property
    def grads(self) -> dict[str, np.ndarray]:
        return {f"head.{k}": v for k, v in self.head.dense.grads.items()}

    def forward(self, X, train: bool = False, rng=None):
        X = np.asarray(X, dtype=self.dtype)
        return self.head.forward(X.reshape(X.shape[0], -1))

    def loss_and_grads(self, X, labels, train: bool = False, rng=None):
        self.head.dense.zero_grad()
        loss, dlogits = softmax_cross_entropy(self.forward(X), labels)
        self.head.backward(dlogits)
        return loss, self.grads


# -- optimisation -----------------------------------------------------------

@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """In-place bias-corrected Adam update; returns (params, state)."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for k, p in params.items():
        g = grads[k]
        if p.shape != g.shape:
            raise ValueError(f"gradient shape mismatch for {k}")
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            g *= scale
    return norm


# -- gradient check ---------------------------------------------------------

@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    worst_param: str
    num_coords: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def grad_check(model, batch: tuple, tolerance: float = 1e-4, num_coords: int = 200,
               step: float = 1e-5, seed: int = 0) -> GradCheckReport:
    """Central differences on a random parameter subset versus analytic gradients.

    ``model`` needs ``params`` (dict of arrays, mutated in place) and
    ``loss_and_grads(*batch)`` returning (loss, grads). Evaluation is in
    whatever mode ``batch`` implies; pass eval-mode batches (no dropout).
    """
    params = model.params
    _, grads = model.loss_and_grads(*batch)
    grads = {k: np.array(v, dtype=np.float64) for k, v in grads.items()}
    total = sum(p.size for p in params.values())
    rng = np.random.Generator(np.random.PCG64(seed))
    worst, worst_name, count = 0.0, "", 0
    for name, p in params.items():
        k = min(p.size, max(4, int(np.ceil(num_coords * p.size / total))))
        flat_idx = rng.choice(p.size, size=k, replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, p.shape)
            old = p[idx]
            p[idx] = old + step
            lp = model.loss_and_grads(*batch)[0]
            p[idx] = old - step
            lm = model.loss_and_grads(*batch)[0]
            p[idx] = old
            num = (lp - lm) / (2 * step)
            ana = grads[name][idx]
            rel = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            count += 1
            if rel > worst:
                worst, worst_name = rel, name
    return GradCheckReport(float(worst), worst_name, count, tolerance)


# -- checkpoint encoding ----------------------------------------------------

def encode_array(a: np.ndarray) -> dict:
    a = np.asarray(a)
    dt = a.dtype.newbyteorder("<") if a.dtype.byteorder == ">" else a.dtype
    return {"dtype": dt.str, "shape": list(a.shape),
            "data": base64.b64encode(a.astype(dt).tobytes(order="C")).decode("ascii")}


def decode_array(d: dict) -> np.ndarray:
    return np.frombuffer(base64.b64decode(d["data"]), dtype=np.dtype(d["dtype"])) \
        .reshape(tuple(d["shape"])).copy()


def encode_arrays(arrays: dict[str, np.ndarray]) -> dict:
    return {k: encode_array(v) for k, v in arrays.items()}


def decode_arrays(d: dict) -> dict[str, np.ndarray]:
    return {k: decode_array(v) for k, v in d.items()}


def encode_adam(state: AdamState) -> dict:
    return {"t": state.t, "m": encode_arrays(state.m), "v": encode_arrays(state.v)}


def decode_adam(d: dict) -> AdamState:
    return AdamState(d["t"], decode_arrays(d["m"]), decode_arrays(d["v"]))


def dump_json(path, payload: dict) -> None:
    Path(path).write_text(json.dumps(payload, sort_keys=True, separators=(",", ":")))


def load_params_into(target: dict[str, np.ndarray], source: dict[str, np.ndarray]) -> None:
    if set(target) != set(source):
        raise KeyError(f"parameter names differ: {sorted(set(target) ^ set(source))[:5]}")
    for k, v in target.items():
        if v.shape != source[k].shape:
            raise ValueError(f"shape mismatch for {k}: {v.shape} vs {source[k].shape}")
        v[...] = source[k]
