"""Image-feature embedders: PCA, a dense autoencoder, and a multi-label beam classifier."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field

import numpy as np

from .nn import (MLP, AdamState, TrainConfig, TrainingError, adam_step,
                 binary_cross_entropy_with_logits, clip_global_norm, decode_arrays,
                 encode_arrays, load_params_into, mse_loss, sigmoid)

logger = logging.getLogger(__name__)


def _flat(x, input_dim: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1 or (x.ndim == 3 and x.size == input_dim):
        x = x.reshape(1, -1)
    else:
        x = x.reshape(x.shape[0], -1)
    if x.shape[1] != input_dim:
        raise ValueError(f"expected {input_dim} input features, got {x.shape[1]}")
    return x


# -- PCA --------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PcaModel:
    mean: np.ndarray
    components: np.ndarray  # (k, d), orthonormal rows
    explained_variance: np.ndarray  # (k,), non-increasing

    kind = "pca"

    @property
    def dim(self) -> int:
        return self.components.shape[0]

    @property
    def input_dim(self) -> int:
        return self.components.shape[1]

    def embed(self, x) -> np.ndarray:
        return (_flat(x, self.input_dim) - self.mean) @ self.components.T

    def reconstruct(self, z) -> np.ndarray:
        return np.atleast_2d(z) @ self.components + self.mean

    def to_payload(self) -> dict:
        return {"kind": self.kind, "arrays": encode_arrays({
            "mean": self.mean, "components": self.components,
            "explained_variance": self.explained_variance})}

    @classmethod
    def from_payload(cls, d: dict) -> "PcaModel":
        a = decode_arrays(d["arrays"])
        return cls(a["mean"], a["components"], a["explained_variance"])

    def to_json(self) -> str:
        return json.dumps({"mean": self.mean.tolist(), "components": self.components.tolist(),
                           "explained_variance": self.explained_variance.tolist()})


def pca_fit(features, k: int) -> PcaModel:
    """Principal components of mean-centred data via SVD.

    Explained variances use the unbiased (n - 1) normalisation; each
    component is signed so that its largest-magnitude entry is positive.
    """
    x = np.asarray(features, dtype=np.float64)
    x = x.reshape(x.shape[0], -1)
    n, d = x.shape
    if n < 2:
        raise ValueError("PCA needs at least two samples")
    if not 1 <= k <= min(n, d):
        raise ValueError(f"k={k} outside [1, min(n, d)={min(n, d)}]")
    mean = x.mean(axis=0)
    _, s, vt = np.linalg.svd(x - mean, full_matrices=False)
    comps = vt[:k].copy()
    pivot = np.argmax(np.abs(comps), axis=1)
    comps *= np.sign(comps[np.arange(k), pivot])[:, None]
    return PcaModel(mean, comps, s[:k] ** 2 / (n - 1))


def pca_embed(model: PcaModel, x) -> np.ndarray:
    out = model.embed(x)
    return out[0] if np.ndim(x) == 1 else out


def pca_reconstruct(model: PcaModel, z) -> np.ndarray:
    out = model.reconstruct(z)
    return out[0] if np.ndim(z) == 1 else out


# -- shared minibatch trainer ----------------------------------------------

def _fit_mlp(net: MLP, x, target_fn, loss_fn, cfg: TrainConfig, epochs: int, what: str):
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    state = AdamState()
    params = net.params
    losses = []
    n = x.shape[0]
    for epoch in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s:s + cfg.batch_size]
            net.zero_grad()
            out = net.forward(x[idx])
            loss, dout = loss_fn(out, target_fn(idx))
            if not np.isfinite(loss):
                raise TrainingError(f"{what} diverged at epoch {epoch + 1}: loss={loss}")
            net.backward(dout)
            grads = net.grads
            clip_global_norm(grads, cfg.grad_clip)
            adam_step(params, grads, state, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
            total += loss * len(idx)
        losses.append(total / n)
        logger.debug("%s epoch %d loss %.6g", what, epoch + 1, losses[-1])
    return losses


# -- autoencoder ------------------------------------------------------------

@dataclass(eq=False)
class AeModel:
    net: MLP
    bottleneck_dim: int
    losses: list[float] = field(default_factory=list)

    kind = "ae"

    @property
    def dim(self) -> int:
        return self.bottleneck_dim

    @property
    def input_dim(self) -> int:
        return self.net.sizes[0]

    @property
    def _bottleneck_layer(self) -> int:
        return self.net.sizes.index(self.bottleneck_dim, 1)

    def embed(self, x) -> np.ndarray:
        return self.net.forward(_flat(x, self.input_dim), upto=self._bottleneck_layer)

    def reconstruct(self, x) -> np.ndarray:
        return self.net.forward(_flat(x, self.input_dim))

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else float("nan")

    def to_payload(self) -> dict:
        return {"kind": self.kind, "sizes": self.net.sizes, "activations": self.net.activations,
                "bottleneck_dim": self.bottleneck_dim, "losses": self.losses,
                "params": encode_arrays(self.net.params)}

    @classmethod
    def from_payload(cls, d: dict) -> "AeModel":
        net = MLP(d["sizes"], d["activations"])
        load_params_into(net.params, decode_arrays(d["params"]))
        return cls(net, d["bottleneck_dim"], list(d["losses"]))


def ae_train(features, k: int, cfg: TrainConfig = TrainConfig(), hidden: tuple[int, ...] = (512,),
             activation: str = "relu", epochs: int | None = None) -> AeModel:
    """Symmetric dense autoencoder d -> hidden -> k -> reversed(hidden) -> d, MSE loss."""
    if k < 1:
        raise ValueError("bottleneck dimension must be >= 1")
    x = np.asarray(features, dtype=cfg.dtype)
    x = x.reshape(x.shape[0], -1)
    d = x.shape[1]
    sizes = [d, *hidden, k, *reversed(hidden), d]
    acts = [activation] * len(hidden) + ["linear"] + [activation] * len(hidden) + ["linear"]
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    net = MLP(sizes, acts, rng, cfg.dtype)
    losses = _fit_mlp(net, x, lambda idx: x[idx], mse_loss, cfg,
                      cfg.epochs_embed if epochs is None else epochs, "autoencoder")
    return AeModel(net, k, losses)


# -- supervised multi-label classifier --------------------------------------

@dataclass(eq=False)
class ClsEmbedModel:
    net: MLP
    embed_dim: int
    num_classes: int
    losses: list[float] = field(default_factory=list)

    kind = "cls"

    @property
    def dim(self) -> int:
        return self.embed_dim

    @property
    def input_dim(self) -> int:
        return self.net.sizes[0]

    def embed(self, x) -> np.ndarray:
        return self.net.forward(_flat(x, self.input_dim), upto=len(self.net.layers) - 1)

    def predict_proba(self, x) -> np.ndarray:
        return sigmoid(self.net.forward(_flat(x, self.input_dim)))

    def predict_sets(self, x, threshold: float = 0.5) -> list[set[int]]:
        return [set(np.flatnonzero(p >= threshold).tolist()) for p in self.predict_proba(x)]

    def to_payload(self) -> dict:
        return {"kind": self.kind, "sizes": self.net.sizes, "activations": self.net.activations,
                "embed_dim": self.embed_dim, "num_classes": self.num_classes,
                "losses": self.losses, "params": encode_arrays(self.net.params)}

    @classmethod
    def from_payload(cls, d: dict) -> "ClsEmbedModel":
        net = MLP(d["sizes"], d["activations"])
        load_params_into(net.params, decode_arrays(d["params"]))
        return cls(net, d["embed_dim"], d["num_classes"], list(d["losses"]))


def multi_hot(label_sets, num_classes: int) -> np.ndarray:
    y = np.zeros((len(label_sets), num_classes))
    for i, s in enumerate(label_sets):
        if not s:
            raise ValueError(f"image {i} has an empty label set")
        idx = np.fromiter(s, dtype=np.int64)
        if idx.min() < 0 or idx.max() >= num_classes:
            raise ValueError(f"image {i} has a label outside [0, {num_classes})")
        y[i, idx] = 1.0
    return y


def cls_embed_train(features, labels, k: int, cfg: TrainConfig = TrainConfig(),
                    num_classes: int = 128, hidden: tuple[int, ...] = (512,),
                    epochs: int | None = None) -> ClsEmbedModel:
    """Dense multi-label classifier (per-class BCE); the embedding is the k-wide
    penultimate layer."""
    x = np.asarray(features, dtype=cfg.dtype)
    x = x.reshape(x.shape[0], -1)
    y = multi_hot(labels, num_classes).astype(cfg.dtype)
    sizes = [x.shape[1], *hidden, k, num_classes]
    acts = ["relu"] * len(hidden) + ["tanh", "linear"]
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    net = MLP(sizes, acts, rng, cfg.dtype)
    losses = _fit_mlp(net, x, lambda idx: y[idx], binary_cross_entropy_with_logits, cfg,
                      cfg.epochs_embed if epochs is None else epochs, "classifier")
    return ClsEmbedModel(net, k, num_classes, losses)


EMBEDDERS = {"pca": PcaModel, "ae": AeModel, "cls": ClsEmbedModel}


def embed_image(model, feature_map) -> np.ndarray:
    """k-dim embedding of one feature map (or a batch, returning (n, k))."""
    fm = np.asarray(feature_map)
    out = model.embed(fm)
    single = fm.ndim == 1 or (fm.ndim == 3 and fm.size == model.input_dim)
    return out[0] if single else out


def embedder_from_payload(d: dict):
    return EMBEDDERS[d["kind"]].from_payload(d)
