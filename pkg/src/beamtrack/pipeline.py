"""Trainable beam predictors and the experiment runners built on them."""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .baselines import (fit_beam_distribution, last_step_predict_batch, linreg_predict_batch,
                        statistical_predict_batch)
from .codebook import Codebook, CodebookConfig, generate_codebook
from .dataset import ClusterConfig, Dataset, LeakageError, check_disjoint, cluster_by_std, union
from .embedding import ae_train, cls_embed_train, embedder_from_payload, pca_fit
from .metrics import (ScoreReport, ScoringConfig, render_csv, render_text, score_report,
                      weighted_report)
from .nn import (AdamState, SequenceClassifier, TrainConfig, TrainingError, adam_step,
                 clip_global_norm, decode_adam, decode_arrays, dump_json, encode_adam,
                 encode_arrays, load_params_into)

logger = logging.getLogger(__name__)


class CheckpointError(RuntimeError):
    pass


class InputMode(str, Enum):
    BEAM_ONLY = "beam_only"
    STAGGERED = "staggered"
    CONCAT = "concat"


class SequenceModelKind(str, Enum):
    UNI_GRU = "uni_gru"
    BI_GRU = "bi_gru"


class EmbedderKind(str, Enum):
    PCA = "pca"
    AE = "ae"
    CLS = "cls"
    NONE = "none"


@dataclass(frozen=True)
class PipelineConfig:
    input_mode: InputMode = InputMode.CONCAT
    sequence_model: SequenceModelKind = SequenceModelKind.BI_GRU
    embedder: EmbedderKind = EmbedderKind.AE
    k: int | None = None
    tau: int = 8
    m: int = 5
    codebook: CodebookConfig = field(default_factory=CodebookConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    scoring: ScoringConfig = field(default_factory=ScoringConfig)
    epochs: int | None = None
    embed_hidden: tuple[int, ...] = (512,)
    standardize_images: bool = True

    def __post_init__(self):
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("input_mode", InputMode(self.input_mode))
        set_("sequence_model", SequenceModelKind(self.sequence_model))
        set_("embedder", EmbedderKind(self.embedder))
        set_("embed_hidden", tuple(self.embed_hidden))
        for name, cls in (("codebook", CodebookConfig), ("train", TrainConfig),
                          ("scoring", ScoringConfig)):
            if isinstance(getattr(self, name), dict):
                set_(name, cls(**getattr(self, name)))
        if self.input_mode is InputMode.BEAM_ONLY:
            set_("embedder", EmbedderKind.NONE)
            set_("k", None)
        elif self.embedder is EmbedderKind.NONE:
            raise ValueError(f"input mode {self.input_mode.value} needs an image embedder")
        if self.input_mode is InputMode.STAGGERED:
            if self.sequence_model is not SequenceModelKind.UNI_GRU:
                raise ValueError("staggered input is defined for the uni-GRU only")
            if self.k is None:
                set_("k", self.codebook.dim)
            if self.k != self.codebook.dim:
                raise ValueError(f"staggered input needs k == 2N = {self.codebook.dim}")
        if self.input_mode is InputMode.CONCAT and self.k is None:
            set_("k", max(1, self.codebook.dim // 4))
        if self.tau < 1 or self.m < 1:
            raise ValueError("tau and m must be >= 1")

    @property
    def bidirectional(self) -> bool:
        return self.sequence_model is SequenceModelKind.BI_GRU

    @property
    def num_epochs(self) -> int:
        if self.epochs is not None:
            return self.epochs
        return self.train.epochs_bi if self.bidirectional else self.train.epochs_uni

    @property
    def input_width(self) -> int:
        if self.input_mode is InputMode.CONCAT:
            return self.codebook.dim + self.k
        return self.codebook.dim

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("input_mode", "sequence_model", "embedder"):
            d[key] = getattr(self, key).value
        d["codebook"] = self.codebook.to_dict()
        d["embed_hidden"] = list(self.embed_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return cls(**d)


def config_hash(d: dict) -> str:
    """sha256 of canonical JSON; stable under key reordering."""
    return hashlib.sha256(json.dumps(d, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


# -- image encoder + input assembly -----------------------------------------

@dataclass(eq=False)
class ImageEncoder:
    """A fitted embedder plus optional per-dimension standardisation."""

    model: object
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None

    @property
    def dim(self) -> int:
        return self.model.dim

    def encode(self, feature_maps) -> np.ndarray:
        z = self.model.embed(np.asarray(feature_maps).reshape(len(feature_maps), -1))
        if self.mean is not None:
            z = (z - self.mean) / self.scale
        return z

    def to_payload(self) -> dict:
        d = {"model": self.model.to_payload()}
        if self.mean is not None:
            d["norm"] = encode_arrays({"mean": self.mean, "scale": self.scale})
        return d

    @classmethod
    def from_payload(cls, d: dict) -> "ImageEncoder":
        norm = decode_arrays(d["norm"]) if "norm" in d else {}
        return cls(embedder_from_payload(d["model"]), norm.get("mean"), norm.get("scale"))


def image_label_sets(d: Dataset) -> list[set[int]]:
    """Per image, the beams of every user observed in it."""
    sets: list[set[int]] = [set() for _ in d.image_ids]
    for j, b in zip(d.images.ravel(), d.beams.ravel()):
        sets[j].add(int(b))
    return sets


def fit_image_encoder(train: Dataset, cfg: PipelineConfig) -> ImageEncoder | None:
    """Fit the configured embedder on the training set's own images."""
    if cfg.embedder is EmbedderKind.NONE:
        return None
    if train.feature_maps is None:
        raise ValueError("image input modes need a dataset with feature maps")
    x = train.feature_maps.reshape(len(train.image_ids), -1).astype(np.float64)
    k = cfg.k
    tc = cfg.train
    if cfg.embedder is EmbedderKind.PCA:
        if k > min(x.shape):
            raise ValueError(f"PCA dimension {k} exceeds min(n_images, d) = {min(x.shape)}")
        model = pca_fit(x, k)
    elif cfg.embedder is EmbedderKind.AE:
        model = ae_train(x, k, tc, hidden=cfg.embed_hidden)
    else:
        model = cls_embed_train(x, image_label_sets(train), k, tc,
                                num_classes=cfg.codebook.num_beams, hidden=cfg.embed_hidden)
    enc = ImageEncoder(model)
    if cfg.standardize_images:
        z = model.embed(x)
        enc.mean = z.mean(axis=0)
        enc.scale = np.where(z.std(axis=0) > 1e-12, z.std(axis=0), 1.0)
    return enc


def build_sequence_input(d: Dataset, cb: Codebook, encoder, mode, tau: int,
                         rows=None, image_table: np.ndarray | None = None) -> np.ndarray:
    """(B, T, W) model input for the given rows (default: all).

    beam_only: tau x 2N; staggered: 2 tau steps alternating beam then image
    embedding, each 2N wide; concat: tau x (2N + k).
    """
    mode = InputMode(mode)
    if d.tau < tau:
        raise ValueError(f"records hold {d.tau} observations, need tau={tau}")
    rows = np.arange(len(d)) if rows is None else np.asarray(rows)
    beams = cb.embed(d.beams[rows, d.tau - tau:])
    if mode is InputMode.BEAM_ONLY:
        return beams
    if image_table is None:
        if encoder is None:
            raise ValueError(f"{mode.value} input needs an image encoder")
        image_table = image_embedding_table(d, encoder)
    imgs = image_table[d.images[rows, d.tau - tau:]]
    if mode is InputMode.STAGGERED:
        if imgs.shape[-1] != beams.shape[-1]:
            raise ValueError(f"staggered input needs image width {beams.shape[-1]}, "
                             f"got {imgs.shape[-1]}")
        out = np.empty((len(rows), 2 * tau, beams.shape[-1]), dtype=np.float64)
        out[:, 0::2] = beams
        out[:, 1::2] = imgs
        return out
    return np.concatenate([beams, imgs], axis=-1)


def image_embedding_table(d: Dataset, encoder: ImageEncoder | None) -> np.ndarray | None:
    if encoder is None:
        return None
    if d.feature_maps is None:
        raise ValueError("dataset has no feature maps")
    if len(d.image_ids) == 0:
        return np.zeros((0, encoder.dim))
    return encoder.encode(d.feature_maps)


# -- trained predictor ------------------------------------------------------

@dataclass(eq=False)
class TrainedPredictor:
    config: PipelineConfig
    codebook: Codebook
    encoder: ImageEncoder | None
    net: SequenceClassifier
    train_image_ids: frozenset[str] = frozenset()
    losses: list[float] = field(default_factory=list)
    epochs_done: int = 0
    adam: AdamState = field(default_factory=AdamState)
    rng_state: dict | None = None

    def inputs(self, d: Dataset, rows=None, table=None) -> np.ndarray:
        return build_sequence_input(d, self.codebook, self.encoder, self.config.input_mode,
                                    self.config.tau, rows, table)

    def logits(self, d: Dataset, batch_size: int = 2000) -> np.ndarray:
        if d.tau != self.config.tau:
            raise ValueError(f"records have tau={d.tau}, model expects tau={self.config.tau}")
        table = image_embedding_table(d, self.encoder)
        out = []
        for s in range(0, len(d), batch_size):
            rows = np.arange(s, min(s + batch_size, len(d)))
            out.append(self.net.forward(self.inputs(d, rows, table), train=False))
        if not out:
            return np.zeros((0, self.config.m, self.codebook.num_beams))
        return np.concatenate(out)

    def to_payload(self) -> dict:
        return {
            "version": __version__,
            "config": self.config.to_dict(),
            "config_hash": config_hash(self.config.to_dict()),
            "params": encode_arrays(self.net.params),
            "adam": encode_adam(self.adam),
            "rng_state": self.rng_state,
            "epochs_done": self.epochs_done,
            "losses": self.losses,
            "encoder": self.encoder.to_payload() if self.encoder is not None else None,
            "train_image_ids": sorted(self.train_image_ids),
        }

    def save(self, path) -> None:
        dump_json(path, self.to_payload())

    @classmethod
    def from_payload(cls, d: dict) -> "TrainedPredictor":
        cfg = PipelineConfig.from_dict(d["config"])
        if config_hash(cfg.to_dict()) != d["config_hash"]:
            raise CheckpointError("checkpoint config hash does not match its config")
        net = _make_net(cfg)
        load_params_into(net.params, decode_arrays(d["params"]))
        enc = ImageEncoder.from_payload(d["encoder"]) if d["encoder"] is not None else None
        return cls(cfg, generate_codebook(cfg.codebook), enc, net,
                   frozenset(d["train_image_ids"]), list(d["losses"]), d["epochs_done"],
                   decode_adam(d["adam"]), d["rng_state"])

    @classmethod
    def load(cls, path) -> "TrainedPredictor":
        try:
            payload = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
        return cls.from_payload(payload)


def _make_net(cfg: PipelineConfig) -> SequenceClassifier:
    tc = cfg.train
    return SequenceClassifier(cfg.input_width, tc.hidden_dim, tc.num_layers, cfg.m,
                              cfg.codebook.num_beams, cfg.bidirectional, tc.dropout,
                              seed=tc.seed, dtype=tc.dtype)


def _prepare(d: Dataset, cfg: PipelineConfig) -> Dataset:
    if d.tau > cfg.tau:
        d = d.truncate(cfg.tau)
    if d.m > cfg.m:
        d = d.with_horizon(cfg.m)
    if d.tau != cfg.tau or d.m != cfg.m:
        raise ValueError(f"dataset (tau={d.tau}, m={d.m}) cannot serve tau={cfg.tau}, m={cfg.m}")
    return d


def train_predictor(train_set: Dataset, cfg: PipelineConfig, checkpoint_path=None,
                    resume: bool = False, stop_after: int | None = None,
                    on_epoch: Callable[[int, float, "TrainedPredictor"], None] | None = None) -> TrainedPredictor:
    """Fit the embedder on ``train_set``'s images, then train GRU + head.

    With ``checkpoint_path`` the full state (parameters, optimizer, RNG) is
    written after every epoch; ``resume=True`` continues from it. ``stop_after``
    ends the run after that many total epochs (used to simulate interruption).
    """
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    train_set = _prepare(train_set, cfg)
    tc = cfg.train
    if resume and checkpoint_path is not None and Path(checkpoint_path).exists():
        model = TrainedPredictor.load(checkpoint_path)
        if config_hash(model.config.to_dict()) != config_hash(cfg.to_dict()):
            raise CheckpointError("checkpoint was written with a different configuration")
        if model.train_image_ids != frozenset(train_set.image_set()):
            raise CheckpointError("checkpoint was trained on different data")
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = model.rng_state
    else:
        model = TrainedPredictor(cfg, generate_codebook(cfg.codebook),
                                 fit_image_encoder(train_set, cfg), _make_net(cfg),
                                 frozenset(train_set.image_set()))
        rng = np.random.Generator(np.random.PCG64(tc.seed))

    table = image_embedding_table(train_set, model.encoder)
    labels = train_set.labels
    params = model.net.params
    n = len(train_set)
    last = cfg.num_epochs if stop_after is None else min(stop_after, cfg.num_epochs)
    for epoch in range(model.epochs_done, last):
        order = rng.permutation(n)
        total = 0.0
        for s in range(0, n, tc.batch_size):
            rows = order[s:s + tc.batch_size]
            x = model.inputs(train_set, rows, table)
            loss, grads = model.net.loss_and_grads(x, labels[rows], train=True, rng=rng)
            if not np.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch + 1}: {loss}")
            clip_global_norm(grads, tc.grad_clip)
            adam_step(params, grads, model.adam, tc.learning_rate, tc.beta1, tc.beta2, tc.eps)
            total += loss * len(rows)
        model.losses.append(total / n)
        model.epochs_done = epoch + 1
        model.rng_state = rng.bit_generator.state
        logger.info("epoch %d/%d loss %.5f", epoch + 1, cfg.num_epochs, model.losses[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, model.losses[-1], model)
        if checkpoint_path is not None:
            model.save(checkpoint_path)
    model.rng_state = rng.bit_generator.state
    return model


def predict(model: TrainedPredictor, records: Dataset) -> np.ndarray:
    """Argmax beam per horizon step (ties to the lowest index)."""
    if records.tau != model.config.tau:
        raise ValueError(f"records have tau={records.tau}, model expects tau={model.config.tau}")
    return np.argmax(model.logits(records), axis=-1).astype(np.int64)


def evaluate(model: TrainedPredictor, val_set: Dataset, scoring: ScoringConfig | None = None,
             check_leakage: bool = True) -> ScoreReport:
    val_set = _prepare(val_set, model.config)
    if check_leakage:
        shared = model.train_image_ids & val_set.image_set()
        if shared:
            raise LeakageError({"train/validation": sorted(shared)})
    preds = predict(model, val_set)
    return score_report(preds, val_set.labels, scoring or model.config.scoring)


# -- baselines --------------------------------------------------------------

def baseline_predictions(train: Dataset, val: Dataset, num_beams: int, m: int = 5,
                         seed: int = 0) -> dict[str, np.ndarray]:
    dist = fit_beam_distribution(train, num_beams)
    return {
        "last_step": last_step_predict_batch(val.beams, m),
        "linear_regression": linreg_predict_batch(val.beams, m, num_beams),
        "statistical": statistical_predict_batch(dist, len(val), m, seed),
    }


def baseline_reports(train: Dataset, val: Dataset, num_beams: int,
                     scoring: ScoringConfig = ScoringConfig(), seed: int = 0
                     ) -> dict[str, ScoreReport]:
    preds = baseline_predictions(train, val, num_beams, val.m, seed)
    return {k: score_report(p, val.labels, scoring) for k, p in preds.items()}


# -- experiments ------------------------------------------------------------

def _train_and_score(args):
    train, val, cfg = args
    model = train_predictor(train, cfg)
    return evaluate(model, val, cfg.scoring)


def _run_jobs(jobs: list, workers: int) -> list:
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_train_and_score, jobs))
    return [_train_and_score(j) for j in jobs]


def run_memory_sweep(train: Dataset, val: Dataset, cfg: PipelineConfig,
                     taus: Sequence[int] = (4, 6, 8), workers: int = 1
                     ) -> list[tuple[int, ScoreReport]]:
    """One model per tau, each seeing only the most recent tau observations."""
    check_disjoint({"train": train, "validation": val})
    avail = min(train.tau, val.tau)
    if max(taus) > avail:
        raise ValueError(f"tau={max(taus)} exceeds available history {avail}")
    jobs = [(train.truncate(t), val.truncate(t), replace(cfg, tau=t)) for t in taus]
    return list(zip(taus, _run_jobs(jobs, workers)))


SUBSET_NAMES = ("A", "B", "C")


@dataclass(frozen=True)
class PlanRow:
    train: str
    val: str
    modes: tuple[str, ...] = ("beam_only", "concat")

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(InputMode(m).value for m in self.modes))


@dataclass(frozen=True)
class ExperimentPlan:
    rows: tuple[PlanRow, ...]

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows]}

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentPlan":
        return cls(tuple(PlanRow(**r) for r in d["rows"]))


DEFAULT_PLAN = ExperimentPlan((
    PlanRow("A_t", "A_v"),
    PlanRow("D_t", "A_v"),
    PlanRow("B_t", "B_v"),
    PlanRow("A_t+B_t", "B_v"),
    PlanRow("D_t", "B_v"),
    PlanRow("C_t", "C_v"),
    PlanRow("B_t+C_t", "C_v"),
    PlanRow("D_t", "C_v"),
))


def resolve_subset(expr: str, clusters: dict[str, Dataset]) -> Dataset:
    """Union of named subsets, e.g. ``"A_t+B_t"`` (also accepts ``|`` and ``∪``)."""
    tokens = [t.strip() for t in expr.replace("∪", "+").replace("|", "+").split("+")]
    try:
        parts = [clusters[t] for t in tokens]
    except KeyError as exc:
        raise ValueError(f"unresolvable subset {exc.args[0]!r} in {expr!r}; "
                         f"known: {sorted(clusters)}") from None
    return union(*parts, name=expr)


@dataclass
class ClusterExperimentResult:
    rows: list[dict]
    cardinalities: dict[str, int]
    aggregate: dict[str, ScoreReport | None]
    selected: dict[str, dict[str, int]]

    def table(self) -> tuple[list[str], list[list]]:
        header = ["Training", "Validation", "n_train", "n_val", "beams only", "beams + images"]
        rows = []
        for r in self.rows:
            cells = [r["train"], r["val"], r["n_train"], r["n_val"]]
            for mode in ("beam_only", "concat"):
                rep = r["reports"].get(mode)
                cells.append(rep.score_5 if rep is not None else None)
            rows.append(cells)
        return header, rows

    def render_text(self) -> str:
        header, rows = self.table()
        out = render_text(header, rows)
        agg = [[m, rep.score_5 if rep else None, rep.total if rep else None]
               for m, rep in self.aggregate.items()]
        return out + "\ncardinality-weighted aggregate\n" + render_text(
            ["input", "Score_5", "TotalScore"], agg)

    def render_csv(self) -> str:
        header, rows = self.table()
        return render_csv(header, rows)

    def to_dict(self) -> dict:
        return {
            "rows": [{**{k: v for k, v in r.items() if k != "reports"},
                      "reports": {m: (rep.to_dict() if rep else None)
                                  for m, rep in r["reports"].items()}} for r in self.rows],
            "cardinalities": self.cardinalities,
            "aggregate": {m: (r.to_dict() if r else None) for m, r in self.aggregate.items()},
            "selected": self.selected,
        }


def run_cluster_experiment(train: Dataset, val: Dataset, plan: ExperimentPlan = DEFAULT_PLAN,
                           cfg: PipelineConfig = PipelineConfig(),
                           cluster_cfg: ClusterConfig = ClusterConfig(),
                           workers: int = 1) -> ClusterExperimentResult:
    """Train on each plan row's subset and score on its validation cluster.

    The aggregate per input mode takes, for every validation cluster, the row
    with the best Score_5 and weights the clusters by their cardinality.
    """
    check_disjoint({"train": train, "validation": val})
    ct = cluster_by_std(train, cluster_cfg)
    cv = cluster_by_std(val, cluster_cfg)
    named = {f"{c}_t": d for c, d in zip(SUBSET_NAMES, ct)}
    named.update({f"{c}_v": d for c, d in zip(SUBSET_NAMES, cv)})
    named["D_t"], named["D_v"] = train, val

    jobs, slots, rows = [], [], []
    for i, row in enumerate(plan.rows):
        tr = resolve_subset(row.train, named)
        va = resolve_subset(row.val, named)
        rows.append({"train": row.train, "val": row.val, "n_train": len(tr), "n_val": len(va),
                     "reports": {}})
        for mode in row.modes:
            rows[-1]["reports"][mode] = None
            if len(tr) == 0 or len(va) == 0:
                continue
            mcfg = replace(cfg, input_mode=mode, train=replace(cfg.train, seed=cfg.train.seed + i))
            jobs.append((tr, va, mcfg))
            slots.append((i, mode))
    for (i, mode), rep in zip(slots, _run_jobs(jobs, workers)):
        rows[i]["reports"][mode] = rep

    cards = {f"{c}_v": len(d) for c, d in zip(SUBSET_NAMES, cv)}
    aggregate, selected = {}, {}
    modes = sorted({m for r in plan.rows for m in r.modes}, key=lambda m: m != "beam_only")
    for mode in modes:
        best: dict[str, tuple[int, ScoreReport]] = {}
        for i, r in enumerate(rows):
            rep = r["reports"].get(mode)
            if rep is None or r["val"] not in cards:
                continue
            if r["val"] not in best or rep.score_5 > best[r["val"]][1].score_5:
                best[r["val"]] = (i, rep)
        selected[mode] = {v: i for v, (i, _) in best.items()}
        if best:
            keys = list(best)
            aggregate[mode] = weighted_report([best[k][1] for k in keys], [cards[k] for k in keys])
        else:
            aggregate[mode] = None
    return ClusterExperimentResult(rows, cards, aggregate, selected)


def memory_sweep_table(results: list[tuple[int, ScoreReport]]) -> tuple[list[str], list[list]]:
    header = ["Observation sequence", "Score_1", "Score_3", "Score_5", "TotalScore"]
    return header, [[f"tau = {t}", r.score_1, r.score_3, r.score_5, r.total] for t, r in results]
