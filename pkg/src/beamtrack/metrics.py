"""Beam prediction scores: score_m, TotalScore and cluster-weighted aggregation."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class ScoringConfig:
    sigma: float = 5.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")


def score_m(preds, truths, m: int, cfg: ScoringConfig = ScoringConfig()) -> float:
    """Mean over instances of exp(-sum_k |pred_k - truth_k| / (m * sigma)), first m steps."""
    p = np.asarray(preds)
    t = np.asarray(truths)
    if p.ndim != 2 or t.ndim != 2 or p.shape[0] != t.shape[0]:
        raise ContractError(f"preds {p.shape} and truths {t.shape} must be (n, >=m) with equal n")
    if m < 1 or p.shape[1] < m or t.shape[1] < m:
        raise ContractError(f"need at least m={m} steps, got preds {p.shape}, truths {t.shape}")
    if p.shape[0] == 0:
        raise ContractError("no instances to score")
    err = np.abs(p[:, :m].astype(np.float64) - t[:, :m].astype(np.float64)).sum(axis=1)
    return float(np.mean(np.exp(-err / (m * cfg.sigma))))


def total_score(s1: float, s3: float, s5: float) -> float:
    return (s1 + 3.0 * s3 + 5.0 * s5) / 9.0


def weighted_cluster_score(scores, cardinalities) -> float:
    s = np.asarray(scores, dtype=np.float64)
    n = np.asarray(cardinalities, dtype=np.float64)
    if s.shape != n.shape:
        raise ContractError("scores and cardinalities must have equal length")
    if n.sum() <= 0:
        raise ContractError("total cardinality must be positive")
    return float(np.dot(s, n / n.sum()))


@dataclass(frozen=True)
class ScoreReport:
    score_1: float
    score_3: float
    score_5: float
    total: float
    sigma: float
    n_instances: int

    def __post_init__(self):
        if abs(self.total - total_score(self.score_1, self.score_3, self.score_5)) > 1e-12:
            raise ContractError("total does not match (s1 + 3 s3 + 5 s5) / 9")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ScoreReport":
        return cls(**d)


def score_report(preds, truths, cfg: ScoringConfig = ScoringConfig()) -> ScoreReport:
    s1, s3, s5 = (score_m(preds, truths, m, cfg) for m in (1, 3, 5))
    return ScoreReport(s1, s3, s5, total_score(s1, s3, s5), cfg.sigma, int(np.shape(preds)[0]))


def weighted_report(reports: list[ScoreReport], cardinalities) -> ScoreReport:
    """Cardinality-weighted combination of per-cluster reports."""
    s1, s3, s5 = (weighted_cluster_score([getattr(r, f) for r in reports], cardinalities)
                  for f in ("score_1", "score_3", "score_5"))
    sig = {r.sigma for r in reports}
    if len(sig) != 1:
        raise ContractError("reports use different sigma values")
    return ScoreReport(s1, s3, s5, total_score(s1, s3, s5), sig.pop(), int(np.sum(cardinalities)))


# -- tables -----------------------------------------------------------------

def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return "-"
    if isinstance(v, float):
        return f"{v:.3f}"
    return str(v)


def render_text(header: list[str], rows: list[list]) -> str:
    cells = [header] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    line = lambda r: " | ".join(c.ljust(w) for c, w in zip(r, widths))  # noqa: E731
    sep = "-+-".join("-" * w for w in widths)
    return "\n".join([line(cells[0]), sep] + [line(r) for r in cells[1:]]) + "\n"


def render_csv(header: list[str], rows: list[list]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in r])
    return buf.getvalue()


REPORT_HEADER = ["model", "Score_1", "Score_3", "Score_5", "TotalScore"]


def report_rows(named: dict[str, ScoreReport]) -> list[list]:
    return [[k, r.score_1, r.score_3, r.score_5, r.total] for k, r in named.items()]
