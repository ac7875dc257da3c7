"""Beam-only baselines: last-step repetition, linear regression, statistical draw."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .dataset import Dataset, InstanceRecord
from .metrics import ContractError


def _beams(record) -> np.ndarray:
    if isinstance(record, InstanceRecord):
        return np.asarray(record.beams, dtype=np.int64)
    return np.asarray(record, dtype=np.int64)


def last_step_predict(record, m: int) -> np.ndarray:
    return np.full(m, _beams(record)[-1], dtype=np.int64)


def round_half_away(x):
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def linreg_predict(record, m: int, num_beams: int) -> np.ndarray:
    """Least-squares line through (k, beam_k), extrapolated to the next m steps."""
    return linreg_predict_batch(_beams(record)[None, :], m, num_beams)[0]


def last_step_predict_batch(beams: np.ndarray, m: int) -> np.ndarray:
    return np.repeat(np.asarray(beams)[:, -1:], m, axis=1).astype(np.int64)


def linreg_predict_batch(beams: np.ndarray, m: int, num_beams: int) -> np.ndarray:
    """Vectorised least-squares extrapolation.

    Beam indices are integers, so the fitted values are exact rationals; they are
    computed in integer arithmetic (time axis doubled to keep the centre integral)
    so that half-way ties always round away from zero.
    """
    y = np.asarray(beams, dtype=np.int64)
    if y.ndim != 2 or y.shape[1] < 2:
        raise ContractError("linear regression needs at least two observations")
    tau = y.shape[1]
    kc2 = 2 * np.arange(tau, dtype=np.int64) - (tau - 1)
    sxx2 = int(kc2 @ kc2)
    sxy2 = y @ kc2
    f2 = 2 * np.arange(tau, tau + m, dtype=np.int64) - (tau - 1)
    num = y.sum(axis=1)[:, None] * sxx2 + tau * sxy2[:, None] * f2[None, :]
    den = tau * sxx2
    rounded = np.sign(num) * ((2 * np.abs(num) + den) // (2 * den))
    return np.clip(rounded, 0, num_beams - 1).astype(np.int64)


@dataclass(frozen=True)
class BeamDistribution:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise ContractError("probs must be a non-negative vector summing to 1")
        object.__setattr__(self, "probs", p)


def fit_beam_distribution(d: Dataset, num_beams: int | None = None) -> BeamDistribution:
    """Empirical frequency of each index over all observed columns."""
    if len(d) == 0:
        raise ContractError("cannot fit a beam distribution on an empty dataset")
    q = num_beams if num_beams is not None else int(d.beams.max()) + 1
    counts = np.bincount(d.beams.ravel(), minlength=q).astype(np.float64)
    return BeamDistribution(counts / counts.sum())


def statistical_predict(dist: BeamDistribution, m: int, seed) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.choice(len(dist.probs), size=m, p=dist.probs).astype(np.int64)


def statistical_predict_batch(dist: BeamDistribution, n: int, m: int, seed) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.choice(len(dist.probs), size=(n, m), p=dist.probs).astype(np.int64)


def write_predictions_csv(path, preds: np.ndarray, ids=None) -> None:
    preds = np.asarray(preds)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["instance"] + [f"pred_{k + 1}" for k in range(preds.shape[1])])
        for i, row in enumerate(preds):
            w.writerow([ids[i] if ids is not None else i] + [int(x) for x in row])


def read_predictions_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[int(x) for x in r[1:]] for r in rows], dtype=np.int64)
