"""Instance records, ViWi-style CSV ingest, leakage-free splits and std clustering."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)

FEATURE_SUFFIX = ".feat"


class ParseError(ValueError):
    def __init__(self, row: int, msg: str):
        super().__init__(f"row {row}: {msg}")
        self.row = row


class LeakageError(ValueError):
    def __init__(self, overlaps: dict[str, list[str]]):
        self.overlaps = overlaps
        parts = [f"{k}: {', '.join(v[:10])}{' ...' if len(v) > 10 else ''}"
                 for k, v in overlaps.items() if v]
        super().__init__("image leakage between splits; " + "; ".join(parts))

    @property
    def image_ids(self) -> list[str]:
        return sorted({i for v in self.overlaps.values() for i in v})


class IntegrityError(ValueError):
    pass


@dataclass(frozen=True)
class InstanceRecord:
    beams: tuple[int, ...]
    features: tuple[str, ...]
    labels: tuple[int, ...]
    user_id: str = ""
    t: int = 0

    def __post_init__(self):
        object.__setattr__(self, "beams", tuple(int(b) for b in self.beams))
        object.__setattr__(self, "labels", tuple(int(b) for b in self.labels))
        object.__setattr__(self, "features", tuple(str(f) for f in self.features))
        if len(self.beams) != len(self.features):
            raise ValueError("beams and features must have equal length tau")

    @property
    def tau(self) -> int:
        return len(self.beams)

    @property
    def m(self) -> int:
        return len(self.labels)


class Dataset:
    """Immutable column store of instance records plus their feature maps.

    ``images`` holds per-record integer codes into ``image_ids``; ``feature_maps``
    is aligned with ``image_ids`` or None when the features were not loaded.
    """

    def __init__(self, beams, images, labels, image_ids: Sequence[str],
                 feature_maps: np.ndarray | None = None, user_ids=None, times=None,
                 name: str = ""):
        self.beams = np.asarray(beams, dtype=np.int64)
        self.images = np.asarray(images, dtype=np.int64)
        self.labels = np.asarray(labels, dtype=np.int64)
        n = self.beams.shape[0]
        if self.beams.ndim != 2 or self.images.shape != self.beams.shape:
            raise ValueError("beams and images must both be (n, tau)")
        if self.labels.ndim != 2 or self.labels.shape[0] != n:
            raise ValueError("labels must be (n, m)")
        self.image_ids = tuple(image_ids)
        if self.images.size and (self.images.min() < 0 or self.images.max() >= len(self.image_ids)):
            raise IntegrityError("image reference does not resolve")
        if feature_maps is not None:
            feature_maps = np.asarray(feature_maps)
            if feature_maps.shape[0] != len(self.image_ids):
                raise IntegrityError("feature store does not match image ids")
        self.feature_maps = feature_maps
        self.user_ids = (np.asarray(user_ids, dtype=object) if user_ids is not None
                         else np.full(n, "", dtype=object))
        self.times = np.asarray(times if times is not None else np.zeros(n), dtype=np.int64)
        self.name = name
        for a in (self.beams, self.images, self.labels, self.user_ids, self.times):
            a.setflags(write=False)
        if self.feature_maps is not None:
            self.feature_maps.setflags(write=False)

    # -- shape ---------------------------------------------------------------
    def __len__(self) -> int:
        return self.beams.shape[0]

    @property
    def tau(self) -> int:
        return self.beams.shape[1]

    @property
    def m(self) -> int:
        return self.labels.shape[1]

    @property
    def feature_dims(self) -> tuple[int, ...] | None:
        return None if self.feature_maps is None else tuple(self.feature_maps.shape[1:])

    def __repr__(self) -> str:
        return (f"Dataset(name={self.name!r}, n={len(self)}, tau={self.tau}, m={self.m}, "
                f"images={len(self.image_ids)})")

    # -- access --------------------------------------------------------------
    def record(self, i: int) -> InstanceRecord:
        return InstanceRecord(
            self.beams[i], [self.image_ids[j] for j in self.images[i]], self.labels[i],
            str(self.user_ids[i]), int(self.times[i]),
        )

    def __getitem__(self, key):
        if isinstance(key, slice):
            return self.take(np.arange(len(self))[key])
        return self.record(int(key))

    def __iter__(self):
        return (self.record(i) for i in range(len(self)))

    @property
    def records(self) -> list[InstanceRecord]:
        return list(self)

    def image_set(self) -> set[str]:
        return {self.image_ids[j] for j in np.unique(self.images)}

    def feature_map(self, image_id: str) -> np.ndarray:
        if self.feature_maps is None:
            raise KeyError("dataset has no feature store loaded")
        return self.feature_maps[self.image_ids.index(image_id)]

    def take(self, rows, name: str | None = None) -> "Dataset":
        """Subset of rows; the image vocabulary is pruned to referenced images."""
        rows = np.asarray(rows, dtype=np.int64)
        images = self.images[rows]
        used, inverse = np.unique(images, return_inverse=True)
        return Dataset(
            self.beams[rows], inverse.reshape(images.shape), self.labels[rows],
            [self.image_ids[j] for j in used],
            None if self.feature_maps is None else self.feature_maps[used],
            self.user_ids[rows], self.times[rows],
            self.name if name is None else name,
        )

    def truncate(self, tau: int) -> "Dataset":
        """Keep only the most recent ``tau`` observed steps of every record."""
        if not 1 <= tau <= self.tau:
            raise ValueError(f"tau={tau} exceeds available history {self.tau}")
        sub = Dataset(self.beams[:, self.tau - tau:], self.images[:, self.tau - tau:], self.labels,
                      self.image_ids, self.feature_maps, self.user_ids, self.times, self.name)
        return sub.take(np.arange(len(sub)))

    def with_horizon(self, m: int) -> "Dataset":
        if not 1 <= m <= self.m:
            raise ValueError(f"horizon {m} exceeds available labels {self.m}")
        return Dataset(self.beams, self.images, self.labels[:, :m], self.image_ids,
                       self.feature_maps, self.user_ids, self.times, self.name)

    @classmethod
    def empty(cls, tau: int = 8, m: int = 5, name: str = "") -> "Dataset":
        z = np.zeros((0, tau), dtype=np.int64)
        return cls(z, z, np.zeros((0, m), dtype=np.int64), [], None, name=name)

    @classmethod
    def from_records(cls, records: Sequence[InstanceRecord],
                     feature_store: dict[str, np.ndarray] | None = None,
                     name: str = "", tau: int | None = None, m: int | None = None) -> "Dataset":
        if not records:
            return cls.empty(tau or 8, m or 5, name)
        vocab: dict[str, int] = {}
        images = [[vocab.setdefault(f, len(vocab)) for f in r.features] for r in records]
        ids = list(vocab)
        fmaps = None
        if feature_store is not None:
            missing = [i for i in ids if i not in feature_store]
            if missing:
                raise IntegrityError(f"unresolved feature references: {missing[:10]}")
            fmaps = np.stack([np.asarray(feature_store[i]) for i in ids])
        return cls([r.beams for r in records], images, [r.labels for r in records], ids, fmaps,
                   [r.user_id for r in records], [r.t for r in records], name)


# -- feature files ----------------------------------------------------------

def write_feature_file(path, tensor: np.ndarray) -> None:
    """One JSON header line (dims, dtype) followed by row-major little-endian float32."""
    t = np.ascontiguousarray(tensor, dtype="<f4")
    header = json.dumps({"dims": list(t.shape), "dtype": "float32"}).encode()
    Path(path).write_bytes(header + b"\n" + t.tobytes())


def read_feature_file(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".json":
        d = json.loads(path.read_text())
        return np.asarray(d["data"], dtype=np.float32).reshape(d["dims"])
    if path.suffix == ".npy":
        return np.load(path).astype(np.float32)
    raw = path.read_bytes()
    head, _, body = raw.partition(b"\n")
    meta = json.loads(head)
    return np.frombuffer(body, dtype="<f4").reshape(meta["dims"]).copy()


def _resolve_feature(feature_dir: Path, stem: str) -> Path | None:
    for suffix in (FEATURE_SUFFIX, ".json", ".npy"):
        p = feature_dir / f"{stem}{suffix}"
        if p.exists():
            return p
    return None


def write_feature_store(d: Dataset, feature_dir) -> None:
    if d.feature_maps is None:
        raise IntegrityError("dataset has no feature maps to write")
    feature_dir = Path(feature_dir)
    feature_dir.mkdir(parents=True, exist_ok=True)
    for image_id, fmap in zip(d.image_ids, d.feature_maps):
        write_feature_file(feature_dir / f"{image_id}{FEATURE_SUFFIX}", fmap)


# -- CSV --------------------------------------------------------------------

def csv_header(tau: int, m: int) -> list[str]:
    cols = []
    for k in range(1, tau + 1):
        cols += [f"beam_{k}", f"img_{k}"]
    return cols + [f"label_{k}" for k in range(1, m + 1)] + ["user_id", "t"]


def write_viwi_csv(d: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(csv_header(d.tau, d.m))
        for i in range(len(d)):
            row = []
            for b, j in zip(d.beams[i], d.images[i]):
                row += [int(b), d.image_ids[j]]
            w.writerow(row + [int(x) for x in d.labels[i]] + [d.user_ids[i], int(d.times[i])])


def ingest_viwi_csv(path, feature_dir=None, tau: int = 8, m: int = 5,
                    name: str | None = None) -> Dataset:
    """Parse a CSV of (beam, image) pairs followed by future labels.

    A header row, when present, fixes tau and m (``beam_*`` / ``label_*`` columns)
    and the optional ``user_id`` / ``t`` columns. Headerless rows must have exactly
    2*tau + m columns. Rows whose images cannot be found under ``feature_dir`` are
    logged and skipped; with ``feature_dir=None`` no features are loaded.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    has_meta = False
    start = 0
    if rows and rows[0][0].strip().lower().startswith("beam"):
        header = [c.strip().lower() for c in rows[0]]
        tau = sum(c.startswith("beam") for c in header)
        m = sum(c.startswith("label") for c in header)
        has_meta = "user_id" in header and "t" in header
        start = 1
    width = 2 * tau + m + (2 if has_meta else 0)

    beams, imgs, labels, users, times = [], [], [], [], []
    for lineno, row in enumerate(rows[start:], start=start + 1):
        if len(row) != width:
            raise ParseError(lineno, f"expected {width} columns (tau={tau}, m={m}), got {len(row)}")
        try:
            beams.append([int(float(row[2 * k])) for k in range(tau)])
            labels.append([int(float(x)) for x in row[2 * tau:2 * tau + m]])
        except ValueError as exc:
            raise ParseError(lineno, f"non-integer beam index ({exc})") from None
        imgs.append([row[2 * k + 1].strip() for k in range(tau)])
        users.append(row[2 * tau + m] if has_meta else str(lineno - start - 1))
        times.append(int(row[2 * tau + m + 1]) if has_meta else 0)

    vocab: dict[str, int] = {}
    codes = np.array([[vocab.setdefault(s, len(vocab)) for s in r] for r in imgs],
                     dtype=np.int64).reshape(len(imgs), tau)
    ids = list(vocab)
    fmaps = None
    keep = np.ones(len(imgs), dtype=bool)
    if feature_dir is not None:
        feature_dir = Path(feature_dir)
        loaded, missing = [], set()
        for j, stem in enumerate(ids):
            p = _resolve_feature(feature_dir, stem)
            if p is None:
                missing.add(j)
                loaded.append(None)
            else:
                loaded.append(read_feature_file(p))
        if missing:
            bad = np.isin(codes, list(missing)).any(axis=1)
            for i in np.flatnonzero(bad):
                logger.warning("row %d: unresolved image reference(s), skipped", i + start + 1)
            keep = ~bad
        shapes = {a.shape for a in loaded if a is not None}
        if len(shapes) > 1:
            raise IntegrityError(f"inconsistent feature map shapes: {sorted(shapes)}")
        dims = shapes.pop() if shapes else (1, 1, 1)
        fmaps = np.stack([a if a is not None else np.zeros(dims, np.float32) for a in loaded]) \
            if loaded else np.zeros((0, *dims), np.float32)
    d = Dataset(np.array(beams, dtype=np.int64).reshape(-1, tau), codes,
                np.array(labels, dtype=np.int64).reshape(-1, m), ids, fmaps,
                np.array(users, dtype=object), times, name or path.stem)
    return d if keep.all() else d.take(np.flatnonzero(keep))


# -- union / split ----------------------------------------------------------

def union(*datasets: Dataset, name: str = "") -> Dataset:
    """Concatenate records and merge feature stores (identical duplicates collapse)."""
    datasets = [d for d in datasets if d is not None]
    if not datasets:
        return Dataset.empty(name=name)
    nonempty = [d for d in datasets if len(d)] or datasets[:1]
    tau, m = nonempty[0].tau, nonempty[0].m
    for d in nonempty:
        if (d.tau, d.m) != (tau, m):
            raise IntegrityError(f"inconsistent tau/m: {(d.tau, d.m)} vs {(tau, m)}")
    has_features = all(d.feature_maps is not None for d in nonempty)
    vocab: dict[str, int] = {}
    fmaps: list[np.ndarray] = []
    codes = []
    for d in nonempty:
        remap = np.empty(len(d.image_ids), dtype=np.int64)
        for j, image_id in enumerate(d.image_ids):
            k = vocab.get(image_id)
            if k is None:
                k = vocab[image_id] = len(vocab)
                if has_features:
                    fmaps.append(d.feature_maps[j])
            elif has_features and not np.array_equal(fmaps[k], d.feature_maps[j]):
                raise IntegrityError(f"image {image_id!r} has conflicting feature tensors")
            remap[j] = k
        codes.append(remap[d.images])
    return Dataset(
        np.concatenate([d.beams for d in nonempty]), np.concatenate(codes),
        np.concatenate([d.labels for d in nonempty]), list(vocab),
        np.stack(fmaps) if has_features and fmaps else (
            np.zeros((0, *nonempty[0].feature_maps.shape[1:]), np.float32) if has_features else None),
        np.concatenate([d.user_ids for d in nonempty]),
        np.concatenate([d.times for d in nonempty]),
        name,
    )


class Split(NamedTuple):
    train: Dataset
    val1: Dataset
    val2: Dataset


VIWI_CUTS_TRAIN = (70251, 210787)
VIWI_CUTS_VAL = (30141, 90389)


def check_disjoint(named: dict[str, Dataset]) -> None:
    """Raise LeakageError if any two datasets share an image id."""
    sets = {k: v.image_set() for k, v in named.items()}
    keys = list(sets)
    overlaps = {}
    for i, a in enumerate(keys):
        for b in keys[i + 1:]:
            common = sets[a] & sets[b]
            if common:
                overlaps[f"{a}/{b}"] = sorted(common)
    if overlaps:
        raise LeakageError(overlaps)


def split_leakage_free(d_t: Dataset, d_v: Dataset, cut_t=VIWI_CUTS_TRAIN,
                       cut_v=VIWI_CUTS_VAL) -> Split:
    """train = d_t[a:b] + d_v[c:d]; val1 = the two heads; val2 = the two tails."""
    a, b = cut_t
    c, dd = cut_v
    if not 0 <= a < b <= len(d_t):
        raise IndexError(f"invalid train cuts {cut_t} for {len(d_t)} rows")
    if not 0 <= c < dd <= len(d_v):
        raise IndexError(f"invalid validation cuts {cut_v} for {len(d_v)} rows")
    out = Split(
        union(d_t[a:b], d_v[c:dd], name="D_t"),
        union(d_t[:a], d_v[:c], name="D_v1"),
        union(d_t[b:], d_v[dd:], name="D_v2"),
    )
    check_disjoint({"D_t": out.train, "D_v1": out.val1, "D_v2": out.val2})
    return out


def split_manifest(n_t: int, n_v: int, cut_t, cut_v) -> dict:
    """Row indices of each split output, per source dataset."""
    a, b = cut_t
    c, d = cut_v
    return {
        "D_t": {"train_source": list(range(a, b)), "val_source": list(range(c, d))},
        "D_v1": {"train_source": list(range(0, a)), "val_source": list(range(0, c))},
        "D_v2": {"train_source": list(range(b, n_t)), "val_source": list(range(d, n_v))},
    }


def safe_cut_points(d: Dataset) -> np.ndarray:
    """Row positions i (0..n) where d[:i] and d[i:] share no image."""
    n = len(d)
    if n == 0:
        return np.array([0])
    flat = d.images.ravel()
    rows = np.repeat(np.arange(n), d.tau)
    k = len(d.image_ids)
    first = np.full(k, n, dtype=np.int64)
    last = np.full(k, -1, dtype=np.int64)
    np.minimum.at(first, flat, rows)
    np.maximum.at(last, flat, rows)
    used = last >= 0
    first, last = first[used], last[used]
    # a cut at i is unsafe when some image has first < i <= last
    diff = np.zeros(n + 2, dtype=np.int64)
    np.add.at(diff, first + 1, 1)
    np.add.at(diff, last + 1, -1)
    unsafe = np.cumsum(diff)[: n + 1] > 0
    return np.flatnonzero(~unsafe)


def snap_cuts(d: Dataset, fractions=(0.25, 0.75)) -> tuple[int, int]:
    """Leak-free (a, b) cut positions closest to the given row fractions."""
    safe = safe_cut_points(d)
    out = []
    for f in fractions:
        target = f * len(d)
        out.append(int(safe[np.argmin(np.abs(safe - target))]))
    a, b = out
    if not a < b:
        raise ValueError(f"no distinct leak-free cuts near {fractions}; safe points: {safe.tolist()}")
    return a, b


# -- std clustering ---------------------------------------------------------

@dataclass(frozen=True)
class ClusterConfig:
    thresholds: tuple[float, float] = (0.0, 2.0)

    def __post_init__(self):
        t1, t2 = self.thresholds
        if t1 < 0 or t2 < 0 or not t1 < t2:
            raise ValueError("thresholds must satisfy 0 <= t1 < t2")


class Clusters(NamedTuple):
    A: Dataset
    B: Dataset
    C: Dataset


def beam_std(record: InstanceRecord | Sequence[int]) -> float:
    """Population std of the observed beam indices (labels excluded)."""
    beams = record.beams if isinstance(record, InstanceRecord) else record
    return float(np.std(np.asarray(beams, dtype=np.float64)))


def beam_stds(d: Dataset) -> np.ndarray:
    return np.std(d.beams.astype(np.float64), axis=1)


def cluster_labels(d: Dataset, cfg: ClusterConfig = ClusterConfig()) -> np.ndarray:
    """0/1/2 for std <= t1, t1 < std <= t2, std > t2."""
    t1, t2 = cfg.thresholds
    s = beam_stds(d)
    return np.where(s <= t1, 0, np.where(s <= t2, 1, 2))


def cluster_by_std(d: Dataset, cfg: ClusterConfig = ClusterConfig()) -> Clusters:
    lab = cluster_labels(d, cfg)
    base = d.name or "D"
    return Clusters(*(d.take(np.flatnonzero(lab == k), name=f"{base}.{c}")
                      for k, c in enumerate("ABC")))
