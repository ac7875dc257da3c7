"""Beamforming codebooks and beam-index embedding."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np


class CodebookKind(str, Enum):
    GAUSSIAN = "gaussian"
    ORTHOGONAL = "orthogonal"
    DFT = "dft"


@dataclass(frozen=True)
class CodebookConfig:
    num_beams: int = 128
    num_antennas: int = 128
    kind: CodebookKind = CodebookKind.GAUSSIAN
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", CodebookKind(self.kind))
        if self.num_beams < 1 or self.num_antennas < 1:
            raise ValueError("num_beams and num_antennas must be >= 1")
        if self.kind is CodebookKind.ORTHOGONAL and self.num_beams > 2 * self.num_antennas:
            raise ValueError(
                f"orthogonal codebook needs num_beams <= 2N "
                f"({self.num_beams} > {2 * self.num_antennas})"
            )
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be a 64-bit unsigned integer")

    @property
    def dim(self) -> int:
        return 2 * self.num_antennas

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        return d


@dataclass(frozen=True, eq=False)
class Codebook:
    """Q x 2N real matrix; row q holds [Re(f_q); Im(f_q)]."""

    vectors: np.ndarray
    config: CodebookConfig

    def __post_init__(self):
        v = np.array(self.vectors, dtype=np.float64)
        v.setflags(write=False)
        object.__setattr__(self, "vectors", v)
        if v.shape != (self.config.num_beams, self.config.dim):
            raise ValueError(f"codebook shape {v.shape} does not match config")

    @property
    def num_beams(self) -> int:
        return self.config.num_beams

    @property
    def dim(self) -> int:
        return self.config.dim

    def complex_vectors(self) -> np.ndarray:
        n = self.config.num_antennas
        return self.vectors[:, :n] + 1j * self.vectors[:, n:]

    def embed(self, indices) -> np.ndarray:
        idx = np.asarray(indices)
        if idx.size and (idx.min() < 0 or idx.max() >= self.num_beams):
            raise IndexError(f"beam index out of range [0, {self.num_beams})")
        return self.vectors[idx]

    def to_json(self) -> str:
        return json.dumps({"config": self.config.to_dict(), "vectors": self.vectors.tolist()})

    @classmethod
    def from_json(cls, text: str) -> "Codebook":
        d = json.loads(text)
        return cls(np.array(d["vectors"], dtype=np.float64), CodebookConfig(**d["config"]))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "Codebook":
        return cls.from_json(Path(path).read_text())


def _orthonormal_rows(g: np.ndarray) -> np.ndarray:
    # modified Gram-Schmidt over rows
    q = np.array(g, dtype=np.float64)
    for i in range(q.shape[0]):
        for j in range(i):
            q[i] -= (q[i] @ q[j]) * q[j]
        # second pass keeps orthogonality at 1e-15 level
        for j in range(i):
            q[i] -= (q[i] @ q[j]) * q[j]
        q[i] /= np.linalg.norm(q[i])
    return q


def steering_vector(sin_theta, num_antennas: int) -> np.ndarray:
    """Half-wavelength ULA response exp(j*pi*n*sin(theta)), n = 0..N-1 (unnormalized)."""
    n = np.arange(num_antennas)
    return np.exp(1j * np.pi * np.multiply.outer(np.asarray(sin_theta), n))


def generate_codebook(config: CodebookConfig) -> Codebook:
    rng = np.random.Generator(np.random.PCG64(config.seed))
    q, n = config.num_beams, config.num_antennas
    if config.kind is CodebookKind.GAUSSIAN:
        vectors = rng.standard_normal((q, 2 * n))
    elif config.kind is CodebookKind.ORTHOGONAL:
        vectors = _orthonormal_rows(rng.standard_normal((q, 2 * n)))
    else:
        # beams steered on a uniform sin(theta) grid, ordered by angle
        grid = -1.0 + (2.0 * np.arange(q) + 1.0) / q
        a = steering_vector(grid, n) / np.sqrt(n)
        vectors = np.concatenate([a.real, a.imag], axis=1)
    return Codebook(vectors, config)


def embed_beam(cb: Codebook, index: int) -> np.ndarray:
    if not 0 <= index < cb.num_beams:
        raise IndexError(f"beam index {index} out of range [0, {cb.num_beams})")
    return cb.vectors[index]
