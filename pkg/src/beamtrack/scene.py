"""Synthetic street scenes: moving users and blockers, a two-path channel, and
camera feature maps standing in for object-detector outputs."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING

import numpy as np

from .codebook import Codebook, CodebookConfig, CodebookKind, generate_codebook, steering_vector

if TYPE_CHECKING:
    from .dataset import Dataset

SPEED_OF_LIGHT = 299_792_458.0


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    street_length: float = 60.0
    num_users: int = 20
    num_blockers: int = 4
    user_speed_range: tuple[float, float] = (0.0, 1.5)
    blocker_speed_range: tuple[float, float] = (2.0, 6.0)
    bs_position: tuple[float, float] = (30.0, -8.0)
    num_cameras: int = 3
    timestep: float = 0.1
    duration: int = 25
    seed: int = 0
    feature_map_dims: tuple[int, int, int] = (13, 13, 8)
    # lanes are y-intervals; blockers drive between the BS and the users
    user_lane: tuple[float, float] = (6.0, 14.0)
    blocker_lane: tuple[float, float] = (1.0, 4.0)
    blocker_radius_range: tuple[float, float] = (1.0, 2.5)
    static_user_fraction: float = 0.3
    wall_y: float = 20.0
    carrier_hz: float = 28e9
    beta_blk: float = 0.1
    beta_ref: float = 0.3
    camera_fov_deg: float = 160.0
    camera_range: tuple[float, float] = (5.0, 45.0)
    blob_sigma: float = 0.8
    tau: int = 8
    horizon: int = 5
    label_codebook: CodebookConfig = field(
        default_factory=lambda: CodebookConfig(128, 128, CodebookKind.DFT, 0)
    )

    def __post_init__(self):
        if isinstance(self.label_codebook, dict):
            object.__setattr__(self, "label_codebook", CodebookConfig(**self.label_codebook))
        for name in ("user_speed_range", "blocker_speed_range", "bs_position", "feature_map_dims",
                     "user_lane", "blocker_lane", "blocker_radius_range", "camera_range"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        self.validate()

    def validate(self) -> None:
        if min(self.num_users, self.num_blockers, self.num_cameras) < 0:
            raise ConfigError("counts must be >= 0")
        if self.num_cameras < 1:
            raise ConfigError("need at least one camera")
        for lo, hi in (self.user_speed_range, self.blocker_speed_range):
            if lo < 0 or hi < lo:
                raise ConfigError("speed ranges must be non-negative intervals")
        if self.duration < self.tau + self.horizon:
            raise ConfigError(
                f"duration {self.duration} shorter than tau + m = {self.tau + self.horizon}"
            )
        if self.street_length <= 0 or self.timestep <= 0:
            raise ConfigError("street_length and timestep must be positive")
        if len(self.feature_map_dims) != 3 or min(self.feature_map_dims) < 1:
            raise ConfigError("feature_map_dims must be three positive ints")
        if not 0.0 <= self.static_user_fraction <= 1.0:
            raise ConfigError("static_user_fraction must lie in [0, 1]")

    @property
    def num_antennas(self) -> int:
        return self.label_codebook.num_antennas

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_hz

    def to_dict(self) -> dict:
        d = asdict(self)
        d["label_codebook"] = self.label_codebook.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        return cls(**d)


@dataclass(frozen=True, eq=False)
class ScenarioTrace:
    config: SceneConfig
    user_pos: np.ndarray  # (T, U, 2)
    blocker_pos: np.ndarray  # (T, B, 2)
    blocker_radius: np.ndarray  # (B,)
    blocker_class: np.ndarray  # (B,) feature-map channel of each blocker
    los: np.ndarray  # (T, U) bool
    beams: np.ndarray  # (T, U) optimal beam index w.r.t. the label codebook

    @property
    def duration(self) -> int:
        return self.user_pos.shape[0]

    @property
    def num_users(self) -> int:
        return self.user_pos.shape[1]

    def to_json(self) -> str:
        return json.dumps({
            "config": self.config.to_dict(),
            "user_pos": self.user_pos.tolist(),
            "blocker_pos": self.blocker_pos.tolist(),
            "blocker_radius": self.blocker_radius.tolist(),
            "blocker_class": self.blocker_class.tolist(),
            "los": self.los.astype(int).tolist(),
            "beams": self.beams.tolist(),
        })

    @classmethod
    def from_json(cls, text: str) -> "ScenarioTrace":
        d = json.loads(text)
        u = np.array(d["user_pos"], dtype=np.float64)
        b = np.array(d["blocker_pos"], dtype=np.float64).reshape(u.shape[0], -1, 2)
        return cls(
            SceneConfig.from_dict(d["config"]), u, b,
            np.array(d["blocker_radius"], dtype=np.float64),
            np.array(d["blocker_class"], dtype=np.int64),
            np.array(d["los"], dtype=bool).reshape(u.shape[:2]),
            np.array(d["beams"], dtype=np.int64).reshape(u.shape[:2]),
        )


def _bounce(x0, v, t, lo, hi):
    """Positions of points moving at velocity v reflecting off [lo, hi]."""
    span = hi - lo
    if span <= 0:
        return np.full(np.broadcast(x0, t).shape, lo, dtype=np.float64)
    s = np.mod(x0 - lo + v * t, 2 * span)
    return lo + np.where(s > span, 2 * span - s, s)


def _segment_hits_disc(p0, p1, centers, radii):
    """Whether segment p0->p1 passes within radius of any center.

    p0: (2,), p1: (..., 2), centers: (..., B, 2), radii: (B,). Returns (...) bool.
    """
    d = p1 - p0
    dd = np.maximum(np.sum(d * d, axis=-1), 1e-300)
    rel = centers - p0
    s = np.clip(np.sum(rel * d[..., None, :], axis=-1) / dd[..., None], 0.0, 1.0)
    closest = p0 + s[..., None] * d[..., None, :]
    dist2 = np.sum((centers - closest) ** 2, axis=-1)
    return np.any(dist2 < radii**2, axis=-1)


def simulate_scene(cfg: SceneConfig, label_codebook: Codebook | None = None) -> ScenarioTrace:
    cfg.validate()
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    T, U, B = cfg.duration, cfg.num_users, cfg.num_blockers
    t = np.arange(T, dtype=np.float64)[:, None] * cfg.timestep
    L = cfg.street_length

    ux0 = rng.uniform(0.0, L, U)
    uy = rng.uniform(*cfg.user_lane, U)
    uspeed = rng.uniform(*cfg.user_speed_range, U)
    uspeed[rng.random(U) < cfg.static_user_fraction] = 0.0
    udir = rng.choice([-1.0, 1.0], U)
    bx0 = rng.uniform(0.0, L, B)
    by = rng.uniform(*cfg.blocker_lane, B)
    bspeed = rng.uniform(*cfg.blocker_speed_range, B)
    bdir = rng.choice([-1.0, 1.0], B)
    bradius = rng.uniform(*cfg.blocker_radius_range, B)
    C = cfg.feature_map_dims[2]
    bclass = 1 + rng.integers(0, max(C - 1, 1), B) if C > 1 else np.zeros(B, dtype=np.int64)

    user_pos = np.stack(np.broadcast_arrays(_bounce(ux0, udir * uspeed, t, 0.0, L), uy), axis=-1)
    blocker_pos = np.stack(
        np.broadcast_arrays(_bounce(bx0, bdir * bspeed, t, 0.0, L), by), axis=-1
    ).reshape(T, B, 2)

    bs = np.asarray(cfg.bs_position, dtype=np.float64)
    if B:
        los = ~_segment_hits_disc(bs, user_pos, blocker_pos[:, None, :, :], bradius)
    else:
        los = np.ones((T, U), dtype=bool)

    trace = ScenarioTrace(cfg, user_pos, blocker_pos, bradius, bclass.astype(np.int64), los,
                          np.zeros((T, U), dtype=np.int64))
    cb = label_codebook or generate_codebook(cfg.label_codebook)
    beams = optimal_beams(_channels(trace, cfg.beta_blk, cfg.beta_ref), cb)
    return ScenarioTrace(cfg, user_pos, blocker_pos, bradius, trace.blocker_class, los, beams)


def _path_geometry(cfg: SceneConfig, pos: np.ndarray):
    """sin(angle) and length of the direct and wall-reflected paths for positions (..., 2)."""
    bs = np.asarray(cfg.bs_position, dtype=np.float64)
    d = pos - bs
    d_los = np.hypot(d[..., 0], d[..., 1])
    mirror = np.stack([pos[..., 0], 2 * cfg.wall_y - pos[..., 1]], axis=-1) - bs
    d_ref = np.hypot(mirror[..., 0], mirror[..., 1])
    return d[..., 0] / d_los, d_los, mirror[..., 0] / d_ref, d_ref


def _channels(trace: ScenarioTrace, beta_blk: float, beta_ref: float) -> np.ndarray:
    cfg = trace.config
    n = cfg.num_antennas
    k = 2 * np.pi / cfg.wavelength
    sin_los, d_los, sin_ref, d_ref = _path_geometry(cfg, trace.user_pos)
    g_los = np.where(trace.los, 1.0, beta_blk) * np.exp(-1j * k * d_los)
    g_ref = beta_ref * np.exp(-1j * k * d_ref)
    return (g_los[..., None] * steering_vector(sin_los, n)
            + g_ref[..., None] * steering_vector(sin_ref, n))


def channel_response(trace: ScenarioTrace, t: int, user: int,
                     beta_blk: float | None = None, beta_ref: float | None = None) -> np.ndarray:
    """Channel of `user` at step `t` as 2N reals [Re(h); Im(h)]."""
    if not 0 <= t < trace.duration:
        raise IndexError(f"step {t} outside trace of length {trace.duration}")
    if not 0 <= user < trace.num_users:
        raise IndexError(f"user {user} out of range")
    cfg = trace.config
    b_blk = cfg.beta_blk if beta_blk is None else beta_blk
    b_ref = cfg.beta_ref if beta_ref is None else beta_ref
    sub = ScenarioTrace(cfg, trace.user_pos[t:t + 1, user:user + 1], trace.blocker_pos[t:t + 1],
                        trace.blocker_radius, trace.blocker_class,
                        trace.los[t:t + 1, user:user + 1], trace.beams[t:t + 1, user:user + 1])
    h = _channels(sub, b_blk, b_ref)[0, 0]
    return np.concatenate([h.real, h.imag])


def _as_complex(h: np.ndarray) -> np.ndarray:
    if np.iscomplexobj(h):
        return h
    n = h.shape[-1] // 2
    return h[..., :n] + 1j * h[..., n:]


def beam_gains(h, cb: Codebook) -> np.ndarray:
    """|<f_q, h>|^2 for every beam; h may be complex (..., N) or real (..., 2N)."""
    hc = _as_complex(np.asarray(h))
    if hc.shape[-1] != cb.config.num_antennas:
        raise ValueError("channel dimension does not match codebook")
    return np.abs(hc @ cb.complex_vectors().conj().T) ** 2


def optimal_beam(h, cb: Codebook) -> int:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return int(np.argmax(beam_gains(h, cb)))


def optimal_beams(h, cb: Codebook) -> np.ndarray:
    return np.argmax(beam_gains(h, cb), axis=-1).astype(np.int64)


def _camera_edges(cfg: SceneConfig) -> np.ndarray:
    half = np.deg2rad(cfg.camera_fov_deg) / 2
    return np.linspace(-half, half, cfg.num_cameras + 1)


def _polar(cfg: SceneConfig, pos: np.ndarray):
    bs = np.asarray(cfg.bs_position, dtype=np.float64)
    d = pos - bs
    return np.arctan2(d[..., 0], d[..., 1]), np.hypot(d[..., 0], d[..., 1])


def camera_of(cfg: SceneConfig, pos: np.ndarray) -> np.ndarray:
    """Lowest-index camera whose angular field of view contains each position.

    Positions outside every field of view fall back to the angularly nearest camera.
    """
    ang, _ = _polar(cfg, pos)
    edges = _camera_edges(cfg)
    inside = (ang[..., None] >= edges[:-1]) & (ang[..., None] <= edges[1:])
    centers = (edges[:-1] + edges[1:]) / 2
    nearest = np.argmin(np.abs(ang[..., None] - centers), axis=-1)
    return np.where(inside.any(axis=-1), np.argmax(inside, axis=-1), nearest)


def _blob_objects(cfg: SceneConfig, camera: int, positions, classes):
    """Grid coordinates (row, col, channel) of objects inside the camera's view."""
    H, W, C = cfg.feature_map_dims
    edges = _camera_edges(cfg)
    lo, hi = edges[camera], edges[camera + 1]
    r_min, r_max = cfg.camera_range
    ang, rng_ = _polar(cfg, np.asarray(positions, dtype=np.float64).reshape(-1, 2))
    out = []
    for a, r, c in zip(ang, rng_, np.asarray(classes).reshape(-1)):
        if lo <= a <= hi and r_min <= r <= r_max:
            col = (a - lo) / (hi - lo) * W - 0.5
            row = (r - r_min) / (r_max - r_min) * H - 0.5
            out.append((row, col, int(c) % C))
    return out


def render_objects(cfg: SceneConfig, camera: int, positions, classes) -> np.ndarray:
    """Additive Gaussian blobs (peak 1, truncated at 3 sigma) clipped to [0, 1]."""
    H, W, C = cfg.feature_map_dims
    fmap = np.zeros((H, W, C), dtype=np.float64)
    rows = np.arange(H, dtype=np.float64)[:, None]
    cols = np.arange(W, dtype=np.float64)[None, :]
    s = cfg.blob_sigma
    for row, col, ch in _blob_objects(cfg, camera, positions, classes):
        d2 = (rows - row) ** 2 + (cols - col) ** 2
        blob = np.exp(-d2 / (2 * s * s))
        blob[d2 > (3 * s) ** 2] = 0.0
        fmap[:, :, ch] += blob
    return np.clip(fmap, 0.0, 1.0)


def render_feature_map(trace: ScenarioTrace, t: int, camera: int) -> np.ndarray:
    cfg = trace.config
    if not 0 <= camera < cfg.num_cameras:
        raise IndexError(f"camera {camera} out of range")
    positions = np.concatenate([trace.user_pos[t], trace.blocker_pos[t]], axis=0)
    classes = np.concatenate([np.zeros(trace.num_users, dtype=np.int64), trace.blocker_class])
    return render_objects(cfg, camera, positions, classes)


def generate_instances(trace: ScenarioTrace, cb: Codebook | None = None, tau: int | None = None,
                       m: int | None = None, prefix: str = "") -> "Dataset":
    """Stride-1 windows per user: tau observed (beam, image) pairs, then m labels.

    Beam indices are taken w.r.t. ``cb`` (default: the trace's own label codebook).
    Image ids are ``{prefix}c{camera}_t{step}``; one image is shared by every
    user the camera sees at that step.
    """
    from .dataset import Dataset

    cfg = trace.config
    tau = cfg.tau if tau is None else tau
    m = cfg.horizon if m is None else m
    T, U = trace.duration, trace.num_users
    if T < tau + m:
        raise ConfigError(f"trace of {T} steps cannot hold tau + m = {tau + m}")
    if cb is None or (cb.config == cfg.label_codebook):
        beams = trace.beams
    else:
        beams = optimal_beams(_channels(trace, cfg.beta_blk, cfg.beta_ref), cb)

    cams = camera_of(cfg, trace.user_pos)  # (T, U)
    n_win = T - tau - m + 1
    needed = sorted({(int(c), t) for t in range(n_win + tau - 1) for c in cams[t]})
    code = {key: j for j, key in enumerate(needed)}
    image_ids = [f"{prefix}c{c}_t{t}" for c, t in needed]
    fmaps = np.stack([render_feature_map(trace, t, c) for c, t in needed]).astype(np.float32)

    rows_b, rows_i, rows_l, users, times = [], [], [], [], []
    for u in range(U):
        for s in range(n_win):
            obs = range(s, s + tau)
            rows_b.append(beams[s:s + tau, u])
            rows_i.append([code[(int(cams[k, u]), k)] for k in obs])
            rows_l.append(beams[s + tau:s + tau + m, u])
            users.append(f"{prefix}u{u}")
            times.append(s + tau - 1)
    return Dataset(np.array(rows_b).reshape(-1, tau), np.array(rows_i).reshape(-1, tau),
                   np.array(rows_l).reshape(-1, m), image_ids, fmaps,
                   np.array(users, dtype=object), times, name=prefix.rstrip("_"))


def episode_config(cfg: SceneConfig, episode: int) -> SceneConfig:
    from dataclasses import replace

    seq = np.random.SeedSequence([cfg.seed, episode])
    return replace(cfg, seed=int(seq.generate_state(1, dtype=np.uint64)[0]))


def simulate_dataset(cfg: SceneConfig, episodes: int = 1, first_episode: int = 0,
                     name: str = "sim") -> "Dataset":
    """Concatenate independent episodes; records are ordered by episode, so every
    episode boundary is a leak-free cut point."""
    from .dataset import union

    parts = []
    for e in range(first_episode, first_episode + episodes):
        trace = simulate_scene(episode_config(cfg, e))
        parts.append(generate_instances(trace, prefix=f"e{e}_"))
    return union(*parts, name=name)
