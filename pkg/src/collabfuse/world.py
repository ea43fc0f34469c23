"""Synthetic multi-agent hazard world.

A kinematic latent ``y = [ego pos(2), ego vel(2), hazard pos(2), hazard vel(2)]``
follows a stationary AR(1) drift around a cruising mean.  Every agent senses the same latent through
two channels: ``"R"`` sees the position block through a frozen random
projection followed by tanh, ``"L"`` sees the velocity block through a frozen
linear projection.  Neither channel alone determines the hazard label, so the
ego needs both (its own or a collaborator's) to decide.

Each observation is independently corrupted with probability ``p``.  The
corruption kind is kept on the :class:`Observation` for evaluation but is
never part of the array handed to a model (see :func:`stack_frames`).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np

CORRUPTION_KINDS = ("gaussian", "blur", "blackout", "drop")


@dataclass
class ScenarioConfig:
    n_collaborators: int = 3
    global_modalities: tuple[str, ...] = ("R", "L")
    # per agent (ego first); None means every agent carries every modality
    modality_sets: tuple[tuple[str, ...], ...] | None = None
    corruption_prob: float = 0.3
    corruption_kinds: dict[str, tuple[str, ...]] = field(
        default_factory=lambda: {"R": ("gaussian", "blur", "blackout"), "L": ("drop", "blackout")}
    )
    noise_scales: dict[str, float] = field(default_factory=lambda: {"gaussian": 2.0})
    # "pair": i.i.d. per (frame, agent, modality); "frame": one draw per frame
    corruption_level: str = "pair"
    sigma_base: float = 0.05
    comm_range: float = 10.0
    latent_dim: int = 8
    obs_dims: dict[str, int] = field(default_factory=lambda: {"R": 12, "L": 12})
    frames_per_episode: int = 100
    latent_scale: float = 0.6
    # ego cruising forward toward a hazard ahead; the closing displacement stays zero-mean
    latent_mean: tuple[float, ...] = (0.0, 0.0, 1.5, 0.0, 1.5, 0.0, 0.0, 0.0)
    latent_persistence: float = 0.9
    arena_half_width: float = 10.0
    position_step: float = 1.0
    horizon: float = 1.0
    hazard_radius: float = 1.0
    seed: int = 0

    def __post_init__(self):
        self.global_modalities = tuple(self.global_modalities)
        self.latent_mean = tuple(float(v) for v in self.latent_mean)
        if self.modality_sets is not None:
            self.modality_sets = tuple(tuple(s) for s in self.modality_sets)
        self.corruption_kinds = {m: tuple(k) for m, k in self.corruption_kinds.items()}
        self.validate()

    @property
    def n_agents(self) -> int:
        return self.n_collaborators + 1

    def agent_modalities(self, agent: int) -> tuple[str, ...]:
        if self.modality_sets is None:
            return self.global_modalities
        return self.modality_sets[agent]

    def validate(self) -> None:
        if self.n_collaborators < 0:
            raise ValueError("n_collaborators must be >= 0")
        if not 0.0 <= self.corruption_prob <= 1.0:
            raise ValueError(f"corruption_prob {self.corruption_prob} outside [0, 1]")
        if self.comm_range < 0:
            raise ValueError("comm_range must be non-negative")
        if self.latent_dim != 8 or len(self.latent_mean) != 8:
            raise ValueError("latent_dim must be 8 (ego pos/vel, hazard pos/vel)")
        if self.corruption_level not in ("pair", "frame"):
            raise ValueError(f"corruption_level must be 'pair' or 'frame', got {self.corruption_level!r}")
        mods = set(self.global_modalities)
        if not mods <= {"R", "L"}:
            raise ValueError(f"unknown modalities {sorted(mods - {'R', 'L'})}")
        for m in self.global_modalities:
            if m not in self.obs_dims:
                raise ValueError(f"missing obs_dims entry for modality {m!r}")
            for kind in self.corruption_kinds.get(m, ()):
                if kind not in CORRUPTION_KINDS:
                    raise ValueError(f"unknown corruption kind {kind!r}")
        if self.modality_sets is not None:
            if len(self.modality_sets) != self.n_agents:
                raise ValueError(
                    f"modality_sets has {len(self.modality_sets)} entries, expected {self.n_agents}"
                )
            if not self.modality_sets[0]:
                raise ValueError("ego must carry at least one modality")
            for i, s in enumerate(self.modality_sets):
                if not set(s) <= mods:
                    raise ValueError(f"agent {i} carries modalities outside the global set: {s}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["global_modalities"] = list(self.global_modalities)
        if self.modality_sets is not None:
            d["modality_sets"] = [list(s) for s in self.modality_sets]
        d["corruption_kinds"] = {m: list(k) for m, k in self.corruption_kinds.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown scenario keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class WorldState:
    y: np.ndarray
    positions: np.ndarray  # (n_agents, 2), ego first
    frame: int


@dataclass
class Observation:
    agent: int
    modality: str
    x: np.ndarray
    corruption_applied: str | None = None


@dataclass
class Frame:
    index: int
    observations: list[Observation]
    label: int
    neighbor_set: tuple[int, ...]

    def observation(self, agent: int, modality: str) -> Observation | None:
        for obs in self.observations:
            if obs.agent == agent and obs.modality == modality:
                return obs
        return None


class ChannelMaps:
    """Frozen per-modality observation maps ``f_m``, drawn from the scenario seed."""

    SUBSPACE = {"R": np.array([0, 1, 4, 5]), "L": np.array([2, 3, 6, 7])}

    def __init__(self, config: ScenarioConfig):
        rng = np.random.default_rng([config.seed, 0xC0FFEE])
        self.projections = {}
        for m in ("R", "L"):
            k = len(self.SUBSPACE[m])
            self.projections[m] = rng.normal(0.0, 1.0 / np.sqrt(k), size=(config.obs_dims.get(m, 12), k))

    def __call__(self, y: np.ndarray, modality: str) -> np.ndarray:
        z = self.projections[modality] @ y[self.SUBSPACE[modality]]
        return np.tanh(z) if modality == "R" else z


def hazard_label(y: np.ndarray, horizon: float = 1.0, radius: float = 1.0) -> int:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (8,):
        raise ValueError(f"latent must have 8 entries, got shape {y.shape}")
    ego = y[0:2] + horizon * y[2:4]
    hazard = y[4:6] + horizon * y[6:8]
    return int(np.linalg.norm(ego - hazard) < radius)


def _blur(x: np.ndarray) -> np.ndarray:
    # window-3 moving average, edge windows shrink to what exists
    padded = np.concatenate([[0.0], x, [0.0]])
    counts = np.convolve(np.ones_like(x), np.ones(3), mode="full")[1:-1]
    return np.convolve(padded, np.ones(3), mode="valid") / counts


def apply_corruption(x: np.ndarray, kind: str, rng: np.random.Generator, sigma: float = 1.0) -> np.ndarray:
    if kind == "gaussian":
        return x + rng.normal(0.0, sigma, size=x.shape)
    if kind == "blur":
        return _blur(x)
    if kind == "blackout":
        return np.zeros_like(x)
    if kind == "drop":
        out = x.copy()
        idx = rng.choice(x.size, size=x.size // 2, replace=False)
        out[idx] = 0.0
        return out
    raise ValueError(f"unknown corruption kind {kind!r}")


def inject_corruption(obs: Observation, rng: np.random.Generator, config: ScenarioConfig,
                      force: bool | None = None) -> Observation:
    """Corrupt ``obs`` with probability ``p`` (or unconditionally if ``force``)."""
    if obs.corruption_applied is not None:
        raise ValueError("observation is already corrupted")
    hit = rng.random() < config.corruption_prob if force is None else force
    kinds = config.corruption_kinds.get(obs.modality, ())
    if not hit or not kinds:
        return obs
    kind = kinds[rng.integers(len(kinds))]
    x = apply_corruption(obs.x, kind, rng, config.noise_scales.get(kind, 1.0))
    return Observation(obs.agent, obs.modality, x, kind)


def observe(y: np.ndarray, agent: int, modality: str, rng: np.random.Generator,
            config: ScenarioConfig, maps: ChannelMaps, corrupt: bool | None = None) -> Observation:
    """Clean channel response plus baseline noise, then possible corruption.

    ``corrupt=None`` draws the corruption event with probability ``p``;
    ``True``/``False`` force it (used for frame-level corruption).
    """
    if modality not in config.agent_modalities(agent):
        raise ValueError(f"agent {agent} does not carry modality {modality!r}")
    x = maps(y, modality)
    if config.sigma_base > 0:
        x = x + rng.normal(0.0, config.sigma_base, size=x.shape)
    return inject_corruption(Observation(agent, modality, x), rng, config, force=corrupt)


def neighbors_in_range(positions: np.ndarray, comm_range: float) -> tuple[int, ...]:
    d = np.linalg.norm(positions[1:] - positions[0], axis=1)
    return tuple(int(i) + 1 for i in np.flatnonzero(d < comm_range))


def generate_episode(config: ScenarioConfig, seed: int, maps: ChannelMaps | None = None) -> list[Frame]:
    maps = maps or ChannelMaps(config)
    rng = np.random.default_rng([config.seed, seed])
    phi = config.latent_persistence
    scale = config.latent_scale
    mu = np.asarray(config.latent_mean)
    y = mu + rng.normal(0.0, scale, size=8)
    half = config.arena_half_width
    offsets = rng.uniform(-half, half, size=(config.n_collaborators, 2))
    ego_pos = np.zeros(2)

    frames = []
    for t in range(config.frames_per_episode):
        positions = np.vstack([ego_pos, ego_pos + offsets])
        state = WorldState(y.copy(), positions, t)
        frame_hit = None
        if config.corruption_level == "frame":
            frame_hit = bool(rng.random() < config.corruption_prob)
        observations = [
            observe(state.y, i, m, rng, config, maps, corrupt=frame_hit)
            for i in range(config.n_agents)
            for m in config.agent_modalities(i)
        ]
        label = hazard_label(state.y, config.horizon, config.hazard_radius)
        frames.append(Frame(t, observations, label, neighbors_in_range(positions, config.comm_range)))

        y = mu + phi * (y - mu) + np.sqrt(1.0 - phi * phi) * scale * rng.normal(size=8)
        offsets = offsets + rng.normal(0.0, config.position_step, size=offsets.shape)
        # reflect at the arena walls
        offsets = np.where(offsets > half, 2 * half - offsets, offsets)
        offsets = np.where(offsets < -half, -2 * half - offsets, offsets)
        ego_pos = ego_pos + rng.normal(0.0, config.position_step, size=2)
    return frames


def generate_frames(config: ScenarioConfig, n_frames: int, seed: int) -> list[Frame]:
    """Concatenate episodes (seeds ``seed, seed+1, ...``) until ``n_frames``."""
    maps = ChannelMaps(config)
    out: list[Frame] = []
    k = 0
    while len(out) < n_frames:
        out.extend(generate_episode(config, seed + k, maps))
        k += 1
    return out[:n_frames]


@dataclass
class FrameArrays:
    """Model-visible stacking of frames; absent observations are zero rows.

    ``avail[b, i, k]`` is 1 when agent ``i`` carries modality ``k`` and is the
    ego or in range.  ``corruption`` holds kind indices (-1 clean, -2 absent)
    and is evaluation-only metadata.
    """

    x: dict[str, np.ndarray]
    carries: np.ndarray
    in_range: np.ndarray
    labels: np.ndarray
    corruption: np.ndarray
    modalities: tuple[str, ...]

    @property
    def avail(self) -> np.ndarray:
        return self.carries * self.in_range[:, :, None]

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, idx) -> "FrameArrays":
        return FrameArrays(
            {m: v[idx] for m, v in self.x.items()}, self.carries[idx], self.in_range[idx],
            self.labels[idx], self.corruption[idx], self.modalities,
        )


def stack_frames(frames: Sequence[Frame], config: ScenarioConfig) -> FrameArrays:
    B, A = len(frames), config.n_agents
    mods = config.global_modalities
    x = {m: np.zeros((B, A, config.obs_dims[m])) for m in mods}
    carries = np.zeros((B, A, len(mods)))
    in_range = np.zeros((B, A))
    corruption = np.full((B, A, len(mods)), -2, dtype=np.int64)
    labels = np.zeros(B)
    for b, fr in enumerate(frames):
        labels[b] = fr.label
        in_range[b, 0] = 1.0
        for i in fr.neighbor_set:
            in_range[b, i] = 1.0
        for obs in fr.observations:
            k = mods.index(obs.modality)
            x[obs.modality][b, obs.agent] = obs.x
            carries[b, obs.agent, k] = 1.0
            corruption[b, obs.agent, k] = (
                -1 if obs.corruption_applied is None else CORRUPTION_KINDS.index(obs.corruption_applied)
            )
    return FrameArrays(x, carries, in_range, labels, corruption, mods)


# -- newline-delimited episode cache ---------------------------------------


def frame_to_record(frame: Frame) -> dict:
    return {
        "frame": frame.index,
        "label": frame.label,
        "neighbors": list(frame.neighbor_set),
        "observations": [
            {"agent": o.agent, "modality": o.modality, "x": o.x.tolist(), "corruption": o.corruption_applied}
            for o in frame.observations
        ],
    }


def frame_from_record(rec: dict) -> Frame:
    obs = [
        Observation(o["agent"], o["modality"], np.asarray(o["x"], dtype=np.float64), o.get("corruption"))
        for o in rec["observations"]
    ]
    return Frame(rec["frame"], obs, int(rec["label"]), tuple(rec["neighbors"]))


def write_frames(path, frames: Iterable[Frame]) -> None:
    with open(path, "w") as fh:
        for fr in frames:
            fh.write(json.dumps(frame_to_record(fr)) + "\n")


def read_frames(path) -> list[Frame]:
    with open(path) as fh:
        return [frame_from_record(json.loads(line)) for line in fh if line.strip()]
