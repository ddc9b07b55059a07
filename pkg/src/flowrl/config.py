"""Run configuration: dataclasses, validation, defaults, YAML loading, hashing.

A RunConfig pins every physics- and training-relevant quantity of an
experiment. Its content hash is embedded in all artifact filenames so that
start files, checkpoints and reports from different configurations can never
be mixed silently.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


# Canonical probe layout, relative to the cylinder center, in diameters:
# four probes on a ring of radius 1.5D (+-45 and +-135 deg from the
# downstream axis), two next to the jets, five in the near wake.
_RING = 1.5 / math.sqrt(2.0)
DEFAULT_PROBES = [
    (_RING, _RING),       # 0: ring, upstream-facing upper -> +45 deg
    (_RING, -_RING),      # 1: ring, +(-45) deg
    (-_RING, _RING),      # 2: ring, +135 deg
    (-_RING, -_RING),     # 3: ring, -135 deg
    (0.0, 0.75),          # 4: above top jet
    (0.0, -0.75),         # 5: below bottom jet
    (1.5, 0.0),           # 6: wake centerline
    (2.5, 0.0),           # 7: wake centerline
    (3.5, 0.0),           # 8: wake centerline
    (1.5, 0.5),           # 9: wake, upper
    (1.5, -0.5),          # 10: wake, lower
]

# Undirected edges; chosen mirror-symmetric about the wake centerline.
DEFAULT_EDGES = [
    (2, 4), (4, 0), (0, 9), (9, 6),
    (3, 5), (5, 1), (1, 10), (10, 6),
    (6, 7), (7, 8),
]

N_PROBES = 11
START_FILE_POOL_SIZE = 8


@dataclass
class GeometryConfig:
    channel_height: float = 4.1
    channel_length: float = 22.0
    diameter: float = 1.0
    cylinder_x: float = 2.0
    # Vertical offset of the cylinder center from the channel centerline,
    # in diameters. The shedding benchmark uses -0.05; the symmetric
    # baseline forces 0.
    cylinder_offset: float = -0.05
    grid_resolution: int = 40

    def validate(self) -> None:
        if self.diameter <= 0:
            raise ConfigError("geometry.diameter must be positive")
        if self.channel_height <= self.diameter:
            raise ConfigError("geometry.channel_height must exceed diameter")
        if self.channel_length <= self.diameter:
            raise ConfigError("geometry.channel_length must exceed diameter")
        if self.grid_resolution < 20:
            raise ConfigError("geometry.grid_resolution must be >= 20")
        if self.grid_resolution % 20 != 0:
            # keeps both the full channel (H=4.1) and the symmetric half
            # channel (H/2=2.05) an integer number of cells tall
            raise ConfigError("geometry.grid_resolution must be a multiple of 20")
        y_c = self.cylinder_y
        clearance = min(y_c, self.channel_height - y_c) - self.diameter / 2.0
        if clearance <= 0:
            raise ConfigError("geometry.cylinder_offset leaves no wall clearance")

    @property
    def cylinder_y(self) -> float:
        return self.channel_height / 2.0 + self.cylinder_offset * self.diameter

    @property
    def cylinder_center(self) -> tuple[float, float]:
        return (self.cylinder_x, self.cylinder_y)


@dataclass
class JetConfig:
    width_deg: float = 10.0
    center_angles_deg: tuple[float, float] = (90.0, -90.0)
    bound_fraction: float = 0.067
    # zero-order hold by default; optional linear ramp between control steps
    ramp: bool = False

    def validate(self) -> None:
        if self.width_deg <= 0:
            raise ConfigError("jets.width_deg must be positive")
        if self.bound_fraction <= 0:
            raise ConfigError("jets.bound_fraction must be positive")
        a1, a2 = self.center_angles_deg
        sep = abs((a1 - a2 + 180.0) % 360.0 - 180.0)
        if sep <= self.width_deg:
            raise ConfigError("jets overlap: center angle separation <= width")


@dataclass
class SolverConfig:
    # target lattice velocity of the bulk inflow; the effective value is
    # adjusted slightly so a control interval is an integer step count
    lattice_velocity: float = 0.06
    trt_magic: float = 0.25
    ema_beta: float = 0.95
    force_samples_per_interval: int = 10
    mach_proxy_limit: float = 0.17

    def validate(self) -> None:
        if not 0.0 < self.lattice_velocity < 0.3:
            raise ConfigError("solver.lattice_velocity out of range (0, 0.3)")
        if self.trt_magic <= 0:
            raise ConfigError("solver.trt_magic must be positive")
        if not 0.0 < self.ema_beta < 1.0:
            raise ConfigError("solver.ema_beta must lie in (0, 1)")
        if self.force_samples_per_interval < 1:
            raise ConfigError("solver.force_samples_per_interval must be >= 1")


@dataclass
class ProbeConfig:
    # positions relative to the cylinder center, in diameters
    positions: list[tuple[float, float]] = field(
        default_factory=lambda: [tuple(p) for p in DEFAULT_PROBES])
    edges: list[tuple[int, int]] = field(
        default_factory=lambda: [tuple(e) for e in DEFAULT_EDGES])
    normalize_adjacency: bool = True

    def validate(self) -> None:
        n = len(self.positions)
        if n != N_PROBES:
            raise ConfigError(f"probes.positions must list {N_PROBES} probes, got {n}")
        seen = set()
        for a, b in self.edges:
            if not (0 <= a < n and 0 <= b < n):
                raise ConfigError(f"probes.edges index out of range: ({a}, {b})")
            if a == b:
                raise ConfigError(f"probes.edges contains self-loop at node {a}")
            key = (min(a, b), max(a, b))
            if key in seen:
                raise ConfigError(f"probes.edges contains duplicate edge {key}")
            seen.add(key)


@dataclass
class RewardConfig:
    mode: str = "modified"          # "modified" or "legacy"
    drag_nocontrol: float = 2.8
    drag_min: float = 2.5
    lift_penalty: float = 0.2

    def validate(self) -> None:
        if self.mode not in ("modified", "legacy"):
            raise ConfigError("reward.mode must be 'modified' or 'legacy'")
        if self.drag_nocontrol <= self.drag_min:
            raise ConfigError("reward.drag_nocontrol must exceed reward.drag_min")
        if self.lift_penalty < 0:
            raise ConfigError("reward.lift_penalty must be >= 0")


@dataclass
class EpisodeConfig:
    t_end: float = 20.0
    dt_control: float = 0.25

    def validate(self) -> None:
        if self.dt_control <= 0:
            raise ConfigError("episode.dt_control must be positive")
        steps = self.t_end / self.dt_control
        if abs(steps - round(steps)) > 1e-9 or round(steps) < 1:
            raise ConfigError("episode.t_end must be an integer multiple of dt_control")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt_control))


@dataclass
class PolicyConfig:
    kind: str = "gcnn"              # "gcnn" or "mlp"
    sigma: float = 0.02
    mlp_hidden: tuple[int, int] = (256, 256)
    gcnn_encoder: int = 16
    gcnn_message: tuple[int, int] = (256, 256)
    gcnn_decoder: int = 16
    critic_hidden: tuple[int, int] = (256, 256)
    init_final_scale: float = 0.01

    def validate(self) -> None:
        if self.kind not in ("gcnn", "mlp"):
            raise ConfigError("policy.kind must be 'gcnn' or 'mlp'")
        if self.sigma <= 0:
            raise ConfigError("policy.sigma must be positive")


@dataclass
class PPOConfig:
    n_env: int = 32
    actor_epochs_max: int = 40
    kl_threshold: float = 0.025
    critic_lr: float = 5e-4
    critic_epochs_max: int = 100
    critic_patience: int = 5
    clip_epsilon: float = 0.2
    gamma: float = 0.99
    gae_lambda: float = 0.95
    actor_lr_initial: float = 1e-3
    actor_lr_floor: float = 1e-4
    lr_floor_iteration: int = 100
    minibatch_size: int = 0         # 0 = full batch

    def validate(self) -> None:
        if self.n_env < 1:
            raise ConfigError("ppo.n_env must be >= 1")
        if self.kl_threshold <= 0:
            raise ConfigError("ppo.kl_threshold must be positive")
        if not 0.0 < self.clip_epsilon < 1.0:
            raise ConfigError("ppo.clip_epsilon must lie in (0, 1)")
        for name in ("gamma", "gae_lambda"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"ppo.{name} must lie in (0, 1]")
        if self.actor_lr_initial < self.actor_lr_floor:
            raise ConfigError("ppo.actor_lr_initial must be >= actor_lr_floor")
        if self.actor_lr_floor <= 0:
            raise ConfigError("ppo.actor_lr_floor must be positive")
        if self.critic_lr <= 0:
            raise ConfigError("ppo.critic_lr must be positive")
        if self.critic_patience < 1:
            raise ConfigError("ppo.critic_patience must be >= 1")
        if self.actor_epochs_max < 1 or self.critic_epochs_max < 1:
            raise ConfigError("ppo epoch caps must be >= 1")
        if self.minibatch_size < 0:
            raise ConfigError("ppo.minibatch_size must be >= 0")


@dataclass
class RunConfig:
    geometry: GeometryConfig = field(default_factory=GeometryConfig)
    jets: JetConfig = field(default_factory=JetConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    probes: ProbeConfig = field(default_factory=ProbeConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    episode: EpisodeConfig = field(default_factory=EpisodeConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    ppo: PPOConfig = field(default_factory=PPOConfig)
    reynolds: float = 100.0
    # documentation only: operating point of the reference compressible
    # study; the lattice scheme here runs in the weakly compressible limit
    mach: float = 0.2
    master_seed: int = 0
    out_dir: str = "runs"

    def validate(self) -> None:
        for sub in (self.geometry, self.jets, self.solver, self.probes,
                    self.reward, self.episode, self.policy, self.ppo):
            sub.validate()
        if self.reynolds <= 0:
            raise ConfigError("reynolds must be positive")
        if self.master_seed < 0:
            raise ConfigError("master_seed must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return _asdict_plain(self)

    def config_hash(self) -> str:
        """Short content hash over every physics/training-relevant field."""
        d = self.to_dict()
        d.pop("out_dir")  # output location does not affect results
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]

    def physics_hash(self) -> str:
        """Hash over the fields that define the simulator itself. Flow
        snapshots and measured baselines are valid across runs that differ
        only in training hyperparameters, so they are keyed by this."""
        d = {
            "geometry": _asdict_plain(self.geometry),
            "jets": _asdict_plain(self.jets),
            "solver": _asdict_plain(self.solver),
            "dt_control": self.episode.dt_control,
            "reynolds": self.reynolds,
        }
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


def _asdict_plain(obj: Any) -> Any:
    if dataclasses.is_dataclass(obj):
        return {f.name: _asdict_plain(getattr(obj, f.name))
                for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_asdict_plain(v) for v in obj]
    return obj


_TUPLE_FIELDS = {
    ("jets", "center_angles_deg"),
    ("policy", "mlp_hidden"),
    ("policy", "gcnn_message"),
    ("policy", "critic_hidden"),
}


_SECTIONS = {
    "geometry": GeometryConfig,
    "jets": JetConfig,
    "solver": SolverConfig,
    "probes": ProbeConfig,
    "reward": RewardConfig,
    "episode": EpisodeConfig,
    "policy": PolicyConfig,
    "ppo": PPOConfig,
}


def config_from_dict(data: dict[str, Any]) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    top_fields = {f.name for f in dataclasses.fields(RunConfig)}
    kwargs: dict[str, Any] = {}
    for key, value in data.items():
        if key not in top_fields:
            raise ConfigError(f"unknown config key: {key}")
        if key in _SECTIONS:
            if value is None:
                value = {}
            if not isinstance(value, dict):
                raise ConfigError(f"config section '{key}' must be a mapping")
            sub_cls = _SECTIONS[key]
            sub_fields = {f.name for f in dataclasses.fields(sub_cls)}
            sub_kwargs = {}
            for sk, sv in value.items():
                if sk not in sub_fields:
                    raise ConfigError(f"unknown config key: {key}.{sk}")
                if (key, sk) in _TUPLE_FIELDS and isinstance(sv, list):
                    sv = tuple(sv)
                if key == "probes" and sk in ("positions", "edges"):
                    sv = [tuple(item) for item in sv]
                sub_kwargs[sk] = sv
            kwargs[key] = sub_cls(**sub_kwargs)
        else:
            kwargs[key] = value
    cfg = RunConfig(**kwargs)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    """Parse and validate a YAML run configuration.

    An empty file yields the full set of defaults. Unknown keys are
    rejected rather than silently ignored.
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    with open(path) as fh:
        data = yaml.safe_load(fh)
    if data is None:
        data = {}
    return config_from_dict(data)


def save_config(cfg: RunConfig, path: str | Path) -> None:
    with open(path, "w") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=False)
