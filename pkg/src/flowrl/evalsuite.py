"""Analysis of trained policies and baselines: force statistics,
improvement factors, amplitude measures, permutation-shuffle experiment,
symmetric baseline, recirculation-zone length."""

from __future__ import annotations

import dataclasses
import math
import warnings
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .flow_env import CylinderFlowEnv, bilinear
from .policies import Actor
from .rollout import measured_period


def improvement_factor(nc: float, sym: float, afc: float) -> float:
    """Reduction of a coefficient relative to the no-shedding baseline:
    (nc - afc) / (nc - sym) - 1. Zero when the controlled case matches the
    symmetric one, positive when it undercuts it."""
    if nc == sym:
        raise ValueError("degenerate baselines: no-control equals symmetric")
    return (nc - afc) / (nc - sym) - 1.0


def local_peak_indices(y: np.ndarray) -> list[int]:
    """Strict local maxima; plateaus are attributed to their leftmost sample.

    The series is compressed into runs of equal values; a run is a peak when
    it is strictly greater than both neighboring runs. Endpoint runs are
    never peaks.
    """
    y = np.asarray(y, dtype=float)
    runs: list[tuple[float, int]] = []
    for i, v in enumerate(y):
        if not runs or runs[-1][0] != v:
            runs.append((v, i))
    peaks = []
    for r in range(1, len(runs) - 1):
        if runs[r][0] > runs[r - 1][0] and runs[r][0] > runs[r + 1][0]:
            peaks.append(runs[r][1])
    return peaks


def amplitude(series, mean: float) -> float:
    """Mean local-peak magnitude of |x - mean| (zero, with a warning, when
    the series has no interior peaks)."""
    series = np.asarray(series, dtype=float)
    if series.size < 3:
        raise ValueError("series must have at least 3 samples")
    y = np.abs(series - mean)
    peaks = local_peak_indices(y)
    if not peaks:
        warnings.warn("no interior peaks found; amplitude set to 0")
        return 0.0
    return float(np.mean(y[peaks]))


@dataclass
class EpisodeStats:
    mean_cd: float
    mean_cl: float
    mean_cf: float
    amp_cd: float
    amp_cl: float
    amp_cf: float
    strouhal: float
    window: tuple[float, float]

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


def stats_from_history(history, t_a: float, t_b: float) -> EpisodeStats:
    """Time-averaged coefficients and peak amplitudes over [t_a, t_b]."""
    rows = [r for r in history if t_a <= r[0] <= t_b]
    if len(rows) < 8:
        raise ValueError(f"averaging window [{t_a}, {t_b}] has too few samples")
    cd = np.array([r[1] for r in rows])
    cl = np.array([r[2] for r in rows])
    cf = np.array([r[3] for r in rows])
    try:
        period = measured_period(history, t_min=t_a)
        st = 1.0 / period
    except ValueError:
        st = 0.0
    return EpisodeStats(
        mean_cd=float(cd.mean()), mean_cl=float(cl.mean()),
        mean_cf=float(cf.mean()),
        amp_cd=amplitude(cd, cd.mean()), amp_cl=amplitude(cl, cl.mean()),
        amp_cf=amplitude(cf, cf.mean()), strouhal=st, window=(t_a, t_b))


@dataclass
class BaselineStats:
    stats: EpisodeStats
    converged: bool = True
    drift: float = 0.0


@dataclass
class BaselineSet:
    no_control: BaselineStats
    symmetric: BaselineStats


def run_uncontrolled(config: RunConfig, t_max: float = 150.0,
                     window: tuple[float, float] = (100.0, 150.0),
                     progress=None) -> tuple[BaselineStats, CylinderFlowEnv]:
    env = CylinderFlowEnv(config)
    n = int(round(t_max / config.episode.dt_control))
    for s in range(n):
        env.step(0.0)
        if progress and (s + 1) % 80 == 0:
            progress(f"no-control t*={env.t_star:.0f}")
    stats = stats_from_history(env.history, *window)
    return BaselineStats(stats), env


def symmetric_baseline(config: RunConfig, t_max: float = 300.0,
                       drift_tol: float = 1e-4, check_every: float = 10.0,
                       stop_early: bool = True, progress=None
                       ) -> tuple[BaselineStats, CylinderFlowEnv]:
    """Half-channel run with a centerline symmetry plane, advanced until the
    windowed mean drag drifts less than drift_tol per check interval (or to
    t_max when stop_early is off)."""
    env = CylinderFlowEnv(config, symmetric=True)
    dt_c = config.episode.dt_control
    per_chunk = int(round(check_every / dt_c))
    prev_mean = None
    drift = math.inf
    converged = False
    t = 0.0
    while t < t_max - 1e-9:
        for _ in range(per_chunk):
            env.step(0.0)
        t = env.t_star
        rows = [r for r in env.history if r[0] > t - check_every]
        mean_cd = float(np.mean([r[1] for r in rows]))
        if prev_mean is not None:
            drift = abs(mean_cd - prev_mean)
            if drift < drift_tol and t >= 3 * check_every:
                converged = True
                if stop_early:
                    break
        prev_mean = mean_cd
        if progress:
            progress(f"symmetric t*={t:.0f} <C_D>={mean_cd:.4f} drift={drift:.2e}")
    w = (max(0.0, env.t_star - 2 * check_every), env.t_star)
    stats = stats_from_history(env.history, *w)
    return BaselineStats(stats, converged=converged, drift=drift), env


class FieldAverager:
    """Accumulates a time-averaged streamwise velocity field."""

    def __init__(self, env: CylinderFlowEnv):
        self.env = env
        self.sum_ux = np.zeros((env.ny, env.nx))
        self.count = 0

    def add(self):
        self.sum_ux += self.env.ux / self.env.u_lat
        self.count += 1

    @property
    def mean_ux(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("no field samples accumulated")
        return self.sum_ux / self.count


def recirculation_length(mean_ux: np.ndarray, dx: float, cyl_x: float,
                         cyl_y: float, diameter: float,
                         x_max: float | None = None) -> float:
    """Downstream extent of negative streamwise velocity along the wake
    centerline, measured from the cylinder's rear stagnation point."""
    ny, nx = mean_ux.shape
    rear = cyl_x + diameter / 2.0
    if x_max is None:
        x_max = nx * dx - 2 * dx
    n_samples = max(8, int((x_max - rear) / (dx / 2.0)))
    xs = np.linspace(rear + 0.25 * dx, x_max, n_samples)
    u = np.array([bilinear(mean_ux, x, cyl_y, dx) for x in xs])
    if u[0] >= 0.0:
        return 0.0
    for i in range(1, len(u)):
        if u[i] >= 0.0:
            # linear interpolation of the reattachment point
            frac = -u[i - 1] / (u[i] - u[i - 1])
            x_r = xs[i - 1] + frac * (xs[i] - xs[i - 1])
            return float((x_r - rear) / diameter)
    return float((xs[-1] - rear) / diameter)


def greedy_run(config: RunConfig, actor: Actor, critic, start_file,
               t_total: float = 100.0, avg_window: tuple[float, float] | None
               = None, progress=None):
    """Greedy-policy simulation of t_total beyond the start file, recording
    forces, actions, and (optionally) the window-averaged velocity field.

    Times in the returned history are re-based so the episode starts at 0.
    """
    env = CylinderFlowEnv(config)
    env.load_snapshot(start_file)
    t0 = env.t_star
    averager = FieldAverager(env) if avg_window else None
    n = int(round(t_total / config.episode.dt_control))
    actions = []
    for s in range(n):
        graph = env.observe()
        q = actor.act_greedy(graph)
        env.step(q)
        actions.append(q)
        tr = env.t_star - t0
        if averager and avg_window[0] <= tr <= avg_window[1]:
            averager.add()
        if progress and (s + 1) % 80 == 0:
            progress(f"greedy t*={tr:.0f}")
    history = [(r[0] - t0, *r[1:]) for r in env.history]
    return history, np.array(actions), averager, env


def shuffle_experiment(actors: dict[str, Actor], config: RunConfig,
                       start_file, permutation_seed: int,
                       n_steps: int | None = None) -> dict:
    """Run each policy with the original and a shuffled probe ordering
    (adjacency relabeled consistently); report per-step action deviations.

    A permutation-invariant policy must produce identical actions; an
    order-dependent one drifts onto a different force trajectory.
    """
    rng = np.random.default_rng(permutation_seed)
    n_probes = len(config.probes.positions)
    perm = rng.permutation(n_probes)
    while (perm == np.arange(n_probes)).all():
        perm = rng.permutation(n_probes)
    report: dict = {"permutation": perm.tolist()}
    env = CylinderFlowEnv(config)
    steps = n_steps or config.episode.n_steps
    for name, actor in actors.items():
        runs = {}
        for variant in ("original", "shuffled"):
            env.load_snapshot(start_file)
            acts = []
            for _ in range(steps):
                graph = env.observe()
                if variant == "shuffled":
                    graph = graph.permuted(perm)
                acts.append(actor.act_greedy(graph))
                env.step(acts[-1])
            runs[variant] = {"actions": np.array(acts),
                             "history": list(env.history)}
        dev = np.abs(runs["original"]["actions"] - runs["shuffled"]["actions"])
        report[name] = {
            "max_action_deviation": float(dev.max()),
            "mean_action_deviation": float(dev.mean()),
            "actions_original": runs["original"]["actions"].tolist(),
            "actions_shuffled": runs["shuffled"]["actions"].tolist(),
        }
    return report


def format_stats_table(columns: dict[str, EpisodeStats]) -> str:
    """Human-readable table mirroring the coefficient/amplitude layout."""
    names = list(columns)
    rows = [
        ("<C_D>", "mean_cd", "{:.3f}"),
        ("<C_D amp>", "amp_cd", "{:.2e}"),
        ("<C_L>", "mean_cl", "{:+.2e}"),
        ("<C_L amp>", "amp_cl", "{:.2e}"),
        ("<C_F>", "mean_cf", "{:.3f}"),
        ("<C_F amp>", "amp_cf", "{:.2e}"),
        ("Strouhal", "strouhal", "{:.3f}"),
    ]
    width = 14
    out = [" " * 12 + "".join(n.rjust(width) for n in names)]
    for label, attr, fmt in rows:
        cells = [fmt.format(getattr(columns[n], attr)).rjust(width)
                 for n in names]
        out.append(label.ljust(12) + "".join(cells))
    return "\n".join(out)
