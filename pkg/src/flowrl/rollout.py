"""Episode orchestration: start files, rewards, trajectories, collection.

Environments are share-nothing workers. Random streams are derived from a
counter-based generator keyed by (master seed, iteration, episode index),
so results never depend on worker scheduling.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import RewardConfig, RunConfig, START_FILE_POOL_SIZE, ConfigError
from .flow_env import CylinderFlowEnv, DivergenceError
from .policies import Actor, Critic


def reward_modified(c_d_ema: float, c_l_ema: float, cfg: RewardConfig) -> float:
    """Relative drag reduction minus the lift penalty (bounded above by 1
    whenever the smoothed drag stays above the configured minimum)."""
    denom = cfg.drag_nocontrol - cfg.drag_min
    if denom <= 0:
        raise ConfigError("degenerate reward scaling: drag_nocontrol <= drag_min")
    return (cfg.drag_nocontrol - c_d_ema) / denom \
        - cfg.lift_penalty * abs(c_l_ema)


def reward_legacy(c_d_ema: float, c_l_ema: float, alpha: float) -> float:
    return -c_d_ema - alpha * abs(c_l_ema)


def compute_reward(c_d_ema: float, c_l_ema: float, cfg: RewardConfig) -> float:
    if cfg.mode == "legacy":
        return reward_legacy(c_d_ema, c_l_ema, cfg.lift_penalty)
    return reward_modified(c_d_ema, c_l_ema, cfg)


def episode_rng(master_seed: int, iteration: int, episode: int
                ) -> np.random.Generator:
    """Counter-based stream: identical no matter which worker runs it."""
    key = (int(master_seed) << 64) | (int(iteration) << 32) | int(episode)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class StartFilePool:
    """Snapshots from distinct phases of the uncontrolled shedding cycle."""

    paths: list[Path]
    config_hash: str

    def __post_init__(self):
        if len(self.paths) != START_FILE_POOL_SIZE:
            raise ConfigError(
                f"start-file pool must hold {START_FILE_POOL_SIZE} snapshots, "
                f"got {len(self.paths)}")

    @classmethod
    def discover(cls, directory, config: RunConfig) -> "StartFilePool":
        directory = Path(directory)
        h = config.physics_hash()
        paths = sorted(directory.glob(f"start_{h}_*.snap"))
        if len(paths) != START_FILE_POOL_SIZE:
            raise FileNotFoundError(
                f"no start-file pool for config {h} in {directory}; "
                "run `flowrl make-startfiles` first")
        return cls(paths, h)

    def path_for(self, episode: int) -> Path:
        return self.paths[episode % len(self.paths)]


@dataclass
class Trajectory:
    """One episode of per-control-step records."""

    obs_policy: np.ndarray      # (T, ...) network-ready actor inputs
    obs_critic: np.ndarray      # (T, N_probes) canonical pressure vectors
    u: np.ndarray               # (T,) pre-squash actions
    q: np.ndarray               # (T,) bounded jet strengths
    log_prob_old: np.ndarray
    mean_old: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    value_bootstrap: float
    truncated: bool = True      # episodes end by time limit, not termination
    valid: bool = True
    start_file: str = ""
    force_history: list = field(default_factory=list)

    @property
    def length(self) -> int:
        return len(self.rewards)

    @property
    def episode_return(self) -> float:
        return float(np.sum(self.rewards))


def run_episode(env: CylinderFlowEnv, actor: Actor, critic: Critic,
                start_file, mode: str = "stochastic",
                rng: np.random.Generator | None = None,
                reward_cfg: RewardConfig | None = None) -> Trajectory:
    """Play one fixed-length episode from a start file.

    stochastic mode draws pre-squash actions from the Gaussian head with
    the provided generator; greedy mode uses the mean. A solver divergence
    truncates the trajectory and flags it invalid.
    """
    if mode not in ("stochastic", "greedy"):
        raise ValueError(f"unknown episode mode {mode!r}")
    if mode == "stochastic" and rng is None:
        raise ValueError("stochastic mode requires a random generator")
    reward_cfg = reward_cfg or env.config.reward
    n_steps = env.config.episode.n_steps
    env.load_snapshot(start_file)

    obs_p, obs_c, us, qs, lps, means, rews, vals = ([] for _ in range(8))
    valid = True
    graph = env.observe()
    for _ in range(n_steps):
        feats = actor.features(graph)
        mean = float(actor.mean(graph))
        if mode == "stochastic":
            u = float(rng.normal(loc=mean, scale=actor.head.sigma))
        else:
            u = mean
        q = float(actor.head.squash(u))
        assert abs(q) <= env.jet.bound * (1.0 + 1e-12)
        value = float(critic.value(graph.delta_p[None, :])[0])
        try:
            record = env.step(q)
        except DivergenceError:
            valid = False
            break
        reward = compute_reward(record.C_D_ema, record.C_L_ema, reward_cfg)
        if reward_cfg.mode == "modified" and record.C_D_ema >= reward_cfg.drag_min:
            assert reward <= 1.0 + 1e-12
        obs_p.append(feats)
        obs_c.append(graph.delta_p.copy())
        us.append(u)
        qs.append(q)
        lps.append(float(actor.head.log_prob(mean, u)))
        means.append(mean)
        rews.append(reward)
        vals.append(value)
        graph = env.observe()
    bootstrap = float(critic.value(graph.delta_p[None, :])[0]) if valid else 0.0
    return Trajectory(
        obs_policy=np.asarray(obs_p), obs_critic=np.asarray(obs_c),
        u=np.asarray(us), q=np.asarray(qs), log_prob_old=np.asarray(lps),
        mean_old=np.asarray(means), rewards=np.asarray(rews),
        values=np.asarray(vals), value_bootstrap=bootstrap, valid=valid,
        start_file=str(start_file), force_history=list(env.history))


@dataclass
class IterationBatch:
    trajectories: list[Trajectory]
    eval_trajectory: Trajectory

    @property
    def mean_return(self) -> float:
        return float(np.mean([t.episode_return for t in self.trajectories]))

    @property
    def eval_return(self) -> float:
        return self.eval_trajectory.episode_return


def collect_iteration(envs: list[CylinderFlowEnv], actor: Actor,
                      critic: Critic, pool: StartFilePool, iteration: int,
                      master_seed: int, n_env: int | None = None,
                      max_invalid_fraction: float = 0.25,
                      reward_cfg: RewardConfig | None = None) -> IterationBatch:
    """n_env stochastic episodes (start files round-robin) plus one greedy
    evaluation episode. Invalid trajectories are excluded; the iteration
    aborts when more than a quarter of them fail."""
    cfg = envs[0].config
    n_env = n_env or cfg.ppo.n_env
    n_workers = len(envs)

    def run_one(args):
        wid, episode = args
        if episode < 0:  # greedy evaluation run
            return run_episode(envs[wid], actor, critic, pool.path_for(0),
                               mode="greedy", reward_cfg=reward_cfg)
        rng = episode_rng(master_seed, iteration, episode)
        return run_episode(envs[wid], actor, critic, pool.path_for(episode),
                           mode="stochastic", rng=rng, reward_cfg=reward_cfg)

    jobs = [(e % n_workers, e) for e in range(n_env)]
    jobs.append(((n_env) % n_workers, -1))
    if n_workers == 1:
        results = [run_one(j) for j in jobs]
    else:
        # each worker owns one env; schedule its episodes sequentially
        per_worker: dict[int, list] = {}
        for wid, episode in jobs:
            per_worker.setdefault(wid, []).append((wid, episode))

        def run_chain(chain):
            return [run_one(j) for j in chain]

        with ThreadPoolExecutor(max_workers=n_workers) as pool_exec:
            chains = list(pool_exec.map(run_chain, per_worker.values()))
        ordered = {}
        for chain, outs in zip(per_worker.values(), chains):
            for (wid, episode), out in zip(chain, outs):
                ordered[episode] = out
        results = [ordered[e] for e in range(n_env)] + [ordered[-1]]

    eval_traj = results.pop()
    valid = [t for t in results if t.valid]
    n_invalid = len(results) - len(valid)
    if n_invalid > max_invalid_fraction * len(results):
        raise RuntimeError(
            f"iteration {iteration} aborted: {n_invalid}/{len(results)} "
            "episodes diverged")
    return IterationBatch(valid, eval_traj)


def measured_period(history, t_min: float) -> float:
    """Shedding period from zero crossings of the lift signal after t_min."""
    hist = [(t, cl) for (t, _, cl, *_rest) in history if t >= t_min]
    if len(hist) < 16:
        raise ValueError("history too short to measure a shedding period")
    t = np.array([h[0] for h in hist])
    cl = np.array([h[1] for h in hist])
    cl = cl - cl.mean()
    crossings = []
    for i in range(1, len(cl)):
        if cl[i - 1] < 0.0 <= cl[i]:  # upward crossings only
            frac = -cl[i - 1] / (cl[i] - cl[i - 1])
            crossings.append(t[i - 1] + frac * (t[i] - t[i - 1]))
    if len(crossings) < 2:
        raise ValueError("no shedding oscillation detected")
    return float(np.mean(np.diff(crossings)))


def make_start_files(config: RunConfig, directory, warmup_t: float = 100.0,
                     progress=None) -> StartFilePool:
    """Run the uncontrolled case and snapshot 8 equally spaced phases of
    one measured shedding period."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    env = CylinderFlowEnv(config)
    n_intervals = int(round(warmup_t / config.episode.dt_control))
    for s in range(n_intervals):
        env.step(0.0)
        if progress and (s + 1) % 40 == 0:
            progress(f"warmup t*={env.t_star:.1f}")
    period = measured_period(env.history, t_min=warmup_t * 0.6)
    h = config.physics_hash()
    paths = []
    snap_times = [env.t_star + period * k / START_FILE_POOL_SIZE
                  for k in range(START_FILE_POOL_SIZE)]
    idx = 0
    path = directory / f"start_{h}_{idx:02d}.snap"
    env.save_snapshot(path)
    paths.append(path)
    for idx in range(1, START_FILE_POOL_SIZE):
        target = snap_times[idx]
        while env.t_star < target - env.dt / 2:
            env.step(0.0)
        path = directory / f"start_{h}_{idx:02d}.snap"
        env.save_snapshot(path)
        paths.append(path)
    return StartFilePool(paths, h)
