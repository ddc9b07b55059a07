"""Training loop: collection, updates, metrics, checkpointing, resume."""

from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .config import RunConfig
from .flow_env import CylinderFlowEnv
from .persist import (MetricsWriter, load_checkpoint, require_artifact,
                      save_checkpoint)
from .policies import Actor, Critic, make_actor, make_critic
from .ppo import (ActorBatch, Adam, LRSchedule, critic_update, gae,
                  normalize_advantages, ppo_actor_update)
from .rollout import StartFilePool, collect_iteration


def baseline_path(out_dir, physics_hash: str) -> Path:
    return Path(out_dir) / f"baseline_{physics_hash}.json"


def metrics_path(out_dir, config_hash: str) -> Path:
    return Path(out_dir) / f"metrics_{config_hash}.csv"


def checkpoint_path(out_dir, config_hash: str, iteration: int) -> Path:
    return Path(out_dir) / f"ckpt_{config_hash}_iter{iteration:05d}.bin"


def latest_checkpoint(out_dir, config_hash: str) -> Path | None:
    paths = sorted(Path(out_dir).glob(f"ckpt_{config_hash}_iter*.bin"))
    return paths[-1] if paths else None


def load_calibrated_reward(config: RunConfig, out_dir):
    """Reward constants from the measured solver baselines (required for
    the modified reward; the shipped defaults are in the reference study's
    units, not this solver's). Returned separately so the run config, and
    with it the artifact hash, stays untouched."""
    import dataclasses
    path = require_artifact(baseline_path(out_dir, config.physics_hash()),
                            produced_by="calibrate")
    data = json.loads(path.read_text())
    return dataclasses.replace(
        config.reward,
        drag_nocontrol=data["drag_nocontrol"],
        drag_min=data["drag_min"])


class Trainer:
    """Owns the policy pair, optimizer state and the environment workers."""

    def __init__(self, config: RunConfig, out_dir, workers: int = 1,
                 startfile_dir=None, reward_override=None, progress=None):
        config.validate()
        self.config = config
        self.reward = reward_override or config.reward
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.hash = config.config_hash()
        self.progress = progress or (lambda msg: None)
        startfile_dir = startfile_dir or self.out_dir
        self.pool = StartFilePool.discover(startfile_dir, config)
        n_workers = max(1, min(workers, config.ppo.n_env))
        self.envs = [CylinderFlowEnv(config) for _ in range(n_workers)]

        seed = config.master_seed
        sseq = np.random.SeedSequence(seed)
        actor_seed, critic_seed = (int(s.generate_state(1)[0])
                                   for s in sseq.spawn(2))
        bound = self.envs[0].jet.bound
        adjacency = self.envs[0].layout.adjacency
        self.actor = make_actor(config.policy, adjacency, bound, actor_seed)
        # the bounded critic head must be able to represent the largest
        # plausible return magnitude for the configured reward
        reward_mag = 1.0 if self.reward.mode == "modified" \
            else self.reward.drag_nocontrol
        scale = reward_mag / (1.0 - config.ppo.gamma)
        self.critic = make_critic(config.policy, critic_seed, scale_init=scale)
        self.adam_actor = Adam(self.actor.net.n_params)
        self.adam_critic = Adam(self.critic.net.n_params)
        self.schedule = LRSchedule(config.ppo.actor_lr_initial,
                                   config.ppo.actor_lr_floor,
                                   config.ppo.lr_floor_iteration)
        self.iteration = 0

    # -------------------------------------------------------------- persist

    def save(self, iteration: int) -> Path:
        path = checkpoint_path(self.out_dir, self.hash, iteration)
        arrays = {
            "actor_params": self.actor.net.get_flat(),
            "critic_params": self.critic.net.get_flat(),
            "adam_actor_m": self.adam_actor.m,
            "adam_actor_v": self.adam_actor.v,
            "adam_critic_m": self.adam_critic.m,
            "adam_critic_v": self.adam_critic.v,
        }
        scalars = {"adam_actor_t": self.adam_actor.t,
                   "adam_critic_t": self.adam_critic.t}
        save_checkpoint(path, config_hash=self.hash, iteration=iteration,
                        seed=self.config.master_seed,
                        actor_kind=self.config.policy.kind,
                        arrays=arrays, scalars=scalars)
        return path

    def restore(self, path) -> int:
        header, arrays = load_checkpoint(path, expected_hash=self.hash)
        if header["actor_kind"] != self.config.policy.kind:
            raise ValueError(
                f"checkpoint actor kind {header['actor_kind']} does not "
                f"match config {self.config.policy.kind}")
        self.actor.net.set_flat(arrays["actor_params"])
        self.critic.net.set_flat(arrays["critic_params"])
        self.adam_actor.load_state({"m": arrays["adam_actor_m"],
                                    "v": arrays["adam_actor_v"],
                                    "t": header["scalars"]["adam_actor_t"]})
        self.adam_critic.load_state({"m": arrays["adam_critic_m"],
                                     "v": arrays["adam_critic_v"],
                                     "t": header["scalars"]["adam_critic_t"]})
        self.iteration = header["iteration"]
        return self.iteration

    # ----------------------------------------------------------------- train

    def _eval_window_drag(self, batch) -> float:
        """Mean drag over the later part of the greedy evaluation episode."""
        hist = batch.eval_trajectory.force_history
        if not hist:
            return math.nan
        t0 = hist[0][0]
        span = self.config.episode.t_end
        rows = [r[1] for r in hist if r[0] - t0 >= span / 2.0]
        return float(np.mean(rows)) if rows else math.nan

    def run(self, iterations: int, checkpoint_every: int = 10,
            resume: bool = False, stop_when_drag_below: float | None = None
            ) -> dict:
        start = 0
        if resume:
            latest = latest_checkpoint(self.out_dir, self.hash)
            if latest is not None:
                start = self.restore(latest)
        metrics = MetricsWriter(
            metrics_path(self.out_dir, self.hash),
            resume_iteration=start if (resume and start > 0) else None)
        self._init_eval_drag(start if (resume and start > 0) else None)
        if start == 0:
            self.save(0)  # initial checkpoint, also written for 0 iterations
        cfg = self.config.ppo
        last_eval_drag = math.nan
        for it in range(start, iterations):
            # per-iteration stream so kill-and-resume replays identically
            update_rng = np.random.default_rng([self.config.master_seed, it])
            batch = collect_iteration(self.envs, self.actor, self.critic,
                                      self.pool, it, self.config.master_seed,
                                      reward_cfg=self.reward)
            adv_list, ret_list = [], []
            for traj in batch.trajectories:
                adv, ret = gae(traj.rewards, traj.values, cfg.gamma,
                               cfg.gae_lambda, traj.value_bootstrap)
                adv_list.append(adv)
                ret_list.append(ret)
            advantages = normalize_advantages(np.concatenate(adv_list))
            returns = np.concatenate(ret_list)
            feats = np.concatenate([t.obs_policy for t in batch.trajectories])
            obs_c = np.concatenate([t.obs_critic for t in batch.trajectories])
            actor_batch = ActorBatch(
                features=feats,
                u=np.concatenate([t.u for t in batch.trajectories]),
                log_prob_old=np.concatenate(
                    [t.log_prob_old for t in batch.trajectories]),
                mean_old=np.concatenate(
                    [t.mean_old for t in batch.trajectories]),
                advantages=advantages)
            lr = self.schedule.rate(it)
            res_a = ppo_actor_update(self.actor, self.adam_actor, actor_batch,
                                     cfg, lr, rng=update_rng)
            if res_a.aborted:
                self.progress(f"iteration {it}: actor update aborted "
                              "(non-finite loss), parameters restored")
            res_c = critic_update(self.critic, self.adam_critic, obs_c,
                                  returns, cfg)
            if res_c.aborted:
                self.progress(f"iteration {it}: critic update aborted "
                              "(non-finite loss), parameters restored")
            metrics.write(it, batch.mean_return, batch.eval_return,
                          res_a.epochs_run, res_c.epochs_run, res_a.final_kl,
                          lr)
            last_eval_drag = self._eval_window_drag(batch)
            self._append_eval_drag(it, last_eval_drag)
            self.iteration = it + 1
            self.progress(
                f"iter {it}: return={batch.mean_return:.3f} "
                f"eval={batch.eval_return:.3f} kl={res_a.final_kl:.4f} "
                f"epochs={res_a.epochs_run}/{res_c.epochs_run} "
                f"eval<C_D>={last_eval_drag:.4f}")
            if checkpoint_every and (it + 1) % checkpoint_every == 0:
                self.save(it + 1)
            if (stop_when_drag_below is not None
                    and math.isfinite(last_eval_drag)
                    and last_eval_drag < stop_when_drag_below):
                self.progress(f"iter {it}: drag target reached, stopping")
                break
        final = self.save(self.iteration)
        return {"final_checkpoint": str(final), "iterations": self.iteration,
                "eval_drag": last_eval_drag,
                "metrics": str(metrics_path(self.out_dir, self.hash))}

    def _eval_drag_path(self) -> Path:
        return self.out_dir / f"evaldrag_{self.hash}.csv"

    def _init_eval_drag(self, resume_iteration: int | None):
        path = self._eval_drag_path()
        if resume_iteration is not None and path.exists():
            lines = path.read_text().splitlines()
            kept = [lines[0]] if lines else ["iteration,eval_drag"]
            for line in lines[1:]:
                if int(line.split(",", 1)[0]) <= resume_iteration:
                    kept.append(line)
            path.write_text("\n".join(kept) + "\n")
        else:
            path.write_text("iteration,eval_drag\n")

    def _append_eval_drag(self, it: int, drag: float):
        with open(self._eval_drag_path(), "a") as fh:
            fh.write(f"{it},{drag:.17g}\n")


def build_policies_from_checkpoint(config: RunConfig, path,
                                   adjacency: np.ndarray, bound: float
                                   ) -> tuple[Actor, Critic]:
    """Instantiate an actor/critic pair and load checkpoint weights."""
    header, arrays = load_checkpoint(path,
                                     expected_hash=config.config_hash())
    if header["actor_kind"] != config.policy.kind:
        raise ValueError(
            f"checkpoint holds a {header['actor_kind']} actor but the "
            f"config requests {config.policy.kind}")
    actor = make_actor(config.policy, adjacency, bound, seed=0)
    actor.net.set_flat(arrays["actor_params"])
    critic = make_critic(config.policy, seed=0)
    critic.net.set_flat(arrays["critic_params"])
    return actor, critic
