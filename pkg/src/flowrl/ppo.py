"""PPO variant: clipped surrogate, GAE, KL-based actor early stopping,
patience-based critic early stopping, decaying actor learning rate.

Experience is strictly on-policy; there is no replay buffer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import PPOConfig
from .policies import Actor, Critic, kl_fixed_sigma


def gae(rewards, values, gamma: float, lam: float, bootstrap: float = 0.0):
    """Generalized advantage estimation for one (possibly truncated) episode.

    rewards and values have equal length T; bootstrap is the critic value of
    the state after the last transition. Returns raw (un-normalized)
    advantages and the regression targets advantages + values.
    """
    rewards = np.asarray(rewards, dtype=float)
    values = np.asarray(values, dtype=float)
    if rewards.size == 0:
        raise ValueError("empty trajectory")
    if rewards.shape != values.shape:
        raise ValueError("rewards and values must have equal length")
    t_len = rewards.size
    adv = np.empty(t_len)
    next_value = bootstrap
    acc = 0.0
    for t in range(t_len - 1, -1, -1):
        delta = rewards[t] + gamma * next_value - values[t]
        acc = delta + gamma * lam * acc
        adv[t] = acc
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance over the update batch (exact, no epsilon)."""
    adv = np.asarray(adv, dtype=float)
    centered = adv - adv.mean()
    std = centered.std()
    if std == 0.0:
        return centered
    return centered / std


@dataclass
class LRSchedule:
    initial: float
    floor: float = 1e-4
    floor_start_iteration: int = 100

    def rate(self, iteration: int) -> float:
        if iteration < 0:
            raise ValueError("iteration must be >= 0")
        if iteration >= self.floor_start_iteration:
            return self.floor
        frac = iteration / self.floor_start_iteration
        return self.initial * (self.floor / self.initial) ** frac


def lr_at(schedule: LRSchedule, iteration: int) -> float:
    return schedule.rate(iteration)


class Adam:
    """Adaptive-moment gradient descent with the standard constants."""

    def __init__(self, n_params: int, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.t = 0
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def step(self, params: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        mhat = self.m / (1.0 - self.beta1**self.t)
        vhat = self.v / (1.0 - self.beta2**self.t)
        return params - lr * mhat / (np.sqrt(vhat) + self.eps)

    def state(self) -> dict:
        return {"m": self.m.copy(), "v": self.v.copy(), "t": self.t}

    def load_state(self, state: dict) -> None:
        self.m = np.asarray(state["m"], dtype=float).copy()
        self.v = np.asarray(state["v"], dtype=float).copy()
        self.t = int(state["t"])


class EarlyStopping:
    """Patience counter on a loss sequence; improvement must be strict."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = math.inf
        self.bad = 0

    def update(self, loss: float) -> bool:
        """Record one epoch's loss; True when training should halt."""
        if loss < self.best:
            self.best = loss
            self.bad = 0
        else:
            self.bad += 1
        return self.bad >= self.patience


@dataclass
class ActorBatch:
    """Flattened on-policy transitions for one update."""

    features: np.ndarray     # network-ready inputs, (B, ...) per actor kind
    u: np.ndarray            # pre-squash actions, (B,)
    log_prob_old: np.ndarray
    mean_old: np.ndarray     # pre-squash policy means at collection time
    advantages: np.ndarray   # normalized


@dataclass
class UpdateResult:
    epochs_run: int
    final_kl: float = 0.0
    aborted: bool = False
    final_loss: float = math.nan


def clipped_surrogate(actor: Actor, batch: ActorBatch, clip_epsilon: float):
    """Surrogate objective value and its gradient w.r.t. the flat params.

    Returns (objective, grad) where objective is the quantity being
    maximized, E[min(ratio * A, clip(ratio) * A)], and grad is the gradient
    of its negative (the loss passed to the optimizer).
    """
    sigma = actor.head.sigma
    mean_new = np.squeeze(actor.net.forward(batch.features), axis=-1)
    log_prob_new = actor.head.log_prob(mean_new, batch.u)
    ratio = np.exp(log_prob_new - batch.log_prob_old)
    unclipped = ratio * batch.advantages
    clipped = np.clip(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon) \
        * batch.advantages
    objective = float(np.minimum(unclipped, clipped).mean())
    # gradient of min: the unclipped branch unless the clipped one is
    # strictly smaller (there the clip binds and the derivative vanishes)
    active = unclipped <= clipped
    n = batch.u.size
    dobj_dmean = np.where(
        active, batch.advantages * ratio * (batch.u - mean_new) / sigma**2,
        0.0) / n
    grad, _ = actor.net.backward(-dobj_dmean[:, None])
    return objective, grad


def _epoch_minibatches(n: int, minibatch_size: int, rng):
    if minibatch_size <= 0 or minibatch_size >= n:
        yield np.arange(n)
        return
    if rng is None:
        rng = np.random.default_rng(0)
    idx = rng.permutation(n)
    for start in range(0, n, minibatch_size):
        yield idx[start:start + minibatch_size]


def _batch_subset(batch: ActorBatch, idx: np.ndarray) -> ActorBatch:
    return ActorBatch(batch.features[idx], batch.u[idx],
                      batch.log_prob_old[idx], batch.mean_old[idx],
                      batch.advantages[idx])


def ppo_actor_update(actor: Actor, adam: Adam, batch: ActorBatch,
                     cfg: PPOConfig, lr: float,
                     rng: np.random.Generator | None = None) -> UpdateResult:
    """Gradient steps on the clipped surrogate until the KL guard trips.

    Training halts once the mean KL between the data-collecting policy and
    the updated policy exceeds the threshold (measured after each epoch),
    or after the epoch cap. A non-finite loss aborts the update and
    restores the pre-update parameters and optimizer state.
    """
    params0 = actor.net.get_flat()
    adam0 = adam.state()
    epochs = 0
    kl = 0.0
    objective = math.nan
    for _ in range(cfg.actor_epochs_max):
        for idx in _epoch_minibatches(batch.u.size, cfg.minibatch_size, rng):
            sub = _batch_subset(batch, idx) if idx.size != batch.u.size else batch
            objective, grad = clipped_surrogate(actor, sub, cfg.clip_epsilon)
            if not (math.isfinite(objective) and np.isfinite(grad).all()):
                actor.net.set_flat(params0)
                adam.load_state(adam0)
                return UpdateResult(epochs, kl, aborted=True)
            actor.net.set_flat(adam.step(actor.net.get_flat(), grad, lr))
        epochs += 1
        mean_new = np.squeeze(actor.net.forward(batch.features), axis=-1)
        kl = kl_fixed_sigma(batch.mean_old, mean_new, actor.head.sigma)
        if not math.isfinite(kl):
            actor.net.set_flat(params0)
            adam.load_state(adam0)
            return UpdateResult(epochs, kl, aborted=True)
        if kl > cfg.kl_threshold:
            break
    return UpdateResult(epochs, kl, final_loss=-objective)


def critic_update(critic: Critic, adam: Adam, obs: np.ndarray,
                  returns: np.ndarray, cfg: PPOConfig) -> UpdateResult:
    """Mean-squared-error regression to the GAE returns with patience."""
    params0 = critic.net.get_flat()
    adam0 = adam.state()
    stopper = EarlyStopping(cfg.critic_patience)
    returns = np.asarray(returns, dtype=float)
    n = returns.size
    epochs = 0
    loss = math.nan
    for _ in range(cfg.critic_epochs_max):
        values = critic.value(obs)
        err = values - returns
        loss = float(np.mean(err * err))
        if not math.isfinite(loss):
            critic.net.set_flat(params0)
            adam.load_state(adam0)
            return UpdateResult(epochs, aborted=True)
        grad, _ = critic.net.backward((2.0 / n) * err[:, None])
        critic.net.set_flat(adam.step(critic.net.get_flat(), grad, cfg.critic_lr))
        epochs += 1
        if stopper.update(loss):
            break
    return UpdateResult(epochs, final_loss=loss)
