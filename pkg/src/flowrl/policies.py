"""Actor and critic networks plus the stochastic action head.

The actor emits a single pre-squash scalar. During training that scalar is
the mean of a fixed-sigma Gaussian; samples are squashed through a sigmoid
and scaled to the jet bound before being applied. Because the squashing is
a fixed monotone bijection, probability ratios and KL divergences between
policies are identical in the pre-squash and squashed variables, so all
densities are evaluated on the pre-squash axis where they stay well defined
at the bound. Greedy evaluation maps the mean through the same squash.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import PolicyConfig, ConfigError
from .flow_env import ProbeGraph
from .neural import (DenseLayer, GraphAverage, GraphConvLayer, Network,
                     ScaleLayer, orthogonal_init)


@dataclass
class GaussianPolicyHead:
    sigma: float
    action_bound: float

    def __post_init__(self):
        if self.sigma <= 0:
            raise ConfigError("policy sigma must be positive")
        if self.action_bound <= 0:
            raise ConfigError("action bound must be positive")

    def squash(self, u):
        """Map a pre-squash value to the bounded jet strength."""
        return (2.0 / (1.0 + np.exp(-np.asarray(u, dtype=float))) - 1.0) \
            * self.action_bound

    def sample(self, mean, rng: np.random.Generator):
        u = rng.normal(loc=mean, scale=self.sigma)
        return u, self.squash(u)

    def log_prob(self, mean, u):
        mean = np.asarray(mean, dtype=float)
        u = np.asarray(u, dtype=float)
        return (-0.5 * ((u - mean) / self.sigma) ** 2
                - 0.5 * math.log(2.0 * math.pi * self.sigma**2))


def log_prob(head: GaussianPolicyHead, mean, action):
    return head.log_prob(mean, action)


def kl_fixed_sigma(mean_old, mean_new, sigma: float) -> float:
    """Mean KL between equal-sigma Gaussians: (dm)^2 / (2 sigma^2)."""
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    d = np.asarray(mean_old, dtype=float) - np.asarray(mean_new, dtype=float)
    return float(np.mean(d * d) / (2.0 * sigma**2))


def _dense(rng, n_out, n_in, activation, gain=1.0):
    w = orthogonal_init(rng, n_out, n_in, gain)
    return DenseLayer(w, np.zeros(n_out), activation)


def build_mlp_actor_net(cfg: PolicyConfig, seed: int,
                        n_inputs: int = 11) -> Network:
    """Fully connected actor: n_inputs -> hidden layers -> 1 scalar."""
    rng = np.random.default_rng(seed)
    h1, h2 = cfg.mlp_hidden
    layers = [
        _dense(rng, h1, n_inputs, "tanh", math.sqrt(2.0)),
        _dense(rng, h2, h1, "tanh", math.sqrt(2.0)),
        _dense(rng, 1, h2, "identity", cfg.init_final_scale),
    ]
    return Network(layers)


def build_gcnn_actor_net(cfg: PolicyConfig, adjacency: np.ndarray,
                         seed: int, n_features: int = 3) -> Network:
    """Encoder -> two message-passing layers -> decoder -> average -> scalar."""
    rng = np.random.default_rng(seed)
    enc = cfg.gcnn_encoder
    m1, m2 = cfg.gcnn_message
    dec = cfg.gcnn_decoder
    layers = [
        _dense(rng, enc, n_features, "tanh", math.sqrt(2.0)),
        GraphConvLayer(orthogonal_init(rng, m1, enc, math.sqrt(2.0)),
                       np.zeros(m1), adjacency, "tanh"),
        GraphConvLayer(orthogonal_init(rng, m2, m1, math.sqrt(2.0)),
                       np.zeros(m2), adjacency, "tanh"),
        _dense(rng, dec, m2, "tanh", math.sqrt(2.0)),
        GraphAverage(),
        _dense(rng, 1, dec, "identity", cfg.init_final_scale),
    ]
    return Network(layers)


def build_critic_net(cfg: PolicyConfig, seed: int, n_inputs: int = 11,
                     scale_init: float = 1.0) -> Network:
    """MLP critic with a tanh-bounded output times one learnable scale."""
    rng = np.random.default_rng(seed)
    h1, h2 = cfg.critic_hidden
    layers = [
        _dense(rng, h1, n_inputs, "tanh", math.sqrt(2.0)),
        _dense(rng, h2, h1, "tanh", math.sqrt(2.0)),
        _dense(rng, 1, h2, "tanh", 1.0),
        ScaleLayer(scale_init),
    ]
    return Network(layers)


class Actor:
    """Policy wrapper: observation formatting + the Gaussian head.

    A graph actor always evaluates with the adjacency carried by the
    observation, so a consistently relabeled probe graph (features and
    edges permuted together) is processed on its own connectivity.
    """

    def __init__(self, kind: str, net: Network, head: GaussianPolicyHead):
        if kind not in ("mlp", "gcnn"):
            raise ConfigError(f"unknown actor kind {kind!r}")
        self.kind = kind
        self.net = net
        self.head = head

    def features(self, obs) -> np.ndarray:
        """Network input for one observation or a batch of them."""
        if self.kind == "mlp":
            if isinstance(obs, ProbeGraph):
                return obs.delta_p
            return np.asarray(obs, dtype=float)
        if isinstance(obs, ProbeGraph):
            return obs.features
        return np.asarray(obs, dtype=float)

    def _sync_adjacency(self, adjacency: np.ndarray) -> None:
        for layer in self.net.layers:
            if isinstance(layer, GraphConvLayer) and layer.coeffs is not adjacency:
                layer.coeffs = adjacency

    def mean(self, obs) -> np.ndarray:
        """Pre-squash Gaussian mean(s); last singleton axis removed."""
        if self.kind == "gcnn" and isinstance(obs, ProbeGraph):
            self._sync_adjacency(obs.adjacency)
        out = self.net.forward(self.features(obs))
        return np.squeeze(out, axis=-1)

    def forward(self, obs):
        """(pre-squash mean, squashed greedy action)."""
        m = self.mean(obs)
        return m, self.head.squash(m)

    def act_greedy(self, obs) -> float:
        return float(self.forward(obs)[1])

    def act_stochastic(self, obs, rng: np.random.Generator):
        """(pre-squash sample u, bounded action, log-probability)."""
        m = self.mean(obs)
        u, a = self.head.sample(m, rng)
        return float(u), float(a), float(self.head.log_prob(m, u))


def actor_forward(actor: Actor, obs):
    return actor.forward(obs)


def make_actor(cfg: PolicyConfig, adjacency: np.ndarray, action_bound: float,
               seed: int) -> Actor:
    head = GaussianPolicyHead(cfg.sigma, action_bound)
    if cfg.kind == "mlp":
        net = build_mlp_actor_net(cfg, seed)
    else:
        net = build_gcnn_actor_net(cfg, adjacency, seed)
    return Actor(cfg.kind, net, head)


class Critic:
    """State-value estimator on the canonical pressure observation."""

    def __init__(self, net: Network):
        self.net = net

    def value(self, obs_batch: np.ndarray) -> np.ndarray:
        out = self.net.forward(np.asarray(obs_batch, dtype=float))
        return np.squeeze(out, axis=-1)


def make_critic(cfg: PolicyConfig, seed: int, scale_init: float = 1.0) -> Critic:
    return Critic(build_critic_net(cfg, seed, scale_init=scale_init))


def gcnn_parameter_counts(cfg: PolicyConfig, adjacency: np.ndarray) -> list[int]:
    """Trainable parameters per layer of the graph actor."""
    net = build_gcnn_actor_net(cfg, adjacency, seed=0)
    return net.layer_param_counts()
