import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flowrl.config import PolicyConfig, DEFAULT_EDGES, DEFAULT_PROBES
from flowrl.flow_env import ProbeGraph, ProbeLayout
from flowrl.neural import DenseLayer, Network, adjacency_normalize
from flowrl.policies import (Actor, GaussianPolicyHead, kl_fixed_sigma,
                             log_prob, make_actor)

N = 11
ADJ = adjacency_normalize(DEFAULT_EDGES, N)


def small_mlp_actor(seed=0, sigma=0.3, bound=1.0, scale=1.0):
    rng = np.random.default_rng(seed)
    net = Network([
        DenseLayer(rng.normal(size=(8, N)) * 0.5, rng.normal(size=8) * 0.1,
                   "tanh"),
        DenseLayer(rng.normal(size=(1, 8)) * scale, np.zeros(1), "identity"),
    ])
    return Actor("mlp", net, GaussianPolicyHead(sigma, bound))


def random_graph(seed=0):
    rng = np.random.default_rng(seed)
    return ProbeGraph(rng.normal(size=N), rng.normal(size=(N, 2)), ADJ)


# ------------------------------------------------------------ action head


def test_zero_network_output_gives_zero_action():
    head = GaussianPolicyHead(0.02, 0.1)
    assert head.squash(0.0) == 0.0


def test_squash_saturates_at_bound():
    head = GaussianPolicyHead(0.02, 0.1)
    assert head.squash(50.0) == pytest.approx(0.1, abs=1e-12)
    assert head.squash(-50.0) == pytest.approx(-0.1, abs=1e-12)


@settings(max_examples=200, deadline=None)
@given(st.floats(allow_nan=False, allow_infinity=False))
def test_action_always_within_bound(u):
    head = GaussianPolicyHead(0.02, 0.1)
    assert abs(head.squash(u)) <= 0.1


def test_log_prob_peak_value():
    head = GaussianPolicyHead(0.02, 0.1)
    expect = -0.5 * math.log(2 * math.pi * 0.02**2)
    assert log_prob(head, 0.3, 0.3) == pytest.approx(expect, rel=1e-14)


def test_log_prob_one_sigma_identity():
    head = GaussianPolicyHead(0.05, 1.0)
    peak = log_prob(head, 0.0, 0.0)
    assert log_prob(head, 0.0, 0.05) == pytest.approx(peak - 0.5, rel=1e-12)


def test_log_prob_integrates_to_one():
    # trapezoid quadrature over +-12 sigma
    head = GaussianPolicyHead(0.02, 0.1)
    mean = 0.137
    u = np.linspace(mean - 12 * head.sigma, mean + 12 * head.sigma, 20001)
    dens = np.exp(log_prob(head, mean, u))
    integral = np.trapezoid(dens, u)
    assert integral == pytest.approx(1.0, abs=1e-6)


def test_sampling_stays_within_bound():
    head = GaussianPolicyHead(0.02, 0.1)
    rng = np.random.default_rng(0)
    for _ in range(100):
        _, a = head.sample(rng.normal() * 10, rng)
        assert abs(a) <= 0.1


# ---------------------------------------------------------------------- kl


def test_kl_identical_means_is_zero():
    assert kl_fixed_sigma(np.zeros(5), np.zeros(5), 0.02) == 0.0


def test_kl_sigma_shift_is_half():
    sigma = 0.02
    means = np.full(7, 0.3)
    assert kl_fixed_sigma(means, means + sigma, sigma) == pytest.approx(0.5,
                                                                        rel=1e-12)


def test_kl_threshold_crossing_shift():
    # a mean shift of sigma * sqrt(0.05) sits exactly at the 0.025 threshold
    sigma = 0.02
    shift = sigma * math.sqrt(2 * 0.025)
    assert kl_fixed_sigma(0.0, shift * 1.001, sigma) > 0.025
    assert kl_fixed_sigma(0.0, shift * 0.999, sigma) < 0.025


# --------------------------------------------------------------- actors


def test_actor_forward_returns_mean_and_squashed():
    actor = small_mlp_actor()
    obs = np.zeros(N)
    mean, greedy = actor.forward(obs)
    assert greedy == actor.head.squash(mean)


def test_greedy_evaluation_is_bit_reproducible():
    actor = small_mlp_actor(seed=3)
    graph = random_graph(5)
    a1 = actor.act_greedy(graph)
    a2 = actor.act_greedy(graph)
    assert a1 == a2


def test_sigma_zero_limit_equals_greedy():
    # a degenerate Gaussian collapses sampling onto the mean
    actor = small_mlp_actor(sigma=1e-9)
    graph = random_graph(1)
    rng = np.random.default_rng(0)
    u, a, _ = actor.act_stochastic(graph, rng)
    assert a == pytest.approx(actor.act_greedy(graph), abs=1e-8)


def test_gcnn_policy_permutation_invariant_100():
    cfg = PolicyConfig(kind="gcnn")
    actor = make_actor(cfg, ADJ, action_bound=0.1, seed=7)
    graph = random_graph(11)
    base = actor.act_greedy(graph)
    rng = np.random.default_rng(123)
    worst = 0.0
    for _ in range(100):
        perm = rng.permutation(N)
        a = actor.act_greedy(graph.permuted(perm))
        worst = max(worst, abs(a - base))
    assert worst <= 1e-12


def test_mlp_policy_changes_under_permutation():
    actor = small_mlp_actor(scale=1.0)
    graph = random_graph(11)
    base = actor.act_greedy(graph)
    perm = np.roll(np.arange(N), 3)
    shuffled = actor.act_greedy(graph.permuted(perm))
    assert abs(shuffled - base) > 1e-6


def test_actor_rejects_wrong_input_width():
    actor = small_mlp_actor()
    from flowrl.neural import ShapeError
    with pytest.raises(ShapeError):
        actor.mean(np.zeros(N + 1))


# ------------------------------------------------- observation invariance


def test_observation_invariant_under_domain_translation():
    rel = np.array(DEFAULT_PROBES)
    a = ProbeLayout.from_relative(rel, (2.0, 2.0), 1.0,
                                  list(DEFAULT_EDGES), ADJ)
    b = ProbeLayout.from_relative(rel, (7.5, 3.0), 1.0,
                                  list(DEFAULT_EDGES), ADJ)
    assert a.normalized.tobytes() == b.normalized.tobytes()


def test_normalized_coordinates_order():
    # first component wall-parallel (x), second wall-normal (y)
    pos = np.array([[3.0, 2.5]])
    layout = ProbeLayout(pos, (2.0, 2.0), 1.0, [], np.zeros((1, 1)))
    np.testing.assert_array_equal(layout.normalized, [[1.0, 0.5]])
