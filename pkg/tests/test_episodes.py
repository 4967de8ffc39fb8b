import csv

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ntkcpg.envs import Cartpole
from ntkcpg.episodes import (
    EpisodeBatch,
    compute_returns,
    expand_returns,
    rollout,
    sample_action,
    write_batch_csv,
)
from ntkcpg.policy import WideReluNet, init

rewards = st.lists(st.floats(-10, 10), min_size=1, max_size=40)


def test_returns_by_hand():
    np.testing.assert_allclose(compute_returns([1, 1, 1], 0.5), [0.75, 0.5, 0.0])
    np.testing.assert_allclose(compute_returns([1, 1, 1], 1.0), [2.0, 1.0, 0.0])
    assert not compute_returns(np.zeros(6), 0.9).any()


def test_classic_returns_by_hand():
    np.testing.assert_allclose(compute_returns([1, 1, 1], 0.5, "classic"), [1.75, 1.5, 1.0])


def test_returns_reject_bad_input():
    with pytest.raises(ValueError):
        compute_returns([1.0], 0.0)
    with pytest.raises(ValueError):
        compute_returns([1.0], 0.9, "fancy")


@settings(max_examples=100, deadline=None)
@given(rewards, st.floats(0.01, 1.0))
def test_suffix_recursion(r, gamma):
    G = compute_returns(r, gamma)
    assert G[-1] == 0.0
    for k in range(len(r) - 1):
        assert G[k] == pytest.approx(gamma * (r[k + 1] + G[k + 1]), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 30), st.integers(0, 2**32 - 1), st.floats(0.01, 1.0))
def test_returns_linear(n, seed, gamma):
    rng = np.random.default_rng(seed)
    r1, r2 = rng.standard_normal(n), rng.standard_normal(n)
    lhs = compute_returns(r1 + r2, gamma)
    rhs = compute_returns(r1, gamma) + compute_returns(r2, gamma)
    assert np.abs(lhs - rhs).max() < 1e-12


def test_expand_by_hand():
    np.testing.assert_array_equal(expand_returns([0.75, 0.5], [0, 1], 2), [0.75, 0, 0, 0.5])
    np.testing.assert_array_equal(expand_returns([0.0, 0.0], [1, 0], 2), np.zeros(4))
    np.testing.assert_array_equal(expand_returns([3.0], [2], 4), [0, 0, 3, 0])


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 20), st.integers(2, 5), st.integers(0, 2**32 - 1))
def test_expand_conserves_mass(n, n_a, seed):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal(n)
    out = expand_returns(G, rng.integers(0, n_a, n), n_a)
    assert out.shape == (n * n_a,)
    assert out.sum() == pytest.approx(G.sum(), abs=1e-12)


def test_sample_action_inverse_cdf():
    p = np.array([0.2, 0.5, 0.3])
    assert sample_action(p, 0.0) == 0
    assert sample_action(p, 0.19) == 0
    assert sample_action(p, 0.2) == 1
    assert sample_action(p, 0.69) == 1
    assert sample_action(p, 0.71) == 2
    assert sample_action(p, 0.999999) == 2


def test_rollout_deterministic_and_bounded(small_net):
    a = rollout(Cartpole(), small_net, np.random.default_rng(5), 200)
    b = rollout(Cartpole(), small_net, np.random.default_rng(5), 200)
    assert np.array_equal(a.states, b.states) and np.array_equal(a.actions, b.actions)
    assert len(a) <= 200
    short = rollout(Cartpole(), small_net, np.random.default_rng(5), 3)
    assert len(short) <= 3


def _balancer():
    # logit(push right) - logit(push left) = 100 * (phi + phi_dot), so it pushes toward the fall
    W1 = np.array([[0, 0, 1.0, 1.0], [0, 0, -1.0, -1.0]])
    W2 = np.array([[-100.0, 100.0], [100.0, -100.0]])
    return WideReluNet(W1, np.zeros(2), W2, np.zeros(2))


def test_balancing_policy_survives():
    batch = rollout(Cartpole(), _balancer(), np.random.default_rng(0), 200)
    assert batch.raw_steps == 200


def test_thinning_keeps_every_tth_step():
    full = rollout(Cartpole(), _balancer(), np.random.default_rng(0), 200)
    thin = rollout(Cartpole(), _balancer(), np.random.default_rng(0), 200, thinning=10)
    assert len(thin) == 20 and thin.raw_steps == 200
    np.testing.assert_array_equal(thin.states, full.states[::10])
    assert thin.rewards.sum() == full.rewards.sum()
    np.testing.assert_array_equal(thin.rewards, np.full(20, 10.0))


def test_batch_validation():
    with pytest.raises(ValueError):
        EpisodeBatch(np.zeros((2, 4)), [0], [1.0])
    with pytest.raises(ValueError):
        EpisodeBatch(np.zeros((0, 4)), [], [])


def test_batch_csv(tmp_path):
    net = init(4, 8, 2, 0)
    b = rollout(Cartpole(), net, np.random.default_rng(1), 20)
    G = compute_returns(b.rewards, 0.99)
    path = tmp_path / "batch.csv"
    write_batch_csv(path, b, G)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["step", "s_0", "s_1", "s_2", "s_3", "action", "reward", "return"]
    assert len(rows) == len(b) + 1
    assert float(rows[1][-1]) == G[0]
