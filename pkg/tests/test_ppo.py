import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from pydantic import ValidationError

from ucha.ppo import (CriticHeads, PpoHyper, RolloutBuffer, compute_gae, minibatch_iterate, normalize,
                      value_targets)
from ucha.rng import RandomStream

from gradcheck import check_gradients
from oracles import brute_force_gae


def _gae(rewards, values, next_values, dones, gamma, lam):
    col = lambda x: np.asarray(x, dtype=float)[:, None]
    return compute_gae(col(rewards), col(values), col(next_values), dones, gamma, lam)[:, 0]


def test_zero_deltas():
    r = np.zeros(5)
    assert np.all(_gae(r, r, r, [False] * 5, 0.99, 0.95) == 0)


def test_lambda_zero_is_td_error():
    rng = np.random.default_rng(0)
    r, v, nv = rng.standard_normal((3, 6))
    adv = _gae(r, v, nv, [False] * 6, 0.9, 0.0)
    assert np.allclose(adv, r + 0.9 * nv - v, rtol=0, atol=1e-15)


def test_two_step_example():
    # delta = (1, 1) with gamma*lambda = 0.5
    adv = _gae([1.0, 1.0], [0.0, 0.0], [0.0, 0.0], [False, False], 1.0, 0.5)
    assert adv.tolist() == [1.5, 1.0]


def test_done_cuts_the_recursion():
    adv = _gae([1.0, 1.0, 1.0], [0.0] * 3, [0.0] * 3, [False, True, False], 1.0, 1.0)
    assert adv.tolist() == [2.0, 1.0, 1.0]


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 16), st.floats(0.5, 1.0), st.floats(0.0, 1.0), st.integers(0, 2**32 - 1))
def test_gae_matches_oracle(length, gamma, lam, seed):
    rng = np.random.default_rng(seed)
    r, v, nv = rng.standard_normal((3, length))
    dones = rng.random(length) < 0.2
    nv = np.where(dones, 0.0, nv)
    ours = _gae(r, v, nv, dones, gamma, lam)
    assert np.allclose(ours, brute_force_gae(r, v, nv, dones, gamma, lam), rtol=0, atol=1e-9)


def test_gae_columns_are_independent():
    rng = np.random.default_rng(3)
    r, v, nv = rng.standard_normal((3, 10, 4))
    dones = np.zeros(10, dtype=bool)
    full = compute_gae(r, v, nv, dones, 0.99, 0.95)
    for k in range(4):
        assert np.allclose(full[:, k], _gae(r[:, k], v[:, k], nv[:, k], dones, 0.99, 0.95))


def test_gae_of_summed_rewards_is_sum_of_gaes():
    rng = np.random.default_rng(4)
    r = rng.standard_normal((12, 3))
    zeros = np.zeros((12, 3))
    dones = rng.random(12) < 0.2
    per_vu = compute_gae(r, zeros, zeros, dones, 0.99, 0.95).sum(axis=1)
    summed = compute_gae(r.sum(axis=1, keepdims=True), zeros[:, :1], zeros[:, :1], dones, 0.99, 0.95)[:, 0]
    assert np.allclose(per_vu, summed, rtol=0, atol=1e-12)


def test_value_target_modes():
    adv, v = np.array([1.0, 2.0]), np.array([10.0, -4.0])
    assert value_targets(adv, v, 0.9, "standard").tolist() == [11.0, -2.0]
    assert np.allclose(value_targets(adv, v, 0.9, "discounted"), [10.0, -1.6])


def test_normalize():
    x = normalize(np.array([1.0, 2.0, 3.0, 4.0]))
    assert abs(x.mean()) < 1e-12 and abs(x.std() - 1) < 1e-6
    assert normalize(np.array([5.0])).tolist() == [0.0]


def test_minibatches_partition():
    batches = minibatch_iterate(10, 4, RandomStream(0))
    assert [len(b) for b in batches] == [4, 4, 2]
    assert sorted(np.concatenate(batches).tolist()) == list(range(10))
    whole = minibatch_iterate(7, 7, RandomStream(0))
    assert len(whole) == 1 and sorted(whole[0].tolist()) == list(range(7))
    a = np.concatenate(minibatch_iterate(50, 8, RandomStream(1)))
    b = np.concatenate(minibatch_iterate(50, 8, RandomStream(2)))
    assert not np.array_equal(a, b)


def test_hyper_validation():
    with pytest.raises(ValidationError):
        PpoHyper(gamma=0.0)
    with pytest.raises(ValidationError):
        PpoHyper(lam=1.5)
    with pytest.raises(ValidationError):
        PpoHyper(target_sync=0)
    with pytest.raises(ValidationError):
        PpoHyper(value_target="other")


# --- critic -----------------------------------------------------------------------

def _critic(n_heads=2, obs_dim=4, hidden=(8, 8), **kw):
    return CriticHeads(obs_dim, n_heads, list(hidden), RandomStream(0), PpoHyper(**kw))


def test_critic_loss_examples():
    c = _critic(2)
    obs = np.ones((1, 4))
    for p in c.net.params():
        p[...] = 0
    loss, _, per_head = c.loss_and_grads(obs, np.array([[1.0, -1.0]]))
    assert loss == 2.0 and per_head.tolist() == [1.0, 1.0]
    loss, grads, _ = c.loss_and_grads(obs, np.zeros((1, 2)))
    assert loss == 0.0 and all(np.all(g == 0) for g in grads)


def test_single_head_is_plain_mse():
    c = _critic(1)
    rng = np.random.default_rng(0)
    obs, tgt = rng.standard_normal((6, 4)), rng.standard_normal((6, 1))
    loss, _, _ = c.loss_and_grads(obs, tgt)
    assert loss == pytest.approx(float(np.mean((c.values(obs) - tgt) ** 2)))


def test_critic_gradient_check():
    rng = np.random.default_rng(1)
    c = _critic(3, obs_dim=5)
    obs, tgt = rng.standard_normal((9, 5)), rng.standard_normal((9, 3))
    _, grads, _ = c.loss_and_grads(obs, tgt)
    assert check_gradients(lambda: c.loss_and_grads(obs, tgt)[0], c.net.params(), grads, rng) < 1e-4


def test_critic_loss_nonnegative_and_zero_iff_match():
    c = _critic(2)
    obs = np.random.default_rng(2).standard_normal((5, 4))
    pred = c.values(obs)
    assert c.loss_and_grads(obs, pred)[0] == 0.0
    assert c.loss_and_grads(obs, pred + 1e-3)[0] > 0.0


def test_target_sync():
    c = _critic(2)
    obs = np.random.default_rng(0).standard_normal((3, 4))
    initial = c.values(obs)
    c.net.weights[0] += 0.5
    assert np.array_equal(c.target_values(obs), initial)
    c.sync_target()
    assert np.array_equal(c.target_values(obs), c.values(obs))
    c.net.weights[0] += 0.5
    assert not np.array_equal(c.target_values(obs), c.values(obs))


@pytest.mark.parametrize("period,expected", [(1, 10), (3, 3), (4, 2), (11, 0)])
def test_sync_period_counting(period, expected):
    c = _critic(1)
    fired = [c.end_epoch(period) for _ in range(10)]
    assert c.syncs == expected == sum(fired)
    assert [i + 1 for i, f in enumerate(fired) if f] == [k for k in range(1, 11) if k % period == 0]


# --- buffer -----------------------------------------------------------------------

def test_buffer_validation():
    buf = RolloutBuffer(n_vus=2)
    buf.add(np.zeros(3), np.zeros(5), 1, np.zeros(2), -1.0, -2.0, np.zeros(2), np.zeros(2), False, False)
    assert len(buf) == 1
    with pytest.raises(ValueError):
        buf.add(np.zeros(3), np.zeros(5), 1, np.zeros(2), -1.0, -2.0, np.zeros(3), np.zeros(2), False, False)
    with pytest.raises(ValueError):
        buf.add(np.zeros(3), np.zeros(5), 1, np.zeros(2), np.nan, -2.0, np.zeros(2), np.zeros(2), False, False)
    buf.next_s1.append(np.zeros(3))
    buf.next_s2.append(np.zeros(5))
    arr = buf.arrays()
    assert arr["r1"].shape == (1, 2) and arr["a1"].dtype == np.int64 and arr["done"].dtype == bool
