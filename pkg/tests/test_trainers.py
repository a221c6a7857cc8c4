import math

import numpy as np
import pytest

from ucha.env import EnvConfig, VREnv, make_profiles, state_dim_agent1, state_dim_agent2
from ucha.ppo import PpoHyper, RolloutBuffer
from ucha.rng import RandomStream
from ucha.trainers import (Algo, Collector, agents_tensors, build_agents, decide_channels, decide_power,
                           evaluate, load_agents_tensors, train, update)

SMALL = PpoHyper(hidden=[16, 16], segment_length=64, batch_size=32, epochs=2, dtype="float64")


def _setup(kind, n_vus=3, n_channels=2, hyper=SMALL, seed=0):
    cfg = EnvConfig(n_vus=n_vus, n_channels=n_channels)
    prof = make_profiles(cfg, [], RandomStream(seed).substream("profiles"))
    agents = build_agents(kind, cfg, hyper, RandomStream(seed).substream("init"))
    env = VREnv(cfg, prof, RandomStream(seed).substream("env"))
    return cfg, prof, agents, env


def _collect(agents, env, n, seed=0):
    col = Collector(env, agents, RandomStream(seed).substream("policy"))
    buf = RolloutBuffer(n_vus=agents.n_vus, policy_version=agents.version)
    for _ in range(n):
        col.step(buf)
    return col, buf


def _params(agents):
    return {k: v.copy() for k, v in agents_tensors(agents).items()}


def _same(a, b, prefix=""):
    return all(np.array_equal(a[k], b[k]) for k in a if k.startswith(prefix))


# --- construction ---------------------------------------------------------------

def test_agent_shapes():
    cfg, _, ucha, _ = _setup("ucha")
    assert ucha.critic.n_heads == 3 and ucha.critic2 is None
    happo = build_agents("happo", cfg, SMALL, RandomStream(0))
    assert happo.critic.values(np.zeros(state_dim_agent1(3, 2))).shape == (1,)
    ippo = build_agents("ippo", cfg, SMALL, RandomStream(0))
    assert ippo.critic2.net.sizes[0] == state_dim_agent2(3, 2) and ippo.critic2.n_heads == 3
    rnd = build_agents("random", cfg, SMALL, RandomStream(0))
    assert rnd.actor1 is None and rnd.critic is None


# --- collection -----------------------------------------------------------------

def test_random_actions():
    cfg, _, agents, env = _setup("random", n_vus=2, n_channels=3)
    s = RandomStream(4)
    counts = np.zeros(16)
    for _ in range(16_000):
        dec = decide_power(agents, decide_channels(agents, env.reset(), s), s)
        counts[dec.a1] += 1
        assert dec.logp1 == pytest.approx(-math.log(16))
        assert dec.portions.sum() == pytest.approx(1.0) and np.all(dec.portions >= 0)
    assert np.allclose(counts / 16_000, 1 / 16, atol=0.01)


def test_recorded_logprobs_reproduce_density():
    _, _, agents, env = _setup("ucha")
    _, buf = _collect(agents, env, 50)
    arr = buf.arrays()
    lp1 = agents.actor1.log_prob(arr["s1"], arr["a1"])
    lp2 = agents.actor2.log_prob(arr["s2"], arr["a2"])
    assert np.allclose(lp1, arr["logp1"], rtol=0, atol=1e-10)
    assert np.allclose(lp2, arr["logp2"], rtol=0, atol=1e-10)


def test_s2_is_action_then_s1():
    _, _, agents, env = _setup("ucha")
    _, buf = _collect(agents, env, 20)
    arr = buf.arrays()
    from ucha.env import decode_action
    for s1, s2, a1 in zip(arr["s1"], arr["s2"], arr["a1"]):
        assert np.array_equal(s2[:3], decode_action(int(a1), 3, 2) / 2) and np.array_equal(s2[3:], s1)


def test_collector_handles_episode_boundaries():
    _, _, agents, env = _setup("ucha")
    col, buf = _collect(agents, env, 400)
    arr = buf.arrays()
    assert arr["done"].any()
    for t in np.flatnonzero(~arr["done"][:-1]):
        assert np.array_equal(arr["next_s1"][t], arr["s1"][t + 1])
        assert np.array_equal(arr["next_s2"][t], arr["s2"][t + 1])
    # a finished episode is followed by a fresh one at t = 0
    for t in np.flatnonzero(arr["done"][:-1]):
        assert arr["s1"][t + 1][-1] == 1.0
    assert len(col.finished_returns) == int(arr["done"].sum())


def test_episodes_never_exceed_horizon():
    _, _, agents, env = _setup("random")
    col = Collector(env, agents, RandomStream(1))
    lengths, t = [], 0
    for _ in range(1000):
        t += 1
        if col.step().done:
            lengths.append(t)
            t = 0
    assert lengths and max(lengths) <= 90 and len(lengths) == len(col.finished_returns)


# --- updates --------------------------------------------------------------------

def test_update_requires_on_policy_buffer():
    _, _, agents, env = _setup("ucha")
    _, buf = _collect(agents, env, 64)
    update(agents, buf, SMALL, RandomStream(0))
    with pytest.raises(RuntimeError):
        update(agents, buf, SMALL, RandomStream(0))
    with pytest.raises(ValueError):
        update(build_agents("random", EnvConfig(), SMALL, RandomStream(0)), buf, SMALL, RandomStream(0))


def test_update_changes_parameters_and_bumps_version():
    _, _, agents, env = _setup("ucha")
    before = _params(agents)
    _, buf = _collect(agents, env, 64)
    stats = update(agents, buf, SMALL, RandomStream(0))
    assert agents.version == 1 and stats.minibatch_steps == 4
    assert not _same(before, _params(agents), "actor1") and not _same(before, _params(agents), "critic/")
    assert stats.critic_loss_per_head.shape == (3,)


def test_zero_advantages_leave_actors_unchanged():
    hyper = SMALL.model_copy(update={"ent_coef_discrete": 0.0})
    _, _, agents, env = _setup("ucha", hyper=hyper)
    for net in (agents.critic.net, agents.critic.target):
        for p in net.params():
            p[...] = 0
    _, buf = _collect(agents, env, 64)
    buf.r1 = [np.zeros(3) for _ in buf.r1]
    buf.r2 = [np.zeros(3) for _ in buf.r2]
    before = _params(agents)
    update(agents, buf, hyper, RandomStream(0))
    after = _params(agents)
    assert _same(before, after, "actor1") and _same(before, after, "actor2")


def test_critic_regression_on_frozen_policy():
    hyper = PpoHyper(hidden=[32, 32], segment_length=256, batch_size=64, epochs=4, lr_critic=1e-3,
                     dtype="float64")
    _, _, agents, env = _setup("ucha", hyper=hyper)
    col = Collector(env, agents, RandomStream(1))
    frozen = _params(agents)
    losses = []
    mb = RandomStream(2)
    for _ in range(50):
        buf = RolloutBuffer(n_vus=3, policy_version=agents.version)
        for _ in range(256):
            col.step(buf)
        stats = update(agents, buf, hyper, mb, update_agent1=False, update_agent2=False)
        losses.append(stats.critic_loss_per_head.sum())
    assert _same(frozen, _params(agents), "actor")
    assert losses[-1] <= 0.5 * losses[0]


def _copy_buffer(buf):
    out = RolloutBuffer(n_vus=buf.n_vus, policy_version=buf.policy_version)
    for k, v in vars(buf).items():
        setattr(out, k, list(v) if isinstance(v, list) else v)
    return out


def test_happo_only_sees_reward_totals():
    """Spreading each step's total evenly over the VUs (r/N each) changes nothing for HAPPO."""
    _, _, a, env = _setup("happo")
    _, buf = _collect(a, env, 64)
    b = build_agents("happo", EnvConfig(n_vus=3, n_channels=2), SMALL, RandomStream(0).substream("init"))
    even = _copy_buffer(buf)
    even.r1 = [np.full(3, r.sum() / 3) for r in buf.r1]
    even.r2 = [np.full(3, r.sum() / 3) for r in buf.r2]
    update(a, buf, SMALL, RandomStream(5))
    update(b, even, SMALL, RandomStream(5))
    pa, pb = _params(a), _params(b)
    assert all(np.allclose(pa[k], pb[k], rtol=0, atol=1e-12) for k in pa)


def test_ippo_agent1_ignores_r2():
    _, _, a, env = _setup("ippo")
    _, buf = _collect(a, env, 64)
    b = build_agents("ippo", EnvConfig(n_vus=3, n_channels=2), SMALL, RandomStream(0).substream("init"))
    buf2 = _copy_buffer(buf)
    buf2.r2 = [r * 0 + 7.0 for r in buf.r2]
    update(a, buf, SMALL, RandomStream(5))
    update(b, buf2, SMALL, RandomStream(5))
    pa, pb = _params(a), _params(b)
    assert _same(pa, pb, "actor1") and _same(pa, pb, "critic/") and _same(pa, pb, "critic_target")
    assert not _same(pa, pb, "actor2")


def test_ippo_disabling_agent2_keeps_agent1_math():
    _, _, a, env = _setup("ippo")
    _, buf = _collect(a, env, 64)
    b = build_agents("ippo", EnvConfig(n_vus=3, n_channels=2), SMALL, RandomStream(0).substream("init"))
    update(a, buf, SMALL, RandomStream(5))
    update(b, buf, SMALL, RandomStream(5), update_agent2=False)
    pa, pb = _params(a), _params(b)
    assert _same(pa, pb, "actor1") and _same(pa, pb, "critic/")
    assert not _same(pa, pb, "actor2") and not _same(pa, pb, "critic2/")


def test_ucha_equals_happo_with_one_vu():
    hyper = SMALL
    runs = {}
    for kind in ("ucha", "happo"):
        _, _, agents, env = _setup(kind, n_vus=1, n_channels=2, hyper=hyper)
        col = Collector(env, agents, RandomStream(3))
        mb = RandomStream(4)
        for _ in range(3):
            buf = RolloutBuffer(n_vus=1, policy_version=agents.version)
            for _ in range(64):
                col.step(buf)
            update(agents, buf, hyper, mb)
        runs[kind] = _params(agents)
    assert runs["ucha"].keys() == runs["happo"].keys()
    assert all(np.array_equal(runs["ucha"][k], runs["happo"][k]) for k in runs["ucha"])


# --- evaluation -----------------------------------------------------------------

def test_random_evaluation_protocol():
    cfg = EnvConfig()
    prof = make_profiles(cfg, [], RandomStream(0))
    agents = build_agents("random", cfg, SMALL, RandomStream(0))
    rep = evaluate(cfg, prof, agents, 3, RandomStream(1), RandomStream(2))
    assert rep.success.shape == (3, 90, 5)
    # every slot of every episode was played: rung counts cover all 90 frames
    assert np.allclose(rep.rung_counts.sum(axis=1), 90)
    for value in (rep.mean_reward, rep.worst_vu_frames, rep.sum_energy):
        assert np.isfinite(value)
    assert np.all(np.isfinite(rep.fps)) and np.all(np.isfinite(rep.energy_per_vu))


def test_evaluation_metrics_recomputed_from_flags():
    cfg = EnvConfig(n_vus=3)
    prof = make_profiles(cfg, [], RandomStream(0))
    agents = build_agents("random", cfg, SMALL, RandomStream(0))
    rep = evaluate(cfg, prof, agents, 4, RandomStream(1), RandomStream(2))
    tau = np.array([p.tau_f for p in prof])
    worst = np.mean([min(rep.success[e, :, n].sum() - tau[n] for n in range(3)) for e in range(4)])
    assert rep.worst_vu_frames == pytest.approx(worst)
    energy = np.mean([sum(rep.energy[e, t, n] for t in range(90) for n in range(3)) for e in range(4)])
    assert rep.sum_energy == pytest.approx(energy)
    assert np.all(rep.energy[:, :, rep.local_fraction == 0] == 0)


def test_evaluation_scenarios_repeat():
    cfg = EnvConfig(n_vus=2)
    prof = make_profiles(cfg, [], RandomStream(0))
    agents = build_agents("random", cfg, SMALL, RandomStream(0))
    a = evaluate(cfg, prof, agents, 2, RandomStream(1), RandomStream(2))
    b = evaluate(cfg, prof, agents, 2, RandomStream(1), RandomStream(2))
    assert np.array_equal(a.success, b.success) and np.array_equal(a.energy, b.energy)


# --- full runs ------------------------------------------------------------------

def test_train_schedule_and_determinism():
    cfg = EnvConfig(n_vus=2, n_channels=2)
    prof = make_profiles(cfg, [], RandomStream(0))
    r1 = train("ucha", cfg, prof, SMALL, 7, 250, eval_interval=100, eval_episodes=2)
    r2 = train("ucha", cfg, prof, SMALL, 7, 250, eval_interval=100, eval_episodes=2)
    assert [e.step for e in r1.events] == [100, 200, 250]
    for x, y in zip(r1.events, r2.events):
        assert x.report.mean_reward == y.report.mean_reward
        assert np.array_equal(x.critic_loss_per_head, y.critic_loss_per_head)
    assert np.isfinite(r1.train_step_ms) and np.isfinite(r1.exec_step_ms)


def test_random_run_has_no_train_time():
    cfg = EnvConfig(n_vus=2, n_channels=2)
    prof = make_profiles(cfg, [], RandomStream(0))
    res = train("random", cfg, prof, SMALL, 0, 120, eval_interval=60, eval_episodes=1)
    assert math.isnan(res.train_step_ms) and len(res.events) == 2
    assert res.events[0].critic_loss_per_head is None


def test_agent_tensor_roundtrip():
    _, _, a, _ = _setup("ippo")
    b = build_agents("ippo", EnvConfig(n_vus=3, n_channels=2), SMALL, RandomStream(99))
    load_agents_tensors(b, agents_tensors(a))
    assert _same(_params(a), _params(b))
    with pytest.raises(ValueError):
        load_agents_tensors(build_agents("ippo", EnvConfig(n_vus=2, n_channels=2), SMALL, RandomStream(0)),
                            agents_tensors(a))


def test_algo_names():
    assert [a.value for a in Algo] == ["ucha", "happo", "ippo", "random"]
    with pytest.raises(ValueError):
        Algo("mappo")
