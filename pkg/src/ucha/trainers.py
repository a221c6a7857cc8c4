"""Training and evaluation loops for UCHA and the HAPPO / IPPO / RANDOM baselines."""
from __future__ import annotations

import enum
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .env import (EnvConfig, VREnv, decode_action, state_dim_agent1, state_dim_agent2)
from .nn import Adam, CategoricalPolicy, GaussianPolicy, clip_grad_norm, softmax
from .ppo import (CriticHeads, PpoHyper, RolloutBuffer, compute_gae, minibatch_iterate, normalize,
                  value_targets)
from .rng import RandomStream


class Algo(str, enum.Enum):
    UCHA = "ucha"
    HAPPO = "happo"
    IPPO = "ippo"
    RANDOM = "random"


@dataclass
class Agents:
    kind: Algo
    n_vus: int
    n_channels: int
    actor1: Optional[CategoricalPolicy] = None
    actor2: Optional[GaussianPolicy] = None
    opt1: Optional[Adam] = None
    opt2: Optional[Adam] = None
    critic: Optional[CriticHeads] = None     # on s1; N heads (UCHA, IPPO) or 1 head (HAPPO)
    critic2: Optional[CriticHeads] = None    # IPPO only, on s2
    version: int = 0                         # bumped by every update

    @property
    def n_actions(self) -> int:
        return (self.n_channels + 1) ** self.n_vus


def build_agents(kind, env_config: EnvConfig, hyper: PpoHyper, stream: RandomStream) -> Agents:
    kind = Algo(kind)
    n, m = env_config.n_vus, env_config.n_channels
    agents = Agents(kind=kind, n_vus=n, n_channels=m)
    if kind is Algo.RANDOM:
        return agents
    dtype = np.dtype(hyper.dtype)
    d1, d2 = state_dim_agent1(n, m), state_dim_agent2(n, m)
    agents.actor1 = CategoricalPolicy(d1, env_config.n_actions, hyper.hidden, stream.substream("actor1"), dtype)
    agents.actor2 = GaussianPolicy(d2, n, hyper.hidden, stream.substream("actor2"), dtype)
    agents.opt1 = Adam(agents.actor1.params(), hyper.lr_actor, hyper.beta1, hyper.beta2, hyper.adam_eps)
    agents.opt2 = Adam(agents.actor2.params(), hyper.lr_actor, hyper.beta1, hyper.beta2, hyper.adam_eps)
    heads = 1 if kind is Algo.HAPPO else n
    agents.critic = CriticHeads(d1, heads, hyper.hidden, stream.substream("critic"), hyper, dtype)
    if kind is Algo.IPPO:
        agents.critic2 = CriticHeads(d2, n, hyper.hidden, stream.substream("critic2"), hyper, dtype)
    return agents


@dataclass
class Decision:
    s1: np.ndarray
    s2: np.ndarray
    a1: int
    z: np.ndarray
    logp1: float
    a2: Optional[np.ndarray] = None
    portions: Optional[np.ndarray] = None
    logp2: float = 0.0


def decide_channels(agents: Agents, s1, stream: RandomStream, greedy: bool = False) -> Decision:
    if agents.kind is Algo.RANDOM:
        a1 = int(stream.integers(0, agents.n_actions))
        logp1 = -math.log(agents.n_actions)
    elif greedy:
        a1, logp1 = agents.actor1.mode(s1)
    else:
        a1, logp1 = agents.actor1.sample(s1, stream)
    z = decode_action(a1, agents.n_vus, agents.n_channels)
    s2 = np.concatenate([z / agents.n_channels, s1])
    return Decision(s1=s1, s2=s2, a1=a1, z=z, logp1=logp1)


def decide_power(agents: Agents, dec: Decision, stream: RandomStream, greedy: bool = False) -> Decision:
    if agents.kind is Algo.RANDOM:
        # flat Dirichlet: uniform over the simplex
        dec.portions = stream.dirichlet(np.ones(agents.n_vus))
        dec.a2 = dec.portions
        dec.logp2 = math.lgamma(agents.n_vus)
        return dec
    if greedy:
        raw, logp2 = agents.actor2.mode(dec.s2)
    else:
        raw, logp2 = agents.actor2.sample(dec.s2, stream)
    dec.a2 = np.asarray(raw, dtype=np.float64)
    dec.logp2 = logp2
    dec.portions = softmax(dec.a2)
    return dec


class Collector:
    """Steps one training environment across segment boundaries.

    The channel decision for the upcoming state is drawn as soon as that
    state exists, so the buffer always knows the true next agent-2 state.
    """

    def __init__(self, env: VREnv, agents: Agents, stream: RandomStream):
        self.env = env
        self.agents = agents
        self.stream = stream
        self.pending = decide_channels(agents, env.reset(), stream)
        self.episode_return = 0.0
        self.finished_returns: list[float] = []
        self.exec_time = 0.0
        self.exec_steps = 0

    def step(self, buffer: Optional[RolloutBuffer] = None):
        t0 = time.perf_counter()
        dec = decide_power(self.agents, self.pending, self.stream)
        out = self.env.step(dec.z, dec.portions)
        self.exec_time += time.perf_counter() - t0
        self.exec_steps += 1
        self.episode_return += float(out.r1.sum())
        if out.done:
            next_s1 = self.env.observe()
            self.finished_returns.append(self.episode_return)
            self.episode_return = 0.0
            self.pending = decide_channels(self.agents, self.env.reset(), self.stream)
            next_s2 = np.concatenate([np.zeros(self.agents.n_vus), next_s1])
        else:
            self.pending = decide_channels(self.agents, self.env.observe(), self.stream)
            next_s1, next_s2 = self.pending.s1, self.pending.s2
        if buffer is not None:
            buffer.add(dec.s1, dec.s2, dec.a1, dec.a2, dec.logp1, dec.logp2, out.r1, out.r2,
                       out.done, out.terminated)
            buffer.next_s1.append(next_s1)
            buffer.next_s2.append(next_s2)
        return out


@dataclass
class UpdateStats:
    critic_loss_per_head: np.ndarray
    actor1_loss: float
    actor2_loss: float
    entropy1: float
    minibatch_steps: int
    seconds: float


def _actor_step(policy, opt, obs, actions, old_logp, adv, hyper: PpoHyper, ent_coef: float):
    if hyper.normalize_adv:
        adv = normalize(adv)
    loss, grads, info = policy.loss_and_grads(obs, actions, old_logp, adv, hyper.clip_eps, ent_coef)
    clip_grad_norm(grads, hyper.max_grad_norm)
    opt.step(grads)
    if hasattr(policy, "clamp"):
        policy.clamp()
    return loss, info


def _critic_step(critic: CriticHeads, obs, targets, hyper: PpoHyper):
    loss, grads, per_head = critic.loss_and_grads(obs, targets)
    clip_grad_norm(grads, hyper.max_grad_norm)
    critic.opt.step(grads)
    return per_head


def _gae_inputs(critic: CriticHeads, obs, next_obs, done):
    values = critic.target_values(obs)
    next_values = critic.target_values(next_obs) * (~done)[:, None]
    return values, next_values


def update(agents: Agents, buffer: RolloutBuffer, hyper: PpoHyper, stream: RandomStream,
           update_agent1: bool = True, update_agent2: bool = True, train_critic: bool = True) -> UpdateStats:
    """One PPO round (K epochs of shuffled minibatches) for the agents' algorithm.

    ``update_agent1`` / ``update_agent2`` switch the actors off individually;
    under IPPO each flag also covers that agent's own critic. With both
    actors off and ``train_critic`` on, only value regression runs.
    """
    if agents.kind is Algo.RANDOM:
        raise ValueError("the random baseline has nothing to update")
    if buffer.policy_version != agents.version:
        raise RuntimeError("buffer was not produced by the current policy snapshot")
    t0 = time.perf_counter()
    arr = buffer.arrays()
    done = arr["done"]
    r1, r2 = arr["r1"], arr["r2"]
    dtype = agents.actor1.net.dtype
    s1 = arr["s1"].astype(dtype)
    s2 = arr["s2"].astype(dtype)

    if agents.kind is Algo.IPPO:
        v1, nv1 = _gae_inputs(agents.critic, s1, arr["next_s1"].astype(dtype), done)
        v2, nv2 = _gae_inputs(agents.critic2, s2, arr["next_s2"].astype(dtype), done)
        adv1 = compute_gae(r1, v1, nv1, done, hyper.gamma, hyper.lam)
        adv2 = compute_gae(r2, v2, nv2, done, hyper.gamma, hyper.lam)
        targets1 = value_targets(adv1, v1, hyper.gamma, hyper.value_target)
        targets2 = value_targets(adv2, v2, hyper.gamma, hyper.value_target)
    else:
        if agents.kind is Algo.HAPPO:
            r1 = r1.sum(axis=1, keepdims=True)
            r2 = r2.sum(axis=1, keepdims=True)
        v, nv = _gae_inputs(agents.critic, s1, arr["next_s1"].astype(dtype), done)
        # both agents bootstrap from the same global-state values
        adv1 = compute_gae(r1, v, nv, done, hyper.gamma, hyper.lam)
        adv2 = compute_gae(r2, v, nv, done, hyper.gamma, hyper.lam)
        targets1 = value_targets(adv1, v, hyper.gamma, hyper.value_target)
        targets2 = None

    sum_adv1 = adv1.sum(axis=1)
    sum_adv2 = adv2.sum(axis=1)
    a1, a2 = arr["a1"], arr["a2"].astype(dtype)
    logp1, logp2 = arr["logp1"], arr["logp2"]

    head_losses = []
    l1 = l2 = ent1 = 0.0
    steps = 0
    for _ in range(hyper.epochs):
        for mb in minibatch_iterate(len(buffer), hyper.batch_size, stream):
            if update_agent1:
                l1, info = _actor_step(agents.actor1, agents.opt1, s1[mb], a1[mb], logp1[mb], sum_adv1[mb],
                                       hyper, hyper.ent_coef_discrete)
                ent1 = info["entropy"]
            if update_agent2:
                l2, _ = _actor_step(agents.actor2, agents.opt2, s2[mb], a2[mb], logp2[mb], sum_adv2[mb],
                                    hyper, hyper.ent_coef_continuous)
            if train_critic and (update_agent1 or agents.kind is not Algo.IPPO):
                head_losses.append(_critic_step(agents.critic, s1[mb], targets1[mb].astype(dtype), hyper))
            if agents.critic2 is not None and train_critic and update_agent2:
                _critic_step(agents.critic2, s2[mb], targets2[mb].astype(dtype), hyper)
            steps += 1
        agents.critic.end_epoch(hyper.target_sync)
        if agents.critic2 is not None:
            agents.critic2.end_epoch(hyper.target_sync)
    agents.version += 1
    per_head = np.mean(head_losses, axis=0) if head_losses else np.full(agents.critic.n_heads, np.nan)
    return UpdateStats(critic_loss_per_head=np.asarray(per_head, dtype=np.float64), actor1_loss=l1,
                       actor2_loss=l2, entropy1=ent1, minibatch_steps=steps,
                       seconds=time.perf_counter() - t0)


# --- evaluation --------------------------------------------------------------

@dataclass
class EvalReport:
    episode_rewards: np.ndarray      # (E,) summed agent-1 reward per episode
    success: np.ndarray              # (E, T, N) frame success flags
    energy: np.ndarray               # (E, T, N) local energy in J
    rung: np.ndarray                 # (E, T, N) 0 = failed, 1..J received rung
    tau: np.ndarray                  # (N,)
    n_rungs: int

    @property
    def mean_reward(self) -> float:
        return float(self.episode_rewards.mean())

    @property
    def worst_vu_frames(self) -> float:
        per_episode = (self.success.sum(axis=1) - self.tau[None, :]).min(axis=1)
        return float(per_episode.mean())

    @property
    def fps(self) -> np.ndarray:
        return self.success.sum(axis=1).mean(axis=0)

    @property
    def sum_energy(self) -> float:
        return float(self.energy.sum(axis=(1, 2)).mean())

    @property
    def energy_per_vu(self) -> np.ndarray:
        return self.energy.sum(axis=1).mean(axis=0)

    @property
    def local_fraction(self) -> np.ndarray:
        return (self.energy > 0).mean(axis=(0, 1))

    @property
    def rung_counts(self) -> np.ndarray:
        """(N, J + 1) mean frames per episode at each rung; column 0 counts failures."""
        counts = np.stack([(self.rung == j).sum(axis=1) for j in range(self.n_rungs + 1)], axis=-1)
        return counts.mean(axis=0)


def evaluate(env_config: EnvConfig, profiles, agents: Agents, episodes: int, env_stream: RandomStream,
             policy_stream: RandomStream, greedy: bool = False) -> EvalReport:
    """Full-length episodes with early termination switched off."""
    env = VREnv(env_config, profiles, env_stream, early_termination=False)
    T, n = env_config.slots_per_second, env_config.n_vus
    rewards = np.zeros(episodes)
    success = np.zeros((episodes, T, n), dtype=np.int64)
    energy = np.zeros((episodes, T, n))
    rung = np.zeros((episodes, T, n), dtype=np.int64)
    for e in range(episodes):
        s1 = env.reset()
        for t in range(T):
            dec = decide_power(agents, decide_channels(agents, s1, policy_stream, greedy), policy_stream, greedy)
            out = env.step(dec.z, dec.portions)
            rewards[e] += out.r1.sum()
            success[e, t], energy[e, t], rung[e, t] = out.success, out.energy, out.rung
            if out.done:
                break
            s1 = env.observe()
    return EvalReport(episode_rewards=rewards, success=success, energy=energy, rung=rung,
                      tau=np.array([p.tau_f for p in profiles]), n_rungs=len(env_config.resolutions))


# --- a full training run -----------------------------------------------------

@dataclass
class EvalEvent:
    step: int
    report: EvalReport
    train_reward: float
    critic_loss_per_head: Optional[np.ndarray]


@dataclass
class RunResult:
    events: list[EvalEvent] = field(default_factory=list)
    train_step_ms: float = float("nan")
    exec_step_ms: float = float("nan")
    agents: Optional[Agents] = None


def train(algo, env_config: EnvConfig, profiles, hyper: PpoHyper, seed: int, total_steps: int,
          eval_interval: int = 500, eval_episodes: int = 5, greedy_eval: bool = False,
          on_eval: Optional[Callable[[EvalEvent, Agents], None]] = None) -> RunResult:
    root = RandomStream(seed)
    agents = build_agents(algo, env_config, hyper, root.substream("init"))
    env = VREnv(env_config, profiles, root.substream("env"), early_termination=True)
    collector = Collector(env, agents, root.substream("policy"))
    mb_stream = root.substream("minibatch")
    result = RunResult(agents=agents)
    buffer = RolloutBuffer(n_vus=env_config.n_vus, policy_version=agents.version)
    last_losses = None
    train_time, train_steps = 0.0, 0
    for step in range(1, total_steps + 1):
        collector.step(buffer if agents.kind is not Algo.RANDOM else None)
        if agents.kind is not Algo.RANDOM and len(buffer) >= hyper.segment_length:
            stats = update(agents, buffer, hyper, mb_stream)
            last_losses = stats.critic_loss_per_head
            train_time += stats.seconds
            train_steps += stats.minibatch_steps
            buffer = RolloutBuffer(n_vus=env_config.n_vus, policy_version=agents.version)
        if step % eval_interval == 0 or step == total_steps:
            # fresh copies of both streams: every evaluation sees the same scenarios and draws,
            # so a saved checkpoint can be re-evaluated to the same numbers later
            report = evaluate(env_config, profiles, agents, eval_episodes, root.substream("eval-env"),
                              root.substream("eval-policy"), greedy_eval)
            finished = collector.finished_returns
            train_reward = float(np.mean(finished)) if finished else float("nan")
            collector.finished_returns = []
            event = EvalEvent(step=step, report=report, train_reward=train_reward,
                              critic_loss_per_head=None if last_losses is None else last_losses.copy())
            result.events.append(event)
            if on_eval is not None:
                on_eval(event, agents)
    if train_steps:
        result.train_step_ms = 1000.0 * train_time / train_steps
    if collector.exec_steps:
        result.exec_step_ms = 1000.0 * collector.exec_time / collector.exec_steps
    return result


# --- checkpoint tensors --------------------------------------------------------

def agents_tensors(agents: Agents) -> dict[str, np.ndarray]:
    out = {}
    nets = {"actor1": agents.actor1 and agents.actor1.net, "actor2": agents.actor2 and agents.actor2.net,
            "critic": agents.critic and agents.critic.net, "critic_target": agents.critic and agents.critic.target,
            "critic2": agents.critic2 and agents.critic2.net,
            "critic2_target": agents.critic2 and agents.critic2.target}
    for name, net in nets.items():
        if net is None:
            continue
        for i, p in enumerate(net.params()):
            out[f"{name}/{i}"] = p
    if agents.actor2 is not None:
        out["actor2/log_std"] = agents.actor2.log_std
    return out


def load_agents_tensors(agents: Agents, tensors: dict[str, np.ndarray]) -> None:
    nets = {"actor1": agents.actor1 and agents.actor1.net, "actor2": agents.actor2 and agents.actor2.net,
            "critic": agents.critic and agents.critic.net, "critic_target": agents.critic and agents.critic.target,
            "critic2": agents.critic2 and agents.critic2.net,
            "critic2_target": agents.critic2 and agents.critic2.target}
    for name, net in nets.items():
        if net is None:
            continue
        for i, p in enumerate(net.params()):
            src = tensors[f"{name}/{i}"]
            if src.shape != p.shape:
                raise ValueError(f"{name}/{i}: shape {src.shape} != {p.shape}")
            p[...] = src
    if agents.actor2 is not None:
        agents.actor2.log_std[...] = tensors["actor2/log_std"]
