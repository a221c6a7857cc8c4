"""PPO pieces shared by every trainer: rollout storage, truncated GAE over
per-VU reward streams, the multi-head critic and its target copy."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from .nn import Adam, Mlp
from .rng import RandomStream


class PpoHyper(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    gamma: float = Field(0.99, gt=0, le=1)
    lam: float = Field(0.95, ge=0, le=1)
    clip_eps: float = Field(0.2, gt=0)
    epochs: int = Field(10, ge=1)
    batch_size: int = Field(256, ge=1)
    segment_length: int = Field(2048, ge=1)
    target_sync: int = Field(4, ge=1)
    value_target: Literal["standard", "discounted"] = "standard"
    lr_actor: float = Field(3e-4, gt=0)
    lr_critic: float = Field(3e-4, gt=0)
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_grad_norm: Optional[float] = 0.5
    ent_coef_discrete: float = 0.01
    ent_coef_continuous: float = 0.0
    normalize_adv: bool = True
    hidden: list[int] = Field(default_factory=lambda: [128, 128])
    dtype: Literal["float32", "float64"] = "float32"


def compute_gae(rewards, values, next_values, dones, gamma: float, lam: float) -> np.ndarray:
    """Truncated GAE along axis 0, independently for every column.

    ``rewards``, ``values``, ``next_values`` have shape (T, K); ``dones[t]``
    marks that step t ended its episode, so the recursion restarts there.
    ``next_values`` must already be 0 where the episode ended.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    next_values = np.asarray(next_values, dtype=np.float64)
    deltas = rewards + gamma * next_values - values
    adv = np.zeros_like(deltas)
    carry = np.zeros(deltas.shape[1:])
    for t in range(len(deltas) - 1, -1, -1):
        carry = deltas[t] + gamma * lam * (0.0 if dones[t] else 1.0) * carry
        adv[t] = carry
    return adv


def value_targets(adv, values, gamma: float, mode: str) -> np.ndarray:
    """Critic regression targets. "standard" is A + V; "discounted" is A + gamma*V."""
    if mode == "discounted":
        return adv + gamma * values
    return adv + values


def normalize(adv: np.ndarray) -> np.ndarray:
    if len(adv) < 2:
        return adv - adv.mean()
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def minibatch_iterate(n: int, batch_size: int, stream: RandomStream):
    """One epoch: a fresh permutation cut into batches; the short tail is kept."""
    perm = stream.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


class CriticHeads:
    """Shared trunk with one scalar head per VU, plus a lagging target copy."""

    def __init__(self, obs_dim: int, n_heads: int, hidden, stream: RandomStream, hyper: PpoHyper,
                 dtype=np.float64):
        self.n_heads = n_heads
        self.net = Mlp([obs_dim, *hidden, n_heads], stream, out_gain=1.0, dtype=dtype)
        self.target = self.net.clone()
        self.opt = Adam(self.net.params(), hyper.lr_critic, hyper.beta1, hyper.beta2, hyper.adam_eps)
        self.syncs = 0
        self.epochs_done = 0

    def values(self, obs) -> np.ndarray:
        return np.asarray(self.net(obs), dtype=np.float64)

    def target_values(self, obs) -> np.ndarray:
        return np.asarray(self.target(obs), dtype=np.float64)

    def sync_target(self) -> None:
        self.target = self.net.clone()
        self.syncs += 1

    def end_epoch(self, period: int) -> bool:
        """Count one optimisation epoch; refresh the target every ``period`` epochs."""
        self.epochs_done += 1
        if self.epochs_done % period == 0:
            self.sync_target()
            return True
        return False

    def loss_and_grads(self, obs, targets):
        """Sum over heads of squared error, averaged over the minibatch."""
        pred, cache = self.net.forward(obs)
        err = pred - targets
        per_head = np.mean(err * err, axis=0)
        grads, _ = self.net.backward(cache, 2.0 * err / len(err))
        return float(per_head.sum()), grads, per_head


@dataclass
class RolloutBuffer:
    """One on-policy segment. Per-step arrays are appended and stacked on demand."""
    n_vus: int
    s1: list = field(default_factory=list)
    s2: list = field(default_factory=list)
    a1: list = field(default_factory=list)
    a2: list = field(default_factory=list)
    logp1: list = field(default_factory=list)
    logp2: list = field(default_factory=list)
    r1: list = field(default_factory=list)
    r2: list = field(default_factory=list)
    done: list = field(default_factory=list)
    terminated: list = field(default_factory=list)
    # s1 of the following step; for the final record of a segment this is the
    # bootstrap state
    next_s1: list = field(default_factory=list)
    next_s2: list = field(default_factory=list)
    policy_version: int = 0

    def __len__(self) -> int:
        return len(self.s1)

    def add(self, s1, s2, a1, a2, logp1, logp2, r1, r2, done, terminated):
        if len(r1) != self.n_vus or len(r2) != self.n_vus:
            raise ValueError("per-VU reward vectors must have length N")
        if not (np.isfinite(logp1) and np.isfinite(logp2)):
            raise ValueError("non-finite log-probability")
        self.s1.append(s1)
        self.s2.append(s2)
        self.a1.append(a1)
        self.a2.append(a2)
        self.logp1.append(logp1)
        self.logp2.append(logp2)
        self.r1.append(r1)
        self.r2.append(r2)
        self.done.append(done)
        self.terminated.append(terminated)

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "s1": np.asarray(self.s1), "s2": np.asarray(self.s2),
            "a1": np.asarray(self.a1, dtype=np.int64), "a2": np.asarray(self.a2),
            "logp1": np.asarray(self.logp1), "logp2": np.asarray(self.logp2),
            "r1": np.asarray(self.r1), "r2": np.asarray(self.r2),
            "done": np.asarray(self.done, dtype=bool),
            "next_s1": np.asarray(self.next_s1), "next_s2": np.asarray(self.next_s2),
        }
