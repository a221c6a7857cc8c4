"""Small tanh MLPs with hand-written backprop, Adam, and the two policy
distributions used by the actors."""
from __future__ import annotations

import copy
import json
import math
import struct
from pathlib import Path

import numpy as np

from .rng import RandomStream

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_LOG_2PI = math.log(2.0 * math.pi)


def _orthogonal(rows: int, cols: int, gain: float, gen: np.random.Generator) -> np.ndarray:
    a = gen.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    # C order: a transposed factor would otherwise make every update stride badly
    return np.ascontiguousarray(gain * q[:rows, :cols])


class Mlp:
    """Affine layers with tanh between them and an identity output.

    Batches are row-major: ``x`` has shape (B, in) and the output (B, out).
    """

    def __init__(self, sizes, stream: RandomStream | None = None, *, hidden_gain: float = math.sqrt(2),
                 out_gain: float = 1.0, dtype=np.float64):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        self.sizes = [int(s) for s in sizes]
        self.dtype = np.dtype(dtype)
        gen = stream.generator if stream is not None else np.random.default_rng(0)
        self.weights = []
        self.biases = []
        for i, (a, b) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            gain = out_gain if i == len(self.sizes) - 2 else hidden_gain
            self.weights.append(_orthogonal(a, b, gain, gen).astype(self.dtype))
            self.biases.append(np.zeros(b, dtype=self.dtype))

    @property
    def activations(self) -> list[str]:
        return ["tanh"] * (len(self.sizes) - 2) + ["identity"]

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def zero_grads(self) -> list[np.ndarray]:
        return [np.zeros_like(p) for p in self.params()]

    def clone(self) -> "Mlp":
        return copy.deepcopy(self)

    def load_from(self, other: "Mlp") -> None:
        for dst, src in zip(self.params(), other.params()):
            dst[...] = src

    def forward(self, x):
        x = np.asarray(x, dtype=self.dtype)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[1] != self.sizes[0]:
            raise ValueError(f"input dimension {x.shape[1]} != {self.sizes[0]}")
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.tanh(h)
            acts.append(h)
        out = h[0] if single else h
        return out, (single, acts)

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out):
        """Gradients of a scalar loss given dL/d(output).

        Returns (param_grads in ``params()`` order, dL/d(input)).
        """
        single, acts = cache
        g = np.asarray(grad_out, dtype=self.dtype)
        if single:
            g = g[None, :]
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            if i < len(self.weights) - 1:
                g = g * (1.0 - acts[i + 1] ** 2)
            grads[2 * i] = acts[i].T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ self.weights[i].T
        return grads, (g[0] if single else g)


class Adam:
    """Bias-corrected Adam over a fixed list of parameter arrays (updated in place)."""

    def __init__(self, params, lr: float = 3e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        step = lr * math.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        eps_hat = self.eps * math.sqrt(1.0 - b2 ** self.t)
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            # in place; the actor's output layer can hold millions of entries
            tmp = np.multiply(g, 1.0 - b1, dtype=p.dtype)
            m *= b1
            m += tmp
            np.multiply(g, g, out=tmp)
            tmp *= 1.0 - b2
            v *= b2
            v += tmp
            np.sqrt(v, out=tmp)
            tmp += eps_hat
            np.divide(m, tmp, out=tmp)
            tmp *= step
            p -= tmp


def clip_grad_norm(grads, max_norm: float | None) -> float:
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm is not None and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


# --- distributions -----------------------------------------------------------

def logsumexp(x, axis=-1):
    x = np.asarray(x)
    mx = np.max(x, axis=axis, keepdims=True)
    return np.squeeze(mx, axis) + np.log(np.sum(np.exp(x - mx), axis=axis))


def log_softmax(x, axis=-1):
    x = np.asarray(x)
    mx = np.max(x, axis=axis, keepdims=True)
    z = x - mx
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softmax(x, axis=-1):
    x = np.asarray(x)
    e = np.exp(x - np.max(x, axis=axis, keepdims=True))
    return e / np.sum(e, axis=axis, keepdims=True)


def categorical_sample_logprob(logits, stream: RandomStream) -> tuple[int, float]:
    logp = log_softmax(np.asarray(logits, dtype=np.float64))
    cdf = np.cumsum(np.exp(logp))
    u = stream.generator.random() * cdf[-1]
    a = min(int(np.searchsorted(cdf, u, side="right")), len(cdf) - 1)
    return a, float(logp[a])


def categorical_entropy(logits) -> np.ndarray:
    logp = log_softmax(logits)
    return -np.sum(np.exp(logp) * logp, axis=-1)


def gaussian_log_prob(x, mean, log_std) -> np.ndarray:
    x, mean, log_std = np.asarray(x), np.asarray(mean), np.asarray(log_std)
    z = (x - mean) * np.exp(-log_std)
    return np.sum(-0.5 * z * z - log_std - 0.5 * _LOG_2PI, axis=-1)


def gaussian_sample_logprob(mean, log_std, stream: RandomStream) -> tuple[np.ndarray, float]:
    mean = np.asarray(mean, dtype=np.float64)
    log_std = np.clip(np.asarray(log_std, dtype=np.float64), LOG_STD_MIN, LOG_STD_MAX)
    x = mean + np.exp(log_std) * stream.std_normal(mean.shape)
    return x, float(gaussian_log_prob(x, mean, log_std))


class CategoricalPolicy:
    """Discrete actor: logits over all channel-assignment words."""

    def __init__(self, obs_dim: int, n_actions: int, hidden, stream: RandomStream, dtype=np.float64):
        self.net = Mlp([obs_dim, *hidden, n_actions], stream, out_gain=0.01, dtype=dtype)
        self.n_actions = n_actions

    def params(self):
        return self.net.params()

    def sample(self, obs, stream: RandomStream):
        return categorical_sample_logprob(self.net(obs), stream)

    def mode(self, obs):
        logits = np.asarray(self.net(obs), dtype=np.float64)
        a = int(np.argmax(logits))
        return a, float(log_softmax(logits)[a])

    def log_prob(self, obs, actions):
        logits = self.net(obs)
        return log_softmax(logits)[np.arange(len(actions)), actions]

    def loss_and_grads(self, obs, actions, old_logp, adv, clip_eps, ent_coef):
        """Clipped surrogate (negated, minibatch mean) minus the entropy bonus."""
        logits, cache = self.net.forward(obs)
        # log-softmax written out so the (B, n_actions) buffers are reused
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        total = p.sum(axis=1, keepdims=True)
        p /= total
        z -= np.log(total)
        logp_all = z
        rows = np.arange(len(actions))
        logp = logp_all[rows, actions].astype(np.float64)
        loss, dlogp = clipped_surrogate(logp, old_logp, adv, clip_eps)
        ent = -np.einsum("ij,ij->i", p, logp_all, dtype=np.float64)
        # d logp(a)/d logits = onehot(a) - p
        if ent_coef:
            b = len(actions)
            loss = loss - ent_coef * float(ent.mean())
            # dH/dlogits = -p * (logp + H); reuse the log-prob buffer
            logp_all += ent[:, None].astype(logp_all.dtype)
            logp_all *= ent_coef / b
            logp_all -= dlogp[:, None].astype(logp_all.dtype)
            dlogits = np.multiply(p, logp_all, out=p)
        else:
            dlogits = np.multiply(p, -dlogp[:, None].astype(p.dtype), out=p)
        dlogits[rows, actions] += dlogp.astype(dlogits.dtype)
        grads, _ = self.net.backward(cache, dlogits)
        return loss, grads, {"entropy": float(ent.mean())}


class GaussianPolicy:
    """Continuous actor: diagonal Gaussian over pre-softmax power logits with
    a state-independent learned log-std."""

    def __init__(self, obs_dim: int, act_dim: int, hidden, stream: RandomStream, dtype=np.float64,
                 init_log_std: float = -0.5):
        self.net = Mlp([obs_dim, *hidden, act_dim], stream, out_gain=0.01, dtype=dtype)
        self.log_std = np.full(act_dim, init_log_std, dtype=dtype)

    def params(self):
        return self.net.params() + [self.log_std]

    def clamp(self):
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)

    def sample(self, obs, stream: RandomStream):
        return gaussian_sample_logprob(self.net(obs), self.log_std, stream)

    def mode(self, obs):
        mean = np.asarray(self.net(obs), dtype=np.float64)
        return mean, float(gaussian_log_prob(mean, mean, self.log_std))

    def log_prob(self, obs, raw_actions):
        return gaussian_log_prob(raw_actions, self.net(obs), self.log_std)

    def loss_and_grads(self, obs, raw_actions, old_logp, adv, clip_eps, ent_coef):
        mean, cache = self.net.forward(obs)
        inv_var = np.exp(-2.0 * self.log_std)
        diff = raw_actions - mean
        logp = gaussian_log_prob(raw_actions, mean, self.log_std)
        loss, dlogp = clipped_surrogate(logp, old_logp, adv, clip_eps)
        dmean = dlogp[:, None] * diff * inv_var
        dlog_std = np.sum(dlogp[:, None] * (diff * diff * inv_var - 1.0), axis=0)
        # entropy = sum(log_std) + const
        ent = float(np.sum(self.log_std) + 0.5 * len(self.log_std) * (1.0 + _LOG_2PI))
        if ent_coef:
            loss = loss - ent_coef * ent
            dlog_std = dlog_std - ent_coef
        grads, _ = self.net.backward(cache, dmean)
        return loss, grads + [dlog_std.astype(self.log_std.dtype)], {"entropy": ent}


def clipped_surrogate(logp, old_logp, adv, clip_eps):
    """Negated mean clipped surrogate and its gradient w.r.t. ``logp``.

    Where the clipped branch is the active minimum the sample contributes no
    gradient.
    """
    ratio = np.exp(logp - old_logp)
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * adv
    b = len(adv)
    loss = -float(np.mean(np.minimum(unclipped, clipped)))
    active = unclipped <= clipped
    dlogp = np.where(active, -adv * ratio / b, 0.0)
    return loss, dlogp


# --- checkpoints -------------------------------------------------------------

CHECKPOINT_MAGIC = b"UCHACKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict) -> None:
    """Layout: magic (8 bytes) | u32 version | u64 header length | UTF-8 JSON
    header | tensors as contiguous little-endian float64, in header order."""
    entries = [{"name": k, "shape": list(np.shape(v))} for k, v in tensors.items()]
    header = json.dumps({"version": CHECKPOINT_VERSION, "meta": meta, "tensors": entries},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for v in tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 8 + 12
    header = json.loads(data[off:off + hlen].decode("utf-8"))
    off += hlen
    tensors = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        tensors[e["name"]] = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(e["shape"]).copy()
        off += 8 * count
    return tensors, header["meta"]
