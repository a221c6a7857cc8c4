"""Multi-user VR downlink environment.

One slot per step: the channel actor picks z (0 = generate locally,
m = server sends on channel m), the power actor picks softmax portions of
p_max, and every VU's frame either arrives in time (server case) or is
rendered locally at the best resolution its CPU can finish in one slot.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from .channel import FadingParams, draw_slot_gains
from .rng import RandomStream

BATTERY_LEVELS = ("High", "Middle", "Low")


class EnvConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    slots_per_second: int = Field(90, gt=0)
    n_vus: int = Field(5, ge=1)
    n_channels: int = Field(3, ge=1)
    bandwidth_hz: list[float] = Field(default_factory=lambda: [1.8e6])
    noise_psd: float = Field(10 ** (-20.4), gt=0)
    p_max: float = Field(100.0, gt=0)
    f_server: float = Field(1e10, gt=0)
    eta: float = Field(1e-27, gt=0)
    resolutions: list[tuple[int, int]] = Field(
        default_factory=lambda: [(2560, 1440), (1920, 1080), (1280, 720)])
    resolution_labels: list[str] = Field(default_factory=lambda: ["1440p", "1080p", "720p"])
    bits_per_pixel: int = Field(16, gt=0)
    eyes_per_frame: int = Field(2, gt=0)
    compression_range: tuple[float, float] = (300.0, 600.0)
    cycles_per_bit_range: tuple[float, float] = (50.0, 150.0)
    reward_res: list[float] = Field(default_factory=lambda: [1.0, 0.7, 0.4])
    reward_fail: float = 1.0
    w_energy: float = 10.0
    w_end: float = 5.0
    w_term: float = 1.0
    beta0: float = Field(1e-3, gt=0)
    alpha: float = Field(2.0, ge=0)
    rician_k: float = Field(3.0, ge=0)
    area_side: float = Field(30.0, gt=0)
    f_vu_ghz_range: tuple[float, float] = (0.3, 0.9)
    tau_range: tuple[int, int] = (60, 90)
    battery_mu: dict[str, float] = Field(
        default_factory=lambda: {"High": 0.1, "Middle": 0.5, "Low": 1.0})

    @field_validator("compression_range", "cycles_per_bit_range", "f_vu_ghz_range", "tau_range")
    @classmethod
    def _ordered(cls, v):
        if v[0] > v[1]:
            raise ValueError(f"range lower bound exceeds upper bound: {list(v)}")
        return v

    @model_validator(mode="after")
    def _consistent(self):
        if len(self.bandwidth_hz) not in (1, self.n_channels):
            raise ValueError("bandwidth_hz must have one entry or one per channel")
        if any(w <= 0 for w in self.bandwidth_hz):
            raise ValueError("bandwidths must be positive")
        if len(self.resolution_labels) != len(self.resolutions):
            raise ValueError("one label per resolution rung")
        if len(self.reward_res) != len(self.resolutions):
            raise ValueError("one resolution reward per rung")
        sizes = self.ladder
        if np.any(np.diff(sizes) >= 0) or sizes[-1] <= 0:
            raise ValueError("resolution ladder must be strictly descending")
        if self.compression_range[0] <= 0 or self.cycles_per_bit_range[0] <= 0:
            raise ValueError("compression ratio and cycles per bit must be positive")
        if not 0 <= self.tau_range[0] <= self.tau_range[1] <= self.slots_per_second:
            raise ValueError("tau_range must lie within [0, slots_per_second]")
        return self

    @property
    def iota(self) -> float:
        return 1.0 / self.slots_per_second

    @property
    def ladder(self) -> np.ndarray:
        """Frame sizes G_1 > ... > G_J in bits."""
        return np.array([w * h * self.bits_per_pixel * self.eyes_per_frame
                         for w, h in self.resolutions], dtype=float)

    @property
    def bandwidths(self) -> np.ndarray:
        w = np.asarray(self.bandwidth_hz, dtype=float)
        return np.repeat(w, self.n_channels) if w.size == 1 else w

    @property
    def fading(self) -> FadingParams:
        return FadingParams(self.beta0, self.alpha, self.rician_k)

    @property
    def n_actions(self) -> int:
        return (self.n_channels + 1) ** self.n_vus


class VuSpec(BaseModel):
    """Per-VU overrides; unset fields are drawn from the scenario ranges."""
    model_config = ConfigDict(extra="forbid", frozen=True)

    f_ghz: Optional[float] = Field(None, gt=0)
    battery: Optional[str] = None
    tau_f: Optional[int] = Field(None, ge=0)
    distance: Optional[float] = Field(None, ge=1)

    @field_validator("battery")
    @classmethod
    def _label(cls, v):
        if v is not None and v not in BATTERY_LEVELS:
            raise ValueError(f"battery must be one of {BATTERY_LEVELS}")
        return v


@dataclass(frozen=True)
class VuProfile:
    f: float          # cycles/s
    mu: float
    tau_f: int
    distance: float   # m
    battery: str = "Middle"


def make_profiles(config: EnvConfig, specs, stream: RandomStream) -> list[VuProfile]:
    """Fill every VU's traits from its spec or from the scenario distributions.

    Every VU consumes the same number of draws whether or not it is
    overridden, so fixing one VU never reshuffles the others.
    """
    specs = list(specs or [])
    half = config.area_side / 2.0
    out = []
    for n in range(config.n_vus):
        spec = specs[n] if n < len(specs) else VuSpec()
        f_ghz = stream.generator.uniform(*config.f_vu_ghz_range)
        battery = BATTERY_LEVELS[stream.integers(0, len(BATTERY_LEVELS))]
        tau = int(stream.integers(config.tau_range[0], config.tau_range[1] + 1))
        x, y = stream.generator.uniform(-half, half, size=2)
        dist = max(1.0, math.hypot(x, y))
        if spec.f_ghz is not None:
            f_ghz = spec.f_ghz
        if spec.battery is not None:
            battery = spec.battery
        if spec.tau_f is not None:
            tau = spec.tau_f
        if spec.distance is not None:
            dist = spec.distance
        if tau > config.slots_per_second:
            raise ValueError(f"VU {n}: tau_f={tau} exceeds slots_per_second")
        out.append(VuProfile(f=f_ghz * 1e9, mu=config.battery_mu[battery], tau_f=tau,
                             distance=dist, battery=battery))
    return out


# --- action coding -----------------------------------------------------------

def encode_action(z, n_channels: int) -> int:
    base = n_channels + 1
    digits = [int(v) for v in (z.tolist() if isinstance(z, np.ndarray) else z)]
    idx = 0
    for zn in reversed(digits):     # Horner form of sum_n z_n * base**n
        if not 0 <= zn <= n_channels:
            raise ValueError(f"channel assignment {zn} out of range [0, {n_channels}]")
        idx = idx * base + zn
    return idx


def decode_action(index: int, n_vus: int, n_channels: int) -> np.ndarray:
    base = n_channels + 1
    index = int(index)
    if not 0 <= index < base ** n_vus:
        raise ValueError(f"action index {index} out of range [0, {base ** n_vus})")
    digits = []
    for _ in range(n_vus):
        index, digit = divmod(index, base)
        digits.append(digit)
    return np.array(digits, dtype=np.int64)


def decode_table(n_vus: int, n_channels: int) -> np.ndarray:
    """All decoded words, row i = decode_action(i)."""
    base = n_channels + 1
    idx = np.arange(base ** n_vus)
    return np.stack([(idx // base ** n) % base for n in range(n_vus)], axis=1)


# --- physical layer ----------------------------------------------------------

def portions_to_power(portions, z, p_max: float) -> np.ndarray:
    """p_n = P_n * p_max for transmitting VUs, 0 for local ones.

    Floating-point rounding can leave the transmit total an ulp above p_max,
    and numpy's blocked summation rounds differently depending on which
    entries are present. The powers are shrunk until both the exact
    (``math.fsum``) total and numpy's total over the transmitting subset
    stay within p_max.
    """
    portions = np.asarray(portions, dtype=float)
    tx = np.asarray(z) != 0
    p = np.where(tx, portions * p_max, 0.0)

    def over() -> bool:
        sub = p[tx]
        if sub.sum() > p_max or p.sum() > p_max:
            return True
        exact = math.fsum(sub)
        if exact == p_max:  # fsum rounds; settle the tie with rationals
            return sum(map(Fraction, sub.tolist())) > p_max
        return exact > p_max

    if over():
        p *= p_max / math.fsum(p)
        while over():
            p *= 1.0 - 2.0 ** -52
    return p


def sic_order(channel: int, z, gains, noise_psd) -> list[int]:
    """VUs on ``channel`` (1-based), strongest channel-to-noise ratio first;
    ties put the larger VU index first."""
    z = np.asarray(z)
    sigma2 = np.broadcast_to(np.asarray(noise_psd, dtype=float), np.shape(gains))
    members = [n for n in range(len(z)) if z[n] == channel]
    ratio = {n: abs(gains[n, channel - 1]) ** 2 / sigma2[n, channel - 1] for n in members}
    return sorted(members, key=lambda n: (-ratio[n], -n))


def achievable_rates(z, p, gains, noise_psd, bandwidths) -> np.ndarray:
    z = np.asarray(z)
    p = np.asarray(p, dtype=float)
    sigma2 = np.broadcast_to(np.asarray(noise_psd, dtype=float), np.shape(gains))
    rates = np.zeros(len(z))
    for m in range(1, gains.shape[1] + 1):
        w = bandwidths[m - 1]
        before = 0.0  # power of VUs decoded ahead of the current one
        for n in sic_order(m, z, gains, sigma2):
            g2 = abs(gains[n, m - 1]) ** 2
            sinr = p[n] * g2 / (before * g2 + w * sigma2[n, m - 1])
            rates[n] = w * math.log2(1.0 + sinr)
            before += p[n]
    return rates


def frame_size(res_bits, com):
    return np.asarray(res_bits, dtype=float) / np.asarray(com, dtype=float)


def server_delay(data_bits, cycles_per_bit, f_server: float, rate):
    data_bits = np.asarray(data_bits, dtype=float)
    rate = np.asarray(rate, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        tx = np.where(data_bits == 0, 0.0, data_bits / rate)
    tx = np.where((rate <= 0) & (data_bits > 0), np.inf, tx)
    out = data_bits * cycles_per_bit / f_server + tx
    return float(out) if out.ndim == 0 else out


def local_energy(data_bits, cycles_per_bit, mu, f_vu, eta: float, z):
    """mu * D * c * eta * f**2 for locally generated frames, 0 otherwise."""
    e = np.asarray(mu) * np.asarray(data_bits) * np.asarray(cycles_per_bit) * eta * np.asarray(f_vu) ** 2
    out = np.where(np.asarray(z) == 0, e, 0.0)
    return float(out) if out.ndim == 0 else out


def local_resolution(f_vu: float, com: float, ladder, iota: float) -> tuple[float, int]:
    """Best rung a VU can render within one slot.

    Returns (Res, J) with J 1-based; (0.0, len(ladder) + 1) when even the
    lowest rung does not fit.
    """
    budget = f_vu * iota
    for j, g in enumerate(ladder, start=1):
        if g / com <= budget:
            return float(g), j
    return 0.0, len(ladder) + 1


def success_flag(z_n: int, delay: float, iota: float, res: float, lowest: float) -> int:
    if z_n != 0:
        return 0 if delay > iota else 1
    return 0 if res < lowest else 1


# --- state & step -----------------------------------------------------------

@dataclass
class SlotDraw:
    gains: np.ndarray      # (N, M) complex
    com: np.ndarray        # (N,)
    cyc: np.ndarray        # (N,)


@dataclass
class EnvState:
    t: int
    fail_count: np.ndarray
    succ_count: np.ndarray
    draw: SlotDraw
    terminated: bool = False


@dataclass
class StepOutcome:
    success: np.ndarray
    delay: np.ndarray
    energy: np.ndarray
    resolution: np.ndarray   # bits actually received, 0 on failure
    rung: np.ndarray         # 1..J on success, 0 on failure
    rate: np.ndarray
    power: np.ndarray
    r1: np.ndarray
    r2: np.ndarray
    terminated: bool
    truncated: bool          # reached the last slot
    term_vu: Optional[int] = None

    @property
    def done(self) -> bool:
        return self.terminated or self.truncated


def state_dim_agent1(n_vus: int, n_channels: int) -> int:
    return n_vus * (3 + n_channels) + 1


def state_dim_agent2(n_vus: int, n_channels: int) -> int:
    return n_vus + state_dim_agent1(n_vus, n_channels)


def build_state_agent1(state: EnvState, profiles, config: EnvConfig) -> np.ndarray:
    """Per VU: [frame size, remaining tolerable failures, |h|^2 per channel,
    gap to the FPS target], then the remaining slot count.

    Frame size is the server (top-rung) size scaled by its largest possible
    value; channel gains are log10(|h|^2 / beta0) mapped to roughly [-1, 1];
    counts are divided by T.
    """
    T = config.slots_per_second
    g1 = config.ladder[0]
    tau = np.array([p.tau_f for p in profiles], dtype=float)
    d = state.draw
    size = g1 / d.com / (g1 / config.compression_range[0])
    tolerable = ((T - tau) - state.fail_count) / T
    h2 = np.abs(d.gains) ** 2 / config.beta0
    gain_feat = (np.log10(np.maximum(h2, 1e-30)) + 1.5) / 1.5
    gap = (tau - state.succ_count) / T
    blocks = np.column_stack([size, tolerable, gain_feat, gap])
    return np.concatenate([blocks.ravel(), [(T - state.t) / T]])


def build_state_agent2(s1: np.ndarray, z, n_channels: int) -> np.ndarray:
    return np.concatenate([np.asarray(z, dtype=float) / n_channels, s1])


class VREnv:
    """Episodic simulator. One instance per (config, profiles, stream)."""

    def __init__(self, config: EnvConfig, profiles, stream: RandomStream, early_termination: bool = True):
        if len(profiles) != config.n_vus:
            raise ValueError("one profile per VU required")
        self.config = config
        self.profiles = list(profiles)
        self.early_termination = early_termination
        self._fading_stream = stream.substream("fading")
        self._com_stream = stream.substream("compression")
        self._cyc_stream = stream.substream("cycles")
        self._fading = config.fading
        self._ladder = config.ladder
        self._bw = config.bandwidths
        self._dist = np.array([p.distance for p in profiles])
        self._f = np.array([p.f for p in profiles])
        self._mu = np.array([p.mu for p in profiles])
        self._tau = np.array([p.tau_f for p in profiles])
        self.state: Optional[EnvState] = None

    @property
    def n_vus(self) -> int:
        return self.config.n_vus

    def _uniform(self, stream, rng):
        lo, hi = rng
        if lo == hi:
            return np.full(self.n_vus, float(lo))
        return stream.uniform(lo, hi, self.n_vus)

    def draw_slot(self) -> SlotDraw:
        gains = draw_slot_gains(self._dist, self._fading, self._fading_stream, self.config.n_channels)
        return SlotDraw(gains=gains,
                        com=self._uniform(self._com_stream, self.config.compression_range),
                        cyc=self._uniform(self._cyc_stream, self.config.cycles_per_bit_range))

    def reset(self) -> np.ndarray:
        n = self.n_vus
        self.state = EnvState(t=0, fail_count=np.zeros(n, dtype=np.int64),
                              succ_count=np.zeros(n, dtype=np.int64), draw=self.draw_slot())
        return self.observe()

    def observe(self) -> np.ndarray:
        return build_state_agent1(self.state, self.profiles, self.config)

    def observe_agent2(self, s1: np.ndarray, z) -> np.ndarray:
        return build_state_agent2(s1, z, self.config.n_channels)

    def step(self, z, portions) -> StepOutcome:
        st = self.state
        if st is None or st.terminated or st.t >= self.config.slots_per_second:
            raise RuntimeError("step() called on a finished episode; call reset() first")
        cfg = self.config
        z = np.asarray(z, dtype=np.int64)
        n = self.n_vus
        portions = np.asarray(portions, dtype=float)
        if z.shape != (n,) or portions.shape != (n,):
            raise ValueError("action shapes must be (N,)")
        if np.any(z < 0) or np.any(z > cfg.n_channels):
            raise ValueError("channel assignment out of range")
        if np.any(portions < 0) or abs(portions.sum() - 1.0) > 1e-9:
            raise ValueError("power portions must be nonnegative and sum to 1")
        d = st.draw
        iota = cfg.iota
        ladder = self._ladder
        T = cfg.slots_per_second

        power = portions_to_power(portions, z, cfg.p_max)
        rate = achievable_rates(z, power, d.gains, cfg.noise_psd, self._bw)
        server = z != 0

        res_local = np.zeros(n)
        rung_local = np.zeros(n, dtype=np.int64)
        for i in np.flatnonzero(~server):
            res_local[i], rung_local[i] = local_resolution(self._f[i], d.com[i], ladder, iota)

        data_server = frame_size(ladder[0], d.com)
        delay = np.where(server, server_delay(data_server, d.cyc, cfg.f_server, rate), 0.0)
        # a local frame that misses the lowest rung is never produced: no energy
        energy = local_energy(frame_size(res_local, d.com), d.cyc, self._mu, self._f, cfg.eta, z)

        success = np.array([success_flag(int(z[i]), float(delay[i]), iota, res_local[i], ladder[-1])
                            for i in range(n)], dtype=np.int64)
        rung = np.where(success == 1, np.where(server, 1, rung_local), 0)
        resolution = np.where(rung > 0, ladder[np.maximum(rung, 1) - 1], 0.0)

        res_reward = np.where(rung > 0, np.asarray(cfg.reward_res)[np.maximum(rung, 1) - 1], 0.0)
        base = res_reward - cfg.reward_fail * (1 - success)
        r1 = base - cfg.w_energy * energy
        r2 = base.copy()

        fail_count = st.fail_count + (1 - success)
        succ_count = st.succ_count + success
        t = st.t + 1

        terminated = False
        term_vu = None
        over = np.flatnonzero(fail_count > T - self._tau)
        if self.early_termination and over.size and t < T:
            terminated = True
            term_vu = int(over[0])
            penalty = cfg.w_term * (T - t)
            r1 -= penalty
            r2 -= penalty
        truncated = t >= T
        if truncated:
            worst = cfg.w_end * float(np.min(succ_count - self._tau))
            r1 += worst
            r2 += worst
        r1 /= n
        r2 /= n

        self.state = EnvState(t=t, fail_count=fail_count, succ_count=succ_count,
                              draw=self.draw_slot() if not (terminated or truncated) else d,
                              terminated=terminated)
        return StepOutcome(success=success, delay=delay, energy=energy, resolution=resolution,
                           rung=rung, rate=rate, power=power, r1=r1, r2=r2,
                           terminated=terminated, truncated=truncated, term_vu=term_vu)
