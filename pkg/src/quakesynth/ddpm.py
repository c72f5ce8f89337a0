"""Conditional denoising diffusion model for trace enhancement.

A 1D U-Net is trained to predict the noise added to a reference trace at a
random diffusion step, conditioned on the corresponding operator-predicted
trace. Sampling runs the reverse chain from pure noise, with the condition
concatenated at every step, and returns a corrected trace. Traces are
normalized per sensor by the max-abs of the condition so the network sees
unit-scale inputs regardless of source magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataError, NumericError
from .optim import Adam, CosineRestarts
from .seeding import derive_seed, make_rng
from .waveprop import TraceSet


# -- noise schedule ------------------------------------------------------------

@dataclass(frozen=True)
class NoiseSchedule:
    betas: np.ndarray        # [T], step index tau uses betas[tau - 1]
    alphas: np.ndarray
    alpha_bars: np.ndarray

    @property
    def n_steps(self):
        return len(self.betas)


def make_schedule(n_steps, beta_start, beta_end) -> NoiseSchedule:
    """Linear variance schedule, endpoints included."""
    if n_steps < 2:
        raise ConfigError(f"schedule needs at least 2 steps, got {n_steps}")
    if not (0.0 < beta_start < beta_end < 1.0):
        raise ConfigError(
            f"schedule requires 0 < beta_start < beta_end < 1, got "
            f"({beta_start}, {beta_end})")
    betas = np.linspace(beta_start, beta_end, n_steps, dtype=np.float64)
    alphas = 1.0 - betas
    return NoiseSchedule(betas=betas, alphas=alphas,
                         alpha_bars=np.cumprod(alphas))


def forward_diffuse(x0, tau, eps, schedule: NoiseSchedule):
    """Corrupt x0 to diffusion step tau (1-based): sqrt(abar)x0+sqrt(1-abar)e."""
    tau = np.asarray(tau)
    if np.any(tau < 1) or np.any(tau > schedule.n_steps):
        raise DataError(f"diffusion step out of range 1..{schedule.n_steps}")
    abar = schedule.alpha_bars[tau - 1]
    shape = (-1,) + (1,) * (np.asarray(x0).ndim - 1) if tau.ndim else ()
    if tau.ndim:
        abar = abar.reshape(shape)
    return (np.sqrt(abar) * x0 + np.sqrt(1.0 - abar) * eps).astype(x0.dtype)


# -- denoiser ------------------------------------------------------------------

@dataclass
class DdpmHyper:
    n_steps: int = 200
    beta_start: float = 5e-4
    beta_end: float = 0.1
    widths: tuple = (32, 64, 128)
    kernel: int = 5
    temb_dim: int = 32
    temb_hidden: int = 64
    train_steps: int = 3000
    batch: int = 32
    lr: float = 3e-4
    restarts: int = 10
    seed: int = 0
    dtype: str = "float32"


def sinusoidal_embedding(tau, dim):
    """Transformer-style embedding of integer diffusion steps, [B, dim]."""
    tau = np.atleast_1d(np.asarray(tau, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / max(half - 1, 1))
    angles = tau[:, None] * freqs[None, :]
    return np.concatenate([np.sin(angles), np.cos(angles)], axis=1)


class UNet1d:
    """Conditional noise predictor over [B, 2(noisy)+2(condition), n_t]."""

    IN_CHANNELS = 4
    OUT_CHANNELS = 2

    def __init__(self, n_t, hyper: DdpmHyper | None = None):
        self.hyper = h = hyper or DdpmHyper()
        if n_t % 4 != 0:
            raise DataError(f"trace length {n_t} must be divisible by 4")
        if h.kernel % 2 != 1:
            raise ConfigError(f"kernel size must be odd, got {h.kernel}")
        self.n_t = n_t
        rng = make_rng(h.seed, "unet-init")
        dtype = h.dtype
        k = h.kernel
        w0, w1, w2 = h.widths
        self._params = {}

        def conv(name, o, c, zero=False):
            s = 0.0 if zero else np.sqrt(2.0 / (c * k))
            self._params[name + ".w"] = Tensor(
                rng.normal(0, s, (o, c, k)).astype(dtype) if s else
                np.zeros((o, c, k), dtype=dtype), requires_grad=True)
            self._params[name + ".b"] = Tensor(np.zeros(o, dtype=dtype),
                                               requires_grad=True)

        def lin(name, o, c):
            s = np.sqrt(2.0 / (o + c))
            self._params[name + ".w"] = Tensor(
                rng.normal(0, s, (o, c)).astype(dtype), requires_grad=True)
            self._params[name + ".b"] = Tensor(np.zeros(o, dtype=dtype),
                                               requires_grad=True)

        conv("enc0", w0, self.IN_CHANNELS)
        conv("enc1", w1, w0)
        conv("enc2", w2, w1)
        conv("mid", w2, w2)
        conv("dec1", w1, w2 + w1)
        conv("dec0", w0, w1 + w0)
        conv("out", self.OUT_CHANNELS, w0, zero=True)
        lin("temb1", h.temb_hidden, h.temb_dim)
        lin("temb2", h.temb_hidden, h.temb_hidden)
        for name, width in (("t_enc0", w0), ("t_enc1", w1), ("t_enc2", w2),
                            ("t_mid", w2), ("t_dec1", w1), ("t_dec0", w0)):
            lin(name, width, h.temb_hidden)

    def params(self):
        return self._params

    def state(self):
        return {k: v.data for k, v in self._params.items()}

    def load_state(self, state):
        for name, arr in state.items():
            if name not in self._params:
                raise DataError(f"unexpected parameter '{name}' in checkpoint")
            p = self._params[name]
            if tuple(arr.shape) != tuple(p.data.shape):
                raise DataError(
                    f"checkpoint parameter '{name}' has shape {arr.shape}, "
                    f"expected {p.data.shape}")
            p.data = arr.astype(p.data.dtype)
        missing = set(self._params) - set(state)
        if missing:
            raise DataError(f"checkpoint missing parameters: {sorted(missing)}")

    # -- forward -------------------------------------------------------------
    def _conv(self, name, x, stride=1):
        p = self._params
        pad = self.hyper.kernel // 2
        return ad.conv1d(x, p[name + ".w"], p[name + ".b"],
                         stride=stride, padding=pad)

    def _temb(self, tau):
        p = self._params
        e = Tensor(sinusoidal_embedding(tau, self.hyper.temb_dim)
                   .astype(self.hyper.dtype))
        e = ad.reshape(e, (e.shape[0], self.hyper.temb_dim, 1))
        e = ad.gelu(ad.channel_linear(e, p["temb1.w"], p["temb1.b"]))
        return ad.channel_linear(e, p["temb2.w"], p["temb2.b"])  # [B, H, 1]

    def _bias(self, name, emb):
        p = self._params
        return ad.channel_linear(emb, p[name + ".w"], p[name + ".b"])

    def forward(self, x_noisy, cond, tau):
        """x_noisy, cond: [B, 2, n_t] arrays or Tensors; tau: [B] ints."""
        xn = x_noisy if isinstance(x_noisy, Tensor) else Tensor(
            np.asarray(x_noisy, dtype=self.hyper.dtype))
        cd = cond if isinstance(cond, Tensor) else Tensor(
            np.asarray(cond, dtype=self.hyper.dtype))
        x = ad.concat([xn, cd], axis=1)
        emb = self._temb(tau)
        e0 = ad.gelu(self._conv("enc0", x) + self._bias("t_enc0", emb))
        e1 = ad.gelu(self._conv("enc1", e0, stride=2)
                     + self._bias("t_enc1", emb))
        e2 = ad.gelu(self._conv("enc2", e1, stride=2)
                     + self._bias("t_enc2", emb))
        m = ad.gelu(self._conv("mid", e2) + self._bias("t_mid", emb))
        u1 = ad.repeat_interleave(m, 2, axis=2)
        u1 = ad.gelu(self._conv("dec1", ad.concat([u1, e1], axis=1))
                     + self._bias("t_dec1", emb))
        u0 = ad.repeat_interleave(u1, 2, axis=2)
        u0 = ad.gelu(self._conv("dec0", ad.concat([u0, e0], axis=1))
                     + self._bias("t_dec0", emb))
        return self._conv("out", u0)


# -- training ------------------------------------------------------------------

def normalize_by_condition(cond, ref=None, eps=1e-30):
    """Per-trace max-abs of the condition; scales both arrays to unit range."""
    cond = np.asarray(cond)
    axes = tuple(range(1, cond.ndim))
    scale = np.abs(cond).max(axis=axes)
    scale = np.maximum(scale, eps).reshape((-1,) + (1,) * (cond.ndim - 1))
    if ref is None:
        return cond / scale, scale
    return cond / scale, np.asarray(ref) / scale, scale


def train_ddpm(cond_traces, ref_traces, hyper: DdpmHyper, log=None):
    """cond/ref: [N, n_comp, n_t]. Returns (unet, schedule, loss curve)."""
    cond_traces = np.asarray(cond_traces, dtype=hyper.dtype)
    ref_traces = np.asarray(ref_traces, dtype=hyper.dtype)
    if cond_traces.shape != ref_traces.shape:
        raise DataError(f"condition {cond_traces.shape} and reference "
                        f"{ref_traces.shape} shapes differ")
    n, _, n_t = cond_traces.shape
    cond_n, ref_n, _ = normalize_by_condition(cond_traces, ref_traces)
    cond_n = cond_n.astype(hyper.dtype)
    ref_n = ref_n.astype(hyper.dtype)
    schedule = make_schedule(hyper.n_steps, hyper.beta_start, hyper.beta_end)
    net = UNet1d(n_t, hyper)
    opt = Adam(net.params().values(), lr=hyper.lr)
    sched = CosineRestarts(hyper.lr, hyper.train_steps, hyper.restarts)
    rng = make_rng(hyper.seed, "ddpm-train")
    curve = []
    for step in range(hyper.train_steps):
        idx = rng.integers(0, n, size=min(hyper.batch, n))
        tau = rng.integers(1, schedule.n_steps + 1, size=len(idx))
        eps = rng.standard_normal(ref_n[idx].shape).astype(hyper.dtype)
        x_tau = forward_diffuse(ref_n[idx], tau, eps, schedule)
        pred = net.forward(x_tau, cond_n[idx], tau)
        diff = pred - Tensor(eps)
        loss = ad.tmean(diff * diff)
        lv = loss.item()
        if not np.isfinite(lv):
            raise NumericError(f"NaN diffusion loss at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step(lr=sched.lr(step))
        curve.append(lv)
        if log is not None and (step + 1) % 200 == 0:
            log(f"step {step + 1}: loss {np.mean(curve[-200:]):.4f}")
    return net, schedule, curve


# -- sampling ------------------------------------------------------------------

def sample(net: UNet1d, schedule: NoiseSchedule, cond, rng, batch=64):
    """Reverse diffusion conditioned on cond [N, n_comp, n_t] (normalized).

    Deterministic given rng state; the final step adds no noise.
    """
    cond = np.asarray(cond, dtype=net.hyper.dtype)
    out = np.empty_like(cond)
    T = schedule.n_steps
    for b0 in range(0, len(cond), batch):
        c = cond[b0:b0 + batch]
        x = rng.standard_normal(c.shape).astype(net.hyper.dtype)
        for tau in range(T, 0, -1):
            beta = schedule.betas[tau - 1]
            alpha = schedule.alphas[tau - 1]
            abar = schedule.alpha_bars[tau - 1]
            with ad.no_grad():
                eps_hat = net.forward(
                    x, c, np.full(len(c), tau, dtype=np.int64)).data
            x = (x - beta / np.sqrt(1.0 - abar) * eps_hat) / np.sqrt(alpha)
            if tau > 1:
                z = rng.standard_normal(c.shape).astype(net.hyper.dtype)
                x = x + np.sqrt(beta) * z
            x = x.astype(net.hyper.dtype)
            if not np.all(np.isfinite(x)):
                raise NumericError(f"non-finite sample at step {tau}")
        out[b0:b0 + batch] = x
    return out


def enhance_traceset(net: UNet1d, schedule: NoiseSchedule, cond_ts: TraceSet,
                     seed, record_index=0) -> TraceSet:
    """Correct one operator-predicted TraceSet via the reverse chain."""
    cond = cond_ts.data.astype(net.hyper.dtype)
    cond_n, scale = normalize_by_condition(cond)
    rng = make_rng(derive_seed(seed, "enhance", record_index))
    x = sample(net, schedule, cond_n.astype(net.hyper.dtype), rng)
    data = (x * scale).astype(np.float32)
    return TraceSet(dt=cond_ts.dt, data=data, sensor_x=cond_ts.sensor_x)
