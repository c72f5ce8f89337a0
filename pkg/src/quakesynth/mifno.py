"""Multiple-input factorized Fourier neural operator.

Maps (geology grid, source parameters) to the surface velocity traces. A
geology branch of factorized Fourier layers encodes the material field over
(x, depth); its depth-pooled features are broadcast over a coarse latent
time axis together with a source-vector embedding and explicit space-time
conditioning channels (expected P/S moveout and wavelet templates from a
straight-ray travel-time estimate). Fused Fourier layers over (x, time)
then shape the wavefield, and per-component projection heads expand the
latent time axis to the output sampling rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DataError, NumericError
from .optim import Adam, CosineRestarts
from .seeding import make_rng
from .waveprop import GeologyModel, SourceSpec, TraceSet


@dataclass
class MifnoHyper:
    width: int = 20
    geo_layers: int = 3
    fused_layers: int = 4
    modes_x: int = 8
    modes_t: int = 12
    time_axis: int = 64
    ff_hidden: int = 32
    source_hidden: int = 64
    epochs: int = 60
    batch: int = 8
    lr: float = 1e-3
    restarts: int = 2
    seed: int = 0
    dtype: str = "float32"


class FfnoLayer:
    """One factorized Fourier layer: per-axis spectral mixing, pointwise
    feed-forward, residual connection."""

    def __init__(self, width, modes_x, modes_t, ff_hidden, nx, nt, rng, dtype):
        if modes_x > nx // 2 + 1:
            raise DataError(f"modes_x={modes_x} exceeds axis capacity "
                            f"{nx // 2 + 1}")
        if modes_t > nt // 2 + 1:
            raise DataError(f"modes_t={modes_t} exceeds axis capacity "
                            f"{nt // 2 + 1}")
        self.nx, self.nt = nx, nt
        self.modes_x, self.modes_t = modes_x, modes_t
        scale = 1.0 / width

        def w(*shape):
            return Tensor(rng.normal(0.0, scale, size=shape).astype(dtype),
                          requires_grad=True)

        self.rx_re, self.rx_im = w(width, width, modes_x), w(width, width, modes_x)
        self.rt_re, self.rt_im = w(width, width, modes_t), w(width, width, modes_t)
        s2 = np.sqrt(2.0 / (width + ff_hidden))
        self.w1 = Tensor(rng.normal(0, s2, (ff_hidden, width)).astype(dtype),
                         requires_grad=True)
        self.b1 = Tensor(np.zeros(ff_hidden, dtype=dtype), requires_grad=True)
        self.w2 = Tensor(rng.normal(0, s2, (width, ff_hidden)).astype(dtype),
                         requires_grad=True)
        self.b2 = Tensor(np.zeros(width, dtype=dtype), requires_grad=True)

    def params(self, prefix):
        return {f"{prefix}.{k}": getattr(self, k) for k in
                ("rx_re", "rx_im", "rt_re", "rt_im", "w1", "b1", "w2", "b2")}

    def spectral(self, z):
        """Sum of per-axis truncated spectral convolutions (linear path)."""
        # x axis (axis 2)
        zx = ad.rfft(z, axis=2)
        zx = zx[:, :, :self.modes_x, :]
        zx = ad.transpose(zx, (0, 1, 3, 2))            # [B,C,NT,KX]
        rx = ad.make_complex(self.rx_re, self.rx_im)
        yx = ad.mode_mix(zx, rx)
        yx = ad.transpose(yx, (0, 1, 3, 2))            # [B,C,KX,NT]
        yx = ad.pad_axis(yx, 2, 0, self.nx // 2 + 1 - self.modes_x)
        sx = ad.irfft(yx, self.nx, axis=2)
        # t axis (axis 3)
        zt = ad.rfft(z, axis=3)
        zt = zt[:, :, :, :self.modes_t]                # [B,C,NX,KT]
        rt = ad.make_complex(self.rt_re, self.rt_im)
        yt = ad.mode_mix(zt, rt)
        yt = ad.pad_axis(yt, 3, 0, self.nt // 2 + 1 - self.modes_t)
        st = ad.irfft(yt, self.nt, axis=3)
        return sx + st

    def feed_forward(self, u):
        u = ad.channel_linear(u, self.w1, self.b1)
        u = ad.gelu(u)
        return ad.channel_linear(u, self.w2, self.b2)

    def forward(self, z):
        return z + self.feed_forward(ad.gelu(self.spectral(z)))


class Mifno:
    """Geology branch + source branch + fused Fourier layers + projections."""

    N_SOURCE_FEATURES = 4  # x_s, z_s normalized; sin/cos of theta_s
    N_GEO_FEATURES = 5     # vs, x, z, source distance, source x-offset
    N_TIME_FEATURES = 4    # P/S wavelet templates, P/S time-since-arrival

    def __init__(self, nx, nz, n_t_out, n_comp=2, hyper: MifnoHyper | None = None,
                 vs_range=(1000.0, 4500.0)):
        self.hyper = h = hyper or MifnoHyper()
        if n_t_out % h.time_axis != 0:
            raise DataError(f"output length {n_t_out} must be a multiple of "
                            f"the latent time axis {h.time_axis}")
        self.nx, self.nz, self.n_t_out, self.n_comp = nx, nz, n_t_out, n_comp
        self.nt_lat = h.time_axis
        self.expand = n_t_out // h.time_axis
        self.vs_range = vs_range
        dtype = h.dtype
        rng = make_rng(h.seed, "mifno-init")
        W = h.width

        def lin(o, i):
            s = np.sqrt(2.0 / (o + i))
            return (Tensor(rng.normal(0, s, (o, i)).astype(dtype),
                           requires_grad=True),
                    Tensor(np.zeros(o, dtype=dtype), requires_grad=True))

        self.p_w, self.p_b = lin(W, self.N_GEO_FEATURES)     # uplift
        self.src_w1, self.src_b1 = lin(h.source_hidden, self.N_SOURCE_FEATURES)
        self.src_w2, self.src_b2 = lin(W * nx, h.source_hidden)
        self.src_bias = Tensor(np.zeros(W, dtype=dtype), requires_grad=True)
        self.mix_w, self.mix_b = lin(W, 2 * W + self.N_TIME_FEATURES)
        geo_modes = min(h.modes_x, nz // 2 + 1)
        self.geo_stack = [FfnoLayer(W, h.modes_x, geo_modes, h.ff_hidden,
                                    nx, nz, rng, dtype)
                          for _ in range(h.geo_layers)]
        self.fused_stack = [FfnoLayer(W, h.modes_x, h.modes_t, h.ff_hidden,
                                      nx, self.nt_lat, rng, dtype)
                            for _ in range(h.fused_layers)]
        self.q_w, self.q_b = [], []
        for _ in range(n_comp):
            # heads see the fused features plus the raw conditioning
            # channels, so arrival templates reach the output directly
            w, b = lin(self.expand, W + self.N_TIME_FEATURES + 2)
            self.q_w.append(w)
            self.q_b.append(b)
        # gate mapping fused features to amplitude fields that multiply the
        # P/S wavelet templates, so the heads can emit template arrivals with
        # a learned space-time amplitude directly
        self.gate_w, self.gate_b = lin(2, W)
        # log-amplitude head: record amplitudes span orders of magnitude, so
        # the trace heads emit unit-scale shapes and this head sets the gain
        self.amp_w, self.amp_b = lin(1, W)
        # amplitude of the physical traces relative to the network output;
        # fit from the training targets, persisted with the parameters
        self.trace_scale = 1.0

    # -- parameter registry --------------------------------------------------
    def params(self) -> dict:
        out = {"p_w": self.p_w, "p_b": self.p_b,
               "src_w1": self.src_w1, "src_b1": self.src_b1,
               "src_w2": self.src_w2, "src_b2": self.src_b2,
               "src_bias": self.src_bias,
               "mix_w": self.mix_w, "mix_b": self.mix_b,
               "amp_w": self.amp_w, "amp_b": self.amp_b,
               "gate_w": self.gate_w, "gate_b": self.gate_b}
        for i, layer in enumerate(self.geo_stack):
            out.update(layer.params(f"geo{i}"))
        for i, layer in enumerate(self.fused_stack):
            out.update(layer.params(f"fused{i}"))
        for c in range(self.n_comp):
            out[f"q{c}_w"] = self.q_w[c]
            out[f"q{c}_b"] = self.q_b[c]
        return out

    def load_state(self, state: dict):
        state = dict(state)
        if "trace_scale" in state:
            self.trace_scale = float(state.pop("trace_scale").reshape(()))
        params = self.params()
        for name, arr in state.items():
            if name not in params:
                raise DataError(f"unexpected parameter '{name}' in checkpoint")
            p = params[name]
            if tuple(arr.shape) != tuple(p.data.shape):
                raise DataError(
                    f"checkpoint parameter '{name}' has shape {arr.shape}, "
                    f"expected {p.data.shape}")
            p.data = arr.astype(p.data.dtype)
        missing = set(params) - set(state)
        if missing:
            raise DataError(f"checkpoint missing parameters: {sorted(missing)}")

    def state(self) -> dict:
        out = {k: v.data for k, v in self.params().items()}
        out["trace_scale"] = np.array([self.trace_scale], dtype=np.float64)
        return out

    # -- featurization -------------------------------------------------------
    def geology_features(self, vs_batch, srcs):
        """vs [B, nx, nz] and normalized sources -> [B, 5, nx, nz].

        Besides the velocity field and grid coordinates, two source-geometry
        channels (distance to the source and signed surface offset) give the
        spectral layers direct access to the moveout structure that a
        low-dimensional source embedding cannot express precisely.
        """
        vs = np.asarray(vs_batch, dtype=self.hyper.dtype)
        lo, hi = self.vs_range
        vsn = (vs - lo) / (hi - lo)
        xg = np.broadcast_to(np.linspace(0, 1, self.nx)[None, :, None],
                             vs.shape)
        zg = np.broadcast_to(np.linspace(0, 1, self.nz)[None, None, :],
                             vs.shape)
        sx = np.asarray([s[0] for s in srcs],
                        dtype=np.float64)[:, None, None]
        sz = np.asarray([s[1] for s in srcs],
                        dtype=np.float64)[:, None, None]
        dist = np.sqrt((xg - sx) ** 2 + (zg - sz) ** 2) / np.sqrt(2.0)
        offset = xg - sx
        feats = np.stack([vsn, xg, zg,
                          dist.astype(self.hyper.dtype),
                          offset.astype(self.hyper.dtype)], axis=1)
        return feats.astype(self.hyper.dtype)

    def source_features(self, srcs):
        """Normalized coordinates and sin/cos-encoded angle, [B, 4]."""
        return np.array([[s[0], s[1], np.sin(s[2]), np.cos(s[2])]
                         for s in srcs], dtype=self.hyper.dtype)

    def time_features(self, geos, srcs, dt_out):
        """Space-time conditioning channels, [B, 4, nx, nt_lat].

        Straight-ray P and S travel-time estimates at each surface node
        provide a wavelet template and a time-since-arrival ramp; the fused
        layers only need to deform these instead of synthesizing arrival
        kinematics from scratch.
        """
        B = len(geos)
        t = np.arange(self.nt_lat) * self.expand * dt_out
        window = self.n_t_out * dt_out
        n_samp = 24  # straight-ray quadrature points
        frac = (np.arange(n_samp) + 0.5) / n_samp
        feats = np.empty((B, self.N_TIME_FEATURES, self.nx, self.nt_lat),
                         dtype=np.float64)
        for b, (g, s) in enumerate(zip(geos, srcs)):
            x = np.arange(self.nx) * g.dx
            d = np.hypot(x - s.x_s, s.z_s)
            # path-averaged slowness along the straight source-sensor ray
            px = s.x_s + (x[:, None] - s.x_s) * frac[None, :]
            pz = s.z_s * (1.0 - frac)[None, :]
            ix = np.clip(np.rint(px / g.dx).astype(int), 0, self.nx - 1)
            iz = np.clip(np.rint(pz / g.dx).astype(int), 0, self.nz - 1)
            for j, v in enumerate((g.vp, g.vs)):
                slowness = (1.0 / v.astype(np.float64))[ix, iz].mean(axis=1)
                tau = s.t0 + d * slowness
                dt_arr = t[None, :] - tau[:, None]
                u = (np.pi * s.f0 * dt_arr) ** 2
                feats[b, j] = (1.0 - 2.0 * u) * np.exp(-u)
                feats[b, 2 + j] = dt_arr / window
        return feats.astype(self.hyper.dtype)

    # -- forward -------------------------------------------------------------
    def source_embed(self, sfeat):
        """[B, 4] -> feature map [B, W, nx, nz] broadcast along latent time."""
        s = sfeat if isinstance(sfeat, Tensor) else Tensor(
            np.asarray(sfeat, dtype=self.hyper.dtype))
        h = ad.gelu(ad.channel_linear(
            ad.reshape(s, (s.shape[0], self.N_SOURCE_FEATURES, 1)),
            self.src_w1, self.src_b1))
        h = ad.channel_linear(h, self.src_w2, self.src_b2)
        h = ad.reshape(h, (s.shape[0], self.hyper.width, self.nx, 1))
        return ad.broadcast_to(h, (s.shape[0], self.hyper.width,
                                   self.nx, self.nt_lat))

    def forward_parts(self, geo_feats, src_feats, time_feats):
        """Unit-scale waveform shapes [B, nx, n_comp, n_t_out] and
        per-record log-amplitude [B]."""
        x = geo_feats if isinstance(geo_feats, Tensor) else Tensor(
            np.asarray(geo_feats, dtype=self.hyper.dtype))
        tf = time_feats if isinstance(time_feats, Tensor) else Tensor(
            np.asarray(time_feats, dtype=self.hyper.dtype))
        B = x.shape[0]
        z = ad.channel_linear(x, self.p_w, self.p_b)
        for layer in self.geo_stack:
            z = layer.forward(z)
        # depth-pooled geology features broadcast over the latent time axis
        zp = ad.tmean(z, axis=3, keepdims=True)
        zp = ad.broadcast_to(zp, (B, self.hyper.width, self.nx, self.nt_lat))
        v_s = self.source_embed(src_feats)
        v_s = v_s + ad.reshape(self.src_bias, (1, self.hyper.width, 1, 1))
        z = ad.concat([zp, v_s, tf], axis=1)
        z = ad.channel_linear(z, self.mix_w, self.mix_b)
        for layer in self.fused_stack:
            z = layer.forward(z)
        comps = []
        templates = ad.tslice(tf, (slice(None), slice(0, 2)))
        gated = ad.channel_linear(z, self.gate_w, self.gate_b) * templates
        zq = ad.concat([z, tf, gated], axis=1)
        for c in range(self.n_comp):
            y = ad.channel_linear(zq, self.q_w[c], self.q_b[c])  # [B,r,nx,nt]
            y = ad.transpose(y, (0, 2, 3, 1))                   # [B,nx,nt,r]
            y = ad.reshape(y, (B, self.nx, 1, self.n_t_out))
            comps.append(y)
        shape = ad.concat(comps, axis=2)
        pooled = ad.reshape(ad.tmean(z, axis=(2, 3)),
                            (B, self.hyper.width, 1))
        log_amp = ad.reshape(
            ad.channel_linear(pooled, self.amp_w, self.amp_b), (B,))
        return shape, log_amp

    def forward(self, geo_feats, src_feats, time_feats):
        """Batched forward -> [B, nx, n_comp, n_t_out].

        Output units are trace_scale-relative (multiply by trace_scale for
        physical amplitudes)."""
        shape, log_amp = self.forward_parts(geo_feats, src_feats, time_feats)
        gain = ad.exp(ad.reshape(log_amp, (shape.shape[0], 1, 1, 1)))
        return shape * gain

    def predict(self, geo: GeologyModel, src: SourceSpec, dt_out,
                sensor_x=None) -> TraceSet:
        if (geo.nx, geo.nz) != (self.nx, self.nz):
            raise DataError(f"geology grid {(geo.nx, geo.nz)} does not match "
                            f"operator dims {(self.nx, self.nz)}")
        srcs = [(src.x_s / geo.width, src.z_s / geo.depth, src.theta_s)]
        feats = self.geology_features(geo.vs[None], srcs)
        sf = self.source_features(srcs)
        tf = self.time_features([geo], [src], dt_out)
        with ad.no_grad():
            out = self.forward(feats, sf, tf)
        data = (out.data[0] * self.trace_scale).astype(np.float32)
        if sensor_x is None:
            sensor_x = np.arange(self.nx) * geo.dx
        else:
            idx = sensor_indices(sensor_x, geo.dx, self.nx)
            data = data[idx]
        return TraceSet(dt=dt_out, data=data,
                        sensor_x=np.asarray(sensor_x, dtype=np.float64))


def sensor_indices(sensor_x, dx, nx):
    """Map sensor positions to surface grid columns, validating alignment."""
    idx = np.rint(np.asarray(sensor_x, dtype=np.float64) / dx).astype(int)
    if np.any(np.abs(idx * dx - np.asarray(sensor_x)) > 1e-6 * dx):
        raise DataError("sensor positions do not lie on grid columns")
    if np.any(idx < 0) or np.any(idx >= nx):
        raise DataError("sensor position outside the model surface")
    return idx


def relative_l2(pred: Tensor, ref: np.ndarray):
    """Mean over batch of ||pred - ref||_2 / ||ref||_2 (whole-record norm)."""
    ref = np.asarray(ref, dtype=pred.data.dtype)
    axes = tuple(range(1, ref.ndim))
    den = (np.sqrt((ref.astype(np.float64) ** 2).sum(axis=axes))
           + 1e-30).astype(pred.data.dtype)
    diff = pred - Tensor(ref)
    num = ad.sqrt(ad.tsum(diff * diff, axis=axes) + 1e-24)
    return ad.tmean(num * (1.0 / den))


def train_mifno(records, hyper: MifnoHyper, dt_out, log=None,
                val_records=None, steps_override=None):
    """Train on a list of dataset records; returns (model, loss curves)."""
    if len(records) < 1:
        raise DataError("training requires at least one record")
    nx, nz = records[0].geology.nx, records[0].geology.nz
    n_t = records[0].traces.n_t
    n_comp = records[0].traces.n_comp
    model = Mifno(nx, nz, n_t, n_comp, hyper)
    width, depth = records[0].geology.width, records[0].geology.depth
    srcs = [(r.source.x_s / width, r.source.z_s / depth, r.source.theta_s)
            for r in records]
    geo_feats = model.geology_features(
        np.stack([r.geology.vs for r in records]), srcs)
    src_feats = model.source_features(srcs)
    time_feats = model.time_features([r.geology for r in records],
                                     [r.source for r in records], dt_out)
    # targets are [B, n_sensors, n_comp, n_t]; forward output spans all nx
    # surface nodes and is gathered at each record's sensor columns.
    targets = np.stack([r.traces.data for r in records]).astype(np.float64)
    amps = np.abs(targets).max(axis=(1, 2, 3))
    if np.any(amps == 0.0):
        raise DataError("training set contains an all-zero trace record")
    # shapes are unit max-abs per record; amplitude is regressed in log
    # space around the training geometric mean so gradients stay balanced
    # across records spanning orders of magnitude
    model.trace_scale = float(np.exp(np.mean(np.log(amps))))
    shape_t = (targets / amps[:, None, None, None]).astype(hyper.dtype)
    logamp_t = np.log(amps / model.trace_scale).astype(hyper.dtype)
    sensor_idx = np.stack([sensor_indices(r.traces.sensor_x,
                                          records[0].geology.dx, nx)
                           for r in records])
    n = len(records)
    steps_per_epoch = max(1, n // hyper.batch)
    total_steps = steps_override or hyper.epochs * steps_per_epoch
    opt = Adam(model.params().values(), lr=hyper.lr)
    sched = CosineRestarts(hyper.lr, total_steps, hyper.restarts)
    rng = make_rng(hyper.seed, "mifno-train")
    train_curve, val_curve = [], []
    step = 0
    epoch_losses = []
    while step < total_steps:
        order = rng.permutation(n)
        for b0 in range(0, max(n - hyper.batch + 1, 1), hyper.batch):
            if step >= total_steps:
                break
            idx = order[b0:b0 + hyper.batch]
            shape, log_amp = model.forward_parts(geo_feats[idx],
                                                 src_feats[idx],
                                                 time_feats[idx])
            shape = ad.gather_rows(shape, sensor_idx[idx])
            amp_err = log_amp - Tensor(logamp_t[idx])
            loss = relative_l2(shape, shape_t[idx]) \
                + ad.tmean(amp_err * amp_err)
            lv = loss.item()
            if not np.isfinite(lv):
                raise NumericError(f"NaN loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr=sched.lr(step))
            epoch_losses.append(lv)
            step += 1
        train_curve.append(float(np.mean(epoch_losses)))
        epoch_losses = []
        if val_records:
            val_curve.append(evaluate_loss(model, val_records))
        if log is not None:
            msg = f"epoch {len(train_curve)}: train {train_curve[-1]:.4f}"
            if val_curve:
                msg += f" val {val_curve[-1]:.4f}"
            log(msg)
    return model, train_curve, val_curve


def evaluate_loss(model: Mifno, records):
    width, depth = records[0].geology.width, records[0].geology.depth
    srcs = [(r.source.x_s / width, r.source.z_s / depth, r.source.theta_s)
            for r in records]
    geo_feats = model.geology_features(
        np.stack([r.geology.vs for r in records]), srcs)
    src_feats = model.source_features(srcs)
    time_feats = model.time_features([r.geology for r in records],
                                     [r.source for r in records],
                                     records[0].traces.dt)
    targets = np.stack([r.traces.data for r in records]).astype(
        model.hyper.dtype) / model.trace_scale
    sensor_idx = np.stack([sensor_indices(r.traces.sensor_x,
                                          records[0].geology.dx, model.nx)
                           for r in records])
    total, count = 0.0, 0
    with ad.no_grad():
        for b0 in range(0, len(records), 16):
            pred = model.forward(geo_feats[b0:b0 + 16],
                                 src_feats[b0:b0 + 16],
                                 time_feats[b0:b0 + 16])
            pred = ad.tslice(pred, (np.arange(pred.shape[0])[:, None],
                                    sensor_idx[b0:b0 + 16]))
            loss = relative_l2(pred, targets[b0:b0 + 16])
            k = len(targets[b0:b0 + 16])
            total += loss.item() * k
            count += k
    return total / count
