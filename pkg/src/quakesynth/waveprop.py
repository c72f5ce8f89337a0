"""2D P-SV elastic wave propagation on a staggered finite-difference grid.

Velocity-stress formulation, 2nd order in time and 4th order in space
(Virieux-style staggering), with a stress-image free surface at the top row
and an exponential damping sponge on the other three sides. Produces
surface velocity traces from a gridded material model and a point
double-couple source.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, NumericError

C1, C2 = 9.0 / 8.0, 1.0 / 24.0  # 4th-order staggered-grid coefficients
_H = 2                          # halo rows/cols behind the sponge
_WAVELET_HALF_WIDTH = 1.2       # Ricker support half-width, units of 1/f0
_PPW_MIN = 5.0                  # grid points per minimum wavelength
_F0_BANDWIDTH = 2.5             # usable Ricker bandwidth, units of f0


@dataclass
class GeologyModel:
    """Gridded material field over an (x, z) domain, z positive down."""

    nx: int
    nz: int
    dx: float
    vs: np.ndarray
    vp: np.ndarray
    rho: np.ndarray

    def __post_init__(self):
        self.vs = np.asarray(self.vs, dtype=np.float64)
        self.vp = np.asarray(self.vp, dtype=np.float64)
        self.rho = np.asarray(self.rho, dtype=np.float64)
        shape = (self.nx, self.nz)
        for name in ("vs", "vp", "rho"):
            g = getattr(self, name)
            if g.shape != shape:
                raise DataError(f"geology grid {name} has shape {g.shape}, "
                                f"expected {shape}")
        if self.dx <= 0:
            raise DataError("dx must be positive")
        if np.any(self.vs <= 0) or np.any(self.rho <= 0):
            raise DataError("vs and rho must be positive everywhere")
        if np.any(self.vp < np.sqrt(2.0) * self.vs * (1 - 1e-12)):
            raise DataError("vp >= sqrt(2)*vs required (positive Lame moduli)")

    @property
    def width(self):
        return self.nx * self.dx

    @property
    def depth(self):
        return self.nz * self.dx

    @classmethod
    def homogeneous(cls, nx, nz, dx, vs, vp, rho=2500.0):
        one = np.ones((nx, nz))
        return cls(nx, nz, dx, vs * one, vp * one, rho * one)


@dataclass
class SourceSpec:
    """Point double-couple source: position, orientation, amplitude, wavelet."""

    x_s: float
    z_s: float
    theta_s: float
    m0: float = 1.0
    f0: float = 2.0
    t0: float = 0.6

    def __post_init__(self):
        if self.f0 <= 0:
            raise DataError("f0 must be positive")
        if self.z_s <= 0:
            raise DataError("source must lie below the free surface (z_s > 0)")
        if self.t0 < _WAVELET_HALF_WIDTH / self.f0:
            raise DataError(
                f"source onset clipped: t0={self.t0} < "
                f"{_WAVELET_HALF_WIDTH / self.f0:.4g} = 1.2/f0")

    def validate_against(self, geo: GeologyModel):
        if not (0 <= self.x_s < geo.width) or not (0 < self.z_s < geo.depth):
            raise DataError(
                f"source at ({self.x_s}, {self.z_s}) outside domain "
                f"{geo.width} x {geo.depth}")
        f_max = float(np.min(geo.vs)) / (_PPW_MIN * geo.dx)
        if f_max < _F0_BANDWIDTH * self.f0:
            raise DataError(
                f"bandwidth violation: resolvable f_max={f_max:.3g} Hz < "
                f"{_F0_BANDWIDTH}*f0={_F0_BANDWIDTH * self.f0:.3g} Hz "
                f"(need >= {_PPW_MIN} grid points per minimum wavelength)")


@dataclass
class TraceSet:
    """Surface velocity seismograms: [n_sensors, n_comp, n_t]."""

    dt: float
    data: np.ndarray
    sensor_x: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        self.sensor_x = np.asarray(self.sensor_x, dtype=np.float64)
        if self.dt <= 0:
            raise DataError("trace dt must be positive")
        if self.data.ndim != 3:
            raise DataError(f"trace data must be 3D, got {self.data.shape}")
        if self.sensor_x.shape[0] != self.data.shape[0]:
            raise DataError("sensor_x length must match n_sensors")
        if not np.all(np.isfinite(self.data)):
            raise NumericError("non-finite values in TraceSet")

    @property
    def n_sensors(self):
        return self.data.shape[0]

    @property
    def n_comp(self):
        return self.data.shape[1]

    @property
    def n_t(self):
        return self.data.shape[2]


@dataclass
class SimConfig:
    dt_out: float = 0.01
    n_t: int = 256
    cfl_safety: float = 0.5
    sponge_width: int = 30
    sponge_coeff: float = 0.005
    dt_internal: float | None = None
    record_energy: bool = False


@dataclass
class CflReport:
    ok: bool
    dt: float
    limit: float

    def __bool__(self):
        return self.ok


def source_time_function(f0, t0, t):
    """Ricker wavelet with peak 1 at t = t0."""
    if t0 < _WAVELET_HALF_WIDTH / f0:
        raise DataError(f"source onset clipped: t0={t0} < 1.2/f0")
    u = (np.pi * f0 * (np.asarray(t, dtype=np.float64) - t0)) ** 2
    return (1.0 - 2.0 * u) * np.exp(-u)


def cfl_check(geo: GeologyModel, dt_internal, safety=0.5) -> CflReport:
    limit = safety * geo.dx / float(np.max(geo.vp))
    return CflReport(dt_internal <= limit, dt_internal, limit)


def moment_tensor(theta_s):
    """2D double-couple components (Mxx, Mzz, Mxz) for fault angle theta."""
    s2, c2 = np.sin(2.0 * theta_s), np.cos(2.0 * theta_s)
    return -s2, s2, c2


def _dplus(f, axis, dx):
    """4th-order staggered forward difference; zero at unsupported edges."""
    out = np.zeros_like(f)
    sl = [slice(None)] * f.ndim

    def s(a, b):
        sl2 = list(sl)
        sl2[axis] = slice(a, b)
        return tuple(sl2)

    out[s(1, -2)] = (C1 * (f[s(2, -1)] - f[s(1, -2)])
                     - C2 * (f[s(3, None)] - f[s(0, -3)])) / dx
    return out


def _dminus(f, axis, dx):
    out = np.zeros_like(f)
    sl = [slice(None)] * f.ndim

    def s(a, b):
        sl2 = list(sl)
        sl2[axis] = slice(a, b)
        return tuple(sl2)

    out[s(2, -1)] = (C1 * (f[s(2, -1)] - f[s(1, -2)])
                     - C2 * (f[s(3, None)] - f[s(0, -3)])) / dx
    return out


def simulate(geo: GeologyModel, src: SourceSpec, cfg: SimConfig | None = None):
    """Run the solver; returns a TraceSet (and energy series if requested)."""
    cfg = cfg or SimConfig()
    src.validate_against(geo)

    dt_max = cfg.cfl_safety * geo.dx / float(np.max(geo.vp))
    if cfg.dt_internal is None:
        decim = max(1, int(np.ceil(cfg.dt_out / dt_max - 1e-12)))
        dt = cfg.dt_out / decim
    else:
        dt = cfg.dt_internal
        rep = cfl_check(geo, dt, cfg.cfl_safety)
        if not rep:
            raise NumericError(
                f"CFL violation: dt={rep.dt} exceeds limit {rep.limit:.6g}")
        decim = int(round(cfg.dt_out / dt))
        if abs(decim * dt - cfg.dt_out) > 1e-12 * cfg.dt_out:
            raise DataError("dt_internal must divide dt_out")

    W = cfg.sponge_width
    dxg = geo.dx
    # padded grid: halo+sponge left/right/bottom, halo-only ghost rows on top
    px = _H + W            # left/right pad
    pt = _H                # top ghost rows
    pb = W + _H            # bottom pad
    NX = geo.nx + 2 * px
    NZ = geo.nz + pt + pb
    j0 = pt                # surface row index

    def padgrid(g):
        return np.pad(g, ((px, px), (pt, pb)), mode="edge")

    vs, vp, rho = padgrid(geo.vs), padgrid(geo.vp), padgrid(geo.rho)
    mu = rho * vs ** 2
    lam = rho * vp ** 2 - 2 * mu
    lam2mu = lam + 2 * mu
    # effective surface modulus after eliminating dvz/dz via zero traction
    e_surf = 4 * mu[:, j0] * (lam[:, j0] + mu[:, j0]) / lam2mu[:, j0]

    # material averages at staggered points
    rho_vx = rho.copy()
    rho_vx[:-1, :] = 0.5 * (rho[:-1, :] + rho[1:, :])
    rho_vz = rho.copy()
    rho_vz[:, :-1] = 0.5 * (rho[:, :-1] + rho[:, 1:])
    mu_xz = mu.copy()
    mu_xz[:-1, :-1] = 4.0 / (1.0 / mu[:-1, :-1] + 1.0 / mu[1:, :-1]
                             + 1.0 / mu[:-1, 1:] + 1.0 / mu[1:, 1:])

    # sponge profile on sides and bottom (free surface stays undamped)
    damp = np.ones((NX, NZ))
    prof = np.exp(-(cfg.sponge_coeff * np.arange(W, 0, -1)) ** 2)
    for k in range(W):
        damp[_H + k, :] = np.minimum(damp[_H + k, :], prof[k])
        damp[NX - _H - 1 - k, :] = np.minimum(damp[NX - _H - 1 - k, :], prof[k])
        damp[:, NZ - _H - 1 - k] = np.minimum(damp[:, NZ - _H - 1 - k], prof[k])
    damp[:_H, :] = prof[0]
    damp[-_H:, :] = prof[0]
    damp[:, -_H:] = prof[0]

    vx = np.zeros((NX, NZ))
    vz = np.zeros((NX, NZ))
    txx = np.zeros((NX, NZ))
    tzz = np.zeros((NX, NZ))
    txz = np.zeros((NX, NZ))

    # source cell (stress nodes); txz contribution spread over 4 half-nodes
    is_ = px + int(round(src.x_s / dxg))
    js_ = j0 + int(round(src.z_s / dxg))
    is_ = min(max(is_, px), px + geo.nx - 1)
    js_ = min(max(js_, j0 + 1), j0 + geo.nz - 1)
    mxx, mzz, mxz = moment_tensor(src.theta_s)
    src_scale = src.m0 * dt / dxg ** 2

    n_steps = cfg.n_t * decim
    t_src = (np.arange(n_steps) + 0.5) * dt
    wavelet = source_time_function(src.f0, src.t0, t_src)
    t_support_end = src.t0 + _WAVELET_HALF_WIDTH / src.f0

    n_sensors = geo.nx
    out = np.zeros((n_sensors, 2, cfg.n_t))
    sensor_cols = px + np.arange(n_sensors)
    energy = np.zeros(n_steps) if cfg.record_energy else None

    def apply_images():
        tzz[:, j0] = 0.0
        tzz[:, j0 - 1] = -tzz[:, j0 + 1]
        tzz[:, j0 - 2] = -tzz[:, j0 + 2]
        txz[:, j0 - 1] = -txz[:, j0]
        txz[:, j0 - 2] = -txz[:, j0 + 1]

    sample = 0
    for n in range(n_steps):
        # velocities from stresses
        vx_prev = vx.copy() if cfg.record_energy else None
        vz_prev = vz.copy() if cfg.record_energy else None
        vx += dt / rho_vx * (_dplus(txx, 0, dxg) + _dminus(txz, 1, dxg))
        vz += dt / rho_vz * (_dminus(txz, 0, dxg) + _dplus(tzz, 1, dxg))
        vx *= damp
        vz *= damp

        if cfg.record_energy:
            ke = 0.5 * np.sum(rho_vx * vx_prev * vx)
            ke += 0.5 * np.sum(rho_vz * vz_prev * vz)
            se = np.sum((lam2mu * (txx ** 2 + tzz ** 2) - 2 * lam * txx * tzz)
                        / (8 * mu * (lam + mu)))
            se += np.sum(txz ** 2 / (2 * mu_xz))
            energy[n] = ke + se

        # stresses from velocities
        dvxdx = _dminus(vx, 0, dxg)
        dvzdz = _dminus(vz, 1, dxg)
        # 2nd-order dvz/dz one row below the surface (no ghost reach)
        dvzdz[:, j0 + 1] = (vz[:, j0 + 1] - vz[:, j0]) / dxg
        txx += dt * (lam2mu * dvxdx + lam * dvzdz)
        tzz += dt * (lam * dvxdx + lam2mu * dvzdz)
        # zero-traction surface row: dvz/dz eliminated analytically
        txx[:, j0] += dt * (e_surf * dvxdx[:, j0]
                            - (lam2mu[:, j0] * dvxdx[:, j0]
                               + lam[:, j0] * dvzdz[:, j0]))

        dvxdz = _dplus(vx, 1, dxg)
        dvxdz[:, j0] = (vx[:, j0 + 1] - vx[:, j0]) / dxg
        txz += dt * mu_xz * (dvxdz + _dplus(vz, 0, dxg))

        # source injection as stress increments
        w = wavelet[n] * src_scale
        txx[is_, js_] += mxx * w
        tzz[is_, js_] += mzz * w
        txz[is_ - 1:is_ + 1, js_ - 1:js_ + 1] += 0.25 * mxz * w

        txx *= damp
        tzz *= damp
        txz *= damp
        apply_images()

        if (n + 1) % decim == 0:
            if not np.isfinite(vx[is_, js_]):
                raise NumericError(f"solver blow-up at step {n}")
            # horizontal component averaged onto stress nodes
            vx_node = 0.5 * (vx[sensor_cols - 1, j0] + vx[sensor_cols, j0])
            out[:, 0, sample] = vx_node
            out[:, 1, sample] = vz[sensor_cols, j0]
            sample += 1

    if not np.all(np.isfinite(out)):
        raise NumericError("solver blow-up: non-finite output traces")
    ts = TraceSet(dt=cfg.dt_out, data=out.astype(np.float32),
                  sensor_x=np.arange(n_sensors) * dxg)
    if cfg.record_energy:
        return ts, energy, t_support_end, dt
    return ts


def first_arrival(trace, dt, frac=0.01):
    """Time of the first sample whose |v| exceeds frac * max |v|.

    trace: [n_comp, n_t]; |v| is the vector magnitude across components.
    """
    mag = np.sqrt(np.sum(np.asarray(trace, dtype=np.float64) ** 2, axis=0))
    thresh = frac * mag.max()
    idx = np.argmax(mag > thresh)
    return idx * dt
