"""Random geology and source sampling, dataset construction and persistence.

Geologies are layered shear-velocity profiles (piecewise constant in depth,
velocity increasing downwards) modulated by a correlated Gaussian random
field; vp follows a Poisson-solid ratio and density a Gardner-style power
law. Records are stored in a "QSDS" binary container: magic, u32 version,
u64 header-JSON length, header JSON, then fixed-size little-endian float32
payloads in record order, so files are bit-reproducible and append-stable.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict

import numpy as np

from .errors import DataError, NumericError
from .seeding import derive_seed, make_rng
from .waveprop import GeologyModel, SimConfig, SourceSpec, TraceSet, simulate

MAGIC = b"QSDS"
VERSION = 1
VP_VS_RATIO = np.sqrt(3.0)       # Poisson solid
GARDNER_COEFF, GARDNER_EXP = 310.0, 0.25


@dataclass
class GeoConfig:
    nx: int = 32
    nz: int = 32
    dx: float = 40.0
    n_layers_min: int = 2
    n_layers_max: int = 5
    vs_min: float = 1000.0
    vs_max: float = 4500.0
    corr_len: float = 200.0      # heterogeneity correlation length (m)
    cv: float = 0.1              # coefficient of variation
    # source sampling
    src_x_margin: float = 0.1    # x_s uniform in the central 80 %
    src_depth_frac: tuple = (0.25, 0.75)
    theta_max: float = np.pi
    m0: float = 1e9
    f0: float = 2.0
    t0: float = 0.6

    def __post_init__(self):
        if self.cv < 0:
            raise DataError("coefficient of variation must be >= 0")
        if not (0 < self.vs_min < self.vs_max):
            raise DataError("need 0 < vs_min < vs_max")
        if self.n_layers_min < 1 or self.n_layers_max < self.n_layers_min:
            raise DataError("invalid layer count range")


def gaussian_random_field(nx, nz, dx, corr_len, rng):
    """Unit-variance field with exponential correlation, spectral synthesis.

    White noise is filtered by the square root of the 2D exponential-
    covariance power spectrum, S(k) ~ (1 + (k*l)^2)^(-3/2).
    """
    white = rng.standard_normal((nx, nz))
    kx = np.fft.fftfreq(nx, d=dx) * 2 * np.pi
    kz = np.fft.fftfreq(nz, d=dx) * 2 * np.pi
    k2 = kx[:, None] ** 2 + kz[None, :] ** 2
    amp = (1.0 + k2 * corr_len ** 2) ** (-0.75)
    spec = np.fft.fft2(white) * amp
    spec[0, 0] = 0.0  # zero-mean field
    fieldr = np.fft.ifft2(spec).real
    std = fieldr.std()
    return fieldr / std if std > 0 else fieldr


def sample_geology(cfg: GeoConfig, rng) -> GeologyModel:
    """Layered profile times (1 + correlated perturbation), clipped to range."""
    n_layers = int(rng.integers(cfg.n_layers_min, cfg.n_layers_max + 1))
    # velocities increase with depth; keep headroom for the heterogeneity
    v = np.sort(rng.uniform(cfg.vs_min, cfg.vs_max, size=n_layers))
    if n_layers > 1:
        cuts = np.sort(rng.choice(np.arange(1, cfg.nz), size=n_layers - 1,
                                  replace=False))
    else:
        cuts = np.array([], dtype=int)
    profile = np.empty(cfg.nz)
    edges = np.concatenate([[0], cuts, [cfg.nz]])
    for i in range(n_layers):
        profile[edges[i]:edges[i + 1]] = v[i]
    vs = np.broadcast_to(profile, (cfg.nx, cfg.nz)).copy()
    if cfg.cv > 0:
        het = gaussian_random_field(cfg.nx, cfg.nz, cfg.dx, cfg.corr_len, rng)
        vs = vs * (1.0 + cfg.cv * het)
    vs = np.clip(vs, cfg.vs_min, cfg.vs_max).astype(np.float32)
    vp = (VP_VS_RATIO * vs).astype(np.float32)
    rho = (GARDNER_COEFF * vp.astype(np.float64) ** GARDNER_EXP).astype(np.float32)
    return GeologyModel(cfg.nx, cfg.nz, cfg.dx, vs, vp, rho)


def sample_source(cfg: GeoConfig, rng) -> SourceSpec:
    width = cfg.nx * cfg.dx
    depth = cfg.nz * cfg.dx
    x_s = rng.uniform(cfg.src_x_margin * width, (1 - cfg.src_x_margin) * width)
    z_s = rng.uniform(cfg.src_depth_frac[0] * depth,
                      cfg.src_depth_frac[1] * depth)
    theta_s = rng.uniform(0.0, cfg.theta_max)
    # quantize to the container precision so records round-trip bit-exactly
    f32 = lambda v: float(np.float32(v))
    return SourceSpec(x_s=f32(x_s), z_s=f32(z_s), theta_s=f32(theta_s),
                      m0=f32(cfg.m0), f0=f32(cfg.f0), t0=f32(cfg.t0))


def select_sensors(ts: TraceSet, k: int, rng) -> TraceSet:
    """k distinct sensors sampled without replacement."""
    if k > ts.n_sensors:
        raise DataError(f"cannot select {k} of {ts.n_sensors} sensors")
    idx = rng.choice(ts.n_sensors, size=k, replace=False)
    return TraceSet(dt=ts.dt, data=ts.data[idx], sensor_x=ts.sensor_x[idx])


@dataclass
class Record:
    geology: GeologyModel
    source: SourceSpec
    traces: TraceSet
    index: int
    split: str


class Dataset:
    """In-memory dataset with QSDS file persistence."""

    def __init__(self, header: dict, records: list):
        self.header = header
        self.records = records

    def __len__(self):
        return len(self.records)

    def split(self, tag):
        return [r for r in self.records if r.split == tag]

    # -- binary format -----------------------------------------------------
    def write(self, path):
        hdr = json.dumps(self.header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", VERSION))
            f.write(struct.pack("<Q", len(hdr)))
            f.write(hdr)
            for rec in self.records:
                f.write(_record_payload(rec))

    @classmethod
    def read(cls, path):
        with open(path, "rb") as f:
            blob = f.read()
        if blob[:4] != MAGIC:
            raise DataError(f"{path}: not a QSDS container (bad magic)")
        (version,) = struct.unpack_from("<I", blob, 4)
        if version != VERSION:
            raise DataError(f"{path}: unsupported QSDS version {version}")
        (hlen,) = struct.unpack_from("<Q", blob, 8)
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
        off = 16 + hlen
        records = []
        n = header["n_records"]
        for i in range(n):
            rec, off = _record_from_payload(blob, off, header, i)
            records.append(rec)
        if off != len(blob):
            raise DataError(f"{path}: trailing bytes after {n} records")
        return cls(header, records)


def _record_payload(rec: Record) -> bytes:
    g, s, t = rec.geology, rec.source, rec.traces
    parts = [
        np.ascontiguousarray(g.vs, dtype="<f4").tobytes(),
        np.ascontiguousarray(g.vp, dtype="<f4").tobytes(),
        np.ascontiguousarray(g.rho, dtype="<f4").tobytes(),
        np.array([s.x_s, s.z_s, s.theta_s, s.m0, s.f0, s.t0],
                 dtype="<f4").tobytes(),
        np.ascontiguousarray(t.data, dtype="<f4").tobytes(),
    ]
    return b"".join(parts)


def _record_from_payload(blob, off, header, index):
    nx, nz = header["nx"], header["nz"]
    dx = header["dx"]
    n_sensors, n_comp, n_t = header["n_sensors"], header["n_comp"], header["n_t"]

    def take(count):
        nonlocal off
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
        off += 4 * count
        return arr

    vs = take(nx * nz).reshape(nx, nz).copy()
    vp = take(nx * nz).reshape(nx, nz).copy()
    rho = take(nx * nz).reshape(nx, nz).copy()
    sarr = take(6)
    data = take(n_sensors * n_comp * n_t).reshape(n_sensors, n_comp, n_t).copy()
    geo = GeologyModel(nx, nz, dx, vs, vp, rho)
    src = SourceSpec(*map(float, sarr))
    sensor_x = np.asarray(header["sensor_x"], dtype=np.float64)
    ts = TraceSet(dt=header["dt"], data=data, sensor_x=sensor_x)
    split = header["splits"][index]
    return Record(geo, src, ts, index, split), off


def record_split(master_seed, index, test_every=8) -> str:
    return "test" if derive_seed(master_seed, "split", index) % test_every == 0 \
        else "train"


def make_record(cfg: GeoConfig, sim_cfg: SimConfig, master_seed, index,
                test_every=8) -> Record:
    """Simulate one record; randomness keyed by (master_seed, index)."""
    rng = make_rng(master_seed, "record", index)
    geo = sample_geology(cfg, rng)
    src = sample_source(cfg, rng)
    ts = simulate(geo, src, sim_cfg)
    return Record(geo, src, ts, index, record_split(master_seed, index,
                                                    test_every))


def build_dataset(n, cfg: GeoConfig, sim_cfg: SimConfig, master_seed,
                  out_path=None, test_every=8, log=None) -> Dataset:
    """n simulated records with deterministic per-index seeding and split."""
    if n < 1:
        raise DataError("n must be >= 1")
    records = []
    for i in range(n):
        try:
            records.append(make_record(cfg, sim_cfg, master_seed, i,
                                       test_every))
        except NumericError as e:
            if log is not None:
                log(f"record {i} skipped: {e}")
    header = {
        "format": "quakesynth-dataset",
        "n_records": len(records),
        "nx": cfg.nx, "nz": cfg.nz, "dx": cfg.dx,
        "n_sensors": cfg.nx, "n_comp": 2, "n_t": sim_cfg.n_t,
        "dt": sim_cfg.dt_out,
        "bands": {"low": [0.0, 1.0], "mid": [1.0, 2.0], "high": [2.0, 5.0]},
        "seed": master_seed,
        "test_every": test_every,
        "sensor_x": [i * cfg.dx for i in range(cfg.nx)],
        "splits": [r.split for r in records],
        "version": VERSION,
    }
    ds = Dataset(header, records)
    if out_path is not None:
        ds.write(out_path)
    return ds


def traces_only_dataset(header_like: dict, trace_sets: list, tag: str):
    """Container for prediction TraceSets (no geology/source payload)."""
    header = {
        "format": "quakesynth-traces",
        "model": tag,
        "n_records": len(trace_sets),
        "n_sensors": header_like["n_sensors"],
        "n_comp": header_like["n_comp"],
        "n_t": header_like["n_t"],
        "dt": header_like["dt"],
        "sensor_x": header_like["sensor_x"],
        "record_indices": header_like.get("record_indices", []),
        "version": VERSION,
    }
    return TraceDataset(header, trace_sets)


class TraceDataset:
    """QSDS container holding only TraceSets (model predictions)."""

    def __init__(self, header, trace_sets):
        self.header = header
        self.trace_sets = trace_sets

    def __len__(self):
        return len(self.trace_sets)

    def write(self, path):
        hdr = json.dumps(self.header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", VERSION))
            f.write(struct.pack("<Q", len(hdr)))
            f.write(hdr)
            for ts in self.trace_sets:
                f.write(np.ascontiguousarray(ts.data, dtype="<f4").tobytes())

    @classmethod
    def read(cls, path):
        with open(path, "rb") as f:
            blob = f.read()
        if blob[:4] != MAGIC:
            raise DataError(f"{path}: not a QSDS container (bad magic)")
        (hlen,) = struct.unpack_from("<Q", blob, 8)
        header = json.loads(blob[16:16 + hlen].decode("utf-8"))
        if header.get("format") != "quakesynth-traces":
            raise DataError(f"{path}: not a trace container")
        off = 16 + hlen
        n_sensors, n_comp, n_t = (header["n_sensors"], header["n_comp"],
                                  header["n_t"])
        count = n_sensors * n_comp * n_t
        sensor_x = np.asarray(header["sensor_x"], dtype=np.float64)
        out = []
        for _ in range(header["n_records"]):
            arr = np.frombuffer(blob, dtype="<f4", count=count, offset=off)
            off += 4 * count
            out.append(TraceSet(dt=header["dt"],
                                data=arr.reshape(n_sensors, n_comp, n_t).copy(),
                                sensor_x=sensor_x))
        return cls(header, out)
