"""Seismogram accuracy metrics and goodness-of-fit scores.

Relative amplitude errors, signed band-limited Fourier bias, and
time-frequency envelope/phase goodness-of-fit (0-10 scale) from a Morlet
continuous wavelet transform: EM is the energy-normalized envelope misfit,
PM the energy-weighted phase misfit in [0, 1], and the scores are
EG = 10*exp(-EM), PG = 10*(1 - PM).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

W0_DEFAULT = 6.0   # Morlet center frequency parameter
NF_DEFAULT = 32    # log-spaced CWT frequencies inside the analysis band


@dataclass
class BandSpec:
    low: tuple = (0.0, 1.0)
    mid: tuple = (1.0, 2.0)
    high: tuple = (2.0, 5.0)

    def validate(self, nyquist):
        for name in ("low", "mid", "high"):
            f_lo, f_hi = getattr(self, name)
            if not (0 <= f_lo < f_hi <= nyquist):
                raise DataError(
                    f"band {name}=[{f_lo},{f_hi}] outside [0, {nyquist}]")


METRIC_NAMES = ("rmae", "rrmse", "rfft_low", "rfft_mid", "rfft_high",
                "eg", "pg")


def _as2d(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


def _check_pair(pred, ref):
    if pred.shape != ref.shape:
        raise DataError(f"pred shape {pred.shape} != ref shape {ref.shape}")


def rmae(pred, ref):
    """mean |pred - ref| / mean |ref|, per component then averaged."""
    pred, ref = _as2d(pred), _as2d(ref)
    _check_pair(pred, ref)
    denom = np.abs(ref).mean(axis=-1)
    if np.any(denom == 0):
        raise DataError("undefined relative error: reference component is zero")
    return float((np.abs(pred - ref).mean(axis=-1) / denom).mean())


def rrmse(pred, ref):
    """||pred - ref||_2 / ||ref||_2, per component then averaged."""
    pred, ref = _as2d(pred), _as2d(ref)
    _check_pair(pred, ref)
    denom = np.sqrt((ref ** 2).sum(axis=-1))
    if np.any(denom == 0):
        raise DataError("undefined relative error: reference component is zero")
    return float((np.sqrt(((pred - ref) ** 2).sum(axis=-1)) / denom).mean())


def rfft_band(pred, ref, band, dt):
    """Signed bias of the mean Fourier amplitude within a frequency band."""
    pred, ref = _as2d(pred), _as2d(ref)
    _check_pair(pred, ref)
    n = pred.shape[-1]
    freqs = np.fft.rfftfreq(n, d=dt)
    f_lo, f_hi = band
    if f_hi > 0.5 / dt + 1e-12:
        raise DataError(f"band [{f_lo},{f_hi}] exceeds Nyquist {0.5 / dt}")
    mask = (freqs >= f_lo) & (freqs < f_hi)
    if not mask.any():
        raise DataError(f"band [{f_lo},{f_hi}] contains no frequency bins")
    ap = np.abs(np.fft.rfft(pred, axis=-1))[:, mask].mean(axis=-1)
    ar = np.abs(np.fft.rfft(ref, axis=-1))[:, mask].mean(axis=-1)
    if np.any(ar == 0):
        raise DataError("reference has zero spectral amplitude in band")
    return float(((ap - ar) / ar).mean())


def lowpass(x, f_max, dt):
    """Zero-phase spectral low-pass (brick wall at f_max)."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    spec = np.fft.rfft(x, axis=-1)
    freqs = np.fft.rfftfreq(n, d=dt)
    spec[..., freqs > f_max] = 0.0
    return np.fft.irfft(spec, n=n, axis=-1)


def cwt_morlet(x, dt, freqs, w0=W0_DEFAULT):
    """Continuous wavelet transform with an analytic Morlet wavelet.

    x: [..., n_t]; returns complex [..., n_f, n_t].
    """
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    omega = 2 * np.pi * np.fft.fftfreq(n, d=dt)
    spec = np.fft.fft(x, axis=-1)
    scales = w0 / (2 * np.pi * np.asarray(freqs))
    # frequency response of the scaled analytic Morlet, one row per scale
    psi = np.exp(-0.5 * (scales[:, None] * omega[None, :] - w0) ** 2)
    psi[:, omega < 0] = 0.0
    out = np.fft.ifft(spec[..., None, :] * psi, axis=-1)
    return out


def gof(pred, ref, dt, f_band, nf=NF_DEFAULT, w0=W0_DEFAULT):
    """Envelope and phase goodness-of-fit scores (EG, PG) in [0, 10].

    Signals are low-pass filtered at the top of f_band, transformed with a
    Morlet CWT on nf log-spaced frequencies inside f_band, and compared via
    energy-normalized envelope and energy-weighted phase misfits; metrics
    are computed per component and averaged arithmetically.
    """
    pred, ref = _as2d(pred), _as2d(ref)
    _check_pair(pred, ref)
    f_lo, f_hi = f_band
    if not (0 < f_lo < f_hi <= 0.5 / dt + 1e-12):
        raise DataError(f"invalid gof band [{f_lo}, {f_hi}]")
    p = lowpass(pred, f_hi, dt)
    r = lowpass(ref, f_hi, dt)
    freqs = np.geomspace(f_lo, f_hi, nf)
    wp = cwt_morlet(p, dt, freqs, w0)
    wr = cwt_morlet(r, dt, freqs, w0)
    egs, pgs = [], []
    for c in range(pred.shape[0]):
        ar, ap = np.abs(wr[c]), np.abs(wp[c])
        wref = ar ** 2
        denom = wref.sum()
        if denom == 0:
            raise DataError("reference has zero energy in the gof band")
        em = np.sqrt(((ap - ar) ** 2).sum() / denom)
        cross = wp[c] * np.conj(wr[c])
        phase = np.zeros_like(ar)
        nz = (ar > 0) & (ap > 0)
        phase[nz] = np.angle(cross[nz]) / np.pi
        pm = np.sqrt((wref * phase ** 2).sum() / denom)
        egs.append(10.0 * np.exp(-em))
        pgs.append(10.0 * (1.0 - pm))
    return float(np.mean(egs)), float(np.mean(pgs))


@dataclass
class GofReport:
    """Per-trace metric records plus mean/std aggregates."""

    model: str
    rows: list = field(default_factory=list)   # dicts with record/sensor + metrics
    meta: dict = field(default_factory=dict)

    def add(self, record_idx, sensor_idx, metrics: dict):
        for m in ("eg", "pg"):
            if not (0.0 <= metrics[m] <= 10.0):
                raise DataError(f"{m}={metrics[m]} outside [0, 10]")
        self.rows.append({"record": record_idx, "sensor": sensor_idx,
                          **metrics})

    def aggregates(self):
        out = {}
        for m in METRIC_NAMES:
            vals = np.array([r[m] for r in self.rows], dtype=np.float64)
            out[m] = {"mean": float(vals.mean()), "std": float(vals.std()),
                      "count": int(vals.size)}
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["record", "sensor", *METRIC_NAMES])
            for r in self.rows:
                w.writerow([r["record"], r["sensor"],
                            *[f"{r[m]:.9g}" for m in METRIC_NAMES]])

    def write_json(self, path):
        blob = {"model": self.model, "aggregates": self.aggregates(),
                "meta": self.meta}
        with open(path, "w") as f:
            json.dump(blob, f, indent=2, sort_keys=True)


def trace_metrics(pred, ref, dt, bands: BandSpec, f_band, nf=NF_DEFAULT,
                  w0=W0_DEFAULT) -> dict:
    eg, pg = gof(pred, ref, dt, f_band, nf, w0)
    return {
        "rmae": rmae(pred, ref),
        "rrmse": rrmse(pred, ref),
        "rfft_low": rfft_band(pred, ref, bands.low, dt),
        "rfft_mid": rfft_band(pred, ref, bands.mid, dt),
        "rfft_high": rfft_band(pred, ref, bands.high, dt),
        "eg": eg,
        "pg": pg,
    }


def evaluate(pred_sets, ref_sets, dt, bands: BandSpec, f_band, model="model",
             nf=NF_DEFAULT, w0=W0_DEFAULT, record_indices=None) -> GofReport:
    """Per-trace metrics over matching lists of TraceSet-like arrays.

    pred_sets/ref_sets: sequences of [n_sensors, n_comp, n_t] arrays.
    """
    if len(pred_sets) != len(ref_sets):
        raise DataError(f"{len(pred_sets)} prediction records vs "
                        f"{len(ref_sets)} references")
    report = GofReport(model=model)
    for j, (p, r) in enumerate(zip(pred_sets, ref_sets)):
        p = np.asarray(p.data if hasattr(p, "data") else p, dtype=np.float64)
        r = np.asarray(r.data if hasattr(r, "data") else r, dtype=np.float64)
        if p.shape != r.shape:
            raise DataError(f"record {j}: pred {p.shape} vs ref {r.shape}")
        rec_idx = record_indices[j] if record_indices else j
        for s in range(p.shape[0]):
            report.add(rec_idx, s,
                       trace_metrics(p[s], r[s], dt, bands, f_band, nf, w0))
    return report


def scatter_pairs(report_a: GofReport, report_b: GofReport, metric):
    """Paired per-trace values of one metric for two prediction sets."""
    if len(report_a.rows) != len(report_b.rows):
        raise DataError("scatter requires equally sized reports")
    return [(ra[metric], rb[metric])
            for ra, rb in zip(report_a.rows, report_b.rows)]


def write_scatter_csv(path, pairs, labels):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(labels)
        for a, b in pairs:
            w.writerow([f"{a:.9g}", f"{b:.9g}"])
