"""Release gate: eight acceptance criteria, one printed pass/fail line each.

The expensive criteria (operator learnability, enhancement trend) share one
generated dataset and one operator training run through session fixtures.
Each criterion asserts its own wall-clock budget.
"""

import hashlib
import json
import os
import time

import numpy as np
import pytest
from scipy.optimize import brentq

from quakesynth import autodiff as ad
from quakesynth import ddpm as ddpm_mod
from quakesynth.autodiff import Tensor
from quakesynth.cli import main as cli_main
from quakesynth.geogen import Dataset, GeoConfig, build_dataset
from quakesynth.metrics import BandSpec, trace_metrics
from quakesynth.mifno import (FfnoLayer, MifnoHyper, evaluate_loss,
                              train_mifno)
from quakesynth.waveprop import (GeologyModel, SimConfig, SourceSpec,
                                 first_arrival, simulate)

MASTER_SEED = 7
DATASET_N = 512
OPERATOR_HYPER = MifnoHyper(seed=11)
OPERATOR_STEPS = 2500


def report(capfd, n, name, checks, elapsed, budget):
    """Print one visible pass/fail line; checks is {label: bool}."""
    ok = all(checks.values()) and elapsed < budget
    failed = [k for k, v in checks.items() if not v]
    if elapsed >= budget:
        failed.append(f"over budget ({elapsed:.0f}s >= {budget:.0f}s)")
    detail = f"{elapsed:.1f}s" + (f"; failed: {', '.join(failed)}"
                                  if failed else "")
    with capfd.disabled():
        print(f"\n[criterion {n}] {name}: "
              f"{'PASS' if ok else 'FAIL'} ({detail})", flush=True)
    assert ok, f"criterion {n} failed: {detail}"


# -- shared expensive fixtures -------------------------------------------------

@pytest.fixture(scope="session")
def accept_dataset():
    t0 = time.perf_counter()
    ds = build_dataset(DATASET_N, GeoConfig(), SimConfig(), MASTER_SEED)
    return ds, time.perf_counter() - t0


@pytest.fixture(scope="session")
def accept_operator(accept_dataset):
    ds, t_gen = accept_dataset
    t0 = time.perf_counter()
    model, _, _ = train_mifno(ds.split("train"), OPERATOR_HYPER,
                              dt_out=ds.header["dt"],
                              steps_override=OPERATOR_STEPS)
    return model, t_gen + (time.perf_counter() - t0)


def _heldout_metrics(model, records, max_records=None):
    bands = BandSpec()
    rows = {k: [] for k in ("rmae", "rrmse", "rfft_mid", "rfft_high",
                            "eg", "pg")}
    for r in records[:max_records]:
        pred = model.predict(r.geology, r.source, r.traces.dt)
        for si in range(r.traces.n_sensors):
            mt = trace_metrics(pred.data[si], r.traces.data[si],
                               r.traces.dt, bands, (0.4, 5.0))
            for k in rows:
                rows[k].append(mt[k])
    return rows


# -- criterion 1: schedule fidelity --------------------------------------------

def test_criterion_1_schedule_fidelity(capfd):
    t0 = time.perf_counter()
    s = ddpm_mod.make_schedule(1000, 1e-4, 0.02)
    abar_T = s.alpha_bars[-1]
    log_sum = np.exp(-np.sum(s.betas))
    checks = {
        "abar_T in [3e-5, 6e-5]": 3e-5 <= abar_T <= 6e-5,
        "abar_T matches exp(-sum beta) within 15%":
            abs(abar_T - log_sum) / log_sum < 0.15,
    }
    rng = np.random.default_rng(0)
    mono = True
    for _ in range(100):
        b0 = float(rng.uniform(1e-5, 5e-3))
        b1 = float(rng.uniform(b0 * 2, 0.5))
        n = int(rng.integers(10, 2000))
        sch = ddpm_mod.make_schedule(n, b0, b1)
        mono &= bool(np.all(np.diff(sch.betas) > 0)
                     and np.all(np.diff(sch.alpha_bars) < 0)
                     and np.all(sch.alpha_bars > 0)
                     and np.all(sch.alpha_bars < 1))
    checks["100 random schedules monotone"] = mono
    report(capfd, 1, "schedule fidelity", checks,
           time.perf_counter() - t0, 1.0)


# -- criterion 2: diffusion algebra --------------------------------------------

def test_criterion_2_diffusion_algebra(capfd):
    t0 = time.perf_counter()
    s = ddpm_mod.make_schedule(200, 5e-4, 0.1)
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        v0 = rng.normal(size=(2, 256))
        eps = rng.normal(size=v0.shape)
        tau = int(rng.integers(1, s.n_steps + 1))
        v_tau = ddpm_mod.forward_diffuse(v0, tau, eps, s)
        abar = s.alpha_bars[tau - 1]
        rec = (v_tau - np.sqrt(1.0 - abar) * eps) / np.sqrt(abar)
        worst = max(worst, np.linalg.norm(rec - v0) / np.linalg.norm(v0))
    report(capfd, 2, "diffusion algebra",
           {f"corrupt-invert rel L2 {worst:.2e} < 1e-5": worst < 1e-5},
           time.perf_counter() - t0, 1.0)


# -- criterion 3: AD soundness ---------------------------------------------------

def _primitive_checks(rng):
    """(name, f, x) for every differentiable primitive, tiny float64 shapes."""
    n = rng.normal
    b = Tensor(n(size=(2, 3)) + 3.0)
    sq = lambda t: ad.tsum(ad.mul(t, t))
    idx = np.array([[0, 2], [1, 1]])
    w_cl, b_cl = Tensor(n(size=(4, 2))), Tensor(n(size=(4,)))
    w_c1 = Tensor(n(size=(2, 2, 3)))
    w_c2 = Tensor(n(size=(2, 2, 3, 3)))
    r_mix = ad.make_complex(Tensor(n(size=(2, 2, 3))),
                            Tensor(n(size=(2, 2, 3))))
    zi = Tensor(n(size=(2, 2, 4, 3)))
    yield "add", lambda t: ad.tsum(ad.add(t, b)), n(size=(2, 3))
    yield "mul", lambda t: ad.tsum(ad.mul(t, b)), n(size=(2, 3))
    yield "div", lambda t: ad.tsum(ad.div(t, b)), n(size=(2, 3))
    yield "sqrt", lambda t: ad.tsum(ad.sqrt(t)), np.abs(n(size=(6,))) + 1.0
    yield "exp", lambda t: ad.tsum(ad.exp(t)), n(size=(6,))
    yield "tanh", lambda t: ad.tsum(ad.tanh(t)), n(size=(6,))
    yield "relu", lambda t: ad.tsum(ad.relu(t)), n(size=(6,)) + 3.0
    yield "gelu", lambda t: ad.tsum(ad.gelu(t)), n(size=(6,))
    yield "tsum", lambda t: ad.tsum(ad.mul(ad.tsum(t, axis=1),
                                           ad.tsum(t, axis=1))), n(size=(2, 3))
    yield "tmean", lambda t: ad.tsum(ad.mul(ad.tmean(t, axis=0),
                                            ad.tmean(t, axis=0))), n(size=(2, 3))
    yield "reshape", lambda t: sq(ad.reshape(t, (3, 2))), n(size=(2, 3))
    yield "transpose", lambda t: sq(ad.transpose(t, (1, 0))), n(size=(2, 3))
    yield "tslice", lambda t: sq(t[:, 1:3]), n(size=(2, 4))
    yield "concat", lambda t: sq(ad.concat([t, t], axis=0)), n(size=(2, 3))
    yield "pad_axis", lambda t: sq(ad.pad_axis(t, 1, 1, 2)), n(size=(2, 3))
    yield "broadcast_to", lambda t: sq(ad.broadcast_to(t, (3, 2, 3))), \
        n(size=(2, 3))
    yield "repeat_interleave", \
        lambda t: sq(ad.repeat_interleave(t, 2, axis=1)), n(size=(2, 3))
    yield "gather_rows", lambda t: sq(ad.gather_rows(t, idx)), n(size=(2, 3))
    w_mm = Tensor(n(size=(3, 4)))
    yield "matmul", lambda t: sq(ad.matmul(t, w_mm)), n(size=(2, 3))
    yield "channel_linear", lambda t: sq(ad.channel_linear(t, w_cl, b_cl)), \
        n(size=(2, 2, 3, 2))
    yield "conv1d", lambda t: sq(ad.conv1d(t, w_c1, stride=2, padding=1)), \
        n(size=(1, 2, 6))
    yield "conv2d", lambda t: sq(ad.conv2d(t, w_c2, padding=1)), \
        n(size=(1, 2, 4, 4))
    yield "fft/ifft/creal", lambda t: sq(ad.creal(ad.ifft(ad.fft(
        ad.make_complex(t, Tensor(np.zeros(8))))))), n(size=(8,))
    yield "rfft/cimag", lambda t: sq(ad.cimag(ad.rfft(t, axis=1))), \
        n(size=(2, 8))
    yield "irfft/make_complex", lambda t: sq(ad.irfft(
        ad.make_complex(t, Tensor(np.zeros((2, 5)))), 8, axis=1)), \
        n(size=(2, 5))
    yield "cmul/conj", lambda t: ad.tsum(ad.creal(ad.cmul(
        ad.rfft(t, axis=0), ad.conj(ad.rfft(t, axis=0))))), n(size=(8,))
    yield "mode_mix", lambda t: sq(ad.creal(ad.mode_mix(
        ad.make_complex(t, zi), r_mix))) + sq(ad.cimag(ad.mode_mix(
            ad.make_complex(t, zi), r_mix))), n(size=(2, 2, 4, 3))


def test_criterion_3_ad_soundness(capfd):
    t0 = time.perf_counter()
    worst, worst_name = 0.0, ""
    for seed in range(20):
        rng = np.random.default_rng(1000 + seed)
        for name, f, x in _primitive_checks(rng):
            err = ad.check_gradient(f, x, eps=1e-6)
            if err > worst:
                worst, worst_name = err, f"{name}@seed{seed}"
        # two-layer factorized spectral block, input and parameter grads
        layers = [FfnoLayer(3, 2, 2, 4, 4, 4, rng, "float64")
                  for _ in range(2)]

        def block(t):
            z = t
            for lay in layers:
                z = lay.forward(z)
            return ad.tsum(ad.mul(z, z))

        x = rng.normal(size=(1, 3, 4, 4))
        err = ad.check_gradient(block, x, eps=1e-6)
        if err > worst:
            worst, worst_name = err, f"ffno-input@seed{seed}"
        # parameter gradient via manual central differences
        for i, lay in enumerate(layers):
            for p2 in lay.params(f"l{i}").values():
                p2.grad = None
        leaf = Tensor(x, requires_grad=True)
        loss = block(leaf)
        loss.backward()
        p = layers[0].params("l0")["l0.w1"]
        g = p.grad.copy()
        flat_idx = rng.integers(0, p.data.size, size=3)
        for fi in flat_idx:
            orig = p.data.ravel()[fi]
            eps_p = 1e-6
            p.data.ravel()[fi] = orig + eps_p
            fp = block(Tensor(x)).item()
            p.data.ravel()[fi] = orig - eps_p
            fm = block(Tensor(x)).item()
            p.data.ravel()[fi] = orig
            fd = (fp - fm) / (2 * eps_p)
            err = abs(g.ravel()[fi] - fd) / (abs(fd) + 1e-12)
            if err > worst:
                worst, worst_name = err, f"ffno-param@seed{seed}"
    report(capfd, 3, "AD soundness",
           {f"max rel grad error {worst:.2e} ({worst_name}) < 1e-3":
            worst < 1e-3},
           time.perf_counter() - t0, 120.0)


# -- criterion 4: solver physics -------------------------------------------------

def _onset_lead(f0, q=0.01):
    u_star = brentq(lambda u: (2 * u - 1) * np.exp(-u) - q, 1.5, 60.0)
    return np.sqrt(u_star) / (np.pi * f0)


def test_criterion_4_solver_physics(capfd):
    t0 = time.perf_counter()
    VS, VP, RHO, DX = 1500.0, 2600.0, 2500.0, 40.0
    geo = GeologyModel.homogeneous(32, 32, DX, VS, VP, RHO)
    src = SourceSpec(x_s=16 * DX, z_s=24 * DX, theta_s=np.pi / 4,
                     m0=1e9, f0=2.0, t0=0.6)
    checks = {}
    # first arrivals at 8 offsets within +-2 grid cells
    ts = simulate(geo, src, SimConfig())
    lead = _onset_lead(src.f0)
    tol = 2 * DX / VP
    ok = True
    for i in range(8, 24, 2):
        r = np.hypot(i * DX - src.x_s, src.z_s)
        t_pick = first_arrival(ts.data[i], ts.dt)
        ok &= abs(t_pick - (src.t0 + r / VP - lead)) <= tol
    checks["first arrivals at 8 offsets within 2 cells"] = ok
    # zero source -> identically zero traces
    src0 = SourceSpec(x_s=src.x_s, z_s=src.z_s, theta_s=src.theta_s,
                      m0=0.0, f0=src.f0, t0=src.t0)
    checks["zero source gives zero traces"] = bool(
        np.all(simulate(geo, src0, SimConfig()).data == 0.0))
    # energy non-increasing once the source is quiet
    _, energy, t_end, dt = simulate(geo, src, SimConfig(record_energy=True))
    start = int(np.ceil(t_end / dt)) + 2
    checks["post-source energy non-increasing"] = bool(
        (np.diff(energy[start:]) / energy[start]).max() <= 1e-10)
    # self-convergence under 2x refinement
    geo_f = GeologyModel.homogeneous(64, 64, DX / 2, VS, VP, RHO)
    src_c = SourceSpec(x_s=16 * DX, z_s=18 * DX, theta_s=np.pi / 4,
                       m0=1e9, f0=2.0, t0=0.6)
    coarse = simulate(geo, src_c, SimConfig(n_t=200)).data.astype(np.float64)
    fine = simulate(geo_f, src_c, SimConfig(n_t=200, sponge_width=60,
                                            sponge_coeff=0.0025)
                    ).data[::2].astype(np.float64)
    rms = np.sqrt(((coarse - fine) ** 2).sum()) / np.sqrt((fine ** 2).sum())
    checks[f"self-convergence RMS {rms:.3f} < 5%"] = rms < 0.05
    report(capfd, 4, "solver physics", checks,
           time.perf_counter() - t0, 300.0)


# -- criterion 5: metric correctness ---------------------------------------------

def test_criterion_5_metric_correctness(capfd):
    t0 = time.perf_counter()
    dt, n = 0.01, 256
    t = np.arange(n) * dt
    rng = np.random.default_rng(2)
    # broadband reference with energy in every band
    ref = np.zeros((2, n))
    for f in (0.5, 1.5, 2.5, 3.5):
        ref += np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi,
                                                      size=(2, 1)))
    ref *= np.exp(-((t - 1.2) / 0.8) ** 2)
    bands = BandSpec()
    checks = {}
    m = trace_metrics(ref, ref, dt, bands, (0.4, 5.0))
    checks["pred=ref -> zeros and 10s"] = (
        m["rmae"] == 0.0 and m["rrmse"] == 0.0
        and m["rfft_low"] == 0.0 and m["rfft_mid"] == 0.0
        and m["rfft_high"] == 0.0
        and abs(m["eg"] - 10.0) < 1e-9 and abs(m["pg"] - 10.0) < 1e-9)
    m = trace_metrics(2.0 * ref, ref, dt, bands, (0.4, 5.0))
    checks["pred=2ref -> rFFT=+1, PG=10, EG=10/e"] = (
        abs(m["rfft_low"] - 1.0) < 1e-9
        and abs(m["rfft_mid"] - 1.0) < 1e-9
        and abs(m["rfft_high"] - 1.0) < 1e-9
        and abs(m["pg"] - 10.0) < 1e-3
        and abs(m["eg"] - 10.0 / np.e) < 1e-3)
    m = trace_metrics(-ref, ref, dt, bands, (0.4, 5.0))
    checks["pred=-ref -> PG=0"] = abs(m["pg"]) < 1e-3
    report(capfd, 5, "metric correctness", checks,
           time.perf_counter() - t0, 30.0)


# -- criterion 6: operator learnability ----------------------------------------

def test_criterion_6_operator_learnability(capfd, accept_dataset,
                                           accept_operator):
    ds, _ = accept_dataset
    model, t_shared = accept_operator
    t0 = time.perf_counter()
    checks = {}
    # single-record overfit within 2000 steps
    rec = ds.split("train")[0]
    over_hyper = MifnoHyper(batch=1, seed=11)
    over, _, _ = train_mifno([rec], over_hyper, dt_out=ds.header["dt"],
                             steps_override=2000)
    fit = evaluate_loss(over, [rec])
    checks[f"single-record overfit {fit:.3f} < 0.05 (2000 steps)"] = fit < 0.05
    # held-out generalization beats the zero predictor
    rows = _heldout_metrics(model, ds.split("test"))
    rrmse = float(np.mean(rows["rrmse"]))
    med_eg = float(np.median(rows["eg"]))
    checks[f"held-out rRMSE {rrmse:.3f} < 1.0"] = rrmse < 1.0
    checks[f"held-out median EG {med_eg:.2f} > 5"] = med_eg > 5.0
    elapsed = t_shared + (time.perf_counter() - t0)
    report(capfd, 6, "operator learnability", checks, elapsed, 2700.0)


# -- criterion 7: enhancement trend ----------------------------------------------

def test_criterion_7_enhancement_trend(capfd, accept_dataset,
                                       accept_operator):
    ds, _ = accept_dataset
    model, t_shared = accept_operator
    t0 = time.perf_counter()
    train, test = ds.split("train"), ds.split("test")
    dt = ds.header["dt"]
    # (operator prediction, reference) pairs over the train split
    conds, refs = [], []
    for rec in train:
        pred = model.predict(rec.geology, rec.source, dt)
        conds.append(pred.data)
        refs.append(rec.traces.data)
    cond_arr = np.concatenate(conds, axis=0)
    ref_arr = np.concatenate(refs, axis=0)
    net, schedule, _ = ddpm_mod.train_ddpm(cond_arr, ref_arr, ddpm_mod.DdpmHyper())
    # enhance a fixed held-out subset and compare aggregates
    subset = test[:12]
    bands = BandSpec()
    agg = {"mifno": {k: [] for k in ("rfft_mid", "rfft_high", "pg")},
           "ddpm": {k: [] for k in ("rfft_mid", "rfft_high", "pg")}}
    for rec in subset:
        pred = model.predict(rec.geology, rec.source, dt)
        enh = ddpm_mod.enhance_traceset(net, schedule, pred, MASTER_SEED,
                                        rec.index)
        for tag, ts in (("mifno", pred), ("ddpm", enh)):
            for si in range(rec.traces.n_sensors):
                m = trace_metrics(ts.data[si], rec.traces.data[si], dt,
                                  bands, (0.4, 5.0))
                for k in agg[tag]:
                    agg[tag][k].append(m[k])
    mid_a = abs(np.mean(agg["mifno"]["rfft_mid"]))
    mid_b = abs(np.mean(agg["ddpm"]["rfft_mid"]))
    high_a = abs(np.mean(agg["mifno"]["rfft_high"]))
    high_b = abs(np.mean(agg["ddpm"]["rfft_high"]))
    pg_a = float(np.mean(agg["mifno"]["pg"]))
    pg_b = float(np.mean(agg["ddpm"]["pg"]))
    checks = {
        f"|rfft_mid| decreases ({mid_a:.3f} -> {mid_b:.3f})": mid_b < mid_a,
        f"|rfft_high| decreases ({high_a:.3f} -> {high_b:.3f})":
            high_b < high_a,
        f"mean PG drop <= 0.2 ({pg_a:.2f} -> {pg_b:.2f})":
            pg_b >= pg_a - 0.2,
    }
    elapsed = t_shared + (time.perf_counter() - t0)
    report(capfd, 7, "enhancement trend", checks, elapsed, 5400.0)


# -- criterion 8: determinism and format -----------------------------------------

TOY_CONFIG = {
    "seed": 17,
    "geology": {"nx": 16, "nz": 16},
    "simulation": {"n_t": 64, "sponge_width": 4, "sponge_coeff": 0.02},
    "dataset": {"n": 6, "test_every": 3, "k_sensors": 4},
    "mifno": {"width": 8, "geo_layers": 2, "fused_layers": 2, "modes_x": 4,
              "modes_t": 4, "ff_hidden": 16, "source_hidden": 16,
              "epochs": 2, "batch": 2, "lr": 1e-3, "restarts": 1},
    "ddpm": {"n_steps": 8, "widths": [8, 12, 16], "kernel": 3,
             "temb_dim": 8, "temb_hidden": 16, "train_steps": 20,
             "batch": 4, "restarts": 1},
}


def _sha(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()


def test_criterion_8_determinism_and_format(capfd, tmp_path):
    t0 = time.perf_counter()
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps(TOY_CONFIG))
    checks = {}
    hashes = {"qsds": [], "qsck": [], "csv": [], "table": []}
    for run in ("a", "b"):
        d = tmp_path / run
        os.makedirs(d)
        data = str(d / "data.qsds")
        fno = str(d / "fno.qsck")
        rep = str(d / "rep")
        assert cli_main(["generate", str(cfg), "--out", data]) == 0
        assert cli_main(["train-fno", str(cfg), data, "--out", fno]) == 0
        inf = str(d / "inf")
        assert cli_main(["infer", str(cfg), "--fno-ckpt", fno,
                         "--dataset", data, "--out", inf]) == 0
        assert cli_main(["evaluate", str(cfg), "--dataset", data,
                         "--pred", os.path.join(inf, "mifno.qsds"),
                         "--out", rep]) == 0
        hashes["qsds"].append(_sha(data))
        hashes["qsck"].append(_sha(fno))
        hashes["csv"].append(_sha(fno + ".loss.csv"))
        hashes["table"].append(_sha(os.path.join(rep, "table.csv")))
    for kind, (ha, hb) in hashes.items():
        checks[f"rerun {kind} byte-identical"] = ha == hb
    # dataset round-trip is bit-exact
    src_path = str(tmp_path / "a" / "data.qsds")
    rt_path = str(tmp_path / "roundtrip.qsds")
    Dataset.read(src_path).write(rt_path)
    checks["dataset round-trip bit-exact"] = _sha(src_path) == _sha(rt_path)
    report(capfd, 8, "determinism & format", checks,
           time.perf_counter() - t0, 120.0)
