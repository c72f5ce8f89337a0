"""Command-line pipeline orchestration.

Subcommands: generate, train-fno, train-ddpm, infer, evaluate, verify.
Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import os

# Cap math threads before numpy spins up its thread pools. QS_THREADS
# controls the cap; the default of 1 keeps results bit-reproducible.
_threads = os.environ.get("QS_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
             "NUMEXPR_NUM_THREADS"):
    os.environ.setdefault(_var, _threads)

import argparse
import json
import sys
import time

import numpy as np

from . import config as config_mod
from . import ddpm as ddpm_mod
from . import geogen, metrics, mifno
from .checkpoint import checkpoint_hash, load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, NumericError, QuakesynthError
from .seeding import derive_seed, make_rng


def _log(msg):
    print(msg, flush=True)


def _load_config(path, seed_override=None):
    cfg = config_mod.load(path)
    if seed_override is not None:
        cfg.seed = seed_override
    return cfg


def _write_loss_csv(path, rows, header):
    with open(path, "w") as f:
        f.write(",".join(header) + "\n")
        for row in rows:
            f.write(",".join(f"{v:.8g}" if isinstance(v, float) else str(v)
                             for v in row) + "\n")


# -- subcommands -----------------------------------------------------------------

def cmd_generate(args):
    cfg = _load_config(args.config, args.seed)
    n = args.n if args.n is not None else cfg.dataset.n
    t0 = time.perf_counter()
    ds = geogen.build_dataset(n, cfg.geology, cfg.simulation, cfg.seed,
                              out_path=args.out,
                              test_every=cfg.dataset.test_every, log=_log)
    _log(f"wrote {len(ds)} records "
         f"({len(ds.split('train'))} train / {len(ds.split('test'))} test) "
         f"to {args.out} in {time.perf_counter() - t0:.2f} s")
    return 0


def _mifno_from_checkpoint(path, cfg):
    state = load_checkpoint(path)
    model = mifno.Mifno(cfg.geology.nx, cfg.geology.nz, cfg.simulation.n_t,
                        n_comp=2, hyper=cfg.mifno,
                        vs_range=(cfg.geology.vs_min, cfg.geology.vs_max))
    model.load_state(state)
    return model


def cmd_train_fno(args):
    cfg = _load_config(args.config, args.seed)
    ds = geogen.Dataset.read(args.dataset)
    train, test = ds.split("train"), ds.split("test")
    if not train:
        raise DataError("dataset has no train records")
    t0 = time.perf_counter()
    model, tc, vc = mifno.train_mifno(train, cfg.mifno, ds.header["dt"],
                                      log=_log, val_records=test or None)
    _log(f"trained MIFNO in {time.perf_counter() - t0:.2f} s")
    save_checkpoint(args.out, model.state())
    _log(f"checkpoint: {args.out} (sha256 {checkpoint_hash(args.out)[:16]})")
    loss_path = args.out + ".loss.csv"
    if vc:
        rows = [(i + 1, t, v) for i, (t, v) in enumerate(zip(tc, vc))]
        _write_loss_csv(loss_path, rows, ["epoch", "train_loss", "val_loss"])
    else:
        rows = [(i + 1, t) for i, t in enumerate(tc)]
        _write_loss_csv(loss_path, rows, ["epoch", "train_loss"])
    _log(f"loss curve: {loss_path}")
    return 0


def cmd_train_ddpm(args):
    cfg = _load_config(args.config, args.seed)
    ds = geogen.Dataset.read(args.dataset)
    train = ds.split("train")
    if not train:
        raise DataError("dataset has no train records")
    fno_hash_before = checkpoint_hash(args.fno_ckpt)
    model = _mifno_from_checkpoint(args.fno_ckpt, cfg)
    # pair construction: frozen operator predictions as the condition,
    # simulated traces as the reference, k sensors drawn per record
    conds, refs = [], []
    t0 = time.perf_counter()
    for rec in train:
        pred = model.predict(rec.geology, rec.source, ds.header["dt"])
        rng = make_rng(cfg.seed, "ddpm-sensors", rec.index)
        sel = geogen.select_sensors(rec.traces, cfg.dataset.k_sensors, rng)
        idx = mifno.sensor_indices(sel.sensor_x, rec.geology.dx, rec.geology.nx)
        conds.append(pred.data[idx])
        refs.append(sel.data)
    cond_arr = np.concatenate(conds, axis=0)
    ref_arr = np.concatenate(refs, axis=0)
    _log(f"built {len(cond_arr)} training pairs in "
         f"{time.perf_counter() - t0:.2f} s")
    t0 = time.perf_counter()
    net, schedule, curve = ddpm_mod.train_ddpm(cond_arr, ref_arr, cfg.ddpm,
                                               log=_log)
    _log(f"trained DDPM in {time.perf_counter() - t0:.2f} s")
    state = net.state()
    state["schedule.betas"] = schedule.betas
    state["mifno_sha256"] = np.frombuffer(
        bytes.fromhex(fno_hash_before), dtype=np.uint8).astype(np.float32)
    save_checkpoint(args.out, state)
    frozen = checkpoint_hash(args.fno_ckpt) == fno_hash_before
    _log(f"MIFNO frozen: {'true' if frozen else 'false'}")
    steps_per_epoch = max(1, len(cond_arr) // cfg.ddpm.batch)
    rows = []
    for i in range(0, len(curve), steps_per_epoch):
        rows.append((len(rows) + 1, float(np.mean(curve[i:i + steps_per_epoch]))))
    loss_path = args.out + ".loss.csv"
    _write_loss_csv(loss_path, rows, ["epoch", "train_loss"])
    _log(f"checkpoint: {args.out}; loss curve: {loss_path}")
    return 0


def _ddpm_from_checkpoint(path, cfg, n_t):
    state = load_checkpoint(path)
    betas = state.pop("schedule.betas")
    state.pop("mifno_sha256", None)
    schedule = ddpm_mod.NoiseSchedule(
        betas=betas.astype(np.float64),
        alphas=1.0 - betas.astype(np.float64),
        alpha_bars=np.cumprod(1.0 - betas.astype(np.float64)))
    net = ddpm_mod.UNet1d(n_t, cfg.ddpm)
    net.load_state(state)
    return net, schedule


def _parse_indices(spec, ds):
    if spec == "test":
        return [r.index for r in ds.split("test")]
    if spec == "all":
        return [r.index for r in ds.records]
    try:
        return [int(s) for s in spec.split(",") if s]
    except ValueError:
        raise ConfigError(f"bad --indices value '{spec}'")


def cmd_infer(args):
    cfg = _load_config(args.config, args.seed)
    ds = geogen.Dataset.read(args.dataset)
    model = _mifno_from_checkpoint(args.fno_ckpt, cfg)
    indices = _parse_indices(args.indices, ds)
    by_index = {r.index: r for r in ds.records}
    missing = [i for i in indices if i not in by_index]
    if missing:
        raise DataError(f"records {missing} not present in {args.dataset}")
    os.makedirs(args.out, exist_ok=True)
    t0 = time.perf_counter()
    preds = [model.predict(by_index[i].geology, by_index[i].source,
                           ds.header["dt"]) for i in indices]
    t_fno = time.perf_counter() - t0
    _log(f"stage mifno: {t_fno:.2f} s ({len(indices)} records)")
    header = dict(ds.header)
    header["record_indices"] = indices
    out_fno = os.path.join(args.out, "mifno.qsds")
    geogen.traces_only_dataset(header, preds, "mifno").write(out_fno)
    _log(f"wrote {out_fno}")
    if args.ddpm_ckpt:
        net, schedule = _ddpm_from_checkpoint(args.ddpm_ckpt, cfg,
                                              ds.header["n_t"])
        t0 = time.perf_counter()
        enhanced = [ddpm_mod.enhance_traceset(net, schedule, p, cfg.seed, i)
                    for p, i in zip(preds, indices)]
        t_ddpm = time.perf_counter() - t0
        _log(f"stage ddpm: {t_ddpm:.2f} s ({len(indices)} records)")
        out_ddpm = os.path.join(args.out, "mifno_ddpm.qsds")
        geogen.traces_only_dataset(header, enhanced,
                                   "mifno+ddpm").write(out_ddpm)
        _log(f"wrote {out_ddpm}")
    return 0


def cmd_evaluate(args):
    cfg = _load_config(args.config, args.seed)
    ds = geogen.Dataset.read(args.dataset)
    by_index = {r.index: r for r in ds.records}
    bands = metrics.BandSpec(**{k: tuple(v)
                                for k, v in cfg.metrics.bands.items()})
    f_band = tuple(cfg.metrics.f_band)
    os.makedirs(args.out, exist_ok=True)
    reports = []
    for pred_path in args.pred:
        tds = geogen.TraceDataset.read(pred_path)
        indices = tds.header["record_indices"]
        missing = [i for i in indices if i not in by_index]
        if missing:
            raise DataError(f"prediction {pred_path} references records "
                            f"{missing} absent from the dataset")
        if len(indices) != len(tds.trace_sets):
            raise DataError(f"{pred_path}: {len(indices)} indices vs "
                            f"{len(tds.trace_sets)} trace sets")
        sensor_x = np.asarray(tds.header["sensor_x"], dtype=np.float64)
        idx = mifno.sensor_indices(sensor_x, ds.header["dx"], ds.header["nx"])
        preds = [ts.data for ts in tds.trace_sets]
        refs = [by_index[i].traces.data[idx] for i in indices]
        report = metrics.evaluate(preds, refs, ds.header["dt"], bands, f_band,
                                  model=tds.header.get("model", pred_path),
                                  nf=cfg.metrics.n_freqs, w0=cfg.metrics.w0,
                                  record_indices=indices)
        reports.append(report)
    _emit_reports(reports, args.out)
    return 0


def _emit_reports(reports, out_dir):
    names = metrics.METRIC_NAMES
    aggs = [r.aggregates() for r in reports]
    # lower is better for error metrics, higher for GOF scores
    higher_better = {"eg", "pg"}
    best = {}
    for m in names:
        vals = [abs(a[m]["mean"]) if m.startswith("rfft") else a[m]["mean"]
                for a in aggs]
        best[m] = (int(np.argmax(vals)) if m in higher_better
                   else int(np.argmin(vals)))
    table_path = os.path.join(out_dir, "table.csv")
    with open(table_path, "w") as f:
        cols = ",".join(f"{r.model},best_{r.model}" for r in reports)
        f.write(f"metric,{cols}\n")
        for m in names:
            cells = []
            for j, a in enumerate(aggs):
                cells.append(f"{a[m]['mean']:.4f} ± {a[m]['std']:.4f}")
                cells.append("*" if best[m] == j else "")
            f.write(",".join([m] + cells) + "\n")
    lines = [f"{'metric':<10}" + "".join(f"{r.model:>24}" for r in reports)]
    for m in names:
        row = f"{m:<10}"
        for j, a in enumerate(aggs):
            cell = f"{a[m]['mean']:.3f} ± {a[m]['std']:.3f}"
            if best[m] == j:
                cell += " *"
            row += f"{cell:>24}"
        lines.append(row)
    _log("\n".join(lines))
    for report in reports:
        tag = report.model.replace("+", "_")
        report.write_csv(os.path.join(out_dir, f"per_trace_{tag}.csv"))
        report.write_json(os.path.join(out_dir, f"aggregate_{tag}.json"))
        # per-trace EG vs PG scatter for this prediction set
        metrics.write_scatter_csv(
            os.path.join(out_dir, f"scatter_eg_pg_{tag}.csv"),
            [(r["eg"], r["pg"]) for r in report.rows], ["eg", "pg"])
    # pairwise per-trace comparisons between prediction sets
    base = reports[0]
    for other in reports[1:]:
        ta = base.model.replace("+", "_")
        tb = other.model.replace("+", "_")
        for m in ("eg", "pg"):
            metrics.write_scatter_csv(
                os.path.join(out_dir, f"scatter_{m}_{ta}_vs_{tb}.csv"),
                metrics.scatter_pairs(base, other, m),
                [f"{m}_{ta}", f"{m}_{tb}"])
    _log(f"reports written to {out_dir}")


def cmd_verify(args):
    path = args.path
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == b"QSDS":
        ds = geogen.Dataset.read(path) if _is_dataset(path) \
            else geogen.TraceDataset.read(path)
        kind = ds.header.get("format", "?")
        _log(f"{path}: valid {kind} container, "
             f"{ds.header['n_records']} records, "
             f"n_t={ds.header['n_t']}, dt={ds.header['dt']}")
    elif magic == b"QSCK":
        state = load_checkpoint(path)
        n = sum(int(np.prod(a.shape)) for a in state.values())
        _log(f"{path}: valid checkpoint, {len(state)} arrays, "
             f"{n} values, sha256 {checkpoint_hash(path)[:16]}")
    else:
        raise DataError(f"{path}: unknown magic {magic!r}")
    return 0


def _is_dataset(path):
    import struct
    with open(path, "rb") as f:
        blob = f.read(64 * 1024)
    (hlen,) = struct.unpack_from("<Q", blob, 8)
    header = json.loads(blob[16:16 + hlen].decode("utf-8"))
    return header.get("format") == "quakesynth-dataset"


# -- entry point -----------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(
        prog="quakesynth",
        description="Synthetic seismogram pipeline: reference FD simulation, "
                    "neural-operator surrogate, diffusion enhancement.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a random dataset")
    g.add_argument("config", help="pipeline config JSON")
    g.add_argument("--n", type=int, default=None,
                   help="number of records (default: dataset.n from config)")
    g.add_argument("--out", required=True, help="output dataset path")
    g.add_argument("--seed", type=int, default=None,
                   help="override the config master seed")
    g.set_defaults(func=cmd_generate)

    tf = sub.add_parser("train-fno", help="train the neural operator")
    tf.add_argument("config")
    tf.add_argument("dataset", help="QSDS dataset path")
    tf.add_argument("--out", required=True, help="output checkpoint path")
    tf.add_argument("--seed", type=int, default=None)
    tf.set_defaults(func=cmd_train_fno)

    td = sub.add_parser("train-ddpm",
                        help="train the diffusion model on frozen-operator "
                             "prediction/reference pairs")
    td.add_argument("config")
    td.add_argument("dataset")
    td.add_argument("fno_ckpt", help="frozen MIFNO checkpoint")
    td.add_argument("--out", required=True)
    td.add_argument("--seed", type=int, default=None)
    td.set_defaults(func=cmd_train_ddpm)

    inf = sub.add_parser("infer", help="predict traces for dataset records")
    inf.add_argument("config")
    inf.add_argument("--fno-ckpt", required=True)
    inf.add_argument("--ddpm-ckpt", default=None,
                     help="optional; adds the enhancement stage")
    inf.add_argument("--dataset", required=True,
                     help="QSDS dataset supplying geology+source inputs")
    inf.add_argument("--indices", default="test",
                     help="'test', 'all', or comma-separated record indices")
    inf.add_argument("--out", required=True, help="output directory")
    inf.add_argument("--seed", type=int, default=None)
    inf.set_defaults(func=cmd_infer)

    ev = sub.add_parser("evaluate", help="score prediction sets against the "
                                         "reference dataset")
    ev.add_argument("config")
    ev.add_argument("--dataset", required=True, help="reference QSDS dataset")
    ev.add_argument("--pred", nargs="+", required=True,
                    help="one or more prediction trace containers")
    ev.add_argument("--out", required=True, help="report directory")
    ev.add_argument("--seed", type=int, default=None)
    ev.set_defaults(func=cmd_evaluate)

    v = sub.add_parser("verify", help="validate a QSDS/QSCK file")
    v.add_argument("path")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except QuakesynthError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
