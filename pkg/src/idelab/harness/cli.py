"""Command-line entry point: ``idelab <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .. import data as data_mod
from ..bound import BoundInputs, bound_terms
from ..ide import ide_sweep
from ..metrics import dataset_metrics
from ..seeding import derive_seed
from .config import MNIST_DIR_ENV, PRESETS, ConfigError, ExperimentConfig, apply_overrides, load_config, preset
from .pipeline import (HIST_COLUMNS, histogram_edges, load_data, load_trajectory, run_experiment, stage_seeds, train_stage,
                       write_rows)

log = logging.getLogger("idelab")

MNIST_FILES = {"train_images": "train-images-idx3-ubyte", "train_labels": "train-labels-idx1-ubyte",
               "test_images": "t10k-images-idx3-ubyte", "test_labels": "t10k-labels-idx1-ubyte"}


def _add_config_args(p: argparse.ArgumentParser, seed_default=None):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--preset", choices=sorted(PRESETS), help="named configuration")
    g.add_argument("--config", type=Path, help="JSON experiment config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config entry, e.g. --set train.epochs=20 (repeatable)")
    p.add_argument("--seed", type=int, default=seed_default,
                   help="run only this seed (default: the config's seed list)")
    p.add_argument("--out", type=Path, help="output directory (default: $IDELAB_OUTPUT_ROOT/<name>)")


def _resolve(args) -> ExperimentConfig:
    if args.config is not None:
        cfg = load_config(args.config)
    else:
        cfg = preset(args.preset or "blobs-easy")
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seeds=[{args.seed}]")
    return apply_overrides(cfg, overrides).validate()


def _out(args, cfg: ExperimentConfig) -> Path:
    out = args.out if args.out is not None else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_run(args) -> int:
    cfg = _resolve(args)
    res = run_experiment(cfg, args.out, plots=not args.no_plots)
    corr = res.summary.get("correlations", {}).get("pooled", {})
    print(f"wrote {res.out_dir}/report.csv ({len(res.rows)} rows)")
    for k, v in corr.items():
        print(f"  corr({k.replace('~', ', ')}) = {'n/a' if v is None else f'{v:+.3f}'}")
    for f in res.failures:
        print(f"  FAILED seed={f['seed']} t={f['t']} stage={f['stage']}: {f['error']}", file=sys.stderr)
    return res.exit_code


def cmd_train_at(args) -> int:
    cfg = _resolve(args)
    out = _out(args, cfg)
    for seed in cfg.seeds:
        tr, _ = load_data(cfg, seed)
        ckdir = out / "checkpoints" / f"seed{seed}"
        traj = train_stage(cfg, seed, tr, ckdir)
        write_rows(out / f"history_seed{seed}.csv", ("epoch", "loss", "error"), traj.history)
        print(f"seed {seed}: {len(traj)} checkpoints in {ckdir}")
    return 0


def _trajectory_for(args, out: Path, seed: int):
    ckdir = args.checkpoints if args.checkpoints is not None else out / "checkpoints" / f"seed{seed}"
    return load_trajectory(ckdir)


def cmd_ide(args) -> int:
    cfg = _resolve(args)
    out = _out(args, cfg)
    code = 0
    for seed in cfg.seeds:
        tr, te = load_data(cfg, seed)
        s = stage_seeds(seed)
        results = ide_sweep(_trajectory_for(args, out, seed), tr, te, cfg.attack, cfg.ide_config(s["ide"]),
                            induce_seed=s["induce"])
        rows = [{"seed": seed, "t": r.t, "ide_train_err": r.ide_train_error, "ide_test_err": r.ide_test_error,
                 "epochs_run": r.epochs_run, "interpolated": int(r.interpolated), "error": r.error or ""}
                for r in results]
        write_rows(out / f"ide_seed{seed}.csv", list(rows[0]), rows)
        code |= any(r.failed for r in results)
        for r in rows:
            print(f"seed {seed} t={r['t']}: IDE train {r['ide_train_err']:.4f} test {r['ide_test_err']:.4f}")
    return int(code)


def cmd_metrics(args) -> int:
    cfg = _resolve(args)
    out = _out(args, cfg)
    atk = cfg.attack
    for seed in cfg.seeds:
        tr, te = load_data(cfg, seed)
        traj = _trajectory_for(args, out, seed)
        rows, hist_rows = [], []
        for split in cfg.metrics["splits"]:
            ds = {"train": tr, "test": te}[split]
            sub = ds.subset(range(min(int(cfg.metrics["n_examples"]), len(ds))))
            edges = histogram_edges(cfg, int(np.prod(sub.input_shape)))
            mc = cfg.mc_config(derive_seed(stage_seeds(seed)["metrics"], split))
            for ck in traj:
                m = dataset_metrics(sub, ck.params, atk, mc, t=ck.t, split=split, edges=edges)
                rows.append({"seed": seed, "t": ck.t, "split": split, "eld": m.eld, "eld_se": m.eld_se,
                             "mean_d": m.mean_d, "mean_phi": m.mean_phi, "failures": m.failures})
                for q, (counts, e) in m.histograms.items():
                    hist_rows += [{"seed": seed, "t": ck.t, "split": split, "quantity": q, "bin": i,
                                   "lo": float(e[i]), "hi": float(e[i + 1]), "count": int(c)}
                                  for i, c in enumerate(counts)]
                print(f"seed {seed} t={ck.t} {split}: ELD {m.eld:.5g} d {m.mean_d:.5g} phi {m.mean_phi:.5g}")
        write_rows(out / f"metrics_seed{seed}.csv", list(rows[0]), rows)
        write_rows(out / f"histograms_seed{seed}.csv", HIST_COLUMNS, hist_rows)
    return 0


def cmd_bound(args) -> int:
    inp = BoundInputs(args.beta, args.B, args.d, args.epsilon, args.m, args.eld, args.tau)
    a, b, c = bound_terms(inp)
    result = {"dispersion_term": a, "radius_term": b, "confidence_term": c, "bound": a + b + c}
    print(json.dumps(result, indent=2) if args.json else f"bound = {a + b + c:.6f}  "
          f"(dispersion {a:.6f} + radius {b:.6f} + confidence {c:.6f})")
    return 0


def cmd_plot(args) -> int:
    from .plotting import emit_plots

    hist = args.hist if args.hist is not None else args.report.parent / "histograms.csv"
    for p in emit_plots(args.report, hist, args.out, n_hist=args.n_hist):
        print(p)
    return 0


def cmd_data_gen(args) -> int:
    ds = data_mod.gen_blobs(args.d, args.classes, args.n_per_class, args.separation, args.spread, args.seed)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    data_mod.write_csv(ds, args.out)
    print(f"wrote {len(ds)} examples (d={args.d}, K={args.classes}) to {args.out}")
    return 0


def cmd_fetch_mnist(args) -> int:
    """Validate local IDX files and copy (decompressed, optionally truncated) into ``--out``."""
    src = args.src or Path(os.environ.get(MNIST_DIR_ENV, "data/mnist"))
    args.out.mkdir(parents=True, exist_ok=True)
    for split, (img, lab) in {"train": ("train_images", "train_labels"),
                              "test": ("test_images", "test_labels")}.items():
        paths = []
        for key in (img, lab):
            name = MNIST_FILES[key]
            cands = [src / name, src / (name + ".gz"), src / name.replace("-idx", ".idx")]
            found = next((c for c in cands if c.is_file()), None)
            if found is None:
                print(f"missing {name} in {src} (no network access is attempted)", file=sys.stderr)
                return 2
            paths.append(found)
        ds = data_mod.load_idx(*paths, limit=args.limit)
        pixels = np.round(ds.inputs[:, 0] * 255).astype(np.uint8)
        data_mod.write_idx(pixels, ds.labels, args.out / MNIST_FILES[img], args.out / MNIST_FILES[lab])
        print(f"{split}: {len(ds)} images {ds.input_shape[1:]} -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="idelab", description="Induced-distribution experiments at desk scale.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="full pipeline: PGD-AT, IDE, metrics, bound, reports, plots")
    _add_config_args(p)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("train-at", help="PGD adversarial training; saves checkpoints")
    _add_config_args(p)
    p.set_defaults(func=cmd_train_at)

    for name, func, text in (("ide", cmd_ide, "IDE sweep over saved checkpoints"),
                             ("metrics", cmd_metrics, "ELD / distance / angle over saved checkpoints")):
        p = sub.add_parser(name, help=text)
        _add_config_args(p)
        p.add_argument("--checkpoints", type=Path, help="checkpoint directory (default: <out>/checkpoints/seed<S>)")
        p.set_defaults(func=func)

    p = sub.add_parser("bound", help="evaluate the generalisation bound")
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--B", type=float, required=True)
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--eld", type=float, required=True)
    p.add_argument("--tau", type=float, default=0.05)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_bound)

    p = sub.add_parser("plot", help="render SVG figures from a report CSV")
    p.add_argument("report", type=Path)
    p.add_argument("--hist", type=Path, help="histogram CSV (default: histograms.csv beside the report)")
    p.add_argument("--out", type=Path)
    p.add_argument("--n-hist", type=int, default=3, help="checkpoints per histogram figure")
    p.set_defaults(func=cmd_plot)

    p = sub.add_parser("data", help="dataset utilities")
    dsub = p.add_subparsers(dest="data_command", required=True)
    g = dsub.add_parser("gen", help="write a synthetic blobs dataset as CSV")
    g.add_argument("--d", type=int, default=10)
    g.add_argument("--classes", type=int, default=2)
    g.add_argument("--n-per-class", type=int, default=100)
    g.add_argument("--separation", type=float, default=0.5)
    g.add_argument("--spread", type=float, default=0.1)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, required=True)
    g.set_defaults(func=cmd_data_gen)
    f = dsub.add_parser("fetch-mnist", help="validate and copy local MNIST IDX files (no download)")
    f.add_argument("--src", type=Path, help=f"directory with the IDX files (default: ${MNIST_DIR_ENV} or data/mnist)")
    f.add_argument("--out", type=Path, required=True)
    f.add_argument("--limit", type=int)
    f.set_defaults(func=cmd_fetch_mnist)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, data_mod.DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
