"""End-to-end driver: PGD-AT -> errors/gap -> IDE sweep -> metrics -> bound -> reports.

Every stage draws from its own substream of the per-run seed, so reordering or
skipping a stage never shifts another stage's random numbers.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import data as data_mod
from ..bound import BoundInputs, bound_terms, empirical_gg, estimate_beta_B
from ..data import LabeledDataset
from ..ide import IDEResult, ide_sweep
from ..metrics import MetricsReport, dataset_metrics, default_edges
from ..models import per_example_loss
from ..seeding import derive_seed
from ..training import Trajectory, eval_errors, pgd_at_train
from .checkpoint_io import load_checkpoint, save_checkpoint
from .config import ExperimentConfig

log = logging.getLogger(__name__)

REPORT_COLUMNS = ("seed", "t", "std_train_err", "std_test_err", "rob_train_err", "rob_test_err", "gap",
                  "ide_train_err", "ide_test_err", "eld", "eld_se", "mean_d", "mean_phi", "bound_value")
HIST_COLUMNS = ("seed", "t", "split", "quantity", "bin", "lo", "hi", "count")
BOUND_COLUMNS = ("seed", "t", "beta_hat", "B_hat", "dispersion_term", "radius_term", "confidence_term",
                 "bound_value", "gg", "holds")
SCHEMA_VERSION = 1

NAN = float("nan")


# -- data & seeds -----------------------------------------------------------

def load_data(cfg: ExperimentConfig, seed: int) -> tuple[LabeledDataset, LabeledDataset]:
    ds = cfg.dataset
    n_train, n_test = int(ds["n_train"]), int(ds["n_test"])
    data_seed = derive_seed(seed, "data")
    if ds["kind"] == "blobs":
        K = int(ds["num_classes"])
        per_class = -(-(n_train + n_test) // K)
        full = data_mod.gen_blobs(int(ds["d"]), K, per_class, float(ds["separation"]), float(ds["spread"]),
                                  seed=data_seed)
        return full.subset(range(n_train), "blobs-train"), full.subset(range(n_train, n_train + n_test), "blobs-test")
    rng = np.random.default_rng(data_seed)
    tr = data_mod.load_idx(ds["train_images"], ds["train_labels"], name="idx-train")
    te = data_mod.load_idx(ds["test_images"], ds["test_labels"], name="idx-test")
    tr = tr.subset(np.sort(rng.choice(len(tr), size=min(n_train, len(tr)), replace=False)), "idx-train")
    te = te.subset(np.sort(rng.choice(len(te), size=min(n_test, len(te)), replace=False)), "idx-test")
    return tr, te


def stage_seeds(seed: int) -> dict[str, int]:
    """The disjoint substreams used by one run."""
    return {"pgd-at": derive_seed(seed, "pgd-at"), "ide": derive_seed(seed, "ide"),
            "induce": derive_seed(seed, "induce"), "metrics": derive_seed(seed, "metrics"),
            "bound": derive_seed(seed, "bound"), "eval": derive_seed(seed, "eval")}


# -- stages -----------------------------------------------------------------

def train_stage(cfg: ExperimentConfig, seed: int, tr: LabeledDataset, ckpt_dir: Path | None = None) -> Trajectory:
    spec = cfg.model_spec(tr.input_shape, tr.num_classes)
    tcfg = cfg.train_config(stage_seeds(seed)["pgd-at"])

    def persist(ck):
        if ckpt_dir is not None:
            save_checkpoint(ckpt_dir / f"t{ck.t:04d}.ckpt", ck)

    log.info("seed %d: PGD-AT for %d epochs (%s)", seed, tcfg.epochs, spec.kind)
    return pgd_at_train(spec, tr, tcfg, cfg.attack, on_checkpoint=persist)


def load_trajectory(ckpt_dir) -> Trajectory:
    paths = sorted(Path(ckpt_dir).glob("t*.ckpt"))
    if not paths:
        raise FileNotFoundError(f"no checkpoints in {ckpt_dir}")
    return Trajectory(sorted((load_checkpoint(p) for p in paths), key=lambda c: c.t), [])


def error_stage(traj: Trajectory, tr, te, cfg: ExperimentConfig, seed: int) -> dict[int, dict]:
    atk = cfg.attack
    root = stage_seeds(seed)["eval"]
    out = {}
    for ck in traj:
        a = eval_errors(ck.params, tr, atk, np.random.default_rng(derive_seed(root, "train", ck.t)))
        b = eval_errors(ck.params, te, atk, np.random.default_rng(derive_seed(root, "test", ck.t)))
        out[ck.t] = {"std_train_err": a.standard_error, "std_test_err": b.standard_error,
                     "rob_train_err": a.robust_error, "rob_test_err": b.robust_error,
                     "gap": abs(b.robust_error - a.robust_error)}
    return out


def ide_stage(traj: Trajectory, tr, te, cfg: ExperimentConfig, seed: int) -> dict[int, IDEResult]:
    s = stage_seeds(seed)
    results = ide_sweep(traj, tr, te, cfg.attack, cfg.ide_config(s["ide"]), keep=True, induce_seed=s["induce"])
    return {r.t: r for r in results}


def metrics_stage(traj: Trajectory, splits: dict[str, LabeledDataset], cfg: ExperimentConfig,
                  seed: int) -> dict[str, dict[int, MetricsReport]]:
    atk = cfg.attack
    n = int(cfg.metrics["n_examples"])
    out: dict[str, dict[int, MetricsReport]] = {}
    for name in cfg.metrics["splits"]:
        ds = splits[name]
        sub = ds.subset(range(min(n, len(ds))), f"{ds.name}-metrics")
        edges = histogram_edges(cfg, int(np.prod(sub.input_shape)))
        # same draws at every checkpoint, so curves over t compare like with like
        mc = cfg.mc_config(derive_seed(stage_seeds(seed)["metrics"], name))
        out[name] = {ck.t: dataset_metrics(sub, ck.params, atk, mc, t=ck.t, split=name, edges=edges)
                     for ck in traj}
    return out


def histogram_edges(cfg: ExperimentConfig, d: int) -> dict[str, np.ndarray]:
    """Configured ``metrics.edges`` ranges (``{"gamma": [lo, hi], ...}``, ``metrics.bins``
    bins each); quantities without a range cover their whole attainable interval."""
    bins = int(cfg.metrics.get("bins", 20))
    edges = default_edges(d, cfg.attack.epsilon, bins)
    for q, (lo, hi) in (cfg.metrics.get("edges") or {}).items():
        edges[q] = np.linspace(float(lo), float(hi), bins + 1)
    return edges


@dataclass
class BoundRow:
    beta_hat: float
    B_hat: float
    terms: tuple[float, float, float]
    value: float
    gg: float

    @property
    def holds(self) -> bool:
        return bool(self.gg <= self.value)


def bound_stage(ide: IDEResult, eld: float, te: LabeledDataset, m: int, cfg: ExperimentConfig,
                seed: int) -> BoundRow:
    """Bound at one checkpoint; the loss is that of the IDE model phi_t."""
    atk = cfg.attack
    b = cfg.bound
    d = int(np.prod(te.input_shape))
    gg = NAN
    if ide.model is not None:
        gg = empirical_gg(ide.model, ide.induced_train, ide.induced_test)
    if b["mode"] == "given":
        beta, B = float(b["beta"]), float(b["B"])
    elif ide.model is None:
        return BoundRow(NAN, NAN, (NAN, NAN, NAN), NAN, gg)
    else:
        phi = ide.model
        sub = te.subset(range(min(int(b["n_examples"]), len(te))))
        beta, B = estimate_beta_B(phi, sub, atk, n_pairs=int(b["n_pairs"]),
                                  seed=derive_seed(stage_seeds(seed)["bound"], "", ide.t),
                                  loss_fn=lambda V, y: per_example_loss(phi, V, y))
    inp = BoundInputs(beta, B, d, atk.epsilon, m, max(eld, 0.0), float(b["tau"]))
    terms = bound_terms(inp)
    return BoundRow(beta, B, terms, float(sum(terms)), gg)


# -- orchestration ----------------------------------------------------------

@dataclass
class RunResult:
    exit_code: int
    out_dir: Path
    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    failures: list[dict] = field(default_factory=list)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def write_rows(path: Path, columns, rows) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    with tmp.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r.get(c)) for c in columns])
    tmp.replace(path)


def pearson(a, b) -> float | None:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    ok = np.isfinite(a) & np.isfinite(b)
    a, b = a[ok], b[ok]
    if len(a) < 3 or np.std(a) == 0 or np.std(b) == 0:
        return None
    return float(np.corrcoef(a, b)[0, 1])


CORRELATION_PAIRS = (("ide_test_err", "gap"), ("eld", "ide_test_err"), ("mean_d", "ide_test_err"),
                     ("mean_phi", "ide_test_err"), ("eld", "gap"))


def per_checkpoint_means(rows: list[dict]) -> list[dict]:
    by_t: dict[int, list[dict]] = {}
    for r in rows:
        by_t.setdefault(r["t"], []).append(r)
    out = []
    for t, group in sorted(by_t.items()):
        row = {"t": t, "n_seeds": len(group)}
        for c in REPORT_COLUMNS[2:]:
            vals = np.array([g[c] for g in group], dtype=float)
            row[c] = float(np.mean(vals[np.isfinite(vals)])) if np.any(np.isfinite(vals)) else NAN
            row[c + "_std"] = float(np.std(vals[np.isfinite(vals)])) if np.any(np.isfinite(vals)) else NAN
        out.append(row)
    return out


def summarize(rows: list[dict], means: list[dict], bounds: list[dict], ide_flags: list, failures: list,
              cfg: ExperimentConfig, elapsed: float) -> dict:
    corr_pooled = {f"{a}~{b}": pearson([r[a] for r in rows], [r[b] for r in rows]) for a, b in CORRELATION_PAIRS}
    corr_means = {f"{a}~{b}": pearson([r[a] for r in means], [r[b] for r in means]) for a, b in CORRELATION_PAIRS}
    holds = [b["holds"] for b in bounds if b.get("holds") is not None]
    return {
        "schema_version": SCHEMA_VERSION,
        "name": cfg.name,
        "seeds": cfg.seeds,
        "n_rows": len(rows),
        "checkpoints": sorted({r["t"] for r in rows}),
        "correlations": {"pooled": corr_pooled, "per_checkpoint_means": corr_means},
        "ide_not_interpolated": ide_flags,
        "bound_soundness": (sum(holds) / len(holds)) if holds else None,
        "failures": failures,
        "elapsed_s": round(elapsed, 3),
    }


def run_experiment(cfg: ExperimentConfig, out_dir=None, plots: bool = True,
                   save_checkpoints: bool = True) -> RunResult:
    """Run every stage for every seed and write the report files into ``out_dir``.

    Files: ``report.csv`` (one row per seed and checkpoint), ``histograms.csv``,
    ``bound.csv``, ``summary.csv`` (per-checkpoint means over seeds),
    ``summary.json``, ``config.json``, checkpoints and SVG figures. A failing
    stage is recorded in ``summary.json``; whatever finished is still written
    and the exit code is 1.
    """
    cfg.validate()
    out = Path(out_dir) if out_dir is not None else cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    t_start = time.time()
    rows: list[dict] = []
    hist_rows: list[dict] = []
    bound_rows: list[dict] = []
    failures: list[dict] = []
    ide_flags: list[list[int]] = []

    def flush():
        write_rows(out / "report.csv", REPORT_COLUMNS, rows)
        write_rows(out / "histograms.csv", HIST_COLUMNS, hist_rows)
        write_rows(out / "bound.csv", BOUND_COLUMNS, bound_rows)
        means = per_checkpoint_means(rows)
        if means:
            write_rows(out / "summary.csv", list(means[0]), means)
        summary = summarize(rows, means, bound_rows, ide_flags, failures, cfg, time.time() - t_start)
        (out / "summary.json").write_text(json.dumps(summary, indent=2))
        return summary

    for seed in cfg.seeds:
        stage = "data"
        try:
            tr, te = load_data(cfg, seed)
            stage = "pgd-at"
            traj = train_stage(cfg, seed, tr, out / "checkpoints" / f"seed{seed}" if save_checkpoints else None)
            stage = "errors"
            errs = error_stage(traj, tr, te, cfg, seed)
            stage = "ide"
            ides = ide_stage(traj, tr, te, cfg, seed)
            for t, r in ides.items():
                if r.failed:
                    failures.append({"seed": seed, "t": t, "stage": "ide", "error": r.error})
                elif not r.interpolated:
                    ide_flags.append([seed, t])
            stage = "metrics"
            mets = metrics_stage(traj, {"train": tr, "test": te}, cfg, seed)
            primary = cfg.metrics["splits"][0]
            stage = "bound"
            for ck in traj:
                t = ck.t
                m = mets[primary][t]
                r = ides[t]
                try:
                    b = bound_stage(r, m.eld, te, len(tr), cfg, seed)
                except (ValueError, ArithmeticError) as exc:
                    failures.append({"seed": seed, "t": t, "stage": "bound", "error": str(exc)})
                    b = BoundRow(NAN, NAN, (NAN, NAN, NAN), NAN, NAN)
                rows.append({"seed": seed, "t": t, **errs[t], "ide_train_err": r.ide_train_error,
                             "ide_test_err": r.ide_test_error, "eld": m.eld, "eld_se": m.eld_se,
                             "mean_d": m.mean_d, "mean_phi": m.mean_phi, "bound_value": b.value})
                bound_rows.append({"seed": seed, "t": t, "beta_hat": b.beta_hat, "B_hat": b.B_hat,
                                   "dispersion_term": b.terms[0], "radius_term": b.terms[1],
                                   "confidence_term": b.terms[2], "bound_value": b.value, "gg": b.gg,
                                   "holds": None if math.isnan(b.value) or math.isnan(b.gg) else int(b.holds)})
                for split, reports in mets.items():
                    for q, (counts, edges) in reports[t].histograms.items():
                        for i, c in enumerate(counts):
                            hist_rows.append({"seed": seed, "t": t, "split": split, "quantity": q, "bin": i,
                                              "lo": float(edges[i]), "hi": float(edges[i + 1]), "count": int(c)})
            log.info("seed %d done", seed)
        except Exception as exc:  # recorded; remaining seeds still run
            log.exception("seed %d failed in stage %s", seed, stage)
            failures.append({"seed": seed, "t": None, "stage": stage, "error": f"{type(exc).__name__}: {exc}"})
        flush()

    if plots and rows:
        from .plotting import emit_plots
        try:
            emit_plots(out / "report.csv", out / "histograms.csv", out,
                       n_hist=int(cfg.metrics.get("hist_checkpoints", 3)))
        except Exception as exc:
            log.exception("plotting failed")
            failures.append({"seed": None, "t": None, "stage": "plot", "error": str(exc)})
    summary = flush()
    return RunResult(1 if failures else 0, out, rows, summary, failures)
