"""SVG figures from the report CSVs: error curves, metric curves, histograms."""

from __future__ import annotations

import csv
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.family": "sans-serif",
    "font.size": 8,
    "axes.labelsize": 8,
    "axes.titlesize": 9,
    "legend.fontsize": 7,
    "legend.frameon": False,
    "xtick.labelsize": 7,
    "ytick.labelsize": 7,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.2,
    "lines.markersize": 3,
    "svg.fonttype": "none",
    "svg.hashsalt": "idelab",  # stable element ids -> reproducible files
}

ERROR_SERIES = (("std_train_err", "clean train"), ("std_test_err", "clean test"),
                ("rob_train_err", "robust train"), ("rob_test_err", "robust test"), ("gap", "robust gap"))
IDE_SERIES = (("ide_train_err", "IDE train"), ("ide_test_err", "IDE test"))
METRIC_SERIES = (("eld", "ELD"), ("mean_d", "mean distance to clean"), ("mean_phi", "mean angle (rad)"))
QUANTITY_LABEL = {"gamma": r"local dispersion $\tilde\gamma_t(x,y)$",
                  "d": r"distance $\|Q(x+\rho)-x\|$", "phi": r"angle $\Phi$ (rad)"}


class PlotError(ValueError):
    pass


def size(width_in: float = 6.5, aspect: float = (math.sqrt(5) - 1) / 2, ncols: int = 1):
    return (width_in, width_in * aspect / max(1, ncols) * 1.4)


def _read(path, required) -> list[dict]:
    path = Path(path)
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            rows = list(reader)
    except OSError as exc:
        raise PlotError(f"cannot read {path}: {exc}") from exc
    missing = [c for c in required if c not in header]
    if missing:
        raise PlotError(f"{path.name}: missing columns {missing}")
    for i, r in enumerate(rows, start=2):
        if None in r or any(v is None for v in r.values()):
            raise PlotError(f"{path.name} line {i}: wrong number of fields")
    return rows


def _num(v: str) -> float:
    if v == "":
        return math.nan
    try:
        return float(v)
    except ValueError as exc:
        raise PlotError(f"non-numeric cell {v!r}") from exc


def read_report(path) -> dict[str, np.ndarray]:
    """Columns of ``report.csv`` as float arrays (empty cells -> NaN)."""
    from .pipeline import REPORT_COLUMNS

    rows = _read(path, ("seed", "t"))
    header = list(rows[0]) if rows else list(REPORT_COLUMNS)
    return {c: np.array([_num(r[c]) for r in rows], dtype=float) for c in header}


def read_histograms(path) -> list[dict]:
    rows = _read(path, ("seed", "t", "split", "quantity", "bin", "lo", "hi", "count"))
    return [{"seed": int(_num(r["seed"])), "t": int(_num(r["t"])), "split": r["split"],
             "quantity": r["quantity"], "bin": int(_num(r["bin"])), "lo": _num(r["lo"]),
             "hi": _num(r["hi"]), "count": int(_num(r["count"]))} for r in rows]


def _by_checkpoint(rep: dict[str, np.ndarray], col: str):
    """(t, mean, std) over seeds, skipping NaNs; None when the column is empty."""
    if col not in rep or not np.any(np.isfinite(rep[col])):
        return None
    ts = np.unique(rep["t"])
    mean, std = [], []
    for t in ts:
        v = rep[col][(rep["t"] == t) & np.isfinite(rep[col])]
        mean.append(np.mean(v) if len(v) else np.nan)
        std.append(np.std(v) if len(v) else np.nan)
    return ts, np.array(mean), np.array(std)


def _curves(ax, rep, series, omitted):
    for col, label in series:
        got = _by_checkpoint(rep, col)
        if got is None:
            omitted.append(col)
            continue
        ts, m, s = got
        line, = ax.plot(ts, m, marker="o", label=label)
        if np.any(s > 0):
            ax.fill_between(ts, m - s, m + s, color=line.get_color(), alpha=0.15, linewidth=0)


def _ticks(ax, rep):
    ts = np.unique(rep["t"])
    ax.set_xticks(ts)
    ax.set_xticklabels([str(int(t)) for t in ts])
    ax.set_xlabel("checkpoint (epoch)")


def _save(fig, path):
    fig.savefig(path, metadata={"Date": None})  # no timestamp: byte-identical reruns
    plt.close(fig)


def _note(fig, omitted):
    if omitted:
        fig.text(0.01, 0.01, "omitted (no data): " + ", ".join(omitted), fontsize=6, color="0.4")


def plot_errors(rep: dict[str, np.ndarray], path) -> Path:
    omitted: list[str] = []
    with plt.rc_context(STYLE):
        fig, (a, b) = plt.subplots(1, 2, figsize=size(ncols=2))
        _curves(a, rep, ERROR_SERIES, omitted)
        a.set_title("PGD adversarial training")
        _curves(b, rep, IDE_SERIES, omitted)
        b.set_title("induced distribution experiment")
        for ax in (a, b):
            _ticks(ax, rep)
            ax.set_ylabel("error")
            if ax.lines:
                ax.legend()
        _note(fig, omitted)
        fig.tight_layout()
        _save(fig, path)
    return Path(path)


def plot_metrics(rep: dict[str, np.ndarray], path) -> Path:
    present = [(c, l) for c, l in METRIC_SERIES if _by_checkpoint(rep, c) is not None]
    omitted = [c for c, _ in METRIC_SERIES if (c, _) not in present]
    with plt.rc_context(STYLE):
        n = max(1, len(present))
        fig, axes = plt.subplots(1, n, figsize=size(ncols=n), squeeze=False)
        for ax, (col, label) in zip(axes[0], present):
            _curves(ax, rep, [(col, label)], [])
            ax.set_title(label)
            _ticks(ax, rep)
        if not present:
            axes[0, 0].set_axis_off()
        _note(fig, omitted)
        fig.tight_layout()
        _save(fig, path)
    return Path(path)


def pick_checkpoints(ts, n: int = 3) -> list[int]:
    """``n`` checkpoints spread evenly from first to last."""
    ts = sorted(set(int(t) for t in ts))
    if len(ts) <= n:
        return ts
    idx = np.unique(np.round(np.linspace(0, len(ts) - 1, n)).astype(int))
    return [ts[i] for i in idx]


def plot_histogram(hists: list[dict], path, quantity: str = "gamma", split: str = "test",
                   checkpoints=None, n: int = 3) -> Path | None:
    """Overlaid histograms of one quantity at a few checkpoints (counts summed over seeds)."""
    rows = [h for h in hists if h["quantity"] == quantity and h["split"] == split]
    if not rows:
        return None
    chosen = list(checkpoints) if checkpoints is not None else pick_checkpoints([h["t"] for h in rows], n)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=size(4.0))
        span = [math.inf, -math.inf]
        for t in chosen:
            sel = [h for h in rows if h["t"] == t]
            if not sel:
                continue
            nb = max(h["bin"] for h in sel) + 1
            counts = np.zeros(nb)
            lo, hi = np.zeros(nb), np.zeros(nb)
            for h in sel:
                counts[h["bin"]] += h["count"]
                lo[h["bin"]], hi[h["bin"]] = h["lo"], h["hi"]
            edges = np.append(lo, hi[-1])
            fill = ax.stairs(counts, edges, fill=True, alpha=0.35, label=f"t = {t}")
            ax.stairs(counts, edges, linewidth=1.0, color=fill.get_facecolor(), alpha=1.0)
            used = np.flatnonzero(counts)
            if len(used):
                span = [min(span[0], lo[used[0]]), max(span[1], hi[used[-1]])]
        if math.isfinite(span[0]):
            # zoom on the occupied bins; fixed edges often span far more
            pad = 0.05 * (span[1] - span[0])
            ax.set_xlim(span[0] - pad, span[1] + pad)
        ax.set_xlabel(QUANTITY_LABEL.get(quantity, quantity))
        ax.set_ylabel("count")
        ax.set_title(f"{split} set")
        ax.legend()
        fig.tight_layout()
        _save(fig, path)
    return Path(path)


def emit_plots(report_csv, hist_csv=None, out_dir=None, n_hist: int = 3) -> list[Path]:
    """Render ``errors.svg``, ``metrics.svg`` and ``hist_<quantity>_<split>.svg``."""
    report_csv = Path(report_csv)
    out = Path(out_dir) if out_dir is not None else report_csv.parent
    out.mkdir(parents=True, exist_ok=True)
    rep = read_report(report_csv)
    if len(rep.get("t", ())) == 0:
        raise PlotError(f"{report_csv.name} has no rows")
    paths = [plot_errors(rep, out / "errors.svg"), plot_metrics(rep, out / "metrics.svg")]
    if hist_csv is not None and Path(hist_csv).exists():
        hists = read_histograms(hist_csv)
        for split in sorted({h["split"] for h in hists}):
            for q in ("gamma", "d", "phi"):
                p = plot_histogram(hists, out / f"hist_{q}_{split}.svg", q, split, n=n_hist)
                if p is not None:
                    paths.append(p)
    return paths
