"""Report files: CSV tables, a config echo and matplotlib figures.

Floats are written with ``repr`` so every table reads back to exactly the values that were written.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ..pitch import SpeakerPitchStats, group_spread
from .matrix import Cell, LossRow, RunReport

RESULT_COLUMNS = ("condition", "aux", "test_set", "seed", "per", "status", "reason")
LOSS_COLUMNS = ("condition", "aux", "seed", "epoch", "frames", "f_ce", "f_lfmmi", "f_mse", "total")
SUMMARY_COLUMNS = ("condition", "aux", "test_set", "mean_per", "std_per", "seeds")


def _bin_columns() -> list:
    edges = SpeakerPitchStats.bin_edges()
    return [f"f0_{int(lo)}_{int(hi)}" for lo, hi in zip(edges[:-1], edges[1:])]


def _write(path: Path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read(path: Path) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def _num(v) -> str:
    return "" if v is None else repr(float(v))


def write_results(path, cells) -> None:
    _write(Path(path), RESULT_COLUMNS,
           [(c.condition, c.aux, c.test_set, c.seed, _num(c.per), c.status, c.reason) for c in cells])


def read_results(path) -> list:
    return [Cell(r["condition"], r["aux"], r["test_set"], int(r["seed"]),
                 float(r["per"]) if r["per"] else None, r["status"], r["reason"]) for r in _read(Path(path))]


def write_pitch_stats(path, stats: dict) -> None:
    rows = [(s.speaker, s.group, _num(s.mean_f0), s.num_voiced, *[int(n) for n in s.histogram])
            for s in stats.values()]
    _write(Path(path), ("speaker", "group", "mean_f0", "num_voiced", *_bin_columns()), rows)


def read_pitch_stats(path) -> dict:
    bins = _bin_columns()
    out = {}
    for r in _read(Path(path)):
        out[r["speaker"]] = SpeakerPitchStats(r["speaker"], float(r["mean_f0"]),
                                              np.array([int(r[b]) for b in bins]), int(r["num_voiced"]), r["group"])
    return out


def write_loss_curves(path, rows) -> None:
    _write(Path(path), LOSS_COLUMNS, [(r.condition, r.aux, r.seed, r.epoch, r.frames, _num(r.f_ce),
                                       _num(r.f_lfmmi), _num(r.f_mse), _num(r.total)) for r in rows])


def read_loss_curves(path) -> list:
    return [LossRow(r["condition"], r["aux"], int(r["seed"]), int(r["epoch"]), int(r["frames"]), float(r["f_ce"]),
                    float(r["f_lfmmi"]), float(r["f_mse"]), float(r["total"])) for r in _read(Path(path))]


def write_summary(path, report: RunReport) -> None:
    rows = [(*k, f"{m:.2f}", f"{s:.2f}", n) for k, (m, s, n) in report.summary().items()]
    _write(Path(path), SUMMARY_COLUMNS, rows)


def read_report(out_dir) -> RunReport:
    d = Path(out_dir)
    return RunReport(cells=read_results(d / "results.csv"), loss_curves=read_loss_curves(d / "loss_curves.csv"),
                     pitch_stats=read_pitch_stats(d / "pitch_stats.csv"),
                     config_echo=(d / "config.echo").read_text(encoding="utf-8"))


# ---------------------------------------------------------------- figures


def plot_pitch_histograms(stats: dict, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    edges = SpeakerPitchStats.bin_edges()
    centers = 0.5 * (edges[:-1] + edges[1:])
    by_group: dict = {}
    for s in stats.values():
        by_group[s.group] = by_group.get(s.group, 0) + s.histogram
    spread = group_spread(stats)
    fig, ax = plt.subplots(figsize=(7, 4))
    for g, h in sorted(by_group.items()):
        ax.plot(centers, h / max(h.sum(), 1), label=f"{g} (speaker spread {spread[g]:.0f} Hz)")
    ax.set_xlabel("f0 (Hz)")
    ax.set_ylabel("fraction of voiced frames")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_loss_curves(rows, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 3, figsize=(12, 3.5))
    series: dict = {}
    for r in rows:
        if "+" in r.condition:  # adaptation arms have a single epoch; leave them out
            continue
        series.setdefault((r.condition, r.aux, r.seed), []).append(r)
    for (cond, aux, seed), rs in sorted(series.items()):
        ep = [r.epoch for r in rs]
        for ax, attr in zip(axes, ("f_ce", "f_lfmmi", "f_mse")):
            ax.plot(ep, [getattr(r, attr) / r.frames for r in rs], label=f"{cond}({aux}) s{seed}", lw=0.8)
    for ax, title in zip(axes, ("cross-entropy / frame", "LF-MMI / frame", "reconstruction / frame")):
        ax.set_title(title, fontsize=9)
        ax.set_xlabel("epoch")
    axes[0].legend(fontsize=6)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_per(report: RunReport, path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    summary = {k: v for k, v in report.summary().items() if "+" not in k[0]}
    models = sorted({(c, a) for c, a, _ in summary})
    tests = list(dict.fromkeys(t for _, _, t in summary))
    fig, ax = plt.subplots(figsize=(10, 4))
    width = 0.8 / max(len(models), 1)
    for i, (c, a) in enumerate(models):
        means = [summary.get((c, a, t), (np.nan, 0, 0))[0] for t in tests]
        stds = [summary.get((c, a, t), (0, 0, 0))[1] for t in tests]
        ax.bar(np.arange(len(tests)) + i * width, means, width, yerr=stds, label=f"{c}({a})")
    ax.set_xticks(np.arange(len(tests)) + 0.4 - width / 2)
    ax.set_xticklabels(tests, fontsize=8)
    ax.set_ylabel("PER (%)")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def emit_report(report: RunReport, out_dir, figures: bool = True) -> list:
    """Write results.csv, summary.csv, pitch_stats.csv, loss_curves.csv, config.echo and PNG figures."""
    d = Path(out_dir)
    d.mkdir(parents=True, exist_ok=True)
    write_results(d / "results.csv", report.cells)
    write_summary(d / "summary.csv", report)
    write_pitch_stats(d / "pitch_stats.csv", report.pitch_stats)
    write_loss_curves(d / "loss_curves.csv", report.loss_curves)
    (d / "config.echo").write_text(report.config_echo, encoding="utf-8")
    written = [d / n for n in ("results.csv", "summary.csv", "pitch_stats.csv", "loss_curves.csv", "config.echo")]
    if figures:
        if report.pitch_stats:
            plot_pitch_histograms(report.pitch_stats, d / "pitch_histograms.png")
            written.append(d / "pitch_histograms.png")
        if report.loss_curves:
            plot_loss_curves(report.loss_curves, d / "loss_curves.png")
            written.append(d / "loss_curves.png")
        if any(c.status == "ok" for c in report.cells):
            plot_per(report, d / "per_by_test_set.png")
            written.append(d / "per_by_test_set.png")
    return written
