"""Comparison reports over run directories.

A run directory is whatever a CLI command left behind: training runs carry
loss_curve.csv, tracking runs carry metrics.json, and every run carries
run_manifest.json. The report renders a text/CSV comparison table plus
static figures: loss curves, IDSw bars, and (when several tracking runs
cover different sample strides) per-arm stride sweeps.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


class ReportError(RuntimeError):
    pass


def load_run(run_dir) -> dict:
    """Collect a run directory's artifacts; fails naming whatever is missing."""
    root = Path(run_dir)
    if not root.is_dir():
        raise ReportError(f"run directory not found: {root}")
    manifest_path = root / "run_manifest.json"
    if not manifest_path.is_file():
        raise ReportError(f"missing manifest file: {manifest_path}")
    with open(manifest_path, "r", encoding="utf-8") as fh:
        manifest = json.load(fh)
    run = {"label": root.name, "dir": root, "manifest": manifest,
           "command": manifest.get("command")}
    metrics_path = root / "metrics.json"
    curve_path = root / "loss_curve.csv"
    if manifest.get("command") == "track":
        if not metrics_path.is_file():
            raise ReportError(f"missing metrics file: {metrics_path}")
    if metrics_path.is_file():
        with open(metrics_path, "r", encoding="utf-8") as fh:
            run["metrics"] = json.load(fh)
    if curve_path.is_file():
        run["loss_curve"] = _read_curve(curve_path)
    if "metrics" not in run and "loss_curve" not in run:
        raise ReportError(f"{root}: no metrics.json or loss_curve.csv to report on")
    return run


def _read_curve(path) -> dict[str, list[float]]:
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols: dict[str, list[float]] = {name: [] for name in reader.fieldnames}
        for row in reader:
            for k, v in row.items():
                cols[k].append(float(v))
    return cols


def comparison_rows(runs: list[dict]) -> tuple[list[str], list[list]]:
    header = ["run", "command", "scorer", "stride", "IDSw", "IDF1", "MOTSA",
              "mean_iou", "model_score", "final_step1_loss", "final_step2_loss"]
    rows = []
    for run in runs:
        cfg = run["manifest"].get("config", {})
        metrics = run.get("metrics", {})
        curve = run.get("loss_curve")
        rows.append([
            run["label"],
            run.get("command", ""),
            cfg.get("scorer", ""),
            cfg.get("sample_stride", cfg.get("stride", "")),
            metrics.get("IDSw", ""),
            _fmt(metrics.get("IDF1")),
            _fmt(metrics.get("MOTSA")),
            _fmt(metrics.get("mean_iou")),
            _fmt(metrics.get("model_score")),
            _fmt(curve["step1_loss"][-1]) if curve else "",
            _fmt(curve["step2_loss"][-1]) if curve else "",
        ])
    return header, rows


def _fmt(v):
    if v is None or v == "":
        return ""
    return f"{v:.4f}" if isinstance(v, float) else v


def write_table(header, rows, txt_path, csv_path) -> None:
    widths = [max(len(str(h)), *(len(str(r[i])) for r in rows)) if rows else len(str(h))
              for i, h in enumerate(header)]
    with open(txt_path, "w", encoding="utf-8") as fh:
        fh.write("  ".join(str(h).ljust(w) for h, w in zip(header, widths)).rstrip() + "\n")
        fh.write("  ".join("-" * w for w in widths) + "\n")
        for r in rows:
            fh.write("  ".join(str(v).ljust(w) for v, w in zip(r, widths)).rstrip() + "\n")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def plot_loss_curves(runs: list[dict], out_png) -> list[str]:
    """One step-1/step-2 pair per training run; returns plotted labels."""
    plotted = []
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for run in runs:
        curve = run.get("loss_curve")
        if not curve:
            continue
        it = curve["iteration"]
        ax.plot(it, curve["step1_loss"], label=f"{run['label']} step1", alpha=0.8)
        ax.plot(it, curve["step2_loss"], label=f"{run['label']} step2", alpha=0.8, linestyle="--")
        plotted.append(run["label"])
    if not plotted:
        plt.close(fig)
        return []
    ax.set_xlabel("iteration")
    ax.set_ylabel("mask loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.set_title("training loss")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return plotted


def plot_idsw_bars(runs: list[dict], out_png) -> list[str]:
    labels, values = [], []
    for run in runs:
        metrics = run.get("metrics")
        if metrics and "IDSw" in metrics:
            labels.append(run["label"])
            values.append(metrics["IDSw"])
    if not labels:
        return []
    fig, ax = plt.subplots(figsize=(max(4, 1.2 * len(labels)), 4))
    ax.bar(range(len(labels)), values, color="tab:blue")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("identity switches")
    ax.set_title("IDSw by run")
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)
    return labels


def _sweep_groups(runs: list[dict]) -> dict[str, list[tuple[int, dict]]]:
    groups: dict[str, list[tuple[int, dict]]] = {}
    for run in runs:
        metrics = run.get("metrics")
        cfg = run["manifest"].get("config", {})
        stride = cfg.get("sample_stride", cfg.get("stride"))
        scorer = cfg.get("scorer")
        if metrics is None or stride is None or scorer is None:
            continue
        groups.setdefault(scorer, []).append((int(stride), metrics))
    return {k: sorted(v) for k, v in groups.items() if len(v) >= 2}


def plot_stride_sweep(runs: list[dict], idsw_png, iou_png) -> list[str]:
    """Per-arm IDSw and association-IoU curves over sample stride.

    The IoU series uses the arm's matched auxiliary-model score where one
    exists (the motion arm's predicted-mask IoU); arms without one fall back
    to the matched-detection IoU.
    """
    groups = _sweep_groups(runs)
    if not groups:
        return []
    fig, ax = plt.subplots(figsize=(6, 4))
    for scorer, entries in groups.items():
        ax.plot([s for s, _ in entries], [m["IDSw"] for _, m in entries],
                marker="o", label=scorer)
    ax.set_xlabel("sample stride")
    ax.set_ylabel("identity switches")
    ax.set_title("IDSw vs stride")
    ax.legend()
    fig.tight_layout()
    fig.savefig(idsw_png, dpi=120)
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 4))
    for scorer, entries in groups.items():
        ys = [m["model_score"] if m.get("model_score") is not None else m.get("mean_iou")
              for _, m in entries]
        ax.plot([s for s, _ in entries], ys, marker="o", label=scorer)
    ax.set_xlabel("sample stride")
    ax.set_ylabel("matched-pair IoU")
    ax.set_title("association IoU vs stride")
    ax.legend()
    fig.tight_layout()
    fig.savefig(iou_png, dpi=120)
    plt.close(fig)
    return sorted(groups)


def build_report(run_dirs, out_dir) -> dict:
    """Assemble the comparison table and figures; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    runs = [load_run(d) for d in run_dirs]
    header, rows = comparison_rows(runs)
    txt = out / "report.txt"
    csv_path = out / "report.csv"
    write_table(header, rows, txt, csv_path)
    written = {"table_txt": txt, "table_csv": csv_path}
    if plot_loss_curves(runs, out / "loss_curves.png"):
        written["loss_curves"] = out / "loss_curves.png"
    if plot_idsw_bars(runs, out / "idsw_bars.png"):
        written["idsw_bars"] = out / "idsw_bars.png"
    arms = plot_stride_sweep(runs, out / "idsw_vs_stride.png", out / "iou_vs_stride.png")
    if arms:
        written["idsw_vs_stride"] = out / "idsw_vs_stride.png"
        written["iou_vs_stride"] = out / "iou_vs_stride.png"
        written["sweep_arms"] = arms
    return written
