"""Markdown summary of a run or sweep directory, with figure files beside it."""

from __future__ import annotations

import json
import os
from pathlib import Path

from . import plotting
from .data import atomic_write
from .sweep import emit_table, load_results, select_best
from .train import read_curve


class NoRuns(FileNotFoundError):
    pass


def _md_table(header, rows) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(str(c) for c in row) + " |" for row in rows]
    return "\n".join(lines)


def build_report(path, out_dir=None) -> Path:
    path = Path(path)
    if not path.is_dir():
        raise NoRuns(f"no runs found: {path} is not a directory")
    out_dir = Path(out_dir) if out_dir else path / "report"
    cells = load_results(path)
    run_dirs = sorted({p.parent for p in path.rglob("curve.csv") if out_dir not in p.parents})
    evals = sorted(p for p in path.rglob("eval.json") if out_dir not in p.parents)
    profiles = sorted(p for p in path.rglob("profile.json") if out_dir not in p.parents)
    # gradcam writes <id>.<arch>.heatmap.npy next to each <id>.<arch>.<class>.png overlay
    overlays = sorted(png for npy in path.rglob("*.heatmap.npy") if out_dir not in npy.parents
                      for png in npy.parent.glob(npy.name[:-len("heatmap.npy")] + "*.png"))
    if not (cells or run_dirs or evals or profiles or overlays):
        raise NoRuns(f"no runs found under {path}")

    parts = [f"# Report for `{path.name}`", ""]
    if cells:
        _, text = emit_table(cells, out_dir)
        plotting.accuracy_grid(cells, out_dir / "accuracy_grid.png")
        parts += ["## Best validation accuracy per cell", "", "```", text.rstrip(), "```", "",
                  "![accuracy grid](accuracy_grid.png)", ""]
        failed = [c for c in cells if c.status == "failed"]
        if failed:
            parts += ["Failed cells:", ""] + [f"- `{Path(c.run_dir).name}`: {c.error}" for c in failed] + [""]
        done = [c for c in cells if c.status == "done"]
        if done:
            best = select_best(done, 1, per_arch=True)
            parts += ["## Best cell per architecture", "",
                      _md_table(["arch", "init", "scheduler", "lr", "val acc", "best epoch"],
                                [[c.arch, c.init, c.scheduler, f"{c.lr:g}", f"{c.best_val_accuracy:.3f}",
                                  c.best_epoch] for c in best]), ""]

    if run_dirs:
        curves = {}
        for d in run_dirs:
            label = d.relative_to(path).as_posix() if d != path else path.name
            curves[label] = read_curve(d / "curve.csv")
        plotting.learning_curves(curves, out_dir / "learning_curves.png")
        rows = []
        for label, curve in curves.items():
            best = max(curve, key=lambda r: r.val_accuracy)
            rows.append([label, len(curve), best.epoch, f"{best.val_accuracy:.3f}", f"{curve[-1].lr:.3g}"])
        parts += ["## Training runs", "", _md_table(["run", "epochs", "best epoch", "best val acc", "final lr"], rows),
                  "", "![learning curves](learning_curves.png)", ""]

    if evals:
        reports = {}
        for p in evals:
            label = p.parent.relative_to(path).as_posix() if p.parent != path else path.name
            reports[label] = json.loads(p.read_text())
        rows = [[label, f"{r['accuracy']:.3f}", _f(r.get("roc_auc")), _f(r.get("average_precision")),
                 _f(r.get("recall_at_precision_1")), r["n_real"], r["n_fake"]] for label, r in reports.items()]
        parts += ["## Evaluation", "",
                  _md_table(["model", "accuracy", "ROC AUC", "AP", "recall @ precision 1", "real", "fake"], rows), ""]
        if any(r.get("roc") for r in reports.values()):
            plotting.roc_pr({k: v for k, v in reports.items() if v.get("roc")}, out_dir / "roc_pr.png")
            parts += ["![ROC and PR curves](roc_pr.png)", ""]

    if profiles:
        rows = []
        for p in profiles:
            r = json.loads(p.read_text())
            lat = "—" if r.get("latency_ms_mean") is None else f"{r['latency_ms_mean']:.2f} ± {r['latency_ms_std']:.2f}"
            rows.append([r["arch"], r.get("init", ""), f"{r['params_millions']:.2f}", f"{r['gflops']:.2f}",
                         r["flop_input_size"], lat, r.get("hardware", "")])
        parts += ["## Computational cost", "",
                  _md_table(["arch", "init", "params (M)", "GFLOPs", "FLOP input px", "latency (ms)", "hardware"], rows),
                  ""]

    if overlays:
        parts += ["## GradCAM overlays", ""]
        parts += [f"![{png.stem}]({Path(os.path.relpath(png, out_dir)).as_posix()})" for png in overlays] + [""]

    out = out_dir / "report.md"
    with atomic_write(out) as fh:
        fh.write("\n".join(parts))
    return out


def _f(x) -> str:
    return "—" if x is None else f"{x:.3f}"
