"""Exhaustive hyperparameter grid over architecture x init x scheduler x learning rate."""

from __future__ import annotations

import csv
import io
import itertools
import json
import logging
import statistics
import traceback
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

from .data import DatasetManifest, atomic_write, load_splits, save_splits, splits_hash
from .model import ARCHS, INITS, DetectorConfig, build_detector
from .preprocess import PreprocessConfig, normalization_for_init
from .train import TrainConfig, train

log = logging.getLogger(__name__)

SCHEDULERS = ("cosine", "step")
MISSING = "—"


@dataclass(frozen=True)
class SweepGrid:
    archs: tuple[str, ...] = ARCHS
    inits: tuple[str, ...] = INITS
    schedulers: tuple[str, ...] = SCHEDULERS
    lrs: tuple[float, ...] = (1e-3, 1e-4, 1e-5)
    train: TrainConfig = field(default_factory=TrainConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    detector: dict = field(default_factory=dict)  # shared DetectorConfig fields (dropout, freeze, ...)
    scheduler_params: dict = field(default_factory=dict)  # scheduler kind -> constructor kwargs
    seeds: int = 1

    def __post_init__(self):
        for name in ("archs", "inits", "schedulers", "lrs"):
            axis = tuple(getattr(self, name))
            if not axis:
                raise ValueError(f"sweep axis {name!r} is empty")
            object.__setattr__(self, name, axis)
        bad = [a for a in self.archs if a not in ARCHS] + [i for i in self.inits if i not in INITS] + \
              [s for s in self.schedulers if s not in SCHEDULERS]
        if bad:
            raise ValueError(f"unknown sweep values: {bad}")
        if self.seeds < 1:
            raise ValueError("seeds must be >= 1")

    def cells(self) -> list[tuple[str, str, str, float]]:
        return list(itertools.product(self.archs, self.inits, self.schedulers, self.lrs))

    def __len__(self) -> int:
        return len(self.archs) * len(self.inits) * len(self.schedulers) * len(self.lrs)


CellKey = tuple  # (arch, init, scheduler, lr)


@dataclass
class SweepCellResult:
    arch: str
    init: str
    scheduler: str
    lr: float
    best_val_accuracy: float | None
    best_epoch: int | None
    run_dir: str
    status: str  # done | failed | skipped
    gflops: float | None = None
    val_accuracy_sd: float | None = None
    error: str | None = None

    @property
    def key(self) -> CellKey:
        return (self.arch, self.init, self.scheduler, self.lr)


def cell_name(arch: str, init: str, scheduler: str, lr: float) -> str:
    return f"{arch}-{init}-{scheduler}-lr{lr:g}"


def _cell_json(path: Path) -> dict | None:
    try:
        return json.loads(path.read_text())
    except (OSError, json.JSONDecodeError):
        return None


def _estimate_gflops(arch: str, init: str, size: int) -> float | None:
    from .profile import count_flops

    try:
        det = build_detector(DetectorConfig(arch, init, image_size=size), load_weights=False)
        return count_flops(det, size).gflops
    except Exception:
        return None


def run_sweep(grid: SweepGrid, manifest: DatasetManifest, out_dir, resume: bool = True,
              train_fn: Callable | None = None, detector_fn: Callable | None = None,
              images=None) -> list[SweepCellResult]:
    """Train every cell on one shared validation split.

    Each cell writes ``cell.json`` when it finishes; with ``resume`` those cells
    are not run again.  A failing cell is recorded and the sweep moves on.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if not manifest.split("val"):
        raise ValueError("manifest needs a validation split before sweeping")
    splits_file = out_dir / "splits.json"
    if splits_file.exists():
        if load_splits(splits_file) != manifest.assignment():
            raise ValueError(f"{splits_file} disagrees with the manifest's split assignment")
        split_digest = splits_hash(splits_file)
    else:
        split_digest = save_splits(manifest, splits_file)

    train_fn = train_fn or train
    detector_fn = detector_fn or (lambda cfg: build_detector(cfg))
    flops_cache: dict[tuple[str, str], float | None] = {}
    results = []
    for arch, init, sched, lr in grid.cells():
        name = cell_name(arch, init, sched, lr)
        cell_dir = out_dir / name
        record_path = cell_dir / "cell.json"
        prior = _cell_json(record_path) if resume else None
        if prior and prior.get("status") == "done":
            if prior.get("splits_sha256") != split_digest:
                raise ValueError(f"{name} was trained on a different validation split")
            results.append(SweepCellResult(**{k: v for k, v in prior.items() if k != "splits_sha256"}))
            continue

        if (arch, init) not in flops_cache:
            flops_cache[(arch, init)] = _estimate_gflops(arch, init, grid.preprocess.train_side)
        pp = replace(grid.preprocess, normalization=normalization_for_init(init))
        det_cfg = DetectorConfig(arch, init, image_size=pp.train_side, **grid.detector)
        accs, epochs = [], []
        status, error = "done", None
        try:
            for s in range(grid.seeds):
                cfg = replace(grid.train, lr0=lr, scheduler=sched, seed=grid.train.seed + s,
                              scheduler_params=dict(grid.scheduler_params.get(sched, {})))
                run_dir = cell_dir if grid.seeds == 1 else cell_dir / f"seed{cfg.seed}"
                extra = {"images": images} if images is not None else {}
                res = train_fn(detector_fn(det_cfg), manifest, pp, cfg, run_dir, **extra)
                accs.append(res.best_val_accuracy)
                epochs.append(res.best_epoch)
        except Exception as exc:
            status = "failed"
            error = f"{type(exc).__name__}: {exc}"
            log.warning("cell %s failed: %s", name, error)
            log.debug(traceback.format_exc())
        cell = SweepCellResult(
            arch=arch, init=init, scheduler=sched, lr=lr,
            best_val_accuracy=statistics.fmean(accs) if status == "done" else None,
            best_epoch=epochs[0] if status == "done" else None,
            run_dir=str(cell_dir), status=status, gflops=flops_cache[(arch, init)],
            val_accuracy_sd=statistics.stdev(accs) if status == "done" and len(accs) > 1 else None,
            error=error,
        )
        cell_dir.mkdir(parents=True, exist_ok=True)
        with atomic_write(record_path) as fh:
            json.dump({**asdict(cell), "splits_sha256": split_digest}, fh, indent=2)
        results.append(cell)
    return results


def load_results(sweep_dir) -> list[SweepCellResult]:
    """Fold the ``cell.json`` files of a sweep directory, in sorted cell order."""
    out = []
    for path in sorted(Path(sweep_dir).glob("*/cell.json")):
        d = _cell_json(path)
        if d is not None:
            d.pop("splits_sha256", None)
            out.append(SweepCellResult(**d))
    return out


def _axes(results):
    archs = [a for a in ARCHS if any(r.arch == a for r in results)]
    archs += sorted({r.arch for r in results} - set(archs))
    inits = [i for i in INITS if any(r.init == i for r in results)]
    scheds = [s for s in SCHEDULERS if any(r.scheduler == s for r in results)]
    lrs = sorted({r.lr for r in results}, reverse=True)
    return archs, inits, scheds, lrs


def emit_table(results, out_dir=None) -> tuple[str, str]:
    """Table of best validation accuracies: rows scheduler x lr, columns arch x init.

    Returns ``(csv_text, aligned_text)``; with ``out_dir`` also writes
    ``table1.csv`` and ``table1.txt``.
    """
    results = list(results)
    if not results:
        raise ValueError("no sweep results to tabulate")
    archs, inits, scheds, lrs = _axes(results)
    lookup = {r.key: r for r in results}
    columns = [(a, i) for a in archs for i in inits]

    rows = []
    for s in scheds:
        for lr in lrs:
            vals = []
            for a, i in columns:
                r = lookup.get((a, i, s, lr))
                vals.append(r.best_val_accuracy if r is not None and r.status == "done" else None)
            rows.append((s, lr, vals))

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["scheduler", "lr"] + [f"{a}/{i}" for a, i in columns])
    for s, lr, vals in rows:
        w.writerow([s, f"{lr:g}"] + ["" if v is None else f"{v:.3f}" for v in vals])
    csv_text = buf.getvalue()

    header = ["scheduler", "lr"] + [f"{a}/{i}" for a, i in columns]
    body = [[s, f"{lr:g}"] + [MISSING if v is None else f"{v:.3f}" for v in vals] for s, lr, vals in rows]
    widths = [max(len(str(row[c])) for row in [header] + body) for c in range(len(header))]
    lines = ["  ".join(str(cell).rjust(widths[c]) for c, cell in enumerate(row)) for row in [header] + body]
    lines.insert(1, "  ".join("-" * wd for wd in widths))
    text = "\n".join(lines) + "\n"

    if out_dir is not None:
        out_dir = Path(out_dir)
        with atomic_write(out_dir / "table1.csv") as fh:
            fh.write(csv_text)
        with atomic_write(out_dir / "table1.txt") as fh:
            fh.write(text)
    return csv_text, text


def select_best(results, k: int, per_arch: bool = False) -> list[SweepCellResult]:
    """Top-``k`` finished cells by validation accuracy.

    Ties go to the cell with fewer GFLOPs, then to the lexicographically
    smaller (arch, init, scheduler, lr) key.  ``per_arch`` applies ``k`` within
    each architecture.
    """
    done = [r for r in results if r.status == "done"]

    def rank(r):
        flops = r.gflops if r.gflops is not None else float("inf")
        return (-r.best_val_accuracy, flops, r.key)

    if per_arch:
        out = []
        for arch in [a for a in ARCHS if any(r.arch == a for r in done)]:
            out.extend(select_best([r for r in done if r.arch == arch], k))
        return out
    if k > len(done):
        raise ValueError(f"k={k} exceeds the {len(done)} finished cells")
    return sorted(done, key=rank)[:k]
