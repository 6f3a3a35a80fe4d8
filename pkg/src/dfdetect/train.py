"""Finetuning loop: Adam on cross-entropy, per-epoch validation, checkpoints, resume.

Run directory layout::

    config.snapshot   resolved detector/preprocess/train config plus the record list (JSON)
    curve.csv         epoch,train_loss,val_loss,val_acc,lr
    best.ckpt         detector at the best validation epoch
    last.ckpt         full run state after the latest finished epoch
    meta.json         seed, hardware, wall time, git hash
    result.json       written once the run has finished
"""

from __future__ import annotations

import csv
import json
import logging
import subprocess
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader, Dataset

from .data import DatasetManifest, atomic_write, manifest_from_rows, manifest_to_rows
from .metrics import ScoredPrediction
from .model import Detector, DetectorConfig, build_detector, save_detector, scores_from_logits
from .preprocess import PreprocessConfig, eval_transform, load_image, train_transform
from .profile import hardware_descriptor
from .schedule import EarlyStopState, early_stop_update, lr_at, make_schedule, schedule_to_dict

log = logging.getLogger(__name__)

RUN_STATE_FORMAT = "dfdetect-run/1"


class TrainingDiverged(RuntimeError):
    pass


class ConfigMismatch(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 1e-4
    scheduler: str = "cosine"
    scheduler_params: dict = field(default_factory=dict)
    weight_decay: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    seed: int = 0
    num_workers: int = 0
    device: str = "cpu"

    def __post_init__(self):
        if self.lr0 <= 0 or self.batch_size <= 0 or self.max_epochs <= 0 or self.patience <= 0:
            raise ValueError("lr0, batch_size, max_epochs and patience must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if self.patience > self.max_epochs:
            raise ValueError("patience cannot exceed max_epochs")
        self.schedule()  # validates scheduler kind and parameters

    def schedule(self):
        return make_schedule(self.scheduler, self.lr0, **self.scheduler_params)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scheduler_params"] = dict(self.scheduler_params)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_accuracy: float
    lr: float
    train_accuracy: float | None = None


@dataclass
class TrainResult:
    curve: list[EpochRecord]
    best_epoch: int
    best_val_accuracy: float
    best_checkpoint: Path
    stopped_early: bool
    wall_time: float

    def to_dict(self) -> dict:
        return {
            "curve": [asdict(r) for r in self.curve],
            "best_epoch": self.best_epoch,
            "best_val_accuracy": self.best_val_accuracy,
            "best_checkpoint": str(self.best_checkpoint),
            "stopped_early": self.stopped_early,
            "wall_time": self.wall_time,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainResult":
        return cls(
            curve=[EpochRecord(**r) for r in d["curve"]],
            best_epoch=d["best_epoch"],
            best_val_accuracy=d["best_val_accuracy"],
            best_checkpoint=Path(d["best_checkpoint"]),
            stopped_early=d["stopped_early"],
            wall_time=d["wall_time"],
        )


class ImageDataset(Dataset):
    """Records -> (normalized tensor, target).  Train-mode crops are seeded per (seed, epoch, index)."""

    def __init__(self, records, pp: PreprocessConfig, train: bool, seed: int = 0, images=None):
        self.records = list(records)
        self.pp = pp
        self.train = train
        self.seed = seed
        self.epoch = 0
        self.images = images  # optional id -> image mapping, bypasses disk

    def __len__(self):
        return len(self.records)

    def _image(self, rec):
        if self.images is not None and rec.id in self.images:
            return self.images[rec.id]
        return load_image(rec.path)

    def __getitem__(self, i):
        rec = self.records[i]
        img = self._image(rec)
        if self.train:
            rng = np.random.default_rng([self.seed, self.epoch, i])
            x = train_transform(img, rng, self.pp)
        else:
            x = eval_transform(img, self.pp)
        return x, rec.target


def _loader(ds: Dataset, order, batch_size: int, workers: int) -> DataLoader:
    # DataLoader yields batches in sampler order regardless of worker count
    return DataLoader(ds, batch_size=batch_size, sampler=list(order), num_workers=workers,
                      shuffle=False, drop_last=False)


def _param_groups(detector: torch.nn.Module, weight_decay: float):
    decay, no_decay = [], []
    for p in detector.parameters():
        if not p.requires_grad:
            continue
        # biases and normalization scales are one-dimensional
        (no_decay if p.ndim <= 1 else decay).append(p)
    groups = []
    if decay:
        groups.append({"params": decay, "weight_decay": weight_decay})
    if no_decay:
        groups.append({"params": no_decay, "weight_decay": 0.0})
    return groups


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, targets)


@torch.no_grad()
def run_eval(detector, loader, device) -> tuple[float, float, list[float], list[int]]:
    """Mean loss, accuracy, fake scores and targets over a loader."""
    detector.eval()
    total, correct, n = 0.0, 0, 0
    scores, targets = [], []
    for x, y in loader:
        x, y = x.to(device), y.to(device)
        logits = detector(x)
        total += float(F.cross_entropy(logits, y, reduction="sum"))
        correct += int((logits.argmax(1) == y).sum())
        n += len(y)
        scores.extend(scores_from_logits(logits).cpu().tolist())
        targets.extend(y.cpu().tolist())
    return total / n, correct / n, scores, targets


def predict_records(detector, records, pp: PreprocessConfig, batch_size: int = 32,
                    device: str = "cpu", images=None) -> list[ScoredPrediction]:
    ds = ImageDataset(records, pp, train=False, images=images)
    _, _, scores, _ = run_eval(detector.to(device), _loader(ds, range(len(ds)), batch_size, 0), device)
    return [ScoredPrediction(r.id, min(1.0, max(0.0, s)), r.label) for r, s in zip(ds.records, scores)]


def _git_hash() -> str | None:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).parent)
        return out.stdout.strip() or None
    except Exception:
        return None


def _write_json(path: Path, obj) -> None:
    with atomic_write(path) as fh:
        json.dump(obj, fh, indent=2)


def _write_curve(path: Path, curve) -> None:
    with atomic_write(path) as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "val_acc", "lr"])
        for r in curve:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_accuracy), repr(r.lr)])


def read_curve(path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        return [EpochRecord(int(r["epoch"]), float(r["train_loss"]), float(r["val_loss"]),
                            float(r["val_acc"]), float(r["lr"])) for r in csv.DictReader(fh)]


def _snapshot(detector: Detector, manifest: DatasetManifest, pp: PreprocessConfig, cfg: TrainConfig) -> dict:
    return {
        "detector": detector.config.to_dict(),
        "preprocess": pp.to_dict(),
        "train": cfg.to_dict(),
        "schedule": schedule_to_dict(cfg.schedule()),
        "records": manifest_to_rows(manifest),
    }


def _save_state(path: Path, detector, optimizer, epoch, stop_state, curve, stopped, wall_time) -> None:
    payload = {
        "format": RUN_STATE_FORMAT,
        "epoch": epoch,
        "backbone": detector.backbone.state_dict(),
        "head": detector.head.state_dict(),
        "optimizer": optimizer.state_dict(),
        "early_stop": stop_state.to_dict(),
        "curve": [asdict(r) for r in curve],
        "stopped": stopped,
        "wall_time": wall_time,
    }
    with atomic_write(path, "wb") as fh:
        torch.save(payload, fh)


def train(detector: Detector, manifest: DatasetManifest, pp: PreprocessConfig, cfg: TrainConfig,
          run_dir, on_epoch_end: Callable[[EpochRecord], None] | None = None, images=None) -> TrainResult:
    """Train ``detector`` in place and return the learning curve and best checkpoint.

    ``on_epoch_end`` is called after each epoch's state has been persisted.
    """
    run_dir = Path(run_dir)
    if not manifest.split("train") or not manifest.split("val"):
        raise ValueError("train needs nonempty train and val splits")
    size = detector.config.image_size if detector.config is not None else None
    if size is not None and (size != pp.train_side or size != pp.eval_side):
        raise ValueError(
            f"detector input size {detector.config.image_size} must equal train_side/eval_side "
            f"({pp.train_side}/{pp.eval_side})"
        )
    run_dir.mkdir(parents=True, exist_ok=True)
    _write_json(run_dir / "config.snapshot", _snapshot(detector, manifest, pp, cfg))

    device = torch.device(cfg.device)
    detector.to(device)
    optimizer = torch.optim.Adam(_param_groups(detector, cfg.weight_decay), lr=cfg.lr0)
    stop_state = EarlyStopState(patience=cfg.patience)
    _save_state(run_dir / "last.ckpt", detector, optimizer, -1, stop_state, [], False, 0.0)
    return _loop(detector, manifest, pp, cfg, run_dir, optimizer, start_epoch=0, stop_state=stop_state,
                 curve=[], wall_time=0.0, on_epoch_end=on_epoch_end, images=images)


def _loop(detector, manifest, pp, cfg, run_dir, optimizer, start_epoch, stop_state, curve, wall_time,
          on_epoch_end=None, images=None, stopped=False) -> TrainResult:
    device = torch.device(cfg.device)
    schedule = cfg.schedule()
    train_ds = ImageDataset(manifest.split("train"), pp, train=True, seed=cfg.seed, images=images)
    val_ds = ImageDataset(manifest.split("val"), pp, train=False, images=images)
    val_loader = _loader(val_ds, range(len(val_ds)), cfg.batch_size, cfg.num_workers)
    meta = {"seed": cfg.seed, "hardware": hardware_descriptor(device), "git_hash": _git_hash(),
            "torch": torch.__version__, "finished": False,
            "weights_source": getattr(detector, "weights_source", None),
            "weights_fingerprint": getattr(detector, "weights_fingerprint", None)}

    for epoch in range(start_epoch, cfg.max_epochs):
        t0 = time.perf_counter()
        lr = lr_at(schedule, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        torch.manual_seed(cfg.seed * 100003 + epoch)
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train_ds))
        train_ds.epoch = epoch
        detector.train(True)
        loss_sum, correct, seen = 0.0, 0, 0
        for b, (x, y) in enumerate(_loader(train_ds, order, cfg.batch_size, cfg.num_workers)):
            x, y = x.to(device), y.to(device)
            logits = detector(x)
            loss = cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch {b}, lr {lr:g}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            loss_sum += float(loss.detach()) * len(y)
            correct += int((logits.detach().argmax(1) == y).sum())
            seen += len(y)

        val_loss, val_acc, _, _ = run_eval(detector, val_loader, device)
        record = EpochRecord(epoch, loss_sum / seen, val_loss, val_acc, lr, correct / seen)
        curve.append(record)
        prev_best = stop_state.best_epoch
        stop_state, stopped = early_stop_update(stop_state, epoch, val_acc, "maximize", tiebreak=val_loss)
        if stop_state.best_epoch != prev_best:
            save_detector(detector, run_dir / "best.ckpt")
        wall_time += time.perf_counter() - t0
        _save_state(run_dir / "last.ckpt", detector, optimizer, epoch, stop_state, curve, stopped, wall_time)
        _write_curve(run_dir / "curve.csv", curve)
        _write_json(run_dir / "meta.json", {**meta, "wall_time": wall_time, "epochs_done": epoch + 1})
        log.info("epoch %d lr %.3g train_loss %.4f val_loss %.4f val_acc %.4f", epoch, lr,
                 record.train_loss, val_loss, val_acc)
        if on_epoch_end is not None:
            on_epoch_end(record)
        if stopped:
            break

    best = max(curve, key=lambda r: r.val_accuracy)
    result = TrainResult(
        curve=curve,
        best_epoch=stop_state.best_epoch,
        best_val_accuracy=best.val_accuracy,
        best_checkpoint=run_dir / "best.ckpt",
        stopped_early=bool(stopped and len(curve) < cfg.max_epochs),
        wall_time=wall_time,
    )
    _write_json(run_dir / "meta.json", {**meta, "wall_time": wall_time, "epochs_done": len(curve),
                                        "finished": True})
    _write_json(run_dir / "result.json", result.to_dict())
    return result


def load_result(run_dir) -> TrainResult:
    with open(Path(run_dir) / "result.json") as fh:
        return TrainResult.from_dict(json.load(fh))


def resume(run_dir, cfg: TrainConfig | None = None, on_epoch_end=None, images=None) -> TrainResult:
    """Continue an interrupted run from ``last.ckpt``; a finished run is returned as stored."""
    run_dir = Path(run_dir)
    snap_path = run_dir / "config.snapshot"
    if not snap_path.is_file():
        raise FileNotFoundError(f"no config.snapshot in {run_dir}")
    snap = json.loads(snap_path.read_text())
    stored_cfg = TrainConfig.from_dict(snap["train"])
    if cfg is not None and cfg.to_dict() != stored_cfg.to_dict():
        diff = {k: (v, cfg.to_dict()[k]) for k, v in stored_cfg.to_dict().items() if cfg.to_dict()[k] != v}
        raise ConfigMismatch(f"config mismatch: {diff}")
    if (run_dir / "result.json").is_file():
        return load_result(run_dir)

    try:
        state = torch.load(run_dir / "last.ckpt", map_location="cpu", weights_only=False)
    except Exception as exc:
        raise ValueError(f"corrupt snapshot {run_dir / 'last.ckpt'}: {exc}") from exc
    if not isinstance(state, dict) or state.get("format") != RUN_STATE_FORMAT:
        raise ValueError(f"corrupt snapshot {run_dir / 'last.ckpt'}")

    det_cfg = DetectorConfig.from_dict(snap["detector"])
    detector = build_detector(det_cfg, load_weights=False)
    detector.backbone.load_state_dict(state["backbone"])
    detector.head.load_state_dict(state["head"])
    detector.to(stored_cfg.device)
    optimizer = torch.optim.Adam(_param_groups(detector, stored_cfg.weight_decay), lr=stored_cfg.lr0)
    optimizer.load_state_dict(state["optimizer"])
    stop_state = EarlyStopState(**state["early_stop"])
    curve = [EpochRecord(**r) for r in state["curve"]]
    manifest = manifest_from_rows(snap["records"])
    pp = PreprocessConfig.from_dict(snap["preprocess"])
    # a run that already decided to stop skips the loop and only rebuilds its result
    start = stored_cfg.max_epochs if state["stopped"] else state["epoch"] + 1
    return _loop(detector, manifest, pp, stored_cfg, run_dir, optimizer, start, stop_state, curve,
                 state["wall_time"], on_epoch_end=on_epoch_end, images=images, stopped=state["stopped"])
