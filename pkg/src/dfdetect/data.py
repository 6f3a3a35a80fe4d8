"""Labeled image manifests, the train/val/test split scheme and class baselines."""

from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile
from collections import Counter
from dataclasses import dataclass, field, replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

LABELS = ("real", "fake")
SPLITS = ("train", "val", "test")
# class index used by every model and metric
LABEL_INDEX = {"real": 0, "fake": 1}


class ManifestError(ValueError):
    """Raised for malformed manifests or impossible split requests."""


@dataclass(frozen=True)
class LabeledImage:
    id: str
    path: Path
    label: str
    split: str

    def __post_init__(self):
        if self.label not in LABELS:
            raise ManifestError(f"unknown label {self.label!r} for {self.id}")
        if self.split not in SPLITS:
            raise ManifestError(f"unknown split {self.split!r} for {self.id}")

    @property
    def target(self) -> int:
        return LABEL_INDEX[self.label]


@dataclass(frozen=True)
class DatasetManifest:
    records: tuple[LabeledImage, ...]
    split_counts: Mapping[str, int] = field(init=False, compare=False)
    class_counts: Mapping[tuple[str, str], int] = field(init=False, compare=False)

    def __post_init__(self):
        records = tuple(self.records)
        object.__setattr__(self, "records", records)
        seen = set()
        for rec in records:
            if rec.id in seen:
                raise ManifestError(f"duplicate id {rec.id!r}")
            seen.add(rec.id)
        splits = Counter(r.split for r in records)
        classes = Counter((r.split, r.label) for r in records)
        object.__setattr__(self, "split_counts", {s: splits.get(s, 0) for s in SPLITS})
        object.__setattr__(
            self,
            "class_counts",
            {(s, lab): classes.get((s, lab), 0) for s in SPLITS for lab in LABELS},
        )

    def __len__(self) -> int:
        return len(self.records)

    def split(self, name: str) -> list[LabeledImage]:
        return [r for r in self.records if r.split == name]

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.records]

    def assignment(self) -> dict[str, str]:
        return {r.id: r.split for r in self.records}


@dataclass(frozen=True)
class SplitSpec:
    val_fraction_of_train: float = 0.10
    seed: int = 0
    stratified: bool = True

    def __post_init__(self):
        if not 0.0 < self.val_fraction_of_train < 1.0:
            raise ManifestError("val_fraction_of_train must lie in (0, 1)")


def _default_id(rel_path: str) -> str:
    p = Path(rel_path)
    return p.with_suffix("").as_posix()


def load_manifest(manifest_file, root=None, validate_images: bool = False) -> DatasetManifest:
    """Read a ``path,label,split`` CSV (an optional ``id`` column is honoured).

    Relative paths are resolved against ``root`` (default: the manifest's directory).
    Only ``train`` and ``test`` are accepted in the file; validation records are
    carved out later by :func:`derive_validation_split`.
    """
    manifest_file = Path(manifest_file)
    if not manifest_file.is_file():
        raise ManifestError(f"manifest not found: {manifest_file}")
    root = Path(root) if root is not None else manifest_file.parent

    records = []
    with manifest_file.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = {"path", "label", "split"} - set(header)
        if missing:
            raise ManifestError(f"manifest header lacks columns: {sorted(missing)}")
        for rowno, row in enumerate(reader, start=2):
            path = (row.get("path") or "").strip()
            label = (row.get("label") or "").strip()
            split = (row.get("split") or "").strip()
            if not path or not label or not split:
                raise ManifestError(f"row {rowno}: empty path/label/split")
            if label not in LABELS:
                raise ManifestError(f"row {rowno}: unknown label {label!r}")
            if split not in ("train", "test"):
                raise ManifestError(f"row {rowno}: unknown split {split!r}")
            rec_id = (row.get("id") or "").strip() or _default_id(path)
            full = Path(path) if Path(path).is_absolute() else root / path
            if validate_images:
                _check_image(full, rowno)
            records.append(LabeledImage(rec_id, full, label, split))

    if not records:
        raise ManifestError("no records")
    return DatasetManifest(tuple(records))


def _check_image(path: Path, rowno: int) -> None:
    from PIL import Image

    try:
        with Image.open(path) as im:
            im.convert("RGB").load()
    except Exception as exc:
        raise ManifestError(f"row {rowno}: unreadable image {path}: {exc}") from exc


def write_manifest(manifest: DatasetManifest, out_file, root=None) -> None:
    out_file = Path(out_file)
    rows = []
    for r in manifest.records:
        p = r.path
        if root is not None:
            try:
                p = p.relative_to(root)
            except ValueError:
                pass
        rows.append({"id": r.id, "path": p.as_posix(), "label": r.label,
                     "split": "train" if r.split == "val" else r.split})
    with atomic_write(out_file) as fh:
        writer = csv.DictWriter(fh, fieldnames=["id", "path", "label", "split"])
        writer.writeheader()
        writer.writerows(rows)


def round_half_up(x: float) -> int:
    return int(Decimal(repr(x)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def _stratified_allocation(class_sizes: dict[str, int], n_val: int) -> dict[str, int]:
    # largest-remainder apportionment; keeps every class within one record of proportional
    total = sum(class_sizes.values())
    quotas = {c: n_val * n / total for c, n in class_sizes.items()}
    alloc = {c: int(np.floor(q)) for c, q in quotas.items()}
    leftover = n_val - sum(alloc.values())
    order = sorted(class_sizes, key=lambda c: (-(quotas[c] - alloc[c]), LABELS.index(c)))
    for c in order[:leftover]:
        alloc[c] += 1
    return alloc


def derive_validation_split(manifest: DatasetManifest, spec: SplitSpec = SplitSpec()) -> DatasetManifest:
    train = manifest.split("train")
    if not train:
        raise ManifestError("train split is empty")
    if manifest.split_counts["val"]:
        raise ManifestError("val split already populated")

    n_val = round_half_up(spec.val_fraction_of_train * len(train))
    rng = np.random.default_rng(spec.seed)
    by_class = {lab: sorted((r for r in train if r.label == lab), key=lambda r: r.id)
                for lab in LABELS}
    by_class = {lab: recs for lab, recs in by_class.items() if recs}

    chosen: set[str] = set()
    if spec.stratified:
        alloc = _stratified_allocation({c: len(v) for c, v in by_class.items()}, n_val)
        for lab, recs in by_class.items():
            k = alloc[lab]
            if k < 1 or k >= len(recs):
                raise ManifestError(
                    f"train split too small to reserve validation records for class {lab!r} "
                    f"({len(recs)} available, {k} allocated)"
                )
            idx = rng.permutation(len(recs))[:k]
            chosen.update(recs[i].id for i in idx)
    else:
        if n_val < 1 or n_val >= len(train):
            raise ManifestError("train split too small for the requested validation fraction")
        pool = sorted(train, key=lambda r: r.id)
        idx = rng.permutation(len(pool))[:n_val]
        chosen.update(pool[i].id for i in idx)

    records = tuple(replace(r, split="val") if r.id in chosen else r for r in manifest.records)
    return DatasetManifest(records)


def no_skill_baseline(manifest: DatasetManifest) -> float:
    """Test accuracy of always predicting the train-split majority class.

    Ties in the train split go to ``fake``.
    """
    train, test = manifest.split("train"), manifest.split("test")
    if not train or not test:
        raise ManifestError("no_skill_baseline needs nonempty train and test splits")
    counts = Counter(r.label for r in train)
    majority = "fake" if counts["fake"] >= counts["real"] else "real"
    return sum(r.label == majority for r in test) / len(test)


# -- persisted split assignment -------------------------------------------------

def save_splits(manifest: DatasetManifest, path) -> str:
    """Write ``splits.json`` (id -> split) and return its content hash."""
    payload = json.dumps(manifest.assignment(), sort_keys=True, indent=1)
    with atomic_write(Path(path)) as fh:
        fh.write(payload)
    return hashlib.sha256(payload.encode()).hexdigest()


def load_splits(path) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def splits_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def apply_splits(manifest: DatasetManifest, assignment: Mapping[str, str]) -> DatasetManifest:
    if set(assignment) != set(manifest.ids):
        raise ManifestError("splits file does not cover exactly the manifest ids")
    return DatasetManifest(tuple(replace(r, split=assignment[r.id]) for r in manifest.records))


def manifest_to_rows(manifest: DatasetManifest) -> list[dict]:
    return [{"id": r.id, "path": str(r.path), "label": r.label, "split": r.split}
            for r in manifest.records]


def manifest_from_rows(rows: Iterable[Mapping]) -> DatasetManifest:
    return DatasetManifest(tuple(
        LabeledImage(r["id"], Path(r["path"]), r["label"], r["split"]) for r in rows))


class atomic_write:
    """Context manager writing text to a temp file and renaming it into place."""

    def __init__(self, path: Path, mode: str = "w"):
        self.path = Path(path)
        self.mode = mode

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        fd, self.tmp = tempfile.mkstemp(dir=self.path.parent, prefix=f".{self.path.name}.")
        kwargs = {} if "b" in self.mode else {"encoding": "utf-8", "newline": ""}
        self.fh = os.fdopen(fd, self.mode, **kwargs)
        return self.fh

    def __exit__(self, exc_type, exc, tb):
        self.fh.close()
        if exc_type is None:
            os.replace(self.tmp, self.path)
        else:
            os.unlink(self.tmp)
        return False
