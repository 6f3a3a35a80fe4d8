"""Image caching, crop augmentation and backbone normalization."""

from __future__ import annotations

import json
import os
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torchvision.transforms.functional as TF
from PIL import Image
from torchvision.transforms import InterpolationMode

INTERPOLATION = "bilinear(antialias=True, align_corners=False)"


@dataclass(frozen=True)
class NormalizationStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    source: str

    def __post_init__(self):
        if self.source not in ("imagenet", "clip"):
            raise ValueError(f"unknown normalization source {self.source!r}")
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValueError("mean and std need three channels")
        if any(s <= 0 for s in self.std):
            raise ValueError("std components must be positive")
        if any(not 0.0 <= m <= 1.0 for m in self.mean):
            raise ValueError("mean components must lie in [0, 1]")

    @classmethod
    def for_source(cls, source: str) -> "NormalizationStats":
        return NORMALIZATION[source]


NORMALIZATION = {
    "imagenet": NormalizationStats((0.485, 0.456, 0.406), (0.229, 0.224, 0.225), "imagenet"),
    "clip": NormalizationStats(
        (0.48145466, 0.4578275, 0.40821073), (0.26862954, 0.26130258, 0.27577711), "clip"
    ),
}


def normalization_for_init(init: str) -> NormalizationStats:
    # randomly initialized backbones fall back to ImageNet statistics
    return NORMALIZATION["clip" if init == "clip" else "imagenet"]


@dataclass(frozen=True)
class PreprocessConfig:
    cache_short_side: int = 384
    train_crop_fraction_range: tuple[float, float] = (0.5, 1.0)
    train_side: int = 256
    eval_side: int = 256
    normalization: NormalizationStats = field(default_factory=lambda: NORMALIZATION["imagenet"])
    crop_mode: str = "side"  # "side": crop side = u * short side; "area": crop area = u * short side**2

    def __post_init__(self):
        lo, hi = self.train_crop_fraction_range
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError("train_crop_fraction_range must satisfy 0 < low <= high <= 1")
        if min(self.cache_short_side, self.train_side, self.eval_side) <= 0:
            raise ValueError("pixel sizes must be positive")
        if self.crop_mode not in ("side", "area"):
            raise ValueError(f"unknown crop_mode {self.crop_mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train_crop_fraction_range"] = list(self.train_crop_fraction_range)
        d["normalization"] = self.normalization.source
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PreprocessConfig":
        d = dict(d)
        if "normalization" in d and isinstance(d["normalization"], str):
            d["normalization"] = NORMALIZATION[d["normalization"]]
        if "train_crop_fraction_range" in d:
            d["train_crop_fraction_range"] = tuple(d["train_crop_fraction_range"])
        return cls(**d)


def to_tensor(image) -> torch.Tensor:
    """Return a float32 CHW tensor in [0, 1] from a PIL image, uint8 tensor or float tensor."""
    if isinstance(image, Image.Image):
        arr = np.asarray(image.convert("RGB"), dtype=np.uint8)
        return torch.from_numpy(arr.copy()).permute(2, 0, 1).float().div_(255.0)
    if isinstance(image, np.ndarray):
        image = torch.from_numpy(image.copy())
        if image.ndim == 3 and image.shape[-1] == 3:
            image = image.permute(2, 0, 1)
    if not isinstance(image, torch.Tensor) or image.ndim != 3 or image.shape[0] != 3:
        raise ValueError("expected an RGB image")
    if image.dtype == torch.uint8:
        return image.float().div_(255.0)
    return image.float()


def load_image(path) -> Image.Image:
    try:
        with Image.open(path) as im:
            return im.convert("RGB")
    except Exception as exc:
        raise ValueError(f"undecodable image {path}: {exc}") from exc


def _size(image) -> tuple[int, int]:
    """(height, width)"""
    if isinstance(image, Image.Image):
        return image.height, image.width
    t = image if isinstance(image, torch.Tensor) else torch.as_tensor(image)
    return int(t.shape[-2]), int(t.shape[-1])


def _resize(t: torch.Tensor, size) -> torch.Tensor:
    return TF.resize(t, size, interpolation=InterpolationMode.BILINEAR, antialias=True)


def cache_resize(image, cache_short_side: int = 384):
    """Downscale so the short side equals ``cache_short_side``; never upscales.

    PIL images come back as PIL images, tensors as tensors.
    """
    h, w = _size(image)
    if h <= 0 or w <= 0:
        raise ValueError("image has empty dimensions")
    short = min(h, w)
    if short <= cache_short_side:
        return image
    scale = cache_short_side / short
    new_h = cache_short_side if h == short else round(h * scale)
    new_w = cache_short_side if w == short else round(w * scale)
    if isinstance(image, Image.Image):
        return image.resize((new_w, new_h), Image.BILINEAR)
    return _resize(to_tensor(image), [new_h, new_w])


def normalize(t: torch.Tensor, stats: NormalizationStats) -> torch.Tensor:
    mean = torch.tensor(stats.mean, dtype=t.dtype).view(3, 1, 1)
    std = torch.tensor(stats.std, dtype=t.dtype).view(3, 1, 1)
    return (t - mean) / std


def denormalize(t: torch.Tensor, stats: NormalizationStats) -> torch.Tensor:
    mean = torch.tensor(stats.mean, dtype=t.dtype).view(3, 1, 1)
    std = torch.tensor(stats.std, dtype=t.dtype).view(3, 1, 1)
    return t * std + mean


def sample_crop(height: int, width: int, rng: np.random.Generator,
                cfg: PreprocessConfig) -> tuple[int, int, int]:
    """Draw a square crop ``(top, left, side)`` that always lies inside the image."""
    lo, hi = cfg.train_crop_fraction_range
    u = rng.uniform(lo, hi)
    short = min(height, width)
    frac = u if cfg.crop_mode == "side" else float(np.sqrt(u))
    side = int(min(short, max(1, round(frac * short))))
    top = int(rng.integers(0, height - side + 1))
    left = int(rng.integers(0, width - side + 1))
    return top, left, side


def train_transform(image, rng: np.random.Generator, cfg: PreprocessConfig) -> torch.Tensor:
    t = to_tensor(image)
    h, w = t.shape[-2:]
    if min(h, w) < 2:
        raise ValueError("image too small to crop")
    top, left, side = sample_crop(h, w, rng, cfg)
    t = t[:, top:top + side, left:left + side]
    t = _resize(t, [cfg.train_side, cfg.train_side])
    return normalize(t, cfg.normalization)


def eval_transform(image, cfg: PreprocessConfig) -> torch.Tensor:
    t = to_tensor(image)
    h, w = t.shape[-2:]
    side = cfg.eval_side
    if min(h, w) != side:
        scale = side / min(h, w)
        new_h = side if h <= w else round(h * scale)
        new_w = side if w < h else round(w * scale)
        t = _resize(t, [new_h, new_w])
    t = TF.center_crop(t, [side, side])
    return normalize(t, cfg.normalization)


# -- on-disk cache ---------------------------------------------------------------

def cache_filename(record_id: str, ext: str) -> str:
    return record_id.replace("/", "__").replace("\\", "__") + ext


def _cache_one(src: Path, dst: Path, cache_short_side: int) -> None:
    img = cache_resize(load_image(src), cache_short_side)
    fmt = {".jpg": "JPEG", ".jpeg": "JPEG"}.get(dst.suffix.lower(), "PNG")
    fd, tmp = tempfile.mkstemp(dir=dst.parent, prefix=f".{dst.name}.")
    os.close(fd)
    try:
        save_kwargs = {"quality": 95} if fmt == "JPEG" else {}
        img.save(tmp, format=fmt, **save_kwargs)
        os.replace(tmp, dst)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def build_cache(records, cache_root, cache_short_side: int = 384, workers: int = 1) -> dict[str, Path]:
    """Resize every record's image into ``cache_root`` and return id -> cached path.

    Existing cache entries are reused when ``cache_meta.json`` matches.
    """
    cache_root = Path(cache_root)
    cache_root.mkdir(parents=True, exist_ok=True)
    meta_path = cache_root / "cache_meta.json"
    meta = {"cache_short_side": cache_short_side, "interpolation": INTERPOLATION}
    if meta_path.exists():
        existing = json.loads(meta_path.read_text())
        if existing != meta:
            raise ValueError(f"cache at {cache_root} was built with {existing}, not {meta}")

    jobs = {}
    for rec in records:
        ext = Path(rec.path).suffix.lower() or ".png"
        dst = cache_root / cache_filename(rec.id, ext)
        jobs[rec.id] = (Path(rec.path), dst)

    todo = [(s, d) for s, d in jobs.values() if not d.exists()]
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        list(pool.map(lambda sd: _cache_one(sd[0], sd[1], cache_short_side), todo))

    fd, tmp = tempfile.mkstemp(dir=cache_root, prefix=".cache_meta.")
    with os.fdopen(fd, "w") as fh:
        json.dump(meta, fh, indent=2)
    os.replace(tmp, meta_path)
    return {rid: dst for rid, (_, dst) in jobs.items()}
