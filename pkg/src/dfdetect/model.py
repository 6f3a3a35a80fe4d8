"""Detector construction: a vision backbone feeding dropout and a two-way linear head.

Random and CLIP initializations use the CLIP-family image encoders (open_clip
architectures); ImageNet initialization uses the torchvision checkpoint of the
same architecture.  Class order is fixed: logit 0 = real, logit 1 = fake.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .preprocess import NormalizationStats, normalization_for_init

log = logging.getLogger(__name__)

ARCHS = ("resnet50", "vit_b32", "convnext_base")
INITS = ("random", "imagenet", "clip")
CHECKPOINT_FORMAT = "dfdetect-detector/1"

OPENCLIP_NAMES = {"resnet50": "RN50", "vit_b32": "ViT-B-32", "convnext_base": "convnext_base"}
# LAION-400M ConvNeXt checkpoint; OpenAI weights for the other two
CLIP_PRETRAINED = {"resnet50": "openai", "vit_b32": "openai", "convnext_base": "laion400m_s13b_b51k"}
TORCHVISION_WEIGHTS = {
    "resnet50": ("resnet50", "ResNet50_Weights", "IMAGENET1K_V1"),
    "vit_b32": ("vit_b_32", "ViT_B_32_Weights", "IMAGENET1K_V1"),
    "convnext_base": ("convnext_base", "ConvNeXt_Base_Weights", "IMAGENET1K_V1"),
}

# GradCAM target layer per (backbone family, arch): (module path, activation layout)
CAM_LAYERS = {
    ("open_clip", "resnet50"): ("layer4", "nchw"),
    ("open_clip", "vit_b32"): ("transformer.resblocks.11.ln_1", "tokens"),
    ("open_clip", "convnext_base"): ("trunk.stages.3", "nchw"),
    ("torchvision", "resnet50"): ("layer4", "nchw"),
    ("torchvision", "vit_b32"): ("encoder.layers.encoder_layer_11.ln_1", "tokens"),
    ("torchvision", "convnext_base"): ("features.7", "nchw"),
}


class WeightsUnavailable(RuntimeError):
    """A pretrained weight artifact could not be found, fetched or loaded."""


@dataclass(frozen=True)
class DetectorConfig:
    arch: str
    init: str
    freeze_backbone: bool = False
    dropout_rate: float = 0.2
    image_size: int = 256
    head_seed: int = 0
    weights_path: str | None = None

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown architecture {self.arch!r}; choose from {ARCHS}")
        if self.init not in INITS:
            raise ValueError(f"unknown init {self.init!r}; choose from {INITS}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.arch == "vit_b32" and self.image_size % 32:
            raise ValueError("vit_b32 needs an image size divisible by 32")

    @property
    def family(self) -> str:
        return "torchvision" if self.init == "imagenet" else "open_clip"

    @property
    def normalization(self) -> NormalizationStats:
        return normalization_for_init(self.init)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        return cls(**d)


class ParameterCounts(NamedTuple):
    total: int
    trainable: int


class Detector(nn.Module):
    """Backbone -> dropout -> Linear(D, 2)."""

    def __init__(self, backbone: nn.Module, feature_dim: int, config: DetectorConfig | None = None,
                 *, dropout_rate: float | None = None, cam_layer: str | None = None,
                 cam_layout: str = "nchw", family: str = "custom", head_seed: int = 0):
        super().__init__()
        self.backbone = backbone
        self.feature_dim = feature_dim
        self.config = config
        rate = dropout_rate if dropout_rate is not None else (config.dropout_rate if config else 0.0)
        self.dropout = nn.Dropout(rate)
        self.head = nn.Linear(feature_dim, 2)
        self.family = family
        self.cam_layer = cam_layer
        self.cam_layout = cam_layout
        self.frozen = False
        self.weights_source: str | None = None
        self.weights_fingerprint: str | None = None
        gen = torch.Generator().manual_seed(head_seed)
        with torch.no_grad():
            self.head.weight.copy_(torch.randn(self.head.weight.shape, generator=gen) * 0.01)
            self.head.bias.zero_()

    def freeze_backbone(self, freeze: bool = True) -> None:
        self.frozen = freeze
        for p in self.backbone.parameters():
            p.requires_grad = not freeze
        if freeze:
            self.backbone.eval()

    def train(self, mode: bool = True):
        super().train(mode)
        if self.frozen:
            # frozen backbones keep their normalization statistics fixed
            self.backbone.eval()
        return self

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.dropout(self.features(x)))

    @property
    def input_size(self) -> int | None:
        return self.config.image_size if self.config else None

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.requires_grad]


# -- backbones -------------------------------------------------------------------

def _import_open_clip():
    import open_clip

    return open_clip


def resample_grid_embedding(pe: torch.Tensor, new_tokens: int) -> torch.Tensor:
    """Bilinearly resample a (1 + g*g, C) positional table (optionally with a leading batch dim)."""
    lead = pe.ndim == 3
    table = pe[0] if lead else pe
    cls_tok, grid = table[:1], table[1:]
    old_g, new_g = int(math.isqrt(grid.shape[0])), int(math.isqrt(new_tokens - 1))
    if old_g * old_g != grid.shape[0] or new_g * new_g != new_tokens - 1:
        raise ValueError("positional table is not a square grid plus one token")
    grid = grid.reshape(1, old_g, old_g, -1).permute(0, 3, 1, 2)
    grid = F.interpolate(grid.float(), size=(new_g, new_g), mode="bilinear", align_corners=False)
    grid = grid.permute(0, 2, 3, 1).reshape(new_g * new_g, -1).to(table.dtype)
    out = torch.cat([cls_tok, grid], dim=0)
    return out.unsqueeze(0) if lead else out


def load_resampled(module: nn.Module, state: dict) -> None:
    own = module.state_dict()
    fixed = {}
    for key, value in state.items():
        if key in own and own[key].shape != value.shape and "pos" in key and "embed" in key:
            target = own[key].shape
            value = resample_grid_embedding(value, target[-2])
        fixed[key] = value
    missing, unexpected = module.load_state_dict(fixed, strict=False)
    if missing or unexpected:
        raise WeightsUnavailable(
            f"weight artifact does not match backbone: missing={missing[:5]} unexpected={unexpected[:5]}"
        )


def _clip_backbone(cfg: DetectorConfig, load_weights: bool) -> tuple[nn.Module, int]:
    open_clip = _import_open_clip()
    name = OPENCLIP_NAMES[cfg.arch]
    # open_clip warns whenever a model is built without pretrained weights
    logging.disable(logging.WARNING)
    try:
        visual = open_clip.create_model(name, pretrained=None, force_image_size=cfg.image_size).visual
    finally:
        logging.disable(logging.NOTSET)
    dim = open_clip.get_model_config(name)["embed_dim"]
    if cfg.init == "clip" and load_weights:
        state = _clip_state(cfg)
        load_resampled(visual, state)
    return visual, dim


def _clip_state(cfg: DetectorConfig) -> dict:
    if cfg.weights_path:
        path = Path(cfg.weights_path)
        if not path.is_file():
            raise WeightsUnavailable(f"CLIP weight file not found: {path}")
        try:
            state = torch.load(path, map_location="cpu", weights_only=False)
        except Exception as exc:
            raise WeightsUnavailable(f"corrupt CLIP weight file {path}: {exc}") from exc
        if isinstance(state, dict) and "state_dict" in state:
            state = state["state_dict"]
        if not isinstance(state, dict):
            if hasattr(state, "visual"):
                return state.visual.state_dict()
            raise WeightsUnavailable(f"unrecognized CLIP weight file {path}")
        if any(k.startswith("visual.") for k in state):
            state = {k[len("visual."):]: v for k, v in state.items() if k.startswith("visual.")}
        return state
    open_clip = _import_open_clip()
    tag = CLIP_PRETRAINED[cfg.arch]
    try:
        model = open_clip.create_model(OPENCLIP_NAMES[cfg.arch], pretrained=tag)
    except Exception as exc:
        raise WeightsUnavailable(
            f"could not fetch CLIP weights {OPENCLIP_NAMES[cfg.arch]}/{tag}: {exc}. "
            "Pass weights_path to a local checkpoint."
        ) from exc
    return model.visual.state_dict()


def _torchvision_backbone(cfg: DetectorConfig, load_weights: bool) -> tuple[nn.Module, int]:
    import torchvision.models as tvm

    fn_name, enum_name, member = TORCHVISION_WEIGHTS[cfg.arch]
    kwargs = {"image_size": cfg.image_size} if cfg.arch == "vit_b32" else {}
    net = getattr(tvm, fn_name)(weights=None, **kwargs)
    if load_weights:
        state = _imagenet_state(cfg, getattr(getattr(tvm, enum_name), member))
        load_resampled(net, state)
    if cfg.arch == "resnet50":
        dim = net.fc.in_features
        net.fc = nn.Identity()
    elif cfg.arch == "vit_b32":
        dim = net.hidden_dim
        net.heads = nn.Identity()
    else:
        dim = net.classifier[2].in_features
        net.classifier[2] = nn.Identity()
    return net, dim


def _imagenet_state(cfg: DetectorConfig, weights) -> dict:
    if cfg.weights_path:
        path = Path(cfg.weights_path)
        if not path.is_file():
            raise WeightsUnavailable(f"ImageNet weight file not found: {path}")
        try:
            return torch.load(path, map_location="cpu", weights_only=True)
        except Exception as exc:
            raise WeightsUnavailable(f"corrupt ImageNet weight file {path}: {exc}") from exc
    try:
        return weights.get_state_dict(progress=False)
    except Exception as exc:
        raise WeightsUnavailable(
            f"could not fetch ImageNet weights {weights.url}: {exc}. Pass weights_path to a local copy."
        ) from exc


def build_detector(config: DetectorConfig, load_weights: bool = True) -> Detector:
    """Instantiate a detector.  ``load_weights=False`` builds the architecture only
    (used for profiling and for restoring from a checkpoint)."""
    # seeded so that random-init backbones are reproducible without touching the global stream
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(config.head_seed)
        if config.family == "torchvision":
            backbone, dim = _torchvision_backbone(config, load_weights)
        else:
            backbone, dim = _clip_backbone(config, load_weights)
    layer, layout = CAM_LAYERS[(config.family, config.arch)]
    det = Detector(backbone, dim, config, cam_layer=layer, cam_layout=layout,
                   family=config.family, head_seed=config.head_seed)
    if load_weights and config.init != "random":
        # provenance of the pretrained weights, recorded in run metadata
        if config.weights_path:
            det.weights_source = str(config.weights_path)
        elif config.family == "torchvision":
            _, enum_name, tag = TORCHVISION_WEIGHTS[config.arch]
            det.weights_source = f"torchvision:{enum_name}.{tag}"
        else:
            det.weights_source = f"open_clip:{OPENCLIP_NAMES[config.arch]}/{CLIP_PRETRAINED[config.arch]}"
        det.weights_fingerprint = state_fingerprint(backbone)
    if config.freeze_backbone:
        det.freeze_backbone(True)
    return det


def forward(detector: nn.Module, batch: torch.Tensor, training_mode: bool = False) -> torch.Tensor:
    if batch.ndim != 4 or batch.shape[1] != 3:
        raise ValueError(f"expected a [N, 3, S, S] batch, got {tuple(batch.shape)}")
    size = getattr(detector, "input_size", None)
    if size is not None and tuple(batch.shape[-2:]) != (size, size):
        raise ValueError(f"detector expects {size}x{size} inputs, got {tuple(batch.shape[-2:])}")
    detector.train(training_mode)
    if training_mode:
        return detector(batch)
    with torch.no_grad():
        return detector(batch)


def scores_from_logits(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits.double(), dim=-1)[..., 1]


def predict_scores(detector: nn.Module, batch: torch.Tensor) -> torch.Tensor:
    """Fake-class probability for each image in ``batch``."""
    return scores_from_logits(forward(detector, batch, training_mode=False))


def parameter_counts(detector: nn.Module) -> ParameterCounts:
    total = sum(p.numel() for p in detector.parameters())
    trainable = sum(p.numel() for p in detector.parameters() if p.requires_grad)
    return ParameterCounts(total, trainable)


def save_detector(detector: Detector, path) -> None:
    from .data import atomic_write

    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": detector.config.to_dict(),
        "normalization": detector.config.normalization.source,
        "backbone": detector.backbone.state_dict(),
        "head": detector.head.state_dict(),
    }
    with atomic_write(Path(path), "wb") as fh:
        torch.save(payload, fh)


def load_detector(path) -> Detector:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise ValueError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} checkpoint")
    det = build_detector(DetectorConfig.from_dict(payload["config"]), load_weights=False)
    det.backbone.load_state_dict(payload["backbone"])
    det.head.load_state_dict(payload["head"])
    return det


def state_fingerprint(module: nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]
