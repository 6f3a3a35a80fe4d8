"""Gradient-weighted class activation maps for the real/fake decision."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from PIL import Image

from .data import LABEL_INDEX, LABELS


class NoTargetLayer(LookupError):
    pass


@dataclass
class ActivationGrid:
    maps: torch.Tensor  # [K, h, w]
    layer_id: str


@dataclass
class Heatmap:
    grid: np.ndarray  # [h, w], max-normalized
    upsampled: np.ndarray  # [H, W], max-normalized
    raw: np.ndarray  # [h, w], ReLU output before normalization
    target_class: str
    zero_gradient: bool = False


def _tokens_to_grid(t: torch.Tensor) -> torch.Tensor:
    # [B, 1 + g*g, C] -> [B, C, g, g], class token dropped
    patches = t[:, 1:, :]
    g = int(round(patches.shape[1] ** 0.5))
    if g * g != patches.shape[1]:
        raise ValueError("token sequence is not a square patch grid plus a class token")
    return patches.transpose(1, 2).reshape(t.shape[0], t.shape[2], g, g)


def target_layer(detector) -> tuple[nn.Module, str, str]:
    name = getattr(detector, "cam_layer", None)
    if not name:
        raise NoTargetLayer(f"no GradCAM target layer registered for {type(detector).__name__}")
    modules = dict(detector.backbone.named_modules())
    if name not in modules:
        raise NoTargetLayer(f"target layer {name!r} not found in backbone")
    return modules[name], name, getattr(detector, "cam_layout", "nchw")


def activations_and_gradients(detector, image_tensor: torch.Tensor, target_class: str | int | None = None,
                              layer: nn.Module | None = None, layout: str | None = None):
    """Run one forward/backward pass.

    Returns ``(A, dA, logits, class_index)`` where ``A`` is the [K, h, w]
    activation of the target layer and ``dA`` the gradient of the target-class
    raw logit with respect to it.
    """
    if layer is None:
        layer, _, default_layout = target_layer(detector)
        layout = layout or default_layout
    layout = layout or "nchw"
    x = image_tensor if image_tensor.ndim == 4 else image_tensor.unsqueeze(0)
    if x.shape[0] != 1:
        raise ValueError("gradcam explains one image at a time")

    captured = {}

    def hook(_module, _inp, out):
        captured["out"] = out

    handle = layer.register_forward_hook(hook)
    was_training = detector.training
    detector.eval()
    try:
        with torch.enable_grad():
            logits = detector(x)
            if target_class is None:
                idx = int(logits[0].argmax())
            elif isinstance(target_class, str):
                idx = LABEL_INDEX[target_class]
            else:
                idx = int(target_class)
            out = captured["out"]
            if not out.requires_grad:
                grad = torch.zeros_like(out)
            else:
                (grad,) = torch.autograd.grad(logits[0, idx], out, allow_unused=True)
                if grad is None:
                    grad = torch.zeros_like(out)
    finally:
        handle.remove()
        detector.train(was_training)

    if layout == "tokens":
        out, grad = _tokens_to_grid(out), _tokens_to_grid(grad)
    return out[0].detach(), grad[0].detach(), logits.detach(), idx


def channel_weights(grad: torch.Tensor) -> torch.Tensor:
    return grad.mean(dim=(1, 2))


def combine(maps: torch.Tensor, alpha: torch.Tensor) -> torch.Tensor:
    return F.relu((alpha[:, None, None] * maps).sum(dim=0))


def _max_normalize(a: np.ndarray) -> np.ndarray:
    m = float(a.max()) if a.size else 0.0
    return a / m if m > 0 else np.zeros_like(a)


def gradcam(detector, image_tensor: torch.Tensor, target_class: str | int | None = None,
            layer: nn.Module | None = None, layout: str | None = None) -> Heatmap:
    """Heatmap for ``target_class`` (default: the predicted class)."""
    maps, grad, _, idx = activations_and_gradients(detector, image_tensor, target_class, layer, layout)
    alpha = channel_weights(grad)
    raw = combine(maps, alpha)
    zero = bool(torch.count_nonzero(grad) == 0) or float(raw.max()) == 0.0
    size = tuple(image_tensor.shape[-2:])
    up = F.interpolate(raw[None, None], size=size, mode="bilinear", align_corners=False)[0, 0]
    up = up.clamp_min(0)
    raw_np = raw.cpu().double().numpy()
    return Heatmap(
        grid=_max_normalize(raw_np),
        upsampled=_max_normalize(up.cpu().double().numpy()),
        raw=raw_np,
        target_class=LABELS[idx],
        zero_gradient=zero,
    )


def overlay(image, heatmap: Heatmap, colormap: str = "Blues", blend: float = 0.5) -> Image.Image:
    """Blend a colormapped heatmap over ``image``; per-pixel weight is ``blend * heat``."""
    from matplotlib import colormaps

    rgb = np.asarray(image.convert("RGB") if isinstance(image, Image.Image) else image, dtype=np.float64)
    if rgb.max() > 1.0:
        rgb = rgb / 255.0
    heat = np.asarray(heatmap.upsampled, dtype=np.float64)
    if heat.shape != rgb.shape[:2]:
        raise ValueError(f"heatmap size {heat.shape} does not match image size {rgb.shape[:2]}")
    colors = colormaps[colormap](heat)[..., :3]
    w = (blend * heat)[..., None]
    out = (1.0 - w) * rgb + w * colors
    return Image.fromarray(np.clip(np.rint(out * 255.0), 0, 255).astype(np.uint8))


def save_heatmap(heatmap: Heatmap, path) -> None:
    """Raw grid as a little-endian float32 ``.npy`` array (row-major)."""
    from .data import atomic_write

    with atomic_write(Path(path), "wb") as fh:
        np.save(fh, heatmap.raw.astype("<f4"), allow_pickle=False)
