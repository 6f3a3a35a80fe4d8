"""Parameter counts, analytic FLOP counts and batch-1 latency.

FLOPs are counted from multiply-accumulates (MACs) of convolutions, affine
layers and attention matmuls; one MAC is two floating-point operations, so
``gflops = 2 * MACs / 1e9``.  Normalization, activation, pooling and residual
additions are elementwise and contribute no MACs.
"""

from __future__ import annotations

import json
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import torch
import torch.nn as nn

from .model import build_detector, parameter_counts

FLOPS_PER_MAC = 2
CONVENTION = "gflops = 2 * multiply-accumulates / 1e9 (conv, linear, attention matmuls; elementwise ops excluded)"


class UnsupportedLayer(TypeError):
    pass


def _conv_macs(m: nn.Conv2d | nn.Conv1d, inputs, out) -> int:
    per_out = (m.in_channels // m.groups) * int(torch.tensor(m.kernel_size).prod())
    return out.numel() // out.shape[0] * per_out


def _linear_macs(m: nn.Linear, inputs, out) -> int:
    return out.numel() // out.shape[0] * m.in_features


def _mha_shapes(q, k, batch_first):
    # tokens along dim 1 when batch-first, dim 0 otherwise; unbatched inputs are 2-D
    if q.ndim == 2:
        return q.shape[0], k.shape[0]
    return (q.shape[1], k.shape[1]) if batch_first else (q.shape[0], k.shape[0])


def _mha_macs(m: nn.MultiheadAttention, inputs, out) -> int:
    q, k = inputs[0], inputs[1] if len(inputs) > 1 else inputs[0]
    lq, lk = _mha_shapes(q, k, m.batch_first)
    e, kd, vd = m.embed_dim, m.kdim, m.vdim
    proj = lq * e * e + lk * kd * e + lk * vd * e
    attn = lq * lk * e * 2  # scores and weighted sum
    return proj + attn + lq * e * e


def _attnpool_macs(m, inputs, out) -> int:
    x = inputs[0]
    tokens = x.shape[2] * x.shape[3] + 1
    e = m.q_proj.in_features
    return 3 * tokens * e * e + 2 * tokens * tokens * e + tokens * e * m.c_proj.out_features


def _openclip_vit_own(m, inputs, out) -> int:
    # pooled-token projection ``pooled @ proj``; embeddings are additions
    if getattr(m, "proj", None) is None:
        return 0
    return out.numel() // out.shape[0] * m.proj.shape[0]


def _zero(*_):
    return 0


# counters for leaf or self-contained modules; keys are classes or class names
COUNTERS = {
    nn.Conv1d: _conv_macs,
    nn.Conv2d: _conv_macs,
    nn.Linear: _linear_macs,
    nn.MultiheadAttention: _mha_macs,
    "AttentionPool2d": _attnpool_macs,
}
# modules whose counter already covers their children
OPAQUE = (nn.MultiheadAttention, "AttentionPool2d")
# modules holding direct parameters used only elementwise, or doing extra work of their own
OWN_WORK = {
    "VisionTransformer": _openclip_vit_own,  # open_clip and torchvision share the class name
    "Encoder": _zero,
    "ConvNeXtBlock": _zero,
    "CNBlock": _zero,
}
ELEMENTWISE = (
    nn.BatchNorm1d, nn.BatchNorm2d, nn.LayerNorm, nn.GroupNorm,
    nn.ReLU, nn.GELU, nn.SiLU, nn.Sigmoid, nn.Tanh, nn.Softmax,
    nn.Dropout, nn.Identity, nn.Flatten,
    nn.AvgPool2d, nn.MaxPool2d, nn.AdaptiveAvgPool2d, nn.AdaptiveMaxPool2d,
)
ELEMENTWISE_NAMES = {
    "LayerNorm2d", "LayerNormFp32", "LayerNorm", "DropPath", "StochasticDepth", "LayerScale",
    "Permute", "SelectAdaptivePool2d", "QuickGELU", "GELU", "GELUTanh", "Flatten",
}


def _lookup(table, module):
    for key, fn in table.items():
        if (isinstance(key, type) and isinstance(module, key)) or type(module).__name__ == key:
            return fn
    return None


def _is_opaque(module) -> bool:
    return any((isinstance(k, type) and isinstance(module, k)) or type(module).__name__ == k
               for k in OPAQUE)


@dataclass
class FlopReport:
    macs: int
    gflops: float
    input_size: int
    convention: str = CONVENTION
    per_layer: dict = field(default_factory=dict)


def _plan(model: nn.Module):
    """Assign a counter to every module that does work; reject anything unknown."""
    plan, unsupported, skip = [], [], set()
    for name, module in model.named_modules():
        if any(name.startswith(p + ".") for p in skip):
            continue
        fn = _lookup(COUNTERS, module)
        if fn is not None:
            plan.append((name, module, fn))
            if _is_opaque(module):
                skip.add(name)
            continue
        own_params = list(module.parameters(recurse=False))
        has_children = any(True for _ in module.children())
        if isinstance(module, ELEMENTWISE) or type(module).__name__ in ELEMENTWISE_NAMES:
            continue
        own = OWN_WORK.get(type(module).__name__)
        if own is not None:
            plan.append((name, module, own))
            continue
        if not has_children or own_params:
            unsupported.append(f"{name or '<root>'} ({type(module).__name__})")
    if unsupported:
        raise UnsupportedLayer("no FLOP counter registered for: " + ", ".join(unsupported))
    return plan


def count_flops(model: nn.Module, input_size: int = 256) -> FlopReport:
    """Analytic MAC count for one 3 x S x S image."""
    plan = _plan(model)
    counts: dict[str, int] = {}
    handles = []
    for name, module, fn in plan:
        def hook(mod, inputs, out, _name=name, _fn=fn):
            if isinstance(out, tuple):
                out = out[0]
            counts[_name] = counts.get(_name, 0) + int(_fn(mod, inputs, out))
        handles.append(module.register_forward_hook(hook))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(torch.zeros(1, 3, input_size, input_size))
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    macs = sum(counts.values())
    return FlopReport(macs=macs, gflops=FLOPS_PER_MAC * macs / 1e9, input_size=input_size,
                      per_layer=counts)


def hardware_descriptor(device: str | torch.device = "cpu") -> str:
    device = torch.device(device)
    if device.type == "cuda":
        return f"cuda:{torch.cuda.get_device_name(device)}"
    return f"cpu:{platform.processor() or platform.machine()} threads={torch.get_num_threads()}"


def _sync(device: torch.device) -> None:
    if device.type == "cuda":
        torch.cuda.synchronize(device)


def measure_latency(model: nn.Module, n_runs: int = 50, n_warmup: int = 5, input_size: int = 256,
                    device: str | torch.device = "cpu") -> tuple[float, float]:
    """Mean and standard deviation (ms) of a batch-1 forward, preprocessing excluded."""
    if n_runs < 10 or n_warmup < 3:
        raise ValueError("need n_runs >= 10 and n_warmup >= 3")
    device = torch.device(device)
    model = model.to(device).eval()
    x = torch.randn(1, 3, input_size, input_size, device=device)
    times = []
    with torch.no_grad():
        for i in range(n_warmup + n_runs):
            _sync(device)
            t0 = time.perf_counter()
            model(x)
            _sync(device)
            if i >= n_warmup:
                times.append((time.perf_counter() - t0) * 1e3)
    return statistics.fmean(times), statistics.pstdev(times)


@dataclass
class ProfileReport:
    arch: str
    params_millions: float
    trainable_params_millions: float
    gflops: float
    flop_input_size: int
    latency_ms_mean: float | None
    latency_ms_std: float | None
    batch_size: int = 1
    hardware: str = ""
    n_runs: int = 0
    n_warmup: int = 0
    init: str = ""
    convention: str = CONVENTION
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


# published CLIP-encoder references (224 px inputs) used to itemize mismatches
REFERENCE = {
    "resnet50": {"params_millions": 38.32, "gflops": 12.22},
    "vit_b32": {"params_millions": 87.85, "gflops": 8.82},
    "convnext_base": {"params_millions": 88.09, "gflops": 30.71},
}


def profile_detector(detector, flop_input_size: int | None = None, n_runs: int = 20, n_warmup: int = 3,
                     measure: bool = True, device: str = "cpu") -> ProfileReport:
    cfg = detector.config
    size = flop_input_size or cfg.image_size
    total, trainable = parameter_counts(detector)
    counted = detector
    if size != cfg.image_size:
        # position embeddings fix the input grid; FLOPs depend on shapes only, so count on a twin
        counted = build_detector(replace(cfg, image_size=size, weights_path=None), load_weights=False)
    flops = count_flops(counted, size)
    mean = std = None
    if measure:
        mean, std = measure_latency(detector, n_runs, n_warmup, cfg.image_size, device)
    report = ProfileReport(
        arch=cfg.arch, init=cfg.init, params_millions=total / 1e6,
        trainable_params_millions=trainable / 1e6, gflops=flops.gflops, flop_input_size=size,
        latency_ms_mean=mean, latency_ms_std=std, hardware=hardware_descriptor(device),
        n_runs=n_runs if measure else 0, n_warmup=n_warmup if measure else 0,
    )
    ref = REFERENCE[cfg.arch]
    for key in ("params_millions", "gflops"):
        ours = getattr(report, key)
        rel = (ours - ref[key]) / ref[key]
        if abs(rel) > 0.02:
            report.notes.append(f"{key}: {ours:.2f} vs CLIP-encoder reference {ref[key]:.2f} "
                                f"({rel:+.1%}; backbone family {detector.family}, input {size}px)")
    return report


def write_profile(report: ProfileReport, path) -> None:
    from .data import atomic_write

    with atomic_write(Path(path)) as fh:
        json.dump(report.to_dict(), fh, indent=2)


def format_table(reports) -> str:
    head = f"{'Model':<15} {'Params (M)':>11} {'GFLOPs':>8} {'Latency (ms)':>14}"
    lines = [head, "-" * len(head)]
    for r in reports:
        lat = f"{r.latency_ms_mean:.2f}" if r.latency_ms_mean is not None else "—"
        lines.append(f"{r.arch:<15} {r.params_millions:>11.2f} {r.gflops:>8.2f} {lat:>14}")
    return "\n".join(lines)
