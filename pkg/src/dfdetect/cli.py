"""Command-line entry point: prepare, train, sweep, evaluate, gradcam, profile, report.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import config as C
from .data import (ManifestError, apply_splits, atomic_write, derive_validation_split, load_manifest,
                   load_splits, no_skill_baseline, save_splits)

log = logging.getLogger("dfdetect")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _echo(out_dir: Path, command: str, resolved: dict, extra: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    with atomic_write(out_dir / f"resolved_config.{command}.json") as fh:
        json.dump({"command": command, **resolved, **(extra or {})}, fh, indent=2, default=str)


def _resolved(args, sections) -> dict:
    file_data = C.read_config_file(args.config) if args.config else {}
    # a shared config file may carry sections this command does not use
    file_data = {k: v for k, v in file_data.items() if k in sections or k not in C.SCHEMA}
    return C.resolve(sections, file_data, args)


def _manifest(cfg: dict, validate_images: bool = False, cache: bool = True):
    paths = cfg["paths"]
    if not paths["manifest"]:
        raise C.ConfigError("a manifest is required ([paths] manifest / --paths-manifest)")
    manifest = load_manifest(paths["manifest"], paths["root"], validate_images=validate_images)
    if paths["splits"]:
        manifest = apply_splits(manifest, load_splits(paths["splits"]))
    else:
        manifest = derive_validation_split(manifest, C.split_spec(cfg))
    if cache and paths["cache_dir"]:
        from .preprocess import build_cache
        from .data import DatasetManifest

        cached = build_cache(manifest.records, paths["cache_dir"], cfg["preprocess"]["cache_short_side"])
        manifest = DatasetManifest(tuple(replace(r, path=cached[r.id]) for r in manifest.records))
    return manifest


# -- commands -----------------------------------------------------------------------

def cmd_prepare(args) -> int:
    from .preprocess import build_cache

    cfg = _resolved(args, ["paths", "split", "preprocess"])
    out = Path(args.out)
    _echo(out, "prepare", cfg)
    manifest = _manifest(cfg, validate_images=args.validate_images, cache=False)
    digest = save_splits(manifest, out / "splits.json")
    cache_dir = cfg["paths"]["cache_dir"] or str(out / "cache")
    build_cache(manifest.records, cache_dir, cfg["preprocess"]["cache_short_side"], workers=args.workers)
    summary = {
        "split_counts": manifest.split_counts,
        "class_counts": {f"{s}/{lab}": n for (s, lab), n in manifest.class_counts.items()},
        "no_skill_test_accuracy": no_skill_baseline(manifest),
        "splits_sha256": digest,
        "cache_dir": cache_dir,
    }
    with atomic_write(out / "prepare.json") as fh:
        json.dump(summary, fh, indent=2)
    print(json.dumps(summary, indent=2))
    return 0


def cmd_train(args) -> int:
    from .model import build_detector
    from .train import train

    cfg = _resolved(args, ["paths", "split", "preprocess", "detector", "train"])
    out = Path(args.out)
    _echo(out, "train", cfg)
    det_cfg = C.detector_config(cfg)
    pp = C.preprocess_config(cfg, det_cfg.init)
    tcfg = C.train_config(cfg)
    manifest = _manifest(cfg)
    result = train(build_detector(det_cfg), manifest, pp, tcfg, out)
    print(f"best epoch {result.best_epoch}  val acc {result.best_val_accuracy:.4f}  "
          f"stopped early {result.stopped_early}  -> {result.best_checkpoint}")
    return 0


def cmd_sweep(args) -> int:
    from .sweep import SweepGrid, emit_table, run_sweep

    cfg = _resolved(args, ["paths", "split", "preprocess", "detector", "train", "sweep"])
    out = Path(args.out)
    _echo(out, "sweep", cfg)
    sw = cfg["sweep"]
    t = cfg["train"]
    grid = SweepGrid(
        archs=tuple(sw["archs"]), inits=tuple(sw["inits"]), schedulers=tuple(sw["schedulers"]),
        lrs=tuple(sw["lrs"]), seeds=sw["seeds"],
        train=C.train_config(cfg, scheduler="step"),
        preprocess=C.preprocess_config(cfg, "imagenet"),
        detector={k: cfg["detector"][k] for k in ("freeze_backbone", "dropout_rate", "head_seed")},
        scheduler_params={
            "step": C.scheduler_params({**t, "scheduler": "step"}),
            "cosine": {k: v for k, v in C.scheduler_params({**t, "scheduler": "cosine"}).items()
                       if v is not None},
        },
    )
    manifest = _manifest(cfg)
    results = run_sweep(grid, manifest, out, resume=not args.no_resume)
    _, text = emit_table(results, out)
    print(text)
    failed = [r for r in results if r.status == "failed"]
    if failed:
        print(f"{len(failed)} of {len(results)} cells failed; see cell.json files", file=sys.stderr)
    return 0


def cmd_evaluate(args) -> int:
    from .metrics import bootstrap_ci, evaluate, write_predictions, write_report
    from .model import load_detector
    from .train import predict_records

    cfg = _resolved(args, ["paths", "split", "preprocess"])
    out = Path(args.out)
    _echo(out, "evaluate", cfg, {"checkpoint": args.checkpoint, "split": args.split,
                                 "threshold": args.threshold})
    detector = load_detector(args.checkpoint)
    cfg["preprocess"]["image_size"] = detector.config.image_size
    pp = C.preprocess_config(cfg, detector.config.init)
    manifest = _manifest(cfg)
    records = manifest.split(args.split)
    if not records:
        raise ManifestError(f"split {args.split!r} is empty")
    preds = predict_records(detector, records, pp, batch_size=args.batch_size, device=args.device)
    report = evaluate(preds, args.threshold)
    write_predictions(preds, out / "predictions.csv")
    write_report(report, out)
    if args.bootstrap:
        intervals = {}
        for metric in ("accuracy", "roc_auc", "average_precision"):
            try:
                intervals[metric] = bootstrap_ci(preds, metric, args.bootstrap, seed=0,
                                                 threshold=args.threshold)
            except ValueError:
                intervals[metric] = None
        with atomic_write(out / "bootstrap.json") as fh:
            json.dump(intervals, fh, indent=2)
    auc = "—" if report.roc_auc is None else f"{report.roc_auc:.4f}"
    ap = "—" if report.average_precision is None else f"{report.average_precision:.4f}"
    print(f"accuracy {report.accuracy:.4f}  roc_auc {auc}  average_precision {ap}  -> {out / 'eval.json'}")
    return 0


def cmd_gradcam(args) -> int:
    from .explain import gradcam, overlay, save_heatmap
    from .model import load_detector
    from .preprocess import denormalize, eval_transform, load_image

    cfg = _resolved(args, ["paths", "split", "preprocess"])
    out = Path(args.out)
    _echo(out, "gradcam", cfg, {"checkpoint": args.checkpoint, "ids": args.ids})
    detector = load_detector(args.checkpoint)
    cfg["preprocess"]["image_size"] = detector.config.image_size
    pp = C.preprocess_config(cfg, detector.config.init)
    manifest = _manifest(cfg)
    by_id = {r.id: r for r in manifest.records}
    missing = [i for i in args.ids if i not in by_id]
    if missing:
        raise ManifestError(f"unknown image ids: {missing}")
    model_name = detector.config.arch
    target = None if args.target_class == "predicted" else args.target_class
    for image_id in args.ids:
        x = eval_transform(load_image(by_id[image_id].path), pp)
        heat = gradcam(detector, x, target)
        shown = denormalize(x, pp.normalization).clamp(0, 1).permute(1, 2, 0).numpy()
        img = overlay(shown, heat, args.colormap, args.blend)
        safe = image_id.replace("/", "__")
        png = out / f"{safe}.{model_name}.{heat.target_class}.png"
        png.parent.mkdir(parents=True, exist_ok=True)
        tmp = png.with_name(f".{png.name}.tmp.png")
        img.save(tmp)
        tmp.replace(png)
        save_heatmap(heat, out / f"{safe}.{model_name}.heatmap.npy")
        flag = " (zero gradient)" if heat.zero_gradient else ""
        print(f"{image_id}: {heat.target_class}{flag} -> {png}")
    return 0


def cmd_profile(args) -> int:
    from .model import build_detector, load_detector
    from .profile import format_table, profile_detector, write_profile

    cfg = _resolved(args, ["preprocess", "detector"])
    out = Path(args.out)
    _echo(out, "profile", cfg, {"checkpoint": args.checkpoint})
    if args.checkpoint:
        detectors = [load_detector(args.checkpoint)]
    else:
        archs = [args.arch] if args.arch else [cfg["detector"]["arch"]]
        if args.all_archs:
            archs = ["resnet50", "vit_b32", "convnext_base"]
        detectors = [build_detector(C.detector_config(cfg, arch=a), load_weights=args.load_weights)
                     for a in archs]
    reports = []
    for det in detectors:
        rep = profile_detector(det, flop_input_size=args.flop_input_size, n_runs=args.n_runs,
                               n_warmup=args.n_warmup, measure=not args.no_latency, device=args.device)
        target = out / "profile.json" if len(detectors) == 1 else out / det.config.arch / "profile.json"
        write_profile(rep, target)
        reports.append(rep)
    print(format_table(reports))
    for rep in reports:
        for note in rep.notes:
            print(f"note ({rep.arch}): {note}")
    return 0


def cmd_report(args) -> int:
    from .report import build_report

    path = build_report(args.path, args.out)
    print(path)
    return 0


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dfdetect", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, fn, sections, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="TOML or JSON config file")
        C.add_flags(p, sections)
        p.set_defaults(func=fn)
        return p

    p = command("prepare", cmd_prepare, ["paths", "split", "preprocess"],
                "validate a manifest, carve out validation records, cache resized images")
    p.add_argument("--out", required=True, help="output directory for splits.json and prepare.json")
    p.add_argument("--validate-images", action="store_true", help="decode every image while loading")
    p.add_argument("--workers", type=int, default=1, help="parallel cache writers")

    p = command("train", cmd_train, ["paths", "split", "preprocess", "detector", "train"],
                "train one detector")
    p.add_argument("--out", required=True, help="run directory")

    p = command("sweep", cmd_sweep, ["paths", "split", "preprocess", "detector", "train", "sweep"],
                "train every cell of a hyperparameter grid")
    p.add_argument("--out", required=True, help="sweep directory")
    p.add_argument("--no-resume", action="store_true", help="retrain cells that already finished")

    p = command("evaluate", cmd_evaluate, ["paths", "split", "preprocess"],
                "score a split with a checkpoint and compute metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--bootstrap", type=int, default=0, help="bootstrap resamples for 95%% intervals (0: off)")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--device", default="cpu")
    p.add_argument("--out", required=True)

    p = command("gradcam", cmd_gradcam, ["paths", "split", "preprocess"],
                "write GradCAM overlays for selected images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("ids", nargs="+", help="image ids from the manifest")
    p.add_argument("--target-class", default="predicted", choices=["predicted", "real", "fake"])
    p.add_argument("--colormap", default="Blues")
    p.add_argument("--blend", type=float, default=0.5)
    p.add_argument("--out", required=True)

    p = command("profile", cmd_profile, ["preprocess", "detector"],
                "parameter count, GFLOPs and batch-1 latency")
    p.add_argument("--checkpoint", help="profile a trained checkpoint instead of an arch/init")
    p.add_argument("--arch", choices=["resnet50", "vit_b32", "convnext_base"])
    p.add_argument("--all-archs", action="store_true", help="profile all three architectures")
    p.add_argument("--load-weights", action="store_true", help="load pretrained weights (not needed for cost)")
    p.add_argument("--flop-input-size", type=int, default=None,
                   help="input side for FLOP counting (default: the detector's input size)")
    p.add_argument("--n-runs", type=int, default=20)
    p.add_argument("--n-warmup", type=int, default=3)
    p.add_argument("--no-latency", action="store_true")
    p.add_argument("--device", default="cpu")
    p.add_argument("--out", required=True)

    p = sub.add_parser("report", help="markdown summary with tables and figures",
                       description="markdown summary with tables and figures")
    p.add_argument("path", help="run or sweep directory")
    p.add_argument("--out", help="report directory (default: <path>/report)")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    from .model import WeightsUnavailable
    from .report import NoRuns

    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except WeightsUnavailable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (C.ConfigError, ManifestError, NoRuns, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
