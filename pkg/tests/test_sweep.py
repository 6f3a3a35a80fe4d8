import json
from dataclasses import replace
from types import SimpleNamespace

import pytest

import dfdetect.sweep as S
import table1
from conftest import make_manifest
from dfdetect.data import SplitSpec, derive_validation_split
from dfdetect.model import DetectorConfig
from dfdetect.preprocess import PreprocessConfig, normalization_for_init
from dfdetect.sweep import SweepCellResult, SweepGrid, emit_table, load_results, run_sweep, select_best
from dfdetect.train import TrainConfig


@pytest.fixture(autouse=True)
def no_real_flops(monkeypatch):
    monkeypatch.setattr(S, "_estimate_gflops", lambda arch, init, size: table1.GFLOPS[(arch, init)])


def manifest():
    return derive_validation_split(make_manifest(30, 40), SplitSpec(0.2, seed=0))


class FakeTrainer:
    """Stands in for train(): returns the published accuracy of the cell it is asked to run."""

    def __init__(self, fail_on=None, interrupt_at=None):
        self.calls = []
        self.fail_on = fail_on
        self.interrupt_at = interrupt_at

    def __call__(self, det_cfg, manifest, pp, cfg, run_dir, **kw):
        self.calls.append((det_cfg.arch, det_cfg.init, cfg.scheduler, cfg.lr0))
        if self.interrupt_at is not None and len(self.calls) == self.interrupt_at:
            raise KeyboardInterrupt
        if self.fail_on == self.calls[-1]:
            raise RuntimeError("out of memory")
        acc = table1.value(det_cfg.arch, det_cfg.init, cfg.scheduler, cfg.lr0)
        return SimpleNamespace(best_val_accuracy=acc, best_epoch=3)


def sweep(tmp_path, trainer, grid=None, **kw):
    return run_sweep(grid or SweepGrid(), manifest(), tmp_path, train_fn=trainer, detector_fn=lambda c: c, **kw)


def test_full_grid_has_54_cells(tmp_path):
    grid = SweepGrid()
    assert len(grid) == len(grid.cells()) == 54
    trainer = FakeTrainer()
    results = sweep(tmp_path, trainer)
    assert len(results) == len(trainer.calls) == 54
    assert all(r.status == "done" and 0 <= r.best_val_accuracy <= 1 for r in results)
    assert len(list(tmp_path.glob("*/cell.json"))) == 54


def test_grid_validation():
    with pytest.raises(ValueError, match="empty"):
        SweepGrid(lrs=())
    with pytest.raises(ValueError, match="unknown"):
        SweepGrid(schedulers=("linear",))
    assert len(SweepGrid(archs=("vit_b32",), inits=("clip", "random"), lrs=(1e-4,))) == 4


def test_resume_after_ten_cells_runs_the_remaining_44(tmp_path):
    with pytest.raises(KeyboardInterrupt):
        sweep(tmp_path, FakeTrainer(interrupt_at=11))
    assert len(list(tmp_path.glob("*/cell.json"))) == 10
    trainer = FakeTrainer()
    results = sweep(tmp_path, trainer)
    assert len(trainer.calls) == 44
    assert len(results) == 54
    # a third pass has nothing left to do
    again = FakeTrainer()
    sweep(tmp_path, again)
    assert again.calls == []
    # without resume everything runs
    fresh = FakeTrainer()
    sweep(tmp_path, fresh, resume=False)
    assert len(fresh.calls) == 54


def test_failures_are_isolated(tmp_path):
    bad = ("vit_b32", "random", "step", 1e-3)
    results = sweep(tmp_path, FakeTrainer(fail_on=bad))
    failed = [r for r in results if r.status == "failed"]
    assert [r.key for r in failed] == [bad]
    assert "RuntimeError: out of memory" in failed[0].error
    assert failed[0].best_val_accuracy is None
    assert sum(r.status == "done" for r in results) == 53
    # the failed cell is retried on resume
    trainer = FakeTrainer()
    sweep(tmp_path, trainer)
    assert trainer.calls == [bad]


def test_shared_validation_split_is_enforced(tmp_path):
    m = manifest()
    grid = SweepGrid(archs=("resnet50",), inits=("clip",), schedulers=("step",), lrs=(1e-4,))
    run_sweep(grid, m, tmp_path, train_fn=FakeTrainer(), detector_fn=lambda c: c)
    assert (tmp_path / "splits.json").is_file()
    other = derive_validation_split(make_manifest(30, 40), SplitSpec(0.2, seed=1))
    with pytest.raises(ValueError, match="disagrees"):
        run_sweep(grid, other, tmp_path, train_fn=FakeTrainer(), detector_fn=lambda c: c)
    # a cell recorded against another split is refused rather than silently reused
    cell = tmp_path / S.cell_name("resnet50", "clip", "step", 1e-4) / "cell.json"
    d = json.loads(cell.read_text())
    d["splits_sha256"] = "0" * 64
    cell.write_text(json.dumps(d))
    with pytest.raises(ValueError, match="different validation split"):
        run_sweep(grid, m, tmp_path, train_fn=FakeTrainer(), detector_fn=lambda c: c)
    with pytest.raises(ValueError, match="validation split"):
        run_sweep(grid, make_manifest(5, 5), tmp_path / "x", train_fn=FakeTrainer())


def test_cells_get_their_own_normalization_and_schedule(tmp_path):
    seen = []

    def spy(det_cfg, manifest, pp, cfg, run_dir, **kw):
        seen.append((det_cfg, pp, cfg))
        return SimpleNamespace(best_val_accuracy=0.5, best_epoch=0)

    grid = SweepGrid(archs=("convnext_base",), inits=("imagenet", "clip"), schedulers=("cosine",), lrs=(1e-5,),
                     detector={"freeze_backbone": True}, scheduler_params={"cosine": {"T0": 4}},
                     preprocess=PreprocessConfig(train_side=64, eval_side=64))
    run_sweep(grid, manifest(), tmp_path, train_fn=spy, detector_fn=lambda c: c)
    for det_cfg, pp, cfg in seen:
        assert det_cfg.freeze_backbone and det_cfg.image_size == 64
        assert pp.normalization == normalization_for_init(det_cfg.init)
        assert cfg.scheduler_params == {"T0": 4} and cfg.lr0 == 1e-5


def published_results(tmp_path):
    return sweep(tmp_path, FakeTrainer())


def test_table_reproduces_published_layout(tmp_path):
    results = published_results(tmp_path)
    csv_text, text = emit_table(results, tmp_path)
    lines = csv_text.splitlines()
    assert lines[0] == "scheduler,lr," + ",".join(f"{a}/{i}" for a, i in table1.COLUMNS)
    assert len(lines) == 7
    rows = {(r.split(",")[0], float(r.split(",")[1])): r.split(",")[2:] for r in lines[1:]}
    for key, vals in table1.ROWS.items():
        assert [float(v) for v in vals] == [float(v) for v in rows[key]]
    col = table1.COLUMNS.index(("convnext_base", "clip"))
    assert rows[("cosine", 1e-5)][col] == "0.846"
    assert rows[("cosine", 1e-5)][table1.COLUMNS.index(("vit_b32", "clip"))] == "0.838"
    best = max(float(v) for r in rows.values() for v in r)
    assert best == 0.846
    assert (tmp_path / "table1.csv").read_text() == csv_text
    assert (tmp_path / "table1.txt").read_text() == text


def test_table_is_a_pure_fold_over_run_directories(tmp_path):
    results = published_results(tmp_path)
    csv_live, text_live = emit_table(results)
    csv_disk, text_disk = emit_table(load_results(tmp_path))
    assert csv_disk.encode() == csv_live.encode()
    assert text_disk == text_live


def test_missing_cells_and_single_cell_table(tmp_path):
    results = published_results(tmp_path)
    results[0] = replace(results[0], status="failed", best_val_accuracy=None)
    csv_text, text = emit_table(results)
    assert ",," in csv_text.splitlines()[1] or csv_text.splitlines()[1].endswith(",")
    assert "—" in text
    one = [SweepCellResult("vit_b32", "clip", "cosine", 1e-5, 0.838, 4, "d", "done")]
    csv_text, text = emit_table(one)
    assert csv_text == "scheduler,lr,vit_b32/clip\ncosine,1e-05,0.838\n"
    with pytest.raises(ValueError):
        emit_table([])


def test_select_best_per_architecture_matches_column_maxima(tmp_path):
    results = published_results(tmp_path)
    best = select_best(results, 1, per_arch=True)
    assert [r.key for r in best] == [
        ("resnet50", "imagenet", "cosine", 1e-4),
        ("vit_b32", "clip", "cosine", 1e-5),
        ("convnext_base", "clip", "cosine", 1e-5),
    ]
    assert [r.best_val_accuracy for r in best] == [0.812, 0.838, 0.846]
    top = select_best(results, 3)
    assert [r.best_val_accuracy for r in top] == [0.846, 0.838, 0.838]
    # equal accuracy: convnext/clip/step/1e-4 (40.1 GFLOPs) vs vit/clip/cosine/1e-5 (11.5 GFLOPs)
    assert top[1].arch == "vit_b32"


def test_select_best_edges():
    a = SweepCellResult("resnet50", "clip", "step", 1e-4, 0.812, 2, "a", "done", gflops=15.96)
    b = SweepCellResult("resnet50", "imagenet", "cosine", 1e-4, 0.812, 5, "b", "done", gflops=10.68)
    c = SweepCellResult("vit_b32", "clip", "step", 1e-3, None, None, "c", "failed")
    assert select_best([a, b, c], 0) == []
    assert select_best([a, b, c], 1) == [b]
    # without cost information the lexicographic key decides
    a2, b2 = replace(a, gflops=None), replace(b, gflops=None)
    assert select_best([b2, a2], 2) == [a2, b2]
    with pytest.raises(ValueError, match="exceeds"):
        select_best([a, b, c], 3)


def test_multiple_seeds_give_mean_and_sd(tmp_path):
    accs = iter([0.7, 0.8])

    def trainer(det_cfg, manifest, pp, cfg, run_dir, **kw):
        return SimpleNamespace(best_val_accuracy=next(accs), best_epoch=cfg.seed)

    grid = SweepGrid(archs=("resnet50",), inits=("random",), schedulers=("step",), lrs=(1e-3,), seeds=2,
                     train=TrainConfig(seed=10))
    [r] = run_sweep(grid, manifest(), tmp_path, train_fn=trainer, detector_fn=lambda c: c)
    assert r.best_val_accuracy == pytest.approx(0.75)
    assert r.val_accuracy_sd == pytest.approx(0.0707106781, rel=1e-6)


@pytest.mark.slow
def test_single_cell_sweep_equals_plain_train(tmp_path):
    from conftest import toy_images
    from dfdetect.data import DatasetManifest, LabeledImage
    from dfdetect.model import build_detector
    from dfdetect.train import train

    images, labels = toy_images(12, 32, 0)
    recs = [LabeledImage(f"t{i}", f"/none/t{i}.png", lab, "train" if i < 8 else "val")
            for i, lab in enumerate(labels)]
    by_id = {f"t{i}": img for i, img in enumerate(images)}
    m = DatasetManifest(tuple(recs))
    pp = PreprocessConfig(train_side=32, eval_side=32)
    tc = TrainConfig(lr0=1e-3, scheduler="step", batch_size=4, max_epochs=2, patience=2, seed=1)
    grid = SweepGrid(archs=("resnet50",), inits=("random",), schedulers=("step",), lrs=(1e-3,),
                     train=tc, preprocess=pp, detector={"freeze_backbone": True})
    [cell] = run_sweep(grid, m, tmp_path / "sweep", images=by_id,
                       detector_fn=lambda c: build_detector(c, load_weights=False))
    det = build_detector(DetectorConfig("resnet50", "random", freeze_backbone=True, image_size=32),
                         load_weights=False)
    plain = train(det, m, replace(pp, normalization=normalization_for_init("random")), tc, tmp_path / "plain",
                  images=by_id)
    assert cell.status == "done"
    assert cell.best_val_accuracy == plain.best_val_accuracy
    assert cell.best_epoch == plain.best_epoch
    assert (tmp_path / "sweep" / S.cell_name("resnet50", "random", "step", 1e-3) / "curve.csv").read_text() == \
        (tmp_path / "plain" / "curve.csv").read_text()
