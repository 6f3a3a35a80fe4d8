import numpy as np
import pytest
import torch
from matplotlib import colormaps
from PIL import Image

from conftest import toy_detector
from dfdetect.explain import (Heatmap, NoTargetLayer, activations_and_gradients, channel_weights, gradcam,
                              overlay, save_heatmap)
from dfdetect.model import ARCHS, Detector, DetectorConfig, build_detector


def fd_gradient(det, A, c, eps=1e-6):
    """Central differences of the class-c logit with respect to the feature maps A [K, h, w]."""
    def logit(a):
        pooled = (a * a if det.backbone.squared else a).sum(dim=(1, 2))
        return det.head(pooled[None])[0, c]

    g = torch.zeros_like(A)
    for idx in np.ndindex(*A.shape):
        plus, minus = A.clone(), A.clone()
        plus[idx] += eps
        minus[idx] -= eps
        g[idx] = (logit(plus) - logit(minus)) / (2 * eps)
    return g


@pytest.mark.parametrize("squared", [False, True])
def test_gradients_match_finite_differences(squared):
    det = toy_detector(k=3, squared=squared, seed=2).double()
    with torch.no_grad():
        det.head.weight.normal_()
    for trial in range(5):
        x = torch.randn(1, 3, 4, 5, dtype=torch.float64, generator=torch.Generator().manual_seed(trial))
        for c in (0, 1):
            A, dA, _, idx = activations_and_gradients(det, x, c)
            assert idx == c
            fd = fd_gradient(det, A, c)
            rel = (dA - fd).abs().max() / fd.abs().max()
            assert rel < 1e-4


def test_identity_toy_weights_equal_head_row():
    # sum pooling makes every gradient entry equal to the head weight, so alpha_k = w_ck
    det = toy_detector(k=4, seed=0).double()
    with torch.no_grad():
        det.head.weight.copy_(torch.tensor([[0.5, -1.0, 2.0, 0.25], [1.5, 0.75, -0.5, 3.0]], dtype=torch.float64))
    x = torch.randn(1, 3, 6, 6, dtype=torch.float64)
    A, dA, _, _ = activations_and_gradients(det, x, "fake")
    assert torch.allclose(channel_weights(dA), det.head.weight[1], atol=1e-12)
    h = gradcam(det, x, "fake")
    expected = torch.relu((det.head.weight[1].detach().view(4, 1, 1) * A).sum(0)).numpy()
    assert np.allclose(h.raw, expected, atol=1e-12)
    assert h.target_class == "fake"
    assert h.grid.max() == pytest.approx(1.0) and h.upsampled.shape == (6, 6)


def test_single_channel_positive_weight_heatmap_is_positive_part():
    det = toy_detector(k=1, seed=0).double()
    with torch.no_grad():
        det.head.weight.copy_(torch.tensor([[0.3], [2.0]], dtype=torch.float64))
    x = torch.randn(1, 3, 5, 5, dtype=torch.float64)
    A, _, _, _ = activations_and_gradients(det, x, 1)
    h = gradcam(det, x, 1)
    pos = torch.relu(A[0]).numpy()
    assert np.allclose(h.raw, 2.0 * pos, atol=1e-12)
    assert np.allclose(h.grid, pos / pos.max(), atol=1e-12)


def test_zeroed_head_row_gives_flagged_zero_map():
    det = toy_detector(k=3, seed=1)
    with torch.no_grad():
        det.head.weight[1].zero_()
    h = gradcam(det, torch.rand(1, 3, 8, 8), "fake")
    assert h.zero_gradient
    assert not h.grid.any() and not h.upsampled.any() and not h.raw.any()


def test_nonnegative_on_random_inputs():
    det = toy_detector(k=5, seed=4)
    gen = torch.Generator().manual_seed(0)
    for i in range(100):
        h = gradcam(det, torch.randn(1, 3, 7, 7, generator=gen), None if i % 2 else "real")
        for arr in (h.grid, h.upsampled, h.raw):
            assert arr.min() >= 0
        assert h.grid.max() <= 1 + 1e-12


def test_lambda_squared_scaling():
    det = toy_detector(k=3, squared=True, seed=5).double()
    x = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    base = gradcam(det, x, 1).raw
    lam = 2.5
    with torch.no_grad():
        det.backbone.feat.weight.mul_(lam)
    scaled = gradcam(det, x, 1).raw
    assert np.allclose(scaled, lam ** 2 * base, rtol=1e-10, atol=1e-14)


def test_invariant_to_non_target_logit_offset():
    det = toy_detector(k=3, seed=6).double()
    x = torch.randn(1, 3, 5, 5, dtype=torch.float64)
    before = gradcam(det, x, "fake").raw
    with torch.no_grad():
        det.head.bias[0] += 7.0
    assert np.array_equal(gradcam(det, x, "fake").raw, before)


def test_default_target_is_prediction_and_eval_mode():
    det = toy_detector(k=3, seed=7, dropout=0.5)
    det.train()
    x = torch.rand(1, 3, 4, 4)
    h1, h2 = gradcam(det, x), gradcam(det, x)
    assert np.array_equal(h1.raw, h2.raw)
    assert det.training
    with torch.no_grad():
        pred = det.eval()(x).argmax(1).item()
    assert h1.target_class == ("real", "fake")[pred]


def test_missing_target_layer():
    det = Detector(torch.nn.Flatten(), 3, cam_layer=None)
    with pytest.raises(NoTargetLayer):
        gradcam(det, torch.rand(1, 3, 1, 1))
    det = Detector(torch.nn.Flatten(), 3, cam_layer="nope")
    with pytest.raises(NoTargetLayer):
        gradcam(det, torch.rand(1, 3, 1, 1))


def heat(arr):
    arr = np.asarray(arr, dtype=float)
    return Heatmap(grid=arr, upsampled=arr, raw=arr, target_class="fake")


def test_overlay_cases():
    rng = np.random.default_rng(0)
    img = Image.fromarray(rng.integers(0, 256, (8, 10, 3), dtype=np.uint8))
    # zero heat leaves the image untouched
    assert np.array_equal(np.asarray(overlay(img, heat(np.zeros((8, 10))))), np.asarray(img))
    # full heat at blend 1 is the colormap itself
    out = np.asarray(overlay(img, heat(np.ones((8, 10))), "Blues", blend=1.0))
    top = np.rint(np.array(colormaps["Blues"](1.0)[:3]) * 255)
    assert np.array_equal(out, np.broadcast_to(top, out.shape))
    # a checkerboard changes exactly the hot squares
    board = (np.indices((8, 10)).sum(0) % 2).astype(float)
    gray = Image.new("RGB", (10, 8), (128, 128, 128))
    out = np.asarray(overlay(gray, heat(board), blend=0.8)).astype(int)
    changed = np.abs(out - 128).sum(-1) > 0
    assert np.array_equal(changed, board.astype(bool))
    with pytest.raises(ValueError):
        overlay(img, heat(np.zeros((4, 4))))


def test_heatmap_file_format(tmp_path):
    h = heat(np.arange(6, dtype=float).reshape(2, 3) / 5)
    save_heatmap(h, tmp_path / "x.heatmap.npy")
    arr = np.load(tmp_path / "x.heatmap.npy")
    assert arr.dtype == np.dtype("<f4") and arr.shape == (2, 3)
    assert np.allclose(arr, h.raw)


@pytest.mark.slow
@pytest.mark.parametrize("arch, init", [(a, "random") for a in ARCHS] + [("vit_b32", "imagenet")])
def test_registered_layers_on_real_backbones(arch, init):
    det = build_detector(DetectorConfig(arch, init, image_size=64), load_weights=False)
    with torch.no_grad():
        det.head.weight.normal_()
    h = gradcam(det, torch.randn(1, 3, 64, 64), "fake")
    assert h.upsampled.shape == (64, 64)
    assert h.grid.min() >= 0 and h.grid.ndim == 2
    assert h.grid.shape[0] == h.grid.shape[1] >= 2
