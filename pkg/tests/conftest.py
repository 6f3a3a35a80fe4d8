import sys

import numpy as np
import pytest
import torch
import torch.nn as nn

from dfdetect.data import DatasetManifest, LabeledImage
from dfdetect.model import Detector


def make_manifest(n_train_real, n_train_fake, n_test_real=0, n_test_fake=0, prefix="img"):
    recs = []
    for split, n_real, n_fake in (("train", n_train_real, n_train_fake), ("test", n_test_real, n_test_fake)):
        for label, n in (("real", n_real), ("fake", n_fake)):
            for i in range(n):
                rid = f"{prefix}-{split}-{label}-{i:04d}"
                recs.append(LabeledImage(rid, f"/nonexistent/{rid}.png", label, split))
    return DatasetManifest(tuple(recs))


class MapBackbone(nn.Module):
    """1x1 conv feature maps ``feat`` followed by sum (or squared-sum) pooling."""

    def __init__(self, k=3, squared=False):
        super().__init__()
        self.feat = nn.Conv2d(3, k, 1, bias=False)
        self.squared = squared

    def forward(self, x):
        a = self.feat(x)
        return (a * a if self.squared else a).sum(dim=(2, 3))


def toy_detector(k=3, squared=False, seed=0, dropout=0.0):
    torch.manual_seed(seed)
    return Detector(MapBackbone(k, squared), k, dropout_rate=dropout, cam_layer="feat", head_seed=seed)


def toy_images(n, size=32, seed=0):
    """Half solid-colour 'real' images, half uniform-noise 'fake' images (uint8 HWC)."""
    rng = np.random.default_rng(seed)
    images, labels = [], []
    for i in range(n):
        if i % 2 == 0:
            img = np.broadcast_to(rng.integers(0, 256, 3, dtype=np.uint8), (size, size, 3)).copy()
            labels.append("real")
        else:
            img = rng.integers(0, 256, (size, size, 3), dtype=np.uint8)
            labels.append("fake")
        images.append(img)
    return images, labels


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    if acceptance is None or not acceptance.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance.summary_lines():
        terminalreporter.write_line(line)
