"""Deepfake image detection by finetuning pretrained vision backbones.

Submodules: ``data`` (manifests and splits), ``preprocess`` (resizing, crops,
normalization), ``model`` (detectors), ``schedule`` (learning-rate schedules,
early stopping), ``train``, ``metrics``, ``explain`` (GradCAM), ``profile``
(parameters, FLOPs, latency), ``sweep`` and ``cli``.
"""

__version__ = "0.1.0"
