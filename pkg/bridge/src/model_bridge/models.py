"""Model loading for the bridge.

Two kinds of spec are understood:

    torchscript:<path>    a saved TorchScript module (a bare path ending
                          in .pt or .pts works too)
    torchvision:<name>    a torchvision registry model with its default
                          pretrained weights

Quantized or otherwise exotic models are fine as long as they load
through one of these doors and map a (1, C, H, W) float batch to a
(1, K) score tensor; the bridge does not inspect what is inside.
"""

from __future__ import annotations

import os

import torch


def load_model(spec: str) -> torch.nn.Module:
    """Resolve a model spec to a torch module ready for inference."""
    if not spec:
        raise ValueError("model spec must be non-empty")
    if spec.startswith("torchscript:"):
        return _load_torchscript(spec[len("torchscript:"):])
    if spec.startswith("torchvision:"):
        return _load_torchvision(spec[len("torchvision:"):])
    if spec.endswith((".pt", ".pts")) or os.path.exists(spec):
        return _load_torchscript(spec)
    raise ValueError(
        f"cannot tell what kind of model {spec!r} is; use torchscript:<path> "
        f"or torchvision:<name>"
    )


def _load_torchscript(path: str) -> torch.nn.Module:
    if not path:
        raise ValueError("torchscript spec needs a file path")
    if not os.path.exists(path):
        raise ValueError(f"torchscript file not found: {path}")
    try:
        return torch.jit.load(path, map_location="cpu")
    except Exception as exc:
        raise ValueError(f"could not load torchscript module from {path}: {exc}") from exc


def _load_torchvision(name: str) -> torch.nn.Module:
    if not name:
        raise ValueError("torchvision spec needs a model name")
    from torchvision.models import get_model

    try:
        return get_model(name, weights="DEFAULT")
    except ValueError as exc:
        raise ValueError(f"unknown torchvision model {name!r}: {exc}") from exc
