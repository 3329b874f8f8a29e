"""Serve a torch image classifier as a label-only line-protocol oracle."""

from .models import load_model
from .server import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    PROTOCOL_VERSION,
    BridgeConfig,
    BridgeError,
    ModelRunner,
    decode_pixels,
    handle_stream,
    serve,
)

__all__ = [
    "IMAGENET_MEAN",
    "IMAGENET_STD",
    "PROTOCOL_VERSION",
    "BridgeConfig",
    "BridgeError",
    "ModelRunner",
    "decode_pixels",
    "handle_stream",
    "load_model",
    "serve",
]
