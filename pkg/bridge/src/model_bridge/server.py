"""Line-protocol server that answers label queries with a torch model.

The protocol is newline-delimited JSON over stdio or TCP. A client opens
with a handshake frame and then sends prediction requests one at a time:

    -> {"type": "hello", "version": 1}
    <- {"type": "meta", "num_classes": K, "channels": C, "width": W, "height": H}
    -> {"type": "predict", "id": 1, "pixels": "<base64>"}
    <- {"type": "label", "id": 1, "label": 7}

The pixels field is base64 over the raw little-endian float32 image laid
out channel-major (all of channel 0, then channel 1, ...). Every request
gets exactly one response carrying the same id, in request order. A frame
the server cannot handle is answered with an error frame instead of a
label, and serving continues; only EOF (or the connection closing) stops
the loop. The server keeps no state between requests.

Responses expose the top-1 class index only. Preprocessing (per-channel
normalization) happens here, on the serving side, so attack clients can
work in plain [0, 1] pixel space no matter which model is behind the
bridge.
"""

from __future__ import annotations

import base64
import binascii
import json
import socket
import sys
from dataclasses import dataclass

import numpy as np
import torch

PROTOCOL_VERSION = 1

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class BridgeError(RuntimeError):
    """A request that could not be answered with a label."""


@dataclass(frozen=True)
class BridgeConfig:
    """Everything `serve` needs to host one model.

    `model` is a loader spec understood by `models.load_model` (a
    TorchScript path or a torchvision registry name). `transport` is
    either "stdio" or "tcp:<port>". `mean` and `std` are per-channel
    normalization constants applied before inference, or None for raw
    [0, 1] input; they must be given together.
    """

    model: str
    channels: int
    width: int
    height: int
    num_classes: int
    transport: str = "stdio"
    device: str = "cpu"
    mean: tuple[float, ...] | None = None
    std: tuple[float, ...] | None = None

    def __post_init__(self) -> None:
        if not self.model:
            raise ValueError("model spec must be non-empty")
        for name in ("channels", "width", "height"):
            value = getattr(self, name)
            if not isinstance(value, int) or value < 1:
                raise ValueError(f"{name} must be a positive integer, got {value!r}")
        if not isinstance(self.num_classes, int) or self.num_classes < 2:
            raise ValueError(f"num_classes must be at least 2, got {self.num_classes!r}")
        if self.transport != "stdio":
            port = _parse_tcp_port(self.transport)
            if port is None:
                raise ValueError(
                    f"transport must be 'stdio' or 'tcp:<port>', got {self.transport!r}"
                )
        if (self.mean is None) != (self.std is None):
            raise ValueError("mean and std must be given together or not at all")
        if self.mean is not None:
            if len(self.mean) != self.channels or len(self.std) != self.channels:
                raise ValueError(
                    f"normalization constants must have one entry per channel "
                    f"({self.channels}), got mean={self.mean!r} std={self.std!r}"
                )
            if any(s == 0.0 for s in self.std):
                raise ValueError("std entries must be non-zero")

    @property
    def pixel_count(self) -> int:
        return self.width * self.height

    @property
    def value_count(self) -> int:
        return self.channels * self.width * self.height


def _parse_tcp_port(transport: str) -> int | None:
    if not transport.startswith("tcp:"):
        return None
    try:
        port = int(transport[len("tcp:"):])
    except ValueError:
        return None
    if not 0 < port < 65536:
        return None
    return port


def decode_pixels(payload: str, config: BridgeConfig) -> np.ndarray:
    """Turn a base64 pixels field into a (C, H, W) float32 array."""
    if not isinstance(payload, str):
        raise BridgeError("pixels field must be a base64 string")
    try:
        raw = base64.b64decode(payload, validate=True)
    except (binascii.Error, ValueError):
        raise BridgeError("pixels field is not valid base64") from None
    expected = 4 * config.value_count
    if len(raw) != expected:
        raise BridgeError(
            f"expected {expected} payload bytes "
            f"({config.value_count} float32 values for C={config.channels} "
            f"W={config.width} H={config.height}), got {len(raw)}"
        )
    values = np.frombuffer(raw, dtype="<f4")
    if not np.all(np.isfinite(values)):
        raise BridgeError("pixels must be finite numbers")
    return values.reshape(config.channels, config.height, config.width).copy()


class ModelRunner:
    """Wraps a torch module with the preprocessing a config asks for.

    The module is moved to the configured device and switched to eval
    mode once, up front. Each call normalizes one image, runs a batch of
    one, and reduces the logits to the smallest argmax index so ties
    break toward the lower class.
    """

    def __init__(self, module: torch.nn.Module, config: BridgeConfig) -> None:
        self._device = torch.device(config.device)
        self._module = module.to(self._device)
        self._module.eval()
        self._num_classes = config.num_classes
        if config.mean is not None:
            self._mean = torch.tensor(config.mean, dtype=torch.float32).reshape(-1, 1, 1)
            self._std = torch.tensor(config.std, dtype=torch.float32).reshape(-1, 1, 1)
        else:
            self._mean = None
            self._std = None

    def label(self, pixels: np.ndarray) -> int:
        batch = torch.from_numpy(pixels).to(torch.float32)
        if self._mean is not None:
            batch = (batch - self._mean) / self._std
        batch = batch.unsqueeze(0).to(self._device)
        try:
            with torch.no_grad():
                logits = self._module(batch)
        except Exception as exc:
            raise BridgeError(f"model inference failed: {exc}") from exc
        scores = logits.detach().cpu().numpy().reshape(-1)
        if scores.size != self._num_classes:
            raise BridgeError(
                f"model produced {scores.size} scores but the bridge is "
                f"configured for {self._num_classes} classes"
            )
        return int(np.argmax(scores))


def handle_stream(runner: ModelRunner, config: BridgeConfig, rfile, wfile) -> None:
    """Answer frames from `rfile` on `wfile` until EOF.

    Bad input never kills the loop: unparseable lines, malformed frames,
    and model failures are all answered with an error frame (echoing the
    request id when there is one) and the next line is read as usual.
    """

    def reply(obj: dict) -> None:
        wfile.write(json.dumps(obj) + "\n")
        wfile.flush()

    for line in rfile:
        line = line.strip()
        if not line:
            continue
        try:
            frame = json.loads(line)
        except json.JSONDecodeError:
            reply({"type": "error", "id": None, "message": "invalid JSON"})
            continue
        if not isinstance(frame, dict):
            reply({"type": "error", "id": None, "message": "frame must be a JSON object"})
            continue
        kind = frame.get("type")
        if kind == "hello":
            if frame.get("version") != PROTOCOL_VERSION:
                reply(
                    {
                        "type": "error",
                        "id": None,
                        "message": f"unsupported protocol version {frame.get('version')!r}",
                    }
                )
                continue
            reply(
                {
                    "type": "meta",
                    "num_classes": config.num_classes,
                    "channels": config.channels,
                    "width": config.width,
                    "height": config.height,
                }
            )
        elif kind == "predict":
            frame_id = frame.get("id")
            if not isinstance(frame_id, int) or isinstance(frame_id, bool):
                reply(
                    {
                        "type": "error",
                        "id": None,
                        "message": "predict frame needs an integer id",
                    }
                )
                continue
            try:
                if "pixels" not in frame:
                    raise BridgeError("predict frame needs a pixels field")
                pixels = decode_pixels(frame["pixels"], config)
                label = runner.label(pixels)
            except Exception as exc:
                reply({"type": "error", "id": frame_id, "message": str(exc)})
                continue
            reply({"type": "label", "id": frame_id, "label": label})
        else:
            reply(
                {
                    "type": "error",
                    "id": frame.get("id"),
                    "message": f"unknown frame type {kind!r}",
                }
            )


def serve(config: BridgeConfig, max_connections: int | None = None) -> None:
    """Load the configured model and serve the protocol until EOF.

    Transport comes from the config: "stdio" answers on this process's
    own stdin/stdout, "tcp:<port>" listens on localhost and serves one
    connection at a time. `max_connections` caps how many TCP clients
    are served before returning (None means keep accepting forever).
    """
    from .models import load_model

    runner = ModelRunner(load_model(config.model), config)
    port = _parse_tcp_port(config.transport)
    if port is None:
        handle_stream(runner, config, sys.stdin, sys.stdout)
    else:
        serve_tcp(runner, config, "127.0.0.1", port, max_connections)


def serve_tcp(
    runner: ModelRunner,
    config: BridgeConfig,
    host: str,
    port: int,
    max_connections: int | None = None,
) -> None:
    """Accept clients one at a time; each connection runs the frame loop."""
    served = 0
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as listener:
        listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        listener.bind((host, port))
        listener.listen(1)
        while max_connections is None or served < max_connections:
            conn, _ = listener.accept()
            with conn:
                rfile = conn.makefile("r", encoding="utf-8", newline="\n")
                wfile = conn.makefile("w", encoding="utf-8", newline="\n")
                try:
                    handle_stream(runner, config, rfile, wfile)
                finally:
                    rfile.close()
                    wfile.close()
            served += 1
