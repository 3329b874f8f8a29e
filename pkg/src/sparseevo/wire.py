"""Line-delimited JSON protocol for talking to out-of-process classifiers.

One JSON object per line, UTF-8. The client opens with a hello frame and the
server answers with its geometry; after that the client sends predict frames
one at a time (ids strictly increasing, no pipelining) and the server answers
each with a label or an error frame echoing the id::

    -> {"type": "hello", "version": 1}
    <- {"type": "meta", "num_classes": 10, "channels": 3, "width": 32, "height": 32}
    -> {"type": "predict", "id": 1, "pixels": "<base64>"}
    <- {"type": "label", "id": 1, "label": 4}

``pixels`` is the image as little-endian float32, channel-major (all of
channel 0 row by row, then channel 1, ...), base64-encoded.
"""
from __future__ import annotations

import base64
import json
import shlex
import socket
import subprocess

import numpy as np

from .image import ImageTensor
from .oracle import DecisionOracle

__all__ = [
    "PROTOCOL_VERSION",
    "TransportError",
    "WireProtocolError",
    "encode_pixels",
    "decode_pixels",
    "ExecTransport",
    "TcpTransport",
    "RemoteOracle",
    "serve_oracle",
    "serve_stdio",
    "serve_tcp",
]

PROTOCOL_VERSION = 1


class TransportError(RuntimeError):
    """The byte pipe to the model broke (process died, socket closed, ...)."""


class WireProtocolError(RuntimeError):
    """The peer sent something the protocol does not allow."""


def encode_pixels(image: ImageTensor) -> str:
    return base64.b64encode(image.data.astype("<f4").tobytes()).decode("ascii")


def decode_pixels(text: str, channels: int, width: int, height: int) -> np.ndarray:
    try:
        raw = base64.b64decode(text, validate=True)
    except Exception as exc:
        raise WireProtocolError(f"pixels field is not valid base64: {exc}") from exc
    expected = channels * width * height
    if len(raw) != 4 * expected:
        raise WireProtocolError(
            f"expected {4 * expected} payload bytes ({expected} float32 values for "
            f"C={channels} W={width} H={height}), got {len(raw)}"
        )
    values = np.frombuffer(raw, dtype="<f4")
    return values.reshape(channels, height, width).astype(np.float64)


class ExecTransport:
    """Run a protocol server as a child process and talk over its stdio."""

    def __init__(self, command: str | list[str]):
        args = shlex.split(command) if isinstance(command, str) else list(command)
        if not args:
            raise ValueError("empty command")
        try:
            self._proc = subprocess.Popen(
                args,
                stdin=subprocess.PIPE,
                stdout=subprocess.PIPE,
                text=True,
                bufsize=1,
            )
        except OSError as exc:
            raise TransportError(f"could not start {args[0]!r}: {exc}") from exc
        self._description = " ".join(args)

    def send_line(self, line: str) -> None:
        proc = self._proc
        if proc.poll() is not None:
            raise TransportError(f"server process exited with code {proc.returncode}")
        try:
            proc.stdin.write(line + "\n")
            proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            raise TransportError(f"server pipe closed: {exc}") from exc

    def recv_line(self) -> str:
        line = self._proc.stdout.readline()
        if line == "":
            raise TransportError(
                f"server closed the connection (exit code {self._proc.poll()})"
            )
        return line.rstrip("\n")

    def close(self) -> None:
        proc = self._proc
        if proc.poll() is None:
            try:
                proc.stdin.close()
            except OSError:
                pass
            try:
                proc.wait(timeout=5)
            except subprocess.TimeoutExpired:
                proc.kill()
                proc.wait()

    def __repr__(self) -> str:
        return f"ExecTransport({self._description!r})"


class TcpTransport:
    """Connect to a protocol server over TCP."""

    def __init__(self, host: str, port: int):
        try:
            self._sock = socket.create_connection((host, port))
        except OSError as exc:
            raise TransportError(f"could not connect to {host}:{port}: {exc}") from exc
        self._rfile = self._sock.makefile("r", encoding="utf-8", newline="\n")
        self._wfile = self._sock.makefile("w", encoding="utf-8", newline="\n")
        self._address = f"{host}:{port}"

    def send_line(self, line: str) -> None:
        try:
            self._wfile.write(line + "\n")
            self._wfile.flush()
        except OSError as exc:
            raise TransportError(f"socket to {self._address} broke: {exc}") from exc

    def recv_line(self) -> str:
        line = self._rfile.readline()
        if line == "":
            raise TransportError(f"server {self._address} closed the connection")
        return line.rstrip("\n")

    def close(self) -> None:
        for f in (self._rfile, self._wfile):
            try:
                f.close()
            except OSError:
                pass
        try:
            self._sock.close()
        except OSError:
            pass

    def __repr__(self) -> str:
        return f"TcpTransport({self._address})"


class RemoteOracle(DecisionOracle):
    """A DecisionOracle backed by a protocol server behind a transport.

    The handshake runs in the constructor; geometry and class count come from
    the server's meta frame. Each predict is one request/response round trip.
    """

    def __init__(self, transport):
        self._transport = transport
        self._next_id = 1
        transport.send_line(json.dumps({"type": "hello", "version": PROTOCOL_VERSION}))
        meta = self._read_frame()
        if meta.get("type") != "meta":
            raise WireProtocolError(f"expected a meta frame, got {meta.get('type')!r}")
        try:
            super().__init__(
                int(meta["channels"]),
                int(meta["width"]),
                int(meta["height"]),
                int(meta["num_classes"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise WireProtocolError(f"bad meta frame: {meta!r}") from exc

    def _read_frame(self) -> dict:
        line = self._transport.recv_line()
        try:
            frame = json.loads(line)
        except json.JSONDecodeError as exc:
            raise WireProtocolError(f"server sent invalid JSON: {line!r}") from exc
        if not isinstance(frame, dict):
            raise WireProtocolError(f"server sent a non-object frame: {line!r}")
        return frame

    def _decide(self, image: ImageTensor) -> int:
        request_id = self._next_id
        self._next_id += 1
        self._transport.send_line(
            json.dumps(
                {"type": "predict", "id": request_id, "pixels": encode_pixels(image)}
            )
        )
        frame = self._read_frame()
        if frame.get("id") != request_id:
            raise WireProtocolError(
                f"response id {frame.get('id')!r} does not match request id {request_id}"
            )
        if frame.get("type") == "error":
            raise WireProtocolError(f"server error: {frame.get('message')}")
        if frame.get("type") != "label":
            raise WireProtocolError(f"expected a label frame, got {frame.get('type')!r}")
        return int(frame["label"])

    def close(self) -> None:
        self._transport.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()
        return False


def serve_oracle(oracle: DecisionOracle, rfile, wfile) -> None:
    """Answer protocol frames from ``rfile`` on ``wfile`` until EOF.

    Model errors never kill the loop: a predict that raises is answered with
    an error frame echoing the request id, and serving continues.
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
                    "num_classes": oracle.num_classes,
                    "channels": oracle.channels,
                    "width": oracle.width,
                    "height": oracle.height,
                }
            )
        elif kind == "predict":
            frame_id = frame.get("id")
            try:
                arr = decode_pixels(
                    frame.get("pixels", ""), oracle.channels, oracle.width, oracle.height
                )
                label = oracle.predict(ImageTensor(arr))
            except Exception as exc:
                reply({"type": "error", "id": frame_id, "message": str(exc)})
                continue
            reply({"type": "label", "id": frame_id, "label": label})
        else:
            reply({"type": "error", "id": frame.get("id"), "message": f"unknown frame type {kind!r}"})


def serve_stdio(oracle: DecisionOracle) -> None:
    import sys

    serve_oracle(oracle, sys.stdin, sys.stdout)


def serve_tcp(oracle: DecisionOracle, host: str, port: int, max_connections: int | None = None) -> None:
    """Serve one client at a time; each connection runs the frame loop."""
    served = 0
    with socket.socket(socket.AF_INET, socket.SOCK_STREAM) as server:
        server.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        server.bind((host, port))
        server.listen(1)
        while max_connections is None or served < max_connections:
            conn, _ = server.accept()
            with conn:
                rfile = conn.makefile("r", encoding="utf-8", newline="\n")
                wfile = conn.makefile("w", encoding="utf-8", newline="\n")
                try:
                    serve_oracle(oracle, rfile, wfile)
                finally:
                    rfile.close()
                    wfile.close()
            served += 1
