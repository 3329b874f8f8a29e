"""Tests for the model bridge: config, decoding, serving, and conformance.

The conformance test at the bottom prints an ACCEPTANCE line in the same
format as the main suite (run pytest with -s to see it). Its fixtures are
frozen files: a saved TorchScript network plus the exact request and
response transcripts, compared byte for byte.
"""

from __future__ import annotations

import base64
import io
import json
import socket
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch
import torch.nn as nn

from model_bridge.cli import build_config, build_parser, main as cli_main, parse_shape
from model_bridge.models import load_model
from model_bridge.server import (
    IMAGENET_MEAN,
    IMAGENET_STD,
    BridgeConfig,
    BridgeError,
    ModelRunner,
    decode_pixels,
    handle_stream,
)

FIXTURES = Path(__file__).parent / "fixtures"
TINY_CNN = FIXTURES / "tiny_cnn.pt"


def encode(pixels: np.ndarray) -> str:
    return base64.b64encode(pixels.astype("<f4").tobytes()).decode("ascii")


def small_config(**overrides) -> BridgeConfig:
    merged = dict(
        model="in-process",
        channels=3,
        width=4,
        height=4,
        num_classes=3,
    )
    merged.update(overrides)
    return BridgeConfig(**merged)


class ChannelSums(nn.Module):
    """Logits are the per-channel pixel sums, so classes == channels."""

    def forward(self, batch):
        return batch.sum(dim=(2, 3))


class ConstantLogits(nn.Module):
    def __init__(self, values):
        super().__init__()
        self.register_buffer("values", torch.tensor(values, dtype=torch.float32))

    def forward(self, batch):
        return self.values.repeat(batch.shape[0], 1)


class Boom(nn.Module):
    def forward(self, batch):
        raise RuntimeError("boom")


def run_frames(runner: ModelRunner, config: BridgeConfig, lines: list[str]) -> list[dict]:
    rfile = io.StringIO("".join(line + "\n" for line in lines))
    wfile = io.StringIO()
    handle_stream(runner, config, rfile, wfile)
    out = wfile.getvalue().splitlines()
    return [json.loads(line) for line in out]


class TestParseShape:
    def test_parses_cxwxh(self):
        assert parse_shape("3x224x224") == (3, 224, 224)
        assert parse_shape("1X8X16") == (1, 8, 16)

    @pytest.mark.parametrize("text", ["3x224", "3x224x224x1", "axbxc", "3x-1x4", "3x0x4", ""])
    def test_rejects_bad_shapes(self, text):
        with pytest.raises(ValueError):
            parse_shape(text)


class TestBridgeConfig:
    def test_accepts_stdio_and_tcp(self):
        small_config(transport="stdio")
        small_config(transport="tcp:9000")

    @pytest.mark.parametrize("transport", ["tcp:", "tcp:0", "tcp:99999", "udp:9000", "pipe"])
    def test_rejects_bad_transport(self, transport):
        with pytest.raises(ValueError):
            small_config(transport=transport)

    def test_rejects_bad_dimensions(self):
        with pytest.raises(ValueError):
            small_config(channels=0)
        with pytest.raises(ValueError):
            small_config(width=-3)
        with pytest.raises(ValueError):
            small_config(num_classes=1)

    def test_normalization_must_pair(self):
        with pytest.raises(ValueError):
            small_config(mean=(0.5, 0.5, 0.5))
        with pytest.raises(ValueError):
            small_config(std=(0.2, 0.2, 0.2))

    def test_normalization_length_matches_channels(self):
        small_config(mean=(0.1, 0.2, 0.3), std=(1.0, 1.0, 1.0))
        with pytest.raises(ValueError):
            small_config(mean=(0.1, 0.2), std=(1.0, 1.0))
        with pytest.raises(ValueError):
            small_config(mean=(0.1, 0.2, 0.3), std=(1.0, 0.0, 1.0))

    def test_value_count(self):
        config = small_config(channels=2, width=5, height=3)
        assert config.pixel_count == 15
        assert config.value_count == 30


class TestDecodePixels:
    def test_roundtrip_is_channel_major(self):
        config = small_config(channels=2, width=3, height=2)
        values = np.arange(12, dtype=np.float32).reshape(2, 2, 3) / 12.0
        decoded = decode_pixels(encode(values), config)
        assert decoded.shape == (2, 2, 3)
        assert np.array_equal(decoded, values.astype(np.float32))

    def test_rejects_non_string(self):
        with pytest.raises(BridgeError, match="base64 string"):
            decode_pixels(123, small_config())

    def test_rejects_bad_base64(self):
        with pytest.raises(BridgeError, match="not valid base64"):
            decode_pixels("!!!", small_config())

    def test_rejects_wrong_length(self):
        config = small_config()
        short = base64.b64encode(b"\x00" * 8).decode("ascii")
        with pytest.raises(BridgeError, match="expected 192 payload bytes"):
            decode_pixels(short, config)

    def test_rejects_non_finite(self):
        config = small_config(channels=1, width=2, height=2)
        bad = np.array([0.1, np.nan, 0.3, 0.4], dtype=np.float32).reshape(1, 2, 2)
        with pytest.raises(BridgeError, match="finite"):
            decode_pixels(encode(bad), config)


class TestModelRunner:
    def test_argmax_ties_break_low(self):
        config = small_config(channels=1, width=2, height=2)
        runner = ModelRunner(ConstantLogits([2.0, 2.0, 2.0]), config)
        assert runner.label(np.zeros((1, 2, 2), dtype=np.float32)) == 0
        runner = ModelRunner(ConstantLogits([0.0, 5.0, 5.0]), config)
        assert runner.label(np.zeros((1, 2, 2), dtype=np.float32)) == 1

    def test_wrong_output_width_is_an_error(self):
        config = small_config(channels=1, width=2, height=2, num_classes=4)
        runner = ModelRunner(ConstantLogits([1.0, 2.0]), config)
        with pytest.raises(BridgeError, match="2 scores"):
            runner.label(np.zeros((1, 2, 2), dtype=np.float32))

    def test_model_exception_is_wrapped(self):
        runner = ModelRunner(Boom(), small_config())
        with pytest.raises(BridgeError, match="model inference failed: boom"):
            runner.label(np.zeros((3, 4, 4), dtype=np.float32))

    def test_normalization_shifts_the_decision(self):
        rng = np.random.default_rng(77)
        config = small_config()
        mean = IMAGENET_MEAN
        std = IMAGENET_STD
        normed = small_config(mean=mean, std=std)
        plain_runner = ModelRunner(ChannelSums(), config)
        normed_runner = ModelRunner(ChannelSums(), normed)
        mean_arr = np.asarray(mean, dtype=np.float32).reshape(3, 1, 1)
        std_arr = np.asarray(std, dtype=np.float32).reshape(3, 1, 1)
        for _ in range(20):
            pixels = rng.uniform(0.0, 1.0, size=(3, 4, 4)).astype(np.float32)
            raw_sums = pixels.sum(axis=(1, 2))
            normed_sums = ((pixels - mean_arr) / std_arr).sum(axis=(1, 2))
            assert plain_runner.label(pixels) == int(np.argmax(raw_sums))
            assert normed_runner.label(pixels) == int(np.argmax(normed_sums))


class TestHandleStream:
    def setup_method(self):
        self.config = small_config()
        self.runner = ModelRunner(ChannelSums(), self.config)

    def predict(self, frame_id, pixels):
        return json.dumps({"type": "predict", "id": frame_id, "pixels": encode(pixels)})

    def test_handshake_reports_configured_shape(self):
        frames = run_frames(self.runner, self.config, ['{"type": "hello", "version": 1}'])
        assert frames == [
            {"type": "meta", "num_classes": 3, "channels": 3, "width": 4, "height": 4}
        ]

    def test_wrong_version_is_refused(self):
        frames = run_frames(self.runner, self.config, ['{"type": "hello", "version": 2}'])
        assert frames[0]["type"] == "error"
        assert frames[0]["id"] is None
        assert "version" in frames[0]["message"]

    def test_invalid_json_gets_null_id_error(self):
        frames = run_frames(self.runner, self.config, ["{not json"])
        assert frames == [{"type": "error", "id": None, "message": "invalid JSON"}]

    def test_non_object_frame_is_refused(self):
        frames = run_frames(self.runner, self.config, ['[1, 2, 3]'])
        assert frames[0]["type"] == "error"
        assert frames[0]["id"] is None

    def test_unknown_type_echoes_id(self):
        frames = run_frames(self.runner, self.config, ['{"type": "scores", "id": 9}'])
        assert frames[0]["type"] == "error"
        assert frames[0]["id"] == 9
        assert "unknown frame type" in frames[0]["message"]

    def test_predict_needs_integer_id(self):
        pixels = np.zeros((3, 4, 4), dtype=np.float32)
        body = json.loads(self.predict(1, pixels))
        del body["id"]
        frames = run_frames(self.runner, self.config, [json.dumps(body)])
        assert frames[0]["type"] == "error" and frames[0]["id"] is None
        body["id"] = True
        frames = run_frames(self.runner, self.config, [json.dumps(body)])
        assert frames[0]["type"] == "error" and frames[0]["id"] is None

    def test_predict_needs_pixels(self):
        frames = run_frames(self.runner, self.config, ['{"type": "predict", "id": 3}'])
        assert frames == [
            {"type": "error", "id": 3, "message": "predict frame needs a pixels field"}
        ]

    def test_blank_lines_are_skipped(self):
        frames = run_frames(
            self.runner, self.config, ["", '{"type": "hello", "version": 1}', "  "]
        )
        assert len(frames) == 1 and frames[0]["type"] == "meta"

    def test_labels_follow_channel_sums(self):
        rng = np.random.default_rng(11)
        lines = ['{"type": "hello", "version": 1}']
        expected = []
        for i in range(1, 9):
            pixels = rng.uniform(0.0, 1.0, size=(3, 4, 4)).astype(np.float32)
            lines.append(self.predict(i, pixels))
            expected.append(int(np.argmax(pixels.sum(axis=(1, 2)))))
        frames = run_frames(self.runner, self.config, lines)
        assert len(frames) == 9
        for i, frame in enumerate(frames[1:], start=1):
            assert frame == {"type": "label", "id": i, "label": expected[i - 1]}

    def test_model_exception_answers_and_serving_continues(self):
        config = small_config(channels=1, width=2, height=2)
        runner = ModelRunner(Boom(), config)
        good_runner = ModelRunner(ConstantLogits([0.0, 1.0, 0.0]), config)
        pixels = np.zeros((1, 2, 2), dtype=np.float32)
        frames = run_frames(
            runner,
            config,
            [
                json.dumps({"type": "predict", "id": 1, "pixels": encode(pixels)}),
                json.dumps({"type": "predict", "id": 2, "pixels": encode(pixels)}),
            ],
        )
        assert [f["type"] for f in frames] == ["error", "error"]
        assert [f["id"] for f in frames] == [1, 2]
        assert "model inference failed: boom" in frames[0]["message"]
        frames = run_frames(
            good_runner,
            config,
            [
                json.dumps({"type": "predict", "id": 1, "pixels": "!!!"}),
                json.dumps({"type": "predict", "id": 2, "pixels": encode(pixels)}),
            ],
        )
        assert frames[0]["type"] == "error" and frames[0]["id"] == 1
        assert frames[1] == {"type": "label", "id": 2, "label": 1}

    def test_exactly_one_response_per_frame_in_order(self):
        rng = np.random.default_rng(23)
        lines = ['{"type": "hello", "version": 1}']
        for i in range(1, 31):
            if i % 7 == 0:
                lines.append(f'{{"type": "predict", "id": {i}, "pixels": "***"}}')
            else:
                pixels = rng.uniform(0.0, 1.0, size=(3, 4, 4)).astype(np.float32)
                lines.append(self.predict(i, pixels))
        frames = run_frames(self.runner, self.config, lines)
        assert len(frames) == len(lines)
        assert frames[0]["type"] == "meta"
        for i, frame in enumerate(frames[1:], start=1):
            assert frame["id"] == i
            assert frame["type"] == ("error" if i % 7 == 0 else "label")


class TestLoadModel:
    def test_loads_saved_torchscript_with_prefix(self):
        module = load_model(f"torchscript:{TINY_CNN}")
        out = module(torch.zeros(1, 3, 32, 32))
        assert out.shape == (1, 10)

    def test_loads_bare_pt_path(self):
        module = load_model(str(TINY_CNN))
        assert module(torch.zeros(1, 3, 32, 32)).shape == (1, 10)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ValueError, match="not found"):
            load_model(f"torchscript:{tmp_path / 'nope.pt'}")

    def test_non_torchscript_file(self, tmp_path):
        junk = tmp_path / "junk.pt"
        junk.write_bytes(b"not a torchscript archive")
        with pytest.raises(ValueError, match="could not load torchscript"):
            load_model(str(junk))

    def test_unknown_torchvision_name(self):
        with pytest.raises(ValueError, match="unknown torchvision model"):
            load_model("torchvision:not-a-real-net")

    def test_unrecognized_spec(self):
        with pytest.raises(ValueError, match="cannot tell"):
            load_model("onnx:whatever")
        with pytest.raises(ValueError):
            load_model("")


class TestCli:
    def bridge_args(self, **overrides):
        merged = dict(
            model=f"torchscript:{TINY_CNN}",
            shape="3x32x32",
            classes=10,
            transport="stdio",
            normalize="none",
            device="cpu",
            max_connections=None,
        )
        merged.update(overrides)
        return build_parser().parse_args(
            [
                "--model", merged["model"],
                "--shape", merged["shape"],
                "--classes", str(merged["classes"]),
                "--transport", merged["transport"],
                "--normalize", merged["normalize"],
                "--device", merged["device"],
            ]
            + (
                ["--max-connections", str(merged["max_connections"])]
                if merged["max_connections"] is not None
                else []
            )
        )

    def test_build_config_plain(self):
        config = build_config(self.bridge_args())
        assert (config.channels, config.width, config.height) == (3, 32, 32)
        assert config.num_classes == 10
        assert config.mean is None and config.std is None

    def test_build_config_imagenet(self):
        config = build_config(self.bridge_args(normalize="imagenet"))
        assert config.mean == IMAGENET_MEAN
        assert config.std == IMAGENET_STD

    def test_imagenet_needs_three_channels(self):
        args = self.bridge_args(shape="1x8x8", normalize="imagenet")
        with pytest.raises(ValueError, match="3 channels"):
            build_config(args)

    def test_main_reports_missing_model(self, tmp_path, capsys):
        code = cli_main(
            [
                "--model", f"torchscript:{tmp_path / 'missing.pt'}",
                "--shape", "3x32x32",
                "--classes", "10",
            ]
        )
        assert code == 2
        assert "not found" in capsys.readouterr().err

    def test_main_reports_bad_shape(self, capsys):
        code = cli_main(
            ["--model", f"torchscript:{TINY_CNN}", "--shape", "3x32", "--classes", "10"]
        )
        assert code == 2
        assert "CxWxH" in capsys.readouterr().err

    def test_tcp_transport_serves_one_connection(self):
        with socket.socket() as probe:
            probe.bind(("127.0.0.1", 0))
            port = probe.getsockname()[1]
        proc = subprocess.Popen(
            [
                sys.executable, "-m", "model_bridge",
                "--model", f"torchscript:{TINY_CNN}",
                "--shape", "3x32x32",
                "--classes", "10",
                "--transport", f"tcp:{port}",
                "--max-connections", "1",
            ],
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
        )
        try:
            conn = None
            for _ in range(100):
                try:
                    conn = socket.create_connection(("127.0.0.1", port), timeout=1.0)
                    break
                except OSError:
                    time.sleep(0.05)
            assert conn is not None, "bridge never started listening"
            with conn:
                rfile = conn.makefile("r", encoding="utf-8", newline="\n")
                wfile = conn.makefile("w", encoding="utf-8", newline="\n")
                wfile.write('{"type": "hello", "version": 1}\n')
                wfile.flush()
                meta = json.loads(rfile.readline())
                assert meta["type"] == "meta" and meta["num_classes"] == 10
                pixels = np.full((3, 32, 32), 0.25, dtype=np.float32)
                wfile.write(
                    json.dumps({"type": "predict", "id": 1, "pixels": encode(pixels)})
                    + "\n"
                )
                wfile.flush()
                reply = json.loads(rfile.readline())
                assert reply["type"] == "label" and reply["id"] == 1
                assert 0 <= reply["label"] < 10
                wfile.close()
                rfile.close()
            assert proc.wait(timeout=20) == 0
        finally:
            if proc.poll() is None:
                proc.kill()
                proc.wait()

    def test_help_runs(self):
        out = subprocess.run(
            [sys.executable, "-m", "model_bridge", "--help"],
            capture_output=True,
            text=True,
            timeout=60,
        )
        assert out.returncode == 0
        assert "--transport" in out.stdout


def _report(number: int, name: str, ok: bool, elapsed: float, ceiling: float) -> None:
    verdict = "PASS" if ok and elapsed < ceiling else "FAIL"
    print(f"ACCEPTANCE {number} {name}: {verdict} ({elapsed:.2f}s of {ceiling}s allowed)")
    assert ok, f"acceptance {number} ({name}) assertions failed"
    assert elapsed < ceiling, f"acceptance {number} ({name}) took {elapsed:.2f}s"


class TestAcceptance10:
    def test_criterion_10_bridge_conformance(self):
        started = time.monotonic()
        command = [
            sys.executable, "-m", "model_bridge",
            "--model", f"torchscript:{TINY_CNN}",
            "--shape", "3x32x32",
            "--classes", "10",
            "--transport", "stdio",
            "--normalize", "none",
        ]

        requests = (FIXTURES / "transcript_requests.jsonl").read_bytes()
        expected = (FIXTURES / "transcript_responses.jsonl").read_bytes()
        run = subprocess.run(command, input=requests, capture_output=True, timeout=60)
        transcript_ok = run.returncode == 0 and run.stdout == expected

        direct = torch.jit.load(str(TINY_CNN))
        direct.eval()
        rng = np.random.default_rng(909)
        agree = 0
        seen = set()
        proc = subprocess.Popen(
            command,
            stdin=subprocess.PIPE,
            stdout=subprocess.PIPE,
            stderr=subprocess.PIPE,
            text=True,
            bufsize=1,
        )
        try:
            proc.stdin.write('{"type": "hello", "version": 1}\n')
            proc.stdin.flush()
            meta = json.loads(proc.stdout.readline())
            assert meta["type"] == "meta"
            for i in range(1, 101):
                pixels = rng.uniform(0.0, 1.0, size=(3, 32, 32)).astype(np.float32)
                proc.stdin.write(
                    json.dumps({"type": "predict", "id": i, "pixels": encode(pixels)})
                    + "\n"
                )
                proc.stdin.flush()
                reply = json.loads(proc.stdout.readline())
                assert reply["type"] == "label" and reply["id"] == i
                with torch.no_grad():
                    scores = direct(torch.from_numpy(pixels).unsqueeze(0))
                expected_label = int(np.argmax(scores.numpy().reshape(-1)))
                seen.add(expected_label)
                if reply["label"] == expected_label:
                    agree += 1
            proc.stdin.close()
            assert proc.wait(timeout=20) == 0
        finally:
            if proc.poll() is None:
                proc.kill()
                proc.wait()

        agreement_ok = agree == 100 and len(seen) >= 3
        elapsed = time.monotonic() - started
        _report(
            10,
            "bridge conformance",
            transcript_ok and agreement_ok,
            elapsed,
            60.0,
        )
