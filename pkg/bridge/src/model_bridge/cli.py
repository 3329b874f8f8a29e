"""Command line front end: stand up one model behind the line protocol."""

from __future__ import annotations

import argparse
import sys

from .server import IMAGENET_MEAN, IMAGENET_STD, BridgeConfig, serve


def parse_shape(text: str) -> tuple[int, int, int]:
    """Parse a CxWxH spec like 3x224x224 into (channels, width, height)."""
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise ValueError(f"shape must look like CxWxH (e.g. 3x224x224), got {text!r}")
    try:
        channels, width, height = (int(p) for p in parts)
    except ValueError:
        raise ValueError(f"shape must be three integers separated by x, got {text!r}") from None
    if min(channels, width, height) < 1:
        raise ValueError(f"shape dimensions must be positive, got {text!r}")
    return channels, width, height


def build_config(args: argparse.Namespace) -> BridgeConfig:
    channels, width, height = parse_shape(args.shape)
    if args.normalize == "imagenet":
        if channels != 3:
            raise ValueError(
                f"imagenet normalization needs 3 channels, shape has {channels}"
            )
        mean: tuple[float, ...] | None = IMAGENET_MEAN
        std: tuple[float, ...] | None = IMAGENET_STD
    else:
        mean = None
        std = None
    return BridgeConfig(
        model=args.model,
        channels=channels,
        width=width,
        height=height,
        num_classes=args.classes,
        transport=args.transport,
        device=args.device,
        mean=mean,
        std=std,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="model-bridge",
        description=(
            "Serve a torch image classifier as a label-only oracle speaking "
            "newline-delimited JSON on stdio or TCP."
        ),
    )
    parser.add_argument(
        "--model",
        required=True,
        help="model spec: torchscript:<path> or torchvision:<name>",
    )
    parser.add_argument(
        "--shape",
        required=True,
        help="input shape as CxWxH, e.g. 3x224x224",
    )
    parser.add_argument(
        "--classes",
        type=int,
        required=True,
        help="number of classes the model scores",
    )
    parser.add_argument(
        "--transport",
        default="stdio",
        help="stdio (default) or tcp:<port>",
    )
    parser.add_argument(
        "--normalize",
        choices=("imagenet", "none"),
        default="none",
        help="per-channel normalization applied before inference",
    )
    parser.add_argument(
        "--device",
        default="cpu",
        help="torch device to run inference on (default cpu)",
    )
    parser.add_argument(
        "--max-connections",
        type=int,
        default=None,
        help="for tcp transport: stop after serving this many connections",
    )
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = build_config(args)
        serve(config, max_connections=args.max_connections)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        return 130
    return 0


if __name__ == "__main__":
    sys.exit(main())
