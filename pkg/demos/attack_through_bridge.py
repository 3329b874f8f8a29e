"""Attack a real torch network served behind the line protocol.

A small convolutional net is scripted and saved, then hosted by the
model-bridge CLI as a subprocess speaking newline-delimited JSON over
stdio. The attack side only ever sees labels coming back over the pipe;
it has no access to the network's weights or scores.

Needs the model-bridge package installed (pip install -e ./bridge).

Run:  python3 demos/attack_through_bridge.py
"""

import shlex
import sys
import tempfile
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from sparseevo.baselines import salt_pepper_init
from sparseevo.evo import EvoParams, run_sparse_evo
from sparseevo.image import AttackGoal, ImageTensor
from sparseevo.oracle import QueryBudget, oracle_from_spec

SHAPE = (3, 16, 16)
CLASSES = 6
BUDGET = 2000


def save_small_cnn(path: Path) -> None:
    torch.manual_seed(8)
    net = nn.Sequential(
        nn.Conv2d(3, 8, 3, stride=2),
        nn.ReLU(),
        nn.Flatten(),
        nn.Linear(8 * 7 * 7, CLASSES),
    )
    net.eval()
    torch.jit.script(net).save(str(path))


def main():
    workdir = Path(tempfile.mkdtemp(prefix="bridge-demo-"))
    model_path = workdir / "small_cnn.pt"
    save_small_cnn(model_path)
    print(f"scripted network saved to {model_path}")

    command = (
        f"{shlex.quote(sys.executable)} -m model_bridge "
        f"--model torchscript:{model_path} "
        f"--shape 3x16x16 --classes {CLASSES} --transport stdio --normalize none"
    )
    with oracle_from_spec(f"exec:{command}") as oracle:
        print(
            f"bridge reports {oracle.num_classes} classes over "
            f"{oracle.channels}x{oracle.width}x{oracle.height} input"
        )
        source = ImageTensor(np.random.default_rng(14).uniform(0.0, 1.0, size=SHAPE))
        source_label = oracle.predict(source)
        goal = AttackGoal.untargeted(source_label)
        print(f"network labels the source image {source_label}")

        budget = QueryBudget(BUDGET)
        init = salt_pepper_init(source, source_label, oracle, rng=7, budget=budget)
        print(
            f"adversarial start after {init.queries_used} noise queries "
            f"(density {init.density})"
        )

        result = run_sparse_evo(
            source,
            init.image,
            goal,
            oracle,
            EvoParams(init_rate=0.02, mutation_rate=0.05, rng_seed=5),
            budget=budget,
            start_verified=True,
            query_offset=init.queries_used,
        )
        changed = round(result.sparsity * source.pixel_count)
        final_label = oracle.predict(result.adversarial)

    print(
        f"after {result.queries_used} queries over the pipe: "
        f"success={result.success}, {changed}/{source.pixel_count} pixels changed"
    )
    print(f"network now labels the image {final_label} (source was {source_label})")


if __name__ == "__main__":
    main()
