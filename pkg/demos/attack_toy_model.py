"""Walk one image through the whole attack pipeline, in process.

A linear toy model stands in for the classifier. Salt-and-pepper noise
finds some adversarial image first, then the evolutionary attack shrinks
the number of changed pixels under a shared query budget. The pointwise
baseline runs from the same starting image for comparison.

Run:  python3 demos/attack_toy_model.py
"""

import numpy as np

from sparseevo.baselines import PointwiseParams, run_pointwise, salt_pepper_init
from sparseevo.evo import EvoParams, run_sparse_evo
from sparseevo.image import AttackGoal, ImageTensor
from sparseevo.oracle import LinearToyOracle, QueryBudget

SHAPE = (3, 16, 16)
CLASSES = 8
BUDGET = 2500


def make_source(rng):
    return ImageTensor(rng.integers(0, 256, size=(3, 16, 16)) / 255.0)


def describe(tag, result, pixel_count):
    changed = round(result.sparsity * pixel_count)
    print(
        f"{tag:<10} success={result.success} queries={result.queries_used} "
        f"changed_pixels={changed}/{pixel_count} sparsity={result.sparsity:.4f}"
    )


def main():
    oracle = LinearToyOracle(seed=17, shape=SHAPE, num_classes=CLASSES)
    source = make_source(np.random.default_rng(14))
    source_label = oracle.predict(source)
    goal = AttackGoal.untargeted(source_label)
    print(f"source image labelled {source_label}; any other label counts as a win")

    # Stage 1: find any misclassified image at all. Every noise trial is one
    # model query and is charged against the same budget the attack will use.
    budget = QueryBudget(BUDGET)
    init = salt_pepper_init(source, source_label, oracle, rng=7, budget=budget)
    start_label = oracle.predict(init.image)
    print(
        f"salt-and-pepper start found after {init.queries_used} queries "
        f"at density {init.density} (label {start_label})"
    )

    # Stage 2: evolve a boolean pixel mask that keeps the misclassification
    # while restoring as many pixels to their source values as possible.
    evo = run_sparse_evo(
        source,
        init.image,
        goal,
        oracle,
        EvoParams(init_rate=0.02, mutation_rate=0.05, rng_seed=99),
        budget=budget,
        start_verified=True,
        query_offset=init.queries_used,
    )

    print("\nbest-so-far trajectory (query, changed pixel fraction):")
    marks = [0, 25, 75, 150, 300, len(evo.trace) // 2, -1]
    for m in marks:
        entry = evo.trace[m]
        print(f"  query {entry.query:>5}  sparsity {entry.best_sparsity:.4f}")

    # The pointwise baseline gets its own budget of the same size and walks
    # from the same starting image, one random pixel at a time.
    pw = run_pointwise(
        source,
        init.image,
        goal,
        oracle,
        PointwiseParams(rng_seed=99),
        budget=QueryBudget(BUDGET - init.queries_used),
        start_verified=True,
    )

    print()
    describe("evolved", evo, source.pixel_count)
    describe("pointwise", pw, source.pixel_count)
    final_label = oracle.predict(evo.adversarial)
    print(f"\nevolved image classifies as {final_label} (source was {source_label})")


if __name__ == "__main__":
    main()
