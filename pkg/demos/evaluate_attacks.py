"""Run the evaluation grid over a small model and print the summary.

The harness takes a list of evaluation pairs, a list of attack configs,
and a list of query budgets, runs every (attack, budget, pair) cell with
reproducible per-cell seeds, and aggregates sparsity quantiles plus
attack success rates at chosen thresholds.

Run:  python3 demos/evaluate_attacks.py
"""

import tempfile

import numpy as np

from sparseevo.harness import (
    AttackSpec,
    EvalPair,
    run_evaluation,
    summarize,
    write_summary_csv,
)
from sparseevo.image import ImageTensor
from sparseevo.oracle import CentroidOracle

SHAPE = (3, 12, 12)
CLASSES = 4


def make_centroids():
    rng = np.random.default_rng(2718)
    return rng.integers(0, 256, size=(CLASSES,) + SHAPE) / 255.0


CENTROIDS = make_centroids()


def oracle_factory():
    # module-level so worker processes can pickle it
    return CentroidOracle([ImageTensor(c) for c in CENTROIDS])


def make_pairs(count):
    """Sources sit near a class boundary; the paired centroid is the start."""
    oracle = oracle_factory()
    rng = np.random.default_rng(31415)
    pairs = []
    while len(pairs) < count:
        a, b = rng.choice(CLASSES, size=2, replace=False)
        w = rng.uniform(0.52, 0.62)
        mixed = np.round((w * CENTROIDS[a] + (1 - w) * CENTROIDS[b]) * 255) / 255
        source = ImageTensor(mixed)
        start = ImageTensor(CENTROIDS[b].copy())
        if oracle.predict(source) != a or oracle.predict(start) == a:
            continue
        pairs.append(
            EvalPair(
                pair_id=f"pair{len(pairs):02d}",
                source=source,
                source_label=int(a),
                start=start,
            )
        )
    return pairs


def main():
    pairs = make_pairs(8)
    attacks = [
        AttackSpec(
            name="evo",
            kind="sparse-evo",
            options={"init_rate": 0.02, "mutation_rate": 0.05},
        ),
        AttackSpec(name="pw1", kind="pointwise", options={"selections_per_query": 1}),
    ]
    budgets = [300, 800]

    out_dir = tempfile.mkdtemp(prefix="attack-eval-")
    records = run_evaluation(
        pairs,
        attacks,
        budgets,
        oracle_factory,
        master_seed=7,
        out_dir=out_dir,
        workers=2,
    )
    print(f"{len(records)} cells evaluated; records + traces written under {out_dir}\n")

    summaries, failed = summarize(records, thresholds=[0.05, 0.15])
    print(write_summary_csv(summaries, thresholds=[0.05, 0.15]))
    if failed:
        print(f"{len(failed)} cells failed setup or transport")

    # the cheapest and most expensive cells, for a sense of spread
    by_queries = sorted(records, key=lambda r: r.queries_used)
    for record in (by_queries[0], by_queries[-1]):
        print(
            f"{record.attack} budget={record.budget} {record.pair_id}: "
            f"success={record.success} sparsity={record.sparsity:.4f} "
            f"queries={record.queries_used}"
        )


if __name__ == "__main__":
    main()
