"""Batch evaluation: pairs x attacks x budgets, with deterministic seeding.

Every cell of the grid derives its RNG seed from the master seed, the pair id,
the attack's seed key, and the budget, so re-running a grid with the same
master seed reproduces every record byte for byte, regardless of worker count
or completion order. Wall-clock timings are kept out of the record rows for
the same reason.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

try:
    import tomllib  # Python >= 3.11
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .baselines import (
    InitializationFailedError,
    PointwiseParams,
    SaltPepperSchedule,
    run_pointwise,
    salt_pepper_init,
)
from .container import load_image
from .evo import AttackTrace, EvoParams, run_sparse_evo
from .image import AttackGoal, ImageTensor
from .oracle import BudgetExhaustedError, DecisionOracle, QueryBudget
from .wire import TransportError, WireProtocolError

__all__ = [
    "EvalPair",
    "load_pairs",
    "AttackSpec",
    "load_attacks",
    "parse_mutation_scheme",
    "derive_cell_seed",
    "EvalRecord",
    "run_cell",
    "run_evaluation",
    "sweep_variants",
    "GroupSummary",
    "quantile",
    "summarize",
    "summary_to_dict",
    "write_records_csv",
    "read_records_csv",
    "write_timings_csv",
    "write_trace_csv",
    "write_summary_csv",
]

_ATTACK_KINDS = ("sparse-evo", "pointwise")


@dataclass(frozen=True)
class EvalPair:
    """One evaluation instance: a source image plus optional start/target.

    A target label makes the pair targeted and requires a start image of that
    class. An untargeted pair without a start image gets one from
    salt-and-pepper noise at evaluation time, charged to the cell's budget.
    """

    pair_id: str
    source: ImageTensor
    source_label: int
    start: ImageTensor | None = None
    target_label: int | None = None

    def __post_init__(self):
        if not self.pair_id:
            raise ValueError("pair_id must be non-empty")
        if self.source_label < 0:
            raise ValueError(f"source_label must be non-negative, got {self.source_label}")
        if self.target_label is not None:
            if self.start is None:
                raise ValueError(
                    f"pair {self.pair_id}: targeted pairs need a start image of the target class"
                )
            if self.target_label == self.source_label:
                raise ValueError(
                    f"pair {self.pair_id}: target label equals the source label"
                )

    @property
    def targeted(self) -> bool:
        return self.target_label is not None


def load_pairs(path: str | Path) -> list[EvalPair]:
    """Load pairs from a JSON list; image paths are relative to the file."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, list):
        raise ValueError(f"{path}: expected a JSON list of pair objects")
    base = path.parent
    pairs = []
    seen = set()
    for entry in raw:
        pair_id = str(entry["id"])
        if pair_id in seen:
            raise ValueError(f"{path}: duplicate pair id {pair_id!r}")
        seen.add(pair_id)
        start = None
        if entry.get("start_path") is not None:
            start = load_image(base / entry["start_path"])
        pairs.append(
            EvalPair(
                pair_id=pair_id,
                source=load_image(base / entry["source_path"]),
                source_label=int(entry["source_label"]),
                start=start,
                target_label=(
                    int(entry["target_label"]) if entry.get("target_label") is not None else None
                ),
            )
        )
    return pairs


@dataclass(frozen=True)
class AttackSpec:
    """A named attack configuration for the grid.

    ``seed_key`` feeds per-cell seed derivation; sweeps give every variant the
    base attack's key so variants share seeds and differ only by the swept
    parameter.
    """

    name: str
    kind: str
    options: dict = field(default_factory=dict)
    seed_key: str = ""

    def __post_init__(self):
        if not self.name:
            raise ValueError("attack name must be non-empty")
        if self.kind not in _ATTACK_KINDS:
            raise ValueError(f"attack kind must be one of {_ATTACK_KINDS}, got {self.kind!r}")
        if not self.seed_key:
            object.__setattr__(self, "seed_key", self.name)


def load_attacks(path: str | Path) -> list[AttackSpec]:
    """Parse a TOML file with an ``[[attacks]]`` array of tables."""
    path = Path(path)
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    tables = doc.get("attacks")
    if not tables:
        raise ValueError(f"{path}: no [[attacks]] tables found")
    specs = []
    names = set()
    for table in tables:
        table = dict(table)
        name = table.pop("name", None)
        kind = table.pop("kind", None)
        if not name or not kind:
            raise ValueError(f"{path}: every [[attacks]] table needs 'name' and 'kind'")
        if name in names:
            raise ValueError(f"{path}: duplicate attack name {name!r}")
        names.add(name)
        specs.append(AttackSpec(name=name, kind=kind, options=table))
    return specs


def parse_mutation_scheme(text: str) -> tuple[str, float | None]:
    """``"ones"`` -> ("ones", None); ``"mixed:0.8"`` -> ("mixed", 0.8)."""
    if text == "ones":
        return "ones", None
    if text.startswith("mixed:"):
        return "mixed", float(text.split(":", 1)[1])
    if text == "mixed":
        return "mixed", None
    raise ValueError(f"mutation scheme must be 'ones' or 'mixed:<beta>', got {text!r}")


_EVO_OPTION_KEYS = {
    "population_size",
    "init_rate",
    "mutation_rate",
    "recombination",
    "mutation_floor",
}


def build_evo_params(options: dict, query_limit: int, rng_seed: int) -> EvoParams:
    opts = dict(options)
    scheme, beta = parse_mutation_scheme(str(opts.pop("mutation_scheme", "ones")))
    free_init = bool(opts.pop("free_init", False))
    kwargs = {k: opts.pop(k) for k in list(opts) if k in _EVO_OPTION_KEYS}
    if opts:
        raise ValueError(f"unknown sparse-evo options: {sorted(opts)}")
    if beta is not None:
        kwargs["mutation_beta"] = beta
    return EvoParams(
        query_limit=query_limit,
        rng_seed=rng_seed,
        mutation_scheme=scheme,
        count_init_queries=not free_init,
        **kwargs,
    )


def build_pointwise_params(options: dict, query_limit: int, rng_seed: int) -> PointwiseParams:
    opts = dict(options)
    selections = int(opts.pop("selections_per_query", 1))
    if opts:
        raise ValueError(f"unknown pointwise options: {sorted(opts)}")
    return PointwiseParams(
        selections_per_query=selections, query_limit=query_limit, rng_seed=rng_seed
    )


def derive_cell_seed(master_seed: int, pair_id: str, seed_key: str, budget: int) -> int:
    """First 8 bytes (little-endian) of SHA-256 over the cell's identity."""
    key = f"{master_seed}|{pair_id}|{seed_key}|{budget}".encode("utf-8")
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


@dataclass
class EvalRecord:
    pair_id: str
    attack: str
    budget: int
    seed: int
    status: str  # "ok", "setup_failed", or "transport_failed"
    success: bool
    sparsity: float
    queries_used: int
    setup_queries: int
    wall_time: float = 0.0  # never written to records.csv


def _stub_record(pair, attack, budget, seed, status, setup_queries, queries_used=0):
    return EvalRecord(
        pair_id=pair.pair_id,
        attack=attack.name,
        budget=budget,
        seed=seed,
        status=status,
        success=False,
        sparsity=1.0,
        queries_used=queries_used,
        setup_queries=setup_queries,
    )


def run_cell(
    pair: EvalPair,
    attack: AttackSpec,
    budget_limit: int,
    oracle: DecisionOracle,
    master_seed: int,
    schedule: SaltPepperSchedule = SaltPepperSchedule(),
) -> tuple[EvalRecord, AttackTrace]:
    """Run one (pair, attack, budget) cell against an already-built oracle.

    Setup queries (verifying the pair's labels) are counted separately from
    the attack budget. Pairs whose labels do not match the oracle come back
    ``setup_failed``; transport problems come back ``transport_failed``; a
    cell whose initializer finds nothing is an ordinary unsuccessful record.
    """
    seed = derive_cell_seed(master_seed, pair.pair_id, attack.seed_key, budget_limit)
    empty = AttackTrace()
    setup_queries = 0
    try:
        label = oracle.predict(pair.source)
        setup_queries += 1
        if label != pair.source_label:
            return (
                _stub_record(pair, attack, budget_limit, seed, "setup_failed", setup_queries),
                empty,
            )
        if pair.targeted:
            goal = AttackGoal.targeted(pair.target_label, pair.source_label)
            start_label = oracle.predict(pair.start)
            setup_queries += 1
            if start_label != pair.target_label:
                return (
                    _stub_record(
                        pair, attack, budget_limit, seed, "setup_failed", setup_queries
                    ),
                    empty,
                )
            start = pair.start
        else:
            goal = AttackGoal.untargeted(pair.source_label)
            if pair.start is not None:
                start_label = oracle.predict(pair.start)
                setup_queries += 1
                if start_label == pair.source_label:
                    return (
                        _stub_record(
                            pair, attack, budget_limit, seed, "setup_failed", setup_queries
                        ),
                        empty,
                    )
                start = pair.start
            else:
                start = None

        budget = QueryBudget(budget_limit)
        if start is None:
            noise_rng = np.random.default_rng(
                np.random.SeedSequence(entropy=seed, spawn_key=(1,))
            )
            try:
                found = salt_pepper_init(
                    pair.source,
                    pair.source_label,
                    oracle,
                    schedule=schedule,
                    rng=noise_rng,
                    budget=budget,
                )
                start = found.image
            except (InitializationFailedError, BudgetExhaustedError):
                record = _stub_record(
                    pair, attack, budget_limit, seed, "ok", setup_queries, budget.used
                )
                return record, empty

        if attack.kind == "sparse-evo":
            params = build_evo_params(attack.options, budget_limit, seed)
            result = run_sparse_evo(
                pair.source,
                start,
                goal,
                oracle,
                params,
                budget,
                start_verified=True,
                query_offset=budget.used,
            )
        else:
            params = build_pointwise_params(attack.options, budget_limit, seed)
            result = run_pointwise(
                pair.source,
                start,
                goal,
                oracle,
                params,
                budget,
                start_verified=True,
                query_offset=budget.used,
            )
    except (TransportError, WireProtocolError):
        return (
            _stub_record(pair, attack, budget_limit, seed, "transport_failed", setup_queries),
            empty,
        )

    record = EvalRecord(
        pair_id=pair.pair_id,
        attack=attack.name,
        budget=budget_limit,
        seed=seed,
        status="ok",
        success=result.success,
        sparsity=result.sparsity,
        queries_used=budget.used,
        setup_queries=setup_queries,
    )
    return record, result.trace


def _run_cell_task(args) -> EvalRecord:
    pair, attack, budget_limit, master_seed, schedule, oracle_factory, out_dir = args
    started = time.perf_counter()
    oracle = oracle_factory()
    try:
        record, trace = run_cell(pair, attack, budget_limit, oracle, master_seed, schedule)
    finally:
        close = getattr(oracle, "close", None)
        if close is not None:
            close()
    record.wall_time = time.perf_counter() - started
    if out_dir is not None and record.status == "ok":
        cell_dir = Path(out_dir) / attack.name / pair.pair_id / str(budget_limit)
        cell_dir.mkdir(parents=True, exist_ok=True)
        write_trace_csv(cell_dir / "trace.csv", trace)
    return record


def run_evaluation(
    pairs: list[EvalPair],
    attacks: list[AttackSpec],
    budgets: list[int],
    oracle_factory: Callable[[], DecisionOracle],
    master_seed: int,
    out_dir: str | Path | None = None,
    workers: int = 1,
    schedule: SaltPepperSchedule = SaltPepperSchedule(),
) -> list[EvalRecord]:
    """Run the full grid and return records sorted by (attack, budget, pair).

    ``oracle_factory`` is called once per cell (in the worker process when
    ``workers > 1``), so each cell gets a fresh, deterministic oracle and its
    query counter starts at zero.
    """
    if not pairs or not attacks or not budgets:
        raise ValueError("need at least one pair, one attack, and one budget")
    if len({b for b in budgets}) != len(budgets):
        raise ValueError("budgets must be distinct")
    tasks = [
        (pair, attack, budget, master_seed, schedule, oracle_factory, out_dir)
        for attack in attacks
        for pair in pairs
        for budget in budgets
    ]
    if workers <= 1:
        records = [_run_cell_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(_run_cell_task, tasks))
    records.sort(key=lambda r: (r.attack, r.budget, r.pair_id))
    return records


_SWEEP_AXES = {
    "population_size": int,
    "mutation_rate": float,
    "mutation_scheme": str,
    "recombination": str,
    "init_rate": float,
    "selections_per_query": int,
}


def sweep_variants(base: AttackSpec, axis: str, values: list) -> list[AttackSpec]:
    """One AttackSpec per swept value, all sharing the base seed key."""
    if axis not in _SWEEP_AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {sorted(_SWEEP_AXES)}")
    convert = _SWEEP_AXES[axis]
    variants = []
    for value in values:
        typed = convert(value)
        options = dict(base.options)
        options[axis] = typed
        variants.append(
            AttackSpec(
                name=f"{base.name}@{axis}={typed}",
                kind=base.kind,
                options=options,
                seed_key=base.seed_key,
            )
        )
    return variants


def quantile(values, q: float) -> float:
    """Inverted-CDF quantile: the ceil(q*n)-th order statistic (1-indexed)."""
    if not 0.0 < q <= 1.0:
        raise ValueError(f"q must lie in (0, 1], got {q}")
    ordered = sorted(values)
    if not ordered:
        raise ValueError("quantile of an empty sequence")
    # epsilon guard: 0.1 * 10 evaluates to 1.0000000000000002 and must not
    # get bumped to the second order statistic by ceil
    index = max(math.ceil(q * len(ordered) - 1e-9) - 1, 0)
    return float(ordered[index])


@dataclass
class GroupSummary:
    attack: str
    budget: int
    cells: int
    q1_sparsity: float
    median_sparsity: float
    q3_sparsity: float
    success_rates: dict[float, float]


def summarize(
    records: list[EvalRecord], thresholds: list[float]
) -> tuple[list[GroupSummary], list[EvalRecord]]:
    """Group ok records by (attack, budget); failed records come back separately.

    The success rate at threshold t counts cells that met the goal with
    sparsity strictly below t, over all ok cells of the group, so it is
    monotone non-decreasing in t.
    """
    ok = [r for r in records if r.status == "ok"]
    failed = [r for r in records if r.status != "ok"]
    groups: dict[tuple[str, int], list[EvalRecord]] = {}
    for record in ok:
        groups.setdefault((record.attack, record.budget), []).append(record)
    summaries = []
    for (attack, budget), members in sorted(groups.items()):
        sparsities = [m.sparsity for m in members]
        rates = {}
        for threshold in sorted(thresholds):
            hits = sum(1 for m in members if m.success and m.sparsity < threshold)
            rates[threshold] = hits / len(members)
        summaries.append(
            GroupSummary(
                attack=attack,
                budget=budget,
                cells=len(members),
                q1_sparsity=quantile(sparsities, 0.25),
                median_sparsity=quantile(sparsities, 0.5),
                q3_sparsity=quantile(sparsities, 0.75),
                success_rates=rates,
            )
        )
    return summaries, failed


def summary_to_dict(summaries: list[GroupSummary], failed: list[EvalRecord]) -> dict:
    return {
        "groups": [
            {
                "attack": s.attack,
                "budget": s.budget,
                "cells": s.cells,
                "sparsity": {
                    "q1": s.q1_sparsity,
                    "median": s.median_sparsity,
                    "q3": s.q3_sparsity,
                },
                "success_rate": {str(t): r for t, r in sorted(s.success_rates.items())},
            }
            for s in summaries
        ],
        "failed": [
            {
                "pair_id": r.pair_id,
                "attack": r.attack,
                "budget": r.budget,
                "status": r.status,
            }
            for r in failed
        ],
    }


_RECORD_COLUMNS = (
    "pair_id",
    "attack",
    "budget",
    "seed",
    "status",
    "success",
    "sparsity",
    "queries_used",
    "setup_queries",
)


def write_records_csv(path: str | Path, records: list[EvalRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_RECORD_COLUMNS)
        for r in records:
            writer.writerow(
                [
                    r.pair_id,
                    r.attack,
                    r.budget,
                    r.seed,
                    r.status,
                    "true" if r.success else "false",
                    repr(r.sparsity),
                    r.queries_used,
                    r.setup_queries,
                ]
            )


def read_records_csv(path: str | Path) -> list[EvalRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            records.append(
                EvalRecord(
                    pair_id=row["pair_id"],
                    attack=row["attack"],
                    budget=int(row["budget"]),
                    seed=int(row["seed"]),
                    status=row["status"],
                    success=row["success"] == "true",
                    sparsity=float(row["sparsity"]),
                    queries_used=int(row["queries_used"]),
                    setup_queries=int(row["setup_queries"]),
                )
            )
    return records


def write_timings_csv(path: str | Path, records: list[EvalRecord]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pair_id", "attack", "budget", "wall_time"])
        for r in records:
            writer.writerow([r.pair_id, r.attack, r.budget, f"{r.wall_time:.6f}"])


def write_trace_csv(path: str | Path, trace: AttackTrace) -> None:
    """Write a trace, thinning long ones: after the first 1000 entries only
    every 10th (and the final entry) is kept."""
    entries = trace.entries
    n = len(entries)
    if n > 1000:
        entries = [
            e
            for i, e in enumerate(entries)
            if i < 1000 or (i - 1000) % 10 == 0 or i == n - 1
        ]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query", "best_fitness", "best_sparsity"])
        for entry in entries:
            writer.writerow([entry.query, repr(entry.best_fitness), repr(entry.best_sparsity)])


def write_summary_csv(summaries: list[GroupSummary], thresholds: list[float]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    ordered = sorted(thresholds)
    writer.writerow(
        ["attack", "budget", "cells", "q1_sparsity", "median_sparsity", "q3_sparsity"]
        + [f"asr@{t}" for t in ordered]
    )
    for s in summaries:
        writer.writerow(
            [
                s.attack,
                s.budget,
                s.cells,
                repr(s.q1_sparsity),
                repr(s.median_sparsity),
                repr(s.q3_sparsity),
            ]
            + [repr(s.success_rates[t]) for t in ordered]
        )
    return buf.getvalue()
