"""Command line front end.

Subcommands: ``attack sparse-evo``, ``attack pointwise``, ``init salt-pepper``,
``project l0``, ``eval``, ``sweep``, ``report``, ``toy-server``.

Exit codes: 0 success, 1 the command ran but the attack/search did not
succeed, 2 usage or runtime error.
"""
from __future__ import annotations

import argparse
import functools
import json
import sys
from pathlib import Path

import numpy as np

from . import harness
from .baselines import (
    InitializationFailedError,
    PointwiseParams,
    SaltPepperSchedule,
    l0_project,
    run_pointwise,
    salt_pepper_init,
)
from .container import ContainerFormatError, load_image, save_image
from .evo import run_sparse_evo
from .image import AttackGoal, ImageTensor
from .oracle import BudgetExhaustedError, QueryBudget, oracle_from_spec
from .wire import TransportError, WireProtocolError, serve_stdio, serve_tcp

__all__ = ["main"]


def _parse_shape(text: str) -> tuple[int, int, int]:
    parts = text.lower().split("x")
    if len(parts) != 3:
        raise ValueError(f"shape must look like CxWxH (e.g. 3x32x32), got {text!r}")
    c, w, h = (int(p) for p in parts)
    return c, w, h


def _parse_int_list(text: str) -> list[int]:
    return [int(p) for p in text.split(",") if p]


def _parse_float_list(text: str) -> list[float]:
    return [float(p) for p in text.split(",") if p]


def _oracle_for_image(args, image: ImageTensor):
    shape = (image.channels, image.width, image.height)
    return oracle_from_spec(args.oracle, shape=shape, num_classes=args.classes)


def _noise_rng(seed: int) -> np.random.Generator:
    # Same derivation the harness uses, so CLI runs match harness cells.
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(1,)))


def _print_kv(**fields) -> None:
    for key, value in fields.items():
        if isinstance(value, float):
            value = repr(value)
        elif isinstance(value, bool):
            value = "true" if value else "false"
        print(f"{key} {value}")


def _cmd_attack(args) -> int:
    source = load_image(args.source)
    oracle = _oracle_for_image(args, source)
    setup_queries = 0

    source_label = oracle.predict(source)
    setup_queries += 1
    if args.source_label is not None and source_label != args.source_label:
        raise ValueError(
            f"oracle labels the source {source_label}, expected {args.source_label}"
        )

    if args.mode == "targeted":
        if args.target_label is None:
            raise ValueError("targeted mode needs --target-label")
        if args.start is None:
            raise ValueError("targeted mode needs --start (an image of the target class)")
        goal = AttackGoal.targeted(args.target_label, source_label)
        start = load_image(args.start)
        start_label = oracle.predict(start)
        setup_queries += 1
        if start_label != args.target_label:
            raise ValueError(
                f"oracle labels the start image {start_label}, expected target "
                f"{args.target_label}"
            )
    else:
        goal = AttackGoal.untargeted(source_label)
        if args.start is not None:
            start = load_image(args.start)
            start_label = oracle.predict(start)
            setup_queries += 1
            if start_label == source_label:
                raise ValueError("the start image is not adversarial for the source label")
        else:
            start = None

    budget = QueryBudget(args.budget)
    if start is None:
        try:
            found = salt_pepper_init(
                source, source_label, oracle, rng=_noise_rng(args.seed), budget=budget
            )
        except (InitializationFailedError, BudgetExhaustedError) as exc:
            print(f"no adversarial starting image found ({exc})", file=sys.stderr)
            return 1
        start = found.image

    if args.attack_kind == "sparse-evo":
        params = harness.build_evo_params(
            {
                "population_size": args.pop_size,
                "init_rate": args.init_rate,
                "mutation_rate": args.mutation_rate,
                "mutation_scheme": args.mutation_scheme,
                "recombination": args.recombination,
                "mutation_floor": args.mutation_floor,
                "free_init": args.free_init,
            },
            args.budget,
            args.seed,
        )
        result = run_sparse_evo(
            source, start, goal, oracle, params, budget,
            start_verified=True, query_offset=budget.used,
        )
    else:
        params = PointwiseParams(
            selections_per_query=args.np, query_limit=args.budget, rng_seed=args.seed
        )
        result = run_pointwise(
            source, start, goal, oracle, params, budget,
            start_verified=True, query_offset=budget.used,
        )

    if args.out:
        save_image(result.adversarial, args.out, format=args.out_format)
    if args.trace:
        harness.write_trace_csv(args.trace, result.trace)
    _print_kv(
        success=result.success,
        sparsity=result.sparsity,
        pixels=result.mask.popcount,
        best_fitness=result.best_fitness,
        queries=budget.used,
        setup_queries=setup_queries,
    )
    return 0 if result.success else 1


def _cmd_init_salt_pepper(args) -> int:
    source = load_image(args.source)
    oracle = _oracle_for_image(args, source)
    setup_queries = 0
    if args.source_label is not None:
        source_label = args.source_label
    else:
        source_label = oracle.predict(source)
        setup_queries += 1
    budget = QueryBudget(args.budget) if args.budget else None
    try:
        found = salt_pepper_init(
            source,
            source_label,
            oracle,
            rng=_noise_rng(args.seed),
            budget=budget,
        )
    except (InitializationFailedError, BudgetExhaustedError) as exc:
        print(f"initialization failed: {exc}", file=sys.stderr)
        return 1
    if args.out:
        save_image(found.image, args.out, format=args.out_format)
    _print_kv(density=found.density, queries=found.queries_used, setup_queries=setup_queries)
    return 0


def _cmd_project_l0(args) -> int:
    source = load_image(args.source)
    adversarial = load_image(args.adv)
    oracle = _oracle_for_image(args, source)

    setup_queries = 0
    if args.mode == "targeted":
        if args.target_label is None:
            raise ValueError("targeted mode needs --target-label")
        goal = AttackGoal.targeted(args.target_label)
    else:
        if args.source_label is not None:
            source_label = args.source_label
        else:
            source_label = oracle.predict(source)
            setup_queries += 1
        goal = AttackGoal.untargeted(source_label)

    check = oracle.predict(adversarial)
    setup_queries += 1
    if not goal.is_met(check):
        raise ValueError(
            f"the given adversarial image does not meet the goal (labeled {check})"
        )

    budget = QueryBudget(args.budget) if args.budget else None
    result = l0_project(source, adversarial, goal, oracle, norm=args.proj_norm, budget=budget)
    if args.out:
        save_image(result.image, args.out, format=args.out_format)
    _print_kv(
        k=result.k,
        queries=result.queries_used,
        setup_queries=setup_queries,
        sparsity=result.k / source.pixel_count,
    )
    return 0


def _build_eval_inputs(args):
    pairs = harness.load_pairs(args.pairs)
    shape = (pairs[0].source.channels, pairs[0].source.width, pairs[0].source.height)
    factory = functools.partial(
        oracle_from_spec, args.oracle, shape=shape, num_classes=args.classes
    )
    return pairs, factory


def _write_eval_outputs(args, records, thresholds) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    harness.write_records_csv(out / "records.csv", records)
    harness.write_timings_csv(out / "timings.csv", records)
    summaries, failed = harness.summarize(records, thresholds)
    payload = harness.summary_to_dict(summaries, failed)
    (out / "summary.json").write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    sys.stdout.write(harness.write_summary_csv(summaries, thresholds))


def _cmd_eval(args) -> int:
    pairs, factory = _build_eval_inputs(args)
    attacks = harness.load_attacks(args.attacks)
    records = harness.run_evaluation(
        pairs,
        attacks,
        args.budgets,
        factory,
        args.master_seed,
        out_dir=args.out,
        workers=args.workers,
    )
    _write_eval_outputs(args, records, args.thresholds)
    return 0


def _cmd_sweep(args) -> int:
    pairs, factory = _build_eval_inputs(args)
    attacks = harness.load_attacks(args.attacks)
    by_name = {a.name: a for a in attacks}
    if args.attack not in by_name:
        raise ValueError(f"attack {args.attack!r} not found in {args.attacks}")
    variants = harness.sweep_variants(by_name[args.attack], args.axis, args.values.split(","))
    records = harness.run_evaluation(
        pairs,
        variants,
        args.budgets,
        factory,
        args.master_seed,
        out_dir=args.out,
        workers=args.workers,
    )
    _write_eval_outputs(args, records, args.thresholds)
    return 0


def _cmd_report(args) -> int:
    path = Path(args.in_path)
    if path.is_dir():
        path = path / "records.csv"
    records = harness.read_records_csv(path)
    summaries, failed = harness.summarize(records, args.thresholds)
    if args.format == "json":
        payload = harness.summary_to_dict(summaries, failed)
        sys.stdout.write(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    else:
        sys.stdout.write(harness.write_summary_csv(summaries, args.thresholds))
    return 0


def _cmd_toy_server(args) -> int:
    oracle = oracle_from_spec(args.oracle, shape=args.shape, num_classes=args.classes)
    if args.transport == "stdio":
        serve_stdio(oracle)
        return 0
    if args.transport.startswith("tcp:"):
        rest = args.transport[4:]
        host, _, port = rest.rpartition(":")
        host = host or "127.0.0.1"
        serve_tcp(oracle, host, int(port), max_connections=args.max_connections)
        return 0
    raise ValueError(f"transport must be 'stdio' or 'tcp:[host:]port', got {args.transport!r}")


def _add_common_attack_args(sub) -> None:
    sub.add_argument("--mode", choices=["untargeted", "targeted"], default="untargeted")
    sub.add_argument("--source", required=True, help="source image container file")
    sub.add_argument("--start", help="adversarial starting image (required for targeted)")
    sub.add_argument("--source-label", type=int, help="expected source label (verified)")
    sub.add_argument("--target-label", type=int, help="target class for targeted mode")
    sub.add_argument("--budget", type=int, required=True, help="total query budget")
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--oracle", required=True, help="oracle selector (toy:/exec:/tcp:)")
    sub.add_argument("--classes", type=int, default=10, help="class count for toy oracles")
    sub.add_argument("--trace", help="write per-query best-so-far CSV here")
    sub.add_argument("--out", help="write the adversarial image here")
    sub.add_argument("--out-format", choices=["binary", "text"], default="binary")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparseevo",
        description="Sparse label-only adversarial attacks and their evaluation harness.",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    attack = commands.add_parser("attack", help="run a single attack")
    attack_kinds = attack.add_subparsers(dest="attack_kind", required=True)

    se = attack_kinds.add_parser("sparse-evo", help="evolutionary sparse attack")
    _add_common_attack_args(se)
    se.add_argument("--pop-size", type=int, default=10, dest="pop_size")
    se.add_argument("--init-rate", type=float, default=0.004)
    se.add_argument(
        "--mutation-rate",
        type=float,
        default=0.01,
        help="fraction of set bits cleared per offspring "
        "(32x32: 0.04 untargeted / 0.01 targeted; 224x224: 0.004 / 0.001)",
    )
    se.add_argument(
        "--mutation-scheme",
        default="ones",
        help="'ones' or 'mixed:<beta>', e.g. mixed:0.8",
    )
    se.add_argument(
        "--recombination",
        choices=["best_plus_two", "three_random"],
        default="best_plus_two",
    )
    se.add_argument("--mutation-floor", type=int, choices=[0, 1], default=1)
    se.add_argument(
        "--free-init",
        action="store_true",
        help="charge initialization to a separate allowance instead of the budget",
    )
    se.set_defaults(func=_cmd_attack)

    pw = attack_kinds.add_parser("pointwise", help="random coordinate descent baseline")
    _add_common_attack_args(pw)
    pw.add_argument("--np", type=int, default=1, help="coordinates tried per query")
    pw.set_defaults(func=_cmd_attack)

    init = commands.add_parser("init", help="find an adversarial starting image")
    init_kinds = init.add_subparsers(dest="init_kind", required=True)
    sp = init_kinds.add_parser("salt-pepper", help="random extreme-pixel noise search")
    sp.add_argument("--source", required=True)
    sp.add_argument("--source-label", type=int)
    sp.add_argument("--oracle", required=True)
    sp.add_argument("--classes", type=int, default=10)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--budget", type=int, help="optional cap on trials")
    sp.add_argument("--out")
    sp.add_argument("--out-format", choices=["binary", "text"], default="binary")
    sp.set_defaults(func=_cmd_init_salt_pepper)

    project = commands.add_parser("project", help="shrink an adversarial perturbation")
    project_kinds = project.add_subparsers(dest="project_kind", required=True)
    l0 = project_kinds.add_parser("l0", help="binary-search the smallest pixel support")
    l0.add_argument("--source", required=True)
    l0.add_argument("--adv", required=True, help="known adversarial image")
    l0.add_argument("--mode", choices=["untargeted", "targeted"], default="untargeted")
    l0.add_argument("--source-label", type=int)
    l0.add_argument("--target-label", type=int)
    l0.add_argument("--oracle", required=True)
    l0.add_argument("--classes", type=int, default=10)
    l0.add_argument("--proj-norm", choices=["l1", "l2"], default="l1")
    l0.add_argument("--budget", type=int)
    l0.add_argument("--out")
    l0.add_argument("--out-format", choices=["binary", "text"], default="binary")
    l0.set_defaults(func=_cmd_project_l0)

    ev = commands.add_parser("eval", help="run an attacks x pairs x budgets grid")
    ev.add_argument("--pairs", required=True, help="pairs JSON file")
    ev.add_argument("--attacks", required=True, help="attacks TOML file")
    ev.add_argument("--budgets", type=_parse_int_list, required=True)
    ev.add_argument("--thresholds", type=_parse_float_list, default=[0.01])
    ev.add_argument("--workers", type=int, default=1)
    ev.add_argument("--master-seed", type=int, default=0)
    ev.add_argument("--oracle", required=True)
    ev.add_argument("--classes", type=int, default=10)
    ev.add_argument("--out", required=True, help="output directory")
    ev.set_defaults(func=_cmd_eval)

    sw = commands.add_parser("sweep", help="vary one attack parameter across values")
    sw.add_argument("--pairs", required=True)
    sw.add_argument("--attacks", required=True)
    sw.add_argument("--attack", required=True, help="base attack name from the TOML")
    sw.add_argument("--axis", required=True)
    sw.add_argument("--values", required=True, help="comma-separated values")
    sw.add_argument("--budgets", type=_parse_int_list, required=True)
    sw.add_argument("--thresholds", type=_parse_float_list, default=[0.01])
    sw.add_argument("--workers", type=int, default=1)
    sw.add_argument("--master-seed", type=int, default=0)
    sw.add_argument("--oracle", required=True)
    sw.add_argument("--classes", type=int, default=10)
    sw.add_argument("--out", required=True)
    sw.set_defaults(func=_cmd_sweep)

    rep = commands.add_parser("report", help="summarize an eval output directory")
    rep.add_argument("--in", dest="in_path", required=True, help="directory or records.csv")
    rep.add_argument("--format", choices=["csv", "json"], default="csv")
    rep.add_argument("--thresholds", type=_parse_float_list, default=[0.01])
    rep.set_defaults(func=_cmd_report)

    server = commands.add_parser("toy-server", help="serve a toy oracle over the line protocol")
    server.add_argument("--oracle", required=True)
    server.add_argument("--shape", type=_parse_shape, default=(3, 32, 32), help="CxWxH")
    server.add_argument("--classes", type=int, default=10)
    server.add_argument("--transport", default="stdio", help="stdio or tcp:[host:]port")
    server.add_argument(
        "--max-connections", type=int, help="serve this many TCP connections, then exit"
    )
    server.set_defaults(func=_cmd_toy_server)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (
        ValueError,
        OSError,
        KeyError,
        ContainerFormatError,
        TransportError,
        WireProtocolError,
    ) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
