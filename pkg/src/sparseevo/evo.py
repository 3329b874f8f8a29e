"""Evolutionary search for sparse label-only adversarial examples.

The search works on boolean genomes over pixel positions: bit i = 1 means
pixel i is taken from a known adversarial starting image, 0 means it keeps the
source value. Fitness of a genome is the euclidean distance between the source
and the composed image when the composed image still fools the model, and
infinite when it does not. Shrinking that distance under pick-one-of-two
composition is the same thing as shrinking the number of perturbed pixels, so
the search drives the perturbation toward minimal pixel support using nothing
but top-1 labels.

One generation costs exactly one oracle query: recombine (uniform crossover of
two members, gated by the current best), mutate (clear a fraction of the set
bits), evaluate, and replace the worst member if the offspring improves on it.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .image import ImageTensor, PixelMask, AttackGoal, compose, compose_arrays, l2_distance
from .oracle import BudgetExhaustedError, DecisionOracle, QueryBudget

__all__ = [
    "EvoParams",
    "TraceEntry",
    "AttackTrace",
    "AttackResult",
    "InitResult",
    "uniform_crossover",
    "mutate_bits",
    "evaluate_fitness",
    "initialise_population",
    "run_sparse_evo",
]

_MUTATION_SCHEMES = ("ones", "mixed")
_RECOMBINATIONS = ("best_plus_two", "three_random")


@dataclass(frozen=True)
class EvoParams:
    """Knobs for the evolutionary attack.

    ``mutation_rate`` is the fraction of set bits cleared per offspring;
    useful values scale inversely with image area (for 32x32 inputs, 0.04
    untargeted / 0.01 targeted work well; for 224x224, 0.004 / 0.001).
    ``init_rate`` is the fraction of all pixels un-perturbed per initial
    member. With ``mutation_scheme="mixed"``, a ``mutation_beta`` share of the
    mutation budget clears set bits and the remainder re-sets cleared ones.
    ``mutation_floor=1`` forces at least one cleared bit per mutation even
    when the rate rounds to zero (set 0 to allow no-op mutations).
    ``count_init_queries=False`` charges initialization to a separate
    allowance of the same size instead of the main budget.
    """

    population_size: int = 10
    init_rate: float = 0.004
    mutation_rate: float = 0.01
    query_limit: int = 1000
    mutation_scheme: str = "ones"
    mutation_beta: float = 0.8
    recombination: str = "best_plus_two"
    mutation_floor: int = 1
    count_init_queries: bool = True
    rng_seed: int = 0

    def __post_init__(self):
        if self.population_size < 2:
            raise ValueError(f"population_size must be >= 2, got {self.population_size}")
        if self.recombination == "three_random" and self.population_size < 3:
            raise ValueError("three_random recombination needs population_size >= 3")
        if not 0.0 < self.init_rate <= 1.0:
            raise ValueError(f"init_rate must be in (0, 1], got {self.init_rate}")
        if not 0.0 <= self.mutation_rate <= 1.0:
            raise ValueError(f"mutation_rate must be in [0, 1], got {self.mutation_rate}")
        if not 0.0 < self.mutation_beta <= 1.0:
            raise ValueError(f"mutation_beta must be in (0, 1], got {self.mutation_beta}")
        if self.query_limit < self.population_size:
            raise ValueError(
                f"query_limit {self.query_limit} cannot be smaller than "
                f"population_size {self.population_size}"
            )
        if self.mutation_scheme not in _MUTATION_SCHEMES:
            raise ValueError(f"mutation_scheme must be one of {_MUTATION_SCHEMES}")
        if self.recombination not in _RECOMBINATIONS:
            raise ValueError(f"recombination must be one of {_RECOMBINATIONS}")
        if self.mutation_floor not in (0, 1):
            raise ValueError(f"mutation_floor must be 0 or 1, got {self.mutation_floor}")


class TraceEntry(NamedTuple):
    query: int
    best_fitness: float
    best_sparsity: float


@dataclass
class AttackTrace:
    """Best-so-far fitness and sparsity after every oracle query."""

    entries: list[TraceEntry] = field(default_factory=list)

    def append(self, query: int, best_fitness: float, best_sparsity: float) -> None:
        self.entries.append(TraceEntry(query, float(best_fitness), float(best_sparsity)))

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]


@dataclass
class AttackResult:
    """Outcome of one attack run.

    ``success=False`` results still carry the best image and mask seen; the
    trade is reported, never hidden. ``sparsity`` is the fraction of pixel
    positions at which ``adversarial`` differs from the source, which always
    equals ``mask.popcount / mask.size``. ``population_fitnesses`` holds the
    final population's fitness values for population-based attacks (empty for
    single-candidate attacks or when initialization never completed).
    """

    adversarial: ImageTensor
    mask: PixelMask
    success: bool
    sparsity: float
    best_fitness: float
    queries_used: int
    trace: AttackTrace
    population_fitnesses: list[float] = field(default_factory=list)


@dataclass
class InitResult:
    members: list[np.ndarray]
    fitnesses: list[float]
    rejections: int


def uniform_crossover(a: np.ndarray, b: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Each bit picked from ``a`` or ``b`` with equal probability."""
    if a.shape != b.shape:
        raise ValueError("crossover parents must have equal length")
    return np.where(rng.random(a.size) < 0.5, a, b)


def mutate_bits(
    bits: np.ndarray,
    rate: float,
    rng: np.random.Generator,
    scheme: str = "ones",
    beta: float = 0.8,
    floor: int = 1,
) -> np.ndarray:
    """Mutate a genome by clearing (and, in the mixed scheme, setting) bits.

    ``ones``: clear ``floor(rate * popcount)`` randomly chosen set bits
    (at least one when ``floor=1``). ``mixed``: clear
    ``max(1, floor(rate * beta * popcount))`` set bits and set
    ``floor(n * (1 - beta) / beta)`` cleared bits, both chosen from the input
    vector before any change is applied.
    """
    out = bits.copy()
    ones = np.flatnonzero(bits)
    if ones.size == 0:
        return out
    # counts are floors of real-valued products; the tiny epsilon keeps an
    # exactly-integral product from rounding down one step (0.3 * 10 -> 2)
    if scheme == "ones":
        n = int(rate * ones.size + 1e-7)
        if floor:
            n = max(1, n)
        n = min(n, ones.size)
        if n > 0:
            out[rng.choice(ones, size=n, replace=False)] = False
    elif scheme == "mixed":
        n = max(1, int(rate * beta * ones.size + 1e-7))
        n = min(n, ones.size)
        drop = rng.choice(ones, size=n, replace=False)
        m = int(n * (1.0 - beta) / beta + 1e-7)
        zeros = np.flatnonzero(~bits)
        m = min(m, zeros.size)
        grow = rng.choice(zeros, size=m, replace=False) if m > 0 else None
        out[drop] = False
        if grow is not None:
            out[grow] = True
    else:
        raise ValueError(f"unknown mutation scheme {scheme!r}")
    return out


def evaluate_fitness(
    source: ImageTensor,
    start: ImageTensor,
    mask: PixelMask,
    goal: AttackGoal,
    oracle: DecisionOracle,
    budget: QueryBudget | None = None,
) -> float:
    """Distance to the source if the composed image meets the goal, else inf."""
    if budget is not None:
        budget.charge()
    composed = compose(source, start, mask)
    label = oracle.predict(composed)
    return l2_distance(source, composed) if goal.is_met(label) else math.inf


def initialise_population(
    source: ImageTensor,
    start: ImageTensor,
    goal: AttackGoal,
    oracle: DecisionOracle,
    params: EvoParams,
    budget: QueryBudget | None = None,
    rng: np.random.Generator | None = None,
    _on_query: Callable[[np.ndarray, float], None] | None = None,
) -> InitResult:
    """Draw the initial population around the all-differing-pixels genome.

    Each member starts from that genome with ``floor(init_rate * W * H)``
    randomly chosen set bits cleared (clamped so at least one stays set) and
    is redrawn until its composition still meets the goal. Every draw costs
    one oracle query, rejected draws included; rejections are counted in the
    result. Runs out of budget -> BudgetExhaustedError propagates.
    """
    x, xs = source.data, start.data
    seed_bits = np.any(x != xs, axis=0).reshape(-1)
    ones = np.flatnonzero(seed_bits)
    if ones.size == 0:
        raise ValueError("source and starting image are identical; nothing to search")
    if budget is None:
        budget = QueryBudget(params.query_limit)
    if rng is None:
        rng = np.random.default_rng(params.rng_seed)
    d = min(int(params.init_rate * source.pixel_count + 1e-7), ones.size - 1)

    members: list[np.ndarray] = []
    fitnesses: list[float] = []
    rejections = 0
    while len(members) < params.population_size:
        cand = seed_bits.copy()
        if d > 0:
            cand[rng.choice(ones, size=d, replace=False)] = False
        budget.charge()
        arr = compose_arrays(x, xs, cand)
        label = oracle.predict(ImageTensor._wrap(arr))
        if goal.is_met(label):
            g = float(np.sqrt(((x - arr) ** 2).sum()))
        else:
            g = math.inf
        if _on_query is not None:
            _on_query(cand, g)
        if math.isfinite(g):
            members.append(cand)
            fitnesses.append(g)
        else:
            rejections += 1
    return InitResult(members, fitnesses, rejections)


def run_sparse_evo(
    source: ImageTensor,
    start: ImageTensor,
    goal: AttackGoal,
    oracle: DecisionOracle,
    params: EvoParams,
    budget: QueryBudget | None = None,
    *,
    start_verified: bool = False,
    query_offset: int = 0,
) -> AttackResult:
    """Run the evolutionary sparse attack until the query budget is spent.

    The attack itself never spends verification queries: every candidate it
    scores was label-checked by that same query, so a finite best fitness
    proves success. If even initialization cannot produce a single member, the
    result degrades to the starting image (all differing pixels kept) and
    ``start_verified`` says whether the caller had already confirmed that
    image fools the model.

    ``budget`` defaults to a fresh ``QueryBudget(params.query_limit)``; pass a
    shared budget to account for queries an initializer already spent.
    ``query_offset`` shifts the trace's query indices by queries spent before
    the attack started.
    """
    if budget is None:
        budget = QueryBudget(params.query_limit)
    if budget.limit is None:
        raise ValueError("the attack needs a bounded query budget")
    rng = np.random.default_rng(params.rng_seed)
    trace = AttackTrace()

    x, xs = source.data, start.data
    n_pixels = source.pixel_count
    seed_bits = np.any(x != xs, axis=0).reshape(-1)

    state = {
        "queries": 0,
        "best_bits": seed_bits,
        "best_fitness": math.inf,
        "best_sparsity": int(seed_bits.sum()) / n_pixels,
    }

    def record(bits: np.ndarray, g: float) -> None:
        state["queries"] += 1
        if g < state["best_fitness"]:
            state["best_fitness"] = g
            state["best_bits"] = bits
            state["best_sparsity"] = int((bits & seed_bits).sum()) / n_pixels
        trace.append(query_offset + state["queries"], state["best_fitness"], state["best_sparsity"])

    init_budget = budget if params.count_init_queries else QueryBudget(params.query_limit)
    population: list[np.ndarray] | None = None
    try:
        init = initialise_population(
            source, start, goal, oracle, params, budget=init_budget, rng=rng, _on_query=record
        )
        population = init.members
        fitnesses = np.array(init.fitnesses, dtype=np.float64)
    except BudgetExhaustedError:
        pass

    if population is not None:
        p = params.population_size
        all_indices = np.arange(p)
        try:
            while True:
                best = int(np.argmin(fitnesses))
                if params.recombination == "best_plus_two":
                    others = all_indices[all_indices != best]
                    if others.size == 1:
                        j = q = int(others[0])
                    else:
                        j, q = rng.choice(others, size=2, replace=False)
                    child = population[best] & uniform_crossover(
                        population[j], population[q], rng
                    )
                else:
                    i0, i1, i2 = rng.choice(all_indices, size=3, replace=False)
                    child = population[i2] & uniform_crossover(
                        population[i0], population[i1], rng
                    )
                child = mutate_bits(
                    child,
                    params.mutation_rate,
                    rng,
                    scheme=params.mutation_scheme,
                    beta=params.mutation_beta,
                    floor=params.mutation_floor,
                )
                budget.charge()
                arr = compose_arrays(x, xs, child)
                label = oracle.predict(ImageTensor._wrap(arr))
                if goal.is_met(label):
                    g = float(np.sqrt(((x - arr) ** 2).sum()))
                else:
                    g = math.inf
                record(child, g)
                worst = int(np.argmax(fitnesses))
                if g < fitnesses[worst]:
                    population[worst] = child
                    fitnesses[worst] = g
        except BudgetExhaustedError:
            pass

    final_bits = state["best_bits"] & seed_bits
    mask = PixelMask(final_bits, source.width)
    adversarial = compose(source, start, mask)
    best_fitness = state["best_fitness"]
    success = math.isfinite(best_fitness) or bool(start_verified)
    return AttackResult(
        adversarial=adversarial,
        mask=mask,
        success=success,
        sparsity=mask.popcount / n_pixels,
        best_fitness=best_fitness,
        queries_used=state["queries"],
        trace=trace,
        population_fitnesses=[] if population is None else [float(f) for f in fitnesses],
    )
