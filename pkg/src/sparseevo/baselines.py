"""Baseline attacks and helpers the evolutionary search is measured against.

* pointwise descent: greedily restore source values one coordinate batch at a
  time, keeping a change only when the image still fools the model;
* salt-and-pepper initialization: find some adversarial starting image by
  corrupting pixels at increasing densities;
* sparse projection: binary-search the smallest k such that keeping only the
  k most-changed pixels of a known adversarial image still fools the model.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .evo import AttackResult, AttackTrace
from .image import (
    ImageTensor,
    PixelMask,
    AttackGoal,
    ShapeMismatchError,
    compose_arrays,
)
from .oracle import BudgetExhaustedError, DecisionOracle, QueryBudget

__all__ = [
    "PointwiseParams",
    "run_pointwise",
    "SaltPepperSchedule",
    "SaltPepperResult",
    "InitializationFailedError",
    "salt_pepper_init",
    "ProjectionResult",
    "l0_project",
]


@dataclass(frozen=True)
class PointwiseParams:
    """``selections_per_query`` coordinates are tried (and kept or reverted)
    together per oracle query; 1 is the classic variant."""

    selections_per_query: int = 1
    query_limit: int = 1000
    rng_seed: int = 0

    def __post_init__(self):
        if self.selections_per_query < 1:
            raise ValueError(
                f"selections_per_query must be >= 1, got {self.selections_per_query}"
            )
        if self.query_limit < 1:
            raise ValueError(f"query_limit must be >= 1, got {self.query_limit}")


def run_pointwise(
    source: ImageTensor,
    start: ImageTensor,
    goal: AttackGoal,
    oracle: DecisionOracle,
    params: PointwiseParams,
    budget: QueryBudget | None = None,
    *,
    start_verified: bool = False,
    query_offset: int = 0,
) -> AttackResult:
    """Random coordinate descent from an adversarial start toward the source.

    Each query picks ``selections_per_query`` distinct (channel, column, row)
    coordinates uniformly over the whole tensor, sets them to the source
    values, and keeps the change only if the image still meets the goal;
    otherwise every coordinate of the batch is restored exactly. The current
    image is feasible at all times, so the best image is the current one.
    """
    if source.shape != start.shape:
        raise ShapeMismatchError(f"image shapes differ: {source.shape} vs {start.shape}")
    if budget is None:
        budget = QueryBudget(params.query_limit)
    if budget.limit is None:
        raise ValueError("the attack needs a bounded query budget")
    rng = np.random.default_rng(params.rng_seed)
    trace = AttackTrace()

    x = source.data
    n_pixels = source.pixel_count
    n_coords = x.size
    if params.selections_per_query > n_coords:
        raise ValueError(
            f"selections_per_query {params.selections_per_query} exceeds the "
            f"{n_coords} coordinates of the image"
        )
    current = start.data.copy()
    flat = current.reshape(-1)
    x_flat = x.reshape(-1)

    queries = 0
    verified = False
    try:
        while True:
            budget.charge()
            picks = rng.choice(n_coords, size=params.selections_per_query, replace=False)
            saved = flat[picks].copy()
            flat[picks] = x_flat[picks]
            label = oracle.predict(ImageTensor._wrap(current.copy()))
            queries += 1
            if goal.is_met(label):
                verified = True
            else:
                flat[picks] = saved
            fitness = float(np.sqrt(((x - current) ** 2).sum()))
            sparsity = int(np.any(x != current, axis=0).sum()) / n_pixels
            trace.append(query_offset + queries, fitness, sparsity)
    except BudgetExhaustedError:
        pass

    bits = np.any(x != current, axis=0).reshape(-1)
    mask = PixelMask(bits, source.width)
    final = ImageTensor._wrap(current)
    return AttackResult(
        adversarial=final,
        mask=mask,
        success=verified or bool(start_verified),
        sparsity=mask.popcount / n_pixels,
        best_fitness=float(np.sqrt(((x - current) ** 2).sum())),
        queries_used=queries,
        trace=trace,
    )


class InitializationFailedError(RuntimeError):
    """No adversarial starting image was found within the noise schedule."""

    def __init__(self, message: str, queries_used: int):
        super().__init__(message)
        self.queries_used = queries_used


@dataclass(frozen=True)
class SaltPepperSchedule:
    """Noise densities tried in order, each ``repeats`` times."""

    densities: tuple[float, ...] = (0.01, 0.02, 0.05, 0.1, 0.2, 0.4, 0.7, 1.0)
    repeats: int = 10

    def __post_init__(self):
        if not self.densities:
            raise ValueError("schedule needs at least one density")
        for rho in self.densities:
            if not 0.0 < rho <= 1.0:
                raise ValueError(f"densities must lie in (0, 1], got {rho}")
        if any(b <= a for a, b in zip(self.densities, self.densities[1:])):
            raise ValueError("densities must be strictly increasing")
        if self.repeats < 1:
            raise ValueError(f"repeats must be >= 1, got {self.repeats}")


@dataclass
class SaltPepperResult:
    image: ImageTensor
    density: float
    queries_used: int


def salt_pepper_init(
    source: ImageTensor,
    source_label: int,
    oracle: DecisionOracle,
    schedule: SaltPepperSchedule = SaltPepperSchedule(),
    rng: np.random.Generator | int | None = None,
    budget: QueryBudget | None = None,
) -> SaltPepperResult:
    """Search for any misclassified image by salting random pixels.

    For each density rho, ``ceil(rho * W * H)`` distinct pixels are set to
    all-channel 0 or 1 (an even coin per pixel) and the result is checked with
    one query; the first image whose label differs from ``source_label`` wins.
    A pixel whose original value already equals the drawn extreme stays equal,
    so the winner differs from the source in at most that many pixels.
    Exhausting the whole schedule raises InitializationFailedError.
    """
    if rng is None or isinstance(rng, int):
        rng = np.random.default_rng(rng)
    x = source.data
    n_pixels = source.pixel_count
    queries = 0
    for rho in schedule.densities:
        # guard against float noise pushing an exact product just above an
        # integer (0.05 * 640 -> 32.000000000000004 must stay ceil == 32)
        count = math.ceil(rho * n_pixels - 1e-7)
        count = min(count, n_pixels)
        for _ in range(schedule.repeats):
            if budget is not None:
                budget.charge()
            picks = rng.choice(n_pixels, size=count, replace=False)
            values = (rng.random(count) < 0.5).astype(np.float64)
            noised = x.copy()
            noised.reshape(source.channels, n_pixels)[:, picks] = values
            candidate = ImageTensor._wrap(noised)
            label = oracle.predict(candidate)
            queries += 1
            if label != source_label:
                return SaltPepperResult(image=candidate, density=rho, queries_used=queries)
    raise InitializationFailedError(
        f"no misclassified image found after {queries} trials "
        f"(densities up to {schedule.densities[-1]})",
        queries_used=queries,
    )


@dataclass
class ProjectionResult:
    image: ImageTensor
    k: int
    queries_used: int


def l0_project(
    source: ImageTensor,
    adversarial: ImageTensor,
    goal: AttackGoal,
    oracle: DecisionOracle,
    norm: str = "l1",
    budget: QueryBudget | None = None,
) -> ProjectionResult:
    """Binary-search the smallest pixel support that keeps the goal met.

    Pixels are ranked by per-pixel difference magnitude, descending (stable
    order, so equal magnitudes keep index order); "project to k" keeps the
    top-k ranked pixels perturbed and restores the rest. Assuming feasibility
    is monotone in k (the caller vouches that ``adversarial`` itself, k = N,
    is feasible), the search needs at most ceil(log2(N)) + 1 queries. If the
    budget dies first, the smallest k actually verified feasible is returned.
    """
    if source.shape != adversarial.shape:
        raise ShapeMismatchError(
            f"image shapes differ: {source.shape} vs {adversarial.shape}"
        )
    diff = adversarial.data - source.data
    if norm == "l1":
        magnitude = np.abs(diff).sum(axis=0)
    elif norm == "l2":
        magnitude = np.sqrt((diff**2).sum(axis=0))
    else:
        raise ValueError(f"norm must be 'l1' or 'l2', got {norm!r}")
    order = np.argsort(-magnitude.reshape(-1), kind="stable")

    x, adv = source.data, adversarial.data
    n_pixels = source.pixel_count

    def project(k: int) -> np.ndarray:
        bits = np.zeros(n_pixels, dtype=bool)
        bits[order[:k]] = True
        return compose_arrays(x, adv, bits)

    def feasible(k: int) -> tuple[bool, np.ndarray]:
        if budget is not None:
            budget.charge()
        arr = project(k)
        label = oracle.predict(ImageTensor._wrap(arr))
        return goal.is_met(label), arr

    lower, upper = 0, n_pixels
    best_arr = adv
    queries = 0
    try:
        while upper - lower > 1:
            mid = (lower + upper) // 2
            ok, arr = feasible(mid)
            queries += 1
            if ok:
                upper = mid
                best_arr = arr
            else:
                lower = mid
        if lower == 0 and upper == 1:
            # k = 0 was never ruled out; probe it (the goal may hold at the
            # source itself, e.g. under a constant-label oracle).
            ok, arr = feasible(0)
            queries += 1
            if ok:
                upper = 0
                best_arr = arr
    except BudgetExhaustedError:
        pass
    return ProjectionResult(image=ImageTensor._wrap(best_arr), k=upper, queries_used=queries)
