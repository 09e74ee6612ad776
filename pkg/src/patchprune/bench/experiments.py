"""Experiment grids over the pruning pipeline.

Each run_* function walks a factor grid (keep rates, strategies, seeds,
removal locations, predictor architectures, dataset variants, prompt
modes), classifies a held-out split at every grid point, and returns one
ResultRow per (grid point, seed). Rows are pure functions of the inputs
and the seed: the only randomness is the per-row SeededRng handed to the
random strategy, so rerunning a grid reproduces every row bit for bit.

Grid points are independent and may be evaluated on a thread pool
(``jobs``); rows are sorted by (grid id, seed) before they are returned,
so the schedule of the pool never shows in the output.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Mapping, Sequence

import numpy as np

from ..clipcore import ClipWeights
from ..data import DatasetSplit
from ..errors import ConfigError, UsageError
from ..golden import GoldenScores, GoldenCache, ranking_from_scores
from ..nncore import SeededRng
from ..predictor import (
    PREDICTOR_KINDS,
    PredictorArch,
    PredictorTrainConfig,
    PredictorWeights,
    train_predictor,
)
from ..prompt import PROMPT_MODES, PromptState, tuned_class_embs, visual_prompts
from ..pruning import STRATEGIES, PruneSchedule, make_schedule, prune_infer

__all__ = [
    "DEFAULT_KEEP_RATES",
    "DEFAULT_LOCATION_SETS",
    "ExperimentSpec",
    "ResultRow",
    "BenchInputs",
    "VariantInputs",
    "run_keep_rate_sweep",
    "run_location_ablation",
    "run_arch_ablation",
    "run_cross_dataset",
    "run_tuning_grid",
]

DEFAULT_KEEP_RATES = (1.0, 0.9, 0.8, 0.7, 0.6, 0.5)

# Four ways to place the removal work across a six-block encoder: the
# reference spread, the same spread pushed one block later, and two
# uneven spacings that skip an early block.
DEFAULT_LOCATION_SETS = ((2, 3, 4, 5), (3, 4, 5, 6), (1, 3, 5, 6), (2, 4, 5, 6))


@dataclass(frozen=True)
class ExperimentSpec:
    """One named factor grid; unused factors keep their defaults."""

    name: str
    keep_rates: tuple[float, ...] = DEFAULT_KEEP_RATES
    strategies: tuple[str, ...] = STRATEGIES
    seeds: tuple[int, ...] = (0, 1, 2)
    locations: tuple[int, ...] = (2, 3, 4, 5)

    def validate(self, num_layers: int) -> None:
        if not self.name:
            raise ConfigError("experiment spec needs a name")
        if not self.keep_rates or not self.strategies or not self.seeds:
            raise ConfigError(f"experiment '{self.name}' has an empty factor")
        for s in self.strategies:
            if s not in STRATEGIES:
                raise ConfigError(f"unknown strategy '{s}', expected one of {STRATEGIES}")
        _check_locations(self.locations, num_layers)


def _check_locations(locations: Sequence[int], num_layers: int) -> None:
    # make_schedule enforces the lower bound and the ordering; the model
    # depth is only known here, so the upper bound lives here too. A
    # location past the last block would silently remove nothing.
    for loc in locations:
        if loc > num_layers:
            raise ConfigError(
                f"removal location {loc} exceeds the {num_layers}-block encoder"
            )


@dataclass(frozen=True)
class ResultRow:
    """One grid point under one seed.

    ``accuracy`` and ``matching_rate`` are percentages in [0, 100];
    matching_rate is the overlap between the kept token set and the
    reference (golden) kept set at the same budget, which under the
    one-ranking removal semantics equals the top-K matching rate at
    K = survivors. ``relative_macs`` divides by the unpruned forward
    with the same prompt configuration, so it always lands in (0, 1].
    ``wall_time`` is wall-clock seconds for the row's evaluation loop;
    it is the one field that is not reproducible and the report writer
    leaves it out of every file it emits.
    """

    grid_id: str
    seed: int
    accuracy: float
    matching_rate: float
    total_macs: int
    relative_macs: float
    wall_time: float = 0.0

    def validate(self) -> None:
        if not 0.0 <= self.accuracy <= 100.0:
            raise ConfigError(f"accuracy {self.accuracy} outside [0, 100]")
        if not 0.0 <= self.matching_rate <= 100.0:
            raise ConfigError(f"matching rate {self.matching_rate} outside [0, 100]")
        if not 0.0 < self.relative_macs <= 1.0 + 1e-12:
            raise ConfigError(f"relative MACs {self.relative_macs} outside (0, 1]")
        if self.total_macs <= 0:
            raise ConfigError(f"total MACs {self.total_macs} must be positive")


@dataclass(frozen=True)
class BenchInputs:
    """Frozen pipeline artifacts every grid evaluates against."""

    weights: ClipWeights
    predictor: PredictorWeights
    split: DatasetSplit
    golden: Sequence[GoldenScores]  # reference scores, one per split image
    patch_pixels: int

    def validate(self) -> None:
        if len(self.golden) != len(self.split.examples):
            raise ConfigError(
                f"{len(self.golden)} reference score sets for "
                f"{len(self.split.examples)} images"
            )
        if not self.split.examples:
            raise ConfigError("evaluation split is empty")


@dataclass(frozen=True)
class VariantInputs:
    """One dataset variant's artifacts for the transfer matrix."""

    name: str
    predictor: PredictorWeights
    split: DatasetSplit
    golden: Sequence[GoldenScores]


def _sorted_rows(rows: list[ResultRow]) -> list[ResultRow]:
    return sorted(rows, key=lambda r: (r.grid_id, r.seed))


def _map_grid(fn, points, jobs: int):
    if jobs <= 1:
        return [fn(p) for p in points]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, points))


def _kept_overlap(surviving: np.ndarray, golden: GoldenScores) -> float:
    """Percent of kept tokens the reference ranking would also keep."""
    order = ranking_from_scores(golden.normalized).order
    keep = set(order[: len(surviving)].tolist())
    hits = sum(1 for t in surviving.tolist() if t in keep)
    return 100.0 * hits / len(surviving)


def _eval_point(
    inputs: BenchInputs,
    schedule: PruneSchedule,
    strategy: str,
    grid_id: str,
    seed: int,
    *,
    baseline_macs: int | None,
    state: PromptState | None = None,
    mode: str = "t_only",
    predictor: PredictorWeights | None = None,
) -> ResultRow:
    """Classify the whole split at one grid point and fold into a row."""
    from ..data import patchify

    weights = inputs.weights
    scorer = predictor if predictor is not None else inputs.predictor
    class_embs = tuned_class_embs(weights, state)
    prompts_v = visual_prompts(state, mode)
    rng = SeededRng(seed).child(grid_id)
    start = time.perf_counter()
    hits = 0
    overlaps = []
    macs: int | None = None
    for ex, gs in zip(inputs.split.examples, inputs.golden):
        res = prune_infer(
            weights,
            patchify(ex, inputs.patch_pixels),
            schedule,
            strategy,
            class_embs,
            golden=gs,
            predictor=scorer,
            rng=rng,
            prompts_v=prompts_v,
        )
        hits += int(res.pred_label == ex.label)
        overlaps.append(_kept_overlap(res.surviving_ids, gs))
        if macs is None:
            macs = res.flops.total_macs
        elif macs != res.flops.total_macs:
            raise UsageError(
                f"MAC count changed between images at {grid_id} "
                f"({macs} then {res.flops.total_macs}); the schedule is not "
                "being applied uniformly"
            )
    elapsed = time.perf_counter() - start
    assert macs is not None
    base = baseline_macs if baseline_macs is not None else macs
    row = ResultRow(
        grid_id=grid_id,
        seed=seed,
        accuracy=100.0 * hits / len(inputs.split.examples),
        matching_rate=float(np.mean(overlaps)),
        total_macs=macs,
        relative_macs=macs / base,
        wall_time=elapsed,
    )
    row.validate()
    return row


def _unpruned_macs(
    inputs: BenchInputs,
    *,
    state: PromptState | None = None,
    mode: str = "t_only",
) -> int:
    """Measured MACs of the no-removal forward on one image."""
    from ..data import patchify

    empty = make_schedule(1.0, inputs.weights.vision.num_patches)
    res = prune_infer(
        inputs.weights,
        patchify(inputs.split.examples[0], inputs.patch_pixels),
        empty,
        "golden_oracle",
        tuned_class_embs(inputs.weights, state),
        golden=inputs.golden[0],
        prompts_v=visual_prompts(state, mode),
    )
    return res.flops.total_macs


def run_keep_rate_sweep(
    inputs: BenchInputs,
    spec: ExperimentSpec | None = None,
    *,
    jobs: int = 1,
) -> list[ResultRow]:
    """Accuracy and compute across keep rates for every removal strategy.

    The grid is keep_rates x strategies x seeds; keep rate 1.0 rows are
    the unpruned reference (relative MACs exactly 1.0, matching rate 100).
    """
    inputs.validate()
    spec = spec or ExperimentSpec(name="keep_rate_sweep")
    spec.validate(inputs.weights.vision.layers)
    n = inputs.weights.vision.num_patches
    baseline = _unpruned_macs(inputs)

    points = [
        (rate, strategy, seed)
        for rate in spec.keep_rates
        for strategy in spec.strategies
        for seed in spec.seeds
    ]

    def one(point):
        rate, strategy, seed = point
        schedule = make_schedule(rate, n, spec.locations)
        grid_id = f"keep{rate:g}/{strategy}"
        return _eval_point(
            inputs, schedule, strategy, grid_id, seed, baseline_macs=baseline
        )

    return _sorted_rows(_map_grid(one, points, jobs))


def run_location_ablation(
    inputs: BenchInputs,
    location_sets: Sequence[Sequence[int]] = DEFAULT_LOCATION_SETS,
    *,
    keep_rate: float = 0.6,
    seeds: Sequence[int] = (0, 1, 2),
    strategy: str = "predictor",
    jobs: int = 1,
) -> list[ResultRow]:
    """Same removal budget, different placements across the blocks.

    Every set removes the identical token total (the budget is rounded
    once before it is split), so the rows isolate placement.
    """
    inputs.validate()
    if not location_sets:
        raise ConfigError("at least one location set is required")
    n = inputs.weights.vision.num_patches
    layers = inputs.weights.vision.layers
    schedules = []
    for locs in location_sets:
        _check_locations(locs, layers)
        schedules.append(make_schedule(keep_rate, n, locs))
    totals = {s.total_removed for s in schedules}
    if len(totals) != 1:
        raise UsageError(f"location sets disagree on the removal total: {totals}")
    baseline = _unpruned_macs(inputs)

    points = [
        (locs, sched, seed)
        for locs, sched in zip(location_sets, schedules)
        for seed in seeds
    ]

    def one(point):
        locs, sched, seed = point
        tag = "-".join(str(l) for l in locs)
        grid_id = f"keep{keep_rate:g}/locs{tag}"
        return _eval_point(
            inputs, sched, strategy, grid_id, seed, baseline_macs=baseline
        )

    return _sorted_rows(_map_grid(one, points, jobs))


def run_arch_ablation(
    inputs: BenchInputs,
    cache: GoldenCache,
    train_split: DatasetSplit,
    *,
    kinds: Sequence[str] = PREDICTOR_KINDS,
    keep_rates: Sequence[float] = (0.9, 0.8, 0.7, 0.6, 0.5),
    seeds: Sequence[int] = (0, 1, 2),
    train_config: PredictorTrainConfig | None = None,
    locations: Sequence[int] = (2, 3, 4, 5),
    jobs: int = 1,
) -> list[ResultRow]:
    """Swap the ranking network, keep everything else fixed.

    Each architecture kind is trained per seed from the same golden cache
    (same attach layer, same split, same score targets as the shipped
    predictor), then evaluated across the keep rates. Keep rate 1.0 is
    excluded: with nothing removed the rankings never act.
    """
    inputs.validate()
    if any(abs(r - 1.0) < 1e-12 for r in keep_rates):
        raise ConfigError("arch ablation keep rates must actually remove tokens")
    config = train_config or PredictorTrainConfig()
    base_arch = inputs.predictor.arch
    attach = inputs.predictor.attach_layer
    n = inputs.weights.vision.num_patches
    layers = inputs.weights.vision.layers
    _check_locations(locations, layers)
    baseline = _unpruned_macs(inputs)

    trained: dict[tuple[str, int], PredictorWeights] = {}
    for kind in kinds:
        arch = replace(base_arch, kind=kind)
        arch.validate()
        for seed in seeds:
            result = train_predictor(
                inputs.weights,
                train_split,
                cache,
                arch,
                attach,
                config,
                SeededRng(seed).child(f"arch:{kind}"),
            )
            trained[(kind, seed)] = result.predictor.freeze()

    points = [
        (kind, rate, seed) for kind in kinds for rate in keep_rates for seed in seeds
    ]

    def one(point):
        kind, rate, seed = point
        schedule = make_schedule(rate, n, locations)
        grid_id = f"keep{rate:g}/{kind}"
        return _eval_point(
            inputs,
            schedule,
            "predictor",
            grid_id,
            seed,
            baseline_macs=baseline,
            predictor=trained[(kind, seed)],
        )

    return _sorted_rows(_map_grid(one, points, jobs))


def run_cross_dataset(
    weights: ClipWeights,
    variants: Sequence[VariantInputs],
    patch_pixels: int,
    *,
    keep_rate: float = 0.5,
    seeds: Sequence[int] = (0,),
    locations: Sequence[int] = (2, 3, 4, 5),
    jobs: int = 1,
) -> list[ResultRow]:
    """Transfer matrix: every variant's predictor scored on every variant.

    The backbone is shared; each variant contributes its own evaluation
    split, reference scores, and a predictor trained on that variant's
    ranking targets. Row train-a/eval-b prunes variant b's images with
    variant a's predictor.
    """
    if len(variants) < 2:
        raise ConfigError("the transfer matrix needs at least two variants")
    names = [v.name for v in variants]
    if len(set(names)) != len(names):
        raise ConfigError(f"variant names must be unique, got {names}")

    points = [
        (src, dst, seed) for src in variants for dst in variants for seed in seeds
    ]

    def one(point):
        src, dst, seed = point
        inp = BenchInputs(
            weights=weights,
            predictor=src.predictor,
            split=dst.split,
            golden=dst.golden,
            patch_pixels=patch_pixels,
        )
        inp.validate()
        schedule = make_schedule(
            keep_rate, weights.vision.num_patches, locations
        )
        grid_id = f"train-{src.name}/eval-{dst.name}"
        return _eval_point(
            inp,
            schedule,
            "predictor",
            grid_id,
            seed,
            baseline_macs=_unpruned_macs(inp),
        )

    return _sorted_rows(_map_grid(one, points, jobs))


def run_tuning_grid(
    inputs: BenchInputs,
    states: Mapping[str, PromptState | None],
    *,
    keep_rate: float = 0.6,
    seeds: Sequence[int] = (0, 1, 2),
    locations: Sequence[int] = (2, 3, 4, 5),
    jobs: int = 1,
) -> list[ResultRow]:
    """Prompt-tuning modes crossed with pruned and unpruned forwards.

    ``states`` maps mode names to trained prompt states; the "none" entry
    (untuned baseline) maps to None. Relative MACs are normalized per
    prompt configuration: each mode's unpruned row is its own 1.0, so the
    cost a visual prompt adds shows up in total MACs, not as a relative
    value above one.
    """
    inputs.validate()
    for mode, state in states.items():
        if mode == "none":
            if state is not None:
                raise ConfigError("the 'none' mode carries no prompt state")
        elif mode not in PROMPT_MODES:
            raise ConfigError(
                f"unknown prompt mode '{mode}', expected 'none' or one of {PROMPT_MODES}"
            )
        elif state is None:
            raise ConfigError(f"mode '{mode}' needs a trained prompt state")
    n = inputs.weights.vision.num_patches
    pruned = make_schedule(keep_rate, n, locations)
    unpruned = make_schedule(1.0, n)

    baselines = {
        mode: _unpruned_macs(
            inputs, state=state, mode=mode if mode != "none" else "t_only"
        )
        for mode, state in states.items()
    }

    points = [
        (mode, schedule, seed)
        for mode in sorted(states)
        for schedule in (pruned, unpruned)
        for seed in seeds
    ]

    def one(point):
        mode, schedule, seed = point
        tag = "pruned" if schedule.steps else "unpruned"
        grid_id = f"keep{schedule.keep_rate:g}/{mode}-{tag}"
        return _eval_point(
            inputs,
            schedule,
            "predictor",
            grid_id,
            seed,
            baseline_macs=baselines[mode],
            state=states[mode],
            mode=mode if mode != "none" else "t_only",
        )

    return _sorted_rows(_map_grid(one, points, jobs))
