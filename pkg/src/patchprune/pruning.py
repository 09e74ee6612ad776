"""Inference-time token removal with exact compute accounting.

A keep rate and a set of removal locations turn into a schedule: the total
token budget is removed in roughly equal chunks before several blocks, so
later layers run on progressively shorter sequences. Which tokens go is
decided by one ranking per image, computed once and consumed chunk by
chunk; four interchangeable sources for that ranking are provided, from the
cached sliding-window scores down to a seeded random order.

Compute is tracked in multiply-accumulates on two meters: the backbone
forward (embedding, blocks, classification head) and the strategy's own
scoring work. The analytic model in ``count_flops`` enumerates the same
matrix products the instrumented forward executes, so the two agree
exactly, not approximately.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .clipcore import (
    ClassEmbeddings,
    ClipWeights,
    EncodeResult,
    RemovalStep,
    VisionConfig,
    encode_image,
    zero_shot_probs,
)
from .data import TokenGrid
from .errors import ConfigError, ShapeError, UsageError
from .golden import GoldenScores
from .nncore import MacCounter, SeededRng, Tensor, mac_counter, pause_macs
from .predictor import PredictorWeights, predictor_forward

STRATEGIES = ("golden_oracle", "predictor", "cls_attention", "random")


@dataclass(frozen=True)
class KeepRate:
    """Fraction of patch tokens that survives the whole schedule."""

    rate: float

    def validate(self) -> None:
        if not 0.0 < self.rate <= 1.0:
            raise ConfigError(f"keep rate must be in (0, 1], got {self.rate}")

    def removed(self, num_tokens: int) -> int:
        """Total tokens to remove; round-half-to-even on the exact budget."""
        self.validate()
        return round((1.0 - self.rate) * num_tokens)


@dataclass(frozen=True)
class PruneSchedule:
    """Per-location removal counts, earliest location first."""

    keep_rate: float
    num_tokens: int
    steps: tuple[tuple[int, int], ...]  # (layer, drop_count), ascending layers

    @property
    def total_removed(self) -> int:
        return sum(c for _, c in self.steps)

    @property
    def locations(self) -> tuple[int, ...]:
        return tuple(l for l, _ in self.steps)

    def survivors_entering(self, layer: int) -> int:
        """Patch tokens left when block `layer` starts (after its removal)."""
        n = self.num_tokens
        for loc, count in self.steps:
            if loc <= layer:
                n -= count
        return n


def make_schedule(
    keep_rate: float,
    num_tokens: int,
    locations: Sequence[int] = (2, 3, 4, 5),
) -> PruneSchedule:
    """Split the removal budget evenly over the locations.

    The budget is rounded once, up front, from the exact value
    (1 - rate) * N; splitting it across locations uses integer division
    with the leftover going to the earliest locations. Rounding per
    location instead would change the total (a 0.6 keep rate on 196
    tokens removes 78, not 4 * 20).
    """
    if num_tokens < 1:
        raise ConfigError(f"num_tokens must be >= 1, got {num_tokens}")
    locs = tuple(int(l) for l in locations)
    if not locs:
        raise ConfigError("at least one removal location is required")
    if any(l < 1 for l in locs):
        raise ConfigError(f"removal locations must be >= 1, got {locs}")
    if any(b <= a for a, b in zip(locs, locs[1:])):
        raise ConfigError(f"removal locations must strictly increase, got {locs}")

    removed = KeepRate(keep_rate).removed(num_tokens)
    if removed >= num_tokens:
        raise ConfigError(
            f"keep rate {keep_rate} would remove all {num_tokens} tokens"
        )
    base, rem = divmod(removed, len(locs))
    counts = [base + (1 if i < rem else 0) for i in range(len(locs))]
    steps = tuple((l, c) for l, c in zip(locs, counts) if c > 0)
    return PruneSchedule(keep_rate=keep_rate, num_tokens=num_tokens, steps=steps)


def schedule_tag(schedule: PruneSchedule) -> str:
    """Short stable fingerprint of a schedule, for checkpoint metadata."""
    text = f"{schedule.keep_rate!r}:{schedule.num_tokens}:{schedule.steps!r}"
    return hashlib.sha256(text.encode("ascii")).hexdigest()[:12]


@dataclass(frozen=True)
class FlopsReport:
    """Multiply-accumulate counts for one pruned classification forward.

    ``backbone_macs`` covers patch embedding, every transformer block, and
    the projection head with class logits. ``scoring_macs`` is the
    strategy's own ranking work (nonzero only for the learned scorer; the
    attention probe runs outside the instrumented op set and the other
    strategies need no forward at all).
    """

    backbone_macs: int
    scoring_macs: int = 0

    @property
    def total_macs(self) -> int:
        return self.backbone_macs + self.scoring_macs

    @property
    def flops(self) -> int:
        return 2 * self.total_macs  # one MAC = one multiply + one add


def count_flops(
    schedule: PruneSchedule,
    vision: VisionConfig,
    *,
    num_classes: int,
    embed_dim: int,
    num_prompts: int = 0,
    strategy: str = "golden_oracle",
    predictor_arch=None,
) -> FlopsReport:
    """Analytic MAC counts for a forward under this schedule.

    Walks the same sequence lengths the pruned forward sees and sums each
    matrix product: token embedding, then per block the q/k/v/output
    projections (4 S d^2), attention score and mix products (2 S^2 d), the
    feed-forward pair (2 S d m), and finally the projection to the shared
    space plus class logits.
    """
    if strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy '{strategy}', expected one of {STRATEGIES}")
    d = vision.dim
    total = vision.num_patches * vision.patch_dim * d
    n = vision.num_patches
    removed_at = dict(schedule.steps)
    for k in range(1, vision.layers + 1):
        n -= removed_at.get(k, 0)
        s = 1 + num_prompts + n
        total += 4 * s * d * d + 2 * s * s * d + 2 * s * d * vision.mlp_dim
    total += d * embed_dim + embed_dim * num_classes

    scoring = 0
    if strategy == "predictor" and schedule.steps:
        if predictor_arch is None:
            raise UsageError("counting the predictor strategy needs its architecture")
        # One forward over the full grid at the attach point: the channel
        # product [N, d] @ [d, d] and the token product [d, N] @ [N, N].
        np_, dp = schedule.num_tokens, predictor_arch.dim
        scoring = np_ * dp * dp + dp * np_ * np_
    return FlopsReport(backbone_macs=total, scoring_macs=scoring)


@dataclass
class PruneResult:
    probs: np.ndarray  # [num_classes]
    pred_label: int
    surviving_ids: np.ndarray
    flops: FlopsReport
    encode: EncodeResult


def _priority_fn(
    strategy: str,
    num_tokens: int,
    golden: GoldenScores | np.ndarray | None,
    predictor: PredictorWeights | None,
    rng: SeededRng | None,
    first_layer: int,
):
    """Build the one-shot keep-priority source for a strategy.

    Returns a callable(ctx) -> float64 priorities over the ORIGINAL token
    ids; higher means keep longer. Strategies that need nothing from the
    forward compute their vector immediately.
    """
    if strategy == "golden_oracle":
        if golden is None:
            raise UsageError("golden_oracle strategy needs per-image golden scores")
        scores = golden.normalized if isinstance(golden, GoldenScores) else golden
        scores = np.asarray(scores, dtype=np.float64)
        if scores.shape != (num_tokens,):
            raise ShapeError(
                f"golden scores cover {scores.shape} tokens, image has {num_tokens}"
            )
        fixed = -scores  # high window score = redundant = drop first
        return lambda ctx: fixed

    if strategy == "random":
        if rng is None:
            raise UsageError("random strategy needs a seeded rng")
        fixed = rng.permutation(num_tokens).astype(np.float64)
        return lambda ctx: fixed

    if strategy == "cls_attention":

        def probe(ctx):
            full = np.full(num_tokens, -np.inf)
            full[ctx.surviving_ids] = ctx.cls_attention()
            return full

        return probe

    if strategy == "predictor":
        if predictor is None:
            raise UsageError("predictor strategy needs trained predictor weights")
        if predictor.attach_layer != first_layer:
            raise ConfigError(
                f"predictor reads layer {predictor.attach_layer} states but the "
                f"schedule first removes at layer {first_layer}; align them"
            )

        def learned(ctx):
            s_hat = predictor_forward(
                predictor, Tensor(ctx.patch_states), token_ids=ctx.surviving_ids
            )
            full = np.full(num_tokens, -np.inf)
            full[ctx.surviving_ids] = -s_hat.array.astype(np.float64)
            return full

        return learned

    raise ConfigError(f"unknown strategy '{strategy}', expected one of {STRATEGIES}")


def removal_plan(
    schedule: PruneSchedule,
    strategy: str,
    num_tokens: int,
    *,
    golden: GoldenScores | np.ndarray | None = None,
    predictor: PredictorWeights | None = None,
    rng: SeededRng | None = None,
    meter: MacCounter | None = None,
) -> list[RemovalStep]:
    """Turn a schedule plus strategy into scored removal steps for one image.

    The strategy's ranking is computed once, at the first removal location,
    and later locations drop the next-lowest chunk of that same ordering;
    this matches how the cached reference ranking is consumed and keeps the
    strategies comparable. Any matmuls the scorer itself runs are hidden
    from counters active over the forward and tallied into `meter` instead,
    when one is given. The plan is single-use: it holds the ranking as
    state, so build a fresh plan for every image.
    """
    first = schedule.steps[0][0] if schedule.steps else 1
    priority = _priority_fn(strategy, num_tokens, golden, predictor, rng, first)
    state: dict[str, np.ndarray] = {}

    def scorer(ctx):
        if "priority" not in state:
            with pause_macs():
                with mac_counter() as inner:
                    state["priority"] = np.asarray(priority(ctx), dtype=np.float64)
            if meter is not None:
                meter.macs += inner.macs
        return state["priority"][ctx.surviving_ids]

    return [
        RemovalStep(layer=layer, drop_count=count, scorer=scorer)
        for layer, count in schedule.steps
    ]


def prune_infer(
    weights: ClipWeights,
    grid: TokenGrid,
    schedule: PruneSchedule,
    strategy: str,
    class_embs: ClassEmbeddings,
    *,
    golden: GoldenScores | np.ndarray | None = None,
    predictor: PredictorWeights | None = None,
    rng: SeededRng | None = None,
    prompts_v: Tensor | None = None,
) -> PruneResult:
    """Classify one image while removing tokens per the schedule.

    Both MAC meters run over the real forward; see `removal_plan` for the
    one-ranking semantics shared by every strategy.
    """
    n = weights.vision.num_patches
    if schedule.num_tokens != n:
        raise ConfigError(
            f"schedule was built for {schedule.num_tokens} tokens, model has {n}"
        )
    scoring = MacCounter()
    plan = removal_plan(
        schedule,
        strategy,
        n,
        golden=golden,
        predictor=predictor,
        rng=rng,
        meter=scoring,
    )
    with mac_counter() as backbone:
        enc = encode_image(weights, grid, removal_plan=plan, prompts_v=prompts_v)
        probs = zero_shot_probs(enc.Z_cls, class_embs, weights["proj_v"])
    report = FlopsReport(backbone_macs=backbone.macs, scoring_macs=scoring.macs)
    probs_np = probs.array.copy()
    return PruneResult(
        probs=probs_np,
        pred_label=int(np.argmax(probs_np)),
        surviving_ids=enc.surviving_ids,
        flops=report,
        encode=enc,
    )
