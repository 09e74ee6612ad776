"""Accuracy recovery through learnable prompt tokens.

Token removal costs accuracy; this module buys some of it back without
touching backbone weights. A small bank of text prompt rows is prepended to
every class sentence, and (optionally) a learned linear map sends the same
rows into the vision width so derived rows ride along between the CLS token
and the patches. Only the prompt rows and the map train, by cross-entropy
through the pruned forward on a balanced few-shot split, with token removal
driven by the ranking predictor exactly as at inference.

Prompt rows are never candidates for removal: the pruning machinery ranks
patch positions only, so prompts survive every schedule by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clipcore import (
    ClassEmbeddings,
    ClipWeights,
    encode_image,
    encode_text,
    zero_shot_logits,
)
from .data import DatasetSplit, patchify
from .errors import ConfigError, NumericError, ParseError, ShapeError
from .nncore import (
    Adam,
    Parameter,
    SeededRng,
    Tensor,
    backward,
    concat,
    getitem,
    load_checkpoint,
    log_softmax,
    matmul,
    save_checkpoint,
    transpose,
    zero_grads,
)
from .predictor import PredictorWeights
from .pruning import PruneSchedule, removal_plan, schedule_tag

PROMPT_MODES = ("t_only", "t_and_v")


@dataclass
class PromptState:
    """Learnable prompt bank: text rows plus the cross-width projection.

    Visual rows are always derived (``project_visual_prompts``), never
    stored, so the two modalities cannot drift apart.
    """

    p_t: Parameter  # [b, d_t] text prompt rows
    m: Parameter  # [d_v, d_t] projection into the vision width

    @property
    def b(self) -> int:
        return self.p_t.shape[0]

    def parameters(self, mode: str) -> list[Parameter]:
        """The tensors that train in `mode`; the projection only moves when
        visual rows are actually injected."""
        if mode not in PROMPT_MODES:
            raise ConfigError(f"unknown prompt mode '{mode}', expected one of {PROMPT_MODES}")
        return [self.p_t, self.m] if mode == "t_and_v" else [self.p_t]

    def freeze(self) -> "PromptState":
        self.p_t.requires_grad = False
        self.m.requires_grad = False
        return self


def init_prompts(weights: ClipWeights, b: int, rng: SeededRng) -> PromptState:
    """Fresh prompt bank: small random text rows, identity-padded projection.

    The identity-like start makes the derived visual rows track the text
    rows at step zero, which keeps the first epochs stable; zero rows would
    be nearly invisible to the pre-norm blocks and stall instead.
    """
    if b < 0:
        raise ConfigError(f"prompt count must be >= 0, got {b}")
    template_len = len(weights.template_ids(weights.class_names[0]))
    if b + template_len > weights.text.max_len:
        raise ConfigError(
            f"{b} prompt tokens + {template_len} template tokens exceed "
            f"max_len {weights.text.max_len}"
        )
    d_t = weights.text.dim
    d_v = weights.vision.dim
    p_t = Parameter(rng.normal(0.02, (b, d_t)), "p_t")
    m = Parameter(np.eye(d_v, d_t, dtype=np.float32), "m")
    return PromptState(p_t=p_t, m=m)


def project_visual_prompts(state: PromptState) -> Tensor:
    """Derived visual rows, one matrix-vector product per text row."""
    if state.m.shape[1] != state.p_t.shape[1]:
        raise ShapeError(
            f"projection maps width {state.m.shape[1]}, text rows have "
            f"width {state.p_t.shape[1]}"
        )
    return matmul(state.p_t, transpose(state.m, (1, 0)))


def visual_prompts(state: PromptState | None, mode: str) -> Tensor | None:
    """Rows to hand the vision encoder, or None when nothing is injected."""
    if mode not in PROMPT_MODES:
        raise ConfigError(f"unknown prompt mode '{mode}', expected one of {PROMPT_MODES}")
    if state is None or mode == "t_only" or state.b == 0:
        return None
    return project_visual_prompts(state)


def inject_prompts(
    w_t: Tensor,
    w_v: Tensor,
    state: PromptState,
    mode: str,
    max_len: int | None = None,
) -> tuple[Tensor, Tensor]:
    """Splice prompt rows into already-embedded single sequences.

    Text rows go in front of the template; visual rows (t_and_v only) go
    between the CLS row and the patches. This is the same layout the
    encoders build internally from their `prompts_t` / `prompts_v`
    arguments; the standalone form exists for sequence-level checks.
    """
    if mode not in PROMPT_MODES:
        raise ConfigError(f"unknown prompt mode '{mode}', expected one of {PROMPT_MODES}")
    if max_len is not None and state.b + w_t.shape[0] > max_len:
        raise ConfigError(
            f"{state.b} prompt tokens + {w_t.shape[0]} text tokens exceed max_len {max_len}"
        )
    if state.b == 0:
        return w_t, w_v
    text = concat([state.p_t, w_t], axis=0)
    if mode == "t_only":
        return text, w_v
    p_v = project_visual_prompts(state)
    vision = concat([getitem(w_v, slice(0, 1)), p_v, getitem(w_v, slice(1, None))], axis=0)
    return text, vision


def tuned_class_embs(weights: ClipWeights, state: PromptState | None) -> ClassEmbeddings:
    """Class embeddings with the current prompt rows prepended (tape kept)."""
    prompts_t = state.p_t if state is not None and state.b > 0 else None
    return encode_text(weights.class_names, weights, prompts_t=prompts_t)


@dataclass
class TuneConfig:
    """Knobs for few-shot prompt tuning."""

    shots: int = 16  # examples per class in the tuning split
    b: int = 16  # prompt rows
    epochs: int = 30
    lr: float = 1e-2
    batch_size: int = 8
    mode: str = "t_and_v"

    def validate(self) -> None:
        if self.mode not in PROMPT_MODES:
            raise ConfigError(
                f"unknown prompt mode '{self.mode}', expected one of {PROMPT_MODES}"
            )
        if self.shots < 1:
            raise ConfigError(f"shots must be >= 1, got {self.shots}")
        if self.b < 0:
            raise ConfigError(f"prompt count must be >= 0, got {self.b}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class TuneLog:
    """Per-epoch record of the tuning run."""

    epoch_losses: list[float] = field(default_factory=list)
    eval_accuracy: list[float] = field(default_factory=list)


def pruned_accuracy(
    weights: ClipWeights,
    split: DatasetSplit,
    schedule: PruneSchedule,
    predictor: PredictorWeights,
    patch_pixels: int,
    *,
    state: PromptState | None = None,
    mode: str = "t_only",
) -> float:
    """Fraction of `split` classified correctly through the pruned forward.

    Removal follows the predictor ranking; `state` injects prompt rows on
    both sides according to `mode`. Pass state=None for the untuned model.
    """
    class_embs = tuned_class_embs(weights, state)
    p_v = visual_prompts(state, mode)
    n = weights.vision.num_patches
    hits = 0
    for ex in split.examples:
        plan = removal_plan(schedule, "predictor", n, predictor=predictor)
        enc = encode_image(
            weights, patchify(ex, patch_pixels), removal_plan=plan, prompts_v=p_v
        )
        logits = zero_shot_logits(enc.Z_cls, class_embs, weights["proj_v"])
        hits += int(np.argmax(logits.array) == ex.label)
    return hits / len(split.examples)


def _frozen(params: list[Parameter]):
    """Snapshot requires_grad flags and turn them off; returns the restore list."""
    saved = [(p, p.requires_grad) for p in params]
    for p in params:
        p.requires_grad = False
    return saved


def tune_prompts(
    weights: ClipWeights,
    predictor: PredictorWeights,
    schedule: PruneSchedule,
    split: DatasetSplit,
    config: TuneConfig,
    rng: SeededRng,
    *,
    patch_pixels: int,
    eval_split: DatasetSplit | None = None,
) -> tuple[PromptState, TuneLog]:
    """Fit prompt rows against the frozen, pruned model by cross-entropy.

    Every image's removal plan is rebuilt each forward, because injected
    visual rows shift the patch states the predictor reads. Per-image
    losses are summed into one scalar per minibatch and backpropagated
    once; the text-encoder subgraph is shared across the batch, and a
    single traversal is what keeps its contribution counted once.

    `eval_split`, when given, is scored through the pruned forward after
    every epoch and recorded in the log (this is the slow part; leave it
    out for training-only runs). Raises NumericError if the loss leaves
    finite range; ConfigError if `split` is not balanced at `config.shots`
    per class.
    """
    config.validate()
    n = weights.vision.num_patches
    if schedule.num_tokens != n:
        raise ConfigError(
            f"schedule was built for {schedule.num_tokens} tokens, model has {n}"
        )
    labels = split.labels()
    counts = np.bincount(labels, minlength=len(split.class_names))
    if not (counts == config.shots).all():
        raise ConfigError(
            f"tuning split must hold exactly {config.shots} examples per class, "
            f"got counts {counts.tolist()}"
        )

    state = init_prompts(weights, config.b, rng.child("init"))
    log = TuneLog()
    trainable = state.parameters(config.mode)
    saved = _frozen(list(weights.params.values()) + predictor.parameters())
    try:
        grids = [patchify(ex, patch_pixels) for ex in split.examples]
        opt = Adam(trainable, lr=config.lr)
        for epoch in range(config.epochs):
            order = rng.child(f"order:{epoch}").permutation(len(grids))
            total = 0.0
            for start in range(0, len(order), config.batch_size):
                batch = order[start : start + config.batch_size]
                zero_grads(trainable)
                class_embs = tuned_class_embs(weights, state)
                p_v = visual_prompts(state, config.mode)
                loss = None
                for i in batch:
                    plan = removal_plan(schedule, "predictor", n, predictor=predictor)
                    enc = encode_image(
                        weights, grids[i], removal_plan=plan, prompts_v=p_v
                    )
                    logits = zero_shot_logits(enc.Z_cls, class_embs, weights["proj_v"])
                    nll = getitem(log_softmax(logits), int(labels[i])) * (
                        -1.0 / len(batch)
                    )
                    val = nll.item() * len(batch)
                    if not np.isfinite(val):
                        raise NumericError(
                            f"prompt tuning diverged at epoch {epoch + 1} (image {i})"
                        )
                    total += val
                    loss = nll if loss is None else loss + nll
                backward(loss)
                opt.step()
            log.epoch_losses.append(total / len(grids))
            if eval_split is not None:
                log.eval_accuracy.append(
                    pruned_accuracy(
                        weights,
                        eval_split,
                        schedule,
                        predictor,
                        patch_pixels,
                        state=state,
                        mode=config.mode,
                    )
                )
    finally:
        for p, flag in saved:
            p.requires_grad = flag
    return state, log


def save_prompts(
    dir_path: str | Path,
    state: PromptState,
    *,
    mode: str,
    shots: int,
    schedule: PruneSchedule,
) -> None:
    meta = {
        "mode": mode,
        "b": state.b,
        "shots": shots,
        "schedule": schedule_tag(schedule),
    }
    save_checkpoint(dir_path, {"p_t": state.p_t.array, "m": state.m.array}, meta)


def load_prompts(dir_path: str | Path) -> tuple[PromptState, dict]:
    """Load a frozen prompt checkpoint; returns (state, meta)."""
    tensors, meta = load_checkpoint(dir_path)
    for key in ("mode", "b"):
        if key not in meta:
            raise ParseError(f"prompt checkpoint meta missing '{key}'")
    for key in ("p_t", "m"):
        if key not in tensors:
            raise ParseError(f"prompt checkpoint missing tensor '{key}'")
    state = PromptState(
        p_t=Parameter(tensors["p_t"], "p_t"), m=Parameter(tensors["m"], "m")
    )
    return state.freeze(), meta
