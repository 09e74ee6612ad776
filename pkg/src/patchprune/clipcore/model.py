"""Tiny dual encoder: a ViT with CLS token over patch tokens, a toy text
encoder over class-prompt sequences, and cosine zero-shot classification.

The vision path supports removal plans: at chosen layers, selected patch
tokens are deleted from the sequence before that layer's block executes.
Survivors keep their original positional embeddings, the CLS token and any
injected visual prompt tokens are never removable, and intermediate states
and CLS attention maps can be captured per layer for downstream consumers.

Layer indices are 1-based everywhere ("remove at layer 2" means the tokens
are gone before block 2 runs).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from ..errors import (
    ConfigError,
    LogicError,
    NumericError,
    ScheduleError,
    ShapeError,
    UsageError,
)
from ..nncore.optim import Parameter
from ..nncore.rng import SeededRng
from ..nncore.tensor import (
    Tensor,
    concat,
    gather_rows,
    getitem,
    index_rows,
    layer_norm,
    matmul,
    gelu,
    pow_scalar,
    reshape,
    softmax,
    transpose,
    tsum,
)
from ..data import TokenGrid

__all__ = [
    "VisionConfig",
    "TextConfig",
    "ClipWeights",
    "EncodeResult",
    "ClassEmbeddings",
    "RemovalStep",
    "RemovalContext",
    "init_weights",
    "embed_image_tokens",
    "run_vision_blocks",
    "finalize_vision",
    "encode_image",
    "encode_text",
    "zero_shot_probs",
    "cls_attention_scores",
    "LOGIT_SCALE_INIT",
    "LOGIT_SCALE_MAX",
]

LOGIT_SCALE_INIT = 2.659  # exp(2.659) ~ 1/0.07
LOGIT_SCALE_MAX = float(np.log(100.0))

_TEMPLATE_WORDS = ("a", "photo", "of", "a")  # then the class word


@dataclass(frozen=True)
class VisionConfig:
    layers: int = 6
    dim: int = 64
    heads: int = 4
    mlp_ratio: float = 4.0
    num_patches: int = 64
    patch_dim: int = 48  # 3 * p * p

    def validate(self) -> None:
        if self.dim % self.heads:
            raise ConfigError(f"vision dim {self.dim} not divisible by heads {self.heads}")
        if self.layers < 4:
            raise ConfigError(f"vision layers must be >= 4, got {self.layers}")

    @property
    def mlp_dim(self) -> int:
        return int(self.dim * self.mlp_ratio)


@dataclass(frozen=True)
class TextConfig:
    layers: int = 2
    dim: int = 32
    heads: int = 4
    mlp_ratio: float = 4.0
    max_len: int = 24
    embed_dim: int = 32  # shared image/text embedding space

    def validate(self) -> None:
        if self.dim % self.heads:
            raise ConfigError(f"text dim {self.dim} not divisible by heads {self.heads}")
        if self.max_len < len(_TEMPLATE_WORDS) + 1:
            raise ConfigError(f"text max_len {self.max_len} cannot hold the template")

    @property
    def mlp_dim(self) -> int:
        return int(self.dim * self.mlp_ratio)


@dataclass
class ClipWeights:
    """All parameters in one flat named map, plus the fixed vocabulary."""

    vision: VisionConfig
    text: TextConfig
    class_names: list[str]
    vocab: dict[str, int]
    params: dict[str, Parameter] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def freeze(self) -> "ClipWeights":
        for p in self.params.values():
            p.requires_grad = False
        return self

    def unfreeze(self) -> "ClipWeights":
        for p in self.params.values():
            p.requires_grad = True
        return self

    def template_ids(self, class_name: str) -> list[int]:
        if class_name not in self.vocab:
            raise ConfigError(f"unknown class name '{class_name}'")
        return [self.vocab[w] for w in _TEMPLATE_WORDS] + [self.vocab[class_name]]

    def logit_scale_value(self) -> float:
        return float(np.exp(min(self.params["logit_scale"].item(), LOGIT_SCALE_MAX)))


@dataclass
class EncodeResult:
    Z: Tensor  # [N', d_v] final patch states
    Z_cls: Tensor  # [d_v] final CLS state (pre-projection)
    intermediates: dict[int, np.ndarray]  # layer -> [(1 + b + N'), d_v] pre-block state
    cls_attention: dict[int, np.ndarray]  # layer -> patch slice of the CLS softmax row
    surviving_ids: np.ndarray  # original token indices, ascending
    num_prompts: int


@dataclass
class ClassEmbeddings:
    E: Tensor  # [num_classes, d_e], unit rows
    logit_scale: float


@dataclass
class RemovalContext:
    """What a score-driven removal step gets to look at, mid-forward."""

    layer: int
    surviving_ids: np.ndarray
    patch_states: np.ndarray  # [n_surviving, d_v], state entering this layer
    cls_state: np.ndarray  # [d_v]
    cls_attention: Callable[[], np.ndarray]  # lazy CLS->patch attention, this block's Q/K


@dataclass
class RemovalStep:
    """Drop patch tokens before `layer` runs: explicit ids, or the lowest
    `drop_count` tokens under a keep-priority scorer."""

    layer: int
    drop_ids: Sequence[int] | None = None
    drop_count: int | None = None
    scorer: Callable[[RemovalContext], np.ndarray] | None = None

    def validate(self, num_layers: int) -> None:
        if not 1 <= self.layer <= num_layers:
            raise ConfigError(f"removal layer {self.layer} outside 1..{num_layers}")
        by_ids = self.drop_ids is not None
        by_score = self.drop_count is not None or self.scorer is not None
        if by_ids == by_score:
            raise ConfigError(
                "removal step needs either drop_ids or (drop_count and scorer), not both"
            )
        if by_score and (self.drop_count is None or self.scorer is None):
            raise ConfigError("score-driven removal needs both drop_count and scorer")
        if by_score and self.drop_count < 1:
            raise ConfigError(f"drop_count must be >= 1, got {self.drop_count}")


# -- initialization -----------------------------------------------------


def _block_params(prefix: str, dim: int, mlp_dim: int, rng: SeededRng) -> dict[str, Parameter]:
    def w(name, shape, scale=0.02):
        return Parameter(rng.normal(scale, shape), f"{prefix}_{name}")

    def zeros(name, shape):
        return Parameter(np.zeros(shape, dtype=np.float32), f"{prefix}_{name}")

    def ones(name, shape):
        return Parameter(np.ones(shape, dtype=np.float32), f"{prefix}_{name}")

    p = {}
    p[f"{prefix}_ln1_g"] = ones("ln1_g", dim)
    p[f"{prefix}_ln1_b"] = zeros("ln1_b", dim)
    for nm in ("wq", "wk", "wv", "wo"):
        p[f"{prefix}_{nm}"] = w(nm, (dim, dim))
        p[f"{prefix}_{nm}_b"] = zeros(f"{nm}_b", dim)
    p[f"{prefix}_ln2_g"] = ones("ln2_g", dim)
    p[f"{prefix}_ln2_b"] = zeros("ln2_b", dim)
    p[f"{prefix}_w1"] = w("w1", (dim, mlp_dim))
    p[f"{prefix}_w1_b"] = zeros("w1_b", mlp_dim)
    p[f"{prefix}_w2"] = w("w2", (mlp_dim, dim))
    p[f"{prefix}_w2_b"] = zeros("w2_b", dim)
    return p


def build_vocab(class_names: Sequence[str]) -> dict[str, int]:
    if len(set(class_names)) != len(class_names):
        dupes = sorted({n for n in class_names if list(class_names).count(n) > 1})
        raise ConfigError(f"class names must be unique, duplicates: {dupes}")
    vocab: dict[str, int] = {}
    for word in _TEMPLATE_WORDS:
        vocab.setdefault(word, len(vocab))
    for name in class_names:
        if name in vocab:
            raise ConfigError(f"class name '{name}' collides with a template word")
        vocab[name] = len(vocab)
    return vocab


def init_weights(
    vision: VisionConfig,
    text: TextConfig,
    class_names: Sequence[str],
    rng: SeededRng,
) -> ClipWeights:
    vision.validate()
    text.validate()
    vocab = build_vocab(class_names)
    init = rng.child("init")

    params: dict[str, Parameter] = {}
    params["v_embed_w"] = Parameter(init.normal(0.02, (vision.patch_dim, vision.dim)), "v_embed_w")
    params["v_embed_b"] = Parameter(np.zeros(vision.dim, dtype=np.float32), "v_embed_b")
    params["v_cls"] = Parameter(init.normal(0.02, (vision.dim,)), "v_cls")
    params["v_pos"] = Parameter(init.normal(0.02, (vision.num_patches, vision.dim)), "v_pos")
    for k in range(1, vision.layers + 1):
        params.update(_block_params(f"v{k}", vision.dim, vision.mlp_dim, init))
    params["v_ln_f_g"] = Parameter(np.ones(vision.dim, dtype=np.float32), "v_ln_f_g")
    params["v_ln_f_b"] = Parameter(np.zeros(vision.dim, dtype=np.float32), "v_ln_f_b")

    params["t_embed"] = Parameter(init.normal(0.02, (len(vocab), text.dim)), "t_embed")
    params["t_pos"] = Parameter(init.normal(0.02, (text.max_len, text.dim)), "t_pos")
    for k in range(1, text.layers + 1):
        params.update(_block_params(f"t{k}", text.dim, text.mlp_dim, init))
    params["t_ln_f_g"] = Parameter(np.ones(text.dim, dtype=np.float32), "t_ln_f_g")
    params["t_ln_f_b"] = Parameter(np.zeros(text.dim, dtype=np.float32), "t_ln_f_b")

    params["proj_v"] = Parameter(init.normal(0.02, (vision.dim, text.embed_dim)), "proj_v")
    params["proj_t"] = Parameter(init.normal(0.02, (text.dim, text.embed_dim)), "proj_t")
    params["logit_scale"] = Parameter(np.float32(LOGIT_SCALE_INIT), "logit_scale")

    return ClipWeights(
        vision=vision,
        text=text,
        class_names=list(class_names),
        vocab=vocab,
        params=params,
    )


# -- transformer engine -------------------------------------------------


def _attention(
    weights: ClipWeights,
    prefix: str,
    x: Tensor,
    heads: int,
    want_cls_row: bool = False,
) -> tuple[Tensor, np.ndarray | None]:
    """Standard multi-head self-attention; optionally returns the
    head-averaged softmax row of position 0 (the CLS query) as numpy."""
    b, n, d = x.shape
    dh = d // heads

    def proj(nm):
        y = matmul(x, weights[f"{prefix}_{nm}"]) + weights[f"{prefix}_{nm}_b"]
        y = reshape(y, (b, n, heads, dh))
        return transpose(y, (0, 2, 1, 3))  # [b, h, n, dh]

    q, k, v = proj("wq"), proj("wk"), proj("wv")
    scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
    attn = softmax(scores, axis=-1)  # [b, h, n, n]
    cls_row = attn.array[:, :, 0, :].mean(axis=1) if want_cls_row else None
    out = matmul(attn, v)  # [b, h, n, dh]
    out = reshape(transpose(out, (0, 2, 1, 3)), (b, n, d))
    out = matmul(out, weights[f"{prefix}_wo"]) + weights[f"{prefix}_wo_b"]
    return out, cls_row


def _block(
    weights: ClipWeights,
    prefix: str,
    x: Tensor,
    heads: int,
    want_cls_row: bool = False,
) -> tuple[Tensor, np.ndarray | None]:
    h = layer_norm(x, weights[f"{prefix}_ln1_g"], weights[f"{prefix}_ln1_b"])
    attn_out, cls_row = _attention(weights, prefix, h, heads, want_cls_row)
    x = x + attn_out
    h2 = layer_norm(x, weights[f"{prefix}_ln2_g"], weights[f"{prefix}_ln2_b"])
    m = matmul(h2, weights[f"{prefix}_w1"]) + weights[f"{prefix}_w1_b"]
    m = gelu(m)
    m = matmul(m, weights[f"{prefix}_w2"]) + weights[f"{prefix}_w2_b"]
    return x + m, cls_row


def _preblock_cls_attention(
    weights: ClipWeights, layer: int, x_np: np.ndarray, heads: int
) -> np.ndarray:
    """CLS-query attention over a sequence as block `layer` would compute it,
    without running the block. Returns the head-averaged softmax row [n]."""
    prefix = f"v{layer}"
    g = weights[f"{prefix}_ln1_g"].array
    bta = weights[f"{prefix}_ln1_b"].array
    mu = x_np.mean(axis=-1, keepdims=True)
    var = x_np.var(axis=-1, keepdims=True)
    h = (x_np - mu) / np.sqrt(var + 1e-5) * g + bta
    d = x_np.shape[-1]
    dh = d // heads
    q_cls = h[0] @ weights[f"{prefix}_wq"].array + weights[f"{prefix}_wq_b"].array
    k = h @ weights[f"{prefix}_wk"].array + weights[f"{prefix}_wk_b"].array
    q_heads = q_cls.reshape(heads, dh)
    k_heads = k.reshape(-1, heads, dh)
    logits = np.einsum("hd,nhd->hn", q_heads, k_heads) / np.sqrt(dh)
    logits -= logits.max(axis=-1, keepdims=True)
    e = np.exp(logits)
    rows = e / e.sum(axis=-1, keepdims=True)
    return rows.mean(axis=0)


def embed_image_tokens(
    weights: ClipWeights,
    tokens: np.ndarray,
    token_ids: np.ndarray | None = None,
    prompts_v: Tensor | None = None,
) -> Tensor:
    """Project patch tokens and assemble [CLS; visual prompts; patches].

    ``tokens`` is [B, n, d_in]; ``token_ids`` gives each token row's original
    grid index (controls which positional embedding it receives).
    """
    if tokens.ndim != 3 or tokens.shape[-1] != weights.vision.patch_dim:
        raise ShapeError(
            f"image tokens must be [B, n, {weights.vision.patch_dim}], got {tokens.shape}"
        )
    b, n, _ = tokens.shape
    if token_ids is None:
        token_ids = np.arange(n)
    x = matmul(Tensor(tokens), weights["v_embed_w"]) + weights["v_embed_b"]
    x = x + index_rows(weights["v_pos"], token_ids)
    cls_ = reshape(weights["v_cls"], (1, 1, weights.vision.dim))
    cls_rows = concat([cls_] * b, axis=0) if b > 1 else cls_
    parts = [cls_rows]
    if prompts_v is not None:
        if prompts_v.ndim != 2 or prompts_v.shape[1] != weights.vision.dim:
            raise ShapeError(f"visual prompts must be [b, {weights.vision.dim}], got {prompts_v.shape}")
        pv = reshape(prompts_v, (1,) + prompts_v.shape)
        parts.append(concat([pv] * b, axis=0) if b > 1 else pv)
    parts.append(x)
    return concat(parts, axis=1)


def run_vision_blocks(
    weights: ClipWeights,
    x: Tensor,
    first_layer: int,
    last_layer: int,
    capture_attention: Sequence[int] = (),
    num_prompts: int = 0,
) -> tuple[Tensor, dict[int, np.ndarray]]:
    """Run blocks first_layer..last_layer inclusive (1-based), capturing the
    CLS attention patch slice at requested layers."""
    attn_maps: dict[int, np.ndarray] = {}
    for k in range(first_layer, last_layer + 1):
        want = k in capture_attention
        x, cls_row = _block(weights, f"v{k}", x, weights.vision.heads, want_cls_row=want)
        if want:
            attn_maps[k] = cls_row[:, 1 + num_prompts :].copy()
    return x, attn_maps


def finalize_vision(weights: ClipWeights, x: Tensor, num_prompts: int) -> tuple[Tensor, Tensor]:
    """Final layer norm; split into (Z patches, Z_cls) for a batch of one."""
    x = layer_norm(x, weights["v_ln_f_g"], weights["v_ln_f_b"])
    z_cls = reshape(getitem(x, (slice(None), 0)), (x.shape[-1],))
    z_patches = getitem(x, (0, slice(1 + num_prompts, None)))
    return z_patches, z_cls


def encode_image(
    weights: ClipWeights,
    grid: TokenGrid,
    removal_plan: Sequence[RemovalStep] | None = None,
    prompts_v: Tensor | None = None,
    capture_layers: Sequence[int] = (),
    capture_attention: Sequence[int] = (),
) -> EncodeResult:
    """Forward one image through the ViT, applying the removal plan.

    Tokens named by a step are deleted from the sequence before that step's
    layer executes. ``capture_layers`` stores the sequence state entering
    those layers (after any removal there); ``capture_attention`` stores the
    CLS attention row computed inside those layers' blocks.
    """
    cfg = weights.vision
    plan = sorted(removal_plan or [], key=lambda s: s.layer)
    layers_in_plan = [s.layer for s in plan]
    if len(set(layers_in_plan)) != len(layers_in_plan):
        raise ConfigError(f"removal plan repeats layers: {layers_in_plan}")
    for step in plan:
        step.validate(cfg.layers)

    n = grid.tokens.shape[0]
    if n != cfg.num_patches:
        raise ShapeError(f"expected {cfg.num_patches} patch tokens, got {n}")
    num_prompts = 0 if prompts_v is None else prompts_v.shape[0]

    x = embed_image_tokens(weights, grid.tokens[None, :, :], prompts_v=prompts_v)
    surviving = np.arange(n)
    intermediates: dict[int, np.ndarray] = {}
    attn_maps: dict[int, np.ndarray] = {}
    plan_by_layer = {s.layer: s for s in plan}

    for k in range(1, cfg.layers + 1):
        step = plan_by_layer.get(k)
        if step is not None:
            drop = _resolve_drop_ids(weights, step, x, surviving, num_prompts)
            keep_mask = ~np.isin(surviving, drop)
            keep_pos = np.concatenate(
                [np.arange(1 + num_prompts), 1 + num_prompts + np.nonzero(keep_mask)[0]]
            )
            x = getitem(x, (slice(None), keep_pos))
            surviving = surviving[keep_mask]
        if k in capture_layers:
            intermediates[k] = x.array[0].copy()
        want = k in capture_attention
        x, cls_row = _block(weights, f"v{k}", x, cfg.heads, want_cls_row=want)
        if want:
            attn_maps[k] = cls_row[0, 1 + num_prompts :].copy()

    z_patches, z_cls = finalize_vision(weights, x, num_prompts)
    return EncodeResult(
        Z=z_patches,
        Z_cls=z_cls,
        intermediates=intermediates,
        cls_attention=attn_maps,
        surviving_ids=surviving,
        num_prompts=num_prompts,
    )


def _resolve_drop_ids(
    weights: ClipWeights,
    step: RemovalStep,
    x: Tensor,
    surviving: np.ndarray,
    num_prompts: int,
) -> np.ndarray:
    if step.drop_ids is not None:
        drop = np.asarray(sorted(step.drop_ids), dtype=np.int64)
        missing = np.setdiff1d(drop, surviving)
        if missing.size:
            raise LogicError(
                f"layer {step.layer}: drop ids {missing.tolist()} are not currently surviving"
            )
        if drop.size >= surviving.size:
            raise ScheduleError(
                f"layer {step.layer}: dropping {drop.size} of {surviving.size} surviving tokens"
            )
        return drop

    if step.drop_count >= surviving.size:
        raise ScheduleError(
            f"layer {step.layer}: drop_count {step.drop_count} >= {surviving.size} survivors"
        )
    x_np = x.array[0]
    ctx = RemovalContext(
        layer=step.layer,
        surviving_ids=surviving.copy(),
        patch_states=x_np[1 + num_prompts :],
        cls_state=x_np[0],
        cls_attention=lambda: _preblock_cls_attention(
            weights, step.layer, x_np, weights.vision.heads
        )[1 + num_prompts :],
    )
    scores = np.asarray(step.scorer(ctx), dtype=np.float64)
    if scores.shape != (surviving.size,):
        raise LogicError(
            f"scorer returned shape {scores.shape}, expected ({surviving.size},)"
        )
    if np.isnan(scores).any():
        raise NumericError(f"layer {step.layer}: scorer produced NaN scores")
    # Drop the lowest keep-priority scores; among ties, higher original
    # token indices go first.
    order = np.lexsort((-surviving, scores))
    return np.sort(surviving[order[: step.drop_count]])


def encode_cls_batch(
    weights: ClipWeights,
    tokens: np.ndarray,
    prompts_v: Tensor | None = None,
) -> Tensor:
    """Plain forward of a batch of full images to final CLS states [B, d_v]."""
    num_prompts = 0 if prompts_v is None else prompts_v.shape[0]
    x = embed_image_tokens(weights, tokens, prompts_v=prompts_v)
    x, _ = run_vision_blocks(weights, x, 1, weights.vision.layers, num_prompts=num_prompts)
    x = layer_norm(x, weights["v_ln_f_g"], weights["v_ln_f_b"])
    return getitem(x, (slice(None), 0))


# -- text path ----------------------------------------------------------


def encode_text(
    class_prompts: Sequence[str],
    weights: ClipWeights,
    prompts_t: Tensor | None = None,
) -> ClassEmbeddings:
    """Embed "a photo of a [class]" per class, with optional learned prompt
    rows prepended, into unit-norm class embeddings.

    Prompt rows are free vectors (no positional embedding), so the template
    keeps the same positions with and without prompts.
    """
    cfg = weights.text
    b = 0 if prompts_t is None else prompts_t.shape[0]
    template_len = len(_TEMPLATE_WORDS) + 1
    if b + template_len > cfg.max_len:
        raise ConfigError(
            f"{b} prompt tokens + {template_len} template tokens exceed max_len {cfg.max_len}"
        )
    ids = np.array([weights.template_ids(name) for name in class_prompts], dtype=np.int64)
    num_classes = ids.shape[0]

    flat = index_rows(weights["t_embed"], ids.reshape(-1))
    x = reshape(flat, (num_classes, template_len, cfg.dim))
    x = x + index_rows(weights["t_pos"], np.arange(template_len))
    if b:
        if prompts_t.shape[1] != cfg.dim:
            raise ShapeError(f"text prompts must be [b, {cfg.dim}], got {prompts_t.shape}")
        pt = reshape(prompts_t, (1, b, cfg.dim))
        pt = concat([pt] * num_classes, axis=0) if num_classes > 1 else pt
        x = concat([pt, x], axis=1)

    for k in range(1, cfg.layers + 1):
        x, _ = _block(weights, f"t{k}", x, cfg.heads)
    x = layer_norm(x, weights["t_ln_f_g"], weights["t_ln_f_b"])
    last = getitem(x, (slice(None), b + template_len - 1))
    emb = matmul(last, weights["proj_t"])
    emb = _unit_rows(emb, "text embedding collapsed to zero norm")
    return ClassEmbeddings(E=emb, logit_scale=weights.logit_scale_value())


# -- classification -----------------------------------------------------


def _unit_rows(x: Tensor, problem: str) -> Tensor:
    """L2-normalize the last axis, differentiating through the norm.

    `problem` seeds the error on a degenerate row; an "{mn:.3e}" placeholder
    in it receives the smallest row norm.
    """
    sq = tsum(x * x, axis=-1, keepdims=True)
    mn = float(np.sqrt(sq.array.min()))
    if mn < 1e-12:
        raise NumericError(problem.format(mn=mn))
    return x * pow_scalar(sq, -0.5)


def zero_shot_logits(
    z_cls: Tensor | np.ndarray,
    class_embs: ClassEmbeddings,
    proj_v: Parameter | Tensor,
) -> Tensor:
    """scale * cosine(proj(z_cls), E_y) over classes; [B, C] or [C]."""
    z = z_cls if isinstance(z_cls, Tensor) else Tensor(z_cls)
    single = z.ndim == 1
    if single:
        z = reshape(z, (1,) + z.shape)
    v = matmul(z, proj_v)
    v = _unit_rows(v, "projected image embedding has zero norm (min {mn:.3e})")
    logits = matmul(v, transpose(class_embs.E, (1, 0))) * class_embs.logit_scale
    return reshape(logits, (logits.shape[-1],)) if single else logits


def zero_shot_probs(
    z_cls: Tensor | np.ndarray,
    class_embs: ClassEmbeddings,
    proj_v: Parameter | Tensor,
) -> Tensor:
    """softmax(scale * cosine(proj(z_cls), E_y)) over classes."""
    return softmax(zero_shot_logits(z_cls, class_embs, proj_v), axis=-1)


def cls_attention_scores(result: EncodeResult, layer: int) -> np.ndarray:
    """CLS attention over surviving patches at a hooked layer, renormalized
    to sum to 1 over the patch positions."""
    if layer not in result.cls_attention:
        raise UsageError(
            f"layer {layer} attention was not captured (have {sorted(result.cls_attention)})"
        )
    row = result.cls_attention[layer].astype(np.float64)
    total = row.sum()
    if total <= 0:
        raise NumericError(f"layer {layer} CLS attention mass is zero over patches")
    return (row / total).astype(np.float32)
