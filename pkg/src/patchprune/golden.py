"""Reference token ranking by sliding-block removal.

An r x r block of patch tokens slides over the grid; each placement is
removed at a chosen layer and the damage is measured three ways: posterior
of the true class (label), best posterior over classes (confidence), or
cosine similarity between the full and pruned CLS embeddings (preservation).
Every token's raw score is the average of the scores of the windows that
contain it, and each image's scores are z-normalized before use as
regression targets.

High scores mean removal was harmless: the most redundant tokens rank first.

Scoring all windows of one image shares the forward pass below the removal
layer and batches every pruned sequence through the remaining layers in one
call; a per-window sequential path (`batched=False`) exists as the oracle.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .clipcore.model import (
    ClassEmbeddings,
    ClipWeights,
    RemovalStep,
    Tensor,
    embed_image_tokens,
    encode_image,
    encode_text,
    finalize_vision,
    run_vision_blocks,
    zero_shot_probs,
)
from .data import DatasetSplit, TokenGrid, patchify
from .errors import ConfigError, LogicError, MissingArtifactError, NumericError
from .nncore.io import load_tensor, save_tensor
from .nncore.tensor import gather_rows, layer_norm

__all__ = [
    "SCORE_KINDS",
    "PruneWindow",
    "GoldenScores",
    "Ranking",
    "enumerate_windows",
    "score_window",
    "golden_scores",
    "normalize_scores",
    "ranking_from_scores",
    "GoldenCache",
    "compute_split_scores",
]

SCORE_KINDS = ("label", "confidence", "preservation")
DEFAULT_R = 3
DEFAULT_PRUNE_LAYER = 2  # scaled analog of "layer 4 of 12" on the 6-layer toy


@dataclass(frozen=True)
class PruneWindow:
    token_ids: tuple[int, ...]
    row: int
    col: int
    r: int


@dataclass
class GoldenScores:
    raw: np.ndarray  # [N] float64, coverage-averaged window scores
    coverage: np.ndarray  # [N] int, windows containing each token
    mu_s: float
    sigma_s: float
    normalized: np.ndarray  # [N] float32, (raw - mu) / sigma
    kind: str
    source_layer: int
    degenerate: bool = False
    window_scores: np.ndarray | None = None  # [W] float64, enumeration order


@dataclass
class Ranking:
    order: np.ndarray  # permutation of 0..N-1, best first
    scores: np.ndarray


def enumerate_windows(grid_side: int, r: int, stride: int = 1) -> list[PruneWindow]:
    """All axis-aligned r x r blocks inside the grid, row-major."""
    if r < 1 or r > grid_side:
        raise ConfigError(f"window side {r} invalid for grid side {grid_side}")
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    windows = []
    for row in range(0, grid_side - r + 1, stride):
        for col in range(0, grid_side - r + 1, stride):
            ids = tuple(
                (row + dy) * grid_side + (col + dx) for dy in range(r) for dx in range(r)
            )
            windows.append(PruneWindow(token_ids=ids, row=row, col=col, r=r))
    return windows


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    if np.array_equal(a, b):
        return 1.0  # identical embeddings; avoids sqrt rounding at the fixpoint
    a64, b64 = a.astype(np.float64), b.astype(np.float64)
    return float(np.dot(a64, b64) / (np.linalg.norm(a64) * np.linalg.norm(b64)))


def _check_kind(kind: str, y_gt: int | None) -> None:
    if kind not in SCORE_KINDS:
        raise ConfigError(f"score kind '{kind}' not one of {SCORE_KINDS}")
    if kind == "label" and y_gt is None:
        raise ConfigError("label scoring needs the ground-truth class")


def score_window(
    weights: ClipWeights,
    grid: TokenGrid,
    window: PruneWindow | None,
    kind: str,
    y_gt: int | None = None,
    prune_layer: int = DEFAULT_PRUNE_LAYER,
    class_embs: ClassEmbeddings | None = None,
) -> float:
    """Score one removal placement sequentially. ``window=None`` is the
    full-keep control (no removal; preservation gives exactly 1.0)."""
    _check_kind(kind, y_gt)
    n = grid.tokens.shape[0]
    if window is not None:
        bad = [t for t in window.token_ids if not 0 <= t < n]
        if bad:
            raise LogicError(f"window token ids {bad} outside 0..{n - 1}")
    plan = (
        []
        if window is None
        else [RemovalStep(layer=prune_layer, drop_ids=list(window.token_ids))]
    )
    pruned = encode_image(weights, grid, removal_plan=plan)
    if kind == "preservation":
        full = encode_image(weights, grid)
        return _cosine(full.Z_cls.array, pruned.Z_cls.array)
    if class_embs is None:
        class_embs = encode_text(weights.class_names, weights)
    probs = zero_shot_probs(pruned.Z_cls, class_embs, weights["proj_v"]).array
    return float(probs[y_gt]) if kind == "label" else float(probs.max())


def _batched_window_cls(
    weights: ClipWeights,
    grid: TokenGrid,
    windows: Sequence[PruneWindow],
    prune_layer: int,
) -> tuple[np.ndarray, np.ndarray]:
    """CLS embeddings of every pruned sequence plus the full sequence.

    Layers below the removal point run once; each window then deletes its
    block and the whole stack of shortened sequences runs the rest together.
    """
    n = grid.tokens.shape[0]
    x = embed_image_tokens(weights, grid.tokens[None, :, :])
    x, _ = run_vision_blocks(weights, x, 1, prune_layer - 1)
    shared = x.array

    keep_rows = []
    for w in windows:
        mask = np.ones(n + 1, dtype=bool)
        mask[1 + np.asarray(w.token_ids)] = False
        keep_rows.append(np.nonzero(mask)[0])
    keep = np.stack(keep_rows)  # [W, n+1-r^2]

    tiled = Tensor(np.repeat(shared, len(windows), axis=0))
    pruned = gather_rows(tiled, keep)
    pruned, _ = run_vision_blocks(weights, pruned, prune_layer, weights.vision.layers)
    pruned = layer_norm(pruned, weights["v_ln_f_g"], weights["v_ln_f_b"])
    cls_pruned = pruned.array[:, 0]

    full, _ = run_vision_blocks(weights, Tensor(shared), prune_layer, weights.vision.layers)
    _, z_cls_full = finalize_vision(weights, full, 0)
    return cls_pruned, z_cls_full.array


def golden_scores(
    weights: ClipWeights,
    grid: TokenGrid,
    kind: str,
    r: int = DEFAULT_R,
    prune_layer: int = DEFAULT_PRUNE_LAYER,
    y_gt: int | None = None,
    batched: bool = True,
    paper_literal_norm: bool = False,
    class_embs: ClassEmbeddings | None = None,
) -> GoldenScores:
    """Per-token scores from all r x r windows of one image.

    A token's raw score sums s(window)/divisor over the windows containing
    it, accumulated in window-enumeration order in float64. The divisor is
    the token's actual window count; ``paper_literal_norm`` uses the block
    size r^2 instead, which shrinks border tokens covered by fewer windows.
    """
    _check_kind(kind, y_gt)
    n = grid.tokens.shape[0]
    windows = enumerate_windows(grid.grid_side, r)

    if kind != "preservation" and class_embs is None:
        class_embs = encode_text(weights.class_names, weights)

    if batched:
        cls_pruned, cls_full = _batched_window_cls(weights, grid, windows, prune_layer)
        if kind == "preservation":
            w_scores = np.array(
                [_cosine(cls_full, cls_pruned[i]) for i in range(len(windows))]
            )
        else:
            probs = zero_shot_probs(Tensor(cls_pruned), class_embs, weights["proj_v"]).array
            w_scores = (
                probs[:, y_gt].astype(np.float64)
                if kind == "label"
                else probs.max(axis=-1).astype(np.float64)
            )
    else:
        w_scores = np.array(
            [
                score_window(weights, grid, w, kind, y_gt, prune_layer, class_embs)
                for w in windows
            ]
        )

    coverage = np.zeros(n, dtype=np.int64)
    for w in windows:
        for t in w.token_ids:
            coverage[t] += 1
    if (coverage == 0).any():
        raise ConfigError(f"windows with r={r} leave some tokens uncovered")

    raw = np.zeros(n, dtype=np.float64)
    divisor = float(r * r) if paper_literal_norm else None
    for i, w in enumerate(windows):
        for t in w.token_ids:
            raw[t] += w_scores[i] / (divisor if divisor is not None else coverage[t])

    gs = normalize_scores(raw, coverage, kind=kind, source_layer=prune_layer)
    gs.window_scores = w_scores
    return gs


def normalize_scores(
    raw: np.ndarray,
    coverage: np.ndarray,
    kind: str = "preservation",
    source_layer: int = DEFAULT_PRUNE_LAYER,
) -> GoldenScores:
    """Z-score raw per image (population sigma over all N tokens)."""
    if raw.shape[0] < 2:
        raise ConfigError(f"need at least 2 token scores to normalize, got {raw.shape}")
    mu = float(raw.mean())
    sigma = float(raw.std())
    degenerate = sigma < 1e-8
    if degenerate:
        warnings.warn(
            "golden scores are constant across tokens; normalized scores set to zero",
            stacklevel=2,
        )
        normalized = np.zeros(raw.shape[0], dtype=np.float32)
    else:
        normalized = ((raw - mu) / sigma).astype(np.float32)
    return GoldenScores(
        raw=raw.astype(np.float64),
        coverage=np.asarray(coverage, dtype=np.int64),
        mu_s=mu,
        sigma_s=sigma,
        normalized=normalized,
        kind=kind,
        source_layer=source_layer,
        degenerate=degenerate,
    )


def ranking_from_scores(scores: np.ndarray) -> Ranking:
    """Descending stable sort; equal scores keep ascending token order."""
    scores = np.asarray(scores)
    if scores.ndim != 1 or scores.shape[0] < 1:
        raise ConfigError(f"scores must be a nonempty vector, got shape {scores.shape}")
    if np.isnan(scores).any():
        raise NumericError("ranking input contains NaN scores")
    order = np.argsort(-scores.astype(np.float64), kind="stable")
    return Ranking(order=order, scores=scores)


# -- cache --------------------------------------------------------------


class GoldenCache:
    """Per-image score files for one (dataset, kind, r, layer) combination."""

    def __init__(
        self, root: str | Path, dataset_id: str, kind: str, r: int, prune_layer: int
    ) -> None:
        self.kind = kind
        self.prune_layer = prune_layer
        self.dir = Path(root) / dataset_id / f"{kind}_r{r}_layer{prune_layer}"

    def _stem(self, image_id: int) -> str:
        return f"img{image_id:05d}"

    def has(self, image_id: int) -> bool:
        stem = self._stem(image_id)
        return all(
            (self.dir / f"{stem}_{part}.bin").exists()
            for part in ("raw", "normalized", "coverage")
        )

    def store(self, image_id: int, gs: GoldenScores) -> None:
        stem = self._stem(image_id)
        save_tensor(self.dir, f"{stem}_raw", gs.raw.astype(np.float32))
        save_tensor(self.dir, f"{stem}_normalized", gs.normalized)
        save_tensor(self.dir, f"{stem}_coverage", gs.coverage.astype(np.float32))

    def load(self, image_id: int) -> GoldenScores:
        stem = self._stem(image_id)
        if not self.has(image_id):
            raise MissingArtifactError(
                f"golden cache misses image {image_id} under {self.dir}"
            )
        raw = load_tensor(self.dir, f"{stem}_raw").astype(np.float64)
        normalized = load_tensor(self.dir, f"{stem}_normalized")
        coverage = load_tensor(self.dir, f"{stem}_coverage").astype(np.int64)
        return GoldenScores(
            raw=raw,
            coverage=coverage,
            mu_s=float(raw.mean()),
            sigma_s=float(raw.std()),
            normalized=normalized,
            kind=self.kind,
            source_layer=self.prune_layer,
        )


def compute_split_scores(
    weights: ClipWeights,
    split: DatasetSplit,
    patch_pixels: int,
    kind: str,
    r: int = DEFAULT_R,
    prune_layer: int = DEFAULT_PRUNE_LAYER,
    cache: GoldenCache | None = None,
    rebuild: bool = False,
    jobs: int = 1,
    paper_literal_norm: bool = False,
) -> list[GoldenScores]:
    """Golden scores for every image of a split, cache-aware.

    Images are independent; with jobs > 1 they are scored on a thread pool
    and collected back in index order, so results do not depend on jobs.
    """
    class_embs = (
        encode_text(weights.class_names, weights) if kind != "preservation" else None
    )

    def one(i: int) -> GoldenScores:
        if cache is not None and not rebuild and cache.has(i):
            return cache.load(i)
        ex = split.examples[i]
        grid = patchify(ex, patch_pixels)
        gs = golden_scores(
            weights,
            grid,
            kind,
            r=r,
            prune_layer=prune_layer,
            y_gt=ex.label if kind == "label" else None,
            paper_literal_norm=paper_literal_norm,
            class_embs=class_embs,
        )
        if cache is not None:
            cache.store(i, gs)
        return gs

    indices = range(len(split.examples))
    if jobs <= 1:
        return [one(i) for i in indices]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(one, indices))
