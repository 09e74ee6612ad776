"""Lightweight networks that learn to reproduce the sliding-window ranking.

Scoring every removal window needs dozens of extra forward passes per image,
which rules it out at inference time. Instead a small network reads the
backbone's intermediate patch states at one layer and emits a redundancy
score per token directly; it is trained to regress the cached per-image
normalized window scores. The default architecture mixes information along
the channel axis and then along the token axis, one MLP each with a residual
around it; two simpler architectures (a flat MLP over the whole grid and a
single attention block) exist for comparison.

The token-mixing weight is sized for the full grid. When the model is
applied again later on an already-shortened sequence, the caller passes the
surviving token ids and the weight matrix is restricted to those rows and
columns, so each position keeps the mixing coefficients it was trained with.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .clipcore.model import ClipWeights, _block, _block_params, encode_image
from .data import DatasetSplit, patchify
from .errors import (
    ConfigError,
    LogicError,
    NumericError,
    ParseError,
    ShapeError,
    UsageError,
)
from .golden import GoldenCache, GoldenScores, Ranking, ranking_from_scores
from .nncore import (
    Adam,
    Parameter,
    SeededRng,
    Tensor,
    as_tensor,
    backward,
    gelu,
    getitem,
    layer_norm,
    load_checkpoint,
    log_sigmoid,
    matmul,
    reshape,
    save_checkpoint,
    sigmoid,
    tmean,
    transpose,
    tsum,
    zero_grads,
)

PREDICTOR_KINDS = ("mixmlp", "mlp", "transblock")


@dataclass
class PredictorArch:
    """Architecture choice plus the dimensions that fix every weight shape."""

    kind: str = "mixmlp"
    num_tokens: int = 64
    dim: int = 64
    hidden: int = 256  # flat-MLP hidden width
    heads: int = 4  # attention-block heads

    def validate(self) -> None:
        if self.kind not in PREDICTOR_KINDS:
            raise ConfigError(
                f"unknown predictor kind '{self.kind}', expected one of {PREDICTOR_KINDS}"
            )
        if self.num_tokens < 1 or self.dim < 1:
            raise ConfigError(
                f"predictor needs positive dims, got num_tokens={self.num_tokens}, dim={self.dim}"
            )
        if self.kind == "transblock" and self.dim % self.heads:
            raise ConfigError(f"dim {self.dim} not divisible by heads {self.heads}")


@dataclass
class PredictorWeights:
    arch: PredictorArch
    attach_layer: int
    params: dict[str, Parameter] = field(default_factory=dict)

    def __getitem__(self, name: str) -> Parameter:
        return self.params[name]

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def freeze(self) -> "PredictorWeights":
        for p in self.params.values():
            p.requires_grad = False
        return self

    def unfreeze(self) -> "PredictorWeights":
        for p in self.params.values():
            p.requires_grad = True
        return self


@dataclass
class MatchRateReport:
    K: int
    rate: float  # percentage in [0, 100]


def init_predictor(arch: PredictorArch, attach_layer: int, rng: SeededRng) -> PredictorWeights:
    arch.validate()
    if attach_layer < 1:
        raise ConfigError(f"attach_layer must be >= 1, got {attach_layer}")
    n, d = arch.num_tokens, arch.dim

    def w(name, shape):
        return Parameter(rng.normal(0.02, shape), name)

    def zeros(name, shape):
        return Parameter(np.zeros(shape, dtype=np.float32), name)

    def ones(name, shape):
        return Parameter(np.ones(shape, dtype=np.float32), name)

    p: dict[str, Parameter] = {}
    if arch.kind == "mixmlp":
        p["c_w"] = w("c_w", (d, d))
        p["c_b"] = zeros("c_b", d)
        p["c_ln_g"] = ones("c_ln_g", d)
        p["c_ln_b"] = zeros("c_ln_b", d)
        p["t_w"] = w("t_w", (n, n))
        p["t_b"] = zeros("t_b", n)
        p["t_ln_g"] = ones("t_ln_g", n)
        p["t_ln_b"] = zeros("t_ln_b", n)
    elif arch.kind == "mlp":
        p["w1"] = w("w1", (n * d, arch.hidden))
        p["b1"] = zeros("b1", arch.hidden)
        p["ln_g"] = ones("ln_g", arch.hidden)
        p["ln_b"] = zeros("ln_b", arch.hidden)
        p["w2"] = w("w2", (arch.hidden, n))
        p["b2"] = zeros("b2", n)
    else:
        p.update(_block_params("pb1", d, 4 * d, rng))
    return PredictorWeights(arch=arch, attach_layer=attach_layer, params=p)


# -- forward paths -------------------------------------------------------


def channel_mix(weights: PredictorWeights, z: Tensor) -> Tensor:
    """Per-token MLP over the channel axis with a residual; token-equivariant."""
    h = matmul(z, weights["c_w"]) + weights["c_b"]
    h = layer_norm(h, weights["c_ln_g"], weights["c_ln_b"])
    return z + gelu(h)


def mixmlp_forward(
    weights: PredictorWeights, z, token_ids: np.ndarray | None = None
) -> Tensor:
    """Channel mix, token mix (each FC + layer norm + GELU with residual),
    then the per-token mean over channels as the score vector [N']."""
    z = as_tensor(z)
    n_max = weights.arch.num_tokens
    n = z.shape[0]
    if z.ndim != 2 or z.shape[1] != weights.arch.dim:
        raise ShapeError(f"expected [N', {weights.arch.dim}] input, got {z.shape}")
    if n > n_max:
        raise ShapeError(f"{n} tokens exceed the token-mix width {n_max}")

    if token_ids is None:
        if n != n_max:
            raise UsageError(
                f"a shortened sequence ({n} of {n_max} tokens) needs token_ids "
                "to restrict the token-mix weight"
            )
        t_w, t_b = weights["t_w"], weights["t_b"]
        t_g, t_beta = weights["t_ln_g"], weights["t_ln_b"]
    else:
        ids = np.asarray(token_ids)
        if ids.shape != (n,):
            raise ShapeError(f"token_ids shape {ids.shape} does not match {n} tokens")
        bad = [int(t) for t in ids if not 0 <= t < n_max]
        if bad:
            raise LogicError(f"token ids {bad} outside 0..{n_max - 1}")
        t_w = getitem(weights["t_w"], np.ix_(ids, ids))
        t_b = getitem(weights["t_b"], ids)
        t_g = getitem(weights["t_ln_g"], ids)
        t_beta = getitem(weights["t_ln_b"], ids)

    zc = channel_mix(weights, z)
    t = transpose(zc, (1, 0))  # [d, N']
    h = layer_norm(matmul(t, t_w) + t_b, t_g, t_beta)
    t = t + gelu(h)
    return tmean(t, axis=0)


def mlp_forward(weights: PredictorWeights, z) -> Tensor:
    """Flat MLP over the whole grid: flatten, hidden layer, score per token."""
    z = as_tensor(z)
    n, d = weights.arch.num_tokens, weights.arch.dim
    if z.shape != (n, d):
        raise ShapeError(
            f"flat-MLP predictor only handles the full grid [{n}, {d}], got {z.shape}"
        )
    h = reshape(z, (1, n * d))
    h = matmul(h, weights["w1"]) + weights["b1"]
    h = gelu(layer_norm(h, weights["ln_g"], weights["ln_b"]))
    h = matmul(h, weights["w2"]) + weights["b2"]
    return reshape(h, (n,))


def transblock_forward(weights: PredictorWeights, z) -> Tensor:
    """One pre-norm attention block, then the per-token channel mean."""
    z = as_tensor(z)
    if z.ndim != 2 or z.shape[1] != weights.arch.dim:
        raise ShapeError(f"expected [N', {weights.arch.dim}] input, got {z.shape}")
    n = z.shape[0]
    out, _ = _block(weights, "pb1", reshape(z, (1, n, z.shape[1])), weights.arch.heads)
    return tmean(reshape(out, (n, z.shape[1])), axis=1)


def predictor_forward(
    weights: PredictorWeights, z, token_ids: np.ndarray | None = None
) -> Tensor:
    kind = weights.arch.kind
    if kind == "mixmlp":
        return mixmlp_forward(weights, z, token_ids)
    if kind == "mlp":
        return mlp_forward(weights, z)
    return transblock_forward(weights, z)


# -- training ------------------------------------------------------------


def predictor_loss(s_norm, s_hat) -> Tensor:
    """Score-and-sort regression loss: -sum_t sigmoid(s_t) * log sigmoid(s_hat_t).

    Tokens the reference ranks as redundant (high s_t) are pushed toward
    high predicted scores; tokens it ranks as important contribute almost
    nothing. The log-sigmoid is evaluated in its stable form.
    """
    s_norm, s_hat = as_tensor(s_norm), as_tensor(s_hat)
    if s_norm.shape != s_hat.shape:
        raise ShapeError(f"score vectors differ in shape: {s_norm.shape} vs {s_hat.shape}")
    return -tsum(sigmoid(s_norm) * log_sigmoid(s_hat))


def matching_rate(pred: Ranking, golden: Ranking, k: int) -> MatchRateReport:
    """Percentage of the top-k tokens the two rankings agree on."""
    if k <= 0:
        raise UsageError(f"matching rate needs k >= 1, got {k}")
    if len(pred.order) != len(golden.order):
        raise ShapeError(
            f"rankings cover different token counts: {len(pred.order)} vs {len(golden.order)}"
        )
    if k > len(pred.order):
        raise UsageError(f"k={k} exceeds the {len(pred.order)} ranked tokens")
    overlap = set(pred.order[:k].tolist()) & set(golden.order[:k].tolist())
    return MatchRateReport(K=k, rate=100.0 * len(overlap) / k)


def collect_intermediates(
    weights: ClipWeights, split: DatasetSplit, patch_pixels: int, attach_layer: int
) -> list[np.ndarray]:
    """Patch-row states entering `attach_layer`, one [N, d_v] array per image."""
    outs = []
    for ex in split.examples:
        grid = patchify(ex, patch_pixels)
        res = encode_image(weights, grid, capture_layers=(attach_layer,))
        outs.append(res.intermediates[attach_layer][1 + res.num_prompts :])
    return outs


@dataclass
class PredictorTrainConfig:
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 16


@dataclass
class PredictorTrainResult:
    predictor: PredictorWeights
    epoch_losses: list[float]


def train_predictor(
    weights: ClipWeights,
    split: DatasetSplit,
    cache: GoldenCache,
    arch: PredictorArch,
    attach_layer: int,
    config: PredictorTrainConfig,
    rng: SeededRng,
) -> PredictorTrainResult:
    """Fit a predictor to the cached normalized scores of one split.

    One optimizer step per minibatch, gradients averaged over the batch;
    the image order is reshuffled every epoch from a per-epoch seed so
    results do not depend on the epoch count. Raises if the cache misses
    any image of the split or the loss leaves the finite range.
    """
    if not 1 <= attach_layer <= weights.vision.layers:
        raise ConfigError(
            f"attach_layer {attach_layer} outside 1..{weights.vision.layers}"
        )
    if config.batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {config.batch_size}")
    predictor = init_predictor(arch, attach_layer, rng.child("init"))
    targets = [cache.load(i).normalized for i in range(len(split.examples))]
    patch_pixels = int(
        np.sqrt(weights.vision.patch_dim // 3)
    )  # tokens are flattened [3, p, p] patches
    feats = collect_intermediates(weights, split, patch_pixels, attach_layer)
    if config.epochs == 0:
        return PredictorTrainResult(predictor, [])

    opt = Adam(predictor.parameters(), lr=config.lr)
    epoch_losses: list[float] = []
    for epoch in range(config.epochs):
        order = rng.child(f"order:{epoch}").permutation(len(feats))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = order[start : start + config.batch_size]
            zero_grads(predictor.parameters())
            for i in batch:
                s_hat = predictor_forward(predictor, Tensor(feats[i]))
                loss = predictor_loss(targets[i], s_hat) * (1.0 / len(batch))
                val = loss.item() * len(batch)
                if not np.isfinite(val):
                    raise NumericError(
                        f"predictor training diverged at epoch {epoch + 1} (image {i})"
                    )
                backward(loss)
                total += val
            opt.step()
        epoch_losses.append(total / len(feats))
    return PredictorTrainResult(predictor, epoch_losses)


def split_matching_rate(
    weights: ClipWeights,
    predictor: PredictorWeights,
    split: DatasetSplit,
    golden: list[GoldenScores],
    k: int,
    patch_pixels: int,
) -> float:
    """Mean matching rate of a predictor against reference scores per image."""
    if len(golden) != len(split.examples):
        raise ShapeError(
            f"{len(golden)} score sets for {len(split.examples)} images"
        )
    feats = collect_intermediates(weights, split, patch_pixels, predictor.attach_layer)
    rates = []
    for z, gs in zip(feats, golden):
        s_hat = predictor_forward(predictor, Tensor(z))
        pred_rank = ranking_from_scores(s_hat.array)
        gold_rank = ranking_from_scores(gs.normalized)
        rates.append(matching_rate(pred_rank, gold_rank, k).rate)
    return float(np.mean(rates))


# -- persistence ---------------------------------------------------------


def save_predictor(
    dir_path: str | Path,
    predictor: PredictorWeights,
    score_kind: str,
    grid_side: int,
) -> None:
    meta = {
        "kind": predictor.arch.kind,
        "num_tokens": predictor.arch.num_tokens,
        "dim": predictor.arch.dim,
        "hidden": predictor.arch.hidden,
        "heads": predictor.arch.heads,
        "attach_layer": predictor.attach_layer,
        "score_kind": score_kind,
        "grid_side": grid_side,
    }
    tensors = {name: p.array for name, p in predictor.params.items()}
    save_checkpoint(dir_path, tensors, meta)


def load_predictor(dir_path: str | Path) -> tuple[PredictorWeights, dict]:
    """Load a frozen predictor checkpoint; returns (weights, meta)."""
    tensors, meta = load_checkpoint(dir_path)
    for key in ("kind", "num_tokens", "dim", "attach_layer"):
        if key not in meta:
            raise ParseError(f"predictor checkpoint meta missing '{key}'")
    arch = PredictorArch(
        kind=meta["kind"],
        num_tokens=int(meta["num_tokens"]),
        dim=int(meta["dim"]),
        hidden=int(meta.get("hidden", 256)),
        heads=int(meta.get("heads", 4)),
    )
    arch.validate()
    params = {name: Parameter(arr, name) for name, arr in tensors.items()}
    pw = PredictorWeights(arch=arch, attach_layer=int(meta["attach_layer"]), params=params)
    return pw.freeze(), meta
