"""Contrastive pretraining of the dual encoder on class-balanced batches.

Each batch holds exactly one image per class, paired with the class-prompt
texts, and is scored with the symmetric InfoNCE loss: cross-entropy of the
image->text logits plus cross-entropy of their transpose, halved. At random
initialization both encoders produce nearly collapsed representations, so
the loss starts out close to ln(batch size).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import DatasetSplit, patchify
from ..errors import ConfigError, NumericError
from ..nncore.optim import Adam
from ..nncore.rng import SeededRng
from ..nncore.tensor import (
    Tensor,
    backward,
    getitem,
    log_softmax,
    matmul,
    reshape,
    texp,
    tmean,
    transpose,
)
from .model import (
    LOGIT_SCALE_MAX,
    ClipWeights,
    TextConfig,
    VisionConfig,
    _unit_rows,
    encode_cls_batch,
    encode_text,
    init_weights,
    zero_shot_probs,
)

__all__ = ["PretrainResult", "pretrain_contrastive", "split_to_tokens", "zero_shot_accuracy"]


@dataclass
class PretrainResult:
    weights: ClipWeights  # frozen
    epoch_losses: list[float]


def split_to_tokens(split: DatasetSplit, patch_pixels: int) -> np.ndarray:
    """Patchify every example into one [n, N, d_in] array."""
    return np.stack([patchify(ex, patch_pixels).tokens for ex in split.examples])


def _clip_loss(weights: ClipWeights, image_tokens: np.ndarray) -> Tensor:
    """Symmetric InfoNCE for a batch ordered class 0..C-1."""
    num_classes = len(weights.class_names)
    z_img = encode_cls_batch(weights, image_tokens)
    z_img = matmul(z_img, weights["proj_v"])
    z_img = _unit_rows(
        z_img, "image embedding collapsed to zero norm during pretraining"
    )
    class_embs = encode_text(weights.class_names, weights)

    scale = texp(reshape(weights["logit_scale"], (1, 1)))
    logits = matmul(z_img, transpose(class_embs.E, (1, 0))) * scale
    diag = (np.arange(num_classes), np.arange(num_classes))
    loss_i = -tmean(getitem(log_softmax(logits, axis=-1), diag))
    loss_t = -tmean(getitem(log_softmax(transpose(logits, (1, 0)), axis=-1), diag))
    return (loss_i + loss_t) * 0.5


def pretrain_contrastive(
    split: DatasetSplit,
    vision: VisionConfig,
    text: TextConfig,
    rng: SeededRng,
    epochs: int,
    lr: float = 3e-4,
) -> PretrainResult:
    """Train from scratch; returns frozen weights and per-epoch mean losses.

    Larger learning rates collapse this loss: the batch embeddings merge to
    one point, the logits go uniform, and no gradient can separate them
    again. The 3e-4 default stays below that cliff on the toy configuration.
    """
    if not split.examples:
        raise ConfigError("pretrain split is empty")
    grid_side = int(np.sqrt(vision.num_patches))
    patch_pixels = split.examples[0].pixels.shape[1] // grid_side
    weights = init_weights(vision, text, split.class_names, rng)
    if epochs == 0:
        return PretrainResult(weights=weights.freeze(), epoch_losses=[])

    tokens = split_to_tokens(split, patch_pixels)
    num_classes = len(split.class_names)
    labels = split.labels()
    by_class = [np.nonzero(labels == c)[0] for c in range(num_classes)]
    if any(len(ix) == 0 for ix in by_class):
        empty = [split.class_names[c] for c in range(num_classes) if len(by_class[c]) == 0]
        raise ConfigError(f"pretrain split has no examples for classes {empty}")
    batches_per_epoch = min(len(ix) for ix in by_class)

    opt = Adam(list(weights.params.values()), lr=lr)
    order_rng = rng.child("batch-order")
    losses: list[float] = []
    last_finite = float("nan")
    for _ in range(epochs):
        orders = [ix[order_rng.permutation(len(ix))] for ix in by_class]
        epoch_loss = 0.0
        for b in range(batches_per_epoch):
            batch_ids = np.array([orders[c][b] for c in range(num_classes)])
            opt.zero_grad()
            loss = _clip_loss(weights, tokens[batch_ids])
            val = loss.item()
            if not np.isfinite(val):
                raise NumericError(
                    f"pretraining loss became non-finite; last finite loss {last_finite:.4f}"
                )
            last_finite = val
            backward(loss)
            opt.step()
            ls = weights["logit_scale"]
            ls.array = np.minimum(ls.array, np.float32(LOGIT_SCALE_MAX))
            epoch_loss += val
        losses.append(epoch_loss / batches_per_epoch)
    return PretrainResult(weights=weights.freeze(), epoch_losses=losses)


def initial_loss(weights: ClipWeights, split: DatasetSplit, patch_pixels: int) -> float:
    """Loss of one class-balanced batch under the given weights, no training."""
    labels = split.labels()
    batch_ids = np.array(
        [np.nonzero(labels == c)[0][0] for c in range(len(split.class_names))]
    )
    tokens = split_to_tokens(split, patch_pixels)
    return _clip_loss(weights, tokens[batch_ids]).item()


def zero_shot_accuracy(
    weights: ClipWeights,
    split: DatasetSplit,
    patch_pixels: int,
    batch_size: int = 64,
) -> float:
    """Fraction of examples whose argmax zero-shot class matches the label."""
    tokens = split_to_tokens(split, patch_pixels)
    labels = split.labels()
    class_embs = encode_text(weights.class_names, weights)
    correct = 0
    for start in range(0, len(tokens), batch_size):
        z = encode_cls_batch(weights, tokens[start : start + batch_size])
        probs = zero_shot_probs(z, class_embs, weights["proj_v"])
        correct += int((np.argmax(probs.array, axis=-1) == labels[start : start + len(z.array)]).sum())
    return correct / len(tokens)
