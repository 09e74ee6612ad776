"""Save and restore dual-encoder weights as a checkpoint directory."""

from __future__ import annotations

from dataclasses import asdict
from pathlib import Path

from ..errors import ParseError
from ..nncore.io import load_checkpoint, save_checkpoint
from ..nncore.optim import Parameter
from .model import ClipWeights, TextConfig, VisionConfig

__all__ = ["save_weights", "load_weights"]


def save_weights(dir_path: str | Path, weights: ClipWeights) -> None:
    meta = {
        "vision": asdict(weights.vision),
        "text": asdict(weights.text),
        "class_names": weights.class_names,
        "vocab": weights.vocab,
    }
    save_checkpoint(dir_path, {k: p.array for k, p in weights.params.items()}, meta=meta)


def load_weights(dir_path: str | Path) -> ClipWeights:
    """Load a frozen ClipWeights from a checkpoint directory."""
    tensors, meta = load_checkpoint(dir_path)
    for key in ("vision", "text", "class_names", "vocab"):
        if key not in meta:
            raise ParseError(f"weights checkpoint at {dir_path} missing meta field '{key}'")
    try:
        vision = VisionConfig(**meta["vision"])
        text = TextConfig(**meta["text"])
    except TypeError as exc:
        raise ParseError(f"weights checkpoint at {dir_path} has bad config fields: {exc}") from exc
    weights = ClipWeights(
        vision=vision,
        text=text,
        class_names=[str(c) for c in meta["class_names"]],
        vocab={str(k): int(v) for k, v in meta["vocab"].items()},
        params={name: Parameter(arr, name) for name, arr in tensors.items()},
    )
    return weights.freeze()
