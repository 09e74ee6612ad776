"""Synthetic glyph datasets with ground-truth redundant patches.

Each image is a noisy gray background with one class-specific glyph (a color
plus a fill pattern) stamped over a contiguous block of patches at a random
grid position. The patch-level ``foreground_mask`` records where the glyph
sits; it is evaluation metadata only and is never shown to the model, which
makes "this token is background" a checkable claim rather than a guess.

Glyph colors are drawn from a fixed 16-entry palette laid out so that any two
class means stay far apart relative to background noise; the ``variant`` knob
selects disjoint palette slices so that visually distinct sibling datasets
can be generated for transfer experiments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ConfigError, MissingArtifactError, ParseError, ShapeError
from .nncore.io import load_tensor, save_tensor
from .nncore.rng import SeededRng

__all__ = [
    "DataConfig",
    "SyntheticImage",
    "DatasetSplit",
    "TokenGrid",
    "ROLES",
    "generate_synthetic",
    "patchify",
    "unpatchify",
    "few_shot_sample",
    "save_split",
    "load_split",
    "save_dataset",
    "load_dataset",
]

ROLES = ("pretrain", "predictor_train", "tune_train", "test")

# 16 well-separated RGB anchors: cube corners, then the inner half-tone cube.
# Within either slice, and between slices, every pair of colors is at least
# 0.43 apart in L2, comfortably above 5x the background std at default noise.
_PALETTE = np.array(
    [(r, g, b) for r in (0.0, 1.0) for g in (0.0, 1.0) for b in (0.0, 1.0)]
    + [(r, g, b) for r in (0.25, 0.75) for g in (0.25, 0.75) for b in (0.25, 0.75)],
    dtype=np.float32,
)

_NUM_PATTERNS = 4  # checker, horizontal stripes, vertical stripes, solid


@dataclass(frozen=True)
class DataConfig:
    """Geometry and content knobs for one synthetic dataset."""

    num_classes: int = 8
    images_per_class: int | Mapping[str, int] = 50
    grid_side: int = 8  # P: patches per image side
    patch_pixels: int = 4  # p: pixels per patch side
    noise_level: float = 0.1
    glyph_side: int = 3  # glyph covers glyph_side x glyph_side patches
    variant: int = 0
    class_name_prefix: str = "class"

    def counts(self) -> dict[str, int]:
        if isinstance(self.images_per_class, int):
            return {role: self.images_per_class for role in ROLES}
        missing = [r for r in ROLES if r not in self.images_per_class]
        if missing:
            raise ConfigError(f"images_per_class missing counts for roles {missing}")
        return {role: int(self.images_per_class[role]) for role in ROLES}

    def validate(self) -> None:
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.grid_side < 4:
            raise ConfigError(f"grid_side must be >= 4, got {self.grid_side}")
        if self.glyph_side < 1 or self.glyph_side > self.grid_side - 1:
            raise ConfigError(
                f"glyph_side {self.glyph_side} must fit strictly inside a "
                f"{self.grid_side}x{self.grid_side} grid"
            )
        if self.patch_pixels < 2 or self.patch_pixels % 2:
            raise ConfigError(
                f"patch_pixels must be even and >= 2 so fill patterns tile "
                f"patches evenly, got {self.patch_pixels}"
            )
        if not 0.0 <= self.noise_level <= 0.4:
            raise ConfigError(f"noise_level must be in [0, 0.4], got {self.noise_level}")
        lo = self.variant * self.num_classes
        hi = lo + self.num_classes
        if self.variant < 0 or hi > len(_PALETTE):
            raise ConfigError(
                f"variant {self.variant} with {self.num_classes} classes exceeds "
                f"the {len(_PALETTE)}-color palette"
            )

    @property
    def image_side(self) -> int:
        return self.grid_side * self.patch_pixels

    def class_names(self) -> list[str]:
        return [f"{self.class_name_prefix}{i:02d}" for i in range(self.num_classes)]


@dataclass
class SyntheticImage:
    pixels: np.ndarray  # [3, H, W] float32 in [0, 1]
    label: int
    foreground_mask: np.ndarray  # [P, P] bool


@dataclass
class DatasetSplit:
    examples: list[SyntheticImage]
    role: str
    class_names: list[str]

    def __len__(self) -> int:
        return len(self.examples)

    def labels(self) -> np.ndarray:
        return np.array([ex.label for ex in self.examples], dtype=np.int64)


@dataclass
class TokenGrid:
    tokens: np.ndarray  # [N, d_in] float32, row-major grid order
    grid_side: int


def _pattern_mask(pattern: int, side: int) -> np.ndarray:
    y, x = np.mgrid[0:side, 0:side]
    if pattern == 0:
        return (y + x) % 2 == 0
    if pattern == 1:
        return y % 2 == 0
    if pattern == 2:
        return x % 2 == 0
    return np.ones((side, side), dtype=bool)


def _class_style(config: DataConfig, label: int) -> tuple[np.ndarray, int]:
    color = _PALETTE[config.variant * config.num_classes + label]
    pattern = (label + config.variant) % _NUM_PATTERNS
    return color, pattern


def _render_image(config: DataConfig, label: int, rng: SeededRng) -> SyntheticImage:
    side = config.image_side
    p = config.patch_pixels
    glyph_px = config.glyph_side * p

    if config.noise_level > 0:
        pixels = rng.uniform(
            0.5 - config.noise_level, 0.5 + config.noise_level, (3, side, side)
        )
    else:
        pixels = np.full((3, side, side), 0.5, dtype=np.float32)

    max_pos = config.grid_side - config.glyph_side
    row = int(rng.integers(0, max_pos + 1))
    col = int(rng.integers(0, max_pos + 1))

    color, pattern = _class_style(config, label)
    stamp = _pattern_mask(pattern, glyph_px)
    y0, x0 = row * p, col * p
    region = pixels[:, y0 : y0 + glyph_px, x0 : x0 + glyph_px]
    region[:, stamp] = color[:, None]

    mask = np.zeros((config.grid_side, config.grid_side), dtype=bool)
    mask[row : row + config.glyph_side, col : col + config.glyph_side] = True
    return SyntheticImage(pixels=pixels, label=label, foreground_mask=mask)


def generate_synthetic(config: DataConfig, rng: SeededRng) -> dict[str, DatasetSplit]:
    """Generate all four splits deterministically from one seed.

    Each split draws from its own child stream, so the contents of one split
    never depend on the sizes of the others.
    """
    config.validate()
    counts = config.counts()
    names = config.class_names()
    splits: dict[str, DatasetSplit] = {}
    for role in ROLES:
        split_rng = rng.child(f"split:{role}")
        examples = [
            _render_image(config, label, split_rng)
            for label in range(config.num_classes)
            for _ in range(counts[role])
        ]
        splits[role] = DatasetSplit(examples=examples, role=role, class_names=names)
    return splits


def patchify(image: SyntheticImage, patch_pixels: int) -> TokenGrid:
    """Cut pixels into non-overlapping p x p patches, row-major, flattened."""
    c, h, w = image.pixels.shape
    if h % patch_pixels or w % patch_pixels:
        raise ShapeError(
            f"image {h}x{w} not divisible into {patch_pixels}x{patch_pixels} patches"
        )
    side = h // patch_pixels
    # [C,H,W] -> [side, side, C, p, p] -> [N, C*p*p]
    x = image.pixels.reshape(c, side, patch_pixels, side, patch_pixels)
    x = x.transpose(1, 3, 0, 2, 4)
    tokens = np.ascontiguousarray(x.reshape(side * side, c * patch_pixels * patch_pixels))
    return TokenGrid(tokens=tokens, grid_side=side)


def unpatchify(grid: TokenGrid, patch_pixels: int, channels: int = 3) -> np.ndarray:
    """Inverse of patchify: reassemble [C, H, W] pixels from token rows."""
    side = grid.grid_side
    x = grid.tokens.reshape(side, side, channels, patch_pixels, patch_pixels)
    x = x.transpose(2, 0, 3, 1, 4)
    return np.ascontiguousarray(x.reshape(channels, side * patch_pixels, side * patch_pixels))


def few_shot_sample(split: DatasetSplit, shots: int, rng: SeededRng) -> DatasetSplit:
    """Pick `shots` examples per class without replacement, canonical order.

    The result lists classes in label order, and within each class keeps the
    original example order, so equal seeds give identical splits and the
    full-class case degenerates to a plain per-class sort.
    """
    by_class: dict[int, list[int]] = {}
    for i, ex in enumerate(split.examples):
        by_class.setdefault(ex.label, []).append(i)
    chosen: list[int] = []
    for label in range(len(split.class_names)):
        pool = by_class.get(label, [])
        if len(pool) < shots:
            raise ConfigError(
                f"class '{split.class_names[label]}' has {len(pool)} examples, "
                f"need {shots}"
            )
        pick = rng.permutation(len(pool))[:shots]
        chosen.extend(pool[i] for i in sorted(pick))
    return DatasetSplit(
        examples=[split.examples[i] for i in chosen],
        role=split.role,
        class_names=list(split.class_names),
    )


# -- persistence --------------------------------------------------------


def save_split(dir_path: str | Path, split: DatasetSplit) -> None:
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    n = len(split.examples)
    if n:
        pixels = np.stack([ex.pixels for ex in split.examples])
        labels = np.array([ex.label for ex in split.examples], dtype=np.float32)
        masks = np.stack(
            [ex.foreground_mask.astype(np.float32) for ex in split.examples]
        )
    else:
        pixels = np.zeros((0, 3, 0, 0), dtype=np.float32)
        labels = np.zeros((0,), dtype=np.float32)
        masks = np.zeros((0, 0, 0), dtype=np.float32)
    save_tensor(dir_path, "pixels", pixels)
    save_tensor(dir_path, "labels", labels)
    save_tensor(dir_path, "masks", masks)
    manifest = {"role": split.role, "class_names": split.class_names, "count": n}
    (dir_path / "split.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_split(dir_path: str | Path) -> DatasetSplit:
    dir_path = Path(dir_path)
    manifest_path = dir_path / "split.json"
    if not manifest_path.exists():
        raise MissingArtifactError(f"no split manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"unreadable split manifest {manifest_path}: {exc}") from exc
    for key in ("role", "class_names", "count"):
        if key not in manifest:
            raise ParseError(f"split manifest {manifest_path} missing field '{key}'")
    pixels = load_tensor(dir_path, "pixels")
    labels = load_tensor(dir_path, "labels")
    masks = load_tensor(dir_path, "masks")
    count = int(manifest["count"])
    if not (len(pixels) == len(labels) == len(masks) == count):
        raise ParseError(
            f"split manifest {manifest_path} field 'count'={count} disagrees with "
            f"tensor lengths {len(pixels)}/{len(labels)}/{len(masks)}"
        )
    examples = [
        SyntheticImage(
            pixels=pixels[i],
            label=int(labels[i]),
            foreground_mask=masks[i] > 0.5,
        )
        for i in range(count)
    ]
    return DatasetSplit(
        examples=examples,
        role=str(manifest["role"]),
        class_names=[str(c) for c in manifest["class_names"]],
    )


def save_dataset(dir_path: str | Path, splits: Mapping[str, DatasetSplit], config: DataConfig) -> None:
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    for role, split in splits.items():
        save_split(dir_path / role, split)
    manifest = {
        "class_names": next(iter(splits.values())).class_names if splits else [],
        "counts": {role: len(split) for role, split in splits.items()},
        "geometry": {
            "grid_side": config.grid_side,
            "patch_pixels": config.patch_pixels,
            "glyph_side": config.glyph_side,
            "noise_level": config.noise_level,
            "variant": config.variant,
            "num_classes": config.num_classes,
            "class_name_prefix": config.class_name_prefix,
        },
    }
    (dir_path / "dataset.json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_dataset(dir_path: str | Path) -> tuple[dict[str, DatasetSplit], DataConfig]:
    dir_path = Path(dir_path)
    manifest_path = dir_path / "dataset.json"
    if not manifest_path.exists():
        raise MissingArtifactError(f"no dataset manifest at {manifest_path}")
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"unreadable dataset manifest {manifest_path}: {exc}") from exc
    if "geometry" not in manifest or "counts" not in manifest:
        raise ParseError(f"dataset manifest {manifest_path} missing 'geometry' or 'counts'")
    geo = manifest["geometry"]
    config = DataConfig(
        num_classes=int(geo["num_classes"]),
        images_per_class={role: int(c) for role, c in manifest["counts"].items()},
        grid_side=int(geo["grid_side"]),
        patch_pixels=int(geo["patch_pixels"]),
        noise_level=float(geo["noise_level"]),
        glyph_side=int(geo["glyph_side"]),
        variant=int(geo["variant"]),
        class_name_prefix=str(geo.get("class_name_prefix", "class")),
    )
    splits = {role: load_split(dir_path / role) for role in manifest["counts"]}
    return splits, config
