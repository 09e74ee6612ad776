"""Shared fixtures: one small pretrained pipeline reused across test modules.

Training the toy dual encoder takes tens of seconds, so it happens once per
session; tests treat the returned weights as read-only.
"""

import numpy as np
import pytest

from patchprune.clipcore import (
    TextConfig,
    VisionConfig,
    pretrain_contrastive,
    split_to_tokens,
)
from patchprune.data import DataConfig, generate_synthetic
from patchprune.nncore import SeededRng

PIPELINE_SEED = 7


@pytest.fixture(scope="session")
def toy_data_config():
    return DataConfig(
        num_classes=8,
        images_per_class={
            "pretrain": 20,
            "predictor_train": 16,
            "tune_train": 16,
            "test": 12,
        },
        grid_side=8,
        patch_pixels=4,
    )


@pytest.fixture(scope="session")
def toy_splits(toy_data_config):
    return generate_synthetic(toy_data_config, SeededRng(PIPELINE_SEED))


@pytest.fixture(scope="session")
def toy_configs():
    return VisionConfig(), TextConfig()


@pytest.fixture(scope="session")
def toy_weights(toy_splits, toy_configs):
    vision, text = toy_configs
    result = pretrain_contrastive(
        toy_splits["pretrain"], vision, text, SeededRng(PIPELINE_SEED), epochs=8
    )
    return result.weights


@pytest.fixture(scope="session")
def toy_test_tokens(toy_splits, toy_data_config):
    return split_to_tokens(toy_splits["test"], toy_data_config.patch_pixels)


@pytest.fixture(scope="session")
def toy_class_embs(toy_weights):
    from patchprune.clipcore import encode_text

    return encode_text(toy_weights.class_names, toy_weights)


@pytest.fixture(scope="session")
def predictor_cache(toy_weights, toy_splits, toy_data_config, tmp_path_factory):
    """Golden preservation scores for the predictor_train split, on disk."""
    from patchprune.golden import GoldenCache, compute_split_scores

    root = tmp_path_factory.mktemp("golden")
    cache = GoldenCache(root, "toy", "preservation", 3, 2)
    compute_split_scores(
        toy_weights,
        toy_splits["predictor_train"],
        toy_data_config.patch_pixels,
        "preservation",
        cache=cache,
        jobs=2,
    )
    return cache


@pytest.fixture(scope="session")
def heldout_golden(toy_weights, toy_splits, toy_data_config):
    """Golden preservation scores for a slice of the test split (no cache)."""
    from patchprune.data import DatasetSplit
    from patchprune.golden import compute_split_scores

    test = toy_splits["test"]
    head = DatasetSplit(test.examples[:24], test.role, test.class_names)
    return head, compute_split_scores(
        toy_weights, head, toy_data_config.patch_pixels, "preservation", jobs=2
    )


@pytest.fixture(scope="session")
def trained_predictor(toy_weights, toy_splits, predictor_cache):
    """A briefly trained token scorer; enough epochs to beat the init clearly."""
    from patchprune.nncore import SeededRng
    from patchprune.predictor import (
        PredictorArch,
        PredictorTrainConfig,
        train_predictor,
    )

    return train_predictor(
        toy_weights,
        toy_splits["predictor_train"],
        predictor_cache,
        PredictorArch(),
        2,
        PredictorTrainConfig(epochs=15),
        SeededRng(PIPELINE_SEED),
    )
