"""Prompt-bank tests: projection oracles, a float64 twin of the tuning
loss for value and gradient checks, the tuning loop's freeze guarantees,
and checkpoint round-trips.

The twin mirrors the full differentiated surface: text encoder with
prompt rows prepended, vision encoder with derived rows between CLS and
the patches plus mid-network removal, the cosine head, and the
cross-entropy. Gradients are checked by central differences on the twin
at the float32 parameter point, compared per parameter by L2-norm
relative error.
"""

from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchprune.clipcore import RemovalStep, encode_image, encode_text, zero_shot_logits
from patchprune.clipcore.model import LOGIT_SCALE_MAX
from patchprune.data import DatasetSplit, SyntheticImage, few_shot_sample, patchify
from patchprune.errors import (
    ConfigError,
    MissingArtifactError,
    NumericError,
    ParseError,
    ShapeError,
)
from patchprune.nncore import Parameter, SeededRng, Tensor, backward, getitem, log_softmax
from patchprune.predictor import init_predictor, PredictorArch
from patchprune.prompt import (
    PROMPT_MODES,
    PromptState,
    TuneConfig,
    init_prompts,
    inject_prompts,
    load_prompts,
    project_visual_prompts,
    pruned_accuracy,
    save_prompts,
    tune_prompts,
    tuned_class_embs,
    visual_prompts,
)
from patchprune.pruning import make_schedule, prune_infer, schedule_tag
from tests.conftest import PIPELINE_SEED


@pytest.fixture(scope="module")
def scorer(trained_predictor):
    """The fixture-trained ranking predictor's weights."""
    return trained_predictor.predictor


def small_state(b=3, d_t=5, d_v=4, seed=2) -> PromptState:
    rng = SeededRng(seed)
    return PromptState(
        p_t=Parameter(rng.normal(0.5, (b, d_t)), "p_t"),
        m=Parameter(rng.child("m").normal(0.5, (d_v, d_t)), "m"),
    )


# -- projection ---------------------------------------------------------


class TestProjection:
    def test_identity_map_passes_rows_through(self):
        state = small_state(b=3, d_t=5, d_v=5)
        state.m.array[:] = np.eye(5, dtype=np.float32)
        np.testing.assert_allclose(
            project_visual_prompts(state).array, state.p_t.array, atol=1e-7
        )

    def test_zero_map_gives_zero_rows(self):
        state = small_state()
        state.m.array[:] = 0.0
        assert not project_visual_prompts(state).array.any()

    def test_each_row_is_a_matrix_vector_product(self):
        state = small_state(b=4, d_t=6, d_v=3, seed=9)
        out = project_visual_prompts(state).array
        for i in range(4):
            ref = state.m.array.astype(np.float64) @ state.p_t.array[i].astype(
                np.float64
            )
            np.testing.assert_allclose(out[i], ref, rtol=1e-6, atol=1e-7)

    def test_width_mismatch_is_rejected(self):
        state = small_state()
        state.m = Parameter(np.zeros((4, 7), dtype=np.float32), "m")
        with pytest.raises(ShapeError):
            project_visual_prompts(state)

    @settings(max_examples=20, deadline=None)
    @given(
        b=st.integers(1, 5),
        d_t=st.integers(1, 6),
        d_v=st.integers(1, 6),
        seed=st.integers(0, 50),
    )
    def test_projection_matches_numpy(self, b, d_t, d_v, seed):
        state = small_state(b=b, d_t=d_t, d_v=d_v, seed=seed)
        ref = state.p_t.array.astype(np.float64) @ state.m.array.T.astype(np.float64)
        np.testing.assert_allclose(
            project_visual_prompts(state).array, ref, rtol=1e-5, atol=1e-6
        )


# -- initialization -----------------------------------------------------


class TestInit:
    def test_projection_starts_identity_padded(self, toy_weights):
        state = init_prompts(toy_weights, 4, SeededRng(0))
        assert state.m.array.shape == (64, 32)
        np.testing.assert_array_equal(state.m.array, np.eye(64, 32, dtype=np.float32))

    def test_text_rows_are_small_random(self, toy_weights):
        state = init_prompts(toy_weights, 16, SeededRng(3))
        assert state.p_t.shape == (16, 32)
        sd = state.p_t.array.std()
        assert 0.015 < sd < 0.025
        again = init_prompts(toy_weights, 16, SeededRng(3))
        np.testing.assert_array_equal(state.p_t.array, again.p_t.array)
        other = init_prompts(toy_weights, 16, SeededRng(4))
        assert not np.array_equal(state.p_t.array, other.p_t.array)

    def test_zero_rows_allowed(self, toy_weights):
        state = init_prompts(toy_weights, 0, SeededRng(0))
        assert state.b == 0
        assert visual_prompts(state, "t_and_v") is None
        assert visual_prompts(state, "t_only") is None

    def test_negative_count_rejected(self, toy_weights):
        with pytest.raises(ConfigError, match=">= 0"):
            init_prompts(toy_weights, -1, SeededRng(0))

    def test_capacity_overflow_rejected(self, toy_weights):
        # 20 prompts + 5 template tokens > max_len 24
        with pytest.raises(ConfigError, match="exceed"):
            init_prompts(toy_weights, 20, SeededRng(0))

    def test_trainable_set_follows_mode(self):
        state = small_state()
        assert state.parameters("t_only") == [state.p_t]
        assert state.parameters("t_and_v") == [state.p_t, state.m]
        with pytest.raises(ConfigError, match="prompt mode"):
            state.parameters("v_only")


# -- sequence splicing --------------------------------------------------


class TestInjectPrompts:
    def seqs(self):
        rng = SeededRng(8)
        w_t = Tensor(rng.normal(1.0, (5, 5)))
        w_v = Tensor(rng.child("v").normal(1.0, (7, 4)))  # [CLS; 6 patches]
        return w_t, w_v

    def test_zero_prompts_change_nothing(self):
        w_t, w_v = self.seqs()
        state = small_state(b=0)
        out_t, out_v = inject_prompts(w_t, w_v, state, "t_and_v")
        assert out_t is w_t and out_v is w_v

    def test_text_only_leaves_vision_sequence_alone(self):
        w_t, w_v = self.seqs()
        state = small_state(b=3)
        out_t, out_v = inject_prompts(w_t, w_v, state, "t_only")
        assert out_v is w_v
        assert out_t.shape[0] == 5 + 3
        np.testing.assert_array_equal(out_t.array[:3], state.p_t.array)
        np.testing.assert_array_equal(out_t.array[3:], w_t.array)

    def test_both_sides_grow_by_the_prompt_count(self):
        w_t, w_v = self.seqs()
        state = small_state(b=3)
        out_t, out_v = inject_prompts(w_t, w_v, state, "t_and_v")
        assert out_t.shape[0] == 5 + 3
        assert out_v.shape[0] == 7 + 3
        np.testing.assert_array_equal(out_v.array[:1], w_v.array[:1])
        np.testing.assert_array_equal(
            out_v.array[1:4], project_visual_prompts(state).array
        )
        np.testing.assert_array_equal(out_v.array[4:], w_v.array[1:])

    def test_overflow_and_bad_mode_rejected(self):
        w_t, w_v = self.seqs()
        state = small_state(b=3)
        with pytest.raises(ConfigError, match="max_len"):
            inject_prompts(w_t, w_v, state, "t_only", max_len=7)
        with pytest.raises(ConfigError, match="prompt mode"):
            inject_prompts(w_t, w_v, state, "both")


class TestTunedClassEmbs:
    def test_empty_bank_matches_plain_encoding(self, toy_weights):
        state = init_prompts(toy_weights, 0, SeededRng(0))
        plain = encode_text(toy_weights.class_names, toy_weights)
        with_state = tuned_class_embs(toy_weights, state)
        np.testing.assert_array_equal(plain.E.array, with_state.E.array)

    def test_prompt_rows_move_every_class(self, toy_weights):
        state = init_prompts(toy_weights, 2, SeededRng(1))
        base = tuned_class_embs(toy_weights, state).E.array.copy()
        state.p_t.array[0] += 0.05
        bumped = tuned_class_embs(toy_weights, state).E.array
        per_class = np.abs(bumped - base).max(axis=1)
        assert (per_class > 0).all()


# -- float64 twin of the tuning loss ------------------------------------


def _p64(weights, name):
    return weights[name].array.astype(np.float64)


def ref_gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def ref_ln(x, g, b, eps=1e-5):
    mu = x.mean(-1, keepdims=True)
    var = x.var(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def ref_softmax(x):
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def ref_block(weights, x, pfx, heads):
    n, d = x.shape
    dh = d // heads
    h = ref_ln(x, _p64(weights, f"{pfx}_ln1_g"), _p64(weights, f"{pfx}_ln1_b"))

    def proj(nm):
        y = h @ _p64(weights, f"{pfx}_{nm}") + _p64(weights, f"{pfx}_{nm}_b")
        return y.reshape(n, heads, dh).transpose(1, 0, 2)

    q, k, v = proj("wq"), proj("wk"), proj("wv")
    attn = ref_softmax(q @ k.transpose(0, 2, 1) / np.sqrt(dh))
    out = (attn @ v).transpose(1, 0, 2).reshape(n, d)
    x = x + out @ _p64(weights, f"{pfx}_wo") + _p64(weights, f"{pfx}_wo_b")
    h2 = ref_ln(x, _p64(weights, f"{pfx}_ln2_g"), _p64(weights, f"{pfx}_ln2_b"))
    m = ref_gelu(h2 @ _p64(weights, f"{pfx}_w1") + _p64(weights, f"{pfx}_w1_b"))
    return x + m @ _p64(weights, f"{pfx}_w2") + _p64(weights, f"{pfx}_w2_b")


def ref_class_embs(weights, p_t):
    """Text side: prompts (no positions) before the template, last row out."""
    cfg = weights.text
    ids = np.array(
        [weights.template_ids(name) for name in weights.class_names], dtype=np.int64
    )
    template_len = ids.shape[1]
    rows = []
    for c in range(ids.shape[0]):
        x = _p64(weights, "t_embed")[ids[c]] + _p64(weights, "t_pos")[:template_len]
        x = np.concatenate([p_t, x], axis=0)
        for k in range(1, cfg.layers + 1):
            x = ref_block(weights, x, f"t{k}", cfg.heads)
        x = ref_ln(x, _p64(weights, "t_ln_f_g"), _p64(weights, "t_ln_f_b"))
        rows.append(x[p_t.shape[0] + template_len - 1])
    emb = np.stack(rows) @ _p64(weights, "proj_t")
    emb = emb / np.linalg.norm(emb, axis=-1, keepdims=True)
    scale = np.exp(min(float(weights["logit_scale"].item()), LOGIT_SCALE_MAX))
    return emb, scale


def ref_pruned_cls(weights, tokens, p_v, drops):
    """Vision side: [CLS; derived rows; patches], removal before layers."""
    x = tokens.astype(np.float64) @ _p64(weights, "v_embed_w")
    x = x + _p64(weights, "v_embed_b") + _p64(weights, "v_pos")
    head = [_p64(weights, "v_cls").reshape(1, -1)]
    if p_v is not None:
        head.append(p_v)
    fixed = 1 + (0 if p_v is None else p_v.shape[0])
    x = np.concatenate(head + [x], axis=0)
    surviving = np.arange(tokens.shape[0])
    for k in range(1, weights.vision.layers + 1):
        if k in drops:
            keep = ~np.isin(surviving, drops[k])
            x = np.concatenate([x[:fixed], x[fixed:][keep]], axis=0)
            surviving = surviving[keep]
        x = ref_block(weights, x, f"v{k}", weights.vision.heads)
    x = ref_ln(x, _p64(weights, "v_ln_f_g"), _p64(weights, "v_ln_f_b"))
    return x[0]


def ref_tune_loss(weights, p_t, m, mode, token_sets, labels, drops_list):
    E, scale = ref_class_embs(weights, p_t)
    p_v = p_t @ m.T if mode == "t_and_v" else None
    total = 0.0
    for tokens, label, drops in zip(token_sets, labels, drops_list):
        z = ref_pruned_cls(weights, tokens, p_v, drops)
        v = z @ _p64(weights, "proj_v")
        v = v / np.linalg.norm(v)
        logits = scale * (v @ E.T)
        mx = logits.max()
        lsm = logits - (mx + np.log(np.exp(logits - mx).sum()))
        total += -lsm[label] / len(token_sets)
    return total


def graph_loss(weights, state, mode, grids, labels, plans):
    """The float32 tuning loss for fixed removal plans, tape attached."""
    class_embs = tuned_class_embs(weights, state)
    p_v = visual_prompts(state, mode)
    loss = None
    for grid, label, plan in zip(grids, labels, plans):
        enc = encode_image(weights, grid, removal_plan=plan, prompts_v=p_v)
        logits = zero_shot_logits(enc.Z_cls, class_embs, weights["proj_v"])
        nll = getitem(log_softmax(logits), int(label)) * (-1.0 / len(grids))
        loss = nll if loss is None else loss + nll
    return loss


def fixed_case(toy_weights, toy_splits, toy_data_config, b=2, seed=4):
    """Two images, two-location explicit-id plans, a fresh prompt bank."""
    state = init_prompts(toy_weights, b, SeededRng(seed).child("init"))
    examples = toy_splits["test"].examples[:2]
    grids = [patchify(ex, toy_data_config.patch_pixels) for ex in examples]
    labels = [ex.label for ex in examples]
    plans, drops_list = [], []
    for i in range(2):
        perm = SeededRng(seed).child(f"drop:{i}").permutation(64)
        drops = {2: np.sort(perm[:10]), 4: np.sort(perm[10:18])}
        drops_list.append(drops)
        plans.append(
            [RemovalStep(layer=k, drop_ids=ids) for k, ids in sorted(drops.items())]
        )
    return state, grids, labels, plans, drops_list


class TestLossValue:
    @pytest.mark.parametrize("mode", PROMPT_MODES)
    def test_loss_matches_float64_twin(
        self, toy_weights, toy_splits, toy_data_config, mode
    ):
        state, grids, labels, plans, drops_list = fixed_case(
            toy_weights, toy_splits, toy_data_config
        )
        loss = graph_loss(toy_weights, state, mode, grids, labels, plans)
        ref = ref_tune_loss(
            toy_weights,
            state.p_t.array.astype(np.float64),
            state.m.array.astype(np.float64),
            mode,
            [g.tokens for g in grids],
            labels,
            drops_list,
        )
        assert abs(loss.item() - ref) < 1e-5


class TestGradients:
    def test_prompt_gradients_match_finite_differences(
        self, toy_weights, toy_splits, toy_data_config
    ):
        state, grids, labels, plans, drops_list = fixed_case(
            toy_weights, toy_splits, toy_data_config
        )
        loss = graph_loss(toy_weights, state, "t_and_v", grids, labels, plans)
        backward(loss)
        token_sets = [g.tokens for g in grids]

        p0 = state.p_t.array.astype(np.float64)
        m0 = state.m.array.astype(np.float64)

        def twin(p, m):
            return ref_tune_loss(
                toy_weights, p, m, "t_and_v", token_sets, labels, drops_list
            )

        h = 1e-5
        num_p = np.zeros_like(p0)
        for idx in np.ndindex(p0.shape):
            up, dn = p0.copy(), p0.copy()
            up[idx] += h
            dn[idx] -= h
            num_p[idx] = (twin(up, m0) - twin(dn, m0)) / (2 * h)
        rel = np.linalg.norm(state.p_t.grad - num_p) / max(
            np.linalg.norm(num_p), 1e-6
        )
        assert rel < 1e-3, f"p_t gradient off by {rel:.2e}"

        # The projection has 2048 entries; check a seeded sample.
        flat_ids = np.random.RandomState(11).choice(m0.size, 60, replace=False)
        num_m = np.zeros(60)
        for j, fid in enumerate(flat_ids):
            up, dn = m0.copy().ravel(), m0.copy().ravel()
            up[fid] += h
            dn[fid] -= h
            num_m[j] = (
                twin(p0, up.reshape(m0.shape)) - twin(p0, dn.reshape(m0.shape))
            ) / (2 * h)
        ana_m = state.m.grad.ravel()[flat_ids]
        rel_m = np.linalg.norm(ana_m - num_m) / max(np.linalg.norm(num_m), 1e-6)
        assert rel_m < 1e-3, f"projection gradient off by {rel_m:.2e}"

    def test_text_only_loss_never_touches_the_projection(
        self, toy_weights, toy_splits, toy_data_config
    ):
        state, grids, labels, plans, _ = fixed_case(
            toy_weights, toy_splits, toy_data_config
        )
        loss = graph_loss(toy_weights, state, "t_only", grids, labels, plans)
        backward(loss)
        assert state.p_t.grad is not None and np.abs(state.p_t.grad).max() > 0
        assert state.m.grad is None or not state.m.grad.any()


# -- tuning loop --------------------------------------------------------


class TestTuneConfig:
    def test_field_validation(self):
        TuneConfig().validate()
        bad = [
            TuneConfig(mode="v_only"),
            TuneConfig(shots=0),
            TuneConfig(b=-1),
            TuneConfig(epochs=-1),
            TuneConfig(lr=0.0),
            TuneConfig(batch_size=0),
        ]
        for cfg in bad:
            with pytest.raises(ConfigError):
                cfg.validate()


@pytest.fixture(scope="module")
def tuned(toy_weights, toy_splits, toy_data_config, scorer):
    """One short t_and_v tuning run plus before/after snapshots."""
    schedule = make_schedule(0.6, 64)
    config = TuneConfig(shots=16, b=4, epochs=3, lr=1e-2, batch_size=8)
    before_w = {k: p.array.copy() for k, p in toy_weights.params.items()}
    before_p = {k: p.array.copy() for k, p in scorer.params.items()}
    flags = {k: p.requires_grad for k, p in toy_weights.params.items()}
    state, log = tune_prompts(
        toy_weights,
        scorer,
        schedule,
        toy_splits["tune_train"],
        config,
        SeededRng(PIPELINE_SEED),
        patch_pixels=toy_data_config.patch_pixels,
    )
    return {
        "schedule": schedule,
        "config": config,
        "state": state,
        "log": log,
        "before_w": before_w,
        "before_p": before_p,
        "flags": flags,
    }


class TestTunePrompts:
    def test_loss_decreases(self, tuned):
        losses = tuned["log"].epoch_losses
        assert len(losses) == tuned["config"].epochs
        assert losses[-1] < losses[0]
        assert all(np.isfinite(losses))

    def test_backbone_and_predictor_stay_bitwise_frozen(
        self, tuned, toy_weights, scorer
    ):
        for k, p in toy_weights.params.items():
            np.testing.assert_array_equal(tuned["before_w"][k], p.array)
            assert p.requires_grad == tuned["flags"][k]
        for k, p in scorer.params.items():
            np.testing.assert_array_equal(tuned["before_p"][k], p.array)

    def test_both_banks_moved(self, tuned, toy_weights):
        init = init_prompts(
            toy_weights, tuned["config"].b, SeededRng(PIPELINE_SEED).child("init")
        )
        assert not np.array_equal(tuned["state"].p_t.array, init.p_t.array)
        assert not np.array_equal(tuned["state"].m.array, init.m.array)

    def test_text_only_mode_keeps_the_image_side_bitwise(
        self, toy_weights, toy_splits, toy_data_config, scorer
    ):
        schedule = make_schedule(0.6, 64)
        grid = patchify(toy_splits["test"].examples[0], toy_data_config.patch_pixels)
        config = TuneConfig(shots=2, b=4, epochs=2, lr=1e-2, batch_size=8, mode="t_only")
        split = few_shot_sample(toy_splits["tune_train"], 2, SeededRng(1))

        def image_side():
            from patchprune.pruning import removal_plan

            plan = removal_plan(schedule, "predictor", 64, predictor=scorer)
            return encode_image(toy_weights, grid, removal_plan=plan).Z_cls.array

        before = image_side()
        state, _ = tune_prompts(
            toy_weights,
            scorer,
            schedule,
            split,
            config,
            SeededRng(5),
            patch_pixels=toy_data_config.patch_pixels,
        )
        np.testing.assert_array_equal(before, image_side())
        init = init_prompts(toy_weights, 4, SeededRng(5).child("init"))
        np.testing.assert_array_equal(state.m.array, init.m.array)
        assert not np.array_equal(state.p_t.array, init.p_t.array)

    def test_zero_epochs_returns_initialization(
        self, toy_weights, toy_splits, toy_data_config, scorer
    ):
        config = TuneConfig(shots=16, b=4, epochs=0)
        state, log = tune_prompts(
            toy_weights,
            scorer,
            make_schedule(0.6, 64),
            toy_splits["tune_train"],
            config,
            SeededRng(42),
            patch_pixels=toy_data_config.patch_pixels,
        )
        init = init_prompts(toy_weights, 4, SeededRng(42).child("init"))
        np.testing.assert_array_equal(state.p_t.array, init.p_t.array)
        np.testing.assert_array_equal(state.m.array, init.m.array)
        assert log.epoch_losses == [] and log.eval_accuracy == []

    def test_eval_split_is_scored_every_epoch(
        self, toy_weights, toy_splits, toy_data_config, scorer
    ):
        split = few_shot_sample(toy_splits["tune_train"], 2, SeededRng(1))
        eval_split = few_shot_sample(toy_splits["test"], 1, SeededRng(2))
        config = TuneConfig(shots=2, b=2, epochs=2, lr=1e-2)
        _, log = tune_prompts(
            toy_weights,
            scorer,
            make_schedule(0.6, 64),
            split,
            config,
            SeededRng(6),
            patch_pixels=toy_data_config.patch_pixels,
            eval_split=eval_split,
        )
        assert len(log.eval_accuracy) == 2
        assert all(0.0 <= a <= 1.0 for a in log.eval_accuracy)

    def test_unbalanced_split_rejected(
        self, toy_weights, toy_splits, toy_data_config, scorer
    ):
        full = toy_splits["tune_train"]
        lopsided = DatasetSplit(
            examples=full.examples[:-1], role=full.role, class_names=full.class_names
        )
        with pytest.raises(ConfigError, match="per class"):
            tune_prompts(
                toy_weights,
                scorer,
                make_schedule(0.6, 64),
                lopsided,
                TuneConfig(shots=16, epochs=1),
                SeededRng(0),
                patch_pixels=toy_data_config.patch_pixels,
            )

    def test_shots_mismatch_rejected(
        self, toy_weights, toy_splits, toy_data_config, scorer
    ):
        with pytest.raises(ConfigError, match="per class"):
            tune_prompts(
                toy_weights,
                scorer,
                make_schedule(0.6, 64),
                toy_splits["tune_train"],  # 16 per class
                TuneConfig(shots=8, epochs=1),
                SeededRng(0),
                patch_pixels=toy_data_config.patch_pixels,
            )

    def test_foreign_schedule_rejected(
        self, toy_weights, toy_splits, toy_data_config, scorer
    ):
        with pytest.raises(ConfigError, match="built for"):
            tune_prompts(
                toy_weights,
                scorer,
                make_schedule(0.6, 16),
                toy_splits["tune_train"],
                TuneConfig(shots=16, epochs=1),
                SeededRng(0),
                patch_pixels=toy_data_config.patch_pixels,
            )

    def test_non_finite_loss_aborts(self, toy_weights, toy_splits, toy_data_config):
        # keep=1.0 removes nothing, so the poisoned image reaches the loss
        # check instead of tripping the scorer's own NaN guard.
        full = toy_splits["tune_train"]
        examples = []
        for label in range(len(full.class_names)):
            ex = next(e for e in full.examples if e.label == label)
            examples.append(ex)
        bad = examples[0]
        examples[0] = SyntheticImage(
            pixels=np.full_like(bad.pixels, np.nan),
            label=bad.label,
            foreground_mask=bad.foreground_mask,
        )
        poisoned = DatasetSplit(
            examples=examples, role="tune_train", class_names=full.class_names
        )
        pred = init_predictor(PredictorArch(), 1, SeededRng(0))
        with pytest.raises(NumericError, match="epoch 1"):
            tune_prompts(
                toy_weights,
                pred,
                make_schedule(1.0, 64),
                poisoned,
                TuneConfig(shots=1, b=2, epochs=1),
                SeededRng(0),
                patch_pixels=toy_data_config.patch_pixels,
            )


class TestPrunedAccuracy:
    def test_matches_manual_inference_loop(
        self, toy_weights, toy_splits, toy_data_config, scorer, toy_class_embs
    ):
        head = DatasetSplit(
            examples=toy_splits["test"].examples[:8],
            role="test",
            class_names=toy_splits["test"].class_names,
        )
        schedule = make_schedule(0.6, 64)
        acc = pruned_accuracy(
            toy_weights, head, schedule, scorer, toy_data_config.patch_pixels
        )
        hits = 0
        for ex in head.examples:
            result = prune_infer(
                toy_weights,
                patchify(ex, toy_data_config.patch_pixels),
                schedule,
                "predictor",
                toy_class_embs,
                predictor=scorer,
            )
            hits += int(result.pred_label == ex.label)
        assert acc == hits / 8


# -- persistence --------------------------------------------------------


class TestPersistence:
    def test_roundtrip(self, tmp_path, toy_weights, tuned):
        schedule = tuned["schedule"]
        save_prompts(
            tmp_path / "ck", tuned["state"], mode="t_and_v", shots=16, schedule=schedule
        )
        loaded, meta = load_prompts(tmp_path / "ck")
        np.testing.assert_array_equal(loaded.p_t.array, tuned["state"].p_t.array)
        np.testing.assert_array_equal(loaded.m.array, tuned["state"].m.array)
        assert meta["mode"] == "t_and_v"
        assert meta["b"] == tuned["state"].b
        assert meta["shots"] == 16
        assert meta["schedule"] == schedule_tag(schedule)
        assert not loaded.p_t.requires_grad and not loaded.m.requires_grad

    def test_missing_meta_key_rejected(self, tmp_path, tuned):
        import json

        path = tmp_path / "ck2"
        save_prompts(
            path, tuned["state"], mode="t_only", shots=4, schedule=tuned["schedule"]
        )
        doc = json.loads((path / "manifest.json").read_text())
        del doc["meta"]["mode"]
        (path / "manifest.json").write_text(json.dumps(doc))
        with pytest.raises(ParseError, match="mode"):
            load_prompts(path)

    def test_missing_tensor_rejected(self, tmp_path, tuned):
        from patchprune.nncore import save_checkpoint

        path = tmp_path / "ck3"
        save_checkpoint(
            path, {"p_t": tuned["state"].p_t.array}, {"mode": "t_only", "b": 4}
        )
        with pytest.raises(ParseError, match="'m'"):
            load_prompts(path)

    def test_absent_checkpoint_rejected(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            load_prompts(tmp_path / "nowhere")
