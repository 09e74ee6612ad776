"""Token-score predictor tests.

The loss and matching-rate values are frozen from high-precision hand
computation; forward paths are cross-checked against float64 twins written
directly from the layer formulas, which also serve as the finite-difference
reference for the gradient checks.
"""

from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from patchprune.data import DatasetSplit
from patchprune.errors import (
    ConfigError,
    LogicError,
    MissingArtifactError,
    NumericError,
    ParseError,
    ShapeError,
    UsageError,
)
from patchprune.golden import GoldenScores, ranking_from_scores
from patchprune.nncore import SeededRng, Tensor, backward, zero_grads
from patchprune.predictor import (
    MatchRateReport,
    PredictorArch,
    PredictorTrainConfig,
    channel_mix,
    init_predictor,
    load_predictor,
    matching_rate,
    mixmlp_forward,
    mlp_forward,
    predictor_forward,
    predictor_loss,
    save_predictor,
    split_matching_rate,
    train_predictor,
    transblock_forward,
)

from tests.conftest import PIPELINE_SEED


# -- float64 reference forwards ------------------------------------------
# Written from the layer formulas, not from the Tensor ops, so they act as
# independent value oracles and as a quiet forward for finite differences.


def ref_gelu(x):
    return 0.5 * x * (1.0 + np.tanh(np.sqrt(2.0 / np.pi) * (x + 0.044715 * x**3)))


def ref_ln(x, g, b, eps=1e-5):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def ref_softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _p64(weights, name):
    return weights[name].array.astype(np.float64)


def ref_mixmlp(weights, z, token_ids=None):
    z = z.astype(np.float64)
    h = ref_ln(z @ _p64(weights, "c_w") + _p64(weights, "c_b"),
               _p64(weights, "c_ln_g"), _p64(weights, "c_ln_b"))
    zc = z + ref_gelu(h)
    if token_ids is None:
        tw, tb = _p64(weights, "t_w"), _p64(weights, "t_b")
        tg, tbeta = _p64(weights, "t_ln_g"), _p64(weights, "t_ln_b")
    else:
        ids = np.asarray(token_ids)
        tw = _p64(weights, "t_w")[np.ix_(ids, ids)]
        tb = _p64(weights, "t_b")[ids]
        tg = _p64(weights, "t_ln_g")[ids]
        tbeta = _p64(weights, "t_ln_b")[ids]
    t = zc.T
    t = t + ref_gelu(ref_ln(t @ tw + tb, tg, tbeta))
    return t.mean(axis=0)


def ref_mlp(weights, z):
    n, d = z.shape
    h = z.astype(np.float64).reshape(1, n * d)
    h = h @ _p64(weights, "w1") + _p64(weights, "b1")
    h = ref_gelu(ref_ln(h, _p64(weights, "ln_g"), _p64(weights, "ln_b")))
    return (h @ _p64(weights, "w2") + _p64(weights, "b2")).reshape(n)


def ref_transblock(weights, z, heads):
    x = z.astype(np.float64)[None]  # [1, n, d]
    b, n, d = x.shape
    dh = d // heads
    h = ref_ln(x, _p64(weights, "pb1_ln1_g"), _p64(weights, "pb1_ln1_b"))

    def proj(nm):
        y = h @ _p64(weights, f"pb1_{nm}") + _p64(weights, f"pb1_{nm}_b")
        return y.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)

    q, k, v = proj("wq"), proj("wk"), proj("wv")
    attn = ref_softmax(q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh))
    out = (attn @ v).transpose(0, 2, 1, 3).reshape(b, n, d)
    out = out @ _p64(weights, "pb1_wo") + _p64(weights, "pb1_wo_b")
    x = x + out
    h2 = ref_ln(x, _p64(weights, "pb1_ln2_g"), _p64(weights, "pb1_ln2_b"))
    m = ref_gelu(h2 @ _p64(weights, "pb1_w1") + _p64(weights, "pb1_w1_b"))
    m = m @ _p64(weights, "pb1_w2") + _p64(weights, "pb1_w2_b")
    return (x + m)[0].mean(axis=1)


def ref_loss(s_norm, s_hat):
    sig = 1.0 / (1.0 + np.exp(-np.asarray(s_norm, dtype=np.float64)))
    logsig = -np.logaddexp(0.0, -np.asarray(s_hat, dtype=np.float64))
    return float(-(sig * logsig).sum())


SMALL_ARCHS = {
    "mixmlp": PredictorArch(kind="mixmlp", num_tokens=6, dim=5),
    "mlp": PredictorArch(kind="mlp", num_tokens=6, dim=5, hidden=8),
    "transblock": PredictorArch(kind="transblock", num_tokens=5, dim=6, heads=2),
}


def small_setup(kind, seed=3):
    arch = SMALL_ARCHS[kind]
    weights = init_predictor(arch, 2, SeededRng(seed))
    rng = np.random.default_rng(seed)
    z = rng.normal(0, 1, size=(arch.num_tokens, arch.dim)).astype(np.float32)
    return weights, z


# -- loss ----------------------------------------------------------------


class TestLoss:
    def test_frozen_single_zero(self):
        # -sigmoid(0) * log sigmoid(0) = -(1/2) ln(1/2)
        loss = predictor_loss(np.zeros(1, np.float32), np.zeros(1, np.float32))
        assert loss.item() == pytest.approx(0.34657359027997265, abs=1e-6)

    def test_frozen_pair(self):
        loss = predictor_loss(
            np.array([1.2, -0.7], np.float32), np.array([0.3, -2.0], np.float32)
        )
        assert loss.item() == pytest.approx(1.1317764660188199, abs=1e-5)

    def test_stable_at_large_negative_prediction(self):
        # -log sigmoid(-500) = 500 exactly to working precision; a naive
        # log(sigmoid(x)) underflows to log(0) here.
        loss = predictor_loss(np.zeros(1, np.float32), np.full(1, -500.0, np.float32))
        assert np.isfinite(loss.item())
        assert loss.item() == pytest.approx(250.0, rel=1e-6)

    def test_confident_prediction_drives_loss_to_zero(self):
        loss = predictor_loss(np.zeros(3, np.float32), np.full(3, 40.0, np.float32))
        assert 0.0 <= loss.item() < 1e-6

    def test_important_tokens_barely_contribute(self):
        # sigmoid(-30) weights the term down to ~1e-13 no matter the prediction.
        quiet = predictor_loss(np.full(1, -30.0, np.float32), np.zeros(1, np.float32))
        assert quiet.item() == pytest.approx(0.0, abs=1e-8)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            predictor_loss(np.zeros(3, np.float32), np.zeros(4, np.float32))

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=20, deadline=None)
    def test_matches_reference_and_nonnegative(self, seed):
        rng = np.random.default_rng(seed)
        s = rng.normal(0, 2, size=8).astype(np.float32)
        sh = rng.normal(0, 2, size=8).astype(np.float32)
        loss = predictor_loss(s, sh).item()
        assert loss >= 0.0
        assert loss == pytest.approx(ref_loss(s, sh), rel=1e-5, abs=1e-6)


# -- forward values and shapes -------------------------------------------


class TestForward:
    @pytest.mark.parametrize("kind", list(SMALL_ARCHS))
    def test_matches_float64_reference(self, kind):
        weights, z = small_setup(kind)
        got = predictor_forward(weights, Tensor(z)).array
        if kind == "mixmlp":
            want = ref_mixmlp(weights, z)
        elif kind == "mlp":
            want = ref_mlp(weights, z)
        else:
            want = ref_transblock(weights, z, weights.arch.heads)
        assert got.shape == (weights.arch.num_tokens,)
        np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-5)

    @pytest.mark.parametrize("kind", list(SMALL_ARCHS))
    def test_zero_input_zero_scores(self, kind):
        # Biases start at zero and every path is odd around the origin.
        weights, _ = small_setup(kind)
        n, d = weights.arch.num_tokens, weights.arch.dim
        out = predictor_forward(weights, Tensor(np.zeros((n, d), np.float32)))
        np.testing.assert_allclose(out.array, 0.0, atol=1e-7)

    def test_restricted_sequence_matches_reference(self):
        weights, z = small_setup("mixmlp")
        ids = np.array([0, 2, 5])
        got = mixmlp_forward(weights, Tensor(z[ids]), token_ids=ids).array
        np.testing.assert_allclose(
            got, ref_mixmlp(weights, z[ids], ids), rtol=1e-4, atol=1e-5
        )
        assert got.shape == (3,)

    def test_too_many_tokens(self):
        weights, _ = small_setup("mixmlp")
        with pytest.raises(ShapeError, match="exceed"):
            mixmlp_forward(weights, Tensor(np.zeros((7, 5), np.float32)))

    def test_short_sequence_needs_token_ids(self):
        weights, z = small_setup("mixmlp")
        with pytest.raises(UsageError, match="token_ids"):
            mixmlp_forward(weights, Tensor(z[:4]))

    def test_token_ids_out_of_range(self):
        weights, z = small_setup("mixmlp")
        with pytest.raises(LogicError, match="6"):
            mixmlp_forward(weights, Tensor(z[:2]), token_ids=np.array([0, 6]))

    def test_token_ids_wrong_shape(self):
        weights, z = small_setup("mixmlp")
        with pytest.raises(ShapeError):
            mixmlp_forward(weights, Tensor(z[:2]), token_ids=np.array([0, 1, 2]))

    def test_flat_mlp_rejects_short_sequences(self):
        weights, z = small_setup("mlp")
        with pytest.raises(ShapeError, match="full grid"):
            mlp_forward(weights, Tensor(z[:4]))

    def test_unknown_kind_rejected_at_init(self):
        with pytest.raises(ConfigError, match="unknown predictor kind"):
            init_predictor(PredictorArch(kind="conv"), 2, SeededRng(0))

    def test_heads_must_divide_dim(self):
        with pytest.raises(ConfigError, match="divisible"):
            init_predictor(
                PredictorArch(kind="transblock", dim=6, heads=4), 2, SeededRng(0)
            )


# -- equivariance --------------------------------------------------------


class TestEquivariance:
    def test_channel_mix_is_token_equivariant_exactly(self):
        weights, z = small_setup("mixmlp")
        perm = np.array([3, 0, 5, 1, 4, 2])
        full = channel_mix(weights, Tensor(z)).array
        permuted = channel_mix(weights, Tensor(z[perm])).array
        # Row-wise op on identical float32 rows: bitwise equal, not just close.
        np.testing.assert_array_equal(permuted, full[perm])

    def test_mixmlp_equivariant_under_matching_token_ids(self):
        # Feeding rows in a different order with token_ids naming that order
        # must give the same scores in that order: the restriction keeps each
        # position's learned mixing column.
        weights, z = small_setup("mixmlp")
        perm = np.array([3, 0, 5, 1, 4, 2])
        base = mixmlp_forward(weights, Tensor(z)).array
        moved = mixmlp_forward(weights, Tensor(z[perm]), token_ids=perm).array
        np.testing.assert_allclose(moved, base[perm], rtol=1e-5, atol=1e-6)

    @given(st.integers(0, 2**32 - 1))
    @settings(max_examples=15, deadline=None)
    def test_equivariance_property(self, seed):
        rng = np.random.default_rng(seed)
        weights, _ = small_setup("mixmlp", seed=int(seed % 1000))
        z = rng.normal(0, 1, size=(6, 5)).astype(np.float32)
        perm = rng.permutation(6)
        base = mixmlp_forward(weights, Tensor(z)).array
        moved = mixmlp_forward(weights, Tensor(z[perm]), token_ids=perm).array
        np.testing.assert_allclose(moved, base[perm], rtol=1e-4, atol=1e-5)


# -- gradients -----------------------------------------------------------


def fd_grads(weights, ref_forward, z, s_norm, step=3e-4):
    """Central differences of the float64 reference loss per parameter.

    The step is small because the 0.02-scale init leaves the pre-norm
    activations with tiny variance, where the layer-norm curvature is steep
    and a 1e-3 step already shows quadratic truncation error.
    """
    grads = {}
    for name, p in weights.params.items():
        saved = p.array.copy()
        g = np.zeros_like(saved, dtype=np.float64)
        flat_r = g.reshape(-1)
        for i in range(saved.size):
            for sign, slot in ((+1, 0), (-1, 1)):
                p.array = saved.copy()
                p.array.reshape(-1)[i] += np.float32(sign * step)
                val = ref_loss(s_norm, ref_forward(weights, z))
                if slot == 0:
                    hi = val
                else:
                    flat_r[i] = (hi - val) / (2 * step)
        p.array = saved
        grads[name] = g
    return grads


@pytest.mark.parametrize("kind", list(SMALL_ARCHS))
def test_parameter_gradients(kind):
    weights, z = small_setup(kind)
    n = weights.arch.num_tokens
    s_norm = np.linspace(-1.5, 1.5, n).astype(np.float32)

    zero_grads(weights.parameters())
    loss = predictor_loss(s_norm, predictor_forward(weights, Tensor(z)))
    backward(loss)

    if kind == "mixmlp":
        ref = lambda w, x: ref_mixmlp(w, x)
    elif kind == "mlp":
        ref = lambda w, x: ref_mlp(w, x)
    else:
        ref = lambda w, x: ref_transblock(w, x, weights.arch.heads)
    numeric = fd_grads(weights, ref, z, s_norm)

    for name, p in weights.params.items():
        num = numeric[name]
        ana = p.grad.astype(np.float64)
        # Norm-based relative error per parameter; the floor keeps params
        # whose true gradient is exactly zero (e.g. a key bias) from
        # dividing noise by zero.
        rel = np.linalg.norm(ana - num) / max(np.linalg.norm(num), 1e-6)
        assert rel < 1e-3, f"{kind}/{name}: rel err {rel:.2e}"


def test_restricted_path_carries_gradients():
    # Scores on a shortened sequence must still reach the full-size weight;
    # only the selected rows and columns may receive gradient.
    weights, z = small_setup("mixmlp")
    ids = np.array([1, 3, 4])
    zero_grads(weights.parameters())
    out = mixmlp_forward(weights, Tensor(z[ids]), token_ids=ids)
    backward(predictor_loss(np.zeros(3, np.float32), out))
    tw = weights["t_w"].grad
    sel = np.zeros((6, 6), dtype=bool)
    sel[np.ix_(ids, ids)] = True
    assert np.abs(tw[sel]).max() > 0
    np.testing.assert_array_equal(tw[~sel], 0.0)


# -- matching rate -------------------------------------------------------


class TestMatchingRate:
    def r(self, order):
        order = np.asarray(order)
        return ranking_from_scores(-np.argsort(order).astype(np.float64))

    def test_identical_is_100(self):
        a = self.r([3, 1, 0, 2])
        assert matching_rate(a, a, 2) == MatchRateReport(K=2, rate=100.0)

    def test_disjoint_is_0(self):
        a = self.r([0, 1, 2, 3])
        b = self.r([2, 3, 0, 1])
        assert matching_rate(a, b, 2).rate == 0.0

    def test_half_overlap(self):
        a = self.r([0, 1, 2, 3])
        b = self.r([1, 2, 0, 3])
        assert matching_rate(a, b, 2).rate == 50.0

    def test_symmetric(self):
        rng = np.random.default_rng(5)
        for _ in range(10):
            a = ranking_from_scores(rng.normal(size=16))
            b = ranking_from_scores(rng.normal(size=16))
            assert matching_rate(a, b, 4).rate == matching_rate(b, a, 4).rate

    def test_k_zero_rejected(self):
        a = self.r([0, 1, 2, 3])
        with pytest.raises(UsageError):
            matching_rate(a, a, 0)

    def test_k_beyond_length_rejected(self):
        a = self.r([0, 1, 2, 3])
        with pytest.raises(UsageError):
            matching_rate(a, a, 5)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            matching_rate(self.r([0, 1, 2]), self.r([0, 1, 2, 3]), 2)

    def test_random_ranking_averages_k_over_n(self):
        # E[overlap] for a uniform ranking against a fixed one is K^2/N,
        # so the rate averages 100*K/N = 25 here.
        rng = np.random.default_rng(11)
        fixed = ranking_from_scores(rng.normal(size=64))
        rates = []
        for _ in range(1000):
            rnd = ranking_from_scores(rng.normal(size=64))
            rates.append(matching_rate(rnd, fixed, 16).rate)
        assert np.mean(rates) == pytest.approx(25.0, abs=3.0)


# -- training ------------------------------------------------------------


def _sub_split(split, n):
    return DatasetSplit(split.examples[:n], split.role, split.class_names)


class TestTraining:
    def test_loss_decreases(self, trained_predictor):
        losses = trained_predictor.epoch_losses
        assert losses[-1] < losses[0]

    def test_moving_average_monotone(self, trained_predictor):
        # Five-epoch moving average smooths minibatch wobble; it must never
        # move up once training is under way.
        losses = np.asarray(trained_predictor.epoch_losses)
        ma = np.convolve(losses, np.ones(5) / 5, mode="valid")
        assert np.all(np.diff(ma) <= 1e-9)

    def test_trained_beats_untrained_on_heldout(
        self, toy_weights, trained_predictor, heldout_golden, toy_data_config
    ):
        head, golden = heldout_golden
        untrained = init_predictor(
            PredictorArch(), 2, SeededRng(PIPELINE_SEED).child("init")
        )
        k = toy_data_config.grid_side**2 // 4
        rate_t = split_matching_rate(
            toy_weights, trained_predictor.predictor, head, golden, k,
            toy_data_config.patch_pixels,
        )
        rate_u = split_matching_rate(
            toy_weights, untrained, head, golden, k, toy_data_config.patch_pixels
        )
        assert rate_t > rate_u

    def test_zero_epochs_returns_fresh_init(
        self, toy_weights, toy_splits, predictor_cache
    ):
        rng = SeededRng(123)
        out = train_predictor(
            toy_weights,
            _sub_split(toy_splits["predictor_train"], 2),
            predictor_cache,
            PredictorArch(),
            2,
            PredictorTrainConfig(epochs=0),
            rng,
        )
        assert out.epoch_losses == []
        fresh = init_predictor(PredictorArch(), 2, SeededRng(123).child("init"))
        for name, p in out.predictor.params.items():
            np.testing.assert_array_equal(p.array, fresh[name].array)

    def test_attach_layer_validated(self, toy_weights, toy_splits, predictor_cache):
        for bad in (0, 7):
            with pytest.raises(ConfigError, match="attach_layer"):
                train_predictor(
                    toy_weights,
                    _sub_split(toy_splits["predictor_train"], 2),
                    predictor_cache,
                    PredictorArch(),
                    bad,
                    PredictorTrainConfig(epochs=1),
                    SeededRng(0),
                )

    def test_cache_miss_names_the_image(
        self, toy_weights, toy_splits, tmp_path
    ):
        from patchprune.golden import GoldenCache

        empty = GoldenCache(tmp_path, "toy", "preservation", 3, 2)
        with pytest.raises(MissingArtifactError, match="image 0"):
            train_predictor(
                toy_weights,
                _sub_split(toy_splits["predictor_train"], 2),
                empty,
                PredictorArch(),
                2,
                PredictorTrainConfig(epochs=1),
                SeededRng(0),
            )

    def test_nonfinite_target_aborts(self, toy_weights, toy_splits, tmp_path):
        from patchprune.golden import GoldenCache

        cache = GoldenCache(tmp_path, "toy", "preservation", 3, 2)
        n = 64
        bad = np.full(n, np.nan, dtype=np.float32)
        cache.store(
            0,
            GoldenScores(
                raw=np.zeros(n),
                coverage=np.ones(n, dtype=np.int64),
                mu_s=0.0,
                sigma_s=1.0,
                normalized=bad,
                kind="preservation",
                source_layer=2,
            ),
        )
        with pytest.raises(NumericError, match="diverged at epoch 1"):
            train_predictor(
                toy_weights,
                _sub_split(toy_splits["predictor_train"], 1),
                cache,
                PredictorArch(),
                2,
                PredictorTrainConfig(epochs=1),
                SeededRng(0),
            )

    def test_batch_size_validated(self, toy_weights, toy_splits, predictor_cache):
        with pytest.raises(ConfigError, match="batch_size"):
            train_predictor(
                toy_weights,
                _sub_split(toy_splits["predictor_train"], 2),
                predictor_cache,
                PredictorArch(),
                2,
                PredictorTrainConfig(epochs=1, batch_size=0),
                SeededRng(0),
            )


# -- persistence ---------------------------------------------------------


class TestPersistence:
    def test_roundtrip(self, trained_predictor, tmp_path):
        save_predictor(tmp_path / "ckpt", trained_predictor.predictor, "preservation", 8)
        loaded, meta = load_predictor(tmp_path / "ckpt")
        for name, p in trained_predictor.predictor.params.items():
            np.testing.assert_array_equal(loaded[name].array, p.array)
        assert meta["score_kind"] == "preservation"
        assert meta["grid_side"] == 8
        assert loaded.arch.kind == "mixmlp"
        assert loaded.attach_layer == trained_predictor.predictor.attach_layer

    def test_loaded_weights_are_frozen(self, trained_predictor, tmp_path):
        save_predictor(tmp_path / "ckpt", trained_predictor.predictor, "preservation", 8)
        loaded, _ = load_predictor(tmp_path / "ckpt")
        assert all(not p.requires_grad for p in loaded.params.values())

    def test_missing_meta_key_rejected(self, trained_predictor, tmp_path):
        save_predictor(tmp_path / "ckpt", trained_predictor.predictor, "preservation", 8)
        manifest = tmp_path / "ckpt" / "manifest.json"
        doc = json.loads(manifest.read_text())
        del doc["meta"]["attach_layer"]
        manifest.write_text(json.dumps(doc))
        with pytest.raises(ParseError, match="attach_layer"):
            load_predictor(tmp_path / "ckpt")

    def test_load_missing_dir(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            load_predictor(tmp_path / "nothing")
