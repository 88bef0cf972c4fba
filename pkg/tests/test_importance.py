import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flexmod.data import MultimodalDataset
from flexmod.importance import (MAX_EXACT_MODALITIES, combination_importance, evaluate_subset_loss,
                                normalize_importance, shapley_from_values, shapley_values,
                                subset_values)
from flexmod.model import GlobalModel, evaluate
from flexmod.nn import Mlp, Tensor, init_mlp

from oracles import mlp_forward, permutation_shapley, softmax_xent


def _random_game(m, seed):
    rng = np.random.default_rng(seed)
    table = {}
    for mask in range(1 << m):
        table[frozenset(i for i in range(m) if mask >> i & 1)] = float(rng.normal())
    return table.__getitem__


def _model_and_data(m=2, seed=0, n=30):
    rng = np.random.default_rng(seed)
    dims = [3, 4, 2][:m]
    model = GlobalModel.create(dims, 5, 3, [[6]] * m, [8], rng)
    data = MultimodalDataset([rng.normal(size=(n, d)) for d in dims], rng.integers(0, 3, n), 3)
    return model, data


def _weights(mlp):
    return [w.data for w, _ in mlp.layers], [b.data for _, b in mlp.layers], mlp.activations


class TestSubsetLoss:
    def test_full_set_is_ordinary_loss(self):
        model, data = _model_and_data()
        assert evaluate_subset_loss(model, data, {0, 1}) == pytest.approx(evaluate(model, data)[1],
                                                                          abs=1e-12)

    def test_empty_set_zero_header_is_log_k(self):
        model, data = _model_and_data()
        for p in model.header.parameters():
            p.data[...] = 0.0
        assert evaluate_subset_loss(model, data, set()) == pytest.approx(math.log(3), abs=1e-12)

    @pytest.mark.parametrize("subset", [set(), {0}, {1}, {0, 1}])
    def test_matches_manual_masking(self, subset):
        model, data = _model_and_data(seed=1)
        feats = []
        for m, enc in enumerate(model.encoders):
            z = mlp_forward(*_weights(enc)[:2], enc.activations, data.features[m])
            feats.append(z if m in subset else np.zeros_like(z))
        ws, bs, acts = _weights(model.header)
        logits = mlp_forward(ws, bs, acts, np.hstack(feats))
        assert evaluate_subset_loss(model, data, subset) == pytest.approx(
            softmax_xent(logits, data.labels), abs=1e-12)


class TestShapley:
    @pytest.mark.parametrize("m", [1, 2, 3, 4])
    def test_matches_permutation_oracle(self, m):
        for seed in range(10):
            v = _random_game(m, seed)
            got = shapley_from_values(subset_values(v, m), m)
            np.testing.assert_allclose(got, permutation_shapley(v, m), rtol=0, atol=1e-9)

    @settings(max_examples=40)
    @given(st.integers(1, 5), st.integers(0, 2**31))
    def test_efficiency(self, m, seed):
        v = _random_game(m, seed)
        phi = shapley_from_values(subset_values(v, m), m)
        assert abs(phi.sum() - (v(frozenset(range(m))) - v(frozenset()))) < 1e-9

    def test_single_player(self):
        v = _random_game(1, 3)
        phi = shapley_from_values(subset_values(v, 1), 1)
        assert phi[0] == pytest.approx(v(frozenset({0})) - v(frozenset()), abs=1e-15)

    def test_dummy_player(self):
        base = _random_game(3, 4)

        def v(s):
            return base(s - {2})
        phi = shapley_from_values(subset_values(v, 3), 3)
        assert abs(phi[2]) < 1e-9

    def test_symmetric_players(self):
        base = _random_game(3, 5)

        def v(s):
            # players 0 and 1 interchangeable: value depends on how many of them are present
            k = len(s & {0, 1})
            return base(frozenset(range(k)) | (s & {2}))
        phi = shapley_from_values(subset_values(v, 3), 3)
        assert abs(phi[0] - phi[1]) < 1e-9

    def test_identical_modalities_get_equal_values(self):
        rng = np.random.default_rng(6)
        enc = init_mlp([3, 4, 5], "relu", rng)
        header = init_mlp([10, 6, 3], "relu", rng)
        # a header that treats both feature blocks identically
        w0 = header.layers[0][0].data
        w0[:, 5:] = w0[:, :5]
        model = GlobalModel(header, [enc, enc.copy()], 5)
        x = rng.normal(size=(25, 3))
        data = MultimodalDataset([x, x.copy()], rng.integers(0, 3, 25), 3)
        phi = shapley_values(model, data)
        assert abs(phi[0] - phi[1]) < 1e-9

    def test_model_efficiency_and_cache(self):
        model, data = _model_and_data(m=3, seed=7)
        phi, cache = shapley_values(model, data, return_cache=True)
        assert len(cache) == 8
        assert phi.sum() == pytest.approx(cache[frozenset({0, 1, 2})] - cache[frozenset()], abs=1e-9)

    def test_too_many_modalities(self):
        encs = [Mlp([(Tensor(np.ones((1, 1))), Tensor(np.zeros(1)))], ["identity"])
                for _ in range(MAX_EXACT_MODALITIES + 1)]
        header = Mlp([(Tensor(np.ones((2, MAX_EXACT_MODALITIES + 1))), Tensor(np.zeros(2)))],
                     ["identity"])
        model = GlobalModel(header, encs, 1)
        data = MultimodalDataset([np.ones((2, 1))] * (MAX_EXACT_MODALITIES + 1), [0, 1], 2)
        with pytest.raises(ValueError, match="reduce M"):
            shapley_values(model, data)


class TestNormalizeImportance:
    def test_negative_pair(self):
        np.testing.assert_allclose(normalize_importance([-3.0, -4.0]), [0.6, 0.8], atol=1e-15)

    def test_harmful_modality_clamped(self):
        np.testing.assert_array_equal(normalize_importance([-5.0, 1.0]), [1.0, 0.0])

    def test_all_harmful_rejected(self):
        with pytest.raises(ValueError, match="undefined"):
            normalize_importance([0.5, 0.0])

    @given(st.lists(st.floats(-10, -1e-3), min_size=1, max_size=5))
    def test_unit_norm(self, raw):
        assert abs(np.linalg.norm(normalize_importance(raw)) - 1) < 1e-9


class TestCombinationImportance:
    def test_singleton_full_and_additivity(self):
        g = np.array([0.6, 0.8])
        assert combination_importance(g, [1]) == 0.8
        assert combination_importance(g, [0, 1]) == pytest.approx(1.4, abs=1e-15)
        assert combination_importance(g, [0, 1]) == combination_importance(g, [0]) + \
            combination_importance(g, [1])
