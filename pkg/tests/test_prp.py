from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal
from PIL import Image

from oracles import alphabeta_loop, bilinear_loop, epsilon_loop, prp_loop, random_tiny_model, zb_loop
from protoprp.model import PrototypeModel, ReLU, build_model, forward
from protoprp.prp import (
    InputDomain,
    RelevanceMap,
    dtd_zB,
    lrp_alphabeta,
    lrp_epsilon,
    lrp_maxpool,
    protopnet_heatmap,
    prp_map,
    prp_maps,
    relevance_activation_to_conv,
    relevance_similarity_to_activation,
    render_png,
    spray_lrp_map,
    to_rgb,
)
from protoprp.tensor import ConvLayer, maxpool2d_forward

UNIT1 = InputDomain.unit(1)


def act_trace(a, d=None):
    a = np.asarray(a, np.float64)
    flat = a.reshape(len(a), -1)
    return SimpleNamespace(activations=a, similarities=flat.max(axis=1), argmax=flat.argmax(axis=1),
                           channel_distances=d)


def identity_model(prototypes, shape=(2, 4, 4), last=None):
    c = shape[0]
    prototypes = np.asarray(prototypes, np.float64)
    n = len(prototypes)
    return PrototypeModel(
        backbone=[ConvLayer(np.eye(c).reshape(c, c, 1, 1), np.zeros(c), 1, 0), ReLU()],
        prototypes=prototypes,
        prototype_class=np.zeros(n, np.int64),
        last_layer=np.ones((1, n)) if last is None else np.asarray(last, np.float64),
        last_bias=np.zeros(1),
        input_shape=shape,
    )


class TestWinnerTakeAll:
    def test_example(self):
        r = relevance_similarity_to_activation(act_trace([[[1, 3], [2, 0]]]), 0)
        assert_array_equal(r.values, [[0, 3], [0, 0]])
        assert r.stage == "activation"

    def test_constant_map_first_cell(self):
        r = relevance_similarity_to_activation(act_trace(np.full((1, 3, 3), 2.0)), 0)
        expected = np.zeros((3, 3))
        expected[0, 0] = 2.0
        assert_array_equal(r.values, expected)

    def test_conserves_on_random_traces(self, rng):
        for _ in range(50):
            tr = act_trace(rng.random((3, 4, 5)) * 9)
            m = int(rng.integers(3))
            assert relevance_similarity_to_activation(tr, m).values.sum() == tr.similarities[m]

    def test_missing_trace_rejected(self):
        with pytest.raises(ValueError):
            relevance_similarity_to_activation(None, 0)


class TestChannelSplit:
    def run(self, d, r=1.0, eps=1e-4):
        d = np.asarray(d, np.float64).reshape(1, -1, 1, 1)
        tr = act_trace(np.zeros((1, 1, 1)), d)
        rel = RelevanceMap(np.array([[r]]), "activation", 0)
        return relevance_activation_to_conv(tr, 0, rel, eps).values[:, 0, 0]

    def test_two_channel_example(self):
        out = self.run([1, 3])
        assert_allclose(out, [0.74998, 0.25001], atol=1e-4)
        g = np.array([1 / 1.0001, 1 / 3.0001])
        assert_allclose(out, g / (g.sum() + 1e-4), rtol=1e-12)

    def test_equidistant_channels(self):
        assert_allclose(self.run([0.5] * 4), 0.25, atol=1e-4)

    def test_eps_must_be_positive(self):
        with pytest.raises(ValueError):
            self.run([1, 2], eps=0)

    def test_wrong_stage_rejected(self):
        tr = act_trace(np.zeros((1, 1, 1)), np.ones((1, 2, 1, 1)))
        with pytest.raises(ValueError, match="activation"):
            relevance_activation_to_conv(tr, 0, RelevanceMap(np.ones((2, 1, 1)), "conv", 0))

    @given(st.integers(0, 2**32 - 1), st.integers(1, 128))
    def test_channel_sums_conserve(self, seed, depth):
        r = np.random.default_rng(seed)
        d = r.random((1, depth, 3, 3)) * 5
        rel = r.normal(size=(3, 3))
        tr = act_trace(np.zeros((1, 3, 3)), d)
        out = relevance_activation_to_conv(tr, 0, RelevanceMap(rel, "activation", 0)).values
        assert np.all(np.abs(out.sum(axis=0) - rel) <= np.abs(rel) * 1e-2 + 1e-12)
        g = (1 / (d[0] + 1e-4)).sum(axis=0)
        assert_allclose(out.sum(axis=0), rel * g / (g + 1e-4), rtol=1e-12, atol=1e-15)


class TestAlphaBeta:
    def test_negative_contribution_dropped(self):
        assert_allclose(lrp_alphabeta(np.array([1.0, 1.0]), np.array([[2.0, -1.0]]), np.array([1.0])), [1, 0])

    def test_proportional_split(self):
        assert_allclose(lrp_alphabeta(np.array([1.0, 1.0]), np.array([[3.0, 1.0]]), np.array([1.0])), [0.75, 0.25])

    @pytest.mark.parametrize("alpha,beta", [(1, 0), (2, -1)])
    def test_conv_matches_loop(self, rng, alpha, beta):
        x = rng.normal(size=(3, 5, 5))
        lay = ConvLayer(rng.normal(size=(2, 3, 1, 1)), np.zeros(2))
        rel = rng.random((2, 5, 5))
        assert_allclose(lrp_alphabeta(x, lay, rel, alpha, beta), alphabeta_loop(x, lay, rel, alpha, beta), atol=1e-6)

    def test_padded_strided_conv_matches_loop(self, rng):
        x = rng.normal(size=(2, 6, 6))
        lay = ConvLayer(rng.normal(size=(3, 2, 3, 3)), np.zeros(3), 2, 1)
        rel = rng.random((3, 3, 3))
        assert_allclose(lrp_alphabeta(x, lay, rel), alphabeta_loop(x, lay, rel), atol=1e-6)

    def test_leading_axes(self, rng):
        x = rng.random((2, 4, 4))
        lay = ConvLayer(rng.normal(size=(3, 2, 3, 3)), np.zeros(3), 1, 1)
        rel = rng.random((5, 3, 4, 4))
        batched = lrp_alphabeta(x, lay, rel)
        for k in range(5):
            assert_allclose(batched[k], lrp_alphabeta(x, lay, rel[k]), atol=1e-12)

    @pytest.mark.parametrize("alpha,beta", [(0.5, 0.5), (1, 1)])
    def test_invalid_parameters_rejected(self, alpha, beta):
        with pytest.raises(ValueError):
            lrp_alphabeta(np.ones(2), np.ones((1, 2)), np.ones(1), alpha, beta)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            lrp_alphabeta(np.ones((1, 4, 4)), ConvLayer(np.ones((1, 1, 1, 1)), np.zeros(1)), np.ones((1, 3, 3)))

    @given(st.integers(0, 2**32 - 1))
    def test_conservative_on_nonnegative_layers(self, seed):
        r = np.random.default_rng(seed)
        x = r.random((2, 5, 5)) + 0.01
        lay = ConvLayer(r.random((3, 2, 3, 3)) + 0.01, np.zeros(3), 1, 0)
        rel = r.random((3, 3, 3))
        out = lrp_alphabeta(x, lay, rel)
        assert abs(out.sum() - rel.sum()) <= 1e-4 * rel.sum()


class TestMaxPoolRule:
    def test_single_window(self):
        _, arg = maxpool2d_forward(np.array([[[1.0, 5.0], [2.0, 0.0]]]), 2, 2)
        assert_array_equal(lrp_maxpool(arg, np.array([[[2.0]]])), [[[0, 2], [0, 0]]])

    @given(st.integers(0, 2**32 - 1), st.sampled_from([(2, 2), (3, 1), (2, 1)]))
    def test_sum_preserved(self, seed, ws):
        r = np.random.default_rng(seed)
        _, arg = maxpool2d_forward(r.normal(size=(3, 8, 8)), *ws)
        rel = r.normal(size=arg.indices.shape)
        assert lrp_maxpool(arg, rel).sum() == pytest.approx(rel.sum(), abs=1e-12)

    def test_disjoint_windows_hand_oracle(self, rng):
        x = rng.normal(size=(1, 4, 4))
        _, arg = maxpool2d_forward(x, 2, 2)
        rel = rng.random((1, 2, 2))
        expected = np.zeros((1, 4, 4))
        for i in range(2):
            for j in range(2):
                win = x[0, 2 * i : 2 * i + 2, 2 * j : 2 * j + 2]
                u, v = np.unravel_index(win.argmax(), (2, 2))
                expected[0, 2 * i + u, 2 * j + v] = rel[0, i, j]
        assert_array_equal(lrp_maxpool(arg, rel), expected)


class TestEpsilon:
    def test_symmetric(self):
        assert_allclose(lrp_epsilon(np.ones(2), np.array([[2.0, 2.0]]), np.array([1.0])), [0.5, 0.5], atol=1e-4)

    def test_zero_output_stays_finite(self):
        out = lrp_epsilon(np.ones(2), np.array([[1.0, -1.0]]), np.array([1.0]))
        assert np.all(np.isfinite(out))
        assert out.sum() == pytest.approx(0.0)

    def test_matches_loop(self, rng):
        x, w, rel = rng.normal(size=6), rng.normal(size=(4, 6)), rng.normal(size=4)
        assert_allclose(lrp_epsilon(x, w, rel), epsilon_loop(x, w, rel), atol=1e-6)


class TestZB:
    def test_single_weight(self):
        r = dtd_zB(np.full((1, 1, 1), 0.5), ConvLayer(np.ones((1, 1, 1, 1)), np.zeros(1)), np.ones((1, 1, 1)), UNIT1)
        assert r.values.item() == pytest.approx(1.0)

    def test_two_inputs(self):
        r = dtd_zB(np.full((1, 1, 2), 0.5), ConvLayer(np.ones((1, 1, 1, 2)), np.zeros(1)), np.ones((1, 1, 1)), UNIT1)
        assert_allclose(r.values, [[[0.5, 0.5]]])

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
    def test_random_first_layer_matches_loop(self, rng, stride, padding):
        x = rng.random((3, 6, 6))
        lay = ConvLayer(rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4), stride, padding)
        out_hw = lay.output_hw(6, 6)
        rel = rng.random((4,) + out_hw)
        dom = InputDomain(np.zeros(3), np.ones(3))
        assert_allclose(dtd_zB(x, lay, rel, dom).values, zb_loop(x, lay, rel, np.zeros(3), np.ones(3)), atol=1e-6)

    def test_zero_denominators_are_counted(self):
        lay = ConvLayer(np.zeros((1, 1, 1, 1)), np.zeros(1))
        r = dtd_zB(np.full((1, 2, 2), 0.5), lay, np.ones((1, 2, 2)), UNIT1)
        assert r.dropped == 4
        assert_array_equal(r.values, 0)

    def test_out_of_domain_rejected(self):
        with pytest.raises(ValueError, match="domain"):
            dtd_zB(np.full((1, 1, 1), 2.0), ConvLayer(np.ones((1, 1, 1, 1)), np.zeros(1)), np.ones((1, 1, 1)), UNIT1)

    def test_domain_requires_ordered_bounds(self):
        with pytest.raises(ValueError):
            InputDomain([1.0], [0.0])


class TestPRPMap:
    def test_mass_at_matching_patch(self):
        img = np.full((2, 4, 4), 0.9)
        img[:, 2, 1] = [0.2, 0.4]
        m = identity_model([[0.2, 0.4]])
        r = prp_map(m, img, 0)
        total = r.values.sum(axis=0)
        assert np.unravel_index(np.abs(total).argmax(), total.shape) == (2, 1)
        assert total[2, 1] == pytest.approx(forward(m, img)[1][0], rel=1e-3)
        assert_allclose(np.delete(total.ravel(), 2 * 4 + 1), 0)
        assert_allclose(r.values, prp_loop(m, img, 0), atol=1e-9)

    def test_zero_image_zero_bias(self):
        model = build_model(num_classes=2, prototypes_per_class=2, input_shape=(3, 8, 8), widths=(4, 4), seed=1)
        assert_array_equal(prp_map(model, np.zeros((3, 8, 8), np.float32), 0).values, 0)

    def test_identical_prototypes_identical_maps(self, rng):
        model = build_model(num_classes=2, prototypes_per_class=2, input_shape=(3, 8, 8), widths=(4, 4), seed=1)
        model.prototypes[1] = model.prototypes[0]
        img = rng.random((3, 8, 8)).astype(np.float32)
        assert_array_equal(prp_map(model, img, 0).values, prp_map(model, img, 1).values)

    def test_batched_equals_single(self, rng):
        model, img = random_tiny_model(11)
        maps = prp_maps(model, img)
        for m, r in enumerate(maps):
            assert_allclose(r.values, prp_map(model, img, m).values, atol=1e-12)
            assert r.prototype_index == m

    def test_index_out_of_range(self):
        model, img = random_tiny_model(0)
        with pytest.raises(IndexError):
            prp_map(model, img, model.num_prototypes)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_loop_oracle(self, seed):
        model, img = random_tiny_model(100 + seed)
        for m in range(model.num_prototypes):
            assert_allclose(prp_map(model, img, m).values, prp_loop(model, img, m), atol=1e-5)

    @given(st.integers(0, 2**31 - 1))
    def test_total_bounded_by_score(self, seed):
        model, img = random_tiny_model(seed)
        sims = forward(model, img)[1]
        for r, s in zip(prp_maps(model, img), sims):
            assert -1e-9 <= r.total <= s + 1e-3


class TestHeatmap:
    def test_constant_map(self):
        m = identity_model([[5.0, 5.0]])
        h = protopnet_heatmap(m, np.full((2, 4, 4), 0.3), 0)
        assert_allclose(h.values, h.values[0, 0])

    def test_matches_bilinear_oracle_and_max(self, rng):
        model = build_model(num_classes=2, prototypes_per_class=1, input_shape=(3, 28, 28), widths=(4, 4, 4), seed=0)
        img = rng.random((3, 28, 28)).astype(np.float32)
        trace = forward(model, img)[3]
        assert trace.activations.shape[1:] == (7, 7)
        h = protopnet_heatmap(model, img, 1)
        assert_allclose(h.values, bilinear_loop(trace.activations[1].astype(np.float64), (28, 28)), atol=1e-5)
        assert h.values.max() <= trace.activations[1].max()

    def test_max_preserved_when_grids_align(self, rng):
        # 3x3 latent grid onto 7x7 pixels: every source node lands on a pixel
        model = build_model(num_classes=2, prototypes_per_class=1, input_shape=(3, 7, 7), widths=(4, 4), seed=0)
        img = rng.random((3, 7, 7)).astype(np.float32)
        trace = forward(model, img)[3]
        assert trace.activations.shape[1:] == (3, 3)
        for m in range(2):
            assert protopnet_heatmap(model, img, m).values.max() == trace.activations[m].max()


class TestSpray:
    def test_single_path(self, rng):
        model, img = random_tiny_model(21)
        model.last_layer[:] = 0
        model.last_layer[0, 1] = 2.0
        s = forward(model, img)[1][1]
        z = 2.0 * s
        factor = z * z / (z + 1e-4) / s
        assert_allclose(spray_lrp_map(model, img, 0).values, factor * prp_map(model, img, 1).values, rtol=1e-9, atol=1e-12)

    def test_two_equal_paths(self, rng):
        model, img = random_tiny_model(22)
        model.last_layer[:] = 0
        model.prototypes[1] = model.prototypes[0]
        model.last_layer[0, :2] = 1.5
        s = forward(model, img)[1][0]
        logit = 3.0 * s
        half = 1.5 * s / (logit + 1e-4) * logit
        expected = 2 * prp_map(model, img, 0).values * (half / s)
        assert_allclose(spray_lrp_map(model, img, 0).values, expected, rtol=1e-9, atol=1e-12)

    def test_class_out_of_range(self):
        model, img = random_tiny_model(0)
        with pytest.raises(IndexError):
            spray_lrp_map(model, img, model.num_classes)


class TestRendering:
    def test_quantization(self):
        rgb = to_rgb(np.array([[1.0, -0.5], [0.0, 0.25]]))
        assert rgb.dtype == np.uint8
        assert rgb[0, 0].tolist() == [255, 0, 0]
        assert rgb[0, 1].tolist() == [128, 128, 255]
        assert rgb[1, 0].tolist() == [255, 255, 255]
        assert rgb[1, 1].tolist() == [255, 191, 191]

    def test_channels_summed_and_zero_map_white(self):
        assert_array_equal(to_rgb(np.zeros((3, 2, 2))), 255)
        assert_array_equal(to_rgb(np.ones((3, 2, 2)))[..., 0], 255)

    def test_png_round_trip(self, tmp_path, rng):
        v = rng.normal(size=(3, 5, 6))
        render_png(v, tmp_path / "m.png")
        assert_array_equal(np.asarray(Image.open(tmp_path / "m.png").convert("RGB")), to_rgb(v))

    def test_non_finite_map_rejected(self):
        with pytest.raises(FloatingPointError):
            RelevanceMap(np.array([np.nan]), "input")
