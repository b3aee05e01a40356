import math

import numpy as np
import pytest

from conftest import M, finite_difference, gia_params, rel_err
from oracles import cca_oracle, tca_oracle
from gia.attention import (GiaParams, conventional_cross_attention, feature_scores, gia_forward,
                           rank_of_scores, sinusoidal_encode, transpose_cross_attention)
from gia.core import AllocationTracker, Matrix, Tape, backward, mul, sum_all
from gia.errors import ConfigError, ShapeError


def identity_params(d, **modes):
    eye, zrow = np.eye(d), np.zeros((1, d))
    arrays = {"gia.w_embed": eye, "gia.b_embed": zrow, "gia.w_pos": np.zeros((2, d)), "gia.b_pos": zrow,
              "gia.w_q": eye, "gia.w_k": eye, "gia.w_v": eye, "gia.w_res": eye, "gia.b_res": zrow}
    return GiaParams.from_arrays(arrays, **modes)


class TestConventional:
    def test_single_node_returns_value_row(self, rng):
        params, arrays = gia_params(rng, 3, 3)
        x, p = rng.standard_normal((1, 3)), rng.standard_normal((1, 3))
        out = conventional_cross_attention(M(x), M(p), params)
        np.testing.assert_allclose(out.data, p @ arrays["gia.w_v"], rtol=0, atol=1e-15)

    def test_zero_qk_gives_column_mean(self, rng):
        d = 3
        params = identity_params(d)
        params.w_q = Matrix.zeros(d, d)
        params.w_k = Matrix.zeros(d, d)
        p = rng.standard_normal((6, d))
        out = conventional_cross_attention(M(rng.standard_normal((6, d))), M(p), params)
        np.testing.assert_allclose(out.data, np.tile(p.mean(axis=0), (6, 1)), rtol=0, atol=1e-15)

    def test_per_node_oracle(self, rng):
        params, a = gia_params(rng, 3, 3)
        x, p = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        want = cca_oracle(x, p, a["gia.w_q"], a["gia.w_k"], a["gia.w_v"])
        assert rel_err(conventional_cross_attention(M(x), M(p), params).data, want) < 1e-12


class TestTranspose:
    def test_zero_value_path(self, rng):
        params, _ = gia_params(rng, 3, 3)
        out = transpose_cross_attention(M(rng.standard_normal((5, 3))), M(np.zeros((5, 3))), params)
        assert np.all(out.data == 0.0)

    def test_single_feature_returns_value(self, rng):
        params, a = gia_params(rng, 1, 1)
        x, p = rng.standard_normal((7, 1)), rng.standard_normal((7, 1))
        np.testing.assert_allclose(feature_scores(M(x), M(p), params).data, [[1.0]])
        out = transpose_cross_attention(M(x), M(p), params)
        np.testing.assert_allclose(out.data, p @ a["gia.w_v"], rtol=0, atol=1e-15)

    def test_explicit_loop_oracle_identity_projections(self, rng):
        x, p = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))
        out = transpose_cross_attention(M(x), M(p), identity_params(3))
        assert rel_err(out.data, tca_oracle(x, p)) < 1e-12

    def test_explicit_loop_oracle_projections(self, rng):
        params, a = gia_params(rng, 4, 4)
        x, p = rng.standard_normal((9, 4)), rng.standard_normal((9, 4))
        want = tca_oracle(x, p, a["gia.w_q"], a["gia.w_k"], a["gia.w_v"])
        assert rel_err(transpose_cross_attention(M(x), M(p), params).data, want) < 1e-12

    def test_without_qkv(self, rng):
        params, _ = gia_params(rng, 3, 3, use_qkv=False)
        x, p = rng.standard_normal((6, 3)), rng.standard_normal((6, 3))
        assert rel_err(transpose_cross_attention(M(x), M(p), params).data, tca_oracle(x, p)) < 1e-12

    def test_score_rows_sum_to_one(self, rng):
        params, _ = gia_params(rng, 8, 8)
        s = feature_scores(M(rng.standard_normal((30, 8))), M(rng.standard_normal((30, 8))), params)
        assert np.max(np.abs(s.data.sum(axis=1) - 1)) < 1e-12

    def test_single_node_single_feature_agrees_with_conventional(self, rng):
        params = identity_params(1)
        x, p = M(rng.standard_normal((1, 1))), M(rng.standard_normal((1, 1)))
        np.testing.assert_array_equal(conventional_cross_attention(x, p, params).data, p.data)
        np.testing.assert_array_equal(transpose_cross_attention(x, p, params).data, p.data)

    def test_single_node_mixes_value_features(self, rng):
        # one node still leaves a d x d softmax, so the output is a convex mix of V's entries
        params = identity_params(4)
        x, p = rng.standard_normal((1, 4)), rng.standard_normal((1, 4))
        out = transpose_cross_attention(M(x), M(p), params).data
        assert rel_err(out, tca_oracle(x, p)) < 1e-12
        assert np.all(out >= p.min() - 1e-15) and np.all(out <= p.max() + 1e-15)

    def test_shape_mismatch(self, rng):
        params, _ = gia_params(rng, 3, 3)
        with pytest.raises(ShapeError):
            transpose_cross_attention(M(np.ones((4, 3))), M(np.ones((5, 3))), params)

    def test_memory_is_linear_in_nodes(self, rng):
        d = 16
        params, _ = gia_params(rng, d, d)
        peaks = {}
        for n in (1024, 2048):
            x, p = M(rng.standard_normal((n, d))), M(rng.standard_normal((n, d)))
            with AllocationTracker() as t:
                out = transpose_cross_attention(x, p, params)
                del out
            peaks[n] = t.peak
            assert n * d <= t.peak <= 5 * (n * d + d * d)
        assert peaks[2048] < 2.1 * peaks[1024]


class TestGiaForward:
    def test_none_is_embedding(self, rng):
        params, a = gia_params(rng, 5, 4, pe_mode="none")
        x, p = rng.standard_normal((6, 5)), rng.standard_normal((6, 2))
        out = gia_forward(M(x), M(p), params)
        np.testing.assert_array_equal(out.data, x @ a["gia.w_embed"] + a["gia.b_embed"])

    def test_zero_position_weights_leave_residual(self, rng):
        params, a = gia_params(rng, 5, 4)
        params.w_pos = Matrix.zeros(2, 4)
        params.b_pos = Matrix.zeros(1, 4)
        x, p = rng.standard_normal((6, 5)), rng.standard_normal((6, 2))
        x_hat = x @ a["gia.w_embed"] + a["gia.b_embed"]
        want = x_hat @ a["gia.w_res"] + a["gia.b_res"]
        np.testing.assert_allclose(gia_forward(M(x), M(p), params).data, want, rtol=0, atol=1e-15)

    def test_linear_by_hand(self):
        arrays = {
            "gia.w_embed": np.array([[1.0, 0.0], [0.0, 2.0]]), "gia.b_embed": np.array([[0.5, 0.0]]),
            "gia.w_pos": np.array([[1.0, 1.0], [0.0, -1.0]]), "gia.b_pos": np.array([[0.0, 1.0]]),
        }
        for k in ("w_q", "w_k", "w_v", "w_res"):
            arrays["gia." + k] = np.eye(2)
        arrays["gia.b_res"] = np.zeros((1, 2))
        params = GiaParams.from_arrays(arrays, pe_mode="linear")
        x = [[1, 1], [2, 0], [0, 3]]
        p = [[0, 0], [1, 2], [3, 1]]
        # x_hat rows: [1.5, 2], [2.5, 0], [0.5, 6]; p_hat rows: [0, 1], [1, 0], [3, 3]
        want = [[1.5, 3.0], [3.5, 0.0], [3.5, 9.0]]
        np.testing.assert_allclose(gia_forward(M(x), M(p), params).data, want, rtol=0, atol=1e-15)

    def test_sinusoidal_adds_encoding(self, rng):
        params, a = gia_params(rng, 3, 8, pe_mode="sinusoidal")
        x, p = rng.standard_normal((5, 3)), rng.standard_normal((5, 2))
        want = x @ a["gia.w_embed"] + a["gia.b_embed"] + sinusoidal_encode(M(p), 8).data
        np.testing.assert_allclose(gia_forward(M(x), M(p), params).data, want, rtol=0, atol=1e-14)

    def test_residual_from_features_and_positions(self, rng):
        params, a = gia_params(rng, 3, 4, residual_source="features_plus_positions")
        x, p = rng.standard_normal((5, 3)), rng.standard_normal((5, 2))
        x_hat = x @ a["gia.w_embed"] + a["gia.b_embed"]
        p_hat = p @ a["gia.w_pos"] + a["gia.b_pos"]
        want = (x_hat + p_hat) @ a["gia.w_res"] + a["gia.b_res"] + tca_oracle(
            x_hat, p_hat, a["gia.w_q"], a["gia.w_k"], a["gia.w_v"])
        assert rel_err(gia_forward(M(x), M(p), params).data, want) < 1e-12

    def test_unknown_mode(self, rng):
        with pytest.raises(ConfigError):
            gia_params(rng, 3, 4, pe_mode="rotary")

    def test_positions_need_two_columns(self, rng):
        params, _ = gia_params(rng, 3, 4)
        with pytest.raises(ShapeError):
            gia_forward(M(np.ones((4, 3))), M(np.ones((4, 3))), params)

    @pytest.mark.parametrize("mode", ["gia", "linear", "sinusoidal", "none"])
    def test_permutation_equivariance(self, rng, mode):
        params, _ = gia_params(rng, 5, 8, pe_mode=mode)
        x, p = rng.standard_normal((40, 5)), rng.uniform(size=(40, 2))
        base = gia_forward(M(x), M(p), params).data
        for _ in range(5):
            perm = rng.permutation(40)
            out = gia_forward(M(x[perm]), M(p[perm]), params).data
            assert np.max(np.abs(out - base[perm])) < 1e-12

    def test_zero_positions_are_finite(self, rng):
        params, _ = gia_params(rng, 3, 4)
        out = gia_forward(M(rng.standard_normal((10, 3))), M(np.zeros((10, 2))), params)
        assert np.all(np.isfinite(out.data))

    def test_gradients_of_every_member(self, rng):
        n, d_in, d = 32, 3, 4
        _, arrays = gia_params(rng, d_in, d)
        x, p = rng.standard_normal((n, d_in)), rng.standard_normal((n, 2))
        weights = M(rng.standard_normal((n, d)))

        def value():
            out = gia_forward(M(x), M(p), GiaParams.from_arrays(arrays))
            return float(sum_all(mul(out, weights)).data[0, 0])

        tape = Tape()
        out = gia_forward(M(x), M(p), GiaParams.from_arrays(arrays, tape=tape))
        grads = backward(tape, sum_all(mul(out, weights)))
        assert set(grads) == set(arrays)
        for name, arr in arrays.items():
            assert rel_err(grads[name], finite_difference(value, arr)) < 1e-4, name


class TestSinusoidal:
    def test_zero_phase(self):
        enc = sinusoidal_encode(M([[0.0, 0.0], [1.0, 1.0]]), 8).data
        # per coordinate: 2 sin bands then 2 cos bands
        np.testing.assert_array_equal(enc[0], [0, 0, 1, 1, 0, 0, 1, 1])

    def test_range_and_identical_positions(self, rng):
        p = rng.standard_normal((20, 2)) * 100
        p[7] = p[3]
        enc = sinusoidal_encode(M(p), 16).data
        assert enc.shape == (20, 16)
        assert np.all(np.abs(enc) <= 1.0)
        np.testing.assert_array_equal(enc[7], enc[3])

    def test_first_band_spans_full_turn(self):
        enc = sinusoidal_encode(M([[0.0, 0.0], [0.25, 0.5], [1.0, 1.0]]), 4).data
        assert enc[1, 0] == pytest.approx(math.sin(math.pi / 2))
        assert enc[1, 2] == pytest.approx(math.sin(math.pi), abs=1e-15)

    def test_needs_multiple_of_four(self):
        with pytest.raises(ConfigError):
            sinusoidal_encode(M(np.zeros((3, 2))), 6)


class TestRank:
    def test_generic_is_full(self, rng):
        for _ in range(5):
            assert rank_of_scores(rng.standard_normal((50, 16)), rng.standard_normal((50, 16))) == 16

    def test_duplicate_columns(self, rng):
        p = rng.standard_normal((50, 16))
        p[:, 5] = p[:, 2]
        assert rank_of_scores(rng.standard_normal((50, 16)), p) <= 15

    def test_zero(self, rng):
        assert rank_of_scores(np.zeros((50, 16)), rng.standard_normal((50, 16))) == 0
