import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from tkan.baselines import (
    LSTM_GATE_ORDER,
    LayerNorm,
    LstmHead,
    LstmLayer,
    MultiHeadAttention,
    TransformerHead,
    attention,
    lstm_head_forward,
    lstm_step,
    transformer_head_forward,
)
from tkan.errors import ContractError
from tkan.numerics import sigmoid


class TestLstm:
    def test_gate_layout_and_forget_bias(self, rng):
        layer = LstmLayer(5, 3, rng)
        assert LSTM_GATE_ORDER == ("i", "f", "c", "o")
        assert_array_equal(layer.b[3:6], np.ones(3))
        assert_array_equal(np.delete(layer.b, range(3, 6)), np.zeros(9))

    def test_step_against_formula(self, rng):
        layer = LstmLayer(4, 2, rng)
        x, h, c = rng.normal(size=4), rng.normal(size=2), rng.normal(size=2)
        a = layer.W @ x + layer.U @ h + layer.b
        i, f, g, o = sigmoid(a[0:2]), sigmoid(a[2:4]), np.tanh(a[4:6]), sigmoid(a[6:8])
        expected_c = f * c + i * g
        h_new, c_new = lstm_step(layer, x, h, c)
        assert_allclose(c_new[0], expected_c, atol=1e-12)
        assert_allclose(h_new[0], o * np.tanh(expected_c), atol=1e-12)

    def test_stacked_widths(self, rng):
        head = LstmHead(8, rng, widths=(6, 4))
        assert head.out_width == 4
        assert lstm_head_forward(head, rng.normal(size=(3, 5, 8))).shape == (3, 5, 4)
        assert lstm_head_forward(head, rng.normal(size=(5, 8))).shape == (5, 4)

    def test_saturated_gates_stay_bounded(self, rng):
        head = LstmHead(8, rng, widths=(6, 4))
        for layer in head.layers:
            layer.b[: 2 * layer.hidden] = 50.0
        X = np.repeat(rng.uniform(-3.0, 3.0, size=(2, 1, 8)), 50, axis=1)
        H = lstm_head_forward(head, X)
        assert H.shape == (2, 50, 4)
        assert np.all(np.isfinite(H))
        assert np.max(np.abs(H)) < 1.0


def _attention_oracle(Q, K, V):
    steps, width = Q.shape
    out = np.zeros_like(V)
    for t in range(steps):
        scores = [sum(Q[t, j] * K[s, j] for j in range(width)) / math.sqrt(width) for s in range(steps)]
        peak = max(scores)
        weights = [math.exp(score - peak) for score in scores]
        total = math.fsum(weights)
        for s in range(steps):
            out[t] += weights[s] / total * V[s]
    return out


class TestAttention:
    def test_matches_brute_force(self, rng):
        Q, K, V = (rng.normal(size=(4, 3)) for _ in range(3))
        out, weights = attention(Q, K, V)
        assert_allclose(out, _attention_oracle(Q, K, V), atol=1e-10)
        assert_allclose(weights.sum(axis=-1), 1.0)

    def test_multi_head_shapes(self, rng):
        mha = MultiHeadAttention(8, 2, rng)
        out, _ = mha.forward(rng.normal(size=(2, 5, 8)))
        assert out.shape == (2, 5, 8)
        with pytest.raises(ContractError):
            MultiHeadAttention(6, 4, rng)

    def test_layer_norm(self, rng):
        y, _ = LayerNorm(6).forward(rng.normal(3.0, 2.0, size=(4, 6)))
        assert_allclose(y.mean(axis=-1), 0.0, atol=1e-12)
        assert_allclose(y.var(axis=-1), 1.0, atol=1e-4)


class TestTransformerHead:
    def test_pre_norm_has_final_norm(self, rng):
        assert TransformerHead(8, rng, heads=2, ff_width=16).final_norm is not None
        assert TransformerHead(8, rng, heads=2, ff_width=16, norm_first=False).final_norm is None

    def test_shapes_and_positions(self, rng):
        head = TransformerHead(8, rng, heads=2, ff_width=16, max_length=6)
        assert head.positions.shape == (6, 8)
        assert transformer_head_forward(head, rng.normal(size=(2, 6, 8))).shape == (2, 6, 8)

    def test_sequence_longer_than_position_table(self, rng):
        head = TransformerHead(8, rng, heads=2, ff_width=16, max_length=4)
        with pytest.raises(ContractError):
            transformer_head_forward(head, np.zeros((1, 5, 8)))

    def test_positions_break_permutation_symmetry(self, rng):
        head = TransformerHead(8, rng, heads=2, ff_width=16, max_length=5)
        X = rng.normal(size=(1, 5, 8))
        out = transformer_head_forward(head, X)
        swapped = transformer_head_forward(head, X[:, ::-1])
        assert not np.allclose(out[:, ::-1], swapped)

    def test_frames_and_positions_permute_together(self, rng):
        head = TransformerHead(8, rng, heads=2, ff_width=16, max_length=5)
        X = rng.normal(size=(2, 5, 8))
        out = transformer_head_forward(head, X)
        order = np.array([3, 0, 4, 1, 2])
        head.positions[...] = head.positions[order]
        permuted = transformer_head_forward(head, X[:, order])
        assert_allclose(permuted, out[:, order], atol=1e-12)
        assert_allclose(permuted.mean(axis=1), out.mean(axis=1), atol=1e-12)

    def test_zero_sublayers_leave_the_residual_path(self, rng):
        head = TransformerHead(8, rng, heads=2, ff_width=16, max_length=5)
        for name, value, _ in head.named_parameters():
            if ".attn." in name or ".ff." in name:
                value[...] = 0.0
        X = rng.normal(size=(1, 5, 8))
        z = X + head.positions
        expected = (z - z.mean(axis=-1, keepdims=True)) / np.sqrt(z.var(axis=-1, keepdims=True) + 1e-5)
        assert_allclose(transformer_head_forward(head, X), expected, atol=1e-12)
