import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from capcond import layers as L
from capcond import tensor as T
from capcond.tensor import DimensionError, NumericError, Tensor

from helpers import rel_err


def make_cell(n_in, h, rng=None, scale=1.0, zero=False, dtype=np.float64):
    def w(*shape):
        if zero:
            return Tensor(np.zeros(shape), requires_grad=True, dtype=dtype)
        return Tensor(scale * rng.normal(size=shape), requires_grad=True, dtype=dtype)
    return L.GruCell(w(n_in, h), w(n_in, h), w(n_in, h), w(h, h), w(h, h), w(h, h),
                     w(h), w(h), w(h))


def scalar_gru(cell, x, s):
    """Loop-by-loop reference with plain Python floats."""
    W = {k: v.data for k, v in cell.parameters().items()}
    n_in, h = W["W_xr"].shape
    sig = lambda z: 1.0 / (1.0 + np.exp(-z))  # noqa: E731

    def lin(wx, ws, b, svec, j):
        return (sum(x[i] * wx[i, j] for i in range(n_in))
                + sum(svec[k] * ws[k, j] for k in range(h)) + b[j])
    r = [sig(lin(W["W_xr"], W["W_sr"], W["b_r"], s, j)) for j in range(h)]
    u = [sig(lin(W["W_xu"], W["W_su"], W["b_u"], s, j)) for j in range(h)]
    rs = [r[k] * s[k] for k in range(h)]
    c = [np.tanh(lin(W["W_xc"], W["W_sc"], W["b_c"], rs, j)) for j in range(h)]
    return np.array([u[j] * s[j] + (1 - u[j]) * c[j] for j in range(h)])


class TestEmbedding:
    def setup_method(self):
        self.table = L.EmbeddingTable(Tensor(np.arange(15.0).reshape(5, 3), requires_grad=True))

    def test_lookup(self):
        np.testing.assert_array_equal(L.embed(self.table, [0]).data, [[0, 1, 2]])

    def test_repetition(self):
        out = L.embed(self.table, [2, 2]).data
        np.testing.assert_array_equal(out[0], out[1])

    def test_out_of_range_names_id(self):
        with pytest.raises(IndexError, match="5"):
            L.embed(self.table, [1, 5])

    def test_gradient_only_on_selected_rows(self):
        self.table.table.zero_grad()
        with T.Tape() as tape:
            loss = T.sum_all(L.embed(self.table, [1, 3, 1]))
        tape.backward(loss)
        g = self.table.table.grad
        np.testing.assert_array_equal(g[[0, 2, 4]], 0)
        np.testing.assert_array_equal(g[1], [2, 2, 2])
        np.testing.assert_array_equal(g[3], [1, 1, 1])

    def test_minimum_size(self):
        with pytest.raises(ValueError):
            L.EmbeddingTable(Tensor(np.zeros((3, 2))))


class TestGruStep:
    def test_zero_cell_zero_state(self):
        cell = make_cell(3, 4, zero=True)
        s = L.gru_step(cell, Tensor(np.ones(3)), Tensor(np.zeros(4)))
        np.testing.assert_array_equal(s.data, 0)

    def test_zero_cell_halves_state(self):
        cell = make_cell(3, 4, zero=True)
        v = np.array([1.0, -2.0, 0.5, 4.0])
        s = L.gru_step(cell, Tensor(np.ones(3)), Tensor(v))
        np.testing.assert_allclose(s.data, 0.5 * v)

    def test_matches_scalar_reference(self):
        with T.precision(64):
            for seed in range(20):
                rng = np.random.default_rng(seed)
                cell = make_cell(3, 3, rng)
                x, s = rng.normal(size=3), rng.normal(size=3)
                got = L.gru_step(cell, Tensor(x), Tensor(s)).data
                np.testing.assert_allclose(got, scalar_gru(cell, x, s), atol=1e-6)

    def test_batch_rows_equal_single_rows(self):
        with T.precision(64):
            rng = np.random.default_rng(0)
            cell = make_cell(3, 4, rng)
            X, S = rng.normal(size=(5, 3)), rng.normal(size=(5, 4))
            batch = L.gru_step(cell, Tensor(X), Tensor(S)).data
            for i in range(5):
                one = L.gru_step(cell, Tensor(X[i]), Tensor(S[i])).data
                np.testing.assert_allclose(batch[i], one, atol=1e-12)

    def test_dimension_mismatch(self):
        cell = make_cell(3, 4, zero=True)
        with pytest.raises(DimensionError):
            L.gru_step(cell, Tensor(np.ones(2)), Tensor(np.zeros(4)))
        with pytest.raises(DimensionError):
            L.gru_step(cell, Tensor(np.ones(3)), Tensor(np.zeros(5)))

    def test_bound_over_1000_random_steps(self):
        rng = np.random.default_rng(7)
        with T.precision(64):
            for _ in range(1000):
                cell = make_cell(3, 4, rng, scale=3.0)
                s = rng.normal(scale=3.0, size=4)
                out = L.gru_step(cell, Tensor(rng.normal(scale=3.0, size=3)), Tensor(s)).data
                assert np.all(np.abs(out) <= np.maximum(np.abs(s), 1.0) + 1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_gradients_match_finite_differences(self, seed):
        with T.precision(64):
            rng = np.random.default_rng(seed)
            cell = make_cell(3, 4, rng)
            x = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
            s = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
            w = Tensor(rng.normal(size=(2, 4)))

            def f():
                return T.sum_all(T.multiply(L.gru_step(cell, x, s), w))

            tensors = [x, s, *cell.parameters().values()]
            for t in tensors:
                t.zero_grad()
            with T.Tape() as tape:
                out = f()
            tape.backward(out)
            for t in tensors:
                num = T.finite_difference_grad(lambda: f().item(), t)
                assert rel_err(t.grad, num) < 1e-4

    def test_cell_shape_invariants(self):
        rng = np.random.default_rng(0)
        good = make_cell(3, 4, rng)
        with pytest.raises(DimensionError):
            L.GruCell(good.W_xr, good.W_xu, good.W_xc, good.W_sr, good.W_su,
                      Tensor(np.zeros((4, 5))), good.b_r, good.b_u, good.b_c)
        with pytest.raises(DimensionError):
            L.GruCell(good.W_xr, good.W_xu, good.W_xc, good.W_sr, good.W_su, good.W_sc,
                      good.b_r, Tensor(np.zeros(3)), good.b_c)


class TestGruUnroll:
    def test_single_step(self):
        rng = np.random.default_rng(1)
        cell = make_cell(2, 3, rng)
        x, s0 = Tensor(rng.normal(size=2)), Tensor(rng.normal(size=3))
        (only,) = L.gru_unroll(cell, [x], s0)
        np.testing.assert_array_equal(only.data, L.gru_step(cell, x, s0).data)

    def test_zero_cell_geometric_decay(self):
        cell = make_cell(2, 3, zero=True)
        v = np.array([8.0, -4.0, 1.0])
        states = L.gru_unroll(cell, [Tensor(np.ones(2))] * 3, Tensor(v))
        for k, s in enumerate(states, start=1):
            np.testing.assert_allclose(s.data, v / 2 ** k)

    def test_causal_prefix(self):
        rng = np.random.default_rng(2)
        cell = make_cell(2, 3, rng)
        xs = [Tensor(rng.normal(size=2)) for _ in range(4)]
        s0 = Tensor(np.zeros(3))
        short = L.gru_unroll(cell, xs[:3], s0)
        long = L.gru_unroll(cell, xs, s0)
        for a, b in zip(short, long):
            np.testing.assert_array_equal(a.data, b.data)

    def test_empty(self):
        assert L.gru_unroll(make_cell(2, 3, zero=True), [], Tensor(np.zeros(3))) == []


class TestDense:
    def test_identity(self):
        layer = L.DenseLayer(Tensor(np.eye(3)), Tensor(np.zeros(3)))
        x = Tensor([1.0, -2.0, 3.0])
        np.testing.assert_array_equal(L.dense(layer, x).data, x.data)

    def test_hand_value(self):
        layer = L.DenseLayer(Tensor([[1.0, 0.0], [0.0, 1.0]]), Tensor([3.0, 4.0]))
        np.testing.assert_array_equal(L.dense(layer, Tensor([1.0, 2.0])).data, [4, 6])

    def test_softmax_sums_to_one(self):
        rng = np.random.default_rng(0)
        layer = L.DenseLayer(Tensor(rng.normal(size=(3, 5))), Tensor(rng.normal(size=5)),
                             "softmax")
        assert L.dense(layer, Tensor(rng.normal(size=3))).data.sum() == pytest.approx(1, abs=1e-6)

    def test_relu_clamps(self):
        layer = L.DenseLayer(Tensor(np.eye(2)), Tensor(np.zeros(2)), "relu")
        np.testing.assert_array_equal(L.dense(layer, Tensor([-1.0, 2.0])).data, [0, 2])

    def test_dimension_mismatch(self):
        layer = L.DenseLayer(Tensor(np.eye(2)), Tensor(np.zeros(2)))
        with pytest.raises(DimensionError):
            L.dense(layer, Tensor([1.0, 2.0, 3.0]))

    def test_bias_must_match(self):
        with pytest.raises(DimensionError):
            L.DenseLayer(Tensor(np.eye(2)), Tensor(np.zeros(3)))
        with pytest.raises(ValueError):
            L.DenseLayer(Tensor(np.eye(2)), Tensor(np.zeros(2)), "tanh")

    def test_gradients_match_finite_differences(self):
        with T.precision(64):
            for activation in ("none", "relu", "softmax"):
                rng = np.random.default_rng(4)
                layer = L.DenseLayer(Tensor(rng.normal(size=(4, 3)), requires_grad=True),
                                     Tensor(rng.normal(size=3), requires_grad=True), activation)
                x = Tensor(rng.normal(size=(5, 4)), requires_grad=True)
                w = Tensor(rng.normal(size=(5, 3)))

                def f():
                    return T.sum_all(T.multiply(L.dense(layer, x), w))

                for t in (layer.W, layer.b, x):
                    t.zero_grad()
                with T.Tape() as tape:
                    out = f()
                tape.backward(out)
                for t in (layer.W, layer.b, x):
                    num = T.finite_difference_grad(lambda: f().item(), t)
                    assert rel_err(t.grad, num) < 1e-4, activation


class TestProjectImage:
    def test_normalizes_first(self):
        layer = L.DenseLayer(Tensor(np.eye(2)), Tensor(np.zeros(2)))
        out = L.project_image(layer, Tensor([3.0, 4.0]), normalize=True)
        np.testing.assert_allclose(out.data, [0.6, 0.8], rtol=1e-6)

    def test_pass_through_without_normalization(self):
        layer = L.DenseLayer(Tensor(np.eye(2)), Tensor(np.zeros(2)))
        out = L.project_image(layer, Tensor([3.0, 4.0]), normalize=False)
        np.testing.assert_array_equal(out.data, [3, 4])

    def test_relu_projection(self):
        layer = L.DenseLayer(Tensor(-np.eye(2)), Tensor(np.zeros(2)), "relu")
        out = L.project_image(layer, Tensor([3.0, -4.0]), normalize=False)
        np.testing.assert_array_equal(out.data, [0, 4])

    def test_zero_norm(self):
        layer = L.DenseLayer(Tensor(np.eye(2)), Tensor(np.zeros(2)))
        with pytest.raises(NumericError):
            L.project_image(layer, Tensor([0.0, 0.0]), normalize=True)
