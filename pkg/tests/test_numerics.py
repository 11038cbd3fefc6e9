"""Tensor engine: gradients, attention masking, conv, optimizer, layer norm."""

import numpy as np
import pytest

from fedmmg import numerics as nx
from fedmmg.numerics import (MASK_NEG, AdamState, AttentionParams,
                             EmptyAttentionError, GradientError, ParamStore,
                             Tape, adam_step, const, grad_check,
                             multi_head_attention, neighbor_mean_matrix,
                             sage_conv)


def identity_attention(d: int) -> AttentionParams:
    eye = np.eye(d)
    return AttentionParams(wq=const(eye), wk=const(eye), wv=const(eye), wo=const(eye))


def random_attention(store: ParamStore, rng, dq, dk, dv, da) -> AttentionParams:
    return AttentionParams(
        wq=store.add("wq", rng.normal(size=(dq, da)) * 0.3),
        wk=store.add("wk", rng.normal(size=(dk, da)) * 0.3),
        wv=store.add("wv", rng.normal(size=(dv, da)) * 0.3),
        wo=store.add("wo", rng.normal(size=(da, dv)) * 0.3),
    )


class TestAttention:
    def test_single_token_returns_value_row(self):
        d = 4
        rng = np.random.default_rng(0)
        v = rng.normal(size=(1, d))
        out, weights = multi_head_attention(const(rng.normal(size=(1, d))),
                                            const(rng.normal(size=(1, d))),
                                            const(v), np.zeros(1), heads=2,
                                            params=identity_attention(d))
        np.testing.assert_allclose(out.data, v, atol=1e-12)
        np.testing.assert_allclose(weights, 1.0)

    def test_identical_rows_split_weight_evenly(self):
        d = 4
        rng = np.random.default_rng(1)
        row = rng.normal(size=(1, d))
        bank = const(np.vstack([row, row]))
        out, weights = multi_head_attention(const(rng.normal(size=(1, d))), bank,
                                            bank, np.zeros(2), heads=2,
                                            params=identity_attention(d))
        np.testing.assert_allclose(weights, 0.5, atol=1e-12)

    def test_masked_token_weight_is_exactly_zero(self):
        d = 4
        rng = np.random.default_rng(2)
        bank = const(rng.normal(size=(2, d)))
        mask = np.array([0.0, MASK_NEG])
        _, weights = multi_head_attention(const(rng.normal(size=(1, d))), bank,
                                          bank, mask, heads=2,
                                          params=identity_attention(d))
        assert (weights[:, 1] == 0.0).all()
        np.testing.assert_allclose(weights[:, 0], 1.0)

    def test_all_masked_bank_raises(self):
        d = 4
        bank = const(np.ones((3, d)))
        with pytest.raises(EmptyAttentionError):
            multi_head_attention(const(np.ones((1, d))), bank, bank,
                                 np.full(3, MASK_NEG), heads=2,
                                 params=identity_attention(d))

    def test_output_in_convex_hull_of_values(self):
        # identity projections: per-head output is a convex combination of rows
        d = 4
        rng = np.random.default_rng(3)
        values = rng.normal(size=(5, d))
        out, weights = multi_head_attention(const(rng.normal(size=(1, d))),
                                            const(rng.normal(size=(5, d))),
                                            const(values), np.zeros(5), heads=1,
                                            params=identity_attention(d))
        assert (out.data >= values.min(axis=0) - 1e-12).all()
        assert (out.data <= values.max(axis=0) + 1e-12).all()
        np.testing.assert_allclose(weights.sum(), 1.0, atol=1e-12)

    def test_attention_gradients(self):
        rng = np.random.default_rng(4)
        store = ParamStore()
        params = random_attention(store, rng, 6, 6, 6, 8)
        query = const(rng.normal(size=(1, 6)))
        bank = const(rng.normal(size=(4, 6)))
        mask = np.array([0.0, 0.0, MASK_NEG, 0.0])

        def f(s):
            out, _ = multi_head_attention(query, bank, bank, mask, 2, params)
            return nx.total_sum(nx.mul(out, out))

        report = grad_check(f, store, h=1e-5)
        assert report.max_rel_err < 1e-6


class TestSoftmax:
    def test_rows_sum_to_one_and_positive(self):
        rng = np.random.default_rng(5)
        for temperature in (1.0, 0.25, 3.0):
            x = const(rng.normal(size=(40, 7)) * 5)
            s = nx.softmax(x, axis=-1, temperature=temperature)
            np.testing.assert_allclose(s.data.sum(axis=1), 1.0, atol=1e-12)
            assert (s.data > 0).all()

    def test_lower_temperature_sharpens(self):
        x = const(np.array([[2.0, 0.0]]))
        hot = nx.softmax(x, temperature=1.0).data[0, 0]
        cold = nx.softmax(x, temperature=0.1).data[0, 0]
        assert cold > hot
        assert nx.softmax(x, temperature=0.1).data[0, 0] > 1 - 1e-8

    def test_softmax_dot_gradients(self):
        rng = np.random.default_rng(6)
        store = ParamStore()
        store.add("w", rng.normal(size=(5, 5)))
        x = const(rng.normal(size=(3, 5)))
        probe = const(rng.normal(size=(3, 5)))

        def f(s):
            return nx.total_sum(nx.mul(nx.softmax(nx.matmul(x, s["w"])), probe))

        report = grad_check(f, store, h=1e-5)
        assert report.max_rel_err < 1e-5


class TestSageConv:
    def test_identity_self_weights(self):
        x = np.random.default_rng(7).normal(size=(4, 3))
        mat = const(neighbor_mean_matrix(4, [(0, 1), (1, 2)]))
        out = sage_conv(const(x), mat, const(np.eye(3)), const(np.zeros((3, 3))))
        np.testing.assert_allclose(out.data, x)

    def test_neighbor_mean(self):
        x = np.array([[1.0, 0.0], [3.0, 0.0], [0.0, 0.0]])
        mat = const(neighbor_mean_matrix(3, [(2, 0), (2, 1)]))
        out = sage_conv(const(x), mat, const(np.zeros((2, 2))), const(np.eye(2)))
        np.testing.assert_allclose(out.data[2], [2.0, 0.0])

    def test_isolated_node_gets_zero_neighbor_term(self):
        x = np.random.default_rng(8).normal(size=(3, 2))
        mat = const(neighbor_mean_matrix(3, [(0, 1)]))
        out = sage_conv(const(x), mat, const(np.zeros((2, 2))), const(np.eye(2)))
        np.testing.assert_allclose(out.data[2], 0.0)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(9)
        n, d = 6, 3
        x = rng.normal(size=(n, d))
        edges = [(0, 1), (1, 2), (2, 3), (3, 4), (0, 5)]
        w_self, w_neigh = rng.normal(size=(d, d)), rng.normal(size=(d, d))
        out = sage_conv(const(x), const(neighbor_mean_matrix(n, edges)),
                        const(w_self), const(w_neigh)).data

        perm = rng.permutation(n)
        p_edges = [(perm[u], perm[v]) for u, v in edges]
        p_out = sage_conv(const(x[np.argsort(perm)]),
                          const(neighbor_mean_matrix(n, p_edges)),
                          const(w_self), const(w_neigh)).data
        np.testing.assert_allclose(p_out[perm], out, atol=1e-12)


class TestAdam:
    def test_zero_gradients_leave_params_unchanged(self):
        store = ParamStore()
        p = store.add("p", np.array([1.0, -2.0]))
        state = AdamState.for_params(store)
        adam_step(store, state, lr=0.01)
        np.testing.assert_allclose(p.data, [1.0, -2.0])

    def test_first_step_matches_closed_form(self):
        # m_hat = g, v_hat = g^2 => step = lr * g / (|g| + eps)
        store = ParamStore()
        p = store.add("p", np.array([0.7]))
        state = AdamState.for_params(store)
        p.grad = np.array([1.0])
        lr, eps = 0.005, 1e-8
        expected = 0.7 - lr * 1.0 / (1.0 + eps)
        adam_step(store, state, lr=lr, eps=eps)
        np.testing.assert_allclose(p.data, [expected], rtol=0, atol=1e-15)
        assert abs(0.7 - p.data[0] - lr) < 1e-8
        assert p.grad is None  # cleared after the step

    def test_zero_lr_is_identity(self):
        store = ParamStore()
        p = store.add("p", np.array([3.0]))
        state = AdamState.for_params(store)
        p.grad = np.array([123.0])
        adam_step(store, state, lr=0.0)
        np.testing.assert_allclose(p.data, [3.0])

    def test_nan_gradient_raises_with_name(self):
        store = ParamStore()
        p = store.add("bad.weight", np.array([1.0]))
        state = AdamState.for_params(store)
        p.grad = np.array([np.nan])
        with pytest.raises(GradientError, match="bad.weight"):
            adam_step(store, state, lr=0.01)


class TestLayerNorm:
    def test_constant_row_maps_to_bias(self):
        x = const(np.full((2, 5), 3.7))
        out = nx.layer_norm(x, const(np.ones(5)), const(np.zeros(5)))
        np.testing.assert_allclose(out.data, 0.0, atol=1e-12)

    def test_already_normalized_row_is_fixed_point(self):
        # population variance of [1, -1] is exactly 1
        out = nx.layer_norm(const(np.array([[1.0, -1.0]])), const(np.ones(2)),
                            const(np.zeros(2)))
        expected = np.array([[1.0, -1.0]]) / np.sqrt(1.0 + 1e-8)
        np.testing.assert_allclose(out.data, expected, atol=1e-15)
        np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-6)

    def test_output_mean_equals_bias(self):
        rng = np.random.default_rng(10)
        bias = rng.normal(size=6)
        out = nx.layer_norm(const(rng.normal(size=(9, 6))), const(np.ones(6)),
                            const(bias))
        np.testing.assert_allclose(out.data.mean(axis=1), bias.mean(), atol=1e-10)

    def test_gradients(self):
        rng = np.random.default_rng(11)
        store = ParamStore()
        store.add("x", rng.normal(size=(3, 6)))
        store.add("g", rng.normal(size=6))
        store.add("b", rng.normal(size=6))
        probe = const(rng.normal(size=(3, 6)))

        def f(s):
            return nx.total_sum(nx.mul(nx.layer_norm(s["x"], s["g"], s["b"]), probe))

        assert grad_check(f, store, h=1e-5).max_rel_err < 1e-6


class TestGradCheckHarness:
    def test_simple_square(self):
        store = ParamStore()
        store.add("x", np.array([3.0]))

        def f(s):
            return nx.total_sum(nx.mul(s["x"], s["x"]))

        report = grad_check(f, store, h=1e-5)
        assert report.max_rel_err < 1e-8

    def test_rejects_bad_step(self):
        store = ParamStore()
        store.add("x", np.array([1.0]))
        with pytest.raises(ValueError):
            grad_check(lambda s: nx.total_sum(s["x"]), store, h=1e-2)

    def test_nonfinite_objective_raises(self):
        store = ParamStore()
        store.add("x", np.array([0.0]))

        def f(s):
            return nx.div(const(np.asarray(1.0)), nx.total_sum(nx.mul(s["x"], s["x"])))

        with pytest.raises(GradientError):
            grad_check(f, store, h=1e-5)


class TestMixedOps:
    def test_broadcasting_and_gather_gradients(self):
        rng = np.random.default_rng(12)
        store = ParamStore()
        store.add("w", rng.normal(size=(4, 3)))
        store.add("col", rng.normal(size=(5, 1)))
        x = const(rng.normal(size=(5, 4)))
        idx = np.array([0, 2, 2, 4])

        def f(s):
            y = nx.mul(nx.matmul(x, s["w"]), s["col"])
            picked = nx.rows(y, idx)
            z = nx.concat([picked, nx.relu(picked)], axis=1)
            return nx.mean(nx.mul(z, z))

        assert grad_check(f, store, h=1e-5).max_rel_err < 1e-5

    def test_stop_gradient_blocks_flow(self):
        store = ParamStore()
        p = store.add("p", np.array([2.0]))
        with Tape() as tape:
            loss = nx.total_sum(nx.mul(nx.stop_gradient(p), p))
            tape.backward(loss)
        np.testing.assert_allclose(p.grad, [2.0])  # only the live branch

    def test_cosine_of_zero_vector_is_zero(self):
        a = const(np.zeros((1, 4)))
        b = const(np.ones((1, 4)))
        assert nx.cosine_rows(a, b).data[0, 0] == 0.0
