"""Autodiff op contracts: values against hand results, gradients against
central finite differences, masked softmax against a brute-force row oracle."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import pagegraph.autodiff as ad
from pagegraph.autodiff import ParameterRegistry, Tensor, grad_check
from pagegraph.errors import DegenerateRowError, NumericError, ShapeError


def fd_grad(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of one array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(x)
        flat[i] = orig - eps
        fm = f(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g


def max_rel(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    return float((np.abs(a - b) / np.maximum.reduce([np.abs(a), np.abs(b), np.full_like(a, floor)])).max())


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 4))
        out = ad.matmul(Tensor(np.eye(3)), Tensor(x))
        np.testing.assert_array_equal(out.data, x)

    def test_hand_case(self):
        out = ad.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[1.0], [1.0]]))
        np.testing.assert_array_equal(out.data, [[3.0], [7.0]])

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
            ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 2))))

    def test_gradient_vs_central_differences(self):
        rng = np.random.default_rng(1)
        a = Tensor(rng.uniform(-2, 2, size=(4, 5)), requires_grad=True)
        b = Tensor(rng.uniform(-2, 2, size=(5, 2)), requires_grad=True)
        w = rng.normal(size=(4, 2))  # fixed weighting makes the output scalar
        loss = ad.sum_(ad.mul(ad.matmul(a, b), Tensor(w)))
        loss.backward()

        def f_a(x):
            return float(((x @ b.data) * w).sum())

        def f_b(x):
            return float(((a.data @ x) * w).sum())

        assert max_rel(a.grad, fd_grad(f_a, a.data.copy(), eps=1e-5)) < 1e-6
        assert max_rel(b.grad, fd_grad(f_b, b.data.copy(), eps=1e-5)) < 1e-6


class TestMaskedSoftmax:
    def test_uniform_full_mask(self):
        scores = Tensor(np.zeros((4, 4)))
        out = ad.masked_softmax(scores, np.ones((4, 4), dtype=bool))
        np.testing.assert_allclose(out.data, 0.25)

    def test_partial_mask(self):
        scores = Tensor(np.array([[0.0, 0.0, 123.456]]))  # masked value must not matter
        mask = np.array([[True, True, False]])
        out = ad.masked_softmax(scores, mask)
        np.testing.assert_allclose(out.data, [[0.5, 0.5, 0.0]])

    def test_against_bruteforce_rows(self):
        rng = np.random.default_rng(2)
        scores = rng.uniform(-3, 3, size=(5, 5))
        mask = rng.random((5, 5)) < 0.6
        mask[np.arange(5), rng.integers(0, 5, size=5)] = True  # no empty rows
        out = ad.masked_softmax(Tensor(scores), mask).data
        for i in range(5):
            exp = np.array([math.exp(scores[i, j]) if mask[i, j] else 0.0 for j in range(5)])
            np.testing.assert_allclose(out[i], exp / exp.sum(), atol=1e-12)

    def test_rows_sum_to_one_and_masked_exact_zero(self):
        rng = np.random.default_rng(3)
        scores = rng.normal(size=(8, 8)) * 5
        mask = rng.random((8, 8)) < 0.5
        mask[:, 0] = True
        out = ad.masked_softmax(Tensor(scores), mask).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
        assert (out[~mask] == 0.0).all()

    def test_all_false_row_rejected(self):
        mask = np.array([[True, True], [False, False]])
        with pytest.raises(DegenerateRowError, match="row 1"):
            ad.masked_softmax(Tensor(np.zeros((2, 2))), mask)

    def test_gradient(self):
        rng = np.random.default_rng(4)
        x = Tensor(rng.uniform(-2, 2, size=(4, 4)), requires_grad=True)
        mask = rng.random((4, 4)) < 0.7
        mask[:, 2] = True
        w = rng.normal(size=(4, 4))
        ad.sum_(ad.mul(ad.masked_softmax(x, mask), Tensor(w))).backward()

        def f(v):
            shifted = np.where(mask, v, -np.inf)
            m = shifted.max(axis=1, keepdims=True)
            e = np.where(mask, np.exp(np.where(mask, v, m) - m), 0.0)
            return float((e / e.sum(axis=1, keepdims=True) * w).sum())

        assert max_rel(x.grad, fd_grad(f, x.data.copy(), eps=1e-6), floor=1e-5) < 1e-5

    @settings(max_examples=30, deadline=None)
    @given(st.integers(min_value=0, max_value=10_000))
    def test_property_rows_normalize(self, seed):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 7))
        scores = rng.normal(size=(n, n)) * 10
        mask = rng.random((n, n)) < 0.5
        mask[np.arange(n), rng.integers(0, n, size=n)] = True
        out = ad.masked_softmax(Tensor(scores), mask).data
        np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-9)
        assert (out[~mask] == 0.0).all()
        assert (out >= 0.0).all()


class TestElementwise:
    def test_sigmoid_zero(self):
        assert ad.sigmoid(Tensor(0.0)).item() == 0.5

    def test_gelu_at_one(self):
        # tanh-form closed form evaluated independently
        expected = 0.5 * 1.0 * (1.0 + math.tanh(math.sqrt(2 / math.pi) * (1 + 0.044715)))
        got = ad.gelu(Tensor(1.0)).item()
        assert got == pytest.approx(expected, abs=1e-12)
        assert got == pytest.approx(0.8412, abs=5e-5)

    def test_layer_norm_constant_vector_gives_shift(self):
        x = Tensor(np.full((2, 6), 3.7))
        gain = Tensor(np.full(6, 2.0))
        shift = Tensor(np.arange(6, dtype=float))
        out = ad.layer_norm(x, gain, shift)
        np.testing.assert_allclose(out.data, np.tile(np.arange(6.0), (2, 1)), atol=1e-12)

    def test_add_mul_broadcast_gradients(self):
        rng = np.random.default_rng(5)
        a = Tensor(rng.uniform(-2, 2, size=(3, 4)), requires_grad=True)
        b = Tensor(rng.uniform(-2, 2, size=(4,)), requires_grad=True)
        w = rng.normal(size=(3, 4))
        ad.sum_(ad.mul(ad.add(a, b), Tensor(w))).backward()
        np.testing.assert_allclose(a.grad, w, atol=1e-12)
        np.testing.assert_allclose(b.grad, w.sum(axis=0), atol=1e-12)

    @pytest.mark.parametrize(
        "op",
        [ad.sigmoid, ad.gelu, lambda t: ad.mean(t), lambda t: ad.sum_(t, axis=1),
         lambda t: ad.smooth_l1(t), lambda t: t[1:, :2]],
        ids=["sigmoid", "gelu", "mean", "sum_axis", "smooth_l1", "slice"],
    )
    def test_gradients_vs_fd(self, op):
        rng = np.random.default_rng(6)
        # keep clear of the smooth-L1 kink at |x| = 1
        data = rng.uniform(-2, 2, size=(3, 4))
        data[np.abs(np.abs(data) - 1.0) < 0.05] = 0.5
        x = Tensor(data, requires_grad=True)
        out = op(x)
        w = np.random.default_rng(7).normal(size=out.data.shape)
        ad.sum_(ad.mul(out, Tensor(w))).backward()

        def f(v):
            with ad.no_grad():
                return float((op(Tensor(v)).data * w).sum())

        assert max_rel(x.grad, fd_grad(f, x.data.copy()), floor=1e-4) < 1e-5

    def test_layer_norm_gradients_vs_fd(self):
        rng = np.random.default_rng(8)
        x = Tensor(rng.uniform(-2, 2, size=(3, 6)), requires_grad=True)
        gain = Tensor(rng.uniform(0.5, 1.5, size=6), requires_grad=True)
        shift = Tensor(rng.uniform(-1, 1, size=6), requires_grad=True)
        w = rng.normal(size=(3, 6))
        ad.sum_(ad.mul(ad.layer_norm(x, gain, shift), Tensor(w))).backward()

        def run(xv, gv, sv):
            with ad.no_grad():
                return float((ad.layer_norm(Tensor(xv), Tensor(gv), Tensor(sv)).data * w).sum())

        assert max_rel(x.grad, fd_grad(lambda v: run(v, gain.data, shift.data), x.data.copy()), floor=1e-4) < 1e-5
        assert max_rel(gain.grad, fd_grad(lambda v: run(x.data, v, shift.data), gain.data.copy()), floor=1e-4) < 1e-5
        assert max_rel(shift.grad, fd_grad(lambda v: run(x.data, gain.data, v), shift.data.copy()), floor=1e-4) < 1e-5

    def test_embedding_lookup_gradient_accumulates_repeats(self):
        table = Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
        idx = [1, 1, 3]
        out = ad.embedding_lookup(table, idx)
        ad.sum_(out).backward()
        expected = np.zeros((4, 3))
        expected[1] = 2.0
        expected[3] = 1.0
        np.testing.assert_array_equal(table.grad, expected)

    def test_embedding_lookup_out_of_range(self):
        with pytest.raises(IndexError, match="513"):
            ad.embedding_lookup(Tensor(np.zeros((513, 4))), [513])

    def test_concat_axis_out_of_range(self):
        with pytest.raises(ShapeError, match="axis"):
            ad.concat([Tensor(np.zeros((2, 2)))], axis=2)

    def test_scatter_pairs_roundtrip_and_grad(self):
        vals = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        rows, cols = np.array([0, 1, 2]), np.array([2, 0, 1])
        out = ad.scatter_pairs(vals, rows, cols, 3)
        assert out.data[0, 2] == 1.0 and out.data[1, 0] == 2.0 and out.data[2, 1] == 3.0
        assert out.data.sum() == 6.0
        w = np.arange(9.0).reshape(3, 3)
        ad.sum_(ad.mul(out, Tensor(w))).backward()
        np.testing.assert_array_equal(vals.grad, w[rows, cols])


class TestSmoothL1Values:
    def test_zero(self):
        assert ad.smooth_l1(Tensor(np.zeros(3))).item() == 0.0

    def test_quadratic_branch(self):
        assert ad.smooth_l1(Tensor([0.5])).item() == pytest.approx(0.125)

    def test_linear_branch(self):
        assert ad.smooth_l1(Tensor([2.0])).item() == pytest.approx(1.5)


class TestCrossEntropy:
    def test_uniform_logits(self):
        loss = ad.cross_entropy(Tensor(np.zeros(4)), 1)
        assert loss.item() == pytest.approx(math.log(4.0))

    def test_certain_limit(self):
        logits = np.zeros(3)
        logits[2] = 50.0
        assert ad.cross_entropy(Tensor(logits), 2).item() < 1e-9

    def test_against_logsumexp_oracle(self):
        rng = np.random.default_rng(9)
        logits = rng.normal(size=(5, 7)) * 3
        labels = rng.integers(0, 7, size=5)
        got = ad.cross_entropy(Tensor(logits), labels).item()
        per_row = [
            math.log(np.exp(row - row.max()).sum()) + row.max() - row[lab]
            for row, lab in zip(logits, labels)
        ]
        assert got == pytest.approx(float(np.mean(per_row)), abs=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(10)
        x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        labels = np.array([0, 3, 2, 1])
        ad.cross_entropy(x, labels).backward()

        def f(v):
            with ad.no_grad():
                return float(ad.cross_entropy(Tensor(v), labels).data)

        assert max_rel(x.grad, fd_grad(f, x.data.copy()), floor=1e-4) < 1e-5

    def test_bad_label(self):
        with pytest.raises(IndexError):
            ad.cross_entropy(Tensor(np.zeros(3)), 3)


class TestGradCheck:
    def test_sum_of_registry_is_exact(self):
        reg = ParameterRegistry()
        rng = np.random.default_rng(11)
        reg.register("a", Tensor(rng.normal(size=(3, 2))))
        reg.register("b", Tensor(rng.normal(size=(4,))))

        def f():
            return ad.add(ad.sum_(reg["a"]), ad.sum_(reg["b"]))

        assert grad_check(f, reg, eps=1e-5) < 1e-10

    def test_smooth_l1_away_from_kink(self):
        reg = ParameterRegistry()
        rng = np.random.default_rng(12)
        vals = rng.uniform(-2, 2, size=(10,))
        vals[np.abs(np.abs(vals) - 1.0) < 0.01] = 0.3  # exclude the |x|=1 kink
        reg.register("x", Tensor(vals))
        assert grad_check(lambda: ad.smooth_l1(reg["x"]), reg, eps=1e-5) < 1e-4

    def test_eps_bounds(self):
        reg = ParameterRegistry()
        reg.register("x", Tensor(np.ones(2)))
        with pytest.raises(ShapeError):
            grad_check(lambda: ad.sum_(reg["x"]), reg, eps=1e-2)

    def test_non_finite_loss(self):
        reg = ParameterRegistry()
        reg.register("x", Tensor(np.ones(2)))
        with pytest.raises(NumericError):
            grad_check(lambda: Tensor(np.nan), reg)


class TestDeterminism:
    def test_repeated_evaluation_bit_identical(self):
        rng = np.random.default_rng(13)
        a = rng.normal(size=(6, 6))
        b = rng.normal(size=(6, 6))
        mask = rng.random((6, 6)) < 0.7
        mask[:, 0] = True

        def run():
            t = ad.matmul(Tensor(a), Tensor(b))
            t = ad.masked_softmax(t, mask)
            return ad.gelu(t).data

        first = run()
        for _ in range(3):
            np.testing.assert_array_equal(run(), first)


class TestRegistry:
    def test_lexicographic_iteration(self):
        reg = ParameterRegistry()
        for name in ("zeta", "alpha", "mid/leaf", "mid/branch"):
            reg.register(name, Tensor(np.zeros(1)))
        assert reg.names() == ["alpha", "mid/branch", "mid/leaf", "zeta"]
        assert [n for n, _ in reg.items()] == reg.names()

    def test_duplicate_rejected(self):
        reg = ParameterRegistry()
        reg.register("p", Tensor(np.zeros(1)))
        with pytest.raises(ShapeError, match="duplicate"):
            reg.register("p", Tensor(np.zeros(1)))
