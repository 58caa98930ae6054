import numpy as np
import pytest

from yoloant import diffcheck as D
from yoloant import tensor_core as tc
from yoloant.errors import CapabilityError, DimensionError
from yoloant.gradsuite import BLOCKS, CASES, PRIMITIVES, run_suite


class TestBackward:
    def test_linear_all_ones_upstream(self):
        rng = np.random.default_rng(0)
        x, w = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
        dx, dw, db = D.backward("linear", [x, w, np.zeros(2)], np.ones((3, 2)))
        np.testing.assert_allclose(dw, x.T @ np.ones((3, 2)), rtol=1e-15)
        np.testing.assert_allclose(dx, np.ones((3, 2)) @ w.T, rtol=1e-15)
        np.testing.assert_array_equal(db, [3.0, 3.0])

    def test_add_passes_upstream(self):
        g = np.random.default_rng(1).standard_normal((1, 2, 3, 3))
        dx, dy = D.backward("add", [np.zeros_like(g), np.ones_like(g)], g)
        assert np.array_equal(dx, g) and np.array_equal(dy, g)

    def test_conv_weight_grad_vs_central_difference(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((1, 2, 2, 2))
        w = rng.standard_normal((3, 2, 2, 2))
        up = rng.standard_normal((1, 3, 1, 1))
        _, dw, _ = D.backward("conv2d", [x, w], up)

        def f(wv):
            return float((tc.conv2d(x, wv) * up).sum())

        num = D.finite_diff(f, w.copy())
        assert np.max(D.rel_err(dw, num)) <= 1e-6

    @pytest.mark.parametrize("s,p,k,h", [(1, 1, 3, 5), (2, 1, 3, 6), (2, 1, 3, 7), (2, 0, 2, 4), (3, 1, 3, 8)])
    def test_conv_input_grad_is_transposed_conv(self, s, p, k, h):
        rng = np.random.default_rng(s + k + h)
        x = rng.standard_normal((1, 3, h, h))
        w = rng.standard_normal((4, 3, k, k))
        up = rng.standard_normal(tc.conv2d(x, w, stride=s, padding=p).shape)
        dx = D.backward("conv2d", [x, w], up, stride=s, padding=p)[0]
        ref = tc.transposed_conv(up, w, stride=s, padding=p, output_padding=(h + 2 * p - k) % s)
        np.testing.assert_allclose(dx, ref, rtol=0, atol=1e-12)

    def test_max_pool_ties_route_to_first(self):
        x = np.ones((1, 1, 2, 2))
        (dx,) = D.backward("pool", [x], np.ones((1, 1, 1, 1)), kind="max", k=2, stride=2)
        np.testing.assert_array_equal(dx[0, 0], [[1, 0], [0, 0]])

    def test_unknown_op(self):
        with pytest.raises(CapabilityError):
            D.backward("fft", [np.zeros(1)], np.zeros(1))

    def test_upstream_shape_checked(self):
        with pytest.raises(DimensionError):
            D.backward("add", [np.zeros((1, 1, 2, 2))] * 2, np.zeros((1, 1, 2, 3)))

    def test_every_primitive_has_a_vjp(self):
        names = {n.split(".")[0] for n in PRIMITIVES}
        assert names <= set(D.VJPS)


class TestFiniteDiff:
    def test_sum_gives_ones(self):
        x = np.random.default_rng(0).standard_normal((2, 3))
        np.testing.assert_allclose(D.finite_diff(lambda v: float(v.sum()), x), 1.0, atol=1e-9)

    def test_quadratic(self):
        assert D.finite_diff(lambda v: 0.5 * float((v**2).sum()), np.array([3.0]))[0] == pytest.approx(3.0, abs=1e-6)

    def test_silu_derivative(self):
        s = 1 / (1 + np.exp(-1.0))
        g = D.finite_diff(lambda v: float(tc.activation(v.reshape(1, 1, 1, 1), "silu").sum()), np.array([1.0]))
        assert g[0] == pytest.approx(s * (1 + 1.0 * (1 - s)), abs=1e-9)

    def test_input_restored(self):
        x = np.arange(4.0)
        D.finite_diff(lambda v: float(v.sum()), x)
        np.testing.assert_array_equal(x, np.arange(4.0))


class TestRelErr:
    def test_definition(self):
        assert D.rel_err(1.0, 1.0) == 0.0
        assert D.rel_err(2.0, 1.0) == pytest.approx(0.5)
        assert D.rel_err(0.0, 1e-12) == pytest.approx(1e-12 / 1e-8)


class TestTape:
    def test_shared_subexpression_accumulates(self):
        x = D.Var(np.array([[2.0, -1.0]]))
        y = D.TRACED.add(x, x)
        D.grad(y, np.ones((1, 2)))
        np.testing.assert_array_equal(x.grad, [[2.0, 2.0]])

    def test_concat_routes_slices(self):
        a, b = D.Var(np.zeros((1, 1, 2, 2))), D.Var(np.zeros((1, 2, 2, 2)))
        out = D.TRACED.concat_channels([a, b])
        seed = np.arange(12.0).reshape(1, 3, 2, 2)
        D.grad(out, seed)
        np.testing.assert_array_equal(a.grad, seed[:, :1])
        np.testing.assert_array_equal(b.grad, seed[:, 1:])


class TestGradcheck:
    @pytest.mark.parametrize("name", sorted(CASES))
    def test_case_passes(self, name):
        (report,) = run_suite(names=[name])
        assert report.passed, report.line()
        assert report.n_probes >= 16
        assert report.max_rel_err <= 1e-4

    def test_suite_covers_named_blocks(self):
        for name in ("CBS", "DSLK-Block", "DSLK-Layer", "f_local", "MHSA", "f_global", "FFN", "DSLKVit"):
            assert name in BLOCKS

    def test_report_invariant(self):
        for r in run_suite(names=["MHSA", "pool.max"]):
            assert r.passed == (r.max_rel_err <= r.tolerance)

    def test_tiny_tolerance_fails(self):
        reports = run_suite(tol=1e-12, names=["DSLKVit", "CBS"])
        assert not all(r.passed for r in reports)

    def test_wrong_backward_detected(self, monkeypatch):
        good = D.VJPS["activation"]

        def broken(g, out, x, kind="silu"):
            (dx,) = good(g, out, x, kind)
            return (1.1 * dx,)

        monkeypatch.setitem(D.VJPS, "activation", broken)
        (report,) = run_suite(names=["CBS"])
        assert not report.passed
