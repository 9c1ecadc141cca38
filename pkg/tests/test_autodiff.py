"""Tape correctness: every primitive op against central finite differences,
plus shape/broadcast bookkeeping."""

import numpy as np
import pytest

import sampleid.autodiff as ad
from sampleid.autodiff import Tensor, grad_check


def numeric_grad(f, x, step=1e-6):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        lp = f()
        flat[i] = orig - step
        lm = f()
        flat[i] = orig
        gf[i] = (lp - lm) / (2 * step)
    return g


class TestPrimitives:
    @pytest.mark.parametrize("op,build", [
        ("add", lambda a, b: a + b),
        ("sub", lambda a, b: a - b),
        ("mul", lambda a, b: a * b),
        ("div", lambda a, b: a / (b + 3.0)),
        ("matmul", lambda a, b: a @ b),
    ])
    def test_binary_ops(self, op, build):
        rng = np.random.default_rng(42)
        a = Tensor(rng.standard_normal((4, 5)))
        b = Tensor(rng.standard_normal((4, 5)) if op != "matmul"
                   else rng.standard_normal((5, 3)))
        mix = rng.standard_normal(build(a, b).data.shape)
        rep = grad_check(lambda: ad.tsum(build(a, b) * Tensor(mix)),
                         {"a": a, "b": b}, tol=1e-6, max_coords=20)
        assert rep.passed, f"{op}: {rep}"

    @pytest.mark.parametrize("name,fn", [
        ("relu", ad.relu),
        ("exp", ad.exp),
        ("sigmoid", ad.sigmoid),
        ("log", lambda t: ad.log(t * t + 1.0)),
        ("pow", lambda t: (t * t + 0.5) ** 1.7),
    ])
    def test_unary_ops(self, name, fn):
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal(30) + 0.05)  # keep relu kinks unlikely
        mix = rng.standard_normal(30)
        rep = grad_check(lambda: ad.tsum(fn(x) * Tensor(mix)), {"x": x},
                         tol=1e-5, max_coords=30)
        assert rep.passed, f"{name}: {rep}"

    @pytest.mark.parametrize("axis,keepdims", [(0, False), (1, True), (None, False)])
    def test_reductions(self, axis, keepdims):
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((4, 6)))
        for red in (ad.tsum, ad.tmean):
            if axis is None and red is ad.tmean:
                continue
            out = red(x, axis=axis, keepdims=keepdims)
            mix = rng.standard_normal(out.data.shape)
            rep = grad_check(lambda red=red: ad.tsum(red(x, axis=axis, keepdims=keepdims)
                                                     * Tensor(mix)),
                             {"x": x}, tol=1e-6, max_coords=24)
            assert rep.passed

    def test_max_routes_to_first_argmax(self):
        x = Tensor(np.array([[1.0, 3.0, 3.0], [2.0, 0.0, 1.0]]))
        out = ad.tmax(x, axis=1)
        out_sum = ad.tsum(out)
        out_sum.backward()
        np.testing.assert_array_equal(x.grad, [[0, 1, 0], [1, 0, 0]])

    def test_softmax_rows_and_grad(self):
        rng = np.random.default_rng(5)
        x = Tensor(rng.standard_normal((3, 7)))
        s = ad.softmax(x, axis=-1)
        np.testing.assert_allclose(s.data.sum(axis=-1), 1.0, atol=1e-12)
        mix = rng.standard_normal((3, 7))
        rep = grad_check(lambda: ad.tsum(ad.softmax(x, axis=-1) * Tensor(mix)),
                         {"x": x}, tol=1e-6, max_coords=21)
        assert rep.passed

    def test_gather_rows_scatter_grad(self):
        x = Tensor(np.arange(12, dtype=np.float64).reshape(4, 3))
        idx = np.array([[0, 0], [2, 3]])
        out = ad.gather_rows(x, idx)
        assert out.data.shape == (2, 2, 3)
        ad.tsum(out).backward()
        # row 0 gathered twice, rows 2 and 3 once, row 1 never
        np.testing.assert_array_equal(x.grad[:, 0], [2, 0, 1, 1])

    def test_broadcasting_unbroadcast(self):
        a = Tensor(np.ones((3, 4)))
        b = Tensor(np.ones(4))
        c = Tensor(np.ones((3, 1)))
        loss = ad.tsum(a * b + c)
        loss.backward()
        assert b.grad.shape == (4,)
        np.testing.assert_array_equal(b.grad, np.full(4, 3.0))
        assert c.grad.shape == (3, 1)
        np.testing.assert_array_equal(c.grad, np.full((3, 1), 4.0))

    def test_concat_transpose_reshape(self):
        rng = np.random.default_rng(11)
        a = Tensor(rng.standard_normal((2, 3)))
        b = Tensor(rng.standard_normal((2, 3)))
        mix = rng.standard_normal((3, 4))

        def f():
            cat = ad.concat([a, b], axis=0)             # (4, 3)
            return ad.tsum(ad.reshape(ad.transpose(cat, (1, 0)), (3, 4)) * Tensor(mix))

        rep = grad_check(f, {"a": a, "b": b}, tol=1e-6, max_coords=12)
        assert rep.passed

    def test_l2_normalize_unit_norm_and_grad(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.standard_normal((2, 6)))
        z = ad.l2_normalize(x, axis=-1)
        np.testing.assert_allclose(np.linalg.norm(z.data, axis=-1), 1.0, atol=1e-9)
        mix = rng.standard_normal((2, 6))
        rep = grad_check(lambda: ad.tsum(ad.l2_normalize(x, axis=-1) * Tensor(mix)),
                         {"x": x}, tol=1e-5, max_coords=12)
        assert rep.passed


class TestHarness:
    def test_quadratic_exact(self):
        """f = ||theta||^2 has gradient 2*theta; central differences on a
        quadratic are exact up to rounding."""
        theta = Tensor(np.random.default_rng(0).standard_normal(16))
        loss = ad.tsum(theta * theta)
        loss.backward()
        np.testing.assert_allclose(theta.grad, 2 * theta.data, atol=1e-9)
        rep = grad_check(lambda: ad.tsum(theta * theta), {"theta": theta}, tol=1e-8)
        assert rep.passed and rep.max_rel_err < 1e-9

    def test_backward_requires_scalar(self):
        x = Tensor(np.ones(3))
        with pytest.raises(ValueError):
            (x * 2.0).backward()

    def test_accumulation_when_reused(self):
        x = Tensor(np.array(2.0))
        y = x * x + x * 3.0
        y.backward()
        assert x.grad == pytest.approx(2 * 2.0 + 3.0)

    def test_harness_agrees_with_manual_fd(self):
        rng = np.random.default_rng(9)
        w = Tensor(rng.standard_normal((3, 3)))
        x = rng.standard_normal((4, 3))

        def loss_value():
            return float(ad.tsum(ad.relu(Tensor(x) @ w)).data)

        manual = numeric_grad(loss_value, w.data)
        loss = ad.tsum(ad.relu(Tensor(x) @ w))
        loss.backward()
        np.testing.assert_allclose(w.grad, manual, atol=1e-6)
