import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from sdebnn import autodiff as ad
from sdebnn.errors import ContractError

from conftest import central_diff, rel_err


def grad_of(fn, x, name="x"):
    return ad.value_and_grad(lambda **kw: fn(kw[name]), {name: x})[1][name]


def test_tanh_at_zero_and_slope():
    x = ad.param(np.zeros(1), "x")
    y = ad.tanh(x)
    assert y.value[0] == 0.0
    assert ad.backward(ad.sum(y), [x])["x"][0] == 1.0


def test_identity_matmul():
    x = np.random.default_rng(0).normal(size=(3, 5))
    np.testing.assert_array_equal(ad.matmul(ad.constant(np.eye(3)), ad.constant(x)).value, x)


def test_swish_zero():
    assert ad.swish(ad.constant(np.zeros(2))).value.tolist() == [0.0, 0.0]


def test_square_gradient():
    g = grad_of(lambda x: ad.sum(ad.mul(x, x)), np.array([1.0, 2.0]))
    np.testing.assert_array_equal(g, [2.0, 4.0])


def test_stop_gradient_factor_is_constant():
    g = grad_of(lambda x: ad.sum(ad.mul(x, ad.stop_gradient(x))), np.array([3.0]))
    assert g[0] == 3.0


def test_fully_blocked_is_zero():
    x = np.random.default_rng(1).normal(size=4)
    g = grad_of(lambda x: ad.sum(ad.stop_gradient(x)), x)
    np.testing.assert_array_equal(g, np.zeros(4))
    assert np.array_equal(ad.stop_gradient(ad.constant(x)).value, x)


def test_blocked_branch_ignored():
    g = grad_of(lambda x: ad.sum(x + ad.stop_gradient(x)), np.array([0.3, -1.0]))
    np.testing.assert_array_equal(g, np.ones(2))


def test_non_scalar_root_rejected():
    x = ad.param(np.ones(3), "x")
    with pytest.raises(ContractError):
        ad.backward(ad.tanh(x), [x])


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ContractError, match=r"\(2,\).*\(3,\)"):
        ad.add(ad.constant(np.ones(2)), ad.constant(np.ones(3)))


def test_unreached_parameter_gets_zero():
    x, y = ad.param(np.ones(2), "x"), ad.param(np.ones((2, 2)), "y")
    g = ad.backward(ad.sum(x), [x, y])
    np.testing.assert_array_equal(g["y"], np.zeros((2, 2)))


def test_two_layer_tanh_network_vs_finite_differences():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(4, 3))
    w1, w2 = rng.normal(size=(3, 5)), rng.normal(size=(5, 1))

    def f(flat):
        a, b = flat[:15].reshape(3, 5), flat[15:].reshape(5, 1)
        return float(np.sum(np.tanh(np.tanh(x @ a) @ b)))

    def g(flat):
        a = ad.reshape(flat[:15], (3, 5))
        b = ad.reshape(flat[15:], (5, 1))
        return ad.sum(ad.tanh(ad.matmul(ad.tanh(ad.matmul(ad.constant(x), a)), b)))

    theta = np.concatenate([w1.ravel(), w2.ravel()])
    assert rel_err(grad_of(g, theta), central_diff(f, theta)) < 1e-6


OPS = {
    "tanh": (ad.tanh, np.tanh),
    "softplus": (ad.softplus, lambda v: np.logaddexp(0, v)),
    "swish": (ad.swish, lambda v: v / (1 + np.exp(-v))),
    "sigmoid": (ad.sigmoid, lambda v: 1 / (1 + np.exp(-v))),
    "exp": (ad.exp, np.exp),
    "square": (ad.square, np.square),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_elementwise_ops_vs_finite_differences(name):
    op, ref = OPS[name]
    x = np.random.default_rng(len(name)).normal(size=6)
    w = np.linspace(-1, 1, 6)
    g = grad_of(lambda x: ad.sum(ad.mul(op(x), ad.constant(w))), x)
    assert rel_err(g, central_diff(lambda v: float(np.sum(ref(v) * w)), x)) < 1e-7


def test_structural_ops_vs_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(3, 4))
    c = rng.normal(size=(6, 4))

    def build(x):
        y = ad.concat([x, ad.tanh(x)], axis=0)  # (6, 4)
        z = ad.mul(y, ad.constant(c))
        s = ad.logsumexp(z, axis=1)  # (6,)
        r = ad.expand(ad.sum(x, axis=0), 0, 2)  # (2, 4)
        return ad.sum(s[1:4]) + ad.sum(ad.square(r)) * 0.5 + ad.sum(ad.log(ad.exp(x[0])))

    def f(flat):
        return float(build(ad.constant(flat.reshape(3, 4))).value)

    g = grad_of(build, x)
    assert rel_err(g, central_diff(f, x.ravel()).reshape(3, 4)) < 1e-7


def test_batched_matmul_gradient():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2))
    g = grad_of(lambda a: ad.sum(ad.tanh(ad.matmul(a, ad.constant(b)))), a)
    fd = central_diff(lambda v: float(np.sum(np.tanh(v.reshape(2, 3, 4) @ b))), a.ravel())
    assert rel_err(g, fd.reshape(a.shape)) < 1e-7


def test_scale_by_scalar_node():
    x = ad.param(np.array([1.0, 2.0]), "x")
    c = ad.param(np.array(3.0), "c")
    out = ad.sum(ad.scale(x, c))
    g = ad.backward(out, [x, c])
    np.testing.assert_array_equal(g["x"], [3.0, 3.0])
    assert g["c"] == 3.0


def test_gradients_bitwise_deterministic():
    x = np.random.default_rng(5).normal(size=10)
    f = lambda x: ad.sum(ad.tanh(ad.mul(x, ad.softplus(x))))
    assert np.array_equal(grad_of(f, x), grad_of(f, x))


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, 5, elements=st.floats(-2, 2)), st.floats(-3, 3), st.floats(-3, 3))
def test_adjoint_linearity(x, a, b):
    f = lambda x: ad.sum(ad.tanh(x))
    g = lambda x: ad.sum(ad.square(x))
    combo = grad_of(lambda x: f(x) * a + g(x) * b, x)
    np.testing.assert_allclose(combo, a * grad_of(f, x) + b * grad_of(g, x), rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-1.5, 1.5)))
def test_composite_gradient_check(x):
    def build(x):
        return ad.sum(ad.swish(ad.matmul(ad.tanh(x), ad.constant(np.ones((3, 2)) * 0.7))))

    f = lambda v: float(build(ad.constant(v.reshape(2, 3))).value)
    g = grad_of(build, x)
    fd = central_diff(f, x.ravel()).reshape(2, 3)
    np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8)
