import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from procplan import autodiff as ad
from procplan.autodiff import Tensor

finite = st.floats(-2.0, 2.0, allow_nan=False, width=64)


def arrays(shape):
    return hnp.arrays(np.float64, shape, elements=finite)


def fd_check(fn, *inputs, tol=1e-4):
    ts = [Tensor(x.copy(), requires_grad=True) for x in inputs]
    errs = ad.gradcheck(lambda: fn(*ts), {str(i): t for i, t in enumerate(ts)})
    assert max(errs.values()) < tol, errs


UNARY = {
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "exp": ad.exp,
    "expm1": ad.expm1,
    "square": ad.square,
    "log_sigmoid": ad.log_sigmoid,
    "softmax": lambda x: ad.softmax(x),
    "log_softmax": lambda x: ad.log_softmax(x),
    "neg": ad.neg,
}


@pytest.mark.parametrize("name", sorted(UNARY))
@settings(max_examples=25, deadline=None)
@given(x=arrays((3, 4)), w=arrays((3, 4)))
def test_unary_ops_match_finite_differences(name, x, w):
    fd_check(lambda t: ad.sum(UNARY[name](t) * w), x)


@settings(max_examples=25, deadline=None)
@given(x=hnp.arrays(np.float64, (3, 4), elements=st.floats(0.1, 3.0)), w=arrays((3, 4)))
def test_log_matches_finite_differences(x, w):
    fd_check(lambda t: ad.sum(ad.log(t) * w), x)


@settings(max_examples=25, deadline=None)
@given(a=arrays((3, 4)), b=arrays((4, 2)), c=arrays((2,)), w=arrays((3, 2)))
def test_matmul_bias_chain(a, b, c, w):
    fd_check(lambda A, B, C: ad.sum(ad.tanh(ad.matmul(A, B) + C) * w), a, b, c)


@settings(max_examples=25, deadline=None)
@given(a=arrays((2, 3)), b=arrays((2, 2)), w=arrays((2, 5)))
def test_concat_and_slices(a, b, w):
    def f(A, B):
        x = ad.concat([A, B])
        return ad.sum(x * w) + ad.sum(ad.square(ad.slice_cols(x, 1, 4)))
    fd_check(f, a, b)


@settings(max_examples=25, deadline=None)
@given(a=arrays((4, 3)))
def test_take_reshape_expand_mean(a):
    def f(A):
        rows = ad.take(A, np.array([0, 2, 2]))
        flat = ad.reshape(rows, (9,))
        return ad.mean(ad.square(flat)) + ad.sum(ad.expand_rows(ad.sum(A, axis=0), 2) * 0.5)
    fd_check(f, a)


@settings(max_examples=25, deadline=None)
@given(mu=arrays((3, 2)), lv=arrays((3, 2)), eps=arrays((3, 2)), w=arrays((3, 2)))
def test_reparameterize(mu, lv, eps, w):
    fd_check(lambda m, v: ad.sum(ad.reparameterize(m, v, eps) * w), mu, lv)


def test_clip_gradient_is_zero_outside_range():
    x = Tensor(np.array([-2.0, 0.0, 2.0]), requires_grad=True)
    ad.backward(ad.sum(ad.clip(x, -1.0, 1.0)))
    assert x.grad.tolist() == [0.0, 1.0, 0.0]


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([1.5]), requires_grad=True)
    y = x * x
    ad.backward(ad.sum(y * y))  # x**4
    assert x.grad[0] == pytest.approx(4 * 1.5 ** 3)


def test_backward_twice_gives_same_gradient():
    x = Tensor(np.array([0.3, -0.7]), requires_grad=True)
    loss = ad.sum(ad.tanh(x))
    ad.backward(loss)
    g1 = x.grad.copy()
    ad.backward(loss)
    np.testing.assert_array_equal(g1, x.grad)


def test_backward_needs_scalar_root():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.tanh(x))


def test_shape_mismatch_is_rejected():
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))


def test_softmax_is_stable_for_large_logits():
    p = ad.softmax(Tensor(np.array([[1000.0, 0.0, -1000.0]]))).data
    assert np.all(np.isfinite(p))
    assert p[0, 0] == pytest.approx(1.0)


def test_adam_first_step_moves_by_lr_times_sign():
    p = Tensor(np.array([1.0, -1.0, 0.5]), requires_grad=True)
    state = {}
    ad.adam_step([p], [np.array([0.2, -3.0, 1e-3])], state, lr=0.1, eps=1e-12)
    np.testing.assert_allclose(p.data, [0.9, -0.9, 0.4], atol=1e-9)


def test_adam_lr_zero_leaves_params_unchanged():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    before = p.data.copy()
    ad.adam_step([p], [np.array([1.0, -1.0])], {}, lr=0.0)
    np.testing.assert_array_equal(p.data, before)


def test_adam_skips_non_finite_gradients():
    p, q = Tensor(np.ones(2), requires_grad=True), Tensor(np.ones(2), requires_grad=True)
    skipped = ad.adam_step([p, q], [np.array([np.nan, 1.0]), np.array([1.0, 1.0])], {}, lr=0.1)
    assert skipped == [0]
    np.testing.assert_array_equal(p.data, [1.0, 1.0])
    assert np.all(q.data < 1.0)


def test_adam_minimises_a_quadratic():
    x = Tensor(np.array([3.0, -2.0]), requires_grad=True)
    opt = ad.Adam([x], lr=0.1)
    for _ in range(500):
        ad.backward(ad.sum(ad.square(x - 1.0)))
        opt.step()
    np.testing.assert_allclose(x.data, [1.0, 1.0], atol=1e-3)


def test_relative_error_definition():
    assert ad.relative_error([1.0, 0.0], [1.0, 0.0]) == 0.0
    assert ad.relative_error([3.0, 4.0], [0.0, 0.0]) == pytest.approx(1.0)
    # tiny vectors fall back to the absolute floor
    assert ad.relative_error([1e-9], [0.0]) < 1e-3


def test_split_rng_is_deterministic():
    a = [g.random() for g in ad.split_rng(ad.make_rng(5), 3)]
    b = [g.random() for g in ad.split_rng(ad.make_rng(5), 3)]
    assert a == b and len(set(a)) == 3
