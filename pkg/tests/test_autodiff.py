import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rdm import autodiff as ad
from rdm.autodiff import Tape, Tensor, finite_diff_check, no_grad


def leaf(x):
    return Tensor(np.asarray(x, dtype=float), requires_grad=True)


def grad_of(fn, *xs):
    with Tape() as tape:
        out = fn(*xs)
    return tape.gradients(out, list(xs))


# --- forward values ---------------------------------------------------------


def test_relu_values():
    np.testing.assert_array_equal(ad.forward_op("relu", Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])


def test_matmul_scalar():
    out = ad.forward_op("matmul", Tensor([[3.0]]), Tensor([[4.0]]))
    assert out.data.tolist() == [[12.0]]


def test_sum_exp_zero():
    assert ad.sum_(ad.exp(Tensor([0.0, 0.0]))).item() == 2.0


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ad.ShapeError, match="matmul.*(2, 3).*(2, 3)"):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_no_recording_without_tracked_inputs():
    with Tape() as tape:
        ad.exp(Tensor([1.0]))
    assert tape.nodes == []


def test_no_grad_suppresses_recording():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        with no_grad():
            ad.square(x)
    assert tape.nodes == []


def test_softmax_cross_entropy_uniform_logits():
    losses = ad.softmax_cross_entropy(Tensor(np.zeros((3, 2))), np.array([0, 1, 1]))
    np.testing.assert_allclose(losses.data, np.log(2.0), rtol=0, atol=1e-15)


def test_check_finite_raises():
    with pytest.raises(ad.NonFiniteError):
        ad.check_finite(Tensor([1.0, np.nan]), "x")


# --- backward ---------------------------------------------------------------


def test_backward_square():
    (g,) = grad_of(lambda x: ad.square(x).sum(), leaf(3.0))
    assert g == 6.0


def test_backward_linear_map():
    w = Tensor(np.eye(2))
    (g,) = grad_of(lambda v: ad.matmul(w, v).sum(), leaf([1.0, 2.0]))
    np.testing.assert_array_equal(g, [1.0, 1.0])


def test_backward_sigmoid_at_zero():
    (g,) = grad_of(lambda x: ad.sigmoid(x).sum(), leaf(0.0))
    assert g == 0.25


def test_backward_rejects_non_scalar_root():
    x = leaf([1.0, 2.0])
    with Tape() as tape:
        y = ad.square(x)
    with pytest.raises(ad.ShapeError):
        tape.backward(y)


def test_untouched_leaf_gets_zero_gradient():
    x, unused = leaf([1.0, 2.0]), leaf(np.ones((2, 2)))
    gx, gu = grad_of(lambda a, b: ad.square(a).sum(), x, unused)
    np.testing.assert_array_equal(gx, [2.0, 4.0])
    np.testing.assert_array_equal(gu, np.zeros((2, 2)))


def test_two_backward_passes_bit_identical():
    rng = np.random.default_rng(0)
    w, x = leaf(rng.normal(size=(4, 3))), Tensor(rng.normal(size=(5, 4)))
    with Tape() as tape:
        loss = ad.softmax_cross_entropy(ad.matmul(x, w), np.array([0, 1, 2, 0, 1])).mean()
    a = tape.backward(loss)[w.id]
    b = tape.backward(loss)[w.id]
    assert a.tobytes() == b.tobytes()


def test_tape_topological_order():
    x = leaf([0.5, 1.5])
    with Tape() as tape:
        ad.log(ad.exp(ad.square(x)) + 1.0).sum()
    seen = {x.id}
    for node in tape.nodes:
        assert all(i.id in seen for i in node.inputs if i.requires_grad)
        seen.add(node.output.id)


def test_backward_is_linear():
    rng = np.random.default_rng(1)
    x = leaf(rng.normal(size=6))
    f = lambda t: ad.sigmoid(t).sum()
    g = lambda t: ad.square(t).mean()
    (gf,) = grad_of(f, x)
    (gg,) = grad_of(g, x)
    (gc,) = grad_of(lambda t: f(t) * 2.5 + g(t) * -0.75, x)
    np.testing.assert_allclose(gc, 2.5 * gf - 0.75 * gg, rtol=0, atol=1e-12)


# --- primitives vs central differences ---------------------------------------


UNARY = {
    "relu": lambda t: ad.relu(t),
    "sigmoid": lambda t: ad.sigmoid(t),
    "exp": lambda t: ad.exp(t),
    "log": lambda t: ad.log(ad.exp(t) + 1.0),
    "square": lambda t: ad.square(t),
    "softmax": lambda t: ad.softmax(ad.reshape(t, (2, 3))),
    "reshape": lambda t: ad.reshape(t, (3, 2)),
    "take": lambda t: ad.take(t, np.array([0, 0, 5, 2])),
    "broadcast": lambda t: ad.broadcast_to(ad.reshape(t, (1, 6)), (3, 6)),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_primitive_gradients(name):
    rng = np.random.default_rng(sorted(UNARY).index(name))
    x = rng.normal(size=6)
    x[np.abs(x) < 0.05] += 0.2  # keep relu away from its kink
    p = leaf(x)
    weights = Tensor(rng.normal(size=UNARY[name](Tensor(x)).shape))
    err = finite_diff_check(lambda: ad.mul(UNARY[name](p), weights).sum(), [p], eps=1e-6)
    assert err < 1e-6


BINARY = {
    "add": ad.add,
    "sub": ad.sub,
    "mul": ad.mul,
    "div": lambda a, b: ad.div(a, ad.exp(b)),
    "matmul": lambda a, b: ad.matmul(ad.reshape(a, (2, 3)), ad.reshape(b, (3, 2))),
    "matvec": lambda a, b: ad.matmul(ad.reshape(a, (3, 2)), ad.take(b, np.array([1, 4]))),
    "concat": lambda a, b: ad.concat([a, b]),
}


@pytest.mark.parametrize("name", sorted(BINARY))
def test_binary_primitive_gradients(name):
    rng = np.random.default_rng(7)
    a, b = leaf(rng.normal(size=6)), leaf(rng.normal(size=6))
    shape = BINARY[name](Tensor(a.data), Tensor(b.data)).shape
    weights = Tensor(rng.normal(size=shape))
    err = finite_diff_check(lambda: ad.mul(BINARY[name](a, b), weights).sum(), [a, b])
    assert err < 1e-6


def test_broadcast_add_gradient_sums_over_rows():
    bias = leaf([1.0, -1.0])
    (g,) = grad_of(lambda b: ad.add(Tensor(np.ones((4, 2))), b).sum(), bias)
    np.testing.assert_array_equal(g, [4.0, 4.0])


def test_cross_entropy_and_reductions_gradient():
    rng = np.random.default_rng(3)
    z = leaf(rng.normal(size=(5, 3)))
    y = np.array([0, 2, 1, 1, 0])
    err = finite_diff_check(lambda: ad.mean(ad.softmax_cross_entropy(z, y)) + ad.sum_(z, axis=1).mean(), [z])
    assert err < 1e-6


def test_dropout_rate_zero_is_identity_and_masks_are_seeded():
    x = Tensor(np.ones((50, 40)))
    assert ad.dropout(x, 0.0, (1, 2, 3)) is x
    a = ad.dropout(x, 0.5, (1, 2, 3)).data
    b = ad.dropout(x, 0.5, (1, 2, 3)).data
    c = ad.dropout(x, 0.5, (1, 2, 4)).data
    assert a.tobytes() == b.tobytes()
    assert a.tobytes() != c.tobytes()
    assert set(np.unique(a)) <= {0.0, 2.0}
    assert abs(a.mean() - 1.0) < 0.1


def test_dropout_gradient_matches_mask():
    x = leaf(np.arange(12.0).reshape(3, 4))
    out = ad.dropout(Tensor(x.data), 0.3, 9).data
    (g,) = grad_of(lambda t: ad.dropout(t, 0.3, 9).sum(), x)
    np.testing.assert_allclose(g * x.data, out)


# --- finite_diff_check itself ------------------------------------------------


def test_fd_check_quadratic():
    w = leaf([1.0, 2.0, 3.0])
    assert finite_diff_check(lambda: ad.square(w).sum(), [w], eps=1e-5) < 1e-6


def test_fd_check_constant_loss():
    w = leaf([1.0, 2.0])
    assert finite_diff_check(lambda: ad.mul(w, 0.0).sum() + 4.0, [w]) == 0.0


def test_fd_check_restores_parameters():
    w = leaf([0.3, -0.7])
    before = w.data.copy()
    finite_diff_check(lambda: ad.sigmoid(w).sum(), [w])
    assert w.data.tobytes() == before.tobytes()


def test_fd_check_detects_wrong_gradient_and_tol():
    w = leaf([1.0, 2.0])

    def broken():
        # value is w^2 but the recorded graph only knows about w
        t = ad.mul(w, 1.0)
        return ad.sum_(t) + float(np.sum(w.data ** 2) - np.sum(w.data))

    assert finite_diff_check(broken, [w]) > 0.1
    with pytest.raises(ad.GradientCheckError):
        finite_diff_check(broken, [w], tol=1e-4)


def test_fd_check_non_finite_probe():
    w = leaf([1e-7])
    with pytest.raises(ad.NonFiniteError), np.errstate(invalid="ignore"):
        finite_diff_check(lambda: ad.log(w).sum(), [w], eps=1e-6)


def test_fd_check_rejects_bad_eps():
    w = leaf([1.0])
    with pytest.raises(ValueError):
        finite_diff_check(lambda: w.sum(), [w], eps=0.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=2, max_size=8))
def test_composite_gradient_property(values):
    x = leaf(values)
    err = finite_diff_check(lambda: ad.log(ad.sigmoid(x) + 0.5).sum() + ad.square(x).mean(), [x])
    assert err < 1e-6
