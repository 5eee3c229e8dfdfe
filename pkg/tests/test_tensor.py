import threading

import numpy as np
import pytest

from cmi_tune import tensor as tn
from cmi_tune.tensor import Tensor, backward, finite_diff_check


def leaf(x):
    return Tensor(x, requires_grad=True)


# -- forward examples ---------------------------------------------------------

def test_identity_matmul():
    m = np.arange(6.0).reshape(2, 3)
    out = tn.matmul(Tensor(np.eye(2)), Tensor(m))
    assert np.array_equal(out.data, m)


def test_softmax_uniform_and_overflow_safe():
    np.testing.assert_allclose(tn.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)
    big = tn.softmax(Tensor([1000.0, 0.0])).data
    assert np.all(np.isfinite(big))
    assert big[0] == pytest.approx(1.0) and big[1] == pytest.approx(0.0, abs=1e-300)


def test_sum_gradient_is_ones():
    x = leaf(np.random.default_rng(0).normal(size=(3, 4, 2)))
    backward(x.sum())
    assert np.array_equal(x.grad, np.ones((3, 4, 2)))


def test_mean_square_gradient():
    x = leaf([1.0, 2.0, 3.0])
    backward((x * x).mean())
    np.testing.assert_allclose(x.grad, [2 / 3, 4 / 3, 2.0], rtol=1e-15)


def test_log_clamps_and_zeroes_gradient():
    x = leaf([0.0, 1.0])
    y = tn.log(x)
    assert y.data[0] == pytest.approx(np.log(tn.LOG_EPS))
    backward(y.sum())
    assert x.grad[0] == 0.0 and x.grad[1] == 1.0


def test_constant_function_passes_with_zero_error():
    x = leaf(np.ones(4))
    rep = finite_diff_check(lambda: Tensor(3.0) + x.sum() * 0.0, [x])
    assert rep.passed and rep.max_rel_error == 0.0


def test_wrong_gradient_is_caught():
    x = leaf(np.random.default_rng(2).normal(size=4) + 3.0)
    # The detached copy hides half of d(x^2)/dx from backprop.
    rep = finite_diff_check(lambda: (x * Tensor(x.data.copy())).sum(), [x])
    assert not rep.passed and rep.max_rel_error > 0.4


def test_roundoff_floor_scales_with_loss():
    x = leaf(np.array([1e-3, -2e-3]))
    rep = finite_diff_check(lambda: (x * 1e-9).sum() + 1e3, [x])
    assert rep.passed


def test_kl_to_fixed_q_matches_finite_differences():
    z = leaf(np.random.default_rng(3).normal(size=5))
    q = np.random.default_rng(4).dirichlet(np.ones(5))

    def f():
        p = tn.softmax(z)
        return (p * (tn.log(p) - tn.log(Tensor(q)))).sum()

    assert finite_diff_check(f, [z], tol=1e-6).passed


# -- graph semantics ----------------------------------------------------------

def test_second_backward_raises():
    x = leaf([1.0, 2.0])
    loss = (x * x).sum()
    backward(loss)
    with pytest.raises(tn.GraphError):
        backward(loss)


def test_non_scalar_loss_rejected():
    with pytest.raises(tn.GraphError):
        backward(leaf([1.0, 2.0]) * 2.0)


def test_leaf_gradients_accumulate():
    x = leaf([1.0, -1.0])
    backward((x * 3.0).sum())
    backward((x * 3.0).sum())
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])


def test_shared_subexpression_visited_once():
    x = leaf([2.0])
    y = x * x
    backward((y + y).sum())
    np.testing.assert_array_equal(x.grad, [8.0])


def test_non_finite_output_raises():
    with pytest.raises(tn.NumericError):
        tn.reciprocal(leaf([0.0]))


def test_shape_errors():
    with pytest.raises(tn.ShapeError):
        tn.matmul(leaf(np.ones((2, 3))), leaf(np.ones((2, 3))))
    with pytest.raises(tn.ShapeError):
        tn.add(leaf(np.ones(3)), leaf(np.ones(4)))
    with pytest.raises(tn.ShapeError):
        leaf(np.ones(6)).reshape(4, 2)


def test_no_grad_builds_no_graph():
    x = leaf([1.0])
    with tn.no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._parents == ()


def test_no_grad_is_thread_local():
    seen = []
    with tn.no_grad():
        t = threading.Thread(target=lambda: seen.append(tn.is_grad_enabled()))
        t.start()
        t.join()
    assert seen == [True]


def test_fd_step_bounds_and_determinism_guard():
    x = leaf([1.0])
    with pytest.raises(ValueError):
        finite_diff_check(lambda: x.sum(), [x], h=1e-2)
    calls = iter(range(10))
    with pytest.raises(tn.DeterminismError):
        finite_diff_check(lambda: x.sum() + float(next(calls)), [x])


def test_fixed_order_sum_independent_of_jobs():
    items = list(range(50))
    f = lambda i: np.float64(1.0) / (i + 1) ** 1.5  # noqa: E731
    serial = tn.fixed_order_sum(tn.parallel_map(f, items, jobs=1))
    threaded = tn.fixed_order_sum(tn.parallel_map(f, items, jobs=4))
    assert serial == threaded


def test_float32_storage_flag():
    try:
        tn.set_default_dtype(np.float32)
        assert Tensor([1.0]).data.dtype == np.float32
    finally:
        tn.set_default_dtype(np.float64)
    assert Tensor([1.0]).data.dtype == np.float64


# -- every op against central differences, many seeds -------------------------

def _op_cases(rng):
    a = leaf(rng.normal(size=(3, 4)))
    b = leaf(rng.normal(size=(3, 4)))
    row = leaf(rng.normal(size=(4,)))
    pos = leaf(rng.uniform(0.5, 2.0, size=(3, 4)))
    m = leaf(rng.normal(size=(2, 4, 5)))
    w = leaf(rng.normal(size=(5, 3)))
    g = leaf(rng.uniform(0.5, 1.5, size=(4,)))
    weights = rng.normal(size=(3, 4))
    return {
        "add_broadcast": (lambda: ((a + row) * weights).sum(), [a, row]),
        "sub": (lambda: ((a - b) * weights).sum(), [a, b]),
        "mul": (lambda: (a * b * weights).sum(), [a, b]),
        "div": (lambda: ((a / pos) * weights).sum(), [a, pos]),
        "exp": (lambda: (tn.exp(a) * weights).sum(), [a]),
        "log": (lambda: (tn.log(pos) * weights).sum(), [pos]),
        "gelu": (lambda: (tn.gelu(a) * weights).sum(), [a]),
        "clamp": (lambda: (tn.clamp(a * 0.1, -0.5, 0.5) * weights).sum(), [a]),
        "softmax": (lambda: (tn.softmax(a) * weights).sum(), [a]),
        "layer_norm": (lambda: (tn.layer_norm(a, g, row) * weights).sum(), [a, g, row]),
        "matmul_batched": (lambda: (m @ w).sum(axis=1).mean(), [m, w]),
        "transpose": (lambda: (a.T @ b).sum(), [a, b]),
        "reshape": (lambda: (a.reshape(2, 6) * weights.reshape(2, 6)).sum(), [a]),
        "slice": (lambda: (a[1:, ::2] * weights[1:, ::2]).sum(), [a]),
        "gather": (lambda: (a[[0, 2, 0]] * weights).sum(), [a]),
        "concat": (lambda: (tn.concat([a, b], axis=1) * np.tile(weights, 2)).sum(), [a, b]),
        "mean_axis": (lambda: (a.mean(axis=0) * row).sum(), [a, row]),
    }


OPS = sorted(_op_cases(np.random.default_rng(0)))


@pytest.mark.parametrize("op", OPS)
def test_op_gradients_match_finite_differences(op):
    for seed in range(100):
        f, params = _op_cases(np.random.default_rng(seed))[op]
        rep = finite_diff_check(f, params, tol=1e-5, max_coords=6, seed=seed)
        assert rep.passed, f"{op} seed {seed}: rel error {rep.max_rel_error:.2e}"
