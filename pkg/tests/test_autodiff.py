import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from promptcl import autodiff as ad
from promptcl.autodiff import DimensionError, Tensor, backward_all, finite_difference_check
from promptcl.optim import AdamState, adam_step


def T(x, grad=True):
    return Tensor(np.asarray(x, dtype=float), requires_grad=grad)


def test_matmul_identity_and_dot():
    assert np.array_equal((T([[1, 0], [0, 1]]) @ T([[2, 3], [4, 5]])).data, [[2, 3], [4, 5]])
    assert (T([[1, 2]]) @ T([[3], [4]])).data.tolist() == [[11]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T(np.ones((2, 3))) @ T(np.ones((2, 3)))


def test_matmul_gradient_fd(rng):
    a, b = T(rng.normal(size=(3, 4))), T(rng.normal(size=(4, 2)))
    w = rng.normal(size=(3, 2))
    rep = finite_difference_check(lambda: ((a @ b) * Tensor(w)).sum(), [a, b], tol=1e-6)
    assert rep.passed, rep.failures


def test_softmax_symmetry_and_overflow():
    assert np.allclose(ad.softmax_rows(T([[0.0, 0.0]])).data, [[0.5, 0.5]])
    out = ad.softmax_rows(T([[1000.0, 1000.0]])).data
    assert np.all(np.isfinite(out)) and np.allclose(out, [[0.5, 0.5]])


def test_softmax_jacobian_fd(rng):
    x = T(rng.normal(size=(2, 3)))
    w = rng.normal(size=(2, 3))
    assert finite_difference_check(lambda: (ad.softmax_rows(x) * Tensor(w)).sum(), [x], tol=1e-6).passed


def test_layer_norm_examples(rng):
    one, zero = T(np.ones(2), False), T(np.zeros(2), False)
    assert np.allclose(ad.layer_norm(T([[3.0, 3.0]]), one, zero).data, 0.0)
    assert np.allclose(ad.layer_norm(T([[1.0, -1.0]]), one, zero, eps=1e-12).data, [[1.0, -1.0]])
    x, g, b = T(rng.normal(size=(2, 4))), T(rng.normal(size=4)), T(rng.normal(size=4))
    w = rng.normal(size=(2, 4))
    assert finite_difference_check(lambda: (ad.layer_norm(x, g, b) * Tensor(w)).sum(), [x, g, b], tol=1e-5).passed


def test_gelu_examples(rng):
    assert ad.gelu(T([0.0])).data[0] == 0.0
    assert abs(ad.gelu(T([10.0])).data[0] - 10.0) < 1e-6
    x = T(rng.normal(size=7) * 2)
    assert finite_difference_check(lambda: ad.gelu(x).sum(), [x], tol=1e-6).passed


def test_gelu_constants():
    assert ad.GELU_A == 0.044715
    assert math.isclose(ad.GELU_C, math.sqrt(2 / math.pi))


def test_cross_entropy_examples(rng):
    assert math.isclose(ad.cross_entropy_mean(T([[0.0, 0.0]]), [0]).item(), math.log(2), rel_tol=1e-12)
    assert abs(ad.cross_entropy_mean(T([[10.0, -10.0]]), [0]).item() - 2.06e-9) < 1e-10
    logits = T(rng.normal(size=(4, 3)))
    assert finite_difference_check(lambda: ad.cross_entropy_mean(logits, [0, 2, 1, 1]), [logits], tol=1e-6).passed


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError, match="5"):
        ad.cross_entropy_mean(T([[0.0, 0.0]]), [5])


def test_backward_sum_all_ones_and_disconnected():
    x, y = T(np.ones((2, 2))), T(np.ones(3))
    _ = y * 2.0
    backward_all(x.sum())
    assert np.array_equal(x.grad, np.ones((2, 2)))
    assert y.grad is None or not np.any(y.grad)


def test_backward_rejects_non_scalar():
    with pytest.raises(DimensionError):
        backward_all(T(np.ones(3)) * 2.0)


def test_no_grad_param_never_accumulates():
    frozen, live = T(np.ones(3), grad=False), T(np.ones(3))
    backward_all((frozen * live).sum())
    assert frozen.grad is None
    assert np.array_equal(live.grad, np.ones(3))


def test_graph_cleared_after_backward_and_params_survive():
    x = T(np.arange(3.0))
    loss = (x * x).sum()
    assert len(ad.current_graph()) > 0
    backward_all(loss)
    assert len(ad.current_graph()) == 0
    assert np.array_equal(x.data, np.arange(3.0))


def test_graph_topological_and_visited_once():
    x = T(np.ones(2))
    y = x * 3.0
    z = y + y  # y feeds one node twice
    loss = z.sum()
    nodes = ad.current_graph().nodes
    for node in nodes:
        for inp in node.inputs:
            assert inp.node_id is None or inp.node_id < node.output.node_id
    backward_all(loss)
    assert np.array_equal(x.grad, [6.0, 6.0])


def test_gradient_accumulates_across_backward_calls():
    x = T(np.ones(2))
    backward_all((x * 2.0).sum())
    backward_all((x * 3.0).sum())
    assert np.array_equal(x.grad, [5.0, 5.0])


def test_no_grad_records_nothing():
    x = T(np.ones(2))
    with ad.no_grad():
        y = x * 2.0
    assert len(ad.current_graph()) == 0 and not y.requires_grad


def test_fd_quadratic_and_constant():
    x = T([3.0])
    rep = finite_difference_check(lambda: (x * x).sum(), [x])
    assert rep.passed and rep.worst < 1e-8
    c = T([1.0])
    rep = finite_difference_check(lambda: Tensor(np.array(2.0)), [c])
    assert rep.passed


def test_fd_flags_nan_with_location():
    x = T([1.0, -1.0])
    rep = finite_difference_check(lambda: (x * Tensor([np.nan, 1.0])).sum(), [x], names=["x"])
    assert not rep.passed
    assert any("x[(0,)]" in f for f in rep.failures)


def test_fd_restores_dtype_with_longdouble_oracle(rng):
    x = T(rng.normal(size=4))
    rep = finite_difference_check(lambda: ad.gelu(x).sum(), [x], oracle_dtype=np.longdouble)
    assert rep.passed and x.data.dtype == np.float64


def test_determinism_forward_and_grad(rng):
    data = rng.normal(size=(3, 4))

    def run():
        x = T(data)
        loss = ad.log_softmax_rows(x @ Tensor(np.ones((4, 2)))).sum()
        backward_all(loss)
        return loss.data.tobytes(), x.grad.tobytes()

    assert run() == run()


@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_matmul_grad_property(m, k, n, seed):
    r = np.random.default_rng(seed)
    a, b = T(r.normal(size=(m, k))), T(r.normal(size=(k, n)))
    g = r.normal(size=(m, n))
    ad.current_graph().clear()
    backward_all(((a @ b) * Tensor(g)).sum())
    assert np.allclose(a.grad, g @ b.data.T) and np.allclose(b.grad, a.data.T @ g)


@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_tensor_invariants_property(m, n, seed):
    r = np.random.default_rng(seed)
    x = T(r.normal(size=(m, n)))
    assert x.data.size == m * n and x.data.dtype == np.float64
    ad.current_graph().clear()
    backward_all(ad.softmax_rows(x).sum())
    assert x.grad.shape == x.shape
    # rows of a softmax sum to one, so the gradient of the total is zero
    assert np.allclose(x.grad, 0.0, atol=1e-12)


@given(st.integers(0, 2**31 - 1))
def test_broadcast_add_grad_property(seed):
    r = np.random.default_rng(seed)
    a, row = T(r.normal(size=(3, 4))), T(r.normal(size=4))
    ad.current_graph().clear()
    backward_all((a + row).sum())
    assert np.array_equal(row.grad, np.full(4, 3.0))


def test_adam_hand_step():
    p = T([0.0])
    p.grad = np.array([1.0])
    adam_step(AdamState(), [p], lr=0.1)
    assert math.isclose(p.data[0], -0.1, rel_tol=1e-6)
    assert p.grad is None


def test_adam_zero_grad_and_frozen():
    st_ = AdamState()
    p, frozen = T([1.0]), T([2.0], grad=False)
    frozen.grad = np.array([5.0])
    adam_step(st_, [p, frozen], lr=0.1)
    assert p.data[0] == 1.0 and frozen.data[0] == 2.0 and st_.step_count == 1
    assert id(frozen) not in st_.moments


def test_freeze_safety_through_step(rng):
    frozen = T(rng.normal(size=(2, 2)), grad=False)
    live = T(rng.normal(size=(2, 2)))
    before = frozen.data.tobytes()
    backward_all((frozen @ live).sum())
    adam_step(AdamState(), [frozen, live], lr=0.1)
    assert frozen.data.tobytes() == before
