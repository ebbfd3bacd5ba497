"""Tensor core: forward oracles, finite-difference gradient checks, tape rules."""

import numpy as np
import pytest

from fsad import numcore as nc
from fsad.errors import ContractError, DomainError, ShapeError
from fsad.numcore import GradTape, Tensor, backward, finite_diff_grad


def _rel_err(a, b, floor=1e-8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def _grad_check(build, tensors, rel_tol=1e-4, h=1e-5):
    """Compare tape gradients of scalar build(*tensors) against central differences."""
    for t in tensors:
        t.requires_grad = True
        t.zero_grad()
    with GradTape() as tape:
        loss = build(*tensors)
    backward(loss, tape)
    for i, t in enumerate(tensors):
        def f(x, i=i):
            args = [Tensor(u.data) for u in tensors]
            args[i] = x
            with nc.no_grad():
                return build(*args).item()
        fd = finite_diff_grad(f, t, h=h)
        assert t.grad is not None, f"missing grad for input {i}"
        err = _rel_err(t.grad, fd)
        assert err < rel_tol, f"input {i}: rel err {err:.3e}"


# ---------------------------------------------------------------------------
# frozen forward values

def test_softmax_known_row():
    out = nc.softmax_rows(Tensor([[0.0, np.log(3.0)]]))
    np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-12)


def test_softmax_rows_sum_to_one_and_shift_invariant():
    rng = np.random.default_rng(7)
    x = rng.normal(size=(5, 9))
    a = nc.softmax_rows(Tensor(x)).data
    b = nc.softmax_rows(Tensor(x + 123.456)).data
    np.testing.assert_allclose(a.sum(axis=-1), np.ones(5), atol=1e-9)
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_sigmoid_known_values():
    out = nc.sigmoid(Tensor([np.log(3.0), 0.0]))
    np.testing.assert_allclose(out.data, [0.75, 0.5], atol=1e-12)


def test_sigmoid_grad_at_zero():
    x = Tensor([0.0], requires_grad=True)
    with GradTape() as tape:
        y = nc.sum_all(nc.sigmoid(x))
    backward(y, tape)
    np.testing.assert_allclose(x.grad, [0.25], atol=1e-12)


def test_matmul_known_product():
    out = nc.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[0.0], [1.0]]))
    np.testing.assert_allclose(out.data, [[2.0], [4.0]], atol=0)


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(11)
    a = rng.normal(size=(5, 4))
    b = rng.normal(size=(4, 6))
    want = np.zeros((5, 6))
    for i in range(5):
        for j in range(6):
            for k in range(4):
                want[i, j] += a[i, k] * b[k, j]
    got = nc.matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(got, want, atol=1e-10)


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
    with pytest.raises(ShapeError):
        nc.matmul(Tensor(np.ones(3)), Tensor(np.ones((3, 2))))


def test_mean_axis_known():
    out = nc.mean_axis(Tensor([[1.0, 3.0], [5.0, 7.0]]), axis=0)
    np.testing.assert_allclose(out.data, [3.0, 5.0], atol=0)


def test_cosine_rows_known():
    out = nc.cosine_rows(Tensor([[1.0, 0.0]]), Tensor([1.0, 1.0]))
    np.testing.assert_allclose(out.data, [1.0 / np.sqrt(2.0)], atol=1e-12)


def test_cosine_rows_zero_row_is_finite():
    out = nc.cosine_rows(Tensor([[0.0, 0.0]]), Tensor([1.0, 1.0]))
    assert np.isfinite(out.data).all()
    np.testing.assert_allclose(out.data, [0.0], atol=0)


def test_layernorm_rows_moments():
    rng = np.random.default_rng(3)
    y = nc.layernorm_rows(Tensor(rng.normal(size=(4, 16)) * 3 + 2)).data
    np.testing.assert_allclose(y.mean(axis=-1), np.zeros(4), atol=1e-9)
    np.testing.assert_allclose(y.var(axis=-1), np.ones(4), atol=1e-4)


def test_concat_narrow_round_trip():
    a, b = Tensor(np.arange(6.0).reshape(2, 3)), Tensor(np.arange(9.0).reshape(3, 3))
    cat = nc.concat([a, b], axis=0)
    np.testing.assert_allclose(nc.narrow(cat, 0, 2, 3).data, b.data, atol=0)


# ---------------------------------------------------------------------------
# tape mechanics

def test_finite_diff_on_quadratic():
    grad = finite_diff_grad(lambda t: float((t.data ** 2).sum()), Tensor([3.0]))
    np.testing.assert_allclose(grad, [6.0], atol=1e-6)


def test_finite_diff_rejects_bad_step():
    with pytest.raises(DomainError):
        finite_diff_grad(lambda t: 0.0, Tensor([1.0]), h=0.0)


def test_backward_rejects_nonscalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with GradTape() as tape:
        y = nc.scale(x, 2.0)
    with pytest.raises(ContractError):
        backward(y, tape)


def test_double_use_accumulates():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with GradTape() as tape:
        y = nc.sum_all(nc.add(x, x))
    backward(y, tape)
    np.testing.assert_allclose(x.grad, [2.0, 2.0], atol=0)


def test_grad_accumulates_across_backward_calls():
    x = Tensor([1.0], requires_grad=True)
    for _ in range(2):
        with GradTape() as tape:
            y = nc.sum_all(nc.scale(x, 3.0))
        backward(y, tape)
    np.testing.assert_allclose(x.grad, [6.0], atol=0)


def test_no_grad_suppresses_recording():
    x = Tensor([1.0], requires_grad=True)
    with GradTape() as tape:
        with nc.no_grad():
            y = nc.scale(x, 2.0)
    assert len(tape) == 0 and not y.requires_grad


def test_no_recording_without_tape():
    y = nc.scale(Tensor([1.0], requires_grad=True), 2.0)
    assert not y.requires_grad


def test_constant_inputs_not_recorded():
    with GradTape() as tape:
        nc.add(Tensor([1.0]), Tensor([2.0]))
    assert len(tape) == 0


def test_corruption_hook_breaks_sigmoid_grad():
    nc.set_backward_corruption(True)
    try:
        x = Tensor([0.3], requires_grad=True)
        with GradTape() as tape:
            y = nc.sum_all(nc.sigmoid(x))
        backward(y, tape)
        fd = finite_diff_grad(lambda t: float(1.0 / (1.0 + np.exp(-t.data[0]))), Tensor([0.3]))
        assert _rel_err(x.grad, fd) > 1e-4
    finally:
        nc.set_backward_corruption(False)


# ---------------------------------------------------------------------------
# finite differences vs tape, per op

def _t(rng, *shape):
    return Tensor(rng.normal(size=shape) * 0.7)


def test_grads_elementwise_and_reductions():
    rng = np.random.default_rng(21)
    _grad_check(lambda a, b: nc.sum_all(nc.mul(nc.add(a, b), nc.sub(a, b))),
                [_t(rng, 3, 4), _t(rng, 3, 4)])
    _grad_check(lambda a: nc.sum_all(nc.mul(nc.mean_axis(a, 0), nc.mean_axis(a, 0))),
                [_t(rng, 4, 3)])
    _grad_check(lambda a, b: nc.sum_all(nc.mul(a, b)), [_t(rng, 3, 1), _t(rng, 3, 5)])


def test_grads_matmul_family():
    rng = np.random.default_rng(22)
    _grad_check(lambda a, b: nc.sum_all(nc.mul(nc.matmul(a, b), nc.matmul(a, b))),
                [_t(rng, 3, 4), _t(rng, 4, 2)])
    _grad_check(lambda a, b: nc.sum_all(nc.matmul(a, nc.transpose(b))),
                [_t(rng, 2, 3, 4), _t(rng, 2, 5, 4)])
    _grad_check(lambda a, b: nc.sum_all(nc.matmul(a, b)),
                [_t(rng, 4, 2, 3), _t(rng, 3, 5)])


def test_grads_shape_ops():
    rng = np.random.default_rng(23)
    _grad_check(lambda a: nc.sum_all(nc.mul(nc.reshape(a, (6, 2)), nc.reshape(a, (6, 2)))),
                [_t(rng, 3, 4)])
    _grad_check(lambda a, b: nc.sum_all(nc.mul(nc.concat([a, b], 0), nc.concat([a, b], 0))),
                [_t(rng, 2, 3), _t(rng, 4, 3)])
    _grad_check(lambda a: nc.sum_all(nc.mul(nc.narrow(a, 1, 1, 2), nc.narrow(a, 1, 0, 2))),
                [_t(rng, 3, 4)])


def test_grads_nonlinearities():
    rng = np.random.default_rng(24)
    _grad_check(lambda a: nc.sum_all(nc.mul(nc.sigmoid(a), a)), [_t(rng, 3, 4)])
    _grad_check(lambda a: nc.sum_all(nc.silu(a)), [_t(rng, 5)])
    _grad_check(lambda a: nc.sum_all(nc.exp(a)), [_t(rng, 3, 3)])
    _grad_check(lambda a: nc.sum_all(nc.log(nc.add(nc.mul(a, a), Tensor(np.ones((3, 3)))))),
                [_t(rng, 3, 3)])
    _grad_check(lambda a: nc.sum_all(nc.mul(nc.softmax_rows(a), a)), [_t(rng, 4, 5)])
    _grad_check(lambda a: nc.sum_all(nc.mul(nc.layernorm_rows(a), a)), [_t(rng, 3, 8)])


def test_grads_cosine_rows():
    rng = np.random.default_rng(25)
    a = Tensor(rng.normal(size=(4, 6)) + 0.5)
    b = Tensor(rng.normal(size=6) + 0.5)
    _grad_check(lambda u, v: nc.sum_all(nc.mul(nc.cosine_rows(u, v), nc.cosine_rows(u, v))),
                [a, b])


def test_grads_attention_all_inputs():
    rng = np.random.default_rng(26)
    q, k, v = _t(rng, 3, 8), _t(rng, 5, 8), _t(rng, 5, 8)
    _grad_check(lambda q, k, v: nc.sum_all(nc.mul(nc.attention(q, k, v, 2),
                                                  nc.attention(q, k, v, 2))),
                [q, k, v])


def test_grads_attention_batched_broadcast():
    rng = np.random.default_rng(27)
    q = _t(rng, 2, 3, 8)
    k, v = _t(rng, 5, 8), _t(rng, 5, 8)
    _grad_check(lambda q, k, v: nc.sum_all(nc.attention(q, k, v, 4)), [q, k, v])


def test_attention_matches_per_head_reference():
    rng = np.random.default_rng(28)
    q, k, v = rng.normal(size=(3, 8)), rng.normal(size=(6, 8)), rng.normal(size=(6, 8))
    heads, dh = 2, 4
    want = np.zeros((3, 8))
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = q[:, sl] @ k[:, sl].T / np.sqrt(dh)
        e = np.exp(s - s.max(axis=1, keepdims=True))
        w = e / e.sum(axis=1, keepdims=True)
        want[:, sl] = w @ v[:, sl]
    got = nc.attention(Tensor(q), Tensor(k), Tensor(v), heads).data
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_attention_shape_errors():
    q = Tensor(np.ones((2, 8)))
    with pytest.raises(ShapeError):
        nc.attention(q, Tensor(np.ones((3, 6))), Tensor(np.ones((3, 6))), 2)
    with pytest.raises(ShapeError):
        nc.attention(q, Tensor(np.ones((3, 8))), Tensor(np.ones((4, 8))), 2)
    with pytest.raises(ShapeError):
        nc.attention(q, Tensor(np.ones((3, 8))), Tensor(np.ones((3, 8))), 3)
