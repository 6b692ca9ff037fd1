import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from laurel import tensor as T
from laurel.tensor import (
    GradientError,
    ShapeError,
    Tape,
    Tensor,
    add,
    backward,
    cross_entropy,
    finite_diff_grad,
    matmul,
    mul,
    relu,
    scale,
    sigmoid,
    softmax_lastaxis,
    stack,
    take,
    transpose,
    tsum,
)


def triple_loop(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = [[0.0] * n for _ in range(m)]
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += float(a[i, p]) * float(b[p, j])
            out[i][j] = s
    return np.array(out)


def rel_err(a, n):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)


# -- matmul -------------------------------------------------------------------


def test_matmul_identity(rng):
    M = rng.standard_normal((3, 3))
    assert np.array_equal(matmul(Tensor(np.eye(3)), Tensor(M)).data, M)


def test_matmul_zeros(rng):
    out = matmul(Tensor(np.zeros((2, 3))), Tensor(rng.standard_normal((3, 4))))
    assert out.shape == (2, 4)
    assert not out.data.any()


def test_matmul_matches_triple_loop_exactly():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((3, 2))
    assert np.array_equal(matmul(Tensor(a), Tensor(b)).data, triple_loop(a, b))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**32 - 1))
def test_matmul_triple_loop_property(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(-1, 1, (m, k)), rng.uniform(-1, 1, (k, n))
    assert np.array_equal(matmul(Tensor(a), Tensor(b)).data, triple_loop(a, b))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_only_records_when_grad_enabled():
    a = Tensor(np.ones((2, 2)))
    assert matmul(a, a).node is None
    b = Tensor(np.ones((2, 2)), requires_grad=True)
    assert matmul(a, b).node is not None


# -- elementwise ----------------------------------------------------------------


def test_softmax_symmetric_pair():
    assert np.array_equal(softmax_lastaxis(Tensor([0.0, 0.0])).data, [0.5, 0.5])


def test_relu_values():
    assert np.array_equal(relu(Tensor([-1.0, 2.0])).data, [0.0, 2.0])


def test_relu_gradient_at_zero_is_zero():
    x = Tensor([0.0, 1.0, -1.0], requires_grad=True)
    g = backward(tsum(relu(x)))[x]
    assert np.array_equal(g, [0.0, 1.0, 0.0])


@pytest.mark.parametrize("c", [2, 3, 10])
def test_cross_entropy_uniform_logits(c):
    logits = Tensor(np.full((4, c), 0.37))
    assert cross_entropy(logits, [0, 1, c - 1, 1]).item() == pytest.approx(np.log(c), abs=1e-14)


def test_cross_entropy_label_range():
    with pytest.raises(ValueError, match="labels"):
        cross_entropy(Tensor(np.zeros((2, 3))), [0, 3])


def test_cross_entropy_stable_for_large_logits():
    loss = cross_entropy(Tensor([[1000.0, 0.0], [0.0, 1000.0]]), [0, 0])
    assert loss.item() == pytest.approx(500.0)


def test_add_shape_rules():
    m = Tensor(np.zeros((2, 3)))
    assert add(m, Tensor(np.ones(3))).shape == (2, 3)
    assert add(m, Tensor(2.0)).shape == (2, 3)
    assert add(Tensor(2.0), m).shape == (2, 3)
    with pytest.raises(ShapeError):
        add(m, Tensor(np.ones(2)))
    with pytest.raises(ShapeError):
        add(m, Tensor(np.ones((3, 2))))


def test_mul_shape_rules():
    with pytest.raises(ShapeError):
        mul(Tensor(np.ones((2, 3))), Tensor(np.ones(3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_softmax_rows_are_distributions(m, n, seed):
    x = np.random.default_rng(seed).uniform(-30, 30, (m, n))
    p = softmax_lastaxis(Tensor(x)).data
    assert np.all(np.abs(p.sum(axis=1) - 1.0) < 1e-12)
    assert np.all((p >= 0) & (p <= 1))
    if n > 1:
        # strictly inside (0, 1) whenever float64 can represent it
        moderate = np.ptp(x, axis=1) < 30
        assert np.all((p[moderate] > 0) & (p[moderate] < 1))


# -- backward -------------------------------------------------------------------


def test_backward_sum_gives_ones(rng):
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    assert np.array_equal(backward(tsum(x))[x], np.ones((3, 4)))


def test_backward_half_square_gives_x(rng):
    x = Tensor(rng.standard_normal((2, 5)), requires_grad=True)
    loss = scale(tsum(mul(x, x)), 0.5)
    assert np.allclose(backward(loss)[x], x.data, rtol=0, atol=1e-15)


def test_backward_accumulates_shared_leaf():
    x = Tensor(3.0, requires_grad=True)
    y = mul(x, x)  # used twice below
    g = backward(add(y, y))[x]
    assert float(g) == 12.0
    assert float(x.grad) == 12.0


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GradientError, match="scalar"):
        backward(relu(x))


def test_backward_rejects_detached_loss():
    with pytest.raises(GradientError, match="detached"):
        backward(tsum(Tensor(np.ones(3))))


def test_tape_is_topologically_ordered(rng):
    w = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
    b = Tensor(np.zeros(3), requires_grad=True)
    with Tape() as tape:
        h = relu(add(matmul(Tensor(rng.standard_normal((5, 4))), w), b))
        loss = cross_entropy(h, [0, 1, 2, 0, 1])
    assert len(tape) >= 4
    position = {n.id: k for k, n in enumerate(tape.nodes)}
    for n in tape.nodes:
        for p in n.parents:
            if p.node is not None:
                assert p.node.id < n.id
                assert position[p.node.id] < position[n.id]
    grads = backward(loss)
    assert grads[w].shape == w.shape and grads[b].shape == b.shape


def test_tapes_are_thread_isolated():
    import threading

    seen = {}

    def work(k):
        with Tape() as tape:
            x = Tensor(np.ones(2), requires_grad=True)
            for _ in range(k):
                x = scale(x, 2.0)
        seen[k] = len(tape)

    threads = [threading.Thread(target=work, args=(k,)) for k in (3, 7)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert seen == {3: 3, 7: 7}


# -- finite differences -----------------------------------------------------------


def test_finite_diff_square():
    g = finite_diff_grad(lambda p: p[0] ** 2, np.array([3.0]), 1e-5)
    assert abs(g[0] - 6.0) < 1e-9


def test_finite_diff_constant():
    assert not finite_diff_grad(lambda p: 4.2, np.arange(5.0), 1e-5).any()


def test_finite_diff_rejects_non_finite():
    with pytest.raises(GradientError), np.errstate(invalid="ignore"):
        finite_diff_grad(lambda p: np.log(p[0]), np.array([0.0]), 1e-5)


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff_grad(lambda p: 0.0, np.zeros(1), 0.0)


def _check_op(build_loss, shapes, seed=0):
    """Compare backward against central differences for a loss of several leaves."""
    rng = np.random.default_rng(seed)
    arrays = [rng.uniform(-1, 1, s) for s in shapes]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    grads = backward(build_loss(*leaves))
    analytic = np.concatenate([grads[t].ravel() for t in leaves])
    sizes = [a.size for a in arrays]

    def f(vec):
        parts, off = [], 0
        for a, n in zip(arrays, sizes):
            parts.append(Tensor(vec[off:off + n].reshape(a.shape)))
            off += n
        return build_loss(*parts).item()

    flat = np.concatenate([a.ravel() for a in arrays])
    idx = rng.choice(flat.size, min(flat.size, 25), replace=False)
    numeric = finite_diff_grad(f, flat, 1e-5, indices=idx)
    assert rel_err(analytic[idx], numeric[idx]).max() < 1e-6


# weights keep each loss non-trivially dependent on every element
_W34 = np.random.default_rng(99).uniform(-1, 1, (3, 4))
_W4 = np.random.default_rng(98).uniform(-1, 1, 4)


@pytest.mark.parametrize("name,loss,shapes", [
    ("matmul", lambda a, b: tsum(mul(matmul(a, b), Tensor(_W34))), [(3, 5), (5, 4)]),
    ("transpose", lambda a: tsum(mul(transpose(a), Tensor(_W34))), [(4, 3)]),
    ("add_bias", lambda a, b: tsum(mul(add(a, b), Tensor(_W34))), [(3, 4), (4,)]),
    ("add_scalar", lambda a, s: tsum(mul(add(a, s), Tensor(_W34))), [(3, 4), ()]),
    ("mul", lambda a, b: tsum(mul(mul(a, b), Tensor(_W34))), [(3, 4), (3, 4)]),
    ("mul_scalar", lambda a, s: tsum(mul(mul(a, s), Tensor(_W34))), [(3, 4), ()]),
    ("sigmoid", lambda a: tsum(mul(sigmoid(a), Tensor(_W34))), [(3, 4)]),
    ("softmax", lambda a: tsum(mul(softmax_lastaxis(a), Tensor(_W34))), [(3, 4)]),
    ("softmax_vec", lambda a: tsum(mul(softmax_lastaxis(a), Tensor(_W4))), [(4,)]),
    ("cross_entropy", lambda a: cross_entropy(a, [3, 0, 2]), [(3, 4)]),
    ("stack_take", lambda a, b: mul(take(softmax_lastaxis(stack([a, b])), 0), Tensor(2.5)), [(), ()]),
    ("relu", lambda a: tsum(mul(relu(add(a, Tensor(0.05))), Tensor(_W34))), [(3, 4)]),
])
def test_op_gradients_match_finite_differences(name, loss, shapes):
    _check_op(loss, shapes)


def test_forward_is_bit_reproducible(rng):
    a, b = rng.standard_normal((6, 7)), rng.standard_normal((7, 5))
    outs = [cross_entropy(relu(matmul(Tensor(a), Tensor(b))), [0, 1, 2, 3, 4, 0]).item()
            for _ in range(3)]
    assert outs[0] == outs[1] == outs[2]


def test_count_ops_counts_matmul_and_add():
    with T.count_ops() as c:
        add(matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4)))), Tensor(np.ones(4)))
    assert c.mult_adds == 2 * 3 * 4 + 2 * 4
