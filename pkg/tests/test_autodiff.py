import numpy as np
import pytest

from edgenet.autodiff import (
    Tape,
    add,
    concat,
    gather_rows,
    matmul,
    mul,
    scale,
    segment_reduce,
    shifted_softplus,
    shifted_softplus_array,
    sub,
    sum_all,
)
from edgenet.errors import NumericalError, ShapeError

LN2 = np.log(2.0)


def numeric_gradients(f, arrays, h=1e-6):
    """Central finite differences of a scalar function of several arrays."""
    grads = [np.zeros_like(a) for a in arrays]
    for a, g in zip(arrays, grads):
        flat, gflat = a.ravel(), g.ravel()
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = f(arrays)
            flat[i] = old - h
            down = f(arrays)
            flat[i] = old
            gflat[i] = (up - down) / (2.0 * h)
    return grads


def test_mul_scalar_example():
    tape = Tape()
    x = tape.leaf([[2.0]])
    y = tape.leaf([[3.0]])
    f = mul(x, y)
    tape.backward(f)
    assert x.grad[0, 0] == 3.0
    assert y.grad[0, 0] == 2.0


def test_concat_gradient_splits_by_width():
    tape = Tape()
    a = tape.leaf(np.ones((2, 2)))
    b = tape.leaf(np.ones((2, 3)))
    out = concat(a, b)
    assert out.shape == (2, 5)
    weight = tape.leaf(np.arange(5, dtype=float).reshape(5, 1))
    tape.backward(sum_all(matmul(out, weight)))
    np.testing.assert_allclose(a.grad, [[0, 1], [0, 1]])
    np.testing.assert_allclose(b.grad, [[2, 3, 4], [2, 3, 4]])


def test_matmul_against_finite_differences():
    rng = np.random.default_rng(0)
    A = rng.normal(size=(3, 4))
    B = rng.normal(size=(4, 2))

    def f(arrays):
        tape = Tape()
        a, b = tape.leaf(arrays[0]), tape.leaf(arrays[1])
        return float(sum_all(matmul(a, b)).data[0, 0])

    tape = Tape()
    a, b = tape.leaf(A), tape.leaf(B)
    tape.backward(sum_all(matmul(a, b)))
    fd_a, fd_b = numeric_gradients(f, [A, B])
    np.testing.assert_allclose(a.grad, fd_a, atol=1e-8)
    np.testing.assert_allclose(b.grad, fd_b, atol=1e-8)
    # d(sum(AB))/dA_ij = sum_n B_jn
    np.testing.assert_allclose(a.grad, np.tile(B.sum(axis=1), (3, 1)))


class TestShiftedSoftplus:
    def test_zero_fixed_point(self):
        assert shifted_softplus_array(0.0) == 0.0

    def test_large_argument(self):
        got = shifted_softplus_array(100.0)
        assert got == pytest.approx(100.0 - LN2, abs=1e-12)

    def test_stable_extremes(self):
        out = shifted_softplus_array(np.array([-1000.0, 1000.0]))
        assert np.isfinite(out).all()
        assert out[0] == pytest.approx(-LN2)
        assert out[1] == pytest.approx(1000.0 - LN2)

    def test_slope_half_at_origin(self):
        tape = Tape()
        x = tape.leaf([[0.0]])
        tape.backward(sum_all(shifted_softplus(x)))
        assert x.grad[0, 0] == 0.5
        h = 1e-6
        fd = (shifted_softplus_array(h) - shifted_softplus_array(-h)) / (2 * h)
        assert fd == pytest.approx(0.5, abs=1e-9)


def test_gather_same_row_twice_doubles_gradient():
    tape = Tape()
    table = tape.leaf(np.arange(6, dtype=float).reshape(3, 2))
    out = gather_rows(table, [1, 1])
    tape.backward(sum_all(out))
    np.testing.assert_allclose(table.grad, [[0, 0], [2, 2], [0, 0]])


def test_gather_out_of_range():
    tape = Tape()
    table = tape.leaf(np.zeros((3, 2)))
    with pytest.raises(IndexError):
        gather_rows(table, [3])


class TestSegmentReduce:
    def test_sum_example(self):
        tape = Tape()
        x = tape.leaf([[1.0, 2.0], [10.0, 20.0], [100.0, 200.0]])
        out = segment_reduce(x, [0, 0, 1], 2, "sum")
        np.testing.assert_allclose(out.data, [[11, 22], [100, 200]])

    def test_empty_segment_sum_is_zero_row(self):
        tape = Tape()
        x = tape.leaf([[1.0, 1.0]])
        out = segment_reduce(x, [1], 3, "sum")
        np.testing.assert_allclose(out.data, [[0, 0], [1, 1], [0, 0]])

    def test_empty_segment_mean_errors(self):
        tape = Tape()
        x = tape.leaf([[1.0, 1.0]])
        with pytest.raises(NumericalError, match="empty segment"):
            segment_reduce(x, [1], 3, "mean")

    def test_mean_equals_sum_over_count_and_gradients(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(5, 3))
        ids = np.array([0, 1, 0, 1, 1])
        w = rng.normal(size=(3, 1))

        def f(arrays):
            tape = Tape()
            x = tape.leaf(arrays[0])
            return float(
                sum_all(matmul(segment_reduce(x, ids, 2, "mean"), tape.leaf(w))).data
            )

        tape = Tape()
        x = tape.leaf(X)
        out = segment_reduce(x, ids, 2, "mean")
        counts = np.array([2.0, 3.0])
        sums = np.zeros((2, 3))
        np.add.at(sums, ids, X)
        np.testing.assert_allclose(out.data, sums / counts[:, None])
        tape.backward(sum_all(matmul(out, tape.leaf(w))))
        (fd,) = numeric_gradients(f, [X])
        np.testing.assert_allclose(x.grad, fd, atol=1e-8)

    def test_bad_segment_id(self):
        tape = Tape()
        x = tape.leaf(np.zeros((2, 2)))
        with pytest.raises(IndexError):
            segment_reduce(x, [0, 5], 2, "sum")


class TestBackward:
    def test_constant_loss_gives_zero_gradients(self):
        tape = Tape()
        p = tape.leaf(np.ones((2, 2)))
        c = tape.leaf([[5.0]])
        tape.backward(sum_all(c))
        np.testing.assert_allclose(p.grad, 0.0)

    def test_two_uses_sum_paths(self):
        tape = Tape()
        p = tape.leaf([[3.0]])
        loss = sum_all(add(mul(p, p), p))  # p^2 + p -> 2p + 1 = 7
        tape.backward(loss)
        assert p.grad[0, 0] == 7.0

    def test_non_scalar_loss_rejected(self):
        tape = Tape()
        p = tape.leaf(np.ones((2, 2)))
        with pytest.raises(ShapeError):
            tape.backward(add(p, p))


class TestShapeErrors:
    def test_add_mismatch_names_shapes(self):
        tape = Tape()
        with pytest.raises(ShapeError, match=r"\(2, 2\).*\(3, 2\)"):
            add(tape.leaf(np.zeros((2, 2))), tape.leaf(np.zeros((3, 2))))

    def test_matmul_mismatch(self):
        tape = Tape()
        with pytest.raises(ShapeError):
            matmul(tape.leaf(np.zeros((2, 3))), tape.leaf(np.zeros((2, 3))))

    def test_mixed_tapes_rejected(self):
        t1, t2 = Tape(), Tape()
        with pytest.raises(ShapeError):
            add(t1.leaf([[1.0]]), t2.leaf([[1.0]]))


def test_bias_row_addition_both_orders():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(4, 3))
    b = rng.normal(size=(1, 3))

    for order in ("xb", "bx"):
        def f(arrays):
            tape = Tape()
            x, bias = tape.leaf(arrays[0]), tape.leaf(arrays[1])
            pair = (x, bias) if order == "xb" else (bias, x)
            return float(sum_all(mul(add(*pair), add(*pair))).data)

        tape = Tape()
        x, bias = tape.leaf(X), tape.leaf(b)
        pair = (x, bias) if order == "xb" else (bias, x)
        s = add(*pair)
        tape.backward(sum_all(mul(s, s)))
        fd_x, fd_b = numeric_gradients(f, [X, b])
        np.testing.assert_allclose(x.grad, fd_x, atol=1e-7)
        np.testing.assert_allclose(bias.grad, fd_b, atol=1e-7)


def test_check_finite_names_offending_op():
    tape = Tape(check_finite=True)
    x = tape.leaf([[1e308]])
    with np.errstate(over="ignore"):
        with pytest.raises(NumericalError, match="mul"):
            mul(x, x)
    with pytest.raises(NumericalError):
        Tape(check_finite=True).leaf([[np.nan]])


def test_primitive_gradients_at_random_points():
    """Every primitive matches central differences at 100 random points."""
    rng = np.random.default_rng(42)
    ids = np.array([0, 2, 1, 2])
    checked = 0

    def build(arrays, tape=None):
        tape = tape or Tape()
        a = tape.leaf(arrays[0])  # (4, 3)
        b = tape.leaf(arrays[1])  # (3, 3)
        c = tape.leaf(arrays[2])  # (1, 3)
        m = matmul(a, b)
        act = shifted_softplus(add(m, c))
        gathered = gather_rows(act, [0, 3, 2, 2])
        seg = segment_reduce(mul(gathered, gathered), ids, 3, "sum")
        mean = segment_reduce(act, np.array([0, 1, 2, 2]), 3, "mean")
        joined = concat(seg, scale(sub(mean, mean), 2.0), mean)
        return sum_all(joined), tape

    for _ in range(10):
        arrays = [
            rng.normal(size=(4, 3)),
            rng.normal(size=(3, 3)),
            rng.normal(size=(1, 3)),
        ]
        tape = Tape()
        loss, _ = build(arrays, tape)
        leaves = tape._leaves[:3]
        tape.backward(loss)

        def f(arrs):
            val, _ = build(arrs)
            return float(val.data[0, 0])

        fds = numeric_gradients(f, arrays)
        for leaf, fd in zip(leaves, fds):
            rel = np.abs(leaf.grad - fd) / np.maximum(1.0, np.abs(leaf.grad))
            assert rel.max() < 1e-6
            checked += leaf.grad.size
    assert checked >= 100
