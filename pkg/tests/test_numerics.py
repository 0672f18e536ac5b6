import numpy as np
import pytest

from rapbench import numerics as nm
from rapbench.numerics import (
    Tape, Tensor, ShapeError, TapeError, add, backward, clamp, conv2d,
    exp, finite_diff_check, leaf, log, masked_select, max_pool2d, multiply,
    reduce_sum, relu, reshape, scale, sigmoid, square, subtract,
)


def conv2d_oracle(x, k, stride, pad):
    """Quadruple-loop reference convolution (HWC image, HWIO kernel)."""
    h, w, c = x.shape
    kh, kw, _, cout = k.shape
    xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((oh, ow, cout))
    for i in range(oh):
        for j in range(ow):
            for di in range(kh):
                for dj in range(kw):
                    for ci in range(c):
                        for co in range(cout):
                            out[i, j, co] += (
                                xp[i * stride + di, j * stride + dj, ci]
                                * k[di, dj, ci, co])
    return out


def maxpool_oracle(x, window):
    h, w, c = x.shape
    oh, ow = h // window, w // window
    out = np.zeros((oh, ow, c))
    for i in range(oh):
        for j in range(ow):
            for ci in range(c):
                out[i, j, ci] = x[i * window:(i + 1) * window,
                                  j * window:(j + 1) * window, ci].max()
    return out


def test_sigmoid_at_zero():
    assert sigmoid(Tensor(0.0)).item() == 0.5


def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(5, 4, 1))
    k = np.ones((1, 1, 1, 1))
    out = conv2d(Tensor(x), Tensor(k), stride=1, padding=0)
    np.testing.assert_array_equal(out.values, x)


def test_sum_of_squares_value_and_gradient():
    # d/dx sum(x^2) = 2x; at [1, 2] the value is 5 and gradient [2, 4]
    with Tape():
        x = leaf([1.0, 2.0])
        y = reduce_sum(square(x))
        grads = backward(y)
    assert y.item() == 5.0
    np.testing.assert_array_equal(grads[x].values, [2.0, 4.0])
    err = finite_diff_check(lambda t: reduce_sum(square(t)), [1.0, 2.0])
    assert err < 1e-6


def test_gradient_of_unused_leaf_is_zero():
    with Tape():
        x = leaf([1.0, 2.0, 3.0])
        y = leaf([4.0])
        out = reduce_sum(square(y))
        grads = backward(out)
    np.testing.assert_array_equal(grads[x].values, np.zeros(3))


def test_gradient_of_plain_sum_is_ones():
    with Tape():
        x = leaf(np.arange(6.0).reshape(2, 3))
        grads = backward(reduce_sum(x))
    np.testing.assert_array_equal(grads[x].values, np.ones((2, 3)))


def test_sigmoid_gradient_at_zero_is_quarter():
    with Tape():
        x = leaf(np.zeros(5))
        grads = backward(reduce_sum(sigmoid(x)))
    np.testing.assert_allclose(grads[x].values, 0.25 * np.ones(5), rtol=1e-12)
    err = finite_diff_check(lambda t: reduce_sum(sigmoid(t)), np.zeros(5))
    assert err < 1e-4


def test_finite_diff_on_constant_function_is_zero():
    err = finite_diff_check(lambda t: reduce_sum(t * 0.0), np.ones(4))
    assert err == 0.0


# gradcheck every primitive at inputs kept away from kinks; fixed seed
PRIMITIVE_CASES = [
    ("add", lambda x: reduce_sum(add(x, Tensor(np.linspace(0.3, 1.0, 12).reshape(3, 4))))),
    ("subtract", lambda x: reduce_sum(subtract(Tensor(2.0), x))),
    ("multiply", lambda x: reduce_sum(multiply(x, x))),
    ("scale", lambda x: reduce_sum(scale(x, -1.7))),
    ("square", lambda x: reduce_sum(square(x))),
    ("exp", lambda x: reduce_sum(exp(x))),
    ("sigmoid", lambda x: reduce_sum(sigmoid(x))),
    ("reshape", lambda x: reduce_sum(square(reshape(x, (4, 3))))),
]


@pytest.mark.parametrize("name,f", PRIMITIVE_CASES, ids=[c[0] for c in PRIMITIVE_CASES])
def test_primitive_gradcheck(name, f):
    rng = np.random.default_rng(7)
    x = rng.uniform(0.2, 1.2, size=(3, 4))
    assert finite_diff_check(f, x, step=1e-3) < 1e-4


def test_log_gradcheck_and_positivity():
    rng = np.random.default_rng(8)
    x = rng.uniform(0.5, 2.0, size=8)
    assert finite_diff_check(lambda t: reduce_sum(log(t)), x) < 1e-4
    with pytest.raises(ValueError, match="non-positive"):
        log(Tensor([1.0, 0.0]))


def test_relu_gradcheck_away_from_kink():
    rng = np.random.default_rng(9)
    x = rng.uniform(0.1, 1.0, size=10) * rng.choice([-1.0, 1.0], size=10)
    assert finite_diff_check(lambda t: reduce_sum(square(relu(t))), x) < 1e-4


def test_masked_select_values_and_gradcheck():
    mask = np.array([1, 0, 1, 1, 0], dtype=np.int64)
    x = np.array([1.0, 2.0, 3.0, 4.0, 5.0])
    out = masked_select(Tensor(x), mask)
    np.testing.assert_array_equal(out.values, [1.0, 3.0, 4.0])
    f = lambda t: reduce_sum(square(masked_select(t, mask)))  # noqa: E731
    assert finite_diff_check(f, x) < 1e-4


def test_conv2d_matches_loop_oracle():
    rng = np.random.default_rng(10)
    for h, w, c, kh, kw, cout, stride, pad in [
        (6, 6, 1, 3, 3, 2, 1, 1),
        (8, 6, 3, 3, 3, 4, 2, 1),
        (7, 7, 2, 5, 5, 1, 4, 2),
        (4, 4, 2, 1, 1, 3, 1, 0),
    ]:
        x = rng.normal(size=(h, w, c))
        k = rng.normal(size=(kh, kw, c, cout))
        got = conv2d(Tensor(x), Tensor(k), stride=stride, padding=pad).values
        want = conv2d_oracle(x, k, stride, pad)
        np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_conv2d_gradcheck_input_and_kernel():
    rng = np.random.default_rng(11)
    x = rng.normal(size=(6, 5, 2))
    k = rng.normal(size=(3, 3, 2, 3))
    fx = lambda t: reduce_sum(square(conv2d(t, Tensor(k), stride=2, padding=1)))  # noqa: E731
    fk = lambda t: reduce_sum(square(conv2d(Tensor(x), t, stride=2, padding=1)))  # noqa: E731
    assert finite_diff_check(fx, x) < 1e-4
    assert finite_diff_check(fk, k) < 1e-4


def test_maxpool_matches_oracle_and_gradcheck():
    rng = np.random.default_rng(12)
    x = rng.normal(size=(6, 4, 3))
    got = max_pool2d(Tensor(x), 2).values
    np.testing.assert_array_equal(got, maxpool_oracle(x, 2))
    f = lambda t: reduce_sum(square(max_pool2d(t, 2)))  # noqa: E731
    assert finite_diff_check(f, x) < 1e-4


def test_clamp_gradient_masks_clipped_region():
    with Tape():
        x = leaf([-1.0, 0.5, 2.0])
        y = reduce_sum(clamp(x, 0.0, 1.0))
        grads = backward(y)
    np.testing.assert_array_equal(grads[x].values, [0.0, 1.0, 0.0])
    np.testing.assert_array_equal(y.values, 1.5)


def test_backward_is_deterministic_bitwise():
    rng = np.random.default_rng(13)
    x0 = rng.normal(size=(5, 5, 2))
    k0 = rng.normal(size=(3, 3, 2, 2))

    def run():
        with Tape():
            x = leaf(x0)
            k = leaf(k0)
            y = reduce_sum(square(sigmoid(conv2d(x, k, stride=1, padding=1))))
            g = backward(y)
            return g[x].values, g[k].values

    gx1, gk1 = run()
    gx2, gk2 = run()
    assert gx1.tobytes() == gx2.tobytes()
    assert gk1.tobytes() == gk2.tobytes()


def test_gradient_linearity_of_summed_losses():
    rng = np.random.default_rng(14)
    x0 = rng.normal(size=(4, 4))

    def grad_of(build):
        with Tape():
            x = leaf(x0)
            return backward(build(x))[x].values

    l1 = lambda x: reduce_sum(square(x))  # noqa: E731
    l2 = lambda x: reduce_sum(sigmoid(x))  # noqa: E731
    combined = grad_of(lambda x: add(l1(x), l2(x)))
    separate = grad_of(l1) + grad_of(l2)
    np.testing.assert_allclose(combined, separate, rtol=1e-12, atol=1e-15)


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError) as ei:
        add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    msg = str(ei.value)
    assert "add" in msg and "(2, 3)" in msg and "(4, 5)" in msg


def test_conv_channel_mismatch_rejected():
    with pytest.raises(ShapeError, match="conv2d"):
        conv2d(Tensor(np.zeros((4, 4, 2))), Tensor(np.zeros((3, 3, 3, 1))))


def test_maxpool_window_must_divide():
    with pytest.raises(ShapeError, match="window"):
        max_pool2d(Tensor(np.zeros((5, 4, 1))), 2)


def test_backward_rejects_non_scalar_root():
    with Tape():
        x = leaf(np.ones(3))
        y = square(x)
        with pytest.raises(TapeError, match="scalar"):
            backward(y)


def test_backward_rejects_constant_root():
    with pytest.raises(TapeError):
        backward(Tensor(1.0))


def test_cleared_tape_invalidates_nodes():
    with Tape() as tape:
        x = leaf(np.ones(3))
        y = reduce_sum(x)
        tape.clear()
        with pytest.raises(TapeError, match="cleared"):
            backward(y)
        with pytest.raises(TapeError, match="cleared"):
            leaf(np.ones(2))


def test_leaf_requires_active_tape():
    with pytest.raises(TapeError, match="active tape"):
        leaf(np.ones(2))


def test_ops_without_tape_are_constants():
    y = reduce_sum(square(Tensor([1.0, 2.0])))
    assert y.node_id is None and y.item() == 5.0


def test_non_finite_values_rejected():
    with pytest.raises(ValueError, match="non-finite"):
        Tensor([1.0, np.inf])
    with pytest.raises(ValueError, match="non-finite"):
        exp(Tensor(1000.0))


def test_nested_parallel_tapes_are_independent():
    import threading

    results = {}

    def worker(key, seed):
        rng = np.random.default_rng(seed)
        x0 = rng.normal(size=(8, 8))
        with Tape():
            x = leaf(x0)
            results[key] = backward(reduce_sum(square(x)))[x].values

    threads = [threading.Thread(target=worker, args=(i, i)) for i in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for i in range(4):
        rng = np.random.default_rng(i)
        np.testing.assert_array_equal(results[i], 2.0 * rng.normal(size=(8, 8)))
