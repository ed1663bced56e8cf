"""Forward oracles and finite-difference gradient checks for the tape engine."""

import numpy as np
import pytest

from pglode import autodiff as ad
from pglode.autodiff import ShapeError, Tape


def leafed(tape, *arrays):
    return [tape.leaf(a) for a in arrays]


# ---------------------------------------------------------------------------
# forward-value oracles


def test_sigmoid_of_zero_is_half():
    tape = Tape()
    out = ad.sigmoid(tape.leaf(np.zeros((2, 2))))
    assert np.array_equal(out.value, np.full((2, 2), 0.5))


def test_sigmoid_extreme_arguments_are_stable():
    tape = Tape()
    out = ad.sigmoid(tape.leaf(np.array([-1e4, 1e4])))
    assert np.all(np.isfinite(out.value))
    assert out.value[0] == pytest.approx(0.0, abs=1e-12)
    assert out.value[1] == pytest.approx(1.0, abs=1e-12)


def test_conv2d_identity_kernel_is_identity(rng):
    x = rng.standard_normal((2, 3, 5, 6))
    w = np.zeros((3, 3, 3, 3))
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    tape = Tape()
    out = ad.conv2d(tape.leaf(x), tape.leaf(w))
    assert np.allclose(out.value, x, atol=1e-14)


def conv2d_loop_oracle(x, w, b=None):
    """Direct quadruple-loop stride-1 same-padding convolution."""
    bs, cin, h, wd = x.shape
    cout, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    out = np.zeros((bs, cout, h, wd))
    for n in range(bs):
        for co in range(cout):
            for i in range(h):
                for j in range(wd):
                    patch = xp[n, :, i:i + kh, j:j + kw]
                    out[n, co, i, j] = (patch * w[co]).sum()
            if b is not None:
                out[n, co] += b[co]
    return out


def test_conv2d_matches_loop_oracle(rng):
    x = rng.standard_normal((2, 3, 4, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    tape = Tape()
    out = ad.conv2d(tape.leaf(x), tape.leaf(w), tape.leaf(b))
    assert np.allclose(out.value, conv2d_loop_oracle(x, w, b), atol=1e-12)


def test_conv1x1_matches_loop_oracle(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    w = rng.standard_normal((5, 3))
    tape = Tape()
    out = ad.conv1x1(tape.leaf(x), tape.leaf(w))
    expected = np.einsum("oc,bchw->bohw", w, x)
    assert np.allclose(out.value, expected, atol=1e-12)


def test_matmul_matches_triple_loop(rng):
    a = rng.standard_normal((2, 3))
    b = rng.standard_normal((3, 2))
    expected = np.zeros((2, 2))
    for i in range(2):
        for j in range(2):
            for k in range(3):
                expected[i, j] += a[i, k] * b[k, j]
    tape = Tape()
    out = ad.matmul(tape.leaf(a), tape.leaf(b))
    assert np.allclose(out.value, expected, atol=1e-12)


def test_max_pool_forward_blocks(rng):
    x = rng.standard_normal((1, 2, 4, 6))
    tape = Tape()
    out = ad.max_pool(tape.leaf(x), k=2)
    for c in range(2):
        for i in range(2):
            for j in range(3):
                assert out.value[0, c, i, j] == x[0, c, 2*i:2*i+2, 2*j:2*j+2].max()


def test_max_pool_tie_routes_gradient_to_first_in_scan_order():
    x = np.array([[[[3.0, 3.0], [3.0, 1.0]]]])  # three-way tie
    tape = Tape()
    node = tape.leaf(x)
    loss = ad.reduce_sum(ad.max_pool(node, k=2))
    tape.backward(loss)
    assert np.array_equal(node.grad, np.array([[[[1.0, 0.0], [0.0, 0.0]]]]))


def test_upsample_nearest_forward(rng):
    x = rng.standard_normal((1, 1, 2, 2))
    tape = Tape()
    out = ad.upsample_nearest(tape.leaf(x), k=2)
    assert np.array_equal(out.value, np.repeat(np.repeat(x, 2, 2), 2, 3))


def test_concat_slice_round_trip(rng):
    a = rng.standard_normal((2, 3, 4, 4))
    b = rng.standard_normal((2, 2, 4, 4))
    tape = Tape()
    na, nb = leafed(tape, a, b)
    joined = ad.concat_channels([na, nb])
    assert np.array_equal(ad.slice_channels(joined, 0, 3).value, a)
    assert np.array_equal(ad.slice_channels(joined, 3, 5).value, b)


def test_log_rejects_nonpositive():
    tape = Tape()
    with pytest.raises(ValueError, match="log"):
        ad.log(tape.leaf(np.array([1.0, 0.0])))


# ---------------------------------------------------------------------------
# shape errors


def test_shape_errors_name_op_and_shapes(rng):
    tape = Tape()
    a = tape.leaf(rng.standard_normal((2, 3)))
    b = tape.leaf(rng.standard_normal((4, 5)))
    with pytest.raises(ShapeError, match=r"add.*\(2, 3\).*\(4, 5\)"):
        ad.add(a, b)
    with pytest.raises(ShapeError, match="matmul"):
        ad.matmul(a, b)


def test_conv2d_rejects_even_kernel(rng):
    tape = Tape()
    x = tape.leaf(rng.standard_normal((1, 1, 4, 4)))
    w = tape.leaf(rng.standard_normal((1, 1, 2, 2)))
    with pytest.raises(ShapeError, match="even kernel"):
        ad.conv2d(x, w)


def test_max_pool_rejects_indivisible(rng):
    tape = Tape()
    x = tape.leaf(rng.standard_normal((1, 1, 5, 4)))
    with pytest.raises(ShapeError, match="max_pool"):
        ad.max_pool(x, k=2)


def test_slice_channels_rejects_bad_range(rng):
    tape = Tape()
    x = tape.leaf(rng.standard_normal((1, 3, 2, 2)))
    with pytest.raises(ShapeError):
        ad.slice_channels(x, 2, 2)
    with pytest.raises(ShapeError):
        ad.slice_channels(x, 0, 4)


def test_mixed_tapes_rejected(rng):
    t1, t2 = Tape(), Tape()
    a = t1.leaf(rng.standard_normal((2, 2)))
    b = t2.leaf(rng.standard_normal((2, 2)))
    with pytest.raises(ValueError, match="different tapes"):
        ad.add(a, b)


# ---------------------------------------------------------------------------
# backward semantics


def test_grad_of_sum_is_ones(rng):
    tape = Tape()
    x = tape.leaf(rng.standard_normal((3, 4)))
    tape.backward(ad.reduce_sum(x))
    assert np.array_equal(x.grad, np.ones((3, 4)))


def test_grad_of_half_square_sum_is_x(rng):
    x_val = rng.standard_normal((3, 4))
    tape = Tape()
    x = tape.leaf(x_val)
    tape.backward(ad.scale(ad.reduce_sum(ad.mul(x, x)), 0.5))
    assert np.allclose(x.grad, x_val, atol=1e-14)


def test_gradient_accumulates_across_shared_subexpressions(rng):
    tape = Tape()
    x = tape.leaf(rng.standard_normal((2, 2)))
    tape.backward(ad.add(ad.reduce_sum(x), ad.reduce_sum(x)))
    assert np.array_equal(x.grad, np.full((2, 2), 2.0))


def test_backward_requires_scalar(rng):
    tape = Tape()
    x = tape.leaf(rng.standard_normal((2, 2)))
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(ad.mul(x, x))


def test_backward_twice_without_reset_is_error(rng):
    tape = Tape()
    x = tape.leaf(rng.standard_normal(3))
    loss = ad.reduce_sum(x)
    tape.backward(loss)
    with pytest.raises(RuntimeError, match="twice"):
        tape.backward(loss)
    tape.reset_grads()
    tape.backward(loss)  # allowed again after reset
    assert np.array_equal(x.grad, np.ones(3))


def test_backward_rejects_foreign_tape_loss(rng):
    t1, t2 = Tape(), Tape()
    loss = ad.reduce_sum(t1.leaf(rng.standard_normal(3)))
    with pytest.raises(ValueError, match="different tape"):
        t2.backward(loss)


def test_identical_replays_give_bitwise_identical_gradients(rng):
    x_val = rng.standard_normal((2, 3, 4, 4))
    w_val = rng.standard_normal((2, 3, 3, 3))

    def run():
        tape = Tape()
        x, w = leafed(tape, x_val, w_val)
        loss = ad.reduce_mean(ad.sigmoid(ad.conv2d(x, w)))
        tape.backward(loss)
        return x.grad.copy(), w.grad.copy()

    gx1, gw1 = run()
    gx2, gw2 = run()
    assert np.array_equal(gx1, gx2) and np.array_equal(gw1, gw2)


def test_clip_gradient_passes_inside_blocks_outside():
    tape = Tape()
    x = tape.leaf(np.array([-2.0, 0.3, 2.0]))
    tape.backward(ad.reduce_sum(ad.clip(x, 0.0, 1.0)))
    assert np.array_equal(x.grad, np.array([0.0, 1.0, 0.0]))


def test_release_clears_graph(rng):
    tape = Tape()
    x = tape.leaf(rng.standard_normal((2, 2)))
    ad.reduce_sum(ad.mul(x, x))
    assert len(tape.nodes) > 1
    tape.release()
    assert len(tape.nodes) == 0


# ---------------------------------------------------------------------------
# finite-difference checks, one per primitive


TOL = 1e-4


def check(build, leaves):
    err = ad.grad_check(build, leaves)
    assert err <= TOL, f"max relative gradient error {err}"


def test_fd_add_broadcast(rng):
    check(
        lambda t, n: ad.reduce_sum(ad.mul(ad.add(n["a"], n["b"]), n["a"])),
        {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((1, 4))},
    )


def test_fd_sub_broadcast(rng):
    check(
        lambda t, n: ad.reduce_sum(ad.mul(ad.sub(n["a"], n["b"]), n["a"])),
        {"a": rng.standard_normal((2, 3, 4)), "b": rng.standard_normal((4,))},
    )


def test_fd_mul_scale(rng):
    check(
        lambda t, n: ad.reduce_mean(ad.scale(ad.mul(n["a"], n["b"]), 1.7)),
        {"a": rng.standard_normal((3, 3)), "b": rng.standard_normal((3, 3))},
    )


def test_fd_matmul(rng):
    check(
        lambda t, n: ad.reduce_sum(ad.tanh(ad.matmul(n["a"], n["b"]))),
        {"a": rng.standard_normal((3, 4)), "b": rng.standard_normal((4, 2))},
    )


def test_fd_conv2d_with_bias(rng):
    check(
        lambda t, n: ad.reduce_sum(ad.sigmoid(ad.conv2d(n["x"], n["w"], n["b"]))),
        {
            "x": rng.standard_normal((2, 2, 4, 4)),
            "w": rng.standard_normal((3, 2, 3, 3)) * 0.5,
            "b": rng.standard_normal(3),
        },
    )


def test_fd_conv1x1_with_bias(rng):
    check(
        lambda t, n: ad.reduce_mean(ad.conv1x1(n["x"], n["w"], n["b"])),
        {
            "x": rng.standard_normal((2, 3, 3, 3)),
            "w": rng.standard_normal((2, 3)),
            "b": rng.standard_normal(2),
        },
    )


def test_fd_sigmoid_tanh_exp(rng):
    check(
        lambda t, n: ad.reduce_sum(ad.exp(ad.tanh(ad.sigmoid(n["x"])))),
        {"x": rng.standard_normal((4, 4))},
    )


def test_fd_relu_away_from_kink(rng):
    x = rng.standard_normal((4, 4))
    x[np.abs(x) < 0.1] = 0.5  # finite differences straddle the kink otherwise
    check(lambda t, n: ad.reduce_sum(ad.mul(ad.relu(n["x"]), n["x"])), {"x": x})


def test_fd_log(rng):
    check(
        lambda t, n: ad.reduce_sum(ad.log(n["x"])),
        {"x": rng.random((3, 3)) + 0.5},
    )


def test_fd_clip_away_from_boundaries(rng):
    x = rng.standard_normal((4, 4)) * 3.0
    x[np.abs(np.abs(x) - 1.0) < 0.1] = 0.0  # keep FD clear of the clip edges
    check(lambda t, n: ad.reduce_sum(ad.mul(ad.clip(n["x"], -1.0, 1.0), n["x"])), {"x": x})


def test_fd_max_pool(rng):
    x = rng.standard_normal((1, 2, 4, 4))
    check(lambda t, n: ad.reduce_sum(ad.mul(ad.max_pool(n["x"]), ad.max_pool(n["x"]))), {"x": x})


def test_fd_upsample(rng):
    check(
        lambda t, n: ad.reduce_mean(ad.sigmoid(ad.upsample_nearest(n["x"], 3))),
        {"x": rng.standard_normal((1, 2, 2, 2))},
    )


def test_fd_concat_slice(rng):
    def build(t, n):
        joined = ad.concat_channels([n["a"], n["b"]])
        return ad.reduce_sum(ad.mul(ad.slice_channels(joined, 1, 3), ad.slice_channels(joined, 0, 2)))

    check(build, {
        "a": rng.standard_normal((2, 2, 3, 3)),
        "b": rng.standard_normal((2, 1, 3, 3)),
    })


def test_fd_three_layer_conv_sigmoid_composite(rng):
    def build(t, n):
        h1 = ad.sigmoid(ad.conv2d(n["x"], n["w1"], n["b1"]))
        h2 = ad.sigmoid(ad.conv2d(h1, n["w2"], n["b2"]))
        h3 = ad.conv2d(h2, n["w3"], n["b3"])
        return ad.reduce_mean(ad.mul(h3, h3))

    check(build, {
        "x": rng.standard_normal((1, 2, 4, 4)),
        "w1": rng.standard_normal((3, 2, 3, 3)) * 0.5,
        "b1": rng.standard_normal(3) * 0.1,
        "w2": rng.standard_normal((2, 3, 3, 3)) * 0.5,
        "b2": rng.standard_normal(2) * 0.1,
        "w3": rng.standard_normal((1, 2, 1, 1)),
        "b3": rng.standard_normal(1) * 0.1,
    })


def test_grad_check_linear_is_nearly_exact(rng):
    err = ad.grad_check(
        lambda t, n: ad.reduce_sum(ad.scale(n["x"], 3.0)),
        {"x": rng.standard_normal((3, 3))},
    )
    assert err <= 1e-9


def test_grad_check_constant_function_gives_zero(rng):
    err = ad.grad_check(
        lambda t, n: ad.reduce_sum(ad.mul(n["x"], t.constant(np.zeros((2, 2))))),
        {"x": rng.standard_normal((2, 2))},
    )
    assert err == 0.0
