"""Engine tests: hand-computed values, naive-loop oracles, and
finite-difference gradient checks for every op."""

import numpy as np
import pytest

import magprompt.autodiff as ad


def grad_of(build, *tensors):
    """Run build() under a fresh tape, backprop, return the leaf grads."""
    for t in tensors:
        t.grad = None
    with ad.Tape():
        loss = build()
        ad.backward(loss)
    return [t.grad for t in tensors]


# --- hand values -----------------------------------------------------------


def test_matmul_hand_value():
    a = ad.constant([[1.0, 2.0], [3.0, 4.0]])
    b = ad.constant([[1.0], [1.0]])
    assert np.array_equal(ad.matmul(a, b).data, [[3.0], [7.0]])


def test_matmul_identity():
    x = ad.constant(np.arange(6.0).reshape(2, 3))
    assert np.array_equal(ad.matmul(x, ad.constant(np.eye(3))).data, x.data)


def test_matmul_shape_rejection():
    with pytest.raises(ValueError):
        ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))


def test_affine_hand_value():
    x = ad.constant([[1.0, 2.0]])
    w = ad.constant(np.eye(2))
    b = ad.constant([[0.5, 0.5]])
    assert np.array_equal(ad.affine(x, w, b).data, [[1.5, 2.5]])


def test_leaky_relu_values():
    x = ad.constant([[0.0, -1.0, 5.0]])
    y = ad.leaky_relu(x, 0.2)
    assert np.allclose(y.data, [[0.0, -0.2, 5.0]])
    with pytest.raises(ValueError):
        ad.leaky_relu(x, -0.1)


def test_leaky_relu_kink_subgradient_is_one():
    x = ad.parameter([[0.0]])
    (g,) = grad_of(lambda: ad.sum_all(ad.leaky_relu(x, 0.2)), x)
    assert g[0, 0] == 1.0


def test_add_mul_row_broadcast():
    a = ad.constant([[1.0, 2.0], [3.0, 4.0]])
    row = ad.constant([[10.0, 20.0]])
    assert np.array_equal(ad.add(a, row).data, [[11.0, 22.0], [13.0, 24.0]])
    assert np.array_equal(ad.mul(a, row).data, [[10.0, 40.0], [30.0, 80.0]])
    with pytest.raises(ValueError):
        ad.add(a, ad.constant([[1.0, 2.0, 3.0]]))
    with pytest.raises(ValueError):
        ad.mul(a, ad.constant(np.ones((3, 2))))


def test_row_broadcast_backward_sums_rows():
    row = ad.parameter([[1.0, 1.0]])
    a = ad.constant([[1.0, 2.0], [3.0, 4.0]])
    (g,) = grad_of(lambda: ad.sum_all(ad.mul(a, row)), row)
    assert np.array_equal(g, [[4.0, 6.0]])


def test_scale_rows_hand_value():
    m = ad.constant([[2.0, -2.0], [1.0, 1.0]])
    col = ad.constant([[0.5], [2.0]])
    assert np.array_equal(ad.scale_rows(m, col).data, [[1.0, -1.0], [2.0, 2.0]])
    with pytest.raises(ValueError):
        ad.scale_rows(m, ad.constant([[1.0, 1.0]]))


def test_gather_rows_and_duplicate_accumulation():
    x = ad.parameter([[1.0], [2.0]])
    w = ad.constant([[1.0], [2.0]])
    (g,) = grad_of(lambda: ad.sum_all(ad.mul(ad.gather_rows(x, [0, 0]), w)), x)
    assert np.array_equal(g, [[3.0], [0.0]])
    with pytest.raises(ValueError):
        ad.gather_rows(x, [2])


def test_segment_softmax_hand_values():
    y = ad.segment_softmax(ad.constant([[0.0], [np.log(3.0)]]), [0, 0], 1)
    assert np.allclose(y.data, [[0.25], [0.75]], atol=1e-12)
    y = ad.segment_softmax(ad.constant(np.zeros((4, 2))), [0, 0, 0, 0], 1)
    assert np.allclose(y.data, 0.25, atol=1e-15)


def test_segment_softmax_shift_invariance():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((9, 3))
    seg = np.sort(rng.integers(0, 4, size=9))
    base = ad.segment_softmax(ad.constant(x), seg, 4).data
    shifted = ad.segment_softmax(ad.constant(x + 1000.0), seg, 4).data
    assert np.max(np.abs(base - shifted)) < 1e-12


def test_segment_softmax_sums_and_contiguity():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((20, 4)) * 10
    seg = np.sort(rng.integers(0, 6, size=20))
    y = ad.segment_softmax(ad.constant(x), seg, 6).data
    sums = np.zeros((6, 4))
    np.add.at(sums, seg, y)
    present = np.isin(np.arange(6), seg)
    assert np.max(np.abs(sums[present] - 1.0)) < 1e-9
    with pytest.raises(ValueError):
        ad.segment_softmax(ad.constant(x), seg[::-1].copy(), 6)


def test_segment_softmax_naive_oracle():
    rng = np.random.default_rng(2)
    for _ in range(50):
        rows, n = int(rng.integers(1, 30)), int(rng.integers(1, 6))
        x = rng.standard_normal((rows, 2)) * 4
        seg = np.sort(rng.integers(0, n, size=rows))
        got = ad.segment_softmax(ad.constant(x), seg, n).data
        want = np.zeros_like(x)
        for s in range(n):
            block = x[seg == s]
            if block.size:
                e = np.exp(block - block.max(axis=0))
                want[seg == s] = e / e.sum(axis=0)
        assert np.max(np.abs(got - want)) < 1e-12


def test_segment_reduce_hand_values():
    v = ad.constant([[1.0], [2.0], [3.0]])
    assert np.array_equal(ad.segment_reduce(v, [0, 0, 0], 1, "sum").data, [[6.0]])
    assert np.array_equal(ad.segment_reduce(v, [0, 0, 0], 1, "mean").data, [[2.0]])
    assert np.array_equal(ad.segment_reduce(v, [0, 0, 0], 1, "max").data, [[3.0]])
    with pytest.raises(ValueError):
        ad.segment_reduce(v, [0, 0, 0], 1, "median")


def test_segment_reduce_empty_segment_gives_zero():
    v = ad.constant([[4.0, -1.0]])
    out = ad.segment_reduce(v, [1], 3, "max").data
    assert np.array_equal(out, [[0.0, 0.0], [4.0, -1.0], [0.0, 0.0]])


def test_segment_reduce_naive_oracle():
    rng = np.random.default_rng(3)
    for _ in range(50):
        rows, n = int(rng.integers(1, 25)), int(rng.integers(1, 5))
        x = rng.standard_normal((rows, 3))
        seg = np.sort(rng.integers(0, n, size=rows))
        for mode in ("sum", "mean", "max"):
            got = ad.segment_reduce(ad.constant(x), seg, n, mode).data
            want = np.zeros((n, 3))
            for s in range(n):
                block = x[seg == s]
                if block.size:
                    want[s] = {"sum": block.sum(0), "mean": block.mean(0),
                               "max": block.max(0)}[mode]
            assert np.max(np.abs(got - want)) < 1e-12


def test_segment_max_tie_gradient_goes_to_first_row():
    x = ad.parameter([[2.0], [2.0]])
    (g,) = grad_of(lambda: ad.sum_all(ad.segment_reduce(x, [0, 0], 1, "max")), x)
    assert np.array_equal(g, [[1.0], [0.0]])


def test_mean_over_columns_hand_value():
    assert np.array_equal(ad.mean_over_columns(ad.constant([[1.0, 3.0]])).data, [[2.0]])


def test_sum_all_backward_is_ones():
    x = ad.parameter(np.arange(6.0).reshape(2, 3))
    (g,) = grad_of(lambda: ad.sum_all(x), x)
    assert np.array_equal(g, np.ones((2, 3)))


def test_pointwise_values_and_domains():
    assert ad.sigmoid(ad.constant(np.zeros((1, 1)))).data[0, 0] == 0.5
    big = ad.sigmoid(ad.constant([[800.0, -800.0]])).data
    assert np.all(np.isfinite(big)) and 0.0 <= big[0, 1] < big[0, 0] <= 1.0
    assert np.allclose(ad.exp(ad.constant([[0.0]])).data, 1.0)
    with pytest.raises(ValueError):
        ad.log(ad.constant([[0.0]]))
    with pytest.raises(ValueError):
        ad.reciprocal(ad.constant([[0.0]]))


def test_reshape_round_trip_gradient():
    x = ad.parameter(np.arange(6.0).reshape(2, 3))
    (g,) = grad_of(lambda: ad.sum_all(ad.reshape(ad.reshape(x, (6, 1)), (2, 3))), x)
    assert np.array_equal(g, np.ones((2, 3)))
    with pytest.raises(ValueError):
        ad.reshape(x, (1, 2, 3))


# --- tape contracts --------------------------------------------------------


def test_backward_requires_scalar_and_tape():
    x = ad.parameter(np.ones((2, 2)))
    with ad.Tape():
        y = ad.scale(x, 2.0)
    with pytest.raises(ValueError):
        ad.backward(y)
    z = ad.sum_all(x)  # built with no tape active
    with pytest.raises(ValueError):
        ad.backward(z)


def test_tape_is_single_shot():
    x = ad.parameter(np.ones((1, 1)))
    with ad.Tape():
        loss = ad.sum_all(x)
        ad.backward(loss)
    with pytest.raises(RuntimeError):
        ad.backward(loss)


def test_frozen_tensor_gets_no_grad():
    frozen = ad.constant(np.ones((2, 2)))
    live = ad.parameter(np.ones((2, 2)))
    grad_of(lambda: ad.sum_all(ad.mul(frozen, live)), live)
    assert frozen.grad is None and live.grad is not None


def test_square_gradient_hand_value():
    x = ad.parameter([[3.0]])
    (g,) = grad_of(lambda: ad.sum_all(ad.mul(x, x)), x)
    assert np.allclose(g, [[6.0]])


# --- finite differences ----------------------------------------------------


def test_finite_diff_check_on_square():
    x = ad.parameter([[3.0]])
    err = ad.finite_diff_check(lambda t: ad.sum_all(ad.mul(t, t)), x)
    assert err < 1e-8


def test_finite_diff_check_constant_function():
    x = ad.parameter([[1.0, 2.0]])
    err = ad.finite_diff_check(lambda t: ad.sum_all(ad.mul(t, ad.constant(np.zeros((1, 2))))), x)
    assert err == 0.0


def test_finite_diff_check_rejects_bad_step():
    x = ad.parameter([[1.0]])
    with pytest.raises(ValueError):
        ad.finite_diff_check(lambda t: ad.sum_all(t), x, h=0.0)


def _fd_cases():
    rng = np.random.default_rng(7)
    x0 = rng.standard_normal((5, 3)) + 0.1  # keep clear of kinks and domains
    seg = np.array([0, 0, 1, 1, 1])
    w = ad.constant(rng.standard_normal((3, 2)))
    col = ad.constant(rng.standard_normal((5, 1)))
    row = ad.constant(rng.standard_normal((1, 3)))
    return x0, [
        ("matmul", lambda t: ad.sum_all(ad.mul(ad.matmul(t, w), ad.matmul(t, w)))),
        ("add_row", lambda t: ad.sum_all(ad.mul(ad.add(t, row), ad.add(t, row)))),
        ("mul_row", lambda t: ad.sum_all(ad.mul(ad.mul(t, row), t))),
        ("scale_rows", lambda t: ad.sum_all(ad.mul(ad.scale_rows(t, col), t))),
        ("gather", lambda t: ad.sum_all(ad.mul(ad.gather_rows(t, [0, 0, 2, 4]),
                                               ad.gather_rows(t, [1, 3, 3, 0])))),
        ("leaky", lambda t: ad.sum_all(ad.mul(ad.leaky_relu(t, 0.2), t))),
        ("softmax", lambda t: ad.sum_all(
            ad.mul(ad.segment_softmax(t, seg, 2), ad.constant(np.arange(15.0).reshape(5, 3))))),
        ("reduce_sum", lambda t: ad.sum_all(ad.mul(
            ad.segment_reduce(t, seg, 2, "sum"), ad.segment_reduce(t, seg, 2, "sum")))),
        ("reduce_mean", lambda t: ad.sum_all(ad.mul(
            ad.segment_reduce(t, seg, 2, "mean"), ad.constant(np.ones((2, 3)) * 2)))),
        ("mean_cols", lambda t: ad.sum_all(ad.mul(ad.mean_over_columns(t),
                                                  ad.mean_over_columns(t)))),
        ("exp", lambda t: ad.sum_all(ad.exp(ad.scale(t, 0.3)))),
        ("sigmoid", lambda t: ad.sum_all(ad.sigmoid(t))),
        ("log", lambda t: ad.sum_all(ad.log(ad.add(ad.mul(t, t),
                                                   ad.constant(np.ones((5, 3))))))),
        ("reciprocal", lambda t: ad.sum_all(ad.reciprocal(
            ad.add(ad.mul(t, t), ad.constant(np.ones((5, 3))))))),
        ("reshape", lambda t: ad.sum_all(ad.mul(ad.reshape(t, (3, 5)),
                                                ad.reshape(t, (3, 5))))),
    ]


def test_every_op_passes_finite_difference_check():
    x0, cases = _fd_cases()
    for name, f in cases:
        x = ad.parameter(x0.copy())
        err = ad.finite_diff_check(f, x, h=1e-6)
        assert err < 1e-5, f"{name}: rel err {err}"


def test_scalar_tensor_rules():
    with pytest.raises(ValueError):
        ad.Tensor(np.ones((2, 2, 2)))
    t = ad.constant(3.0)
    assert t.shape == () and t.item() == 3.0
    with pytest.raises(ValueError):
        ad.constant(np.ones((2, 2))).item()
