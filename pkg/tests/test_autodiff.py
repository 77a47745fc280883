import numpy as np
import pytest

from monorecon import autodiff as dn


def test_matmul_identity():
    out = dn.matmul(np.eye(2), np.array([1.0, 2.0]))
    assert np.array_equal(out, [1.0, 2.0])


def test_add_elementwise():
    assert np.array_equal(dn.add(np.array([1.0, 2.0]), np.array([3.0, 4.0])), [4.0, 6.0])


def test_matmul_hand_value():
    # [[1,2],[3,4]] @ [1,1] = [3,7]
    out = dn.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([1.0, 1.0]))
    assert np.array_equal(out, [3.0, 7.0])


def test_matmul_shape_mismatch_reports_both_shapes():
    with pytest.raises(ValueError) as exc:
        dn.matmul(np.ones((2, 3)), np.ones((2, 2)))
    assert "(2, 3)" in str(exc.value) and "(2, 2)" in str(exc.value)


def test_backward_square():
    # f(x) = x*x at x=3 -> grad 6
    tape = dn.Tape()
    x = tape.leaf(np.array(3.0), trainable=True)
    y = dn.mul(x, x)
    grads = tape.backward(y)
    assert grads[x] == pytest.approx(6.0, abs=1e-15)


def test_backward_column_sums():
    # f(x) = sum(A x), A = [[1,2],[3,4]] -> grad = column sums [4, 6]
    A = np.array([[1.0, 2.0], [3.0, 4.0]])
    tape = dn.Tape()
    x = tape.leaf(np.array([0.3, -0.7]), trainable=True)
    y = dn.asum(dn.matmul(A, x))
    grads = tape.backward(y)
    assert np.allclose(grads[x], [4.0, 6.0], atol=1e-15)


def test_frozen_input_gets_no_gradient():
    tape = dn.Tape()
    x = tape.leaf(np.array([1.0, 2.0]), trainable=True)
    w = tape.leaf(np.array([5.0, 5.0]), trainable=False)
    y = dn.asum(dn.mul(x, w))
    grads = tape.backward(y)
    assert x in grads
    assert w not in grads


def test_backward_rejects_non_scalar():
    tape = dn.Tape()
    x = tape.leaf(np.array([1.0, 2.0]), trainable=True)
    y = dn.mul(x, x)
    with pytest.raises(ValueError):
        tape.backward(y)


def test_operator_overloads_match_functions():
    tape = dn.Tape()
    x = tape.leaf(np.array([1.0, 4.0]), trainable=True)
    y = (x * 2.0 + 1.0 - x / 4.0) @ np.array([1.0, 1.0])
    assert dn.value(y) == pytest.approx(2.75 + 8.0)


def test_linearity_of_backward():
    # backward of a*f + b*g equals a*grad(f) + b*grad(g) to 1e-12
    rng = np.random.default_rng(7)
    for _ in range(20):
        a, b = rng.normal(size=2)
        x0 = rng.normal(size=4)

        def run(fn):
            tape = dn.Tape()
            x = tape.leaf(x0, trainable=True)
            return tape.backward(fn(x))[x]

        f = lambda x: dn.mean(dn.mul(x, x))
        g = lambda x: dn.asum(dn.sigmoid(x))
        combined = run(lambda x: dn.add(dn.mul(a, f(x)), dn.mul(b, g(x))))
        assert np.allclose(combined, a * run(f) + b * run(g), atol=1e-12)


def test_finite_diff_quadratic_is_nearly_exact():
    # central difference of a quadratic is exact to O(eps^2)
    report = dn.finite_diff_check(
        lambda v: dn.asum(dn.mul(v["x"], v["x"])),
        {"x": (np.array([3.0]), True)},
        eps=1e-5,
    )
    assert report.max_rel_error < 1e-8


def test_finite_diff_cubic():
    def cubic(v):
        x = v["x"]
        return dn.asum(dn.mul(x, dn.mul(x, x)))

    report = dn.finite_diff_check(cubic, {"x": (np.array([0.7, -1.2]), True)}, eps=1e-5)
    assert report.max_rel_error < 1e-7


def test_finite_diff_constant_function_is_zero():
    report = dn.finite_diff_check(
        lambda v: dn.asum(dn.mul(v["x"], 0.0)),
        {"x": (np.array([1.0, 2.0]), True)},
    )
    assert report.max_rel_error == 0.0


def test_finite_diff_random_compositions():
    # compositions of {matmul, add, multiply, sigmoid, mean, smooth-abs}
    for seed in range(100):
        rng = np.random.default_rng(seed)
        A = rng.normal(size=(3, 3))
        b = rng.normal(size=3)

        def f(v):
            x = v["x"]
            h = dn.sigmoid(dn.add(dn.matmul(A, x), b))
            h = dn.mul(h, x)
            return dn.mean(dn.smooth_abs(h))

        report = dn.finite_diff_check(f, {"x": (rng.normal(size=3), True)})
        assert report.max_rel_error < 1e-4, f"seed {seed}: {report}"


def test_forward_determinism():
    rng = np.random.default_rng(3)
    A = rng.normal(size=(4, 4))
    x = rng.normal(size=4)

    def run():
        return dn.sigmoid(dn.matmul(A, dn.smooth_abs(x)))

    first = run()
    for _ in range(3):
        assert np.array_equal(run(), first)


def test_gather_and_scatter_gradient():
    idx = np.array([0, 2, 2])
    report = dn.finite_diff_check(
        lambda v: dn.asum(dn.mul(dn.gather(v["x"], idx), np.array([1.0, 2.0, 3.0]))),
        {"x": (np.array([1.0, 2.0, 3.0, 4.0]), True)},
    )
    assert report.max_rel_error < 1e-9


def test_reductions_with_axis():
    x0 = np.arange(12.0).reshape(3, 4) / 7.0

    def f(v):
        m = dn.mean(v["x"], axis=1, keepdims=True)
        c = dn.sub(v["x"], dn.matmul(m, np.ones((1, 4))))
        return dn.asum(dn.mul(c, c))

    report = dn.finite_diff_check(f, {"x": (x0, True)})
    assert report.max_rel_error < 1e-7


def test_stack_concat_reshape_transpose_gradients():
    def f(v):
        a, b = v["a"], v["b"]
        s = dn.stack([a, b])
        c = dn.concat([dn.reshape(s, (6,)), b])
        return dn.asum(dn.mul(c, c))

    report = dn.finite_diff_check(
        f, {"a": (np.array([1.0, 2.0, 3.0]), True), "b": (np.array([-1.0, 0.5, 2.0]), True)}
    )
    assert report.max_rel_error < 1e-7

    def g(v):
        t = dn.transpose(v["m"], (1, 0))
        return dn.mean(dn.mul(t, t))

    report = dn.finite_diff_check(g, {"m": (np.arange(6.0).reshape(2, 3), True)})
    assert report.max_rel_error < 1e-7


def test_trig_and_exp_log_gradients():
    def f(v):
        x = v["x"]
        return dn.asum(dn.add(dn.sin(x), dn.mul(dn.cos(x), dn.log(dn.exp(x)))))

    report = dn.finite_diff_check(f, {"x": (np.array([0.3, 1.1, -0.4]), True)})
    assert report.max_rel_error < 1e-7


def test_clamp_gradient_zero_outside():
    tape = dn.Tape()
    x = tape.leaf(np.array([-2.0, 0.5, 2.0]), trainable=True)
    y = dn.asum(dn.clamp(x, 0.0, 1.0))
    grads = tape.backward(y)
    assert np.array_equal(grads[x], [0.0, 1.0, 0.0])


def test_mixed_tapes_rejected():
    t1, t2 = dn.Tape(), dn.Tape()
    a = t1.leaf(np.array(1.0))
    b = t2.leaf(np.array(2.0))
    with pytest.raises(ValueError):
        dn.add(a, b)
