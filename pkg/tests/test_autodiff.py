import math

import numpy as np
import pytest

from cascomp import autodiff as ad
from cascomp.checks import run_op_grad_checks
from cascomp.errors import ContractViolation, DomainError
from cascomp.rng import Stream


def test_add_values():
    out = ad.add(ad.constant([1.0, 2.0]), ad.constant([3.0, 4.0]))
    assert np.array_equal(out.value, [4.0, 6.0])


def test_relu_values():
    out = ad.relu(ad.constant([-1.0, 0.0, 2.0]))
    assert np.array_equal(out.value, [0.0, 0.0, 2.0])


def test_mean_of_square():
    out = ad.mean(ad.square(ad.constant([3.0, 4.0])))
    assert out.value == pytest.approx(12.5, abs=0)


def test_matmul_identity():
    a = Stream(0, "a").uniform(12).reshape(3, 4)
    out = ad.matmul(ad.constant(a), ad.constant(np.eye(4)))
    assert np.allclose(out.value, a, atol=0)


def test_matmul_hand_case():
    out = ad.matmul(ad.constant([[1.0, 2.0]]), ad.constant([[3.0], [4.0]]))
    assert np.array_equal(out.value, [[11.0]])


def test_matmul_against_triple_loop():
    s = Stream(7, "matmul")
    a = s.uniform(20).reshape(4, 5)
    b = s.uniform(15).reshape(5, 3)
    expect = np.zeros((4, 3))
    for i in range(4):
        for j in range(3):
            for k in range(5):
                expect[i, j] += a[i, k] * b[k, j]
    got = ad.matmul(ad.constant(a), ad.constant(b)).value
    assert np.abs(got - expect).max() <= 1e-12


def test_matmul_shape_error():
    with pytest.raises(ContractViolation):
        ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))


def test_add_shape_error():
    with pytest.raises(ContractViolation):
        ad.add(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 2))))
    with pytest.raises(ContractViolation):
        # implicit rank promotion is not allowed
        ad.add(ad.constant(np.ones((2, 3))), ad.constant(np.ones(3)))


def test_log_domain_error():
    with pytest.raises(DomainError):
        ad.log(ad.constant([1.0, 0.0]))


def test_softmax_analytic():
    out = ad.softmax(ad.constant([[0.0, math.log(2.0)]]), axis=1)
    assert np.allclose(out.value, [[1 / 3, 2 / 3]], atol=1e-15)


def test_softmax_constant_row():
    out = ad.softmax(ad.constant([[5.5, 5.5, 5.5]]), axis=1)
    assert np.allclose(out.value, [[1 / 3, 1 / 3, 1 / 3]], atol=1e-15)


def test_softmax_no_overflow():
    out = ad.softmax(ad.constant([[1000.0, 0.0]]), axis=1)
    assert np.all(np.isfinite(out.value))
    assert out.value[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_softmax_rows_and_shift_invariance():
    s = Stream(3, "softmax")
    for trial in range(50):
        x = s.uniform(24).reshape(4, 6) * 10 - 5
        p = ad.softmax(ad.constant(x), axis=1).value
        assert np.abs(p.sum(axis=1) - 1.0).max() <= 1e-12
        shifted = ad.softmax(ad.constant(x + 13.7), axis=1).value
        assert np.abs(p - shifted).max() <= 1e-12


def test_layernorm_constant_row_is_zero():
    x = ad.constant(np.full((2, 5), 3.3))
    out = ad.layernorm(x, ad.constant(np.ones(5)), ad.constant(np.zeros(5)))
    assert np.abs(out.value).max() == 0.0


def test_layernorm_already_normalized():
    x = ad.constant([[1.0, -1.0]])
    out = ad.layernorm(x, ad.constant(np.ones(2)), ad.constant(np.zeros(2)), eps=1e-14)
    assert np.allclose(out.value, [[1.0, -1.0]], atol=1e-7)


def test_layernorm_gradient():
    s = Stream(5, "ln")
    params = {"x": s.uniform(20).reshape(4, 5),
              "g": s.uniform(5).reshape(1, 5) + 0.5,
              "b": s.uniform(5).reshape(1, 5)}
    w = s.uniform(20).reshape(4, 5)

    def build(p):
        return ad.sum_(ad.mul(ad.layernorm(p["x"], p["g"], p["b"]), ad.constant(w)))

    report = ad.grad_check(build, params, tol=1e-6)
    assert report.passed, report.worst()


def test_backward_sum_of_squares():
    x = ad.param([3.0, -2.0, 0.5])
    ad.backward(ad.sum_(ad.square(x)))
    assert np.allclose(x.grad, [6.0, -4.0, 1.0], atol=0)


def test_backward_matmul_pattern():
    a = ad.param([[1.0, 2.0], [3.0, 4.0]])
    b = ad.constant([[5.0, 6.0], [7.0, 8.0]])
    ad.backward(ad.sum_(ad.matmul(a, b)))
    # dA = ones @ B^T
    assert np.allclose(a.grad, np.ones((2, 2)) @ b.value.T, atol=0)


def test_backward_requires_scalar_root():
    x = ad.param([1.0, 2.0])
    with pytest.raises(ContractViolation):
        ad.backward(ad.square(x))


def test_backward_fanout_accumulates_both_paths():
    # root = sum(2x + 3x) -> grad 5 per entry
    x = ad.param([1.0, 4.0])
    root = ad.sum_(ad.add(ad.scale(x, 2.0), ad.scale(x, 3.0)))
    ad.backward(root)
    assert np.allclose(x.grad, [5.0, 5.0], atol=0)


def test_repeated_backward_accumulates():
    x = ad.param([2.0])
    root = ad.sum_(ad.square(x))
    ad.backward(root)
    first = x.grad.copy()
    ad.backward(root)
    assert np.allclose(x.grad, 2 * first, atol=0)


def test_frozen_leaves_build_no_graph():
    x = ad.constant([1.0, 2.0])
    out = ad.square(x)
    assert out.parents == () and not out.requires_grad


def test_grad_check_quadratic():
    report = ad.grad_check(lambda p: ad.sum_(ad.square(p["x"])), {"x": np.array([3.0])},
                           tol=1e-9)
    assert report.passed
    assert report.entries[0].rel_err < 1e-9


def test_grad_check_constant_function():
    report = ad.grad_check(lambda p: ad.sum_(ad.mul(p["x"], ad.constant(np.zeros(3)))),
                           {"x": np.ones(3)}, tol=1e-12)
    assert report.passed
    assert report.entries[0].rel_err == 0.0


def test_all_ops_pass_fd_across_seeds():
    # randomized-shape gradient property across many seeds
    for seed in range(100):
        for result in run_op_grad_checks(tol=1e-6, seed=seed):
            assert result.passed, f"seed {seed}: {result.name} {result.detail}"


def test_debug_mode_flags_nonfinite():
    ad.set_debug(True)
    try:
        with pytest.raises(DomainError):
            ad.exp(ad.constant([1000.0]))  # overflows to inf
    finally:
        ad.set_debug(False)


def test_max_reduction_tie_goes_to_lowest_index():
    x = ad.param([[1.0, 3.0, 3.0]])
    ad.backward(ad.sum_(ad.max_(x, axis=1)))
    assert np.array_equal(x.grad, [[0.0, 1.0, 0.0]])


def test_gather_rows_accumulates_repeats():
    x = ad.param([[1.0], [2.0]])
    ad.backward(ad.sum_(ad.gather_rows(x, np.array([0, 0, 1]))))
    assert np.array_equal(x.grad, [[2.0], [1.0]])
