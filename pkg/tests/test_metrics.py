import numpy as np
import pytest

from cascomp import autodiff as ad
from cascomp import metrics as mx
from cascomp.errors import ContractViolation
from cascomp.rng import Stream


def rand_cloud(seed, n, scale=1.0):
    return (Stream(seed, "cloud").uniform(n * 3).reshape(n, 3) * 2 - 1) * scale


# --- chamfer -------------------------------------------------------------------

def test_chamfer_self_is_zero():
    p = rand_cloud(1, 40)
    assert mx.chamfer(p, p, "l1") == 0.0
    assert mx.chamfer(p, p, "l2") == 0.0


def test_chamfer_hand_case_one():
    p = [[0.0, 0.0, 0.0]]
    q = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
    assert mx.chamfer(p, q, "l1") == pytest.approx(1.0, abs=1e-15)
    assert mx.chamfer(p, q, "l2") == pytest.approx(1.0, abs=1e-15)


def test_chamfer_hand_case_quarter():
    p = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]
    q = [[0.0, 0.0, 0.0]]
    assert mx.chamfer(p, q, "l1") == pytest.approx(0.25, abs=1e-15)
    assert mx.chamfer(p, q, "l2") == pytest.approx(0.25, abs=1e-15)


def test_chamfer_symmetric():
    p, q = rand_cloud(2, 30), rand_cloud(3, 50)
    for variant in ("l1", "l2"):
        assert mx.chamfer(p, q, variant) == pytest.approx(mx.chamfer(q, p, variant), abs=0)


def test_chamfer_permutation_invariant():
    p, q = rand_cloud(4, 25), rand_cloud(5, 35)
    perm_p = p[Stream(6, "perm").permutation(25)]
    perm_q = q[Stream(7, "perm").permutation(35)]
    for variant in ("l1", "l2"):
        assert mx.chamfer(perm_p, perm_q, variant) == mx.chamfer(p, q, variant)


def test_chamfer_scaling_behavior():
    p, q = rand_cloud(8, 20), rand_cloud(9, 28)
    l1, l2 = mx.chamfer(p, q, "l1"), mx.chamfer(p, q, "l2")
    assert mx.chamfer(2 * p, 2 * q, "l1") == pytest.approx(2 * l1, abs=1e-9)
    assert mx.chamfer(2 * p, 2 * q, "l2") == pytest.approx(4 * l2, abs=1e-9)


def test_chamfer_empty_cloud_rejected():
    with pytest.raises(ContractViolation):
        mx.chamfer(np.zeros((0, 3)), rand_cloud(10, 5))
    with pytest.raises(ContractViolation):
        mx.chamfer(rand_cloud(10, 5), np.zeros((0, 3)), "l2")


def test_chamfer_matches_bruteforce_randomized():
    s = Stream(11, "pairs")
    for trial in range(60):
        n_p, n_q = 2 + s.below(120), 2 + s.below(120)
        p = rand_cloud(1000 + trial, n_p)
        q = rand_cloud(2000 + trial, n_q)
        for variant in ("l1", "l2"):
            assert mx.chamfer(p, q, variant) == pytest.approx(
                mx.chamfer_brute(p, q, variant), abs=1e-9)
        assert mx.fscore(p, q, 0.2) == pytest.approx(mx.fscore_brute(p, q, 0.2), abs=1e-12)


# --- fscore -----------------------------------------------------------------------

def test_fscore_identical_clouds():
    p = rand_cloud(12, 64)
    assert mx.fscore(p, p, 0.01) == 1.0


def test_fscore_outside_threshold():
    assert mx.fscore([[0, 0, 0]], [[0.02, 0, 0]], 0.01) == 0.0


def test_fscore_inside_threshold():
    assert mx.fscore([[0, 0, 0], [0.005, 0, 0]], [[0, 0, 0]], 0.01) == 1.0


def test_fscore_threshold_is_strict():
    # a point exactly at distance tau does not count
    assert mx.fscore([[0.01, 0, 0]], [[0, 0, 0]], 0.01) == 0.0


def test_fscore_tau_validation():
    with pytest.raises(ContractViolation):
        mx.fscore([[0, 0, 0]], [[0, 0, 0]], 0.0)


def test_metric_report_validation():
    with pytest.raises(ContractViolation):
        mx.MetricReport(-1.0, 0.0, 0.5)
    with pytest.raises(ContractViolation):
        mx.MetricReport(0.0, 0.0, 1.5)
    row = mx.MetricReport(0.0123, 0.0004, 0.5).csv_row()
    assert row.startswith("12.3")  # x1000 report convention


# --- differentiable chamfer ---------------------------------------------------------

def test_chamfer_grad_equal_clouds_zero():
    p = rand_cloud(13, 16)
    node = ad.param(p)
    loss = mx.chamfer_grad(node, p, "l2")
    assert float(loss.value) == 0.0
    ad.backward(loss)
    assert np.abs(node.grad).max() == 0.0
    # L1 variant uses subgradient 0 at zero distance
    node2 = ad.param(p)
    loss2 = mx.chamfer_grad(node2, p, "l1")
    assert float(loss2.value) == 0.0
    ad.backward(loss2)
    assert np.abs(node2.grad).max() == 0.0


def test_chamfer_grad_single_point_analytic():
    node = ad.param([[0.5, 0.0, 0.0]])
    loss = mx.chamfer_grad(node, [[0.0, 0.0, 0.0]], "l2")
    assert float(loss.value) == pytest.approx(0.25, abs=1e-15)
    ad.backward(loss)
    # d/dp of 0.5*(|p|^2 + |p|^2) with both means over one point = 2p*0.5*2 = 1.0
    assert np.allclose(node.grad, [[1.0, 0.0, 0.0]], atol=1e-15)


def test_chamfer_grad_value_matches_plain_chamfer():
    p, q = rand_cloud(14, 24), rand_cloud(15, 30)
    for variant in ("l1", "l2"):
        node = ad.constant(p)
        assert float(mx.chamfer_grad(ad.param(p), q, variant).value) == pytest.approx(
            mx.chamfer(p, q, variant), abs=1e-12)


@pytest.mark.parametrize("variant", ["l1", "l2"])
def test_chamfer_grad_finite_differences(variant):
    p = rand_cloud(16, 16)
    q = rand_cloud(17, 16)

    def build(leaves):
        return mx.chamfer_grad(leaves["p"], q, variant)

    report = ad.grad_check(build, {"p": p}, h=1e-6, tol=1e-5)
    assert report.passed, report.worst()
