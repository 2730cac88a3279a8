"""Evaluation metrics: Chamfer distance (L1/L2 variants) and F-score.

Conventions pinned for determinism:
  - chamfer L1 = 0.5 * (mean_p min_q |p-q| + mean_q min_p |q-p|)
  - chamfer L2 = same with squared distances
  - fscore uses a strict `< tau` threshold, tau = 0.01 in normalized units
Values are stored unscaled; the x1000 convention is applied at report time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ContractViolation
from .geometry import SpatialIndex, as_cloud


@dataclass
class MetricReport:
    cd_l1: float
    cd_l2: float
    fscore_1pct: float

    def __post_init__(self):
        if self.cd_l1 < 0 or self.cd_l2 < 0:
            raise ContractViolation("chamfer distances must be non-negative")
        if not 0.0 <= self.fscore_1pct <= 1.0:
            raise ContractViolation("fscore must lie in [0, 1]")

    @staticmethod
    def csv_header() -> str:
        return "cd_l1,cd_l2,fscore"

    def csv_row(self, scale_cd: float = 1000.0) -> str:
        return f"{self.cd_l1 * scale_cd:.6f},{self.cd_l2 * scale_cd:.6f},{self.fscore_1pct:.6f}"


def _check_pair(p, q):
    p = as_cloud(p)
    q = as_cloud(q)
    if len(p) == 0 or len(q) == 0:
        raise ContractViolation("chamfer/fscore need non-empty clouds")
    return p, q


def _mean_sorted(d: np.ndarray) -> float:
    # summing in sorted order makes the value exactly permutation-invariant
    return float(np.sort(d).mean())


def chamfer(p, q, variant: str = "l1") -> float:
    """Symmetric Chamfer distance between two clouds (index-accelerated)."""
    p, q = _check_pair(p, q)
    d_pq = SpatialIndex(q).nn_dist(p)
    d_qp = SpatialIndex(p).nn_dist(q)
    if variant == "l1":
        return 0.5 * (_mean_sorted(d_pq) + _mean_sorted(d_qp))
    if variant == "l2":
        return 0.5 * (_mean_sorted(d_pq ** 2) + _mean_sorted(d_qp ** 2))
    raise ContractViolation(f"unknown chamfer variant {variant!r}")


def fscore(pred, gt, tau: float = 0.01) -> float:
    """F-score at threshold tau: harmonic mean of NN precision and recall."""
    if tau <= 0:
        raise ContractViolation("fscore tau must be positive")
    p, q = _check_pair(pred, gt)
    precision = float((SpatialIndex(q).nn_dist(p) < tau).mean())
    recall = float((SpatialIndex(p).nn_dist(q) < tau).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def evaluate_pair(pred, gt, tau: float = 0.01) -> MetricReport:
    """All three metrics with shared NN queries."""
    p, q = _check_pair(pred, gt)
    d_pq = SpatialIndex(q).nn_dist(p)
    d_qp = SpatialIndex(p).nn_dist(q)
    cd_l1 = 0.5 * (_mean_sorted(d_pq) + _mean_sorted(d_qp))
    cd_l2 = 0.5 * (_mean_sorted(d_pq ** 2) + _mean_sorted(d_qp ** 2))
    precision = float((d_pq < tau).mean())
    recall = float((d_qp < tau).mean())
    f1 = 0.0 if precision + recall == 0.0 else 2.0 * precision * recall / (precision + recall)
    return MetricReport(float(cd_l1), float(cd_l2), f1)


def chamfer_brute(p, q, variant: str = "l1") -> float:
    """O(|P|*|Q|) reference implementation (oracle for the accelerated path)."""
    p, q = _check_pair(p, q)
    d2 = ((p[:, None, :] - q[None, :, :]) ** 2).sum(axis=2)
    if variant == "l1":
        return 0.5 * (np.sqrt(d2.min(axis=1)).mean() + np.sqrt(d2.min(axis=0)).mean())
    if variant == "l2":
        return 0.5 * (d2.min(axis=1).mean() + d2.min(axis=0).mean())
    raise ContractViolation(f"unknown chamfer variant {variant!r}")


def fscore_brute(pred, gt, tau: float = 0.01) -> float:
    p, q = _check_pair(pred, gt)
    d2 = ((p[:, None, :] - q[None, :, :]) ** 2).sum(axis=2)
    precision = float((np.sqrt(d2.min(axis=1)) < tau).mean())
    recall = float((np.sqrt(d2.min(axis=0)) < tau).mean())
    if precision + recall == 0.0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def chamfer_grad(p: ad.Node, q, variant: str = "l1") -> ad.Node:
    """Differentiable Chamfer between a predicted cloud node and a fixed target.

    Nearest-neighbor matching is computed on current values and held fixed for
    differentiation (standard piecewise treatment; L1 uses subgradient 0 at
    exactly-zero distances).
    """
    qv = as_cloud(q)
    pv = p.value
    if pv.ndim != 2 or pv.shape[1] != 3 or len(pv) == 0 or len(qv) == 0:
        raise ContractViolation("chamfer_grad needs non-empty (n, 3) clouds")
    match_pq = SpatialIndex(qv).nn_index(pv)   # for each p, its nearest q
    match_qp = SpatialIndex(pv).nn_index(qv)   # for each q, its nearest p

    diff_pq = ad.sub(p, ad.constant(qv[match_pq]))
    diff_qp = ad.sub(ad.gather_rows(p, match_qp), ad.constant(qv))
    d2_pq = ad.sum_(ad.square(diff_pq), axis=1)
    d2_qp = ad.sum_(ad.square(diff_qp), axis=1)
    if variant == "l1":
        term = ad.add(ad.mean(ad.sqrt(d2_pq)), ad.mean(ad.sqrt(d2_qp)))
    elif variant == "l2":
        term = ad.add(ad.mean(d2_pq), ad.mean(d2_qp))
    else:
        raise ContractViolation(f"unknown chamfer variant {variant!r}")
    return ad.scale(term, 0.5)
