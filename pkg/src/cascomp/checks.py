"""Self-check suites: finite-difference gradient gates and metric oracles.

These back the `check` CLI command and the acceptance tests. The gradient
suite compares every differentiable op and the full training loss against
central finite differences on a tiny configuration; the oracle suite
compares the index-accelerated metrics against exhaustive O(n*m) scans.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .backbone import CompletionBackbone, tiny_config
from .cascade import LossConfig, TeacherSet, build_student, total_loss
from .metrics import chamfer, chamfer_brute, fscore, fscore_brute
from .rng import Stream
from .shapegen import make_partial, make_shape, random_spec


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _rand(stream: Stream, *shape) -> np.ndarray:
    return stream.uniform(int(np.prod(shape))).reshape(shape) - 0.5


def _op_cases(seed: int):
    """(name, params, scalar builder) for every differentiable op."""
    s = Stream(seed, "op-cases")

    def w(shape):
        return _rand(s.spawn("w", str(shape)), *shape)

    a34, b34 = _rand(s, 3, 4), _rand(s, 3, 4) + 0.1
    row = _rand(s, 1, 4)
    pos = _rand(s, 3, 4) * 0.4 + 1.0
    m_a, m_b = _rand(s, 3, 4), _rand(s, 4, 2)
    bmm_a, bmm_b = _rand(s, 2, 3, 4), _rand(s, 2, 4, 3)
    ln_x, ln_g, ln_b = _rand(s, 4, 5), _rand(s, 1, 5) + 1.0, _rand(s, 1, 5)
    idx = np.array([0, 2, 2, 1])
    weight = {sh: w(sh) for sh in [(3, 4), (4, 3), (3, 2), (4,), (2, 3, 3), (3, 3), (2, 4, 4)]}

    def dot(node, arr):
        return ad.sum_(ad.mul(node, ad.constant(arr)))

    return [
        ("add", {"a": a34, "b": b34}, lambda p: dot(ad.add(p["a"], p["b"]), weight[(3, 4)])),
        ("add_broadcast", {"a": a34, "b": row}, lambda p: dot(ad.add(p["a"], p["b"]), weight[(3, 4)])),
        ("sub", {"a": a34, "b": b34}, lambda p: dot(ad.sub(p["a"], p["b"]), weight[(3, 4)])),
        ("mul", {"a": a34, "b": b34}, lambda p: dot(ad.mul(p["a"], p["b"]), weight[(3, 4)])),
        ("mul_broadcast", {"a": a34, "b": row}, lambda p: dot(ad.mul(p["a"], p["b"]), weight[(3, 4)])),
        ("scale", {"a": a34}, lambda p: dot(ad.scale(p["a"], -1.7), weight[(3, 4)])),
        ("relu", {"a": a34}, lambda p: dot(ad.relu(p["a"]), weight[(3, 4)])),
        ("gelu", {"a": a34}, lambda p: dot(ad.gelu(p["a"]), weight[(3, 4)])),
        ("exp", {"a": a34}, lambda p: dot(ad.exp(p["a"]), weight[(3, 4)])),
        ("log", {"a": pos}, lambda p: dot(ad.log(p["a"]), weight[(3, 4)])),
        ("square", {"a": a34}, lambda p: dot(ad.square(p["a"]), weight[(3, 4)])),
        ("sqrt", {"a": pos}, lambda p: dot(ad.sqrt(p["a"]), weight[(3, 4)])),
        ("sum_axis", {"a": a34}, lambda p: dot(ad.sum_(p["a"], axis=0, keepdims=True),
                                               weight[(3, 4)][:1])),
        ("mean_axis", {"a": a34}, lambda p: dot(ad.mean(p["a"], axis=1), weight[(4,)][:3])),
        ("mean_sorted", {"a": a34}, lambda p: dot(ad.mean_sorted(p["a"], axis=0, keepdims=True),
                                                  weight[(3, 4)][:1])),
        ("max_axis", {"a": a34}, lambda p: dot(ad.max_(p["a"], axis=1), weight[(4,)][:3])),
        ("matmul", {"a": m_a, "b": m_b}, lambda p: dot(ad.matmul(p["a"], p["b"]), weight[(3, 2)])),
        ("transpose", {"a": m_a}, lambda p: dot(ad.transpose(p["a"]), weight[(4, 3)])),
        ("reshape", {"a": a34}, lambda p: dot(ad.reshape(p["a"], (4, 3)), weight[(4, 3)])),
        ("permute", {"a": bmm_a}, lambda p: dot(ad.permute(p["a"], (1, 0, 2)),
                                                np.swapaxes(weight[(2, 4, 4)][:, :3, :], 0, 1))),
        ("bmm", {"a": bmm_a, "b": bmm_b}, lambda p: dot(ad.bmm(p["a"], p["b"]), weight[(2, 3, 3)])),
        ("gather_rows", {"a": a34}, lambda p: dot(ad.gather_rows(p["a"], idx),
                                                  np.vstack([weight[(3, 4)], weight[(3, 4)][:1]]))),
        ("narrow", {"a": a34}, lambda p: dot(ad.narrow(p["a"], 1, 1, 2), weight[(3, 2)])),
        ("concat", {"a": m_a, "b": b34}, lambda p: dot(ad.concat([p["a"], p["b"]], axis=1),
                                                       np.hstack([weight[(3, 4)], weight[(3, 4)]]))),
        ("softmax", {"a": a34}, lambda p: dot(ad.softmax(p["a"], axis=1), weight[(3, 4)])),
        ("logsumexp", {"a": a34}, lambda p: dot(ad.logsumexp(p["a"], axis=1, keepdims=True),
                                                weight[(3, 4)][:, :1])),
        ("layernorm", {"x": ln_x, "g": ln_g, "b": ln_b},
         lambda p: dot(ad.layernorm(p["x"], p["g"], p["b"]), _rand(Stream(seed, "lnw"), 4, 5))),
    ]


def run_op_grad_checks(tol: float = 1e-6, seed: int = 0) -> list[CheckResult]:
    """Finite-difference check of each op's registered derivative."""
    results = []
    for name, params, build in _op_cases(seed):
        report = ad.grad_check(build, params, h=1e-5, tol=tol)
        worst = report.worst()
        results.append(CheckResult(f"grad/{name}", report.passed,
                                   f"max rel err {worst.rel_err:.3e} (tol {tol:g})"))
    return results


def model_fd_check(loss_fn, params: dict[str, Node], n_entries: int = 20,
                   h: float = 1e-5, tol: float = 1e-4, seed: int = 0) -> CheckResult:
    """Central finite differences on randomly sampled parameter entries of a
    live model; `loss_fn` must rebuild the scalar loss graph on each call."""
    for node in params.values():
        node.grad = None
    loss = loss_fn()
    ad.backward(loss)
    analytic = {}
    for name, node in params.items():
        analytic[name] = node.grad.copy() if node.grad is not None else np.zeros_like(node.value)
        node.grad = None

    pick = Stream(seed, "model-fd")
    names = sorted(params)
    worst = 0.0
    for _ in range(n_entries):
        name = names[pick.below(len(names))]
        node = params[name]
        flat = node.value.reshape(-1)
        i = pick.below(flat.size)
        keep = flat[i]
        flat[i] = keep + h
        f_plus = float(loss_fn().value.reshape(()))
        flat[i] = keep - h
        f_minus = float(loss_fn().value.reshape(()))
        flat[i] = keep
        g_num = (f_plus - f_minus) / (2.0 * h)
        g_ana = analytic[name].reshape(-1)[i]
        worst = max(worst, abs(g_ana - g_num) / max(1.0, abs(g_num)))
    return CheckResult("grad/model", worst <= tol, f"max rel err {worst:.3e} (tol {tol:g})")


def build_tiny_student(seed: int = 0):
    """Tiny auxiliary-mode student plus frozen teachers and one sample."""
    cfg = tiny_config()
    n = cfg.n
    spec = random_spec("torus", Stream(seed, "spec"))
    g = make_shape(spec, 4 * n, seed + 1)
    sample = make_partial(g, "simple", seed + 2, sample_id=0)

    psi1 = CompletionBackbone(cfg, seed + 10)
    student = build_student(cfg, seed + 20, psi1)
    teacher_a_phi = build_student(cfg, seed + 30, CompletionBackbone(cfg, seed + 31))
    for ps in teacher_a_phi.all_param_sets().values():
        ps.freeze()
    from .backbone import BackboneConfig
    teacher_b = CompletionBackbone(
        BackboneConfig(n=2 * n, upsample_factor=2, n_c=cfg.n_c, k=cfg.k,
                       channels=cfg.channels, encoder_layers=cfg.encoder_layers,
                       decoder_layers=cfg.decoder_layers, heads=cfg.heads, n_q=cfg.n_q),
        seed + 40)
    teacher_b.params.freeze()
    teachers = TeacherSet(teacher_a_phi, teacher_b)
    return student, teachers, sample


def run_total_loss_grad_check(tol: float = 1e-4, n_entries: int = 20,
                              seed: int = 0) -> CheckResult:
    """Finite-difference gate on the full training loss (completion plus both
    distillation terms) at the tiny configuration."""
    student, teachers, sample = build_tiny_student(seed)
    cfg = LossConfig(lambda1=1.0, lambda2=1.0, tau=1.0, distill_mode="kl")

    def loss_fn():
        return total_loss([sample], student, teachers, cfg, cache={})[0]

    result = model_fd_check(loss_fn, student.trainable_params(),
                            n_entries=n_entries, tol=tol, seed=seed)
    return CheckResult("grad/total_loss", result.passed, result.detail)


def run_grad_suite(seed: int = 0) -> list[CheckResult]:
    results = run_op_grad_checks(tol=1e-4, seed=seed)
    results.append(run_total_loss_grad_check(seed=seed))
    return results


def run_oracle_suite(pairs: int = 200, max_points: int = 512,
                     tol: float = 1e-9, seed: int = 0) -> list[CheckResult]:
    """Index-accelerated chamfer/fscore vs exhaustive scans on random pairs."""
    s = Stream(seed, "oracle")
    worst = {"cd_l1": 0.0, "cd_l2": 0.0, "fscore": 0.0}
    for _ in range(pairs):
        n_p = 2 + s.below(max_points - 1)
        n_q = 2 + s.below(max_points - 1)
        p = s.uniform(n_p * 3).reshape(n_p, 3)
        q = s.uniform(n_q * 3).reshape(n_q, 3)
        worst["cd_l1"] = max(worst["cd_l1"], abs(chamfer(p, q, "l1") - chamfer_brute(p, q, "l1")))
        worst["cd_l2"] = max(worst["cd_l2"], abs(chamfer(p, q, "l2") - chamfer_brute(p, q, "l2")))
        worst["fscore"] = max(worst["fscore"], abs(fscore(p, q, 0.05) - fscore_brute(p, q, 0.05)))
    return [CheckResult(f"oracle/{k}", v <= tol, f"max abs diff {v:.3e} (tol {tol:g})")
            for k, v in worst.items()]
