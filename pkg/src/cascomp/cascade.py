"""Two-stage cascaded completion with feature-level distillation.

The cascade runs the completion twice over: a frozen reconstruction stage
upsamples the partial input into a dense estimate, an auxiliary encoder
turns that estimate into feature tokens, and the fused-completion stage
consumes the raw partial input plus those auxiliary tokens (channel-concat
followed by a linear fusion layer) to emit the final cloud:

    y = fused_stage(aux_encoder(recon_stage(x)), x)

Two frozen teachers supply distillation targets during training. Teacher A
is a cascade trained with its auxiliary branch fed the ground truth; its
auxiliary encoder's tokens guide the student's auxiliary features. Teacher B
is a single-stage model trained at twice the input resolution; its encoder
tokens guide the fused stage's encoder output. Token sets from different
clouds are aligned by nearest proxy centers. The training loss is

    total = completion loss + lambda1 * distill(aux) + lambda2 * distill(main)

with per-token channel KL (temperature-scaled) or plain MSE as the
distillation divergence. A progressive mode (two chained 2x stages, the
second consuming the first's points directly) exists for the
error-accumulation comparison.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .backbone import (BackboneConfig, CompletionBackbone, CompletionOutput,
                       EncoderOnly, FeatureTokens, ParamSet)
from .errors import ConfigError, ContractViolation
from .geometry import as_cloud, fps
from .metrics import chamfer_grad

CASCADE_MODES = ("auxiliary", "progressive", "none")
DISTILL_MODES = ("kl", "mse")


@dataclass
class LossConfig:
    lambda1: float = 1.0
    lambda2: float = 1.0
    tau: float = 1.0
    distill_mode: str = "kl"
    cascade_mode: str = "auxiliary"

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ContractViolation("distillation weights must be non-negative")
        if self.tau <= 0:
            raise ContractViolation("temperature must be positive")
        if self.distill_mode not in DISTILL_MODES:
            raise ContractViolation(f"unknown distill mode {self.distill_mode!r}")
        if self.cascade_mode not in CASCADE_MODES:
            raise ContractViolation(f"unknown cascade mode {self.cascade_mode!r}")


def build_fusion(cfg: BackboneConfig, seed: int) -> ParamSet:
    """Fusion layer mapping [student ; auxiliary] channels back to C.

    Initialized as an exact identity passthrough of the student half, so an
    untrained cascade behaves exactly like the plain encoder; the auxiliary
    half starts at zero and grows only through its gradients.
    """
    c = cfg.channels
    p = ParamSet()
    w = np.zeros((2 * c, c))
    w[:c] = np.eye(c)
    p.nodes["fusion.w"] = ad.param(w)
    p.nodes["fusion.b"] = ad.param(np.zeros((1, c)))
    return p


@dataclass
class CascadeModel:
    """All the pieces of one completion pipeline.

    auxiliary mode uses every field; `none` keeps only psi2 (single stage);
    progressive reuses psi1 as stage 1 and psi2 (configured at 2x input
    resolution) as stage 2, with phi/fusion unused.
    """
    psi1: CompletionBackbone | None
    phi: EncoderOnly | None
    fusion: ParamSet | None
    psi2: CompletionBackbone

    def trainable_params(self) -> dict[str, Node]:
        """Named trainable tensors; frozen members contribute nothing."""
        out: dict[str, Node] = {}
        for prefix, part in (("phi", self.phi), ("fusion", self.fusion), ("psi2", self.psi2)):
            if part is None:
                continue
            params = part if isinstance(part, ParamSet) else part.params
            for name, node in params.trainable().items():
                out[f"{prefix}.{name}"] = node
        return out

    def all_param_sets(self) -> dict[str, ParamSet]:
        out = {}
        for prefix, part in (("psi1", self.psi1), ("phi", self.phi),
                             ("fusion", self.fusion), ("psi2", self.psi2)):
            if part is not None:
                out[prefix] = part if isinstance(part, ParamSet) else part.params
        return out


@dataclass
class TeacherSet:
    """Frozen teacher models; only their encoders are consulted."""
    teacher_a: CascadeModel | None = None
    teacher_b: CompletionBackbone | None = None


def build_student(cfg: BackboneConfig, seed: int,
                  psi1: CompletionBackbone | None) -> CascadeModel:
    """Auxiliary-mode student: frozen psi1, phi initialized from its encoder."""
    if psi1 is None:
        raise ConfigError("auxiliary cascade requires a reconstruction model")
    psi1.params.freeze()
    phi = EncoderOnly(cfg, seed)
    phi.copy_encoder_from(psi1)
    return CascadeModel(psi1, phi, build_fusion(cfg, seed), CompletionBackbone(cfg, seed))


def reconstruct_shape(x, psi1: CompletionBackbone, groups: tuple | None = None) -> np.ndarray:
    """Stage-1 dense estimate as a plain cloud (no gradient flows out)."""
    return psi1.complete(x, groups=groups).fine.value


def aux_encode(p_rec, phi: EncoderOnly, groups: tuple | None = None) -> FeatureTokens:
    return phi.encode_cloud(p_rec, groups=groups)


def match_tokens(student_centers: np.ndarray, teacher_centers: np.ndarray) -> np.ndarray:
    """For each student center, the index of the nearest teacher center
    (squared distances; ties by lowest index)."""
    s = as_cloud(student_centers)
    t = as_cloud(teacher_centers)
    d2 = ((s[:, None, :] - t[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def fuse(z0: FeatureTokens, zaux: FeatureTokens, fusion: ParamSet) -> FeatureTokens:
    """Channel-concat student tokens with center-matched auxiliary tokens and
    mix through the fusion layer; centers stay the student's."""
    if z0.feats.shape != zaux.feats.shape:
        raise ContractViolation(
            f"token shape mismatch: {z0.feats.shape} vs {zaux.feats.shape}")
    mapping = match_tokens(z0.centers, zaux.centers)
    aligned = ad.gather_rows(zaux.feats, mapping)
    cat = ad.concat([z0.feats, aligned], axis=1)
    mixed = ad.add(ad.matmul(cat, fusion["fusion.w"]), fusion["fusion.b"])
    return FeatureTokens(z0.centers, mixed)


@dataclass
class CascadeForward:
    """Everything a training step needs from one auxiliary-mode forward."""
    output: CompletionOutput     # final result; .tokens is the pre-fusion surface
    z0: FeatureTokens
    zaux: FeatureTokens
    p_rec: np.ndarray


def forward_cascade(x, model: CascadeModel, aux_cloud=None,
                    x_groups=None, aux_groups=None) -> CascadeForward:
    """Auxiliary-mode forward pass.

    `aux_cloud` overrides the reconstruction as the auxiliary branch input
    (teacher A trains with the ground truth there). Group tuples are optional
    cached proxy geometry.
    """
    if model.phi is None or model.fusion is None:
        raise ConfigError("auxiliary forward needs phi and fusion")
    z0 = model.psi2.encode_cloud(x, groups=x_groups)
    if aux_cloud is None:
        if model.psi1 is None:
            raise ConfigError("auxiliary forward needs psi1 (or an aux_cloud override)")
        aux_cloud = reconstruct_shape(x, model.psi1)
    zaux = aux_encode(aux_cloud, model.phi, groups=aux_groups)
    fused = fuse(z0, zaux, model.fusion)
    out = model.psi2.decode_tokens(fused)
    return CascadeForward(CompletionOutput(out.coarse, out.fine, z0), z0, zaux,
                          np.asarray(aux_cloud))


def complete_fused(x, model: CascadeModel) -> CompletionOutput:
    """Full cascade inference; returned tokens are the pre-fusion encoder
    output (the distillation surface)."""
    return forward_cascade(x, model).output


def complete_progressive(x, stage1: CompletionBackbone,
                         stage2: CompletionBackbone) -> CompletionOutput:
    """Chain two 2x stages; stage 2 consumes stage 1's points directly."""
    if stage1.cfg.upsample_factor != 2 or stage2.cfg.upsample_factor != 2:
        raise ContractViolation("progressive mode needs two 2x stages")
    first = stage1.complete(x)
    return stage2.complete(first.fine.value)


def distill_loss(teacher: FeatureTokens, student: FeatureTokens,
                 mode: str = "kl", tau: float = 1.0) -> Node:
    """Feature distillation between center-aligned token sets.

    Teacher values are detached. KL mode softens each token's channels into a
    distribution at temperature tau and averages tau^2 * KL(teacher||student)
    over tokens; MSE mode is the plain mean squared difference.
    """
    if mode not in DISTILL_MODES:
        raise ContractViolation(f"unknown distill mode {mode!r}")
    if tau <= 0:
        raise ContractViolation("temperature must be positive")
    t_feats = teacher.feats.value if isinstance(teacher.feats, Node) else np.asarray(teacher.feats)
    if t_feats.shape != student.feats.shape:
        raise ContractViolation(
            f"token shape mismatch: {t_feats.shape} vs {student.feats.shape}")
    mapping = match_tokens(student.centers, teacher.centers)
    aligned = t_feats[mapping]
    n_c = student.feats.shape[0]

    if mode == "mse":
        return ad.mean(ad.square(ad.sub(student.feats, ad.constant(aligned))))

    t_logits = aligned / tau
    t_logits = t_logits - t_logits.max(axis=1, keepdims=True)
    p = np.exp(t_logits)
    p /= p.sum(axis=1, keepdims=True)
    s_logits = ad.scale(student.feats, 1.0 / tau)
    log_q = ad.sub(s_logits, ad.logsumexp(s_logits, axis=1, keepdims=True))
    # sum_i sum_c p*(ln p - ln q), averaged over tokens, times tau^2
    cross = ad.sum_(ad.mul(ad.constant(p), log_q))
    entropy = float((p * np.log(p)).sum())
    return ad.scale(ad.sub(ad.constant(entropy), cross), tau * tau / n_c)


@dataclass
class LossParts:
    l0: float
    l_kl_a: float
    l_kl_b: float
    l_pc: float


def completion_loss(out: CompletionOutput, g: np.ndarray,
                    coarse_target: np.ndarray | None = None) -> Node:
    """Coarse plus fine symmetric Chamfer (L1 variant) against the ground truth."""
    if coarse_target is None:
        coarse_target = g[fps(g, out.coarse.shape[0])]
    return ad.add(chamfer_grad(out.coarse, coarse_target, "l1"),
                  chamfer_grad(out.fine, g, "l1"))


def total_loss(batch, model: CascadeModel, teachers: TeacherSet | None,
               cfg: LossConfig, cache: "dict | None" = None) -> tuple[Node, LossParts]:
    """Batch-mean training loss for the configured cascade mode.

    Distillation requires the corresponding frozen teacher: lambda1 targets
    the auxiliary tokens (auxiliary mode only), lambda2 the main encoder
    tokens. Gradients reach phi, fusion, and psi2 only.
    """
    if cfg.cascade_mode == "progressive":
        raise ConfigError("progressive training goes through the stage-2 phase, not total_loss")
    if cfg.lambda1 > 0 and cfg.cascade_mode != "auxiliary":
        raise ConfigError("lambda1 distillation needs cascade_mode=auxiliary")
    if cfg.lambda1 > 0 and (teachers is None or teachers.teacher_a is None):
        raise ConfigError("lambda1 distillation needs teacher_a")
    if cfg.lambda2 > 0 and (teachers is None or teachers.teacher_b is None):
        raise ConfigError("lambda2 distillation needs teacher_b")
    cache = cache if cache is not None else {}

    l0_terms, kla_terms, klb_terms = [], [], []
    for sample in batch:
        entry = cache.setdefault(sample.id, {})
        coarse_target = entry.get("coarse_target")
        if coarse_target is None:
            coarse_target = entry["coarse_target"] = sample.G[fps(sample.G, model.psi2.cfg.n_q)]

        if cfg.cascade_mode == "auxiliary":
            if "p_rec" not in entry:
                entry["x_groups"] = model.psi2.proxy_groups(sample.x)
                entry["p_rec"] = reconstruct_shape(sample.x, model.psi1,
                                                   groups=entry["x_groups"])
                entry["aux_groups"] = model.phi.proxy_groups(entry["p_rec"])
            fwd = forward_cascade(sample.x, model, aux_cloud=entry["p_rec"],
                                  x_groups=entry["x_groups"],
                                  aux_groups=entry["aux_groups"])
            out, z0, zaux = fwd.output, fwd.z0, fwd.zaux
        else:
            if "x_groups" not in entry:
                entry["x_groups"] = model.psi2.proxy_groups(sample.x)
            out = model.psi2.complete(sample.x, groups=entry["x_groups"])
            z0, zaux = out.tokens, None

        l0_terms.append(completion_loss(out, sample.G, coarse_target))

        if cfg.lambda1 > 0:
            z_a = entry.get("z_a")
            if z_a is None:
                z_a = entry["z_a"] = _frozen_tokens(teachers.teacher_a.phi, sample.G)
            kla_terms.append(distill_loss(z_a, zaux, cfg.distill_mode, cfg.tau))
        if cfg.lambda2 > 0:
            z_b = entry.get("z_b")
            if z_b is None:
                z_b = entry["z_b"] = _frozen_tokens(teachers.teacher_b, sample.G_s)
            klb_terms.append(distill_loss(z_b, z0, cfg.distill_mode, cfg.tau))

    inv = 1.0 / len(batch)
    l0 = ad.scale(_sum_nodes(l0_terms), inv)
    total = l0
    l_kl_a = l_kl_b = 0.0
    if kla_terms:
        kla = ad.scale(_sum_nodes(kla_terms), inv)
        total = ad.add(total, ad.scale(kla, cfg.lambda1))
        l_kl_a = float(kla.value)
    if klb_terms:
        klb = ad.scale(_sum_nodes(klb_terms), inv)
        total = ad.add(total, ad.scale(klb, cfg.lambda2))
        l_kl_b = float(klb.value)
    return total, LossParts(float(l0.value), l_kl_a, l_kl_b, float(total.value))


def _sum_nodes(nodes: list[Node]) -> Node:
    acc = nodes[0]
    for node in nodes[1:]:
        acc = ad.add(acc, node)
    return acc


def _frozen_tokens(encoder, cloud) -> FeatureTokens:
    """Teacher tokens as plain values (the teacher must be frozen)."""
    params = encoder.params
    if not params.frozen:
        raise ConfigError("teacher models must be frozen before distillation")
    tokens = encoder.encode_cloud(cloud)
    return FeatureTokens(tokens.centers, ad.constant(tokens.feats.value))
