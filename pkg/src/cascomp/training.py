"""Optimizer, training phases, evaluation harness, checkpoint persistence.

Five phases cover the full pipeline. `recon` pre-trains a single-stage
upsampling model (4x for the auxiliary cascade, 2x for the progressive
stage-1). `teacher-a` trains the cascade architecture with its auxiliary
branch fed the ground truth. `teacher-b` trains a single-stage model whose
inputs are privileged 2N-point crops built from the ground truth.
`student` trains the final model in one of three cascade modes (auxiliary,
progressive stage-2, or none), optionally distilling from the frozen
teachers. `baseline` is the plain single-stage comparison model.

Every phase is a pure function of (config, dataset manifest, master seed):
model initializations, batch order, and all protocol randomness derive from
named Philox streams, and optimizer state plus parameters are rounded to
float32 exactly at checkpoint boundaries so an interrupted-and-resumed run
reproduces the uninterrupted one bit for bit.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .backbone import BackboneConfig, CompletionBackbone, EncoderOnly, ParamSet
from .cascade import (CascadeModel, LossConfig, TeacherSet, build_fusion,
                      complete_progressive, completion_loss, forward_cascade,
                      total_loss)
from .errors import ConfigError, ContractViolation, ParseError
from .geometry import random_downsample, viewpoint_crop
from .metrics import MetricReport, evaluate_pair
from .rng import Stream, splitmix64, _tag_value
from .shapegen import Dataset, Sample

PHASES = ("recon", "teacher-a", "teacher-b", "student", "baseline")
DEFAULT_EPOCHS = {"recon": 60, "teacher-a": 60, "teacher-b": 120,
                  "student": 60, "baseline": 60}


def role_seed(master_seed: int, role: str) -> int:
    """Per-role model seed; the main completion model of every phase shares
    the role 'model' so matched comparisons start from identical weights."""
    return splitmix64(splitmix64(master_seed) ^ _tag_value(role))


@dataclass
class TrainConfig:
    phase: str
    epochs: int | None = None
    batch_size: int = 8
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    master_seed: int = 0
    eval_every: int = 10
    loss: LossConfig = field(default_factory=LossConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.epochs is None:
            self.epochs = DEFAULT_EPOCHS[self.phase]
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch size must be >= 1")


# ---------------------------------------------------------------------------
# Adam

@dataclass
class AdamState:
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def quantize_float32(self) -> None:
        for d in (self.m, self.v):
            for k in d:
                d[k] = d[k].astype(np.float32).astype(np.float64)


def adam_step(params: dict[str, Node], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; consumes and clears node gradients."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for name in sorted(params):
        node = params[name]
        g = node.grad if node.grad is not None else np.zeros_like(node.value)
        if g.shape != node.value.shape:
            raise ContractViolation(f"gradient shape mismatch for {name!r}")
        m = state.m.setdefault(name, np.zeros_like(node.value))
        v = state.v.setdefault(name, np.zeros_like(node.value))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        node.value = node.value - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        node.grad = None


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"CCKP"
CKPT_VERSION = 1
_DTYPE_F32 = 0


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]     # float32
    config: dict[str, str]            # echo: phase, epoch, model configs

    @property
    def phase(self) -> str:
        return self.config["phase"]

    @property
    def epoch(self) -> int:
        return int(self.config["epoch"])


def save_checkpoint(path: str, ck: Checkpoint) -> None:
    echo = "\n".join(f"{k}={ck.config[k]}" for k in sorted(ck.config)).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        fh.write(struct.pack("<I", len(ck.arrays)))
        for name in sorted(ck.arrays):
            arr = np.ascontiguousarray(ck.arrays[name], dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", _DTYPE_F32, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())
        fh.write(struct.pack("<I", len(echo)))
        fh.write(echo)


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise ParseError(f"{path}: truncated {what} at byte {off}")
        chunk = blob[off:off + n]
        off += n
        return chunk

    if take(4, "magic") != CKPT_MAGIC:
        raise ParseError(f"{path}: bad magic at byte 0")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CKPT_VERSION:
        raise ParseError(f"{path}: unsupported version {version} at byte 4")
    (count,) = struct.unpack("<I", take(4, "entry count"))
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        dtype, rank = struct.unpack("<BB", take(2, "dtype/rank"))
        if dtype != _DTYPE_F32:
            raise ParseError(f"{path}: unknown dtype code {dtype} at byte {off - 2}")
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n_items = int(np.prod(dims)) if rank else 1
        payload = take(4 * n_items, f"payload of {name!r}")
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    (echo_len,) = struct.unpack("<I", take(4, "config length"))
    echo = take(echo_len, "config echo").decode("utf-8")
    config = {}
    for line in echo.splitlines():
        if line:
            key, _, value = line.partition("=")
            config[key] = value
    return Checkpoint(arrays, config)


def _backbone_config_echo(cfg: BackboneConfig, prefix: str) -> dict[str, str]:
    return {f"{prefix}.{k}": str(v) for k, v in vars(cfg).items()}


def _backbone_config_from_echo(config: dict[str, str], prefix: str) -> BackboneConfig:
    fields = {k[len(prefix) + 1:]: int(v) for k, v in config.items()
              if k.startswith(prefix + ".")}
    if not fields:
        raise ConfigError(f"checkpoint echo has no {prefix!r} backbone config")
    return BackboneConfig(**fields)


# ---------------------------------------------------------------------------
# phase assembly

@dataclass
class PhaseModels:
    """Trainable parts plus frozen collaborators for one phase."""
    parts: dict[str, object]            # part name -> model / ParamSet (checkpointed)
    trainable: dict[str, Node]
    teachers: TeacherSet
    stage1: CompletionBackbone | None   # progressive stage 1 (frozen)
    cascade: CascadeModel | None


def _part_params(part) -> ParamSet:
    return part if isinstance(part, ParamSet) else part.params


def _collect_arrays(parts: dict[str, object]) -> dict[str, np.ndarray]:
    out = {}
    for prefix, part in parts.items():
        for name, value in _part_params(part).values_float32().items():
            out[f"{prefix}.{name}"] = value
    return out


def _load_part(part, ck: Checkpoint, prefix: str) -> None:
    values = {name[len(prefix) + 1:]: arr for name, arr in ck.arrays.items()
              if name.startswith(prefix + ".") and not name.startswith("adam.")}
    if not values:
        raise ConfigError(f"checkpoint has no arrays for part {prefix!r}")
    _part_params(part).load_values(values)


def _restore_backbone(ck: Checkpoint, part: str) -> CompletionBackbone:
    cfg = _backbone_config_from_echo(ck.config, f"cfg.{part}")
    model = CompletionBackbone(cfg, 0)
    _load_part(model, ck, part)
    return model


def required_prerequisites(cfg: TrainConfig) -> list[str]:
    if cfg.phase != "student":
        return []
    need = []
    if cfg.loss.cascade_mode in ("auxiliary", "progressive"):
        need.append("recon")
    if cfg.loss.cascade_mode == "auxiliary" and cfg.loss.lambda1 > 0:
        need.append("teacher-a")
    if cfg.loss.lambda2 > 0:
        need.append("teacher-b")
    return need


def build_phase(cfg: TrainConfig, dataset: Dataset,
                prereqs: dict[str, Checkpoint]) -> PhaseModels:
    for phase in required_prerequisites(cfg):
        if phase not in prereqs:
            raise ConfigError(f"phase {cfg.phase!r} requires a {phase!r} checkpoint")
    n = dataset.n
    bb = replace(cfg.backbone, n=n)
    seed = role_seed(cfg.master_seed, "model")

    if cfg.phase in ("recon", "baseline"):
        model = CompletionBackbone(bb, seed)
        return PhaseModels({"psi2": model}, _named(model, "psi2"), TeacherSet(), None, None)

    if cfg.phase == "teacher-a":
        phi = EncoderOnly(replace(bb, upsample_factor=4), role_seed(cfg.master_seed, "phi"))
        if "recon" in prereqs:
            recon = _restore_backbone(prereqs["recon"], "psi2")
            phi.copy_encoder_from(recon)
        fusion = build_fusion(bb, role_seed(cfg.master_seed, "fusion"))
        psi2 = CompletionBackbone(replace(bb, upsample_factor=4), seed)
        model = CascadeModel(None, phi, fusion, psi2)
        return PhaseModels({"phi": phi, "fusion": fusion, "psi2": psi2},
                           model.trainable_params(), TeacherSet(), None, model)

    if cfg.phase == "teacher-b":
        model = CompletionBackbone(replace(bb, n=2 * n, upsample_factor=2), seed)
        return PhaseModels({"psi2": model}, _named(model, "psi2"), TeacherSet(), None, None)

    # student
    mode = cfg.loss.cascade_mode
    teachers = TeacherSet()
    if cfg.loss.lambda1 > 0:
        ck = prereqs["teacher-a"]
        phi_a = EncoderOnly(_backbone_config_from_echo(ck.config, "cfg.phi"), 0)
        _load_part(phi_a, ck, "phi")
        phi_a.params.freeze()
        teachers.teacher_a = CascadeModel(None, phi_a, None, None)
    if cfg.loss.lambda2 > 0:
        teachers.teacher_b = _restore_backbone(prereqs["teacher-b"], "psi2")
        teachers.teacher_b.params.freeze()

    if mode == "none":
        model = CompletionBackbone(bb, seed)
        return PhaseModels({"psi2": model}, _named(model, "psi2"), teachers, None,
                           CascadeModel(None, None, None, model))

    recon = _restore_backbone(prereqs["recon"], "psi2")
    recon.params.freeze()
    if mode == "progressive":
        if recon.cfg.upsample_factor != 2:
            raise ConfigError("progressive student needs a 2x recon checkpoint")
        stage2 = CompletionBackbone(replace(bb, n=2 * n, upsample_factor=2), seed)
        return PhaseModels({"psi1": recon, "psi2": stage2}, _named(stage2, "psi2"),
                           teachers, recon, None)

    if recon.cfg.upsample_factor != 4:
        raise ConfigError("auxiliary student needs a 4x recon checkpoint")
    phi = EncoderOnly(replace(bb, upsample_factor=4), role_seed(cfg.master_seed, "phi"))
    phi.copy_encoder_from(recon)
    fusion = build_fusion(bb, role_seed(cfg.master_seed, "fusion"))
    psi2 = CompletionBackbone(replace(bb, upsample_factor=4), seed)
    model = CascadeModel(recon, phi, fusion, psi2)
    return PhaseModels({"psi1": recon, "phi": phi, "fusion": fusion, "psi2": psi2},
                       model.trainable_params(), teachers, None, model)


def _named(model, prefix: str) -> dict[str, Node]:
    return {f"{prefix}.{name}": node for name, node in model.params.trainable().items()}


def teacher_b_input(sample: Sample, n: int) -> np.ndarray:
    """Privileged 2N input for teacher-b training: drop a random count in
    [N, 2N] of the points farthest from the sample viewpoint, downsample to 2N."""
    n_remove = Stream(sample.seed, "teacherb", "nremove").randint(n, 2 * n)
    survivors = viewpoint_crop(sample.G, sample.viewpoint, n_remove)
    return random_downsample(survivors, 2 * n, Stream(sample.seed, "teacherb", "downsample"))


# ---------------------------------------------------------------------------
# loss per phase

def phase_step_loss(cfg: TrainConfig, models: PhaseModels, dataset: Dataset,
                    batch: list[Sample], cache: dict):
    """Batch loss Node plus logged components for the configured phase."""
    n = dataset.n
    if cfg.phase in ("recon", "baseline") or (
            cfg.phase == "student" and cfg.loss.cascade_mode == "none"):
        psi2 = models.parts["psi2"]
        loss_cfg = cfg.loss if cfg.phase == "student" else LossConfig(
            lambda1=0.0, lambda2=0.0, cascade_mode="none")
        if cfg.phase == "recon" and psi2.cfg.upsample_factor == 2:
            return _plain_loss(psi2, batch, cache, target="G_s")
        return total_loss(batch, CascadeModel(None, None, None, psi2),
                          models.teachers, loss_cfg, cache)

    if cfg.phase == "teacher-a":
        return _teacher_a_loss(models.cascade, batch, cache)

    if cfg.phase == "teacher-b":
        psi2 = models.parts["psi2"]
        return _plain_loss(psi2, batch, cache, target="G",
                           input_fn=lambda s: teacher_b_input(s, n))

    if cfg.loss.cascade_mode == "progressive":
        return _progressive_loss(models.stage1, models.parts["psi2"], batch, cache)
    return total_loss(batch, models.cascade, models.teachers, cfg.loss, cache)


def _plain_loss(model: CompletionBackbone, batch, cache, target: str = "G",
                input_fn=None):
    from .cascade import LossParts, _sum_nodes
    terms = []
    for s in batch:
        entry = cache.setdefault(s.id, {})
        if "input" not in entry:
            entry["input"] = s.x if input_fn is None else input_fn(s)
            entry["groups"] = model.proxy_groups(entry["input"])
        goal = s.G if target == "G" else s.G_s
        out = model.complete(entry["input"], groups=entry["groups"])
        terms.append(completion_loss(out, goal, entry.setdefault(
            "coarse_target", goal[_fps_cached(goal, model.cfg.n_q)])))
    l0 = ad.scale(_sum_nodes(terms), 1.0 / len(batch))
    return l0, LossParts(float(l0.value), 0.0, 0.0, float(l0.value))


def _teacher_a_loss(model: CascadeModel, batch, cache):
    from .cascade import LossParts, _sum_nodes
    terms = []
    for s in batch:
        entry = cache.setdefault(s.id, {})
        if "x_groups" not in entry:
            entry["x_groups"] = model.psi2.proxy_groups(s.x)
            entry["aux_groups"] = model.phi.proxy_groups(s.G)
            entry["coarse_target"] = s.G[_fps_cached(s.G, model.psi2.cfg.n_q)]
        fwd = forward_cascade(s.x, model, aux_cloud=s.G,
                              x_groups=entry["x_groups"], aux_groups=entry["aux_groups"])
        terms.append(completion_loss(fwd.output, s.G, entry["coarse_target"]))
    l0 = ad.scale(_sum_nodes(terms), 1.0 / len(batch))
    return l0, LossParts(float(l0.value), 0.0, 0.0, float(l0.value))


def _progressive_loss(stage1: CompletionBackbone, stage2: CompletionBackbone,
                      batch, cache):
    from .cascade import LossParts, _sum_nodes
    terms = []
    for s in batch:
        entry = cache.setdefault(s.id, {})
        if "stage1_out" not in entry:
            entry["stage1_out"] = stage1.complete(s.x).fine.value
            entry["groups"] = stage2.proxy_groups(entry["stage1_out"])
            entry["coarse_target"] = s.G[_fps_cached(s.G, stage2.cfg.n_q)]
        out = stage2.complete(entry["stage1_out"], groups=entry["groups"])
        terms.append(completion_loss(out, s.G, entry["coarse_target"]))
    l0 = ad.scale(_sum_nodes(terms), 1.0 / len(batch))
    return l0, LossParts(float(l0.value), 0.0, 0.0, float(l0.value))


def _fps_cached(cloud: np.ndarray, k: int) -> np.ndarray:
    from .geometry import fps
    return fps(cloud, k)


# ---------------------------------------------------------------------------
# prediction / evaluation

def phase_predictor(cfg: TrainConfig, models: PhaseModels, dataset: Dataset):
    """Maps a Sample to the predicted cloud for this phase's model."""
    n = dataset.n
    if cfg.phase == "teacher-b":
        psi2 = models.parts["psi2"]
        return lambda s: psi2.complete(teacher_b_input(s, n)).fine.value
    if cfg.phase == "teacher-a":
        model = models.cascade
        return lambda s: forward_cascade(s.x, model, aux_cloud=s.G).output.fine.value
    if cfg.phase == "student":
        if cfg.loss.cascade_mode == "auxiliary":
            model = models.cascade
            return lambda s: forward_cascade(s.x, model).output.fine.value
        if cfg.loss.cascade_mode == "progressive":
            stage1, stage2 = models.stage1, models.parts["psi2"]
            return lambda s: complete_progressive(s.x, stage1, stage2).fine.value
    psi2 = models.parts["psi2"]
    return lambda s: psi2.complete(s.x).fine.value


@dataclass
class EvalReport:
    per_sample: list[tuple[int, str, MetricReport]]
    categories: dict[str, MetricReport]
    category_counts: dict[str, int]
    overall: MetricReport

    def rows(self) -> list[tuple[str, int, MetricReport]]:
        out = [(cat, self.category_counts[cat], self.categories[cat])
               for cat in sorted(self.categories)]
        out.append(("Mean", len(self.per_sample), self.overall))
        return out


def evaluate(predict, dataset: Dataset, split: str = "test", tau: float = 0.01,
             threads: int = 1) -> EvalReport:
    """Metrics per sample, per category, and overall on one dataset split."""
    entries = dataset.split_entries(split)
    if not entries:
        raise ConfigError(f"dataset split {split!r} is empty")

    def one(entry):
        sample = dataset.load_sample(entry)
        return sample.id, sample.category, evaluate_pair(predict(sample), sample.G, tau)

    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_sample = list(pool.map(one, entries))
    else:
        per_sample = [one(e) for e in entries]

    def mean_report(reports: list[MetricReport]) -> MetricReport:
        return MetricReport(float(np.mean([r.cd_l1 for r in reports])),
                            float(np.mean([r.cd_l2 for r in reports])),
                            float(np.mean([r.fscore_1pct for r in reports])))

    by_cat: dict[str, list[MetricReport]] = {}
    for _, cat, rep in per_sample:
        by_cat.setdefault(cat, []).append(rep)
    categories = {cat: mean_report(reps) for cat, reps in by_cat.items()}
    counts = {cat: len(reps) for cat, reps in by_cat.items()}
    overall = mean_report([rep for _, _, rep in per_sample])
    return EvalReport(per_sample, categories, counts, overall)


# ---------------------------------------------------------------------------
# the phase runner

@dataclass
class LogRow:
    epoch: int
    phase: str
    l0: float
    l_kl_a: float
    l_kl_b: float
    l_pc: float
    metrics: MetricReport | None = None

    def csv(self) -> str:
        m = self.metrics
        tail = f"{m.csv_row()}" if m is not None else ",,"
        return f"{self.epoch},{self.phase},{self.l0:.9f},{self.l_kl_a:.9f},{self.l_kl_b:.9f},{self.l_pc:.9f},{tail}"

    @staticmethod
    def csv_header() -> str:
        return "epoch,phase,L0,LKLA,LKLB,LPC,cd_l1,cd_l2,fscore"


@dataclass
class PhaseResult:
    checkpoint: Checkpoint
    log: list[LogRow]
    models: PhaseModels
    final_eval: EvalReport | None


def _phase_echo(cfg: TrainConfig, models: PhaseModels, dataset: Dataset,
                state: AdamState, epoch: int) -> dict[str, str]:
    echo = {
        "phase": cfg.phase, "epoch": str(epoch), "n": str(dataset.n),
        "master_seed": str(cfg.master_seed), "lr": repr(cfg.lr),
        "batch_size": str(cfg.batch_size), "epochs": str(cfg.epochs),
        "adam.t": str(state.t),
        "loss.lambda1": repr(cfg.loss.lambda1), "loss.lambda2": repr(cfg.loss.lambda2),
        "loss.tau": repr(cfg.loss.tau), "loss.distill_mode": cfg.loss.distill_mode,
        "loss.cascade_mode": cfg.loss.cascade_mode,
    }
    for prefix, part in models.parts.items():
        if isinstance(part, (CompletionBackbone, EncoderOnly)):
            echo.update(_backbone_config_echo(part.cfg, f"cfg.{prefix}"))
    return echo


def make_checkpoint(cfg: TrainConfig, models: PhaseModels, dataset: Dataset,
                    state: AdamState, epoch: int) -> Checkpoint:
    """Snapshot after rounding live parameters and optimizer state to float32,
    so training continues from exactly what the file stores."""
    for part in models.parts.values():
        _part_params(part).quantize_float32()
    state.quantize_float32()
    arrays = _collect_arrays(models.parts)
    for name, arr in state.m.items():
        arrays[f"adam.m.{name}"] = arr.astype(np.float32)
    for name, arr in state.v.items():
        arrays[f"adam.v.{name}"] = arr.astype(np.float32)
    return Checkpoint(arrays, _phase_echo(cfg, models, dataset, state, epoch))


def run_phase(cfg: TrainConfig, dataset: Dataset,
              prereqs: dict[str, Checkpoint] | None = None,
              resume: Checkpoint | None = None,
              checkpoint_epoch: int | None = None,
              eval_threads: int = 1) -> PhaseResult:
    """Train one phase end to end; deterministic given (config, data, seed)."""
    prereqs = prereqs or {}
    models = build_phase(cfg, dataset, prereqs)
    state = AdamState()
    start_epoch = 0
    if resume is not None:
        if resume.phase != cfg.phase:
            raise ConfigError(f"resume checkpoint is for phase {resume.phase!r}")
        for prefix, part in models.parts.items():
            _load_part(part, resume, prefix)
        state.t = int(resume.config["adam.t"])
        for name, arr in resume.arrays.items():
            if name.startswith("adam.m."):
                state.m[name[7:]] = arr.astype(np.float64)
            elif name.startswith("adam.v."):
                state.v[name[7:]] = arr.astype(np.float64)
        start_epoch = resume.epoch + 1

    train_entries = dataset.split_entries("train")
    if not train_entries:
        raise ConfigError("dataset has no training split")
    samples = [dataset.load_sample(e) for e in train_entries]
    cache: dict = {}
    log: list[LogRow] = []
    mid_checkpoint = None
    predictor = phase_predictor(cfg, models, dataset)

    for epoch in range(start_epoch, cfg.epochs):
        # order depends on (seed, epoch) only, so matched phase variants see
        # identical batches
        order = Stream(cfg.master_seed, "order", epoch).permutation(len(samples))
        sums = np.zeros(4)
        steps = 0
        for lo in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[lo:lo + cfg.batch_size]]
            loss, parts = phase_step_loss(cfg, models, dataset, batch, cache)
            ad.backward(loss)
            adam_step(models.trainable, state, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
            sums += (parts.l0, parts.l_kl_a, parts.l_kl_b, parts.l_pc)
            steps += 1
        row = LogRow(epoch, cfg.phase, *(sums / steps))
        if cfg.eval_every and (epoch % cfg.eval_every == cfg.eval_every - 1
                               or epoch == cfg.epochs - 1):
            row.metrics = evaluate(predictor, dataset, threads=eval_threads).overall
        log.append(row)
        if checkpoint_epoch is not None and epoch == checkpoint_epoch:
            mid_checkpoint = make_checkpoint(cfg, models, dataset, state, epoch)

    final = make_checkpoint(cfg, models, dataset, state, cfg.epochs - 1)
    final_eval = log[-1].metrics if log and log[-1].metrics is not None else None
    result = PhaseResult(final, log, models, None)
    result.final_eval = evaluate(predictor, dataset, threads=eval_threads) \
        if final_eval is None else None
    if mid_checkpoint is not None:
        result.mid_checkpoint = mid_checkpoint  # type: ignore[attr-defined]
    return result


def predictor_from_checkpoint(ck: Checkpoint):
    """Rebuild the trained pipeline of a checkpoint as cloud -> cloud."""
    phase = ck.phase
    mode = ck.config.get("loss.cascade_mode", "none")
    if phase == "student" and mode == "auxiliary":
        psi1 = _restore_backbone(ck, "psi1")
        psi1.params.freeze()
        phi = EncoderOnly(_backbone_config_from_echo(ck.config, "cfg.phi"), 0)
        _load_part(phi, ck, "phi")
        fusion = build_fusion(_backbone_config_from_echo(ck.config, "cfg.psi2"), 0)
        _load_part(fusion, ck, "fusion")
        model = CascadeModel(psi1, phi, fusion, _restore_backbone(ck, "psi2"))
        return lambda cloud: forward_cascade(cloud, model).output.fine.value
    if phase == "student" and mode == "progressive":
        stage1 = _restore_backbone(ck, "psi1")
        stage1.params.freeze()
        stage2 = _restore_backbone(ck, "psi2")
        return lambda cloud: complete_progressive(cloud, stage1, stage2).fine.value
    if phase == "teacher-a":
        raise ConfigError("teacher-a checkpoints need a privileged cloud; no plain predictor")
    model = _restore_backbone(ck, "psi2")
    return lambda cloud: model.complete(cloud).fine.value
