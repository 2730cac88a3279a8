"""Geometry-aware transformer completion network.

One `CompletionBackbone` instance covers every role in the pipeline: the
shape-reconstruction stage, the fused-completion stage, both teachers, and
the single-stage baseline; only the config (input resolution, upsample
factor) differs. The flow is:

    proxy extraction -> encoder -> query generation -> decoder -> rebuild

Proxy extraction picks n_c farthest-point centers, embeds each center's
k-NN neighborhood with a shared MLP (max-pooled), and adds a positional
embedding of the center. The encoder output is the feature surface used for
distillation. Query generation pools the tokens into a global vector and
predicts n_q coarse centers; the decoder refines per-query features with
self- plus cross-attention; the rebuild head emits r offset vectors per
query around its coarse center, giving upsample_factor * n output points.

The token count is a function of n_c alone, never of the input resolution,
so features from models fed denser clouds stay shape-compatible.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Node
from .errors import ContractViolation
from .geometry import SpatialIndex, as_cloud, fps
from .rng import Stream


@dataclass(frozen=True)
class BackboneConfig:
    n: int = 256                # input resolution
    upsample_factor: int = 4
    n_c: int = 32               # proxy token count
    k: int = 8                  # neighborhood size
    channels: int = 64
    encoder_layers: int = 3
    decoder_layers: int = 3
    heads: int = 4
    n_q: int = 32               # query / coarse point count

    def __post_init__(self):
        if self.channels % self.heads != 0:
            raise ContractViolation("channels must be divisible by heads")
        if (self.upsample_factor * self.n) % self.n_q != 0:
            raise ContractViolation("n_q must divide upsample_factor * n")
        if self.n_c > self.n:
            raise ContractViolation("n_c cannot exceed the input resolution")
        if self.upsample_factor not in (2, 4):
            raise ContractViolation("upsample_factor must be 2 or 4")

    @property
    def r(self) -> int:
        """Points emitted per query patch."""
        return (self.upsample_factor * self.n) // self.n_q

    @property
    def m_out(self) -> int:
        return self.upsample_factor * self.n

    def with_n(self, n: int) -> "BackboneConfig":
        return replace(self, n=n)


def tiny_config(n: int = 32, factor: int = 4) -> BackboneConfig:
    """Small configuration for gradient checks and fast tests."""
    return BackboneConfig(n=n, upsample_factor=factor, n_c=8, k=4, channels=16,
                          encoder_layers=1, decoder_layers=1, heads=2, n_q=8)


@dataclass
class FeatureTokens:
    centers: np.ndarray   # (n_c, 3) proxy coordinates
    feats: Node           # (n_c, C)


@dataclass
class CompletionOutput:
    coarse: Node          # (n_q, 3)
    fine: Node            # (m_out, 3)
    tokens: FeatureTokens


def _init_tensor(master_seed: int, name: str, shape: tuple, fan_in: int) -> np.ndarray:
    """Uniform fan-in init U(-1/sqrt(fan_in), 1/sqrt(fan_in)); per-tensor stream."""
    stream = Stream(master_seed, "init", name)
    bound = 1.0 / math.sqrt(fan_in)
    u = stream.uniform(int(np.prod(shape)))
    return ((2.0 * u - 1.0) * bound).reshape(shape)


class ParamSet:
    """Named float64 parameter tensors of one model instance."""

    def __init__(self):
        self.nodes: dict[str, Node] = {}
        self.frozen = False

    def linear(self, master_seed: int, name: str, d_in: int, d_out: int) -> None:
        self.nodes[f"{name}.w"] = ad.param(_init_tensor(master_seed, f"{name}.w", (d_in, d_out), d_in))
        self.nodes[f"{name}.b"] = ad.param(np.zeros((1, d_out)))

    def norm(self, name: str, dim: int) -> None:
        self.nodes[f"{name}.gain"] = ad.param(np.ones((1, dim)))
        self.nodes[f"{name}.bias"] = ad.param(np.zeros((1, dim)))

    def scalar(self, name: str, value: float) -> None:
        self.nodes[name] = ad.param(np.full((1, 1), value))

    def __getitem__(self, name: str) -> Node:
        return self.nodes[name]

    def names(self) -> list[str]:
        return sorted(self.nodes)

    def freeze(self) -> None:
        self.frozen = True
        for node in self.nodes.values():
            node.requires_grad = False

    def trainable(self) -> dict[str, Node]:
        return {} if self.frozen else dict(self.nodes)

    def values_float32(self) -> dict[str, np.ndarray]:
        return {k: v.value.astype(np.float32) for k, v in self.nodes.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        for name, arr in values.items():
            if name not in self.nodes:
                raise ContractViolation(f"unknown parameter {name!r}")
            node = self.nodes[name]
            if node.value.shape != tuple(arr.shape):
                raise ContractViolation(
                    f"shape mismatch for {name!r}: {node.value.shape} vs {tuple(arr.shape)}")
            node.value = np.asarray(arr, dtype=np.float64).copy()
            node.grad = None

    def quantize_float32(self) -> None:
        """Round every tensor to its float32 representation (kept in float64)."""
        for node in self.nodes.values():
            node.value = node.value.astype(np.float32).astype(np.float64)


def _linear(p: ParamSet, name: str, x: Node) -> Node:
    return ad.add(ad.matmul(x, p[f"{name}.w"]), p[f"{name}.b"])


def _mlp2(p: ParamSet, name: str, x: Node) -> Node:
    return _linear(p, f"{name}.2", ad.gelu(_linear(p, f"{name}.1", x)))


def _layernorm(p: ParamSet, name: str, x: Node) -> Node:
    return ad.layernorm(x, p[f"{name}.gain"], p[f"{name}.bias"])


def _attention(p: ParamSet, name: str, q_in: Node, kv_in: Node, heads: int) -> Node:
    """Multi-head attention of q_in over kv_in; per-row softmax weights."""
    nq, c = q_in.shape
    nk = kv_in.shape[0]
    dh = c // heads

    def split(x: Node, n: int) -> Node:
        return ad.permute(ad.reshape(x, (n, heads, dh)), (1, 0, 2))

    q = split(_linear(p, f"{name}.q", q_in), nq)
    k = split(_linear(p, f"{name}.k", kv_in), nk)
    v = split(_linear(p, f"{name}.v", kv_in), nk)
    scores = ad.scale(ad.bmm(q, ad.permute(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    mixed = ad.bmm(ad.softmax(scores, axis=2), v)
    merged = ad.reshape(ad.permute(mixed, (1, 0, 2)), (nq, c))
    return _linear(p, f"{name}.o", merged)


def _add_encoder_params(p: ParamSet, cfg: BackboneConfig, seed: int) -> None:
    c = cfg.channels
    p.linear(seed, "proxy.group.1", 3, c)
    p.linear(seed, "proxy.group.2", c, c)
    p.linear(seed, "proxy.pos.1", 3, c)
    p.linear(seed, "proxy.pos.2", c, c)
    for i in range(cfg.encoder_layers):
        p.norm(f"enc{i}.ln1", c)
        for proj in ("q", "k", "v", "o"):
            p.linear(seed, f"enc{i}.attn.{proj}", c, c)
        p.norm(f"enc{i}.ln2", c)
        p.linear(seed, f"enc{i}.ff.1", c, 2 * c)
        p.linear(seed, f"enc{i}.ff.2", 2 * c, c)


ENCODER_PARAM_PREFIXES = ("proxy.", "enc")


class EncoderOnly:
    """Proxy extraction plus encoder; the auxiliary feature extractor."""

    def __init__(self, cfg: BackboneConfig, master_seed: int = 0):
        self.cfg = cfg
        self.params = ParamSet()
        _add_encoder_params(self.params, cfg, master_seed)

    # --- proxy extraction -----------------------------------------------------

    def proxy_groups(self, cloud) -> tuple[np.ndarray, np.ndarray]:
        """Geometric half of proxy extraction: centers and relative k-NN offsets.

        Depends only on the cloud, so callers may cache the result per sample.
        """
        pts = as_cloud(cloud)
        cfg = self.cfg
        if len(pts) < cfg.n_c:
            raise ContractViolation(f"need at least n_c={cfg.n_c} points, got {len(pts)}")
        centers = pts[fps(pts, cfg.n_c, start_index=0)]
        index = SpatialIndex(pts)
        rel = np.empty((cfg.n_c, cfg.k, 3))
        for i, center in enumerate(centers):
            rel[i] = pts[index.knn(center, cfg.k)] - center
        return centers, rel

    def embed_groups(self, centers: np.ndarray, rel: np.ndarray) -> FeatureTokens:
        cfg = self.cfg
        flat = ad.constant(rel.reshape(cfg.n_c * cfg.k, 3))
        h = _mlp2(self.params, "proxy.group", flat)
        pooled = ad.max_(ad.reshape(h, (cfg.n_c, cfg.k, cfg.channels)), axis=1)
        pos = _mlp2(self.params, "proxy.pos", ad.constant(centers))
        return FeatureTokens(centers, ad.add(pooled, pos))

    def extract_proxies(self, cloud) -> FeatureTokens:
        centers, rel = self.proxy_groups(cloud)
        return self.embed_groups(centers, rel)

    # --- encoder ----------------------------------------------------------------

    def encode(self, tokens: FeatureTokens) -> FeatureTokens:
        cfg = self.cfg
        if tokens.feats.shape != (cfg.n_c, cfg.channels):
            raise ContractViolation(f"token shape {tokens.feats.shape} does not match config")
        x = tokens.feats
        for i in range(cfg.encoder_layers):
            h = _layernorm(self.params, f"enc{i}.ln1", x)
            x = ad.add(x, _attention(self.params, f"enc{i}.attn", h, h, cfg.heads))
            h = _layernorm(self.params, f"enc{i}.ln2", x)
            x = ad.add(x, _mlp2(self.params, f"enc{i}.ff", h))
        return FeatureTokens(tokens.centers, x)

    def encode_cloud(self, cloud, groups: tuple | None = None) -> FeatureTokens:
        if groups is None:
            groups = self.proxy_groups(cloud)
        return self.encode(self.embed_groups(*groups))

    def copy_encoder_from(self, other: "EncoderOnly | CompletionBackbone") -> None:
        """Initialize proxy/encoder tensors from another model's encoder."""
        values = {k: v.value.copy() for k, v in other.params.nodes.items()
                  if k.startswith(ENCODER_PARAM_PREFIXES)}
        self.params.load_values(values)


class CompletionBackbone(EncoderOnly):
    """One completion model instance; deterministic given (config, seed)."""

    def __init__(self, cfg: BackboneConfig, master_seed: int = 0):
        super().__init__(cfg, master_seed)
        seed, p, c = master_seed, self.params, cfg.channels
        p.linear(seed, "query.coarse", 2 * c, cfg.n_q * 3)
        p.linear(seed, "query.embed.1", 3, c)
        p.linear(seed, "query.embed.2", c, c)
        p.linear(seed, "query.proj", 2 * c, c)
        for i in range(cfg.decoder_layers):
            p.norm(f"dec{i}.ln1", c)
            for proj in ("q", "k", "v", "o"):
                p.linear(seed, f"dec{i}.self.{proj}", c, c)
            p.norm(f"dec{i}.ln2", c)
            for proj in ("q", "k", "v", "o"):
                p.linear(seed, f"dec{i}.cross.{proj}", c, c)
            p.norm(f"dec{i}.ln3", c)
            p.linear(seed, f"dec{i}.ff.1", c, 2 * c)
            p.linear(seed, f"dec{i}.ff.2", 2 * c, c)
        p.linear(seed, "rebuild.1", c, 2 * c)
        p.linear(seed, "rebuild.2", 2 * c, cfg.r * 3)
        p.scalar("rebuild.radius", 0.1)

    # --- decoder / rebuild -----------------------------------------------------

    def generate_queries(self, tokens: FeatureTokens) -> tuple[Node, Node]:
        cfg = self.cfg
        pooled = ad.concat([ad.max_(tokens.feats, axis=0, keepdims=True),
                            ad.mean_sorted(tokens.feats, axis=0, keepdims=True)], axis=1)
        coarse = ad.reshape(_linear(self.params, "query.coarse", pooled), (cfg.n_q, 3))
        embed = _mlp2(self.params, "query.embed", coarse)
        queries = ad.add(embed, _linear(self.params, "query.proj", pooled))
        return coarse, queries

    def decode(self, queries: Node, tokens: FeatureTokens) -> Node:
        cfg = self.cfg
        if queries.shape != (cfg.n_q, cfg.channels):
            raise ContractViolation(f"query shape {queries.shape} does not match config")
        x = queries
        for i in range(cfg.decoder_layers):
            h = _layernorm(self.params, f"dec{i}.ln1", x)
            x = ad.add(x, _attention(self.params, f"dec{i}.self", h, h, cfg.heads))
            h = _layernorm(self.params, f"dec{i}.ln2", x)
            x = ad.add(x, _attention(self.params, f"dec{i}.cross", h, tokens.feats, cfg.heads))
            h = _layernorm(self.params, f"dec{i}.ln3", x)
            x = ad.add(x, _mlp2(self.params, f"dec{i}.ff", h))
        return x

    def rebuild(self, refined: Node, coarse: Node) -> tuple[Node, Node]:
        """Offsets around each coarse center; returns (coarse, fine)."""
        cfg = self.cfg
        h = ad.gelu(_linear(self.params, "rebuild.1", refined))
        offsets = ad.reshape(_linear(self.params, "rebuild.2", h), (cfg.n_q * cfg.r, 3))
        offsets = ad.mul(offsets, self.params["rebuild.radius"])
        base = ad.gather_rows(coarse, np.repeat(np.arange(cfg.n_q), cfg.r))
        return coarse, ad.add(base, offsets)

    def decode_tokens(self, tokens: FeatureTokens) -> CompletionOutput:
        """Query generation, decoding, and rebuild from (possibly fused) tokens."""
        coarse, queries = self.generate_queries(tokens)
        refined = self.decode(queries, tokens)
        coarse, fine = self.rebuild(refined, coarse)
        return CompletionOutput(coarse, fine, tokens)

    def complete(self, cloud, groups: tuple | None = None) -> CompletionOutput:
        """Full inference path; requires the configured input resolution."""
        pts = as_cloud(cloud)
        if len(pts) != self.cfg.n:
            raise ContractViolation(f"expected {self.cfg.n} input points, got {len(pts)}")
        tokens = self.encode_cloud(pts, groups)
        out = self.decode_tokens(tokens)
        return CompletionOutput(out.coarse, out.fine, tokens)
