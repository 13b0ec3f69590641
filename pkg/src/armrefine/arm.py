"""Attention Refinement Module.

Pipeline per image::

    early, late --concat--> MLP --> tokens        (N x D)
    tokens  --cross-attend over deep features-->   (n_cross times)
            --self-attend-->                       (n_self times)
            --reshape D x g x g--> scale blocks -->  refinement features (D x H x W)
    text @ refinement features --> class residual  (C x H x W)
    fused = coarse + residual
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional

import numpy as np

from .provider import FeatureBundle, ProviderMismatchError, coarse_affinity, upsample_bilinear
from .tensor import (
    ShapeError,
    Tensor,
    add,
    concat,
    linear,
    matmul,
    mul_scalar,
    relu,
    reshape,
    slice_cols,
    softmax,
    transpose,
    transposed_conv2d,
)

ATTN_MODES = ("literal", "projected")


@dataclass(frozen=True)
class ArmConfig:
    layer_pair: tuple = (3, 7)
    n_cross: int = 1
    n_self: int = 1
    attn_mode: str = "projected"
    mlp_hidden: Optional[int] = None  # None -> 2 * encoder_dim
    scale_blocks: int = 2
    heads: int = 1

    def __post_init__(self):
        object.__setattr__(self, "layer_pair", tuple(int(v) for v in self.layer_pair))
        if len(self.layer_pair) != 2:
            raise ValueError("layer_pair needs exactly two layers")
        if self.n_cross < 0 or self.n_self < 0:
            raise ValueError("n_cross and n_self must be >= 0")
        if self.attn_mode not in ATTN_MODES:
            raise ValueError(f"attn_mode must be one of {ATTN_MODES}")
        if self.scale_blocks < 1:
            raise ValueError("scale_blocks must be >= 1")
        if self.heads < 1:
            raise ValueError("heads must be >= 1")
        if self.mlp_hidden is not None and self.mlp_hidden < 1:
            raise ValueError("mlp_hidden must be >= 1")

    @property
    def upsample_factor(self) -> int:
        return 2**self.scale_blocks

    def hidden_width(self, encoder_dim: int) -> int:
        return self.mlp_hidden if self.mlp_hidden is not None else 2 * encoder_dim


class ArmWeights:
    """Named learnable tensors. No shape here depends on the class count."""

    def __init__(self, tensors: dict):
        self.tensors = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def names(self) -> list:
        return list(self.tensors)

    def parameters(self) -> list:
        return list(self.tensors.values())

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    @property
    def embed_dim(self) -> int:
        return self["mlp.w2"].shape[1]

    @property
    def encoder_dim(self) -> int:
        return self["mlp.w1"].shape[0] // 2

    def copy(self) -> "ArmWeights":
        return ArmWeights({k: Tensor(v.data, requires_grad=v.requires_grad) for k, v in self.tensors.items()})

    def equals(self, other: "ArmWeights") -> bool:
        return self.names() == other.names() and all(
            a.dtype == b.dtype and a.data.tobytes() == b.data.tobytes()
            for a, b in zip(self.parameters(), other.parameters())
        )


def _glorot(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_arm_weights(
    seed: int, cfg: ArmConfig, encoder_dim: int, embed_dim: int, dtype=np.float32
) -> ArmWeights:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xA2E]))
    d, hidden = embed_dim, cfg.hidden_width(encoder_dim)
    if cfg.attn_mode == "projected" and d % cfg.heads:
        raise ValueError(f"embed_dim {d} is not divisible by heads {cfg.heads}")
    t: dict = {}
    t["mlp.w1"] = _glorot(rng, (2 * encoder_dim, hidden), 2 * encoder_dim, hidden)
    t["mlp.b1"] = np.zeros(hidden)
    t["mlp.w2"] = _glorot(rng, (hidden, d), hidden, d)
    t["mlp.b2"] = np.zeros(d)
    if cfg.attn_mode == "projected":
        for kind, count in (("cross", cfg.n_cross), ("self", cfg.n_self)):
            for i in range(count):
                for proj in ("wq", "wk", "wv", "wo"):
                    t[f"{kind}.{i}.{proj}"] = _glorot(rng, (d, d), d, d)
    for i in range(cfg.scale_blocks):
        kernel = _glorot(rng, (d, d, 2, 2), d * 4, d * 4)
        bias = np.zeros(d)
        if i == cfg.scale_blocks - 1:
            kernel *= 1e-2
            bias *= 1e-2
        t[f"scale.{i}.kernel"] = kernel
        t[f"scale.{i}.bias"] = bias
    return ArmWeights({k: Tensor(v, requires_grad=True, dtype=dtype) for k, v in t.items()})


def zero_refinement(weights: ArmWeights) -> ArmWeights:
    """Copy with the last scale block zeroed, so the residual vanishes."""
    out = weights.copy()
    last = max(int(n.split(".")[1]) for n in out.names() if n.startswith("scale."))
    for suffix in ("kernel", "bias"):
        t = out[f"scale.{last}.{suffix}"]
        t.assign(np.zeros_like(t.data))
    return out


# ---------------------------------------------------------------------------
# stages


def project_intermediate(early: Tensor, late: Tensor, w: ArmWeights) -> Tensor:
    if early.shape[0] != late.shape[0]:
        raise ShapeError(f"token counts differ: {early.shape} vs {late.shape}")
    h = relu(linear(concat(early, late, axis=1), w["mlp.w1"], w["mlp.b1"]))
    return linear(h, w["mlp.w2"], w["mlp.b2"])


def _scaled_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    scores = mul_scalar(matmul(q, transpose(k)), 1.0 / math.sqrt(k.shape[1]))
    return matmul(softmax(scores, axis=1), v)


def attention_block(
    queries: Tensor,
    context: Tensor,
    w: Optional[ArmWeights] = None,
    mode: str = "literal",
    prefix: str = "",
    heads: int = 1,
) -> Tensor:
    """One attention block; ``context`` supplies both keys and values.

    ``literal`` has no parameters: softmax(Q K^T / sqrt(d)) V with K = V =
    context. ``projected`` adds Q/K/V/O projections, splits heads and
    adds the input back.
    """
    if queries.shape[1] != context.shape[1]:
        raise ShapeError(f"attention width mismatch: {queries.shape} vs {context.shape}")
    if mode == "literal":
        return _scaled_attention(queries, context, context)
    if mode != "projected":
        raise ValueError(f"unknown attention mode {mode!r}")
    d = queries.shape[1]
    if d % heads:
        raise ShapeError(f"width {d} not divisible by {heads} heads")
    q = matmul(queries, w[f"{prefix}.wq"])
    k = matmul(context, w[f"{prefix}.wk"])
    v = matmul(context, w[f"{prefix}.wv"])
    step = d // heads
    merged = None
    for h in range(heads):
        lo, hi = h * step, (h + 1) * step
        out = _scaled_attention(slice_cols(q, lo, hi), slice_cols(k, lo, hi), slice_cols(v, lo, hi))
        merged = out if merged is None else concat(merged, out, axis=1)
    return add(queries, matmul(merged, w[f"{prefix}.wo"]))


def attend_tokens(bundle: FeatureBundle, w: ArmWeights, cfg: ArmConfig) -> Tensor:
    """Fused token features after the cross- and self-attention stacks."""
    early = Tensor(bundle.early, dtype=w.dtype)
    late = Tensor(bundle.late, dtype=w.dtype)
    deep = Tensor(bundle.deep, dtype=w.dtype)
    if early.shape[1] != w.encoder_dim or deep.shape[1] != w.embed_dim:
        raise ProviderMismatchError(
            f"features ({early.shape[1]}, {deep.shape[1]}) do not match weights "
            f"({w.encoder_dim}, {w.embed_dim})"
        )
    tokens = project_intermediate(early, late, w)
    for i in range(cfg.n_cross):
        tokens = attention_block(tokens, deep, w, cfg.attn_mode, f"cross.{i}", cfg.heads)
    for i in range(cfg.n_self):
        tokens = attention_block(tokens, tokens, w, cfg.attn_mode, f"self.{i}", cfg.heads)
    return tokens


def scale_block_forward(tokens: Tensor, w: ArmWeights, blocks: int) -> Tensor:
    n, d = tokens.shape
    g = int(round(math.sqrt(n)))
    if g * g != n:
        raise ShapeError(f"token count {n} is not a square grid")
    x = reshape(transpose(tokens), (d, g, g))
    for i in range(blocks):
        if i:
            x = relu(x)
        x = transposed_conv2d(x, w[f"scale.{i}.kernel"], w[f"scale.{i}.bias"], stride=2)
    return x


def text_project(features: Tensor, text) -> Tensor:
    """Class map from pixel features: out[c, y, x] = sum_d text[c, d] * features[d, y, x]."""
    text = text if isinstance(text, Tensor) else Tensor(text, dtype=features.dtype)
    d, h, wd = features.shape
    if text.shape[1] != d:
        raise ShapeError(f"text width {text.shape[1]} != feature channels {d}")
    flat = matmul(text, reshape(features, (d, h * wd)))
    return reshape(flat, (text.shape[0], h, wd))


def fuse_residual(coarse: Tensor, residual: Tensor) -> Tensor:
    return add(coarse, residual)


class ArmOutput(NamedTuple):
    coarse: Tensor
    refinement: Tensor
    fused: Tensor


def coarse_map(bundle: FeatureBundle, out_size: int, dtype=np.float64) -> Tensor:
    scores = coarse_affinity(
        Tensor(bundle.deep, dtype=dtype), Tensor(bundle.text, dtype=dtype), bundle.temperature
    )
    return upsample_bilinear(scores, out_size)


def arm_forward(bundle: FeatureBundle, w: ArmWeights, cfg: ArmConfig) -> ArmOutput:
    if bundle.layers != cfg.layer_pair:
        raise ProviderMismatchError(
            f"bundle carries layers {bundle.layers}, config expects {cfg.layer_pair}"
        )
    out_size = bundle.grid * cfg.upsample_factor
    coarse = coarse_map(bundle, out_size, w.dtype)
    tokens = attend_tokens(bundle, w, cfg)
    features = scale_block_forward(tokens, w, cfg.scale_blocks)
    residual = text_project(features, bundle.text)
    return ArmOutput(coarse, residual, fuse_residual(coarse, residual))


def predict(fused: Tensor) -> np.ndarray:
    """Per-pixel argmax over classes; lowest index wins ties."""
    return np.argmax(fused.data, axis=0).astype(np.int32)


def check_compatible(cfg: ArmConfig, patch_factor: int) -> None:
    if cfg.upsample_factor != patch_factor:
        raise ValueError(
            f"scale_blocks={cfg.scale_blocks} upsamples by {cfg.upsample_factor}, "
            f"but patch_factor is {patch_factor}"
        )


__all__ = [
    "ArmConfig",
    "ArmOutput",
    "ArmWeights",
    "arm_forward",
    "attend_tokens",
    "attention_block",
    "check_compatible",
    "coarse_map",
    "fuse_residual",
    "init_arm_weights",
    "predict",
    "project_intermediate",
    "scale_block_forward",
    "text_project",
    "zero_refinement",
]
