"""Synthetic stand-in for a frozen vision-language encoder.

Scenes are Voronoi label maps. The encoder emits

* intermediate features built from 2x2 sub-cell class prototypes, so they
  keep sub-patch boundary detail,
* deep features built from prototypes averaged over a patch neighbourhood
  plus noise, so they carry semantics with smeared boundaries,
* one unit-norm text embedding per class.

All projection matrices depend only on ``encoder_seed`` and the dimensions.
Provider variants share them and differ only in the coarse path
(blur radius, deep noise, temperature).
"""

from __future__ import annotations

import functools
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from .tensor import (
    Tensor,
    bilinear_resample,
    l2_normalize,
    matmul,
    mul_scalar,
    reshape,
    softmax,
    transpose,
)

VARIANTS = {
    "A": {"deep_blur_radius": 1, "deep_noise": 0.3, "temperature": 100.0},
    "B": {"deep_blur_radius": 2, "deep_noise": 0.5, "temperature": 40.0},
}

MAX_LAYER = 12
_TEXT_STREAM = 1
_DEEP_STREAM = 2
_LAYER_STREAM = 100
_DEEP_NOISE_STREAM = 3


class ProviderMismatchError(ValueError):
    """Scene, features or checkpoint were produced under an incompatible provider."""


@dataclass(frozen=True)
class ProviderConfig:
    img_size: int = 64
    patch_factor: int = 4
    embed_dim: int = 64
    encoder_dim: int = 64
    class_count: int = 8
    voronoi_sites: int = 16
    deep_blur_radius: int = 1
    deep_noise: float = 0.3
    shallow_noise: float = 0.1
    temperature: float = 100.0
    # strength of the off-identity part of the deep projection; 0 gives identity
    deep_mix: float = 0.1
    # overall scale of the frozen projections (cosine affinity ignores it)
    deep_gain: float = 32.0
    shallow_gain: float = 128.0
    encoder_seed: int = 0
    variant: str = "A"

    def __post_init__(self):
        if self.img_size <= 0 or self.patch_factor <= 0:
            raise ValueError("img_size and patch_factor must be positive")
        if self.img_size % self.patch_factor:
            raise ValueError(
                f"img_size {self.img_size} is not divisible by patch_factor {self.patch_factor}"
            )
        if self.class_count < 1 or self.embed_dim < 1 or self.encoder_dim < 1:
            raise ValueError("class_count, embed_dim and encoder_dim must be >= 1")
        if self.class_count > self.embed_dim:
            raise ValueError("class_count cannot exceed embed_dim (text rows are orthonormal)")
        if self.voronoi_sites < self.class_count:
            raise ValueError(
                f"voronoi_sites ({self.voronoi_sites}) must be >= class_count ({self.class_count})"
            )
        if self.voronoi_sites > self.img_size**2:
            raise ValueError("more voronoi sites than pixels")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        if min(self.deep_noise, self.shallow_noise, self.deep_mix) < 0 or self.deep_blur_radius < 0:
            raise ValueError("noise levels, deep_mix and blur radius must be >= 0")
        if self.deep_gain <= 0 or self.shallow_gain <= 0:
            raise ValueError("deep_gain and shallow_gain must be positive")
        if self.encoder_seed < 0:
            raise ValueError("encoder_seed must be a non-negative integer")

    @classmethod
    def for_variant(cls, variant: str = "A", **overrides) -> "ProviderConfig":
        if variant not in VARIANTS:
            raise ValueError(f"unknown provider variant {variant!r}")
        return cls(**{**VARIANTS[variant], "variant": variant, **overrides})

    def as_variant(self, variant: str) -> "ProviderConfig":
        """Same frozen encoder, coarse path switched to another preset."""
        if variant not in VARIANTS:
            raise ValueError(f"unknown provider variant {variant!r}")
        return replace(self, variant=variant, **VARIANTS[variant])

    @property
    def grid(self) -> int:
        return self.img_size // self.patch_factor

    @property
    def num_patches(self) -> int:
        return self.grid**2

    def fingerprint(self) -> dict:
        """Identity of the frozen encoder; the class count is deliberately absent."""
        return {
            "encoder_seed": self.encoder_seed,
            "img_size": self.img_size,
            "patch_factor": self.patch_factor,
            "embed_dim": self.embed_dim,
            "encoder_dim": self.encoder_dim,
            "deep_mix": repr(float(self.deep_mix)),
            "deep_gain": repr(float(self.deep_gain)),
            "shallow_gain": repr(float(self.shallow_gain)),
        }


@dataclass
class Scene:
    gt_mask: np.ndarray
    text: np.ndarray
    scene_seed: int

    def __eq__(self, other):
        return (
            isinstance(other, Scene)
            and self.scene_seed == other.scene_seed
            and np.array_equal(self.gt_mask, other.gt_mask)
            and self.gt_mask.dtype == other.gt_mask.dtype
            and self.text.tobytes() == other.text.tobytes()
        )


@dataclass
class FeatureBundle:
    """One image's frozen-encoder outputs."""

    early: np.ndarray  # N x encoder_dim, layer ``layers[0]``
    late: np.ndarray  # N x encoder_dim, layer ``layers[1]``
    deep: np.ndarray  # N x embed_dim
    text: np.ndarray  # C x embed_dim, unit rows
    temperature: float
    layers: tuple = (3, 7)
    grid: int = field(default=0)

    def __post_init__(self):
        n = self.deep.shape[0]
        if self.early.shape[0] != n or self.late.shape[0] != n:
            raise ProviderMismatchError("token counts differ between feature levels")
        if self.text.shape[1] != self.deep.shape[1]:
            raise ProviderMismatchError("text and deep feature widths differ")
        if not self.grid:
            g = int(round(np.sqrt(n)))
            self.grid = g if g * g == n else 0

    def __eq__(self, other):
        if not isinstance(other, FeatureBundle):
            return NotImplemented
        return (
            self.layers == other.layers
            and self.temperature == other.temperature
            and all(
                a.tobytes() == b.tobytes()
                for a, b in zip(
                    (self.early, self.late, self.deep, self.text),
                    (other.early, other.late, other.deep, other.text),
                )
            )
        )


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@functools.lru_cache(maxsize=64)
def text_embeddings(encoder_seed: int, class_count: int, embed_dim: int) -> np.ndarray:
    """Orthonormal class prototypes; the first k rows do not depend on class_count."""
    g = _rng(encoder_seed, _TEXT_STREAM).standard_normal((class_count, embed_dim))
    rows = np.zeros_like(g)
    for i in range(class_count):
        v = g[i].copy()
        for _ in range(2):  # second pass mops up round-off
            for j in range(i):
                v -= (v @ rows[j]) * rows[j]
        rows[i] = v / np.linalg.norm(v)
    return _frozen(rows)


@functools.lru_cache(maxsize=16)
def deep_projection(
    encoder_seed: int, embed_dim: int, deep_mix: float, gain: float = 1.0
) -> np.ndarray:
    g = _rng(encoder_seed, _DEEP_STREAM).standard_normal((embed_dim, embed_dim))
    return _frozen(gain * (np.eye(embed_dim) + deep_mix * g / np.sqrt(embed_dim)))


@functools.lru_cache(maxsize=64)
def layer_projection(
    encoder_seed: int, layer: int, embed_dim: int, encoder_dim: int, gain: float = 1.0
) -> np.ndarray:
    fan_in = 4 * embed_dim
    g = _rng(encoder_seed, _LAYER_STREAM + layer).standard_normal((fan_in, encoder_dim))
    return _frozen(gain * g / np.sqrt(fan_in))


def layer_smoothing(layer: int) -> float:
    """Weight of the patch mean mixed into each sub-cell at a given depth."""
    return (layer - 1) / MAX_LAYER


def gen_scene(scene_seed: int, cfg: ProviderConfig) -> Scene:
    size, k, c = cfg.img_size, cfg.voronoi_sites, cfg.class_count
    if k < c:
        raise ValueError(f"voronoi_sites ({k}) must be >= class_count ({c})")
    rng = _rng(scene_seed)
    # distinct positions: every site owns at least its own pixel
    sites = rng.choice(size * size, size=k, replace=False)
    while True:
        site_class = rng.integers(0, c, size=k)
        if np.unique(site_class).size == c:
            break
    sy, sx = np.divmod(sites, size)
    yy, xx = np.divmod(np.arange(size * size), size)
    d2 = (yy[:, None] - sy[None, :]) ** 2 + (xx[:, None] - sx[None, :]) ** 2
    nearest = np.argmin(d2, axis=1)  # first minimum, so the lowest site index wins ties
    mask = site_class[nearest].reshape(size, size).astype(np.int32)
    text = text_embeddings(cfg.encoder_seed, c, cfg.embed_dim)
    return Scene(gt_mask=mask, text=text, scene_seed=int(scene_seed))


def _check_scene(scene: Scene, cfg: ProviderConfig) -> None:
    if scene.gt_mask.shape != (cfg.img_size, cfg.img_size):
        raise ProviderMismatchError(
            f"scene mask {scene.gt_mask.shape} does not match img_size {cfg.img_size}"
        )
    if scene.text.shape != (cfg.class_count, cfg.embed_dim):
        raise ProviderMismatchError(
            f"scene text {scene.text.shape} does not match ({cfg.class_count}, {cfg.embed_dim})"
        )
    if scene.gt_mask.min() < 0 or scene.gt_mask.max() >= cfg.class_count:
        raise ProviderMismatchError("scene mask has labels outside [0, class_count)")


def class_histograms(mask: np.ndarray, cell: int, classes: int) -> np.ndarray:
    """Per-cell class pixel counts, shape (h/cell, w/cell, classes)."""
    h, w = mask.shape
    onehot = np.eye(classes, dtype=np.int64)[mask]
    return onehot.reshape(h // cell, cell, w // cell, cell, classes).sum(axis=(1, 3))


def _box_sum(hist: np.ndarray, radius: int) -> np.ndarray:
    if radius == 0:
        return hist.copy()
    g = hist.shape[0]
    padded = np.pad(hist, ((radius, radius), (radius, radius), (0, 0)))
    out = np.zeros_like(hist)
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            out += padded[dy : dy + g, dx : dx + g]
    return out


def subcell_labels(mask: np.ndarray, patch_factor: int, classes: int) -> np.ndarray:
    """Majority class of each half-patch sub-cell, lowest index on ties."""
    if patch_factor % 2:
        raise ValueError("patch_factor must be even to split patches into 2x2 sub-cells")
    return np.argmax(class_histograms(mask, patch_factor // 2, classes), axis=-1)


def encode(scene: Scene, cfg: ProviderConfig, layers: tuple = (3, 7)) -> FeatureBundle:
    _check_scene(scene, cfg)
    for layer in layers:
        if not 1 <= layer <= MAX_LAYER:
            raise ValueError(f"intermediate layer {layer} outside 1..{MAX_LAYER}")
    g, c, d = cfg.grid, cfg.class_count, cfg.embed_dim
    text = scene.text
    seed = scene.scene_seed

    hist = _box_sum(class_histograms(scene.gt_mask, cfg.patch_factor, c), cfg.deep_blur_radius)
    mean_proto = (hist / hist.sum(axis=-1, keepdims=True)).reshape(g * g, c) @ text
    noise = _rng(seed, cfg.encoder_seed, _DEEP_NOISE_STREAM).standard_normal((g * g, d))
    w_deep = deep_projection(cfg.encoder_seed, d, float(cfg.deep_mix), float(cfg.deep_gain))
    deep = (mean_proto + cfg.deep_noise * noise) @ w_deep

    sub = subcell_labels(scene.gt_mask, cfg.patch_factor, c)  # (2g, 2g)
    protos = text[sub].reshape(g, 2, g, 2, d).transpose(0, 2, 1, 3, 4).reshape(g * g, 4, d)
    patch_mean = protos.mean(axis=1, keepdims=True)
    feats = []
    for layer in layers:
        a = layer_smoothing(layer)
        content = ((1.0 - a) * protos + a * patch_mean).reshape(g * g, 4 * d)
        w = layer_projection(cfg.encoder_seed, layer, d, cfg.encoder_dim, float(cfg.shallow_gain))
        eps = _rng(seed, cfg.encoder_seed, _LAYER_STREAM + layer).standard_normal(
            (g * g, cfg.encoder_dim)
        )
        feats.append(content @ w + cfg.shallow_noise * eps)
    return FeatureBundle(
        early=feats[0],
        late=feats[1],
        deep=deep,
        text=np.array(text),
        temperature=float(cfg.temperature),
        layers=tuple(layers),
        grid=g,
    )


def coarse_affinity(deep, text, temperature: float) -> Tensor:
    """Softmax over classes of temperature-scaled cosine similarity, N x C."""
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    deep, text = _as_t(deep), _as_t(text)
    if deep.shape[1] != text.shape[1]:
        raise ProviderMismatchError(f"feature width {deep.shape[1]} != text width {text.shape[1]}")
    sim = matmul(l2_normalize(deep, axis=1), transpose(l2_normalize(text, axis=1)))
    return softmax(mul_scalar(sim, temperature), axis=1)


def _as_t(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@functools.lru_cache(maxsize=32)
def interpolation_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Half-pixel-centre linear interpolation weights, shape (n_out, n_in)."""
    scale = n_in / n_out
    src = np.clip((np.arange(n_out) + 0.5) * scale - 0.5, 0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    m = np.zeros((n_out, n_in))
    np.add.at(m, (np.arange(n_out), lo), 1.0 - frac)
    np.add.at(m, (np.arange(n_out), hi), frac)
    return _frozen(m)


def upsample_bilinear(scores, out_size: int) -> Tensor:
    """Reshape N x C patch scores to C x g x g and interpolate to C x out x out."""
    scores = _as_t(scores)
    n, c = scores.shape
    g = int(round(np.sqrt(n)))
    if g * g != n:
        raise ValueError(f"token count {n} is not a perfect square")
    grid = reshape(transpose(scores), (c, g, g))
    m = interpolation_matrix(g, out_size)
    return bilinear_resample(grid, m, m)


def gen_dataset(count: int, base_seed: int, cfg: ProviderConfig, layers: tuple = (3, 7)) -> list:
    if count < 1:
        raise ValueError("count must be >= 1")
    return list(iter_dataset(count, base_seed, cfg, layers))


def iter_dataset(
    count: int, base_seed: int, cfg: ProviderConfig, layers: tuple = (3, 7)
) -> Iterator[tuple]:
    for i in range(count):
        yield scene_at(i, base_seed, cfg, layers)


def scene_at(index: int, base_seed: int, cfg: ProviderConfig, layers: tuple = (3, 7)) -> tuple:
    scene = gen_scene(base_seed + index, cfg)
    return scene, encode(scene, cfg, layers)


# Disjoint seed ranges for training and held-out scenes.
_SPLIT_SHIFT = 62
_SEED_SHIFT = 24


def split_base_seed(split: str, seed: int) -> int:
    code = {"train": 0, "eval": 1}[split]
    if not 0 <= seed < 1 << (_SPLIT_SHIFT - _SEED_SHIFT):
        raise ValueError("seed out of range")
    return (code << _SPLIT_SHIFT) | (seed << _SEED_SHIFT)


def max_split_count() -> int:
    return 1 << _SEED_SHIFT

