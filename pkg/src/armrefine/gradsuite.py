"""Finite-difference checks over every differentiable op and the whole pipeline."""

from __future__ import annotations

import numpy as np

from .arm import ArmConfig, arm_forward, init_arm_weights
from .provider import FeatureBundle
from .tensor import (
    Tensor,
    add,
    bce_with_logits,
    bilinear_resample,
    concat,
    grad_check,
    l2_normalize,
    linear,
    matmul,
    mul_scalar,
    relu,
    reshape,
    sigmoid,
    slice_cols,
    softmax,
    tensor_sum,
    transpose,
    transposed_conv2d,
)
from .training import segmentation_loss


def _rand(rng, *shape) -> Tensor:
    return Tensor(rng.standard_normal(shape), requires_grad=True)


def op_cases(seed: int = 0):
    """Yield (name, loss closure, params) with each op reduced to a scalar by a fixed projection."""
    rng = np.random.default_rng(seed)

    def scalarize(t: Tensor) -> Tensor:
        proj = np.random.default_rng([seed, t.size]).standard_normal((t.size, 1))
        return matmul(reshape(t, (1, t.size)), Tensor(proj))

    a, b = _rand(rng, 3, 4), _rand(rng, 4, 2)
    x3 = _rand(rng, 2, 3, 4)
    xl, wl, bl = _rand(rng, 3, 4), _rand(rng, 4, 5), _rand(rng, 5)
    p, q = _rand(rng, 3, 4), _rand(rng, 3, 4)
    cx, ck, cb = _rand(rng, 2, 2, 3), _rand(rng, 2, 3, 2, 2), _rand(rng, 3)
    logits = _rand(rng, 3, 4)
    targets = rng.uniform(0, 1, (3, 4))
    grid = _rand(rng, 2, 3, 3)
    rows, cols = rng.uniform(0, 1, (5, 3)), rng.uniform(0, 1, (4, 3))
    rows /= rows.sum(axis=1, keepdims=True)
    cols /= cols.sum(axis=1, keepdims=True)
    yield "matmul", lambda: scalarize(matmul(a, b)), [a, b]
    yield "transpose", lambda: scalarize(transpose(p)), [p]
    yield "reshape", lambda: scalarize(reshape(x3, (4, 6))), [x3]
    yield "softmax", lambda: scalarize(softmax(x3, axis=2)), [x3]
    yield "l2_normalize", lambda: scalarize(l2_normalize(x3, axis=1)), [x3]
    yield "linear", lambda: scalarize(linear(xl, wl, bl)), [xl, wl, bl]
    yield "add", lambda: scalarize(add(p, q)), [p, q]
    yield "mul_scalar", lambda: scalarize(mul_scalar(p, -1.7)), [p]
    yield "relu", lambda: scalarize(relu(p)), [p]
    yield "sigmoid", lambda: scalarize(sigmoid(p)), [p]
    yield "concat", lambda: scalarize(concat(p, q, axis=1)), [p, q]
    yield "slice_cols", lambda: scalarize(slice_cols(p, 1, 3)), [p]
    yield "tensor_sum", lambda: tensor_sum(mul_scalar(p, 0.5)), [p]
    yield "transposed_conv2d", lambda: scalarize(transposed_conv2d(cx, ck, cb, 2)), [cx, ck, cb]
    yield "bilinear_resample", lambda: scalarize(bilinear_resample(grid, rows, cols)), [grid]
    yield "bce_with_logits", lambda: bce_with_logits(logits, targets), [logits]


# (grid, embed width, classes, attention mode); tokens N = grid**2 span 4..16
PIPELINE_SHAPES = [
    (2, 4, 2, "literal"),
    (2, 4, 3, "projected"),
    (3, 6, 2, "projected"),
    (3, 8, 3, "literal"),
    (4, 8, 2, "projected"),
]


def pipeline_case(grid: int, width: int, classes: int, mode: str, seed: int = 0):
    """Random float64 toy instance; returns (loss closure, weight tensors)."""
    rng = np.random.default_rng([seed, grid, width, classes])
    n = grid * grid
    text = rng.standard_normal((classes, width))
    bundle = FeatureBundle(
        early=rng.standard_normal((n, width)),
        late=rng.standard_normal((n, width)),
        deep=rng.standard_normal((n, width)),
        text=text / np.linalg.norm(text, axis=1, keepdims=True),
        temperature=5.0,
    )
    cfg = ArmConfig(attn_mode=mode, scale_blocks=1)
    weights = init_arm_weights(seed, cfg, width, width, dtype=np.float64)
    # re-draw every entry at unit-ish scale so no gradient sits near round-off
    for t in weights.parameters():
        t.assign(0.4 * rng.standard_normal(t.shape))
    mask = rng.integers(0, classes, size=(2 * grid, 2 * grid))

    def loss() -> Tensor:
        return segmentation_loss(arm_forward(bundle, weights, cfg).fused, mask, classes)

    return loss, weights.parameters()


def run_suite(seed: int = 0) -> dict:
    """Max relative gradient error per op and per pipeline shape."""
    out = {}
    for name, f, params in op_cases(seed):
        out[f"op.{name}"] = grad_check(f, params)
    for shape in PIPELINE_SHAPES:
        f, params = pipeline_case(*shape, seed=seed)
        g, d, c, mode = shape
        out[f"pipeline.n{g * g}.d{d}.c{c}.{mode}"] = grad_check(f, params)
    return out
