"""Train the refinement module on synthetic scenes with the encoder frozen."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .arm import ArmConfig, ArmWeights, arm_forward, check_compatible, init_arm_weights
from .checkpoint import Checkpoint
from .provider import ProviderConfig, encode, gen_scene, max_split_count, split_base_seed
from .tensor import Tape, Tensor, add, bce_with_logits, mul_scalar

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-3
    batch_size: int = 4
    epochs: int = 5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    train_scenes: int = 512
    provider: ProviderConfig = field(default_factory=ProviderConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0 or self.weight_decay < 0 or self.adam_eps <= 0:
            raise ValueError("epochs and weight_decay must be >= 0, adam_eps > 0")
        if not 1 <= self.train_scenes <= max_split_count():
            raise ValueError("train_scenes out of range")


def one_hot_targets(gt_mask: np.ndarray, classes: int, dtype=np.float32) -> np.ndarray:
    if gt_mask.min() < 0 or gt_mask.max() >= classes:
        raise ValueError(f"mask label outside [0, {classes})")
    return (np.arange(classes)[:, None, None] == gt_mask[None]).astype(dtype)


def segmentation_loss(fused: Tensor, gt_mask: np.ndarray, classes: int) -> Tensor:
    """BCE of every class channel against its one-hot target, mean over C*H*W."""
    if fused.shape != (classes,) + gt_mask.shape:
        raise ValueError(f"map {fused.shape} does not match mask {gt_mask.shape} x {classes}")
    return bce_with_logits(fused, one_hot_targets(gt_mask, classes, fused.dtype))


@dataclass
class OptimizerState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, params: list) -> "OptimizerState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adamw_step(params: list, grads: list, state: OptimizerState, cfg: TrainConfig) -> None:
    """One AdamW update with decoupled weight decay, in place."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state must align")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.shape or state.m[i].shape != p.shape:
            raise ValueError(f"shape mismatch for parameter {i}: {p.shape} vs grad {g.shape}")
        m = state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        v = state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        theta = p.data
        update = (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps) + cfg.weight_decay * theta
        p.assign((theta - cfg.lr * update).astype(theta.dtype))


def batch_loss(batch: list, weights: ArmWeights, arm_cfg: ArmConfig, classes: int) -> Tensor:
    total = None
    for scene, bundle in batch:
        loss = segmentation_loss(arm_forward(bundle, weights, arm_cfg).fused, scene.gt_mask, classes)
        total = loss if total is None else add(total, loss)
    return mul_scalar(total, 1.0 / len(batch))


def train_step(batch: list, weights: ArmWeights, arm_cfg: ArmConfig, state: OptimizerState,
               cfg: TrainConfig) -> float:
    params = weights.parameters()
    for p in params:
        p.zero_grad()
    with Tape():
        loss = batch_loss(batch, weights, arm_cfg, cfg.provider.class_count)
    loss.backward()
    adamw_step(params, [p.grad for p in params], state, cfg)
    return loss.item()


def training_set(cfg: TrainConfig, layers: tuple) -> list:
    base = split_base_seed("train", cfg.seed)
    out = []
    for i in range(cfg.train_scenes):
        scene = gen_scene(base + i, cfg.provider)
        out.append((scene, encode(scene, cfg.provider, layers)))
    return out


def epoch_order(seed: int, epoch: int, count: int) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), int(epoch), 0x5F1]))
    return rng.permutation(count)


def train(
    cfg: TrainConfig,
    arm_cfg: ArmConfig,
    dataset: Optional[list] = None,
    on_epoch: Optional[Callable[[int, float], None]] = None,
) -> Checkpoint:
    prov = cfg.provider
    check_compatible(arm_cfg, prov.patch_factor)
    weights = init_arm_weights(cfg.seed, arm_cfg, prov.encoder_dim, prov.embed_dim)
    data = dataset if dataset is not None else training_set(cfg, arm_cfg.layer_pair)
    state = OptimizerState.zeros_like(weights.parameters())
    epoch_losses = []
    for epoch in range(cfg.epochs):
        order = epoch_order(cfg.seed, epoch, len(data))
        losses = []
        for start in range(0, len(order), cfg.batch_size):
            batch = [data[j] for j in order[start : start + cfg.batch_size]]
            losses.append(train_step(batch, weights, arm_cfg, state, cfg))
        epoch_losses.append(float(np.mean(losses)))
        logger.info("epoch %d/%d mean loss %.6f", epoch + 1, cfg.epochs, epoch_losses[-1])
        if on_epoch is not None:
            on_epoch(epoch + 1, epoch_losses[-1])
    return Checkpoint.build(arm_cfg, weights, prov, cfg, epoch_losses)


def overfit(cfg: TrainConfig, arm_cfg: ArmConfig, scenes: int = 4, steps: int = 500) -> tuple:
    """Repeatedly step on one fixed batch; returns (initial loss, final loss, weights)."""
    prov = cfg.provider
    check_compatible(arm_cfg, prov.patch_factor)
    base = split_base_seed("train", cfg.seed)
    batch = []
    for i in range(scenes):
        scene = gen_scene(base + i, prov)
        batch.append((scene, encode(scene, prov, arm_cfg.layer_pair)))
    weights = init_arm_weights(cfg.seed, arm_cfg, prov.encoder_dim, prov.embed_dim)
    state = OptimizerState.zeros_like(weights.parameters())
    initial = batch_loss(batch, weights, arm_cfg, prov.class_count).item()
    for _ in range(steps):
        train_step(batch, weights, arm_cfg, state, cfg)
    final = batch_loss(batch, weights, arm_cfg, prov.class_count).item()
    return initial, final, weights
