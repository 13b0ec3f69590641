"""mIoU evaluation of coarse versus refined maps, and cross-provider transfer."""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .arm import arm_forward, check_compatible, predict
from .checkpoint import Checkpoint
from .provider import (
    ProviderConfig,
    ProviderMismatchError,
    encode,
    gen_scene,
    max_split_count,
    split_base_seed,
)


class UndefinedMetricError(ValueError):
    """No class appears in either prediction or ground truth."""


def new_confusion(classes: int) -> np.ndarray:
    return np.zeros((classes, classes), dtype=np.int64)


def confusion_accumulate(pred: np.ndarray, gt: np.ndarray, mat: np.ndarray) -> None:
    """Add one count per pixel at ``mat[gt, pred]``."""
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    c = mat.shape[0]
    for name, labels in (("prediction", pred), ("ground truth", gt)):
        if labels.size and (labels.min() < 0 or labels.max() >= c):
            raise ValueError(f"{name} label outside [0, {c})")
    mat += np.bincount(
        gt.ravel().astype(np.int64) * c + pred.ravel().astype(np.int64), minlength=c * c
    ).reshape(c, c)


def class_iou(mat: np.ndarray) -> list:
    """Per-class IoU; NaN where the class is absent from both masks."""
    inter = np.diag(mat).astype(np.float64)
    union = mat.sum(axis=0) + mat.sum(axis=1) - np.diag(mat)
    return [float(i / u) if u else math.nan for i, u in zip(inter, union)]


def miou(mat: np.ndarray) -> float:
    ious = [v for v in class_iou(mat) if not math.isnan(v)]
    if not ious:
        raise UndefinedMetricError("no class present in prediction or ground truth")
    return float(np.mean(ious))


@dataclass
class EvalReport:
    class_iou: list
    miou_coarse: float
    miou_fused: float
    scenes: int
    variant: str
    checkpoint: str
    coarse_matrix: np.ndarray = field(repr=False, default=None)
    fused_matrix: np.ndarray = field(repr=False, default=None)

    @property
    def delta(self) -> float:
        return self.miou_fused - self.miou_coarse

    def lines(self) -> list:
        out = [
            ("variant", self.variant),
            ("checkpoint", self.checkpoint),
            ("scenes", str(self.scenes)),
            ("miou_coarse", _real(self.miou_coarse)),
            ("miou_fused", _real(self.miou_fused)),
            ("delta", _real(self.delta)),
        ]
        out += [(f"iou.{i}", _real(v)) for i, v in enumerate(self.class_iou)]
        return out

    def to_text(self, prefix: str = "") -> str:
        return "".join(f"{prefix}{k}\t{v}\n" for k, v in self.lines())


def _real(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"


def parse_report(text: str) -> dict:
    """Read ``name<TAB>value`` lines back into a dict of strings."""
    out = {}
    for line in text.splitlines():
        if line:
            key, _, value = line.partition("\t")
            out[key] = value
    return out


def check_provider(ckpt: Checkpoint, provider: ProviderConfig) -> None:
    want = {k: str(v) for k, v in provider.fingerprint().items()}
    dims = ("img_size", "patch_factor", "embed_dim", "encoder_dim")
    for key in dims:
        if ckpt.provider.get(key) != want[key]:
            raise ProviderMismatchError(
                f"checkpoint {key}={ckpt.provider.get(key)} but provider has {want[key]}"
            )
    check_compatible(ckpt.arm_config, provider.patch_factor)


def scene_confusions(ckpt: Checkpoint, provider: ProviderConfig, seeds) -> tuple:
    c = provider.class_count
    coarse_mat, fused_mat = new_confusion(c), new_confusion(c)
    for s in seeds:
        scene = gen_scene(int(s), provider)
        bundle = encode(scene, provider, ckpt.arm_config.layer_pair)
        out = arm_forward(bundle, ckpt.weights, ckpt.arm_config)
        confusion_accumulate(predict(out.coarse), scene.gt_mask, coarse_mat)
        confusion_accumulate(predict(out.fused), scene.gt_mask, fused_mat)
    return coarse_mat, fused_mat


def evaluate(
    ckpt: Checkpoint, provider: ProviderConfig, scenes: int, seed: int, workers: int = 1
) -> EvalReport:
    """Score the frozen checkpoint on held-out scenes (seed range disjoint from training)."""
    check_provider(ckpt, provider)
    if not 1 <= scenes <= max_split_count():
        raise ValueError("scenes out of range")
    base = split_base_seed("eval", seed)
    seeds = [base + i for i in range(scenes)]
    workers = max(1, min(int(workers), scenes))
    if workers == 1:
        coarse_mat, fused_mat = scene_confusions(ckpt, provider, seeds)
    else:
        shards = [seeds[i::workers] for i in range(workers)]
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(lambda sh: scene_confusions(ckpt, provider, sh), shards))
        coarse_mat = sum((p[0] for p in parts), new_confusion(provider.class_count))
        fused_mat = sum((p[1] for p in parts), new_confusion(provider.class_count))
    return EvalReport(
        class_iou=class_iou(fused_mat),
        miou_coarse=miou(coarse_mat),
        miou_fused=miou(fused_mat),
        scenes=scenes,
        variant=provider.variant,
        checkpoint=ckpt.fingerprint(),
        coarse_matrix=coarse_mat,
        fused_matrix=fused_mat,
    )


@dataclass
class TransferReport:
    source: EvalReport
    target: EvalReport

    @property
    def cross_delta(self) -> float:
        """Gain on the target provider minus gain on the source provider."""
        return self.target.delta - self.source.delta

    def to_text(self) -> str:
        return (
            self.source.to_text("source.")
            + self.target.to_text("target.")
            + f"cross_delta\t{_real(self.cross_delta)}\n"
        )


def transfer_report(
    ckpt: Checkpoint,
    source: ProviderConfig,
    target: ProviderConfig,
    scenes: int,
    seed: int,
    workers: int = 1,
) -> TransferReport:
    """Evaluate one frozen checkpoint under two coarse-map providers sharing an encoder."""
    if source.fingerprint() != target.fingerprint():
        raise ProviderMismatchError(
            "providers do not share a frozen encoder; transfer across backbones is undefined"
        )
    ck_fp = {k: str(v) for k, v in source.fingerprint().items()}
    if ckpt.provider != ck_fp:
        raise ProviderMismatchError(
            f"checkpoint encoder {ckpt.provider} differs from provider encoder {ck_fp}"
        )
    return TransferReport(
        evaluate(ckpt, source, scenes, seed, workers),
        evaluate(ckpt, target, scenes, seed, workers),
    )
