"""Layer-pair and attention-depth sweeps at reduced scale."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .arm import ArmConfig
from .evaluation import evaluate
from .training import TrainConfig, train, training_set

LAYER_PAIRS = [(1, 3), (1, 5), (1, 7), (3, 5), (3, 7), (5, 7)]
# (n_self, n_cross)
DEPTHS = [(0, 0), (0, 1), (1, 0), (1, 1), (2, 1), (1, 2), (2, 2)]


@dataclass(frozen=True)
class AblationRow:
    axis: str
    setting: str
    final_loss: float
    miou_coarse: float
    miou_fused: float

    @property
    def delta(self) -> float:
        return self.miou_fused - self.miou_coarse


def sweep_configs(base: ArmConfig):
    for pair in LAYER_PAIRS:
        yield "layer_pair", f"{pair[0]},{pair[1]}", dataclasses.replace(base, layer_pair=pair)
    for n_self, n_cross in DEPTHS:
        cfg = dataclasses.replace(base, n_self=n_self, n_cross=n_cross)
        yield "depth", f"self={n_self},cross={n_cross}", cfg


def run_ablation(
    train_cfg: TrainConfig,
    base: ArmConfig,
    eval_scenes: int,
    workers: int = 1,
    on_row=None,
) -> list:
    """Train and evaluate every sweep setting; no ordering is implied by the result."""
    datasets: dict = {}
    rows = []
    for axis, setting, cfg in sweep_configs(base):
        pair = cfg.layer_pair
        if pair not in datasets:
            datasets[pair] = training_set(train_cfg, pair)
        ckpt = train(train_cfg, cfg, dataset=datasets[pair])
        report = evaluate(ckpt, train_cfg.provider, eval_scenes, train_cfg.seed, workers)
        row = AblationRow(
            axis, setting, float(ckpt.train_meta["final_loss"]), report.miou_coarse, report.miou_fused
        )
        rows.append(row)
        if on_row is not None:
            on_row(row)
    return rows


def format_table(rows: list) -> str:
    header = "axis\tsetting\tfinal_loss\tmiou_coarse\tmiou_fused\tdelta"
    body = [
        f"{r.axis}\t{r.setting}\t{r.final_loss:.6f}\t{r.miou_coarse:.6f}\t{r.miou_fused:.6f}\t{r.delta:+.6f}"
        for r in rows
    ]
    return "\n".join([header] + body) + "\n"
