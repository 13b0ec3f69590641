"""Command-line entry point: ``armrefine <command> [--config FILE] [--out DIR] [key=value ...]``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import pgm
from .ablation import format_table, run_ablation
from .arm import arm_forward, coarse_map, predict
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, parse_config
from .evaluation import check_provider, evaluate, transfer_report
from .gradsuite import run_suite
from .provider import ProviderMismatchError, encode, gen_scene, split_base_seed
from .training import train

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_NO_CHECKPOINT = 4
EXIT_BAD_CHECKPOINT = 5
EXIT_PROVIDER = 6
EXIT_GRADCHECK = 7
EXIT_IO = 8

GRADCHECK_TOLERANCE = 1e-4
COMMANDS = ("gen-data", "train", "eval", "refine", "transfer", "gradcheck", "ablate")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def worker_count() -> int:
    raw = os.environ.get("ARM_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"ARM_THREADS={raw!r} is not an integer") from None
    if value < 1:
        raise ConfigError("ARM_THREADS must be >= 1")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="armrefine", description="Train and evaluate an attention refinement module on synthetic scenes."
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    helps = {
        "gen-data": "write sample scenes and their coarse predictions as PGM",
        "train": "train from scratch and write a checkpoint plus loss log",
        "eval": "score a checkpoint: coarse vs refined mIoU",
        "refine": "write gt/coarse/refined PGMs for one held-out scene",
        "transfer": "score one checkpoint under two coarse providers",
        "gradcheck": "finite-difference check of every op and the full pipeline",
        "ablate": "sweep layer pairs and attention depths at reduced scale",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", type=Path, help="key = value file")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory (default: out)")
        p.add_argument("overrides", nargs="*", metavar="key=value")
    return parser


def load_run_config(path, overrides) -> RunConfig:
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except (OSError, UnicodeDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, overrides)


def checkpoint_path(cfg: RunConfig, out: Path) -> Path:
    return Path(cfg.run.checkpoint) if cfg.run.checkpoint else out / "arm.ckpt"


def read_checkpoint(cfg: RunConfig, out: Path):
    path = checkpoint_path(cfg, out)
    if not path.is_file():
        raise CliError(EXIT_NO_CHECKPOINT, f"checkpoint not found: {path}")
    return load_checkpoint(path)


def cmd_gen_data(cfg: RunConfig, out: Path) -> None:
    prov = cfg.provider
    base = split_base_seed("train", cfg.train.seed)
    for i in range(cfg.run.gen_scenes):
        scene = gen_scene(base + i, prov)
        bundle = encode(scene, prov, cfg.arm.layer_pair)
        coarse = predict(coarse_map(bundle, prov.img_size))
        pgm.write_pgm(pgm.mask_view(scene.gt_mask, prov.class_count), out / f"scene_{i:03d}_gt.pgm")
        pgm.write_pgm(pgm.mask_view(coarse, prov.class_count), out / f"scene_{i:03d}_coarse.pgm")
    print(f"wrote {cfg.run.gen_scenes} scenes to {out}")


def cmd_train(cfg: RunConfig, out: Path) -> None:
    lines = ["epoch\tmean_loss"]

    def on_epoch(epoch, loss):
        lines.append(f"{epoch}\t{loss:.6f}")
        print(f"epoch {epoch}/{cfg.train.epochs}\tloss {loss:.6f}", flush=True)

    ckpt = train(cfg.train, cfg.arm, on_epoch=on_epoch)
    path = checkpoint_path(cfg, out)
    save_checkpoint(ckpt, path)
    (out / "train_log.tsv").write_text("\n".join(lines) + "\n")
    print(f"checkpoint\t{path}\nfingerprint\t{ckpt.fingerprint()}")


def cmd_eval(cfg: RunConfig, out: Path) -> None:
    ckpt = read_checkpoint(cfg, out)
    report = evaluate(ckpt, cfg.provider, cfg.run.eval_scenes, cfg.train.seed, worker_count())
    text = report.to_text()
    (out / f"eval_{cfg.provider.variant}.tsv").write_text(text)
    sys.stdout.write(text)


def cmd_transfer(cfg: RunConfig, out: Path) -> None:
    ckpt = read_checkpoint(cfg, out)
    target = cfg.provider.as_variant(cfg.run.target_variant)
    report = transfer_report(ckpt, cfg.provider, target, cfg.run.eval_scenes, cfg.train.seed, worker_count())
    text = report.to_text()
    (out / "transfer.tsv").write_text(text)
    sys.stdout.write(text)


def cmd_refine(cfg: RunConfig, out: Path) -> None:
    ckpt = read_checkpoint(cfg, out)
    prov = cfg.provider
    check_provider(ckpt, prov)
    scene = gen_scene(split_base_seed("eval", cfg.train.seed) + cfg.run.scene, prov)
    result = arm_forward(encode(scene, prov, ckpt.arm_config.layer_pair), ckpt.weights, ckpt.arm_config)
    c = prov.class_count
    views = [pgm.mask_view(m, c) for m in (scene.gt_mask, predict(result.coarse), predict(result.fused))]
    for name, view in zip(("gt", "coarse", "refined"), views):
        pgm.write_pgm(view, out / f"refine_{name}.pgm")
    pgm.write_pgm(pgm.side_by_side(*views), out / "refine_triptych.pgm")
    pgm.write_pgm(np.abs(result.refinement.data).max(axis=0).astype(np.float64), out / "refine_residual.pgm")
    print(f"wrote gt | coarse | refined for held-out scene {cfg.run.scene} to {out}")


def cmd_gradcheck(cfg: RunConfig, out: Path) -> None:
    results = run_suite(cfg.train.seed)
    worst = max(results.values())
    text = "".join(f"{k}\t{v:.3e}\n" for k, v in results.items()) + f"max_rel_error\t{worst:.3e}\n"
    (out / "gradcheck.tsv").write_text(text)
    sys.stdout.write(text)
    if not worst < GRADCHECK_TOLERANCE:
        raise CliError(EXIT_GRADCHECK, f"max relative error {worst:.3e} >= {GRADCHECK_TOLERANCE:g}")


ABLATION_SCALE = {"train_scenes": 128, "epochs": 2}


def cmd_ablate(cfg: RunConfig, out: Path) -> None:
    # reduced scale unless the user set these keys
    scaled = {k: v for k, v in ABLATION_SCALE.items() if k not in cfg.explicit}
    train_cfg = dataclasses.replace(cfg.train, **scaled)
    rows = run_ablation(
        train_cfg,
        cfg.arm,
        cfg.run.eval_scenes,
        worker_count(),
        on_row=lambda r: print(f"{r.axis}\t{r.setting}\tdelta {r.delta:+.6f}", flush=True),
    )
    table = format_table(rows)
    (out / "ablation.tsv").write_text(table)
    sys.stdout.write(table)


HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "refine": cmd_refine,
    "transfer": cmd_transfer,
    "gradcheck": cmd_gradcheck,
    "ablate": cmd_ablate,
}


def run_command(argv=None) -> int:
    """Parse ``argv`` and run one subcommand; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        cfg = load_run_config(args.config, args.overrides)
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        (out / "effective.cfg").write_text(cfg.to_text())
        HANDLERS[args.command](cfg, out)
    except CliError as exc:
        return _fail(exc.code, str(exc))
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, f"config: {exc}")
    except CheckpointError as exc:
        return _fail(EXIT_BAD_CHECKPOINT, f"checkpoint: {exc}")
    except ProviderMismatchError as exc:
        return _fail(EXIT_PROVIDER, f"provider mismatch: {exc}")
    except OSError as exc:
        return _fail(EXIT_IO, f"i/o: {exc}")
    except ValueError as exc:
        return _fail(EXIT_FAILURE, str(exc))
    return EXIT_OK


def _fail(code: int, message: str) -> int:
    print(f"armrefine: error: {message}", file=sys.stderr)
    return code


def main() -> None:
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    sys.exit(run_command())


if __name__ == "__main__":
    main()
