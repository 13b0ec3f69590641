import numpy as np
import pytest

from armrefine import cli
from armrefine.ablation import DEPTHS, LAYER_PAIRS, format_table, run_ablation
from armrefine.arm import ArmConfig, init_arm_weights, zero_refinement
from armrefine.checkpoint import Checkpoint, save_checkpoint
from armrefine.config import parse_config
from armrefine.evaluation import parse_report
from armrefine.pgm import read_pgm

SMALL = [
    "img_size=16",
    "embed_dim=8",
    "encoder_dim=8",
    "class_count=3",
    "voronoi_sites=6",
    "train_scenes=6",
    "epochs=1",
    "eval_scenes=4",
]


def run(*argv):
    return cli.run_command(list(argv))


def test_gradcheck(tmp_path, capsys):
    assert run("gradcheck", "--out", str(tmp_path)) == 0
    worst = float(parse_report(capsys.readouterr().out)["max_rel_error"])
    assert worst < 1e-4


def test_train_eval_twice_identical(tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert run("train", "--out", str(out), *SMALL) == 0
        assert run("eval", "--out", str(out), *SMALL) == 0
        outs.append(out)
    a, b = outs
    assert (a / "arm.ckpt").read_bytes() == (b / "arm.ckpt").read_bytes()
    assert (a / "eval_A.tsv").read_bytes() == (b / "eval_A.tsv").read_bytes()
    log = (a / "train_log.tsv").read_text().splitlines()
    assert log[0] == "epoch\tmean_loss" and len(log) == 2


def test_effective_config_reproduces(tmp_path):
    first = tmp_path / "first"
    assert run("train", "--out", str(first), *SMALL, "seed=3") == 0
    second = tmp_path / "second"
    assert run("train", "--out", str(second), "--config", str(first / "effective.cfg")) == 0
    assert (first / "arm.ckpt").read_bytes() == (second / "arm.ckpt").read_bytes()
    assert (first / "effective.cfg").read_text() == (second / "effective.cfg").read_text()


def test_eval_zeroed_checkpoint(tmp_path, capsys):
    cfg = parse_config("", SMALL)
    w = zero_refinement(init_arm_weights(0, ArmConfig(), 8, 8))
    save_checkpoint(Checkpoint.build(ArmConfig(), w, cfg.provider, cfg.train, []), tmp_path / "arm.ckpt")
    assert run("eval", "--out", str(tmp_path), *SMALL) == 0
    assert parse_report(capsys.readouterr().out)["delta"] == "0.000000"
    assert run("transfer", "--out", str(tmp_path), *SMALL) == 0
    report = parse_report((tmp_path / "transfer.tsv").read_text())
    assert report["source.delta"] == report["target.delta"] == "0.000000"


def test_gen_data_and_refine(tmp_path):
    assert run("gen-data", "--out", str(tmp_path), *SMALL, "gen_scenes=2") == 0
    gt = read_pgm(tmp_path / "scene_001_gt.pgm")
    assert gt.shape == (16, 16) and len(np.unique(gt)) == 3
    assert run("train", "--out", str(tmp_path), *SMALL) == 0
    assert run("refine", "--out", str(tmp_path), *SMALL, "scene=1") == 0
    assert read_pgm(tmp_path / "refine_triptych.pgm").shape == (16, 3 * 16 + 4)
    assert (tmp_path / "refine_residual.pgm").exists()


def test_inputs_not_mutated(tmp_path):
    assert run("train", "--out", str(tmp_path), *SMALL) == 0
    before = (tmp_path / "arm.ckpt").read_bytes()
    assert run("eval", "--out", str(tmp_path), *SMALL) == 0
    assert (tmp_path / "arm.ckpt").read_bytes() == before


@pytest.mark.parametrize(
    "argv,code",
    [
        (["bogus"], cli.EXIT_USAGE),
        (["train", "epochz=1"], cli.EXIT_CONFIG),
        (["train", "patch_factor=3"], cli.EXIT_CONFIG),
        (["eval"], cli.EXIT_NO_CHECKPOINT),
    ],
)
def test_exit_codes(tmp_path, argv, code):
    argv = argv[:1] + ["--out", str(tmp_path / "o")] + argv[1:] if argv[0] in cli.COMMANDS else argv
    assert run(*argv) == code


def test_corrupt_and_mismatched_checkpoint(tmp_path):
    assert run("train", "--out", str(tmp_path), *SMALL) == 0
    raw = bytearray((tmp_path / "arm.ckpt").read_bytes())
    raw[30] ^= 0xFF
    (tmp_path / "bad.ckpt").write_bytes(bytes(raw))
    assert run("eval", "--out", str(tmp_path), *SMALL, f"checkpoint={tmp_path / 'bad.ckpt'}") == cli.EXIT_BAD_CHECKPOINT
    assert run("eval", "--out", str(tmp_path), "eval_scenes=2") == cli.EXIT_PROVIDER


def test_thread_env(tmp_path, monkeypatch):
    assert run("train", "--out", str(tmp_path), *SMALL) == 0
    monkeypatch.setenv("ARM_THREADS", "3")
    assert run("eval", "--out", str(tmp_path), *SMALL) == 0
    monkeypatch.setenv("ARM_THREADS", "zero")
    assert run("eval", "--out", str(tmp_path), *SMALL) == cli.EXIT_CONFIG


def test_ablation_small():
    cfg = parse_config("", SMALL + ["train_scenes=4"])
    rows = run_ablation(cfg.train, cfg.arm, eval_scenes=2)
    assert len(rows) == len(LAYER_PAIRS) + len(DEPTHS)
    table = format_table(rows).splitlines()
    assert table[0].split("\t") == ["axis", "setting", "final_loss", "miou_coarse", "miou_fused", "delta"]
    assert {r.setting for r in rows} >= {"1,3", "5,7", "self=0,cross=0", "self=2,cross=2"}
