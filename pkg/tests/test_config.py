import pytest

from armrefine.arm import ArmConfig
from armrefine.config import ConfigError, RunConfig, parse_config
from armrefine.provider import ProviderConfig
from armrefine.training import TrainConfig


def test_empty_is_defaults():
    cfg = parse_config("")
    assert cfg == RunConfig()
    assert cfg.provider == ProviderConfig() and cfg.arm == ArmConfig() and cfg.train == TrainConfig()
    assert cfg.run.eval_scenes == 64 and not cfg.explicit


def test_override_epochs():
    assert parse_config("", ["epochs=0"]).train.epochs == 0


def test_later_entries_win():
    text = "epochs = 3\n# a comment\nlr = 0.01  # trailing\nepochs = 4\n"
    cfg = parse_config(text, ["epochs=7"])
    assert cfg.train.epochs == 7 and cfg.train.lr == 0.01
    assert cfg.explicit == {"epochs", "lr"}


def test_scale_invariant_names_line():
    with pytest.raises(ConfigError, match=r"2\^scale_blocks = 4.*line 2: patch_factor = 3"):
        parse_config("seed = 1\npatch_factor = 3\n")


def test_consistent_scale_change():
    cfg = parse_config("patch_factor = 8\nscale_blocks = 3\n")
    assert cfg.arm.upsample_factor == cfg.provider.patch_factor == 8


@pytest.mark.parametrize(
    "text,where",
    [
        ("epochz = 3", "line 1"),
        ("\n\nlr = fast", "line 3"),
        ("attn_mode = fancy", "line 1"),
        ("layer_pair = 3", "line 1"),
        ("just words", "line 1"),
        ("seed = -1", "line 1"),
    ],
)
def test_errors_name_line(text, where):
    with pytest.raises(ConfigError, match=where):
        parse_config(text)


def test_invariant_from_dataclass_names_source():
    with pytest.raises(ConfigError, match="override 'lr=0'"):
        parse_config("", ["lr=0"])
    with pytest.raises(ConfigError, match="line 1"):
        parse_config("voronoi_sites = 2")


def test_variant_preset_and_explicit_key():
    cfg = parse_config("variant = B\ntemperature = 55\n")
    assert cfg.provider.deep_blur_radius == 2 and cfg.provider.temperature == 55.0
    assert cfg.train.provider == cfg.provider


def test_echo_roundtrip():
    cfg = parse_config("variant = B\nlayer_pair = 1,5\nlr = 3e-4\nmlp_hidden = 32\n", ["heads=2"])
    again = parse_config(cfg.to_text())
    assert again == cfg and again.to_text() == cfg.to_text()
    assert "mlp_hidden = auto" in parse_config("").to_text()
