"""Flat ``key = value`` run configuration with command-line overrides."""

from __future__ import annotations

from dataclasses import dataclass, field

from .arm import ATTN_MODES, ArmConfig
from .provider import VARIANTS, ProviderConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Unknown key, unparsable value or violated invariant; names its source line."""


def _layer_pair(text: str) -> tuple:
    parts = [p.strip() for p in text.split(",")]
    if len(parts) != 2:
        raise ValueError("expected two comma-separated layers, e.g. 3,7")
    return tuple(int(p) for p in parts)


def _mlp_hidden(text: str):
    return None if text == "auto" else int(text)


def _choice(options):
    def parse(text: str) -> str:
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return text

    return parse


def _seed(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise ValueError("seeds are unsigned 64-bit integers")
    return value


# key -> (section, parser); sections map onto the config dataclasses
KEYS = {
    "variant": ("provider", _choice(tuple(VARIANTS))),
    "img_size": ("provider", int),
    "patch_factor": ("provider", int),
    "embed_dim": ("provider", int),
    "encoder_dim": ("provider", int),
    "class_count": ("provider", int),
    "voronoi_sites": ("provider", int),
    "deep_blur_radius": ("provider", int),
    "deep_noise": ("provider", float),
    "shallow_noise": ("provider", float),
    "temperature": ("provider", float),
    "deep_mix": ("provider", float),
    "deep_gain": ("provider", float),
    "shallow_gain": ("provider", float),
    "encoder_seed": ("provider", _seed),
    "layer_pair": ("arm", _layer_pair),
    "n_cross": ("arm", int),
    "n_self": ("arm", int),
    "attn_mode": ("arm", _choice(ATTN_MODES)),
    "mlp_hidden": ("arm", _mlp_hidden),
    "scale_blocks": ("arm", int),
    "heads": ("arm", int),
    "lr": ("train", float),
    "weight_decay": ("train", float),
    "batch_size": ("train", int),
    "epochs": ("train", int),
    "beta1": ("train", float),
    "beta2": ("train", float),
    "adam_eps": ("train", float),
    "seed": ("train", _seed),
    "train_scenes": ("train", int),
    "eval_scenes": ("run", int),
    "target_variant": ("run", _choice(tuple(VARIANTS))),
    "scene": ("run", int),
    "gen_scenes": ("run", int),
    "checkpoint": ("run", str),
}


@dataclass(frozen=True)
class RunOptions:
    eval_scenes: int = 64
    target_variant: str = "B"
    scene: int = 0  # index into the held-out split, used by ``refine``
    gen_scenes: int = 4
    checkpoint: str = ""  # empty means <out>/arm.ckpt


@dataclass(frozen=True)
class RunConfig:
    provider: ProviderConfig = field(default_factory=ProviderConfig)
    arm: ArmConfig = field(default_factory=ArmConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    run: RunOptions = field(default_factory=RunOptions)
    # keys the user set, as opposed to defaults and variant presets
    explicit: frozenset = field(default=frozenset(), compare=False)

    def to_text(self) -> str:
        """Effective configuration in the same format ``parse_config`` reads."""
        lines = []
        for key, (section, _) in KEYS.items():
            value = getattr(getattr(self, section), key)
            lines.append(f"{key} = {_format(key, value)}")
        return "\n".join(lines) + "\n"


def _format(key: str, value) -> str:
    if key == "layer_pair":
        return f"{value[0]},{value[1]}"
    if key == "mlp_hidden" and value is None:
        return "auto"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _entries(text: str, overrides):
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield f"line {number}: {raw.strip()}", line
    for item in overrides:
        yield f"override '{item}'", item


def parse_config(text: str = "", overrides=()) -> RunConfig:
    """Read ``key = value`` lines (``#`` starts a comment); later entries win.

    Choosing ``variant`` fills in its coarse-path preset; keys given
    explicitly still take precedence over the preset.
    """
    values: dict = {}
    where: dict = {}
    for source, line in _entries(text, overrides):
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}: expected 'key = value'")
        if key not in KEYS:
            raise ConfigError(f"{source}: unknown key '{key}'")
        try:
            values[key] = KEYS[key][1](value)
        except ValueError as exc:
            raise ConfigError(f"{source}: bad value for {key}: {exc}") from None
        where[key] = source

    patch = values.get("patch_factor", ProviderConfig.patch_factor)
    blocks = values.get("scale_blocks", ArmConfig.scale_blocks)
    if isinstance(blocks, int) and blocks >= 0 and patch != 2**blocks:
        keys = [k for k in ("patch_factor", "scale_blocks") if k in where]
        blame = "; ".join(where[k] for k in keys) or "defaults"
        raise ConfigError(f"patch_factor {patch} != 2^scale_blocks = {2**blocks} ({blame})")

    def build(section, factory):
        given = {k: v for k, v in values.items() if KEYS[k][0] == section}
        try:
            return factory(given)
        except ValueError as exc:
            blame = "; ".join(where[k] for k in given) or "defaults"
            raise ConfigError(f"{exc} ({blame})") from None

    provider = build(
        "provider", lambda g: ProviderConfig.for_variant(g.pop("variant", "A"), **g)
    )
    arm = build("arm", lambda g: ArmConfig(**g))
    train = build("train", lambda g: TrainConfig(provider=provider, **g))
    run = build("run", lambda g: _run_options(g))

    if arm.attn_mode == "projected" and provider.embed_dim % arm.heads:
        raise ConfigError(
            f"embed_dim {provider.embed_dim} not divisible by heads {arm.heads} "
            f"({where.get('heads', 'defaults')})"
        )
    return RunConfig(provider, arm, train, run, frozenset(where))


def _run_options(given: dict) -> RunOptions:
    opts = RunOptions(**given)
    if opts.eval_scenes < 1 or opts.gen_scenes < 1 or opts.scene < 0:
        raise ValueError("eval_scenes and gen_scenes must be >= 1, scene >= 0")
    return opts

