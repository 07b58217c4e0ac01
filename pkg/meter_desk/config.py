"""Run configuration: dataclass sections parsed from a flat ``section.key = value`` file.

Key resolution order is preset, then file keys, then ``--set`` overrides. The
resolved config renders back to the same format (every key, sorted), so a
snapshot re-fed as a config file reproduces the run.

Dataclass defaults are the desk-scale values of the ``toy`` preset. The published
base model (768 hidden, 12 merged or 6 co-attention fusion layers, 3+3 encoder-decoder
layers) is the ``paper-base`` preset; ``fusion.layers = 0`` resolves the depth per kind.
"""

import itertools
import logging
from dataclasses import dataclass, field, fields, replace

from meter_desk import settings
from meter_desk.exceptions import ConfigError

logger = logging.getLogger(__name__)

OBJECTIVE_NAMES = ("mlm", "itm", "mim_ibn", "mim_dc", "span_lm")

ENUMS = {
    "preset": tuple(settings.PRESETS),
    "fusion.kind": ("merged", "coattn"),
    "fusion.arch": ("encoder_only", "encoder_decoder"),
    "fusion.cross_order": ("text_first", "vision_first"),
    "objective.count_rule": ("stochastic", "round"),
    "finetune.task": ("vqa", "itm"),
}


@dataclass
class EncoderConfig:
    hidden: int = 64
    heads: int = 4
    layers: int = 2
    ffn_mult: float = 4.0
    patch_size: int = 8
    max_positions: int = 32


@dataclass
class FusionConfig:
    kind: str = "coattn"
    # 0 picks the paired default: coattn_depth for co-attention, twice that for merged
    layers: int = 0
    hidden: int = 64
    heads: int = 4
    ffn_mult: float = 4.0
    arch: str = "encoder_only"
    dec_layers: int = 2
    coattn_depth: int = 2
    cross_order: str = "text_first"
    cross_zero_init: bool = False

    @property
    def resolved_layers(self) -> int:
        if self.layers > 0:
            return self.layers
        if self.arch == "encoder_decoder":
            return self.dec_layers
        return self.coattn_depth if self.kind == "coattn" else 2 * self.coattn_depth


@dataclass
class ModelConfig:
    multiscale: bool = False


@dataclass
class ObjectiveConfig:
    mlm_ratio: float = 0.15
    mim_ratio: float = 0.15
    span_ratio: float = 0.15
    mean_span: float = 3.0
    count_rule: str = "stochastic"
    w_mlm: float = 1.0
    w_itm: float = 1.0
    w_mim_ibn: float = 1.0
    w_mim_dc: float = 1.0
    w_span_lm: float = 1.0

    def weights(self) -> dict:
        return {name: getattr(self, f"w_{name}") for name in OBJECTIVE_NAMES}


@dataclass
class OptimConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr_bottom: float = 2e-4
    lr_top: float = 1e-3
    warmup_ratio: float = 0.1
    seed: int = 0
    eval_every: int = 100
    # false: one group at lr_top for every parameter
    layered_lr: bool = True


@dataclass
class DataConfig:
    seed: int = 0
    corpus_size: int = 64
    resolution: int = 32
    with_qa: bool = True
    max_text_len: int = 16
    codebook_k: int = 64
    codebook_iters: int = 20


@dataclass
class FinetuneConfig:
    task: str = "vqa"
    # 0 keeps data.resolution
    resolution: int = 0
    lr_bottom: float = 2e-4
    lr_top: float = 1e-3
    steps: int = 500
    batch_size: int = 16


@dataclass
class BenchConfig:
    repeats: int = 10
    warmup: int = 2
    batch_size: int = 1


@dataclass
class ExportConfig:
    pair_seed: int = 0
    # empty selects every fusion layer
    layers: tuple = ()


@dataclass
class PathsConfig:
    out_dir: str = "runs/default"
    manifest: str = ""
    checkpoint: str = ""


@dataclass
class RunConfig:
    preset: str = "toy"
    objectives: tuple = ("mlm", "itm")
    text: EncoderConfig = field(default_factory=EncoderConfig)
    vision: EncoderConfig = field(default_factory=EncoderConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    objective: ObjectiveConfig = field(default_factory=ObjectiveConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    export: ExportConfig = field(default_factory=ExportConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    # axis key -> tuple of raw values, in listed order
    grid: dict = field(default_factory=dict)

    @property
    def grid_size(self) -> int:
        return self.data.resolution // self.vision.patch_size

    @property
    def finetune_resolution(self) -> int:
        return self.finetune.resolution or self.data.resolution

    def has(self, objective: str) -> bool:
        return objective in self.objectives


SECTIONS = tuple(f.name for f in fields(RunConfig) if f.name not in ("preset", "objectives", "grid"))
TOP_LEVEL = ("preset", "objectives")


def _section_types(section: str) -> dict:
    section_cls = {f.name: f.default_factory for f in fields(RunConfig) if f.name in SECTIONS}[section]
    return {f.name: f.type for f in fields(section_cls)}


def known_keys() -> list:
    keys = list(TOP_LEVEL)
    for section in SECTIONS:
        keys.extend(f"{section}.{name}" for name in _section_types(section))
    return sorted(keys)


def parse_config_text(text: str) -> dict:
    """``key = value`` lines to a dict; ``#`` comments and blank lines are ignored."""
    pairs = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key '{key}'", key=key)
        pairs[key] = value
    return pairs


def parse_overrides(overrides) -> dict:
    pairs = {}
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override '{item}' is not of the form key=value")
        key, value = (part.strip() for part in item.split("=", 1))
        pairs[key] = value
    return pairs


def _parse_bool(key, raw):
    lowered = raw.lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got '{raw}'", key=key)


def _coerce(key: str, kind, raw: str):
    try:
        if kind is bool:
            return _parse_bool(key, raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is tuple:
            return tuple(part.strip() for part in raw.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"{key}: cannot parse '{raw}' as {kind.__name__}", key=key) from None
    return raw


def _check_enum(key, value):
    if key in ENUMS and value not in ENUMS[key]:
        raise ConfigError(f"{key}: '{value}' is not one of {', '.join(ENUMS[key])}", key=key)


def build_run_config(pairs: dict, overrides=None) -> RunConfig:
    """Resolve preset, file keys and overrides into a validated RunConfig."""
    merged = dict(pairs)
    merged.update(overrides if isinstance(overrides, dict) else parse_overrides(overrides))

    preset = merged.get("preset", RunConfig.preset)
    _check_enum("preset", preset)
    resolved = dict(settings.PRESETS[preset])
    resolved.update(merged)
    resolved["preset"] = preset

    grid = {}
    sections = {name: {} for name in SECTIONS}
    top = {}
    for key, raw in resolved.items():
        if key.startswith("grid."):
            axis = key[len("grid."):]
            if axis not in known_keys() or axis == "preset":
                raise ConfigError(f"grid axis '{axis}' is not a config key", key=key)
            grid[axis] = tuple(v.strip() for v in raw.split(";") if v.strip())
            if not grid[axis]:
                raise ConfigError(f"grid axis '{axis}' lists no values", key=key)
            continue
        if key in TOP_LEVEL:
            top[key] = _coerce(key, tuple if key == "objectives" else str, raw)
            continue
        section, _, name = key.partition(".")
        if section not in sections or name not in _section_types(section):
            raise ConfigError(f"unknown config key '{key}'", key=key)
        value = _coerce(key, _section_types(section)[name], raw)
        _check_enum(key, value)
        sections[section][name] = value

    defaults = RunConfig()
    config = RunConfig(
        preset=top["preset"],
        objectives=top.get("objectives", defaults.objectives),
        grid=dict(sorted(grid.items())),
        **{name: replace(getattr(defaults, name), **values) for name, values in sections.items()},
    )
    if config.export.layers:
        try:
            config.export.layers = tuple(str(int(v)) for v in config.export.layers)
        except ValueError:
            raise ConfigError(f"export.layers: expected layer indices, got {config.export.layers}", key="export.layers") from None
    validate(config)
    return config


def validate(config: RunConfig) -> None:
    """Raise ConfigError naming the first violated invariant."""
    def fail(message, key=None):
        raise ConfigError(message, key=key)

    unknown = [o for o in config.objectives if o not in OBJECTIVE_NAMES]
    if unknown:
        fail(f"objectives: unknown objective(s) {', '.join(unknown)}", "objectives")
    if not config.objectives:
        fail("objectives: at least one objective must be enabled", "objectives")
    if len(set(config.objectives)) != len(config.objectives):
        fail("objectives: duplicate entries", "objectives")
    if config.has("mim_ibn") and config.has("mim_dc"):
        fail("objectives: mim_ibn and mim_dc cannot both be enabled (one MIM variant per run)", "objectives")
    if config.has("span_lm") and config.fusion.arch != "encoder_decoder":
        fail("objectives: span_lm requires fusion.arch = encoder_decoder", "objectives")

    for section in ("text", "vision", "fusion"):
        enc = getattr(config, section)
        if enc.hidden < 1 or enc.heads < 1 or enc.hidden % enc.heads:
            fail(f"{section}.hidden ({enc.hidden}) must be divisible by {section}.heads ({enc.heads})", f"{section}.hidden")
        if enc.ffn_mult <= 0:
            fail(f"{section}.ffn_mult must be positive", f"{section}.ffn_mult")
    for section in ("text", "vision"):
        if getattr(config, section).layers < 1:
            fail(f"{section}.layers must be at least 1", f"{section}.layers")
    if config.fusion.layers < 0 or config.fusion.resolved_layers < 1:
        fail("fusion.layers must resolve to at least 1 layer", "fusion.layers")
    if config.fusion.arch == "encoder_decoder" and config.fusion.dec_layers < 1:
        fail("fusion.dec_layers must be at least 1 for encoder_decoder", "fusion.dec_layers")

    obj = config.objective
    for key in ("mlm_ratio", "mim_ratio", "span_ratio"):
        if not 0.0 < getattr(obj, key) < 1.0:
            fail(f"objective.{key} must lie in (0, 1)", f"objective.{key}")
    if obj.mean_span <= 0:
        fail("objective.mean_span must be positive", "objective.mean_span")

    train = config.train
    if train.steps <= 0:
        fail("train.steps must be positive", "train.steps")
    if train.batch_size < 1 or (config.has("itm") and train.batch_size < 2):
        fail("train.batch_size must be at least 2 when itm is enabled", "train.batch_size")
    if not 0.0 < train.warmup_ratio < 1.0:
        fail("train.warmup_ratio must lie in (0, 1)", "train.warmup_ratio")
    if train.lr_bottom < 0 or train.lr_top < 0:
        fail("learning rates must be non-negative", "train.lr_top")
    if train.eval_every < 1:
        fail("train.eval_every must be at least 1", "train.eval_every")

    data = config.data
    patch = config.vision.patch_size
    for key, resolution in (("data.resolution", data.resolution), ("finetune.resolution", config.finetune_resolution)):
        if resolution not in settings.SUPPORTED_RESOLUTIONS:
            fail(f"{key} must be one of {settings.SUPPORTED_RESOLUTIONS}, got {resolution}", key)
        if patch < 1 or resolution % patch:
            fail(f"{key} ({resolution}) must be divisible by vision.patch_size ({patch})", key)
        if config.vision.max_positions and config.vision.max_positions < (resolution // patch) ** 2 + 1:
            fail(f"vision.max_positions is too small for a {resolution}px grid", "vision.max_positions")
    if data.corpus_size < 2:
        fail("data.corpus_size must be at least 2", "data.corpus_size")
    if data.max_text_len < 3:
        fail("data.max_text_len must leave room for [CLS] and [SEP]", "data.max_text_len")
    if config.text.max_positions < data.max_text_len:
        fail("text.max_positions must be at least data.max_text_len", "text.max_positions")
    if data.codebook_k < 2 or data.codebook_iters < 1:
        fail("data.codebook_k must be >= 2 and data.codebook_iters >= 1", "data.codebook_k")

    if config.finetune.steps < 1 or config.finetune.batch_size < 1:
        fail("finetune.steps and finetune.batch_size must be positive", "finetune.steps")
    if config.bench.repeats < 3:
        fail("bench.repeats must be at least 3", "bench.repeats")
    if config.bench.warmup < 0 or config.bench.batch_size < 1:
        fail("bench.warmup must be >= 0 and bench.batch_size >= 1", "bench.warmup")


def _render_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def config_pairs(config: RunConfig, with_grid: bool = True) -> dict:
    pairs = {"preset": config.preset, "objectives": _render_value(config.objectives)}
    for section in SECTIONS:
        values = getattr(config, section)
        for name in _section_types(section):
            pairs[f"{section}.{name}"] = _render_value(getattr(values, name))
    if with_grid:
        for axis, values in config.grid.items():
            pairs[f"grid.{axis}"] = ";".join(values)
    return dict(sorted(pairs.items()))


def render_config(config: RunConfig, with_grid: bool = True) -> str:
    """Every key, sorted, one ``key = value`` per line."""
    return "".join(f"{key} = {value}\n" for key, value in config_pairs(config, with_grid).items())


def load_config(filepath: str = None, overrides=None) -> RunConfig:
    pairs = {}
    if filepath:
        try:
            with open(filepath, "r", encoding="utf-8") as f:
                pairs = parse_config_text(f.read())
        except OSError as e:
            raise ConfigError(f"cannot read config file '{filepath}': {e}") from e
        logger.info(f"Loaded {len(pairs)} config keys from '{filepath}'")
    return build_run_config(pairs, overrides)


def point_name(point: dict) -> str:
    if not point:
        return "base"
    return "__".join(f"{axis}={value}".replace(",", "+") for axis, value in point.items())


def expand_grid(config: RunConfig) -> list:
    """(point_name, RunConfig) for the cross product of the grid axes.

    Axes are taken sorted by name and values in listed order; an empty grid
    yields the base config alone.
    """
    base = config_pairs(config, with_grid=False)
    axes = sorted(config.grid)
    points = []
    for values in itertools.product(*(config.grid[a] for a in axes)):
        point = dict(zip(axes, values))
        points.append((point_name(point), build_run_config(base, point)))
    return points
