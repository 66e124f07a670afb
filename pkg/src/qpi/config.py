"""Model, pipeline and run configuration.

Defaults reproduce the published setup: a 12-layer, 12-head, 768-wide
encoder, four CNN widths (2-5) with 100 filters each, batch size 8,
learning rate 1e-5, 12 epochs, and ``max_len`` 64 (packed pairs) or 32
(single questions). ``tiny`` is a 2-layer, 2-head, 16-wide preset for tests.

Run configs are INI files (``key = value`` under ``[model]``,
``[pipeline]``, ``[train]`` and ``[data]``); unknown keys are rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ConfigError

SIAMESE = "siamese"
MATCHED = "matched_aggregation"
SETUP_ALIASES = {"siamese": SIAMESE, "matched_aggregation": MATCHED, "ma": MATCHED}
HEAD_ALIASES = {"cnn": "cnn", "mean": "mean_pool", "mean_pool": "mean_pool"}
PRECISIONS = {"f32": np.float32, "f64": np.float64}
DEFAULT_MAX_LEN = {MATCHED: 64, SIAMESE: 32}
TINY_MAX_LEN = {MATCHED: 16, SIAMESE: 12}


def canonical_setup(name: str) -> str:
    try:
        return SETUP_ALIASES[name.lower()]
    except KeyError:
        raise ConfigError(f"setup: unknown value {name!r} (expected siamese or ma)") from None


def canonical_head(name: str) -> str:
    try:
        return HEAD_ALIASES[name.lower()]
    except KeyError:
        raise ConfigError(f"head: unknown value {name!r} (expected cnn or mean)") from None


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int = 12
    num_heads: int = 12
    embed_dim: int = 768
    ffn_dim: int = 3072
    max_position: int = 512
    vocab_size: int = 30522
    dropout_rate: float = 0.1
    layer_norm_eps: float = 1e-12
    # dense+tanh block over [CLS] shipped with the public pretrained weights;
    # no head reads it, but it is counted as trainable (see training.count_trainable_params)
    pooler: bool = True

    def __post_init__(self):
        if self.num_layers < 0:
            raise ConfigError("num_layers must be >= 0")
        if self.num_heads < 1 or self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if self.embed_dim < 2:
            raise ConfigError("embed_dim must be at least 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must lie in [0, 1)")
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must cover the four special tokens")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass(frozen=True)
class PipelineConfig:
    setup: str = MATCHED
    head: str = "cnn"
    max_len: int | None = None
    trainable_encoders: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "setup", canonical_setup(self.setup))
        object.__setattr__(self, "head", canonical_head(self.head))
        if self.max_len is None:
            object.__setattr__(self, "max_len", DEFAULT_MAX_LEN[self.setup])


@dataclass(frozen=True)
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    widths: tuple[int, ...] = (2, 3, 4, 5)
    filters_per_width: int = 100
    head_dropout: float = 0.1
    init_std: float = 0.02
    precision: str = "f32"

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        p, e = self.pipeline, self.encoder
        if p.max_len > e.max_position:
            raise ConfigError(f"max_len {p.max_len} exceeds max_position {e.max_position}")
        min_len = 3 if p.setup == SIAMESE else 5
        if p.max_len < min_len:
            raise ConfigError(f"max_len must be at least {min_len} for {p.setup}")
        k = p.trainable_encoders
        if k is None:
            object.__setattr__(self, "pipeline", dataclasses.replace(p, trainable_encoders=e.num_layers))
        elif not 0 <= k <= e.num_layers:
            raise ConfigError(f"trainable_encoders must be within 0..{e.num_layers}, got {k}")
        if p.head == "cnn":
            if not self.widths or min(self.widths) < 1 or self.filters_per_width < 1:
                raise ConfigError("CNN head needs positive widths and filters_per_width")
            if max(self.widths) > p.max_len:
                raise ConfigError(f"largest filter width {max(self.widths)} exceeds max_len {p.max_len}")
        if self.precision not in PRECISIONS:
            raise ConfigError(f"precision: unknown value {self.precision!r} (expected f32 or f64)")

    @property
    def dtype(self):
        return PRECISIONS[self.precision]

    @property
    def condensed_dim(self) -> int:
        if self.pipeline.head == "cnn":
            return len(self.widths) * self.filters_per_width
        return self.encoder.embed_dim

    @property
    def classifier_in(self) -> int:
        return self.condensed_dim * (2 if self.pipeline.setup == SIAMESE else 1)

    def replace(self, **changes) -> "ModelConfig":
        enc = {k: changes.pop(k) for k in list(changes) if k in _ENCODER_FIELDS}
        pipe = {k: changes.pop(k) for k in list(changes) if k in _PIPELINE_FIELDS}
        if "setup" in pipe and "max_len" not in pipe:
            pipe["max_len"] = None
        if ("num_layers" in enc and "trainable_encoders" not in pipe
                and self.pipeline.trainable_encoders == self.encoder.num_layers):
            pipe["trainable_encoders"] = None
        return dataclasses.replace(
            self,
            encoder=dataclasses.replace(self.encoder, **enc),
            pipeline=dataclasses.replace(self.pipeline, **pipe),
            **changes,
        )

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ModelConfig":
        d = dict(d)
        return cls(
            encoder=EncoderConfig(**d.pop("encoder")),
            pipeline=PipelineConfig(**d.pop("pipeline")),
            **{k: (tuple(v) if k == "widths" else v) for k, v in d.items()},
        )


_ENCODER_FIELDS = {f.name for f in dataclasses.fields(EncoderConfig)}
_PIPELINE_FIELDS = {f.name for f in dataclasses.fields(PipelineConfig)}


def base_config(setup: str = MATCHED, head: str = "cnn", trainable_encoders: int | None = None,
                 **overrides) -> ModelConfig:
    cfg = ModelConfig(pipeline=PipelineConfig(setup=setup, head=head, trainable_encoders=trainable_encoders))
    return cfg.replace(**overrides) if overrides else cfg


def tiny_config(setup: str = MATCHED, head: str = "cnn", vocab_size: int = 64, **overrides) -> ModelConfig:
    setup = canonical_setup(setup)
    max_len = overrides.pop("max_len", TINY_MAX_LEN[setup])
    cfg = ModelConfig(
        encoder=EncoderConfig(num_layers=2, num_heads=2, embed_dim=16, ffn_dim=64,
                              max_position=max(64, max_len), vocab_size=vocab_size, pooler=False),
        pipeline=PipelineConfig(setup=setup, head=head, max_len=max_len),
        widths=(2, 3),
        filters_per_width=2,
        precision="f64",
    )
    return cfg.replace(**overrides) if overrides else cfg


PRESETS = {"base": base_config, "tiny": tiny_config}


@dataclass(frozen=True)
class TrainSettings:
    epochs: int = 12
    batch_size: int = 8
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_train: bool = True
    stop_at_train_accuracy: float | None = None

    def __post_init__(self):
        if self.epochs < 0 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs must be >= 0, batch_size >= 1 and lr > 0")


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig
    train: TrainSettings = field(default_factory=TrainSettings)
    data_dir: str | None = None
    out_dir: str | None = None
    vocab_file: str | None = None
    min_freq: int = 1
    strict_split: bool = False


# section -> key -> (target, parser)
def _bool(v: str) -> bool:
    low = v.strip().lower()
    if low in {"1", "true", "yes", "on"}:
        return True
    if low in {"0", "false", "no", "off"}:
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _ints(v: str) -> tuple[int, ...]:
    return tuple(int(x) for x in v.replace(" ", "").split(",") if x)


def _opt_float(v: str) -> float | None:
    return None if v.strip().lower() in {"", "none"} else float(v)


_SCHEMA: dict[str, dict[str, tuple[str, Any]]] = {
    "model": {
        "preset": ("meta", str),
        "layers": ("encoder.num_layers", int),
        "heads": ("encoder.num_heads", int),
        "d": ("encoder.embed_dim", int),
        "ffn_dim": ("encoder.ffn_dim", int),
        "max_position": ("encoder.max_position", int),
        "vocab_size": ("encoder.vocab_size", int),
        "dropout": ("encoder.dropout_rate", float),
        "layer_norm_eps": ("encoder.layer_norm_eps", float),
        "pooler": ("encoder.pooler", _bool),
        "widths": ("model.widths", _ints),
        "filters": ("model.filters_per_width", int),
        "head_dropout": ("model.head_dropout", float),
        "init_std": ("model.init_std", float),
        "precision": ("model.precision", str),
    },
    "pipeline": {
        "setup": ("pipeline.setup", str),
        "head": ("pipeline.head", str),
        "max_len": ("pipeline.max_len", int),
        "trainable_encoders": ("pipeline.trainable_encoders", int),
    },
    "train": {
        "epochs": ("train.epochs", int),
        "batch": ("train.batch_size", int),
        "lr": ("train.lr", float),
        "beta1": ("train.beta1", float),
        "beta2": ("train.beta2", float),
        "eps": ("train.eps", float),
        "seed": ("train.seed", int),
        "eval_train": ("train.eval_train", _bool),
        "stop_at_train_accuracy": ("train.stop_at_train_accuracy", _opt_float),
    },
    "data": {
        "data_dir": ("run.data_dir", str),
        "out_dir": ("run.out_dir", str),
        "vocab_file": ("run.vocab_file", str),
        "min_freq": ("run.min_freq", int),
        "strict_split": ("run.strict_split", _bool),
    },
}


def parse_run_config(text: str, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Parse INI text into a :class:`RunConfig`.

    ``overrides`` use ``section.key`` names (``pipeline.setup``...) and win
    over the file.
    """
    parser = configparser.ConfigParser(interpolation=None, default_section="__none__")
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc

    values: dict[str, Any] = {}
    raw: list[tuple[str, str, str]] = [(s, k, v) for s in parser.sections() for k, v in parser.items(s)]
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        section, _, name = key.partition(".")
        raw.append((section, name, str(val)))
    for section, key, val in raw:
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section [{section}]")
        if key not in _SCHEMA[section]:
            raise ConfigError(f"unknown config key {section}.{key}")
        target, conv = _SCHEMA[section][key]
        try:
            values[target] = conv(val)
        except ValueError as exc:
            raise ConfigError(f"{section}.{key}: {exc}") from exc

    preset = values.pop("meta", "base")
    if preset not in PRESETS:
        raise ConfigError(f"model.preset: unknown value {preset!r} (expected base or tiny)")
    setup = values.get("pipeline.setup", MATCHED)
    head = values.get("pipeline.head", "cnn")
    base = PRESETS[preset](setup=setup, head=head)

    model_changes: dict[str, Any] = {}
    train_changes: dict[str, Any] = {}
    run_changes: dict[str, Any] = {}
    for target, val in values.items():
        group, _, name = target.partition(".")
        if group in {"encoder", "pipeline", "model"}:
            model_changes[name] = val
        elif group == "train":
            train_changes[name] = val
        else:
            run_changes[name] = val
    if "setup" in model_changes and "max_len" not in model_changes:
        model_changes["max_len"] = base.pipeline.max_len if preset == "tiny" else None
    try:
        model = base.replace(**model_changes)
        train = TrainSettings(**train_changes)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(model=model, train=train, **run_changes)


def load_run_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    text = ""
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_run_config(text, overrides)
