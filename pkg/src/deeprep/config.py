"""Model, strategy, and training configuration plus the flat ``key = value`` file format."""

from __future__ import annotations

import dataclasses
import enum
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class Strategy(str, enum.Enum):
    VANILLA = "vanilla"
    DENSE = "dense"
    LINEAR = "linear"
    ITERATIVE = "iterative"
    HIERARCHICAL = "hierarchical"
    MULTI_LAYER_ATTENTION = "multi_layer_attention"


class AggFn(str, enum.Enum):
    SIGMOID_FFN = "sigmoid_ffn"
    RELU_FFN = "relu_ffn"
    SELF_ATTENTION = "self_attention"


class ResidualMode(str, enum.Enum):
    NONE = "none"
    TOP = "top"
    ALL = "all"


@dataclass(frozen=True)
class FusionStrategy:
    tag: Strategy = Strategy.VANILLA
    k: int = 2
    agg_fn: AggFn = AggFn.SIGMOID_FFN
    residual_mode: ResidualMode = ResidualMode.ALL

    def __post_init__(self):
        object.__setattr__(self, "tag", Strategy(self.tag))
        object.__setattr__(self, "agg_fn", AggFn(self.agg_fn))
        object.__setattr__(self, "residual_mode", ResidualMode(self.residual_mode))

    @property
    def uses_agg(self) -> bool:
        return self.tag in (Strategy.ITERATIVE, Strategy.HIERARCHICAL, Strategy.MULTI_LAYER_ATTENTION)


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    n_heads: int = 4
    d_ff: int = 64
    d_ff_agg: int | None = None
    L_enc: int = 4
    L_dec: int = 4
    vocab_src: int = 16
    vocab_tgt: int = 16
    max_len: int = 16
    strategy: FusionStrategy = field(default_factory=FusionStrategy)
    lambda_div: float = 0.0
    ln_eps: float = 1e-6
    dropout: float = 0.0
    seed: int = 0
    precision: str = "f32"

    def __post_init__(self):
        if self.d_ff_agg is None:
            object.__setattr__(self, "d_ff_agg", self.d_model)
        self.validate()

    def validate(self) -> None:
        for name in ("d_model", "n_heads", "d_ff", "d_ff_agg", "L_enc", "L_dec",
                     "vocab_src", "vocab_tgt", "max_len"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")
        if self.lambda_div < 0:
            raise ConfigError("lambda_div must be nonnegative")
        if self.ln_eps <= 0:
            raise ConfigError("ln_eps must be positive")
        if self.dropout != 0.0:
            raise ConfigError("dropout is reserved and must stay 0")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")
        if self.precision not in ("f32", "f64"):
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        s = self.strategy
        if s.tag is Strategy.HIERARCHICAL and (self.L_enc % 2 or self.L_dec % 2):
            raise ConfigError(
                f"hierarchical aggregation needs even layer counts, got L_enc={self.L_enc}, L_dec={self.L_dec}")
        if s.tag is Strategy.MULTI_LAYER_ATTENTION:
            if s.k < 1:
                raise ConfigError(f"multi-layer attention needs k >= 1, got {s.k}")
            if s.k > min(self.L_enc, self.L_dec):
                raise ConfigError(f"k={s.k} exceeds the layer count of a stack")
        if self.lambda_div > 0 and min(self.L_enc, self.L_dec) < 2:
            raise ConfigError("diversity regularization needs at least two layers per stack")

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        s = self.strategy
        d["strategy"] = {"tag": s.tag.value, "k": s.k, "agg_fn": s.agg_fn.value,
                         "residual_mode": s.residual_mode.value}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["strategy"] = FusionStrategy(**d.get("strategy", {}))
        return cls(**d)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    peak_lr: float = 3e-3
    warmup: int = 400
    beta1: float = 0.9
    beta2: float = 0.98
    adam_eps: float = 1e-9
    eval_every: int = 250
    clip_norm: float = 0.0


# keys of the strategy block are written flat in config files
_STRATEGY_KEYS = {"strategy": "tag", "k": "k", "agg_fn": "agg_fn", "residual_mode": "residual_mode"}


def _coerce(raw: str, default):
    if isinstance(default, bool):
        return raw.lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    return raw


def parse_config_text(text: str) -> tuple[ModelConfig, TrainConfig, dict]:
    """Parse ``key = value`` lines into model, training, and task settings.

    Strategy fields appear flat (``strategy``, ``k``, ``agg_fn``,
    ``residual_mode``). Task keys (``len_min`` and friends) are returned
    untouched for :class:`deeprep.tasks.TaskSpec`. Unknown keys raise.
    """
    from .tasks import TaskSpec

    model_defaults = {f.name: f.default for f in fields(ModelConfig)
                      if f.default is not dataclasses.MISSING}
    model_defaults["d_ff_agg"] = 0
    train_defaults = {f.name: f.default for f in fields(TrainConfig)}
    task_defaults = {f.name: f.default for f in fields(TaskSpec)
                     if f.default is not dataclasses.MISSING and f.name not in ("kind", "vocab_size")}

    model_kw: dict = {}
    strat_kw: dict = {}
    train_kw: dict = {}
    task_kw: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        try:
            if key in _STRATEGY_KEYS:
                strat_kw[_STRATEGY_KEYS[key]] = int(raw) if key == "k" else raw
            elif key in model_defaults:
                model_kw[key] = _coerce(raw, model_defaults[key])
            elif key in train_defaults:
                train_kw[key] = _coerce(raw, train_defaults[key])
            elif key in task_defaults:
                task_kw[key] = _coerce(raw, task_defaults[key])
            else:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"line {lineno}: bad value for {key!r}: {raw!r}") from None
    try:
        model_kw["strategy"] = FusionStrategy(**strat_kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if model_kw.get("d_ff_agg") == 0:
        model_kw["d_ff_agg"] = None
    return ModelConfig(**model_kw), TrainConfig(**train_kw), task_kw


def load_config(path: str | Path) -> tuple[ModelConfig, TrainConfig, dict]:
    return parse_config_text(Path(path).read_text(encoding="utf-8"))


def format_config(model: ModelConfig, train: TrainConfig | None = None) -> str:
    lines = []
    for f in fields(ModelConfig):
        if f.name == "strategy":
            s = model.strategy
            lines += [f"strategy = {s.tag.value}", f"k = {s.k}",
                      f"agg_fn = {s.agg_fn.value}", f"residual_mode = {s.residual_mode.value}"]
        else:
            lines.append(f"{f.name} = {getattr(model, f.name)}")
    if train is not None:
        lines += [f"{f.name} = {getattr(train, f.name)}" for f in fields(TrainConfig)]
    return "\n".join(lines) + "\n"
