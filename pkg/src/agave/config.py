"""Run configuration: a flat set of typed fields read from ``key=value`` files
and command-line overrides."""
import typing
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Optional, Tuple, Union

from .errors import ConfigError
from .model import ModelConfig

COMMANDS = ("train", "eval", "sample", "interpolate", "sweep-lambda", "ablate-aux")
_MODEL_FIELDS = tuple(f.name for f in fields(ModelConfig))
_TRUE = ("1", "true", "yes", "on")
_FALSE = ("0", "false", "no", "off")


@dataclass
class RunConfig:
    command: str = "train"
    # model
    height: int = 8
    width: int = 8
    latent_dim: int = 32
    encoder_width: int = 32
    decoder_width: int = 32
    ar_layers: int = 4
    ar_width: int = 32
    ar_first_kernel: int = 5
    ar_kernel: int = 3
    cond_layers: Optional[int] = None
    cond_width: int = 16
    aux_levels: int = 256
    aux_height: Optional[int] = None
    aux_width: Optional[int] = None
    aux_grayscale: bool = False
    lam: float = 2.0
    # data
    cifar10: Optional[str] = None
    sprites_seed: Optional[int] = None
    train_count: int = 2000
    held_out_count: int = 200
    # optimiser
    lr: float = 0.002
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # schedule
    vae_steps: int = 1000
    ar_steps: int = 1000
    joint_steps: int = 5000
    batch_size: int = 32
    log_every: int = 100
    checkpoint_every: int = 1000
    resume: bool = False
    # evaluation and generation
    eval_k: int = 150
    eval_batch: int = 50
    checkpoint: Optional[str] = None
    samples: int = 4
    per_latent: int = 4
    temperature: float = 1.0
    interp_steps: int = 8
    # experiments
    lambdas: Tuple[float, ...] = (1.0, 2.0, 8.0)
    seeds: Tuple[int, ...] = (0, 1, 2)
    ablate_steps: int = 10000
    ablate_lam: Optional[float] = None
    ablate_log_every: int = 250
    stop_fraction: float = 0.0
    control: bool = True
    # output
    out_dir: str = "runs"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}; choose from {', '.join(COMMANDS)}")
        if (self.cifar10 is None) == (self.sprites_seed is None):
            raise ConfigError("exactly one dataset source (cifar10 or sprites_seed) must be set")
        for name in ("vae_steps", "ar_steps", "joint_steps", "ablate_steps", "log_every", "checkpoint_every",
                     "ablate_log_every"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        for name in ("batch_size", "train_count", "held_out_count", "eval_k", "eval_batch", "samples",
                     "per_latent"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.interp_steps < 2:
            raise ConfigError("interp_steps must be >= 2")
        if self.lr <= 0 or not (0 <= self.beta1 < 1) or not (0 <= self.beta2 < 1) or self.eps < 0:
            raise ConfigError("optimiser settings out of range")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if not self.lambdas or any(v < 0 for v in self.lambdas) or not self.seeds:
            raise ConfigError("lambdas must be non-negative and seeds non-empty")
        if not 0 <= self.stop_fraction < 1:
            raise ConfigError("stop_fraction must lie in [0, 1)")
        self.model_config()

    def model_config(self, **overrides) -> ModelConfig:
        values = {name: getattr(self, name) for name in _MODEL_FIELDS if hasattr(self, name)}
        values["seed"] = self.seed
        values.update(overrides)
        try:
            return ModelConfig(**values)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> Dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}


def _base_type(tp):
    """Strip Optional[...] and report whether None is allowed."""
    if typing.get_origin(tp) is Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return args[0], True
    return tp, False


def field_types() -> Dict[str, object]:
    hints = typing.get_type_hints(RunConfig)
    return {f.name: hints[f.name] for f in fields(RunConfig)}


def parse_value(key: str, text: str, tp=None):
    """Convert the text of one setting to the field's declared type."""
    tp = tp if tp is not None else field_types().get(key)
    if tp is None:
        raise ConfigError(f"unknown setting {key!r}")
    base, optional = _base_type(tp)
    text = text.strip()
    if optional and text.lower() in ("none", ""):
        return None
    try:
        if typing.get_origin(base) is tuple:
            item = typing.get_args(base)[0]
            return tuple(item(part) for part in text.split(",") if part.strip())
        if base is bool:
            if text.lower() in _TRUE:
                return True
            if text.lower() in _FALSE:
                return False
            raise ValueError(text)
        if base is int:
            return int(text)
        if base is float:
            return float(text)
        return base(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {text!r} as {getattr(base, '__name__', base)}") from None


def parse_config_text(text: str) -> Dict[str, object]:
    """Read ``key=value`` lines; blank lines and ``#`` comments are ignored."""
    values = {}
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {number}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key in values:
            raise ConfigError(f"line {number}: {key} set twice")
        values[key] = parse_value(key, value)
    return values


def build_config(file_values: Optional[Dict] = None, overrides: Optional[Dict] = None) -> RunConfig:
    """Defaults, then file values, then overrides. Sprites seed 0 is the
    dataset when neither source is named anywhere."""
    merged = dict(file_values or {})
    merged.update(overrides or {})
    unknown = set(merged) - {f.name for f in fields(RunConfig)}
    if unknown:
        raise ConfigError(f"unknown setting(s): {', '.join(sorted(unknown))}")
    if merged.get("cifar10") is None and merged.get("sprites_seed") is None:
        merged["sprites_seed"] = 0
    return RunConfig(**merged)


def load_config(path: Union[str, Path], overrides: Optional[Dict] = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return build_config(parse_config_text(text), overrides)


def format_config(config: RunConfig) -> str:
    lines = []
    for key, value in config.to_dict().items():
        if isinstance(value, tuple):
            value = ",".join(f"{v:g}" if isinstance(v, float) else str(v) for v in value)
        elif value is None:
            value = "none"
        elif isinstance(value, bool):
            value = str(value).lower()
        lines.append(f"{key}={value}")
    return "\n".join(lines) + "\n"
