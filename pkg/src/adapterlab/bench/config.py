"""Flat ``section.key=value`` configuration files.

Blank lines and ``#`` comments are ignored. Every field of every section is
addressable, unknown keys are rejected, and command-line overrides use the
same dotted keys.

Example::

    model.d = 64
    model.rank = 16
    train.epochs = 20
    sweep.rank = 8,16,32,64
"""

from __future__ import annotations

import typing
from dataclasses import dataclass, field, fields, replace

from ..adapter import InitScheme
from ..backbone import ModelConfig
from ..exceptions import ConfigError
from ..training import TrainConfig

__all__ = [
    "TaskConfig",
    "TheoryConfig",
    "SweepSpec",
    "ExperimentConfig",
    "SWEEP_AXES",
    "parse_config",
    "load_config",
    "apply_overrides",
    "resolve_key",
    "format_config",
    "format_value",
    "parse_model_config",
]


@dataclass(frozen=True)
class TaskConfig:
    kind: str = "planted"
    name: str = "planted"
    n_per_class: int = 250
    source_per_class: int = 500
    shift_dim: int = 64
    c_decay: float = 4.5
    p_decay: float = 1.0
    noise: float = 0.05
    seed: int = 100
    fractions: tuple = (0.8, 0.2, 0.0)
    split_seed: int = 7
    images: str = ""
    labels: str = ""
    source_images: str = ""
    source_labels: str = ""
    source_classes: int = 10

    def __post_init__(self):
        if self.kind not in ("planted", "idx"):
            raise ConfigError(f"task.kind must be 'planted' or 'idx', got {self.kind!r}")
        if self.kind == "idx" and not (self.images and self.labels):
            raise ConfigError("task.kind=idx needs task.images and task.labels")


@dataclass(frozen=True)
class TheoryConfig:
    d: int = 64
    c_decay: float = 1.0
    p_decay: float = 1.0
    ranks: tuple = (1, 2, 4, 8, 16, 32, 64)
    draws: int = 100_000
    b_norm: float = 1.0
    seed: int = 0


SWEEP_AXES = {
    "regime": str,
    "rank": int,
    "every_k": int,
    "init": InitScheme.parse,
    "lr": float,
    "wd": float,
    "alpha": float,
}


@dataclass(frozen=True)
class SweepSpec:
    """Cartesian grid over named axes, repeated for every seed.

    Axes left out keep the base configuration's value.
    """

    axes: dict = field(default_factory=dict)
    seeds: tuple = (0, 1, 2)

    def __post_init__(self):
        for name, values in self.axes.items():
            if name not in SWEEP_AXES:
                raise ConfigError(f"unknown sweep axis {name!r}")
            if len(values) == 0:
                raise ConfigError(f"sweep axis {name!r} is empty")
        if len(self.seeds) == 0:
            raise ConfigError("sweep needs at least one seed")

    @property
    def n_runs(self) -> int:
        """Grid size times seeds, before baseline regimes are deduplicated."""
        n = len(self.seeds)
        for values in self.axes.values():
            n *= len(values)
        return n


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelConfig = field(
        default_factory=lambda: ModelConfig(d=64, L=2, heads=4, n_tokens=3, input_dim=16, C=4)
    )
    train: TrainConfig = field(default_factory=TrainConfig)
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=20, warmup_epochs=2))
    task: TaskConfig = field(default_factory=TaskConfig)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    theory: TheoryConfig = field(default_factory=TheoryConfig)


_SECTIONS = ("model", "train", "pretrain", "task", "sweep", "theory")


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    return str(v)


def _split_list(text):
    return [t.strip() for t in text.split(",") if t.strip()]


def _convert(cls, name, text):
    hints = typing.get_type_hints(cls, localns={"InitScheme": InitScheme})
    hint = hints[name]
    if hint is bool:
        if text.lower() in ("1", "true", "yes"):
            return True
        if text.lower() in ("0", "false", "no"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    if hint is InitScheme:
        return InitScheme.parse(text)
    if hint is tuple:
        default = getattr(cls(), name) if cls is not ModelConfig else ()
        elem = type(default[0]) if default else float
        return tuple(elem(t) for t in _split_list(text))
    return text


def _build(cls, values):
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _assign(acc, key, text, line=None):
    section, _, name = key.partition(".")
    if section not in _SECTIONS or not name:
        raise ConfigError(f"unknown key {key!r}", line)
    if section == "sweep":
        if name == "seeds":
            try:
                acc["sweep"]["seeds"] = tuple(int(t) for t in _split_list(text))
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}", line) from None
            return
        if name not in SWEEP_AXES:
            raise ConfigError(f"unknown key {key!r}", line)
        try:
            acc["sweep"]["axes"][name] = tuple(SWEEP_AXES[name](t) for t in _split_list(text))
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}", line) from None
        return
    cls = {
        "model": ModelConfig,
        "train": TrainConfig,
        "pretrain": TrainConfig,
        "task": TaskConfig,
        "theory": TheoryConfig,
    }[section]
    if name not in {f.name for f in fields(cls)}:
        raise ConfigError(f"unknown key {key!r}", line)
    try:
        acc[section][name] = _convert(cls, name, text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} ({exc})", line) from None


def _empty_acc():
    return {s: {} for s in _SECTIONS if s != "sweep"} | {"sweep": {"axes": {}}}


def _finish(acc, base: ExperimentConfig) -> ExperimentConfig:
    out = {}
    for section in _SECTIONS:
        current = getattr(base, section)
        vals = dict(acc[section])
        if section == "sweep":
            axes = dict(current.axes)
            axes.update(vals.pop("axes"))
            vals["axes"] = axes
        if section in ("train", "pretrain") and "epochs" in vals and "warmup_epochs" not in vals:
            # shortening a run without touching warmup keeps warmup inside it
            vals["warmup_epochs"] = max(0, min(current.warmup_epochs, vals["epochs"] - 1))
        out[section] = _build(type(current), {**_as_kwargs(current), **vals})
    return ExperimentConfig(**out)


def _as_kwargs(obj):
    return {f.name: getattr(obj, f.name) for f in fields(obj)}


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse config text on top of ``base`` (defaults when omitted)."""
    acc = _empty_acc()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"expected key=value, got {raw.strip()!r}", lineno)
        _assign(acc, key.strip(), value.strip(), lineno)
    return _finish(acc, base or ExperimentConfig())


def load_config(path) -> ExperimentConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


_BARE_ORDER = ("train", "model", "task", "theory")


def resolve_key(key: str) -> str:
    """Qualify a bare key (``epochs``) with the first section that defines it.

    Search order is train, model, task, theory; dotted keys pass through.
    """
    if "." in key:
        return key
    classes = {"train": TrainConfig, "model": ModelConfig, "task": TaskConfig, "theory": TheoryConfig}
    for section in _BARE_ORDER:
        if key in {f.name for f in fields(classes[section])}:
            return f"{section}.{key}"
    raise ConfigError(f"unknown key {key!r}")


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``key=value`` strings using the config-file vocabulary.

    Bare keys are accepted when unambiguous after :func:`resolve_key`.
    """
    acc = _empty_acc()
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override must be KEY=VALUE, got {item!r}")
        _assign(acc, resolve_key(key.strip()), value.strip())
    return _finish(acc, cfg)


def format_config(cfg: ExperimentConfig) -> str:
    lines = []
    for section in _SECTIONS:
        obj = getattr(cfg, section)
        if section == "sweep":
            for name, values in obj.axes.items():
                lines.append(f"sweep.{name}={format_value(values)}")
            lines.append(f"sweep.seeds={format_value(obj.seeds)}")
            continue
        for f in fields(obj):
            lines.append(f"{section}.{f.name}={format_value(getattr(obj, f.name))}")
    return "\n".join(lines) + "\n"


def parse_model_config(text: str) -> ModelConfig:
    """Parse un-prefixed ``key=value`` lines into a :class:`ModelConfig`."""
    acc = _empty_acc()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"expected key=value, got {raw!r}", lineno)
        _assign(acc, "model." + key.strip(), value.strip(), lineno)
    return _build(ModelConfig, acc["model"])
