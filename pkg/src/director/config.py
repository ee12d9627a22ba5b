"""Experiment configuration: one INI file with dotted-key overrides."""
from __future__ import annotations

import configparser
import dataclasses
import os
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .data import RepetitionSizes, SafetySizes
from .decoding import DecodeConfig, STRATEGIES
from .model import ModelConfig
from .training import TrainConfig

TASKS = ("safety_synthetic", "repetition", "custom_corpus")
OUTPUT_ENV = "DIRECTOR_OUTPUT_DIR"
MODEL_KEYS = ("embed_dim", "n_layers", "n_heads", "max_seq_len", "ff_mult")


class ConfigError(ValueError):
    pass


def _parse_scalar(text: str, typ):
    text = text.strip()
    if typ is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if typ is int:
        return int(text)
    if typ is float:
        return float(text)
    return text


def _coerce(text: str, hint):
    """Parse ``text`` according to a dataclass type hint (scalars, optionals, tuples)."""
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or (origin is not None and type(None) in args and origin is not tuple):
        inner = [a for a in args if a is not type(None)]
        if text.strip().lower() in ("", "none"):
            return None
        return _coerce(text, inner[0])
    if origin is tuple:
        items = [t for t in text.replace(",", " ").split() if t]
        return tuple(_parse_scalar(t, args[0]) for t in items)
    return _parse_scalar(text, hint)


def _hints(cls) -> dict:
    return typing.get_type_hints(cls)


@dataclass
class ExperimentConfig:
    task: str = "safety_synthetic"
    seed: int = 0
    output_dir: str = "runs/default"
    data_dir: str = ""
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    sizes: SafetySizes | RepetitionSizes = field(default_factory=SafetySizes)
    frozen_lm: bool = False
    init_checkpoint: str = ""
    label_repeats: int = 0
    checkpoint_every: int = 0
    guide_checkpoint: str = ""
    eval_checkpoint: str = ""
    calibration: str = ""
    bench_strategies: tuple[str, ...] = ("baseline", "director", "fudge")
    bench_prompts: int = 20
    bench_repetitions: int = 3
    sweep_gamma_train: tuple[float, ...] = (0.2,)
    sweep_gamma_infer: tuple[float, ...] = (0.0, 1.0, 5.0)
    sweep_delta: tuple[float, ...] = (0.0,)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    @property
    def data(self) -> Path:
        return Path(self.data_dir) if self.data_dir else self.out / "data"

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size=vocab_size, seed=self.seed, **self.model)


# keys stored on ExperimentConfig itself rather than on a section dataclass
_EXTRA = {
    "experiment": {"task", "seed", "output_dir", "data_dir"},
    "train": {"frozen_lm", "init_checkpoint", "label_repeats", "checkpoint_every"},
    "decode": {"guide_checkpoint"},
    "eval": {"checkpoint", "calibration"},
    "bench": {"strategies", "prompts", "repetitions"},
    "sweep": {"gamma_train", "gamma_infer", "delta"},
}


def parse_overrides(items) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        out.setdefault(section, {})[name] = value
    return out


def load_config(path=None, overrides=None) -> ExperimentConfig:
    """Read an INI file (optional) and apply ``section.key=value`` overrides."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        try:
            cp.read(p, encoding="utf-8")
        except configparser.Error as e:
            raise ConfigError(f"{p}: {e}") from None
    raw: dict[str, dict[str, str]] = {s: dict(cp[s]) for s in cp.sections()}
    for section, kv in parse_overrides(overrides).items():
        raw.setdefault(section, {}).update(kv)
    return build_config(raw)


def build_config(raw: dict[str, dict[str, str]]) -> ExperimentConfig:
    known = set(_EXTRA) | {"model", "data"}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    try:
        return _build(raw)
    except ConfigError:
        raise
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None


def _take(section: dict, key: str, hint, default):
    return _coerce(section[key], hint) if key in section else default


def _build(raw) -> ExperimentConfig:
    hints = _hints(ExperimentConfig)
    exp = raw.get("experiment", {})
    _check_keys("experiment", exp, _EXTRA["experiment"])
    task = exp.get("task", "safety_synthetic").strip()
    if task not in TASKS:
        raise ConfigError(f"experiment.task must be one of {TASKS}, got {task!r}")
    seed = _take(exp, "seed", int, 0)
    output_dir = os.environ.get(OUTPUT_ENV) or exp.get("output_dir", "runs/default").strip()
    cfg = ExperimentConfig(task=task, seed=seed, output_dir=output_dir,
                           data_dir=exp.get("data_dir", "").strip())

    model = raw.get("model", {})
    _check_keys("model", model, set(MODEL_KEYS))
    cfg.model = {k: int(v) for k, v in model.items()}
    cfg.model_config(vocab_size=8)  # validates shapes early

    cfg.train = _section_dataclass(TrainConfig, "train", raw.get("train", {}), _EXTRA["train"], {"seed": seed})
    cfg.decode = _section_dataclass(DecodeConfig, "decode", raw.get("decode", {}), _EXTRA["decode"], {"seed": seed})
    sizes_cls = RepetitionSizes if task == "repetition" else SafetySizes
    cfg.sizes = _section_dataclass(sizes_cls, "data", raw.get("data", {}), set(), {})

    tr = raw.get("train", {})
    for key in ("frozen_lm", "init_checkpoint", "label_repeats", "checkpoint_every"):
        setattr(cfg, key, _take(tr, key, hints[key], getattr(cfg, key)))
    cfg.guide_checkpoint = raw.get("decode", {}).get("guide_checkpoint", "").strip()
    ev = raw.get("eval", {})
    _check_keys("eval", ev, _EXTRA["eval"])
    cfg.eval_checkpoint = ev.get("checkpoint", "").strip()
    cfg.calibration = ev.get("calibration", "").strip()
    b = raw.get("bench", {})
    _check_keys("bench", b, _EXTRA["bench"])
    cfg.bench_strategies = _take(b, "strategies", tuple[str, ...], cfg.bench_strategies)
    cfg.bench_prompts = _take(b, "prompts", int, cfg.bench_prompts)
    cfg.bench_repetitions = _take(b, "repetitions", int, cfg.bench_repetitions)
    sw = raw.get("sweep", {})
    _check_keys("sweep", sw, _EXTRA["sweep"])
    for key in ("gamma_train", "gamma_infer", "delta"):
        setattr(cfg, "sweep_" + key, _take(sw, key, tuple[float, ...], getattr(cfg, "sweep_" + key)))
    _validate(cfg)
    return cfg


def _check_keys(section: str, kv: dict, allowed: set) -> None:
    bad = set(kv) - allowed
    if bad:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(bad)}")


def _section_dataclass(cls, section: str, kv: dict, extra: set, defaults: dict):
    hints = _hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    _check_keys(section, kv, names | extra)
    values = dict(defaults)
    for k, v in kv.items():
        if k in names:
            values[k] = _coerce(v, hints[k])
    return cls(**values)


def _validate(cfg: ExperimentConfig) -> None:
    for s in cfg.bench_strategies:
        if s not in STRATEGIES:
            raise ConfigError(f"bench.strategies: unknown strategy {s!r}")
    if len(set(cfg.bench_strategies)) != len(cfg.bench_strategies):
        raise ConfigError("bench.strategies lists a strategy twice")
    if cfg.bench_prompts < 20 or cfg.bench_repetitions < 3:
        raise ConfigError("bench needs >= 20 prompts and >= 3 repetitions")
    for key in ("sweep_gamma_train", "sweep_gamma_infer", "sweep_delta"):
        vals = getattr(cfg, key)
        if not vals or any(v < 0 for v in vals):
            raise ConfigError(f"{key.replace('_', '.', 1)} needs non-negative values")
    if not 0 <= cfg.label_repeats <= 5:
        raise ConfigError("train.label_repeats must lie in 0..5")
    if cfg.checkpoint_every < 0:
        raise ConfigError("train.checkpoint_every must be >= 0")
