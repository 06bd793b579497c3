"""Flat ``section.key = value`` run configuration.

Sections mirror the objects they build::

    corpus.*     CorpusSpec fields
    train.*      TrainConfig scalars and ablation flags
    ddg.*        graph hyperparameters
    eval.*       proposal and metric settings
    gradcheck.*  gradient-check instance
    paths.*      data_dir, run_dir

Every key has a default.  Unknown keys are rejected, and ``DDG_SEED`` in
the environment overrides both ``corpus.seed`` and ``train.seed``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, fields, replace

from .corpus import CorpusSpec
from .evaluator import EvalSettings
from .graph import DdgHyper
from .trainer import TrainConfig

SEED_ENV = "DDG_SEED"


class ConfigError(ValueError):
    """Malformed line, unknown key or unparsable value."""


@dataclass(frozen=True)
class GradCheckSettings:
    snippets: int = 12
    feature_dim: int = 8
    num_categories: int = 3
    seed: int = 0
    eps: float = 3e-4
    tolerance: float = 1e-4


@dataclass(frozen=True)
class Paths:
    data_dir: str = "data"
    run_dir: str = "run"


_TRAIN_KEYS = [f.name for f in fields(TrainConfig) if f.name != "hyper"]


@dataclass(frozen=True)
class RunConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    ddg: DdgHyper = field(default_factory=DdgHyper)
    eval: EvalSettings = field(default_factory=EvalSettings)
    gradcheck: GradCheckSettings = field(default_factory=GradCheckSettings)
    paths: Paths = field(default_factory=Paths)
    eval_every: int = 0

    @property
    def train_config(self) -> TrainConfig:
        """TrainConfig with the ``ddg`` section folded in."""
        return replace(self.train, hyper=self.ddg)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, corpus=replace(self.corpus, seed=seed), train=replace(self.train, seed=seed))

    def items(self):
        """(key, value) pairs for every setting, in a stable order."""
        for section in ("corpus", "train", "ddg", "eval", "gradcheck", "paths"):
            obj = getattr(self, section)
            names = _TRAIN_KEYS if section == "train" else [f.name for f in fields(obj)]
            for name in names:
                yield f"{section}.{name}", getattr(obj, name)
        yield "train.eval_every", self.eval_every


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(key: str, text: str, default):
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(x) for x in text.split(",") if x.strip())
        return text
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from None


def dumps(cfg: RunConfig) -> str:
    return "".join(f"{k} = {_format(v)}\n" for k, v in cfg.items())


def loads(text: str, env: dict | None = None) -> RunConfig:
    cfg = RunConfig()
    defaults = dict(cfg.items())
    updates: dict[str, dict] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        section, name = key.split(".", 1)
        updates.setdefault(section, {})[name] = _parse(key, value, defaults[key])
    for section, kv in updates.items():
        if section == "train" and "eval_every" in kv:
            cfg = replace(cfg, eval_every=kv.pop("eval_every"))
        try:
            cfg = replace(cfg, **{section: replace(getattr(cfg, section), **kv)})
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid {section} settings: {exc}") from exc
    env = os.environ if env is None else env
    if env.get(SEED_ENV, "").strip():
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
        cfg = cfg.with_seed(seed)
    try:
        cfg.corpus.validate()
    except ValueError as exc:
        raise ConfigError(f"invalid corpus settings: {exc}") from exc
    return cfg


def load(path=None, env: dict | None = None) -> RunConfig:
    """Read a config file; ``None`` means all defaults."""
    text = "" if path is None else open(path).read()
    return loads(text, env)
