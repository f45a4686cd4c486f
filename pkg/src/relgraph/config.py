"""Run configuration: every tunable key with its default, ``key = value`` files.

Keys are grouped by a prefix (``gen.``, ``retrieval.``, ``pretrain.``,
``model.``, ``train.``); ``seed``, ``threads`` and ``ablation_seeds`` are
top-level.  The single ``seed`` drives generation, pretraining and training.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .kg import DataError
from .model import ModelConfig
from .pipeline import PretrainConfig, RetrievalConfig
from .synth import SynthConfig
from .train import TrainConfig

GROUPS = {
    "gen": SynthConfig,
    "retrieval": RetrievalConfig,
    "pretrain": PretrainConfig,
    "model": ModelConfig,
    "train": TrainConfig,
}
# keys owned by the top level rather than by a group
SHADOWED = {("gen", "seed"), ("train", "seed"), ("pretrain", "word_dim")}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    gen: SynthConfig = field(default_factory=SynthConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    threads: int = 1
    ablation_seeds: int = 5

    def synth_config(self) -> SynthConfig:
        return replace(self.gen, seed=self.seed)

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed)

    def pretrain_config(self) -> PretrainConfig:
        return replace(self.pretrain, word_dim=self.model.d_w)

    def items(self) -> list[tuple[str, object]]:
        out: list[tuple[str, object]] = [("seed", self.seed), ("threads", self.threads),
                                         ("ablation_seeds", self.ablation_seeds)]
        for group in GROUPS:
            for key, value in asdict(getattr(self, group)).items():
                if (group, key) not in SHADOWED:
                    out.append((f"{group}.{key}", value))
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {format_value(v)}\n" for k, v in self.items())


TOP_LEVEL = {"seed": int, "threads": int, "ablation_seeds": int}


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _parse_value(key: str, text: str, kind: type):
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return lowered in ("true", "1", "yes")
        return kind(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {kind.__name__}") from None


def known_keys() -> dict[str, type]:
    keys = dict(TOP_LEVEL)
    for group, cls in GROUPS.items():
        defaults = cls()
        for f in fields(cls):
            if (group, f.name) not in SHADOWED:
                keys[f"{group}.{f.name}"] = type(getattr(defaults, f.name))
    return keys


def apply(config: RunConfig, overrides: dict[str, str]) -> RunConfig:
    """New RunConfig with string ``overrides`` parsed and applied; unknown keys raise."""
    keys = known_keys()
    unknown = sorted(set(overrides) - set(keys))
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    top = {k: _parse_value(k, v, keys[k]) for k, v in overrides.items() if "." not in k}
    grouped: dict[str, dict] = {}
    for k, v in overrides.items():
        if "." in k:
            group, name = k.split(".", 1)
            grouped.setdefault(group, {})[name] = _parse_value(k, v, keys[k])
    try:
        parts = {g: replace(getattr(config, g), **vals) for g, vals in grouped.items()}
        result = replace(config, **parts, **top)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    if result.threads < 1 or result.ablation_seeds < 1:
        raise ConfigError("threads and ablation_seeds must be at least 1")
    return result


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source} line {n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"{source} line {n}: empty key or value")
        values[key] = value
    return values


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    return apply(RunConfig(), parse_text(path.read_text(encoding="utf-8"), str(path)))


def write_config(config: RunConfig, path) -> None:
    Path(path).write_text(config.to_text(), encoding="utf-8")
