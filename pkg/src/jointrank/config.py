"""Layered experiment configuration: defaults, then a ``key = value`` file, then overrides.

All knobs share one flat namespace. ``n_neg`` and ``seed`` live on the train
config and are reused by augmentation and data generation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Mapping

from .augmentation import AugmentConfig
from .corpus import GeneratorConfig
from .errors import UsageError, ValidationError
from .trainer import TrainConfig

DEFAULT_SWEEP = (2, 4, 8)


@dataclass(frozen=True)
class ExperimentConfig:
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    sweep_n_neg: tuple[int, ...] = DEFAULT_SWEEP

    def validate(self) -> None:
        self.train.validate()
        self.augment.validate()
        try:
            self.generator.validate()
        except ValidationError as exc:
            raise UsageError(str(exc)) from None
        if not self.sweep_n_neg or any(m < 1 for m in self.sweep_n_neg):
            raise UsageError("sweep_n_neg must list positive integers")

    @property
    def seed(self) -> int:
        return self.train.seed

    def flat(self) -> dict[str, Any]:
        """Every key with its resolved value, in a stable order."""
        out: dict[str, Any] = {}
        for section, _ in _SECTIONS:
            obj = getattr(self, section)
            for f in fields(obj):
                if (section, f.name) not in _SHADOWED:
                    out[f.name] = getattr(obj, f.name)
        out["sweep_n_neg"] = list(self.sweep_n_neg)
        return out


_SECTIONS = (("generator", GeneratorConfig), ("train", TrainConfig), ("augment", AugmentConfig))
# keys owned by the train section; the augmentation copy is always overwritten from it
_SHADOWED = {("augment", "n_neg")}


def _key_table() -> dict[str, tuple[str, type]]:
    table: dict[str, tuple[str, type]] = {}
    for section, cls in _SECTIONS:
        hints = {f.name: f.type for f in fields(cls)}
        for name, tp in hints.items():
            if (section, name) in _SHADOWED:
                continue
            table[name] = (section, _resolve_type(tp))
    table["sweep_n_neg"] = ("", tuple)
    return table


def _resolve_type(tp: Any) -> type:
    # dataclass annotations are strings under postponed evaluation
    names = {"int": int, "float": float, "bool": bool, "str": str}
    if isinstance(tp, str):
        if tp not in names:
            raise TypeError(f"unsupported config field type {tp!r}")
        return names[tp]
    return tp


KEYS = _key_table()


def known_keys() -> list[str]:
    return sorted(KEYS)


def coerce(key: str, raw: str) -> Any:
    """Parse a string value for ``key``; usage error naming the key on mismatch."""
    if key not in KEYS:
        raise UsageError(f"unknown config key {key!r}")
    _, tp = KEYS[key]
    text = raw.strip()
    try:
        if tp is bool:
            low = text.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if tp is int:
            return int(text)
        if tp is float:
            return float(text)
        if tp is tuple:
            return tuple(int(v) for v in text.replace(",", " ").split())
        return text
    except ValueError:
        raise UsageError(f"config key {key!r} expects {_type_name(tp)}, got {raw!r}") from None


def _type_name(tp: type) -> str:
    return "a comma-separated list of integers" if tp is tuple else f"a value of type {tp.__name__}"


def read_config_file(path: Path) -> dict[str, str]:
    """``key = value`` lines; blank lines and ``#`` comments are ignored."""
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    raw: dict[str, str] = {}
    for line_no, line in enumerate(p.read_text(encoding="utf-8").splitlines(), 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise UsageError(f"{p}:{line_no}: expected 'key = value'")
        key, value = (s.strip() for s in text.split("=", 1))
        if key not in KEYS:
            raise UsageError(f"unknown config key {key!r} ({p}:{line_no})")
        raw[key] = value
    return raw


def build_config(values: Mapping[str, Any], base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Apply already-typed values on top of ``base``."""
    cfg = base or ExperimentConfig()
    updates: dict[str, dict[str, Any]] = {"generator": {}, "train": {}, "augment": {}}
    sweep = cfg.sweep_n_neg
    for key, value in values.items():
        if key not in KEYS:
            raise UsageError(f"unknown config key {key!r}")
        section, _ = KEYS[key]
        if key == "sweep_n_neg":
            sweep = tuple(value)
        else:
            updates[section][key] = value
    train = replace(cfg.train, **updates["train"])
    augment = replace(cfg.augment, **updates["augment"], n_neg=train.n_neg)
    out = ExperimentConfig(replace(cfg.generator, **updates["generator"]), train, augment, sweep)
    out.validate()
    return out


def parse_config(path: Path | None = None, overrides: Mapping[str, str] | None = None) -> ExperimentConfig:
    """Resolve defaults < file < overrides; all values given as strings."""
    raw: dict[str, str] = {}
    if path is not None:
        raw.update(read_config_file(path))
    for key, value in (overrides or {}).items():
        if key not in KEYS:
            raise UsageError(f"unknown config key {key!r}")
        raw[key] = value
    return build_config({k: coerce(k, v) for k, v in raw.items()})


def config_from_flat(values: Mapping[str, Any]) -> ExperimentConfig:
    """Inverse of ``ExperimentConfig.flat`` (used to replay a manifest)."""
    typed = {}
    for k, v in values.items():
        typed[k] = tuple(v) if k == "sweep_n_neg" else v
    return build_config(typed)

