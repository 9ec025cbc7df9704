"""Pipeline configuration: one INI file with a ``[section]`` per stage.

Values are parsed with the type of the matching dataclass field; unknown keys and
unparsable values raise :class:`ConfigError` naming the section, key and line.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .attention import ConfigurationError
from .healing import HealingConfig
from .model import LoraConfig, ModelConfig
from .pretrain import TeacherConfig
from .sensitivity import SearchConfig
from .tasks import EvalHarness

STAGES = ("train-teacher", "sensitivity", "search", "heal", "eval", "bench")


class ConfigError(ConfigurationError):
    pass


@dataclass(frozen=True)
class BenchConfig:
    """Decode bench settings; without a checkpoint the bench decodes with random weights of these dimensions."""

    lengths: tuple[int, ...] = (256, 512, 1024, 2048, 4096)
    repeats: int = 5
    tokens_per_point: int = 16
    window: int = 64
    parallel: bool = False
    hidden_dim: int = 256
    head_count: int = 4
    ffn_dim: int = 1024

    def __post_init__(self):
        object.__setattr__(self, "lengths", tuple(int(n) for n in self.lengths))
        if self.repeats < 5:
            raise ConfigurationError("bench repeats must be >= 5")
        if list(self.lengths) != sorted(set(self.lengths)) or not self.lengths:
            raise ConfigurationError("bench lengths must be a strictly ascending non-empty list")


@dataclass(frozen=True)
class PipelineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    harness: EvalHarness = field(default_factory=EvalHarness)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    healing: HealingConfig = field(default_factory=HealingConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    seed: int = 0
    out_dir: str = "runs/default"
    precision: str = "f32"

    def __post_init__(self):
        if self.precision not in ("f32", "f64"):
            raise ConfigurationError(f"precision must be f32 or f64, got {self.precision!r}")

    def stage_seed(self, stage: str) -> int:
        return stage_seed(self.seed, stage)


def stage_seed(global_seed: int, stage: str) -> int:
    """Deterministic 32-bit sub-seed from the global seed and a stage name."""
    digest = hashlib.sha256(f"{int(global_seed)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


SECTIONS = {
    "model": ModelConfig,
    "harness": EvalHarness,
    "teacher": TeacherConfig,
    "search": SearchConfig,
    "lora": LoraConfig,
    "healing": HealingConfig,
    "bench": BenchConfig,
}
_PIPELINE_KEYS = {"seed": int, "out_dir": str, "precision": str}
# fields filled from other places; a config file may not set them directly
_DERIVED = {("healing", "adamw"), ("healing", "seed"), ("lora", "seed"), ("model", "rng_seed"),
            ("harness", "rng_seed"), ("teacher", "corpus_seed")}


def _parse_value(raw: str, default):
    text = raw.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("true", "yes", "1", "on"):
            return True
        if low in ("false", "no", "0", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text.replace("_", ""))
    if isinstance(default, float):
        return float(text.replace("_", ""))
    if isinstance(default, tuple):
        items = [t.strip() for t in text.replace(",", " ").split()]
        if default and isinstance(default[0], int):
            return tuple(int(t.replace("_", "")) for t in items)
        return tuple(items)
    return text


def _line_of(path: Path, section: str, key: str | None) -> int | None:
    current = None
    for no, line in enumerate(path.read_text().splitlines(), 1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            current = s[1:-1].strip()
            if key is None and current == section:
                return no
        elif current == section and key is not None and s.split("=", 1)[0].strip() == key:
            return no
    return None


def _where(path: Path, section: str, key: str | None = None) -> str:
    line = _line_of(path, section, key)
    spot = f"[{section}]" + (f" {key}" if key else "")
    return f"{path}:{line}: {spot}" if line else f"{path}: {spot}"


def load_config(path, seed: int | None = None) -> PipelineConfig:
    """Read an INI pipeline config; ``seed`` overrides ``[pipeline] seed``."""
    path = Path(path)
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc

    pipeline = {}
    if parser.has_section("pipeline"):
        for key, raw in parser.items("pipeline"):
            if key not in _PIPELINE_KEYS:
                raise ConfigError(f"{_where(path, 'pipeline', key)}: unknown key")
            try:
                pipeline[key] = _PIPELINE_KEYS[key](raw.strip())
            except ValueError as exc:
                raise ConfigError(f"{_where(path, 'pipeline', key)}: {exc}") from exc
    for section in parser.sections():
        if section != "pipeline" and section not in SECTIONS:
            raise ConfigError(f"{_where(path, section)}: unknown section")
    if seed is not None:
        pipeline["seed"] = int(seed)
    global_seed = pipeline.get("seed", 0)

    built = {}
    for section, cls in SECTIONS.items():
        defaults = cls()
        names = {f.name for f in dataclasses.fields(cls)}
        kwargs = {}
        if parser.has_section(section):
            for key, raw in parser.items(section):
                if key not in names or (section, key) in _DERIVED:
                    raise ConfigError(f"{_where(path, section, key)}: unknown or derived key")
                try:
                    kwargs[key] = _parse_value(raw, getattr(defaults, key))
                except ValueError as exc:
                    raise ConfigError(f"{_where(path, section, key)}: {exc}") from exc
        seeded = {"model": "rng_seed", "harness": "rng_seed", "lora": "seed", "healing": "seed",
                  "teacher": "corpus_seed"}
        if section in seeded:
            kwargs[seeded[section]] = stage_seed(global_seed, section)
        try:
            built[section] = cls(**kwargs)
        except (ConfigurationError, ValueError, TypeError) as exc:
            raise ConfigError(f"{_where(path, section)}: {exc}") from exc
    try:
        return PipelineConfig(**built, **pipeline)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: [pipeline]: {exc}") from exc
