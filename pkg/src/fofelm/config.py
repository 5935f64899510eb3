"""INI run configuration (``.cfg``) shared by every CLI command.

Sections: [run] seed/output_dir, [generator], [vocab], [model], [train],
[adapt], [eval], [bench]. Relative paths resolve against the output directory.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass
from pathlib import Path

from .data import GeneratorSpec
from .errors import ConfigError, DataError
from .models import ArchitectureConfig
from .training import TrainPlan

OUTPUT_ENV = "FOFELM_OUTPUT_DIR"


def _list(value: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in value.split(",") if v.strip())


def _floats(value: str) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in _list(value))
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated numbers, got {value!r}") from exc


class _Section:
    def __init__(self, parser: configparser.ConfigParser, name: str):
        self.name = name
        self.data = parser[name] if parser.has_section(name) else {}

    def __contains__(self, key: str) -> bool:
        return key in self.data and str(self.data[key]).strip() != ""

    def get(self, key: str, default=None, cast=str):
        if key not in self:
            return default
        raw = str(self.data[key]).strip()
        try:
            return cast(raw)
        except ValueError as exc:
            raise ConfigError(f"[{self.name}] {key}: cannot parse {raw!r}") from exc

    def require(self, key: str, cast=str):
        if key not in self:
            raise ConfigError(f"[{self.name}] {key} is required")
        return self.get(key, cast=cast)


@dataclass
class RunConfig:
    path: Path
    seed: int
    output_dir: Path
    parser: configparser.ConfigParser

    def section(self, name: str) -> _Section:
        return _Section(self.parser, name)

    def resolve(self, value: str | os.PathLike) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.output_dir / p

    def existing(self, value: str | os.PathLike, what: str) -> Path:
        p = self.resolve(value)
        if not p.exists():
            raise DataError(f"{what} not found: {p}")
        return p

    @property
    def dialects(self) -> tuple[str, ...]:
        return self.section("generator").get("dialects", ("en_US", "en_GB", "en_IN"), _list)

    @property
    def applications(self) -> tuple[str, ...]:
        return self.section("generator").get("applications", ("assistant", "stt"), _list)

    def generator_spec(self) -> GeneratorSpec:
        s = self.section("generator")
        return GeneratorSpec(
            dialects=self.dialects,
            applications=self.applications,
            slot_types=s.get("slot_types", 8, int),
            words_per_slot=s.get("words_per_slot", 200, int),
            divergence=s.get("divergence", 0.3, float),
            sentences_per_dialect=s.get("sentences_per_dialect", 1000, int),
            templates_per_application=s.get("templates_per_application", 24, int),
            zipf=s.get("zipf", 1.0, float),
            seed=s.get("seed", self.seed, int),
        ).validate()

    def split_ratios(self) -> tuple[float, ...]:
        return self.section("generator").get("split", (0.8, 0.1, 0.1), _floats)

    def architecture(self, vocab_size: int, section: str = "model") -> ArchitectureConfig:
        s = self.section(section)
        fallback = self.section("model")

        def pick(key, default, cast=str):
            return s.get(key, fallback.get(key, default, cast), cast)

        return ArchitectureConfig(
            variant=pick("variant", "MIXTURE"),
            d=pick("d", 64, int),
            N=pick("N", 3, int),
            L=pick("L", 2, int),
            k=pick("k", 16, int),
            dialects=self.dialects,
            applications=self.applications,
            vocab_size=vocab_size,
            adapter_placement=pick("adapter_placement", None),
            alpha=pick("alpha", 0.7, float),
        ).validate()

    def train_plan(self, section: str = "train") -> TrainPlan:
        s = self.section(section)
        return TrainPlan(
            strategy=s.get("strategy", "BASE" if section == "train" else "RI_A"),
            epochs=s.get("epochs", 2, int),
            batch_size=s.get("batch_size", 256, int),
            optimizer=s.get("optimizer", "adam"),
            lr=s.get("lr", 1e-3, float),
            beta1=s.get("beta1", 0.9, float),
            beta2=s.get("beta2", 0.999, float),
            eps=s.get("eps", 1e-8, float),
            seed=s.get("seed", self.seed, int),
            patience=s.get("patience", 3, int),
            batches_per_epoch=s.get("batches_per_epoch", None, int),
        )


def load_config(path: str | os.PathLike, output_override: str | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep N, L, k case-sensitive
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    run = _Section(parser, "run")
    seed = run.require("seed", int)
    out = output_override or os.environ.get(OUTPUT_ENV) or run.get("output_dir", "out")
    out = Path(out)
    if not out.is_absolute():
        out = path.parent / out
    return RunConfig(path, seed, out, parser)
