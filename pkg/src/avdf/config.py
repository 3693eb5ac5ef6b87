"""Run configuration: TOML file sections + flag overrides over presets.

Sections [corpus], [model], [train] and [eval] mirror the module configs.
Unknown sections or keys are rejected. AVDF_SEED serves as a global seed
fallback when neither file nor flags pin one.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .corpus import CorpusSpec
from .errors import ConfigError
from .model import ModelConfig
from .train import TrainConfig

SECTIONS = ("corpus", "model", "train", "eval")
EVAL_KEYS = {"threshold", "scenarios"}
REPORT_SCHEMA_VERSION = 1


@dataclass
class EvalConfig:
    threshold: float = 0.5
    scenarios: tuple[str, ...] = ("av", "audio", "video")

    def to_dict(self) -> dict:
        return {"threshold": self.threshold, "scenarios": list(self.scenarios)}


@dataclass
class RunConfig:
    corpus: CorpusSpec
    model: ModelConfig
    train: TrainConfig
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return {
            "corpus": self.corpus.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "eval": self.eval.to_dict(),
        }


def load_config_file(path: Path | str) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no config file at {path}")
    try:
        doc = tomllib.loads(path.read_text("utf-8"))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise ConfigError(f"{path}: unknown config sections {sorted(unknown)}")
    return doc


def resolve_run_config(
    config_path: Path | str | None = None,
    preset: str = "desk",
    overrides: dict | None = None,
) -> RunConfig:
    """Layer defaults <- preset <- file <- flag overrides into a RunConfig."""
    if preset == "desk":
        model_d, train_d = ModelConfig.desk().to_dict(), TrainConfig.desk().to_dict()
    elif preset == "paper":
        model_d, train_d = ModelConfig.paper().to_dict(), TrainConfig.paper().to_dict()
    else:
        raise ConfigError(f"unknown preset {preset!r} (use desk or paper)")
    sections = {
        "corpus": CorpusSpec().to_dict(),
        "model": model_d,
        "train": train_d,
        "eval": {"threshold": 0.5, "scenarios": ["av", "audio", "video"]},
    }

    seed_pinned = False
    for layer in (
        load_config_file(config_path) if config_path else {},
        overrides or {},
    ):
        for name, values in layer.items():
            if name not in SECTIONS:
                raise ConfigError(f"unknown config section {name!r}")
            for key, val in values.items():
                if key not in sections[name]:
                    raise ConfigError(f"unknown key {key!r} in section [{name}]")
                if val is None:
                    continue
                sections[name][key] = val
                if (name, key) in (("corpus", "master_seed"), ("train", "seed")):
                    seed_pinned = True

    if not seed_pinned and "AVDF_SEED" in os.environ:
        try:
            env_seed = int(os.environ["AVDF_SEED"])
        except ValueError as exc:
            raise ConfigError("AVDF_SEED must be an integer") from exc
        sections["corpus"]["master_seed"] = env_seed
        sections["train"]["seed"] = env_seed

    eval_d = sections["eval"]
    unknown = set(eval_d) - EVAL_KEYS
    if unknown:
        raise ConfigError(f"unknown eval keys {sorted(unknown)}")
    return RunConfig(
        corpus=CorpusSpec.from_dict(sections["corpus"]),
        model=ModelConfig.from_dict(sections["model"]),
        train=TrainConfig.from_dict(sections["train"]),
        eval=EvalConfig(
            threshold=float(eval_d["threshold"]),
            scenarios=tuple(eval_d["scenarios"]),
        ),
    )
