"""
Run configuration.

Config files are JSON objects. Keys may be nested objects or flat dotted paths
(``"training.dim": 50``); both forms are merged before validation. Relative
paths are resolved against the directory of the config file.
"""

import hashlib
import json
import os
from datetime import date
from pathlib import Path
from typing import Any, Literal

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigError

NVD_API_KEY_ENV = "NVD_API_KEY"

STRATEGY_NAMES = {
    "cwe1003": "Cwe1003",
    "top25": "Top25",
    "descendants": "Descendants",
    "family": "Family",
    "members": "Members",
    "membersfnn": "MembersFnn",
    "percwetailored": "PerCweTailored",
    "tailored": "PerCweTailored",
}


def canonical_strategy(name: str) -> str:
    """Map a user-facing strategy name (``members_fnn``, ``Top25``...) to its canonical form."""
    key = name.replace("_", "").replace("-", "").lower()
    try:
        return STRATEGY_NAMES[key]
    except KeyError:
        raise ConfigError(f"unknown candidate strategy {name!r}", strategy=name) from None


class TrainingConfig(BaseModel):
    """Hyperparameters of the translational embedding."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    dim: int = Field(100, gt=0)
    epochs: int = Field(300, gt=0)
    batch_size: int = Field(512, gt=0)
    learning_rate: float = Field(1e-3, gt=0)
    negatives: int = Field(50, gt=0)
    reg_weight: float = Field(1e-5, ge=0)
    reg_order: int = Field(3, ge=1)
    norm_p: Literal[1, 2] = 2
    seed: int = 0
    normalize_entities: bool = True
    threads: int = Field(1, gt=0)


class DataPaths(BaseModel):
    model_config = ConfigDict(extra="forbid")

    feed: list[Path] = Field(default_factory=list)
    history: list[Path] = Field(default_factory=list)
    catalog: Path | None = None
    view_1003: Path | None = None
    top25: Path | None = None
    kev: Path | None = None
    exploitdb: Path | None = None
    cache_dir: Path = Path(".cache")

    @field_validator("feed", "history", mode="before")
    @classmethod
    def _as_list(cls, value: Any) -> Any:
        if isinstance(value, (str, Path)):
            return [value]
        return value

    def inputs(self) -> list[Path]:
        paths = [*self.feed, *self.history]
        paths += [p for p in (self.catalog, self.view_1003, self.top25, self.kev, self.exploitdb) if p]
        return paths


class SnapshotDates(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    train: date = date(2021, 8, 4)
    validate_: date = Field(date(2024, 12, 17), alias="validate")
    feed_state: Literal["initial", "current"] = "initial"
    history_until: date | None = None

    @model_validator(mode="after")
    def _ordered(self) -> "SnapshotDates":
        if self.train >= self.validate_:
            raise ValueError(f"train date {self.train} must precede validate date {self.validate_}")
        return self


class CandidateConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    threshold: int = Field(10, gt=0)
    discouraged: str = "Family"
    prohibited: str = "Members"
    tailored_cutoff: date | None = None

    @field_validator("discouraged", "prohibited")
    @classmethod
    def _known(cls, value: str) -> str:
        key = value.replace("_", "").replace("-", "").lower()
        if key not in STRATEGY_NAMES:
            raise ValueError(f"unknown candidate strategy {value!r}")
        return STRATEGY_NAMES[key]


class EvaluationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    cutoff: int = Field(10, gt=0)
    hits_at: list[int] = Field(default_factory=lambda: [1, 3, 5, 10, 20])
    unfound: Literal["penalty", "exclude"] = "penalty"
    top_n: Literal[1, 2, 3] = 2
    compare_top_n: list[Literal[1, 2, 3]] = Field(default_factory=lambda: [1, 2, 3])
    closed_world_fraction: float = Field(0.1, gt=0, lt=1)


class RunConfig(BaseModel):
    """Everything a pipeline command needs; ``seed`` and ``threads`` override the training values."""

    model_config = ConfigDict(extra="forbid")

    data: DataPaths = Field(default_factory=DataPaths)
    dates: SnapshotDates = Field(default_factory=SnapshotDates)
    training: TrainingConfig = Field(default_factory=TrainingConfig)
    candidates: CandidateConfig = Field(default_factory=CandidateConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    out: Path = Path("runs")
    seed: int | None = None
    threads: int | None = Field(None, gt=0)

    @model_validator(mode="after")
    def _propagate(self) -> "RunConfig":
        update = {}
        if self.seed is not None:
            update["seed"] = self.seed
        if self.threads is not None:
            update["threads"] = self.threads
        if update:
            self.training = self.training.model_copy(update=update)
        return self

    def check_files(self) -> None:
        """Raise ConfigError naming the first configured input that does not exist."""
        for path in self.data.inputs():
            if not path.exists():
                raise ConfigError(f"input file not found: {path}", path=str(path))

    def digest(self) -> str:
        """SHA-256 of the canonical JSON form of the validated config."""
        payload = json.dumps(self.model_dump(mode="json", by_alias=True), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def unflatten(values: dict[str, Any]) -> dict[str, Any]:
    """Turn ``{"a.b": 1}`` into ``{"a": {"b": 1}}``, merging with nested keys."""
    result: dict[str, Any] = {}
    for key, value in values.items():
        if isinstance(value, dict):
            value = unflatten(value)
        target = result
        *parents, leaf = key.split(".")
        for part in parents:
            target = target.setdefault(part, {})
            if not isinstance(target, dict):
                raise ConfigError(f"config key {key!r} conflicts with a scalar value", key=key)
        if isinstance(value, dict) and isinstance(target.get(leaf), dict):
            target[leaf] = _merge(target[leaf], value)
        else:
            target[leaf] = value
    return result


def _merge(base: dict[str, Any], extra: dict[str, Any]) -> dict[str, Any]:
    merged = dict(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _resolve_paths(raw: dict[str, Any], base: Path) -> None:
    data = raw.get("data", {})
    for key, value in data.items():
        if isinstance(value, list):
            data[key] = [str(base / v) if not Path(v).is_absolute() else v for v in value]
        elif isinstance(value, str) and not Path(value).is_absolute():
            data[key] = str(base / value)


def load_config(path: Path | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Load and validate a run config.

    Args:
        path: JSON config file; defaults are used when None.
        overrides: Flat dotted keys (from CLI flags) applied on top of the file.

    Raises:
        ConfigError: The file is unreadable or the merged values do not validate.
    """
    raw: dict[str, Any] = {}
    if path is not None:
        try:
            document = json.loads(Path(path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}", path=str(path)) from exc
        if not isinstance(document, dict):
            raise ConfigError(f"config {path} must be a JSON object", path=str(path))
        raw = unflatten(document)
        _resolve_paths(raw, Path(path).resolve().parent)
    if overrides:
        raw = _merge(raw, unflatten({k: v for k, v in overrides.items() if v is not None}))
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"invalid config: {exc.errors(include_url=False)}") from exc


def nvd_api_key() -> str | None:
    """NVD API key from the environment or a ``.env`` file."""
    load_dotenv()
    return os.getenv(NVD_API_KEY_ENV) or None
