"""Declarative pipeline configuration (YAML) with field-path validation errors.

A bare config that only names its input files reproduces the reference
settings end to end: 300-dimensional vectors, window 3, min count 2, 100
epochs, 20 negative samples, the 5-minute session gap, the 60 s training
filter and 30 s metric filter, and the prior-6-months exploration baseline.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import yaml

from .embed import S2VConfig
from .ingest import LogSchema, Origin
from .metrics import EXPLORATION_WINDOWS
from .synth import SynthConfig


class ConfigError(ValueError):
    """Invalid configuration; `field_path` names the offending entry."""

    def __init__(self, field_path: str, message: str):
        super().__init__(f"{field_path}: {message}")
        self.field_path = field_path


@dataclass
class InputPaths:
    stream_log: Path
    gazetteer: Path
    track_metadata: Path | None = None


@dataclass
class IngestParams:
    min_duration_train: int = 60
    min_duration_metrics: int = 30
    session_gap: int = 300


@dataclass
class TasteParams:
    weighting: str = "stream"  # stream | unique
    min_support: int = 1


@dataclass
class MetricParams:
    exploration_window: str = "prior_6_months"
    travel_mode: str = "sum"
    algorithmic_origins: tuple[str, ...] = ("algorithmic",)


@dataclass
class ModelSpec:
    name: str
    panel: str  # user_month | user_city_month
    outcome: str
    regressors: tuple[str, ...]
    standardize: tuple[str, ...] = ()
    log_transform: tuple[str, ...] = ()
    period_dummies: bool = True
    unit_fe: bool = True
    min_baseline_periods: int = 1


@dataclass
class DidParams:
    treated_country: str = ""
    treatment_week: str = ""  # ISO week key, e.g. 2020-W13
    n_leads: int = 3
    exploration_window: str = "prior_6_months"
    outcome: str = "taste_exploration"
    controls: tuple[str, ...] = (
        "algorithmic_guidedness",
        "listening_count",
        "mean_song_recency",
        "distance_from_national_taste",
        "travel_distance_km",
    )
    log_transform: tuple[str, ...] = ("algorithmic_guidedness", "listening_count")
    unit_fe: bool = True
    time_fe: bool = True


@dataclass
class PipelineConfig:
    seed: int = 42
    workers: int = 1
    output_dir: Path = Path("out")
    delimiter: str = ","
    inputs: InputPaths | None = None
    log_schema: LogSchema = field(default_factory=LogSchema)
    ingest: IngestParams = field(default_factory=IngestParams)
    embedding: S2VConfig = field(default_factory=S2VConfig)
    taste: TasteParams = field(default_factory=TasteParams)
    metrics: MetricParams = field(default_factory=MetricParams)
    models: tuple[ModelSpec, ...] = ()
    did: DidParams | None = None
    synth: SynthConfig | None = None

    def resolved_inputs(self) -> InputPaths:
        """Explicit inputs, or the synth stage's output files by convention."""
        if self.inputs is not None:
            return self.inputs
        data = self.output_dir / "data"
        return InputPaths(
            stream_log=data / "streams.csv",
            gazetteer=data / "cities.csv",
            track_metadata=data / "tracks.csv",
        )


def _build(cls, raw: dict, path: str):
    """Instantiate a dataclass from a mapping, rejecting unknown keys."""
    if not isinstance(raw, dict):
        raise ConfigError(path, f"expected a mapping, got {type(raw).__name__}")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - names
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}", "unknown field")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in raw:
            continue
        value = raw[f.name]
        if isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from exc


def _validate_choice(value: str, choices: tuple[str, ...], path: str) -> None:
    if value not in choices:
        raise ConfigError(path, f"must be one of {choices}, got {value!r}")


def _parse_observation_window(raw, path: str) -> tuple[int, int] | None:
    if raw is None:
        return None
    if not isinstance(raw, (list, tuple)) or len(raw) != 2:
        raise ConfigError(path, "expected [start, end]")
    out = []
    for entry in raw:
        if isinstance(entry, int):
            out.append(entry)
        else:
            try:
                dt = datetime.fromisoformat(str(entry))
            except ValueError as exc:
                raise ConfigError(path, f"bad timestamp {entry!r}") from exc
            if dt.tzinfo is None:
                dt = dt.replace(tzinfo=timezone.utc)
            out.append(int(dt.timestamp()))
    if out[0] > out[1]:
        raise ConfigError(path, "window start after end")
    return out[0], out[1]


def load_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError("config", f"file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            raw = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError("config", f"YAML parse error: {exc}") from exc
    return parse_config(raw, base_dir=path.parent)


def parse_config(raw: dict, base_dir: Path = Path(".")) -> PipelineConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config", "top level must be a mapping")
    cfg = PipelineConfig()

    known = {
        "seed", "workers", "output_dir", "delimiter", "inputs", "log_schema",
        "ingest", "embedding", "taste", "metrics", "models", "did", "synth",
    }
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown field")

    cfg.seed = int(raw.get("seed", cfg.seed))
    cfg.workers = int(raw.get("workers", cfg.workers))
    if cfg.workers < 1:
        raise ConfigError("workers", "must be >= 1")
    cfg.delimiter = str(raw.get("delimiter", cfg.delimiter))
    cfg.output_dir = (base_dir / raw["output_dir"]) if "output_dir" in raw else (base_dir / "out")

    if "inputs" in raw and raw["inputs"] is not None:
        section = raw["inputs"]
        if not isinstance(section, dict) or "stream_log" not in section or "gazetteer" not in section:
            raise ConfigError("inputs", "needs stream_log and gazetteer")
        cfg.inputs = InputPaths(
            stream_log=base_dir / section["stream_log"],
            gazetteer=base_dir / section["gazetteer"],
            track_metadata=(base_dir / section["track_metadata"])
            if section.get("track_metadata")
            else None,
        )

    if "log_schema" in raw:
        section = dict(raw["log_schema"])
        window = _parse_observation_window(
            section.pop("observation_window", None), "log_schema.observation_window"
        )
        columns = section.pop("columns", None)
        origin_mapping = section.pop("origin_mapping", None)
        schema = _build(LogSchema, section, "log_schema")
        if columns:
            merged = dict(schema.columns)
            merged.update(columns)
            schema.columns = merged
        if origin_mapping:
            merged = dict(schema.origin_mapping)
            merged.update(origin_mapping)
            bad = [v for v in merged.values() if v not in {o.value for o in Origin}]
            if bad:
                raise ConfigError("log_schema.origin_mapping", f"unknown origin value {bad[0]!r}")
            schema.origin_mapping = merged
        schema.observation_window = window
        cfg.log_schema = schema

    if "ingest" in raw:
        cfg.ingest = _build(IngestParams, raw["ingest"], "ingest")
        for name in ("min_duration_train", "min_duration_metrics", "session_gap"):
            if getattr(cfg.ingest, name) < 0:
                raise ConfigError(f"ingest.{name}", "must be >= 0")

    if "embedding" in raw:
        cfg.embedding = _build(S2VConfig, raw["embedding"], "embedding")
        try:
            cfg.embedding.validate()
        except ValueError as exc:
            raise ConfigError("embedding", str(exc)) from exc

    if "taste" in raw:
        cfg.taste = _build(TasteParams, raw["taste"], "taste")
        _validate_choice(cfg.taste.weighting, ("stream", "unique"), "taste.weighting")
        if cfg.taste.min_support < 1:
            raise ConfigError("taste.min_support", "must be >= 1")

    if "metrics" in raw:
        cfg.metrics = _build(MetricParams, raw["metrics"], "metrics")
        _validate_choice(
            cfg.metrics.exploration_window, EXPLORATION_WINDOWS, "metrics.exploration_window"
        )
        _validate_choice(cfg.metrics.travel_mode, ("sum", "mean"), "metrics.travel_mode")
        valid_origins = tuple(o.value for o in Origin)
        for origin in cfg.metrics.algorithmic_origins:
            _validate_choice(origin, valid_origins, "metrics.algorithmic_origins")

    models = []
    for i, spec in enumerate(raw.get("models", []) or []):
        model = _build(ModelSpec, spec, f"models[{i}]")
        _validate_choice(model.panel, ("user_month", "user_city_month"), f"models[{i}].panel")
        if not model.regressors:
            raise ConfigError(f"models[{i}].regressors", "must not be empty")
        models.append(model)
    cfg.models = tuple(models)

    if "did" in raw and raw["did"] is not None:
        cfg.did = _build(DidParams, raw["did"], "did")
        if not cfg.did.treated_country:
            raise ConfigError("did.treated_country", "required for the did stage")
        if "-W" not in cfg.did.treatment_week:
            raise ConfigError("did.treatment_week", "expected an ISO week key like 2020-W13")
        if cfg.did.n_leads < 1:
            raise ConfigError("did.n_leads", "must be >= 1")
        _validate_choice(
            cfg.did.exploration_window, EXPLORATION_WINDOWS, "did.exploration_window"
        )

    if "synth" in raw and raw["synth"] is not None:
        cfg.synth = _build(SynthConfig, raw["synth"], "synth")
        try:
            cfg.synth.validate()
        except ValueError as exc:
            raise ConfigError("synth", str(exc)) from exc

    return cfg


def config_digest_payload(cfg: PipelineConfig) -> dict:
    """Stable, JSON-serializable view of the config for manifest hashing."""

    def clean(value):
        if dataclasses.is_dataclass(value) and not isinstance(value, type):
            return {f.name: clean(getattr(value, f.name)) for f in dataclasses.fields(value)}
        if isinstance(value, Path):
            return str(value)
        if isinstance(value, (list, tuple)):
            return [clean(v) for v in value]
        if isinstance(value, dict):
            return {str(k): clean(v) for k, v in value.items()}
        if isinstance(value, Origin):
            return value.value
        return value

    return clean(cfg)
