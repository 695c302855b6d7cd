"""Configuration files, the dataset registry and resource preparation.

A config is one YAML (or JSON) document validated against the bundled
``config.schema.json``; unknown keys are rejected. Command-line flags are
applied on top as plain overrides. Secrets never live in the file: HTTP
backends read their key from the environment variable named in settings.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Any, Mapping

import jsonschema
import yaml

from .agents import NOUNS, load_templates
from .backend import build_backend
from .domain import AFLError, BackendSpec, InvariantError, RunConfig, ScorerSpec
from .evalbench import Resources
from .ingest import DataError, DatasetSplit, InteractionLog, chronological_split, load_interactions
from .recmodel import Scorer, TrainReport, artifact_hash, load_artifact, train
from .synthetic import bundled_dataset_dir

logger = logging.getLogger(__name__)

SCHEMA_PATH = Path(__file__).with_name("config.schema.json")


class ConfigError(AFLError):
    """Malformed config or unusable inputs; the CLI maps this to exit status 2."""


@dataclass(frozen=True)
class DatasetEntry:
    interactions: str
    catalog: str | None = None
    nouns: str = "music"


def builtin_datasets() -> dict[str, DatasetEntry]:
    d = bundled_dataset_dir()
    return {"synthetic": DatasetEntry(str(d / "interactions.tsv"), str(d / "catalog.tsv"), "music")}


@lru_cache(maxsize=1)
def config_schema() -> dict[str, Any]:
    return json.loads(SCHEMA_PATH.read_text(encoding="utf-8"))


def _error_path(err: jsonschema.ValidationError) -> str:
    parts = [str(p) for p in err.absolute_path]
    # additionalProperties errors point at the parent; name the offending key instead
    if err.validator == "additionalProperties" and isinstance(err.instance, Mapping):
        allowed = set(err.schema.get("properties", {}))
        extra = sorted(k for k in err.instance if k not in allowed)
        if extra:
            parts.append(extra[0])
    return ".".join(parts) or "<root>"


def validate_document(doc: Any) -> None:
    if not isinstance(doc, Mapping):
        raise ConfigError("config document must be a mapping")
    validator = jsonschema.Draft202012Validator(config_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        err = errors[0]
        raise ConfigError(f"config error at {_error_path(err)}: {err.message}")


def parse_config(doc: Mapping[str, Any] | None) -> tuple[RunConfig, dict[str, DatasetEntry]]:
    """Validate a config mapping and split it into a RunConfig and the dataset registry."""
    doc = dict(doc or {})
    validate_document(doc)
    registry = builtin_datasets()
    for name, entry in doc.pop("datasets", {}).items():
        registry[name] = DatasetEntry(**entry)
    try:
        cfg = RunConfig.from_dict(doc)
    except InvariantError as exc:
        raise ConfigError(f"config error: {exc}") from None
    return cfg, registry


def load_config(path: str | Path | None) -> tuple[RunConfig, dict[str, DatasetEntry]]:
    if path is None:
        return parse_config({})
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8"))
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    return parse_config(doc)


def apply_overrides(cfg: RunConfig, overrides: Mapping[str, Any]) -> RunConfig:
    """Apply flag overrides (``None`` values are ignored) and re-validate."""
    changes = {k: v for k, v in overrides.items() if v is not None}
    if not changes:
        return cfg
    merged = cfg.to_dict()
    merged.update(
        {k: (v.to_dict() if hasattr(v, "to_dict") else v) for k, v in changes.items()}
    )
    try:
        validate_document(merged)
        return RunConfig.from_dict(merged)
    except InvariantError as exc:
        raise ConfigError(f"config error: {exc}") from None


def config_hash(cfg: RunConfig) -> str:
    blob = json.dumps(cfg.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def resolve_dataset(cfg: RunConfig, registry: Mapping[str, DatasetEntry]) -> DatasetEntry:
    if cfg.interactions_path:
        return DatasetEntry(cfg.interactions_path, cfg.catalog_path, cfg.nouns)
    if cfg.dataset in registry:
        return registry[cfg.dataset]
    candidate = Path(cfg.dataset)
    if candidate.is_dir():
        return DatasetEntry(str(candidate / "interactions.tsv"), str(candidate / "catalog.tsv"), cfg.nouns)
    raise ConfigError(f"unknown dataset {cfg.dataset!r} (not in registry and not a directory)")


def load_dataset(entry: DatasetEntry) -> InteractionLog:
    for p in (entry.interactions, entry.catalog):
        if p is not None and not Path(p).is_file():
            raise ConfigError(f"dataset file not found: {p}")
    if entry.catalog is None and not Path(entry.interactions).with_name("catalog.tsv").is_file():
        raise ConfigError(f"dataset file not found: {Path(entry.interactions).with_name('catalog.tsv')}")
    return load_interactions(entry.interactions, entry.catalog)


def artifact_path(cfg: RunConfig, role: str, spec: ScorerSpec) -> Path:
    if spec.artifact:
        return Path(spec.artifact)
    return Path(cfg.artifacts_dir) / cfg.dataset / f"{role}-{spec.kind}-seed{cfg.seed}.json"


def train_scorer(
    cfg: RunConfig, spec: ScorerSpec, split: DatasetSplit, log: InteractionLog
) -> tuple[Scorer, TrainReport]:
    return train(spec.kind, split, spec.hyperparameters, cfg.seed, extra_vocab=log.catalog)


def obtain_scorer(
    cfg: RunConfig,
    role: str,
    spec: ScorerSpec,
    split: DatasetSplit,
    log: InteractionLog,
    cache: dict[str, Scorer],
) -> tuple[Scorer, str]:
    """Load the role's artifact if it exists, else train in process (deterministic)."""
    path = artifact_path(cfg, role, spec)
    if path.is_file():
        model = load_artifact(path)
        return model, f"file:{path}"
    if spec.artifact:
        raise ConfigError(f"artifact not found: {path}")
    key = json.dumps([spec.kind, spec.hyperparameters], sort_keys=True)
    if key not in cache:
        logger.info("no artifact at %s; training %s in process", path, spec.kind)
        cache[key] = train_scorer(cfg, spec, split, log)[0]
    return cache[key], "trained-in-process"


def build_resources(
    cfg: RunConfig, registry: Mapping[str, DatasetEntry] | None = None, log: InteractionLog | None = None
) -> Resources:
    """Load data, split it, obtain the three scorers and construct both backends."""
    entry = resolve_dataset(cfg, registry or builtin_datasets())
    if log is None:
        log = load_dataset(entry)
    try:
        split = chronological_split(log, cfg.split_ratios)
    except DataError as exc:
        raise ConfigError(str(exc)) from None
    cache: dict[str, Scorer] = {}
    models, sources = {}, {}
    for role, spec in (("rec_model", cfg.rec_model), ("reward_model", cfg.reward_model), ("fallback_scorer", cfg.fallback_scorer)):
        models[role], sources[role] = obtain_scorer(cfg, role, spec, split, log, cache)
    nouns = NOUNS[entry.nouns if not cfg.interactions_path else cfg.nouns]
    provenance = {
        "dataset": cfg.dataset,
        "seed": cfg.seed,
        "split_sizes": split.sizes(),
        "artifact_hashes": {role: artifact_hash(m) for role, m in models.items()},
        "artifact_sources": sources,
    }
    return Resources(
        catalog=log.catalog,
        split=split,
        rec_model=models["rec_model"],
        reward_model=models["reward_model"],
        fallback_scorer=models["fallback_scorer"],
        rec_backend=build_backend(cfg.rec_backend, cfg.concurrency, cfg.retry_budget),
        user_backend=build_backend(cfg.user_backend, cfg.concurrency, cfg.retry_budget),
        templates=load_templates(cfg.template_dir),
        nouns=nouns,
        provenance=provenance,
    )


def with_replay(cfg: RunConfig, path: str) -> RunConfig:
    spec = BackendSpec("replay", {"path": path})
    return replace(cfg, rec_backend=spec, user_backend=spec)
