"""Declarative run configuration: TOML file, then command-line overrides."""
from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping

import tomli

from .graph import GraphOptions
from .model import ConfigError, ModelConfig, SearchSpace, check_search_ranges


@dataclass
class DataConfig:
    response: str = ""
    expression: str = ""
    dti: str = ""
    fingerprints: str = ""
    smiles: str = ""
    drug_allowlist: str = ""
    processed: str = ""
    fingerprint_radius: int = 2


@dataclass
class PreprocessConfig:
    task: str = "classification"
    percentile_scope: str = "global"
    gene_fraction: float = 0.1


@dataclass
class SplitConfig:
    test: int = 1
    axis: str = "drug"
    seed: int = 0
    n_folds: int = 5
    max_entities: int = 0
    validation_fraction: float = 0.2


@dataclass
class SearchConfig:
    budget: int = 20
    seed: int = 0
    space: dict = field(default_factory=dict)


@dataclass
class PubmedConfig:
    transport: str = "fixture"
    fixture: str = ""
    aliases: str = ""
    cache: str = ""
    rate: float = 3.0
    field_tag: str = ""


@dataclass
class ExplainConfig:
    checkpoint: str = ""
    gene_sets: str = ""
    moa: str = ""
    top_k_evidence: int = 5
    top_k_enrichment: int = 100
    layer: int = -1


@dataclass
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    target: DataConfig = field(default_factory=DataConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    graph: GraphOptions = field(default_factory=GraphOptions)
    model: ModelConfig = field(default_factory=ModelConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    search: SearchConfig = field(default_factory=SearchConfig)
    pubmed: PubmedConfig = field(default_factory=PubmedConfig)
    explain: ExplainConfig = field(default_factory=ExplainConfig)
    output: str = "runs/default"
    # the published tuning ranges are enforced unless this is switched off (desk-scale runs)
    enforce_ranges: bool = True

    def validate(self) -> "RunConfig":
        if self.preprocess.task not in ("classification", "regression"):
            raise ConfigError("preprocess.task must be classification or regression")
        if self.preprocess.percentile_scope not in ("global", "per_drug"):
            raise ConfigError("preprocess.percentile_scope must be global or per_drug")
        if not 0.0 < self.preprocess.gene_fraction <= 1.0:
            raise ConfigError("preprocess.gene_fraction must be in (0, 1]")
        if self.split.test not in (1, 2, 3):
            raise ConfigError("split.test must be 1, 2 or 3")
        if self.split.axis not in ("drug", "cell"):
            raise ConfigError("split.axis must be drug or cell")
        if self.split.n_folds < 2:
            raise ConfigError("split.n_folds must be >= 2")
        if not 0.0 <= self.split.validation_fraction < 1.0:
            raise ConfigError("split.validation_fraction must be in [0, 1)")
        if self.search.budget < 1:
            raise ConfigError("search.budget must be >= 1")
        if self.pubmed.transport not in ("live", "fixture"):
            raise ConfigError("pubmed.transport must be live or fixture")
        if self.pubmed.rate <= 0:
            raise ConfigError("pubmed.rate must be positive")
        if self.graph.std_ddof not in (0, 1):
            raise ConfigError("graph.std_ddof must be 0 or 1")
        if self.model.task != self.preprocess.task:
            self.model = dataclasses.replace(self.model, task=self.preprocess.task)
        if self.enforce_ranges:
            try:
                check_search_ranges(self.model)
            except ConfigError as exc:
                raise ConfigError(f"model.{exc}") from None
        self.search_space()
        return self

    def search_space(self) -> SearchSpace:
        known = {f.name for f in fields(SearchSpace)}
        bad = set(self.search.space) - known
        if bad:
            raise ConfigError(f"unknown key search.space.{sorted(bad)[0]}")
        return SearchSpace(**{k: tuple(v) if isinstance(v, list) else v for k, v in self.search.space.items()})

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


_SECTIONS = {f.name: f for f in fields(RunConfig)}
# file paths inside a config file are relative to that file
_PATH_KEYS = {
    "data": ("response", "expression", "dti", "fingerprints", "smiles", "drug_allowlist", "processed"),
    "target": ("response", "expression", "dti", "fingerprints", "smiles", "drug_allowlist", "processed"),
    "explain": ("checkpoint", "gene_sets", "moa"),
    "pubmed": ("fixture", "aliases", "cache"),
}


def _build(cls, values: Mapping[str, Any], where: str):
    if not isinstance(values, Mapping):
        raise ConfigError(f"{where} must be a table")
    names = {f.name: f for f in fields(cls)}
    for key in values:
        if key not in names:
            raise ConfigError(f"unknown key {where}.{key}")
    kwargs = {k: tuple(v) if isinstance(v, list) and k != "space" else v for k, v in values.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ConfigError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def from_dict(d: Mapping[str, Any]) -> RunConfig:
    kwargs = {}
    for key, value in d.items():
        if key not in _SECTIONS:
            raise ConfigError(f"unknown key {key}")
        default = getattr(RunConfig(), key)
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value, key)
        else:
            kwargs[key] = value
    return RunConfig(**kwargs)


def parse_override(text: str) -> tuple[list[str], Any]:
    """``section.key=value``; the value is read as a Python/TOML literal when possible."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, raw = text.split("=", 1)
    raw = raw.strip()
    lowered = raw.lower()
    if lowered in ("true", "false"):
        value: Any = lowered == "true"
    else:
        try:
            value = ast.literal_eval(raw)
        except (ValueError, SyntaxError):
            value = raw
    return key.strip().split("."), value


def merge(base: dict, path: list[str], value: Any) -> None:
    node = base
    for part in path[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"cannot set {'.'.join(path)}: {part} is not a table")
    node[path[-1]] = value


def load_config(path: str | Path | None = None, overrides: list[str] | tuple[str, ...] = ()) -> RunConfig:
    """Defaults, then the TOML file, then ``overrides``; validated before returning."""
    raw: dict = {}
    if path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"config file not found: {p}")
        try:
            raw = tomli.loads(p.read_text())
        except tomli.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from None
        for section, keys in _PATH_KEYS.items():
            table = raw.get(section, {})
            for k in keys:
                v = table.get(k) if isinstance(table, dict) else None
                if isinstance(v, str) and v and not Path(v).is_absolute():
                    table[k] = str(p.parent / v)
    for item in overrides:
        merge(raw, *parse_override(item))
    return from_dict(raw).validate()


def dump_toml(cfg: RunConfig) -> str:
    """Serialize to TOML (flat scalars, lists and one level of nested tables)."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, (list, tuple)):
            return "[" + ", ".join(fmt(x) for x in v) + "]"
        if isinstance(v, str):
            return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
        return repr(v)

    d = cfg.to_dict()
    lines = [f"{k} = {fmt(v)}" for k, v in d.items() if not isinstance(v, dict)]
    for k, v in d.items():
        if isinstance(v, dict):
            lines.append(f"\n[{k}]")
            lines.extend(f"{kk} = {fmt(vv)}" for kk, vv in v.items() if not isinstance(vv, dict))
            for kk, vv in v.items():
                if isinstance(vv, dict) and vv:
                    lines.append(f"\n[{k}.{kk}]")
                    lines.extend(f"{a} = {fmt(b)}" for a, b in vv.items())
    return "\n".join(lines) + "\n"
