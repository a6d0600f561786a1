"""Run configuration: a TOML file with [source], [filters], [binding] and [uploader] sections.

Precedence, lowest first: built-in defaults (the production profile), the
file, ``QLOGPROV_<SECTION>_<KEY>`` environment variables, CLI flags.
"""
from __future__ import annotations

import dataclasses
import logging
import os
import sys
from dataclasses import dataclass, field
from typing import Optional

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .analysis import BindingMode
from .collector import DEFAULT_STALENESS_US
from .errors import ConfigError
from .filters import FilterConfig
from .graph import ALL_LEVELS
from .uploader import BACKOFF_BASE, BACKOFF_FACTOR, DEFAULT_BATCH_SIZE, MAX_ATTEMPTS, TARGETS

logger = logging.getLogger(__name__)

ENV_PREFIX = "QLOGPROV_"
UNBOUNDED = "all"  # file spelling of k=None / K=None


@dataclass
class SourceConfig:
    path: str = ""
    checkpoint: str = ""
    staleness_hours: float = DEFAULT_STALENESS_US / 3_600_000_000
    validate: bool = True
    report: str = ""  # where the run report is written; "" = next to the checkpoint or cwd
    fig6_strict_subtree: bool = False  # only batches and EXECUTE statements open subtrees


@dataclass
class BindingConfig:
    mode: str = BindingMode.STATE_BASED.value
    state: str = ""  # catalog snapshot path
    include_control_columns: bool = False


@dataclass
class UploaderConfig:
    sink: str = ""  # directory or http(s) endpoint; "" = no upload
    target_format: str = "atlas_json"
    batch_size: int = DEFAULT_BATCH_SIZE
    checkpoint: str = ""
    max_attempts: int = MAX_ATTEMPTS
    base_delay: float = BACKOFF_BASE
    backoff_factor: float = BACKOFF_FACTOR


@dataclass
class RunConfig:
    source: SourceConfig = field(default_factory=SourceConfig)
    filters: FilterConfig = field(default_factory=FilterConfig)
    binding: BindingConfig = field(default_factory=BindingConfig)
    uploader: UploaderConfig = field(default_factory=UploaderConfig)

    def validate(self):
        try:
            BindingMode(self.binding.mode)
        except ValueError:
            raise ConfigError(f"binding.mode must be one of {[m.value for m in BindingMode]}") from None
        if self.uploader.target_format not in TARGETS:
            raise ConfigError(f"uploader.target_format must be one of {list(TARGETS)}")
        if self.uploader.batch_size < 1:
            raise ConfigError("uploader.batch_size must be >= 1")
        if self.uploader.max_attempts < 1:
            raise ConfigError("uploader.max_attempts must be >= 1")
        if self.source.staleness_hours <= 0:
            raise ConfigError("source.staleness_hours must be positive")
        return self


def default_config() -> RunConfig:
    """The production profile: k=1, K=1, builtin patterns, all levels, no event dropping."""
    return RunConfig()


# -- (de)serialization -------------------------------------------------------------------------


def _filters_to_dict(f: FilterConfig) -> dict:
    f = dataclasses.replace(f)  # re-run normalization on fields assigned after construction
    d = {
        "loop_iters_admitted": UNBOUNDED if f.loop_iters_admitted is None else f.loop_iters_admitted,
        "sp_runs_admitted": UNBOUNDED if f.sp_runs_admitted is None else f.sp_runs_admitted,
        "use_builtin_patterns": f.use_builtin_patterns,
        "keep_context": f.keep_context,
        "emit_levels": sorted(f.emit_levels),
        "required_statement_kinds": list(f.required_statement_kinds),
        "metadata_predicates": [p.to_dict() for p in f.metadata_predicates],
        "patterns": [p.to_dict() for p in f.patterns],
    }
    if f.drop_events_buffer is not None:
        d["drop_events_buffer"] = f.drop_events_buffer
    return d


def _unbounded(value, name):
    if value == UNBOUNDED or value is None:
        return None
    if isinstance(value, str):
        try:
            return int(value)
        except ValueError:
            raise ConfigError(f"filters.{name} must be an integer or {UNBOUNDED!r}") from None
    return value


def _filters_from_dict(d: dict) -> FilterConfig:
    d = dict(d)
    known = {f.name for f in dataclasses.fields(FilterConfig)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown [filters] key(s): {sorted(unknown)}")
    for name in ("loop_iters_admitted", "sp_runs_admitted"):
        if name in d:
            d[name] = _unbounded(d[name], name)
    if "emit_levels" in d:
        levels = d["emit_levels"]
        d["emit_levels"] = frozenset([levels] if isinstance(levels, str) else levels)
    try:
        return FilterConfig(**d)
    except TypeError as exc:
        raise ConfigError(f"bad [filters] section: {exc}") from None


def config_to_dict(cfg: RunConfig) -> dict:
    return {
        "source": dataclasses.asdict(cfg.source),
        "filters": _filters_to_dict(cfg.filters),
        "binding": dataclasses.asdict(cfg.binding),
        "uploader": dataclasses.asdict(cfg.uploader),
    }


_SECTIONS = {"source": SourceConfig, "binding": BindingConfig, "uploader": UploaderConfig}


def _section(cls, doc, name):
    doc = doc or {}
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(fields)
    if unknown:
        raise ConfigError(f"unknown [{name}] key(s): {sorted(unknown)}")
    values = {}
    for key, value in doc.items():
        default = getattr(cls(), key)
        values[key] = _coerce(value, type(default), f"{name}.{key}")
    return cls(**values)


def _coerce(value, typ, where):
    if isinstance(value, typ) and not (typ is int and isinstance(value, bool)):
        return value
    if typ is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if isinstance(value, str):
        try:
            if typ is bool:
                low = value.strip().lower()
                if low in ("1", "true", "yes", "on"):
                    return True
                if low in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return typ(value)
        except ValueError:
            pass
    raise ConfigError(f"{where}: expected {typ.__name__}, got {value!r}")


def config_from_dict(doc: dict) -> RunConfig:
    unknown = set(doc) - {"source", "filters", "binding", "uploader"}
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
    cfg = RunConfig(
        source=_section(SourceConfig, doc.get("source"), "source"),
        filters=_filters_from_dict(doc.get("filters") or {}),
        binding=_section(BindingConfig, doc.get("binding"), "binding"),
        uploader=_section(UploaderConfig, doc.get("uploader"), "uploader"),
    )
    return cfg.validate()


def dumps_config(cfg: RunConfig) -> str:
    return tomli_w.dumps(config_to_dict(cfg))


def loads_config(text: str) -> RunConfig:
    try:
        doc = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None
    return config_from_dict(doc)


def load_config(path: Optional[str] = None, env=None) -> RunConfig:
    """Defaults, then ``path`` (if given), then environment overrides."""
    doc = {}
    if path:
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in {path}: {exc}") from None
    apply_env(doc, os.environ if env is None else env)
    return config_from_dict(doc)


def apply_env(doc: dict, env) -> dict:
    """Merge ``QLOGPROV_<SECTION>_<KEY>=value`` variables into a raw config dict."""
    for var, value in env.items():
        if not var.startswith(ENV_PREFIX):
            continue
        rest = var[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition("_")
        if section not in ("source", "filters", "binding", "uploader") or not key:
            continue
        if section == "filters" and key in ("emit_levels", "required_statement_kinds"):
            value = [v.strip() for v in value.split(",") if v.strip()]
        elif section == "filters" and key in ("loop_iters_admitted", "sp_runs_admitted", "drop_events_buffer"):
            value = value if value == UNBOUNDED else _coerce(value, int, var)
        elif section == "filters" and key in ("use_builtin_patterns", "keep_context"):
            value = _coerce(value, bool, var)
        doc.setdefault(section, {})[key] = value
    return doc


def save_config(cfg: RunConfig, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_config(cfg))


__all__ = [
    "ALL_LEVELS",
    "BindingConfig",
    "RunConfig",
    "SourceConfig",
    "UploaderConfig",
    "default_config",
    "dumps_config",
    "load_config",
    "loads_config",
    "save_config",
]
