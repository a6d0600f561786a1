"""Coarse-grained provenance extraction from SQL query event logs."""
from .analysis import BindingMode, analyze_statement
from .catalog import CatalogState
from .collector import build_qqtree, collect
from .config import RunConfig, default_config, load_config
from .estimators import (
    ActivityFilter,
    LastKRunsAdmitter,
    LoopCompressor,
    ProvenanceGraphExtractor,
    QueryRouter,
    make_filter_pipeline,
)
from .filters import FilterConfig
from .graph import ProvenanceGraph
from .hooks import HookRegistry
from .pipeline import run_extract

__version__ = "0.1.0"

__all__ = [
    "ActivityFilter",
    "BindingMode",
    "CatalogState",
    "FilterConfig",
    "HookRegistry",
    "LastKRunsAdmitter",
    "LoopCompressor",
    "ProvenanceGraph",
    "ProvenanceGraphExtractor",
    "QueryRouter",
    "RunConfig",
    "analyze_statement",
    "build_qqtree",
    "collect",
    "default_config",
    "load_config",
    "make_filter_pipeline",
    "run_extract",
]
