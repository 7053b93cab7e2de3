"""Behavior-tree game agents: DSL, hybrid rule/neural policies, grid arena, prompt-driven search."""

__version__ = "0.1.0"

from . import arena, btree, dsl, fps, genkit, geom, neural, scheduler, search
from .btree import Blackboard, CompiledPolicy, HandlerTable, TickStatus, compile_tree
from .dsl import DslError, NodeCatalog, parse, to_canonical_dsl, to_json, from_json, validate
from .arena import GameMetrics, ReplayTrace, parse_map, run_episode
from .search import SearchConfig, bfs_search, evaluate
from .genkit import GeneratorConfig, generate

__all__ = [
    "__version__",
    "arena",
    "btree",
    "dsl",
    "fps",
    "genkit",
    "geom",
    "neural",
    "scheduler",
    "search",
    "Blackboard",
    "CompiledPolicy",
    "HandlerTable",
    "TickStatus",
    "compile_tree",
    "DslError",
    "NodeCatalog",
    "parse",
    "to_canonical_dsl",
    "to_json",
    "from_json",
    "validate",
    "GameMetrics",
    "ReplayTrace",
    "parse_map",
    "run_episode",
    "SearchConfig",
    "bfs_search",
    "evaluate",
    "GeneratorConfig",
    "generate",
]
