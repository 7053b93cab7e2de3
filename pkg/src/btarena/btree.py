"""Compile behavior trees into tickable policies.

A compiled policy is the triple (tree structure, neural task handlers, rule
handlers): conditions and tasks are bound to handlers by catalog key, node ids
are assigned in depth-first pre-order, and per-node runtime state (sequence
bookmarks, selector preemption tracking, task progress) lives on the policy.

Tick semantics:

* Selector is reactive: every tick it re-evaluates children from the first,
  returns the first non-Failure child status, and resets a previously Running
  branch that got preempted.
* Sequence has memory: it resumes its Running child directly without
  re-ticking earlier siblings, fails on the first child Failure, succeeds when
  all children have succeeded.
* Condition consults its predicate (XOR negation) and never returns Running.
* Task delegates to its handler; a handler that raises degrades to Failure
  plus a recorded fault, never a crashed episode.

At most one action is emitted per tick: the action of the deepest task
reached (the last handler-produced action during traversal wins).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

from . import dsl


class TickStatus(enum.Enum):
    SUCCESS = "success"
    FAILURE = "failure"
    RUNNING = "running"


class BlackboardKeyError(KeyError):
    """Read of a key that was never set."""


class Blackboard:
    """Per-agent key/value store, persistent across ticks within one episode.

    Values are scalars, 2-vectors, entity ids, or tick counters by convention.
    Reads of unset keys raise; there is no silent default.
    """

    def __init__(self) -> None:
        self._data: dict[str, Any] = {}

    def set(self, key: str, value: Any) -> None:
        self._data[key] = value

    def get(self, key: str) -> Any:
        try:
            return self._data[key]
        except KeyError:
            raise BlackboardKeyError(key) from None

    def __contains__(self, key: str) -> bool:
        return key in self._data

    def clear(self) -> None:
        self._data.clear()

    def snapshot(self) -> dict[str, Any]:
        """Copy of the current contents; used by purity checks in tests."""
        return dict(self._data)


ConditionFn = Callable[[Any], bool]


class TaskHandler:
    """Base for task handlers. Subclasses override :meth:`tick`.

    ``tick`` returns (status, action-or-None). ``rt`` is the owning policy,
    exposing ``rng`` and ``deterministic`` for handlers that sample.
    """

    def tick(self, obs: Any, bb: Blackboard, rt: "CompiledPolicy") -> tuple[TickStatus, Any | None]:
        raise NotImplementedError

    def reset(self) -> None:
        pass


TaskFactory = Callable[[str | None], TaskHandler]


@dataclass(frozen=True)
class HandlerTable:
    """Catalog-key bindings. Every task action is rule-based XOR neural."""

    conditions: Mapping[str, ConditionFn] = field(default_factory=dict)
    rule_tasks: Mapping[str, TaskFactory] = field(default_factory=dict)
    neural_tasks: Mapping[str, TaskFactory] = field(default_factory=dict)


@dataclass(frozen=True)
class Fault:
    """Runtime diagnostic recorded when a handler raised during a tick."""

    node_id: int
    where: str
    message: str


class CompileError(ValueError):
    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(f"{code}: {message}")


class CompiledPolicy:
    """A tickable policy. Build with :func:`compile_tree`."""

    def __init__(
        self,
        tree: dsl.BtNode,
        nodes: tuple[dsl.BtNode, ...],
        children: tuple[tuple[int, ...], ...],
        subtree_size: tuple[int, ...],
        cond_fns: dict[int, ConditionFn],
        handlers: dict[int, TaskHandler],
        neural_ids: frozenset[int],
        deterministic: bool,
        seed: int,
    ):
        self.tree = tree
        self.nodes = nodes
        self._children = children
        self._subtree_size = subtree_size
        self._cond_fns = cond_fns
        self._handlers = handlers
        self.neural_ids = neural_ids
        self.deterministic = deterministic
        self.faults: list[Fault] = []
        self._seq_cursor = [0] * len(nodes)
        self._sel_running: list[int | None] = [None] * len(nodes)
        self._last_action: Any | None = None
        self.rng = np.random.default_rng(seed)

    @property
    def node_count(self) -> int:
        return len(self.nodes)

    def reset(self, bb: Blackboard | None = None, *, seed: int | None = None) -> None:
        """Clear all runtime state (and the blackboard, when given)."""
        self._seq_cursor = [0] * len(self.nodes)
        self._sel_running = [None] * len(self.nodes)
        for handler in self._handlers.values():
            handler.reset()
        self.faults.clear()
        if bb is not None:
            bb.clear()
        if seed is not None:
            self.rng = np.random.default_rng(seed)

    def tick(self, obs: Any, bb: Blackboard) -> tuple[TickStatus, Any | None]:
        """Advance the tree one tick against an observation."""
        self._last_action = None
        status = self._tick_node(0, obs, bb)
        return status, self._last_action

    # -- internals --------------------------------------------------------

    def _reset_subtree(self, node_id: int) -> None:
        for i in range(node_id, node_id + self._subtree_size[node_id]):
            self._seq_cursor[i] = 0
            self._sel_running[i] = None
            handler = self._handlers.get(i)
            if handler is not None:
                handler.reset()

    def _tick_node(self, node_id: int, obs: Any, bb: Blackboard) -> TickStatus:
        node = self.nodes[node_id]
        if node.kind == dsl.CONDITION:
            try:
                value = bool(self._cond_fns[node_id](obs))
            except Exception as err:  # degrade, never crash the episode
                self.faults.append(Fault(node_id, f"condition {node.key}", repr(err)))
                return TickStatus.FAILURE
            return TickStatus.SUCCESS if value != node.negated else TickStatus.FAILURE

        if node.kind == dsl.TASK:
            handler = self._handlers[node_id]
            try:
                status, action = handler.tick(obs, bb, self)
            except Exception as err:
                self.faults.append(Fault(node_id, f"task {node.action}", repr(err)))
                handler.reset()
                return TickStatus.FAILURE
            if action is not None:
                self._last_action = action
            if status is not TickStatus.RUNNING:
                handler.reset()
            return status

        if node.kind == dsl.SEQUENCE:
            i = self._seq_cursor[node_id]
            kids = self._children[node_id]
            while i < len(kids):
                status = self._tick_node(kids[i], obs, bb)
                if status is TickStatus.FAILURE:
                    self._seq_cursor[node_id] = 0
                    return TickStatus.FAILURE
                if status is TickStatus.RUNNING:
                    self._seq_cursor[node_id] = i
                    return TickStatus.RUNNING
                i += 1
            self._seq_cursor[node_id] = 0
            return TickStatus.SUCCESS

        # selector: reactive, re-evaluates from the first child every tick
        prev = self._sel_running[node_id]
        kids = self._children[node_id]
        for i, kid in enumerate(kids):
            status = self._tick_node(kid, obs, bb)
            if status is TickStatus.FAILURE:
                continue
            if prev is not None and prev != i:
                self._reset_subtree(kids[prev])
            self._sel_running[node_id] = i if status is TickStatus.RUNNING else None
            return status
        if prev is not None:
            self._reset_subtree(kids[prev])
        self._sel_running[node_id] = None
        return TickStatus.FAILURE


def compile_tree(
    tree: dsl.BtNode,
    catalog: dsl.NodeCatalog,
    table: HandlerTable,
    *,
    deterministic: bool = False,
    seed: int = 0,
) -> CompiledPolicy:
    """Bind a validated tree to handlers and return a fresh policy instance.

    Raises :class:`dsl.DslError` when the tree fails validation and
    :class:`CompileError` (``unbound-handler``) when the bindings do not cover
    the catalog, or (``ambiguous-handler``) when an action is bound both ways.
    """
    errors = [d for d in dsl.validate(tree, catalog) if d.severity == "error"]
    if errors:
        raise dsl.DslError(errors)

    overlap = set(table.rule_tasks) & set(table.neural_tasks)
    if overlap:
        raise CompileError("ambiguous-handler", f"actions bound as both rule and neural: {sorted(overlap)}")
    for key in catalog.conditions:
        if key not in table.conditions:
            raise CompileError("unbound-handler", f"no handler bound for condition {key!r}")
    for key in catalog.actions:
        if key not in table.rule_tasks and key not in table.neural_tasks:
            raise CompileError("unbound-handler", f"no handler bound for action {key!r}")

    # Positional numbering: safe even when one node object is aliased twice.
    node_list: list[dsl.BtNode] = []
    child_ids: list[tuple[int, ...]] = []

    def number(node: dsl.BtNode) -> int:
        my_id = len(node_list)
        node_list.append(node)
        child_ids.append(())
        child_ids[my_id] = tuple(number(c) for c in node.children)
        return my_id

    number(tree)
    nodes = tuple(node_list)
    children = tuple(child_ids)
    sizes = [1] * len(nodes)
    for i in range(len(nodes) - 1, -1, -1):
        sizes[i] += sum(sizes[c] for c in children[i])

    cond_fns: dict[int, ConditionFn] = {}
    handlers: dict[int, TaskHandler] = {}
    neural_ids: set[int] = set()
    for i, node in enumerate(nodes):
        if node.kind == dsl.CONDITION:
            cond_fns[i] = table.conditions[node.key]  # type: ignore[index]
        elif node.kind == dsl.TASK:
            if node.action in table.neural_tasks:
                handlers[i] = table.neural_tasks[node.action](node.param)
                neural_ids.add(i)
            else:
                handlers[i] = table.rule_tasks[node.action](node.param)  # type: ignore[index]

    return CompiledPolicy(
        tree, nodes, children, tuple(sizes), cond_fns, handlers,
        frozenset(neural_ids), deterministic, seed,
    )


def tick(policy: CompiledPolicy, obs: Any, bb: Blackboard) -> tuple[TickStatus, Any | None]:
    return policy.tick(obs, bb)


def reset(policy: CompiledPolicy, bb: Blackboard | None = None) -> None:
    policy.reset(bb)
