"""Indentation-based behavior-tree DSL: parsing, validation, printing, JSON round-trip.

A tree is written one node per line, two spaces of indent per level::

    selector:
      sequence:
        condition: has_enemy_in_view
        task: shoot random_enemy_in_view
      sequence:
        condition: no
        condition: has_enemy_in_view
        task: move_to random_enemy_location

``condition: no`` is a negation marker: it fuses with the condition line that
immediately follows it at the same level, producing a single negated condition
node. Blank lines and full-line ``#`` comments are ignored. Tabs are rejected.

Parsing is total: any input either returns a tree or raises :class:`DslError`
carrying one diagnostic per problem found. Error codes produced by the parser:
``tabs-forbidden``, ``bad-indent``, ``bad-syntax``, ``unknown-node``,
``leaf-has-children``, ``dangling-negation``, ``empty-composite``,
``multiple-roots``, ``empty-source``. The validator adds ``unknown-condition``,
``unknown-action``, ``bad-param``, ``too-many-nodes`` (errors) and
``deep-tree``, ``duplicate-sibling`` (warnings).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

SELECTOR = "selector"
SEQUENCE = "sequence"
CONDITION = "condition"
TASK = "task"

COMPOSITE_KINDS = frozenset((SELECTOR, SEQUENCE))
LEAF_KINDS = frozenset((CONDITION, TASK))
NODE_KINDS = COMPOSITE_KINDS | LEAF_KINDS

INDENT_UNIT = 2
MAX_DEPTH = 12
MAX_NODES = 256
NEGATION_MARKER = "no"

_IDENT_RE = re.compile(r"[a-z_][a-z0-9_]*\Z")
_LINE_RE = re.compile(r"(?P<indent> *)(?P<kw>[^\s:]+):(?P<rest>.*)\Z")


@dataclass(frozen=True)
class Span:
    """1-based source position of a node or diagnostic."""

    line: int
    column: int


# Synthetic span for trees built in code rather than parsed from text.
NO_SPAN = Span(0, 0)


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    code: str
    message: str
    span: Span

    def __str__(self) -> str:
        return f"{self.span.line}:{self.span.column}: {self.severity}: {self.code}: {self.message}"


class DslError(ValueError):
    """Source text or document could not produce a valid tree."""

    def __init__(self, diagnostics: Iterable[Diagnostic]):
        self.diagnostics = tuple(diagnostics)
        super().__init__("; ".join(str(d) for d in self.diagnostics))


class SchemaError(ValueError):
    """A JSON document violated the tree schema. ``pointer`` locates the violation."""

    code = "bad-schema"

    def __init__(self, pointer: str, message: str):
        self.pointer = pointer
        super().__init__(f"bad-schema at {pointer!r}: {message}")


@dataclass(frozen=True)
class BtNode:
    """One behavior-tree node. Immutable; ``span`` is ignored by equality."""

    kind: str
    key: str | None = None  # condition only
    negated: bool = False  # condition only
    action: str | None = None  # task only
    param: str | None = None  # task only
    children: tuple["BtNode", ...] = ()
    span: Span = field(default=NO_SPAN, compare=False, repr=False)

    def __post_init__(self) -> None:
        if self.kind not in NODE_KINDS:
            raise ValueError(f"unknown node kind {self.kind!r}")
        if self.kind in COMPOSITE_KINDS:
            if not self.children:
                raise ValueError(f"{self.kind} must have at least one child")
            if self.key is not None or self.action is not None or self.param is not None or self.negated:
                raise ValueError(f"{self.kind} takes only children")
        else:
            if self.children:
                raise ValueError(f"{self.kind} cannot have children")
            if self.kind == CONDITION and (self.key is None or self.action is not None or self.param is not None):
                raise ValueError("condition takes exactly a key")
            if self.kind == TASK and (self.action is None or self.key is not None or self.negated):
                raise ValueError("task takes an action and an optional param")

    def walk(self) -> "Iterable[BtNode]":
        """Depth-first pre-order traversal; the order used for node ids."""
        yield self
        for child in self.children:
            yield from child.walk()


def selector(*children: BtNode) -> BtNode:
    return BtNode(SELECTOR, children=tuple(children))


def sequence(*children: BtNode) -> BtNode:
    return BtNode(SEQUENCE, children=tuple(children))


def condition(key: str, negated: bool = False) -> BtNode:
    return BtNode(CONDITION, key=key, negated=negated)


def task(action: str, param: str | None = None) -> BtNode:
    return BtNode(TASK, action=action, param=param)


@dataclass(frozen=True)
class ActionSpec:
    """Permitted params (possibly empty) and a one-line doc for an action."""

    params: tuple[str, ...]
    doc: str


@dataclass(frozen=True)
class NodeCatalog:
    """The node vocabulary a tree may reference: condition keys and actions."""

    conditions: Mapping[str, str]  # key -> doc
    actions: Mapping[str, ActionSpec]


# ---------------------------------------------------------------------------
# parsing


@dataclass
class _Builder:
    kind: str
    level: int
    span: Span
    key: str | None = None
    negated: bool = False
    action: str | None = None
    param: str | None = None
    children: list["_Builder"] = field(default_factory=list)


def _error(diags: list[Diagnostic], code: str, message: str, span: Span) -> None:
    diags.append(Diagnostic("error", code, message, span))


def _scan_line(raw: str, lineno: int, diags: list[Diagnostic]) -> tuple[int, str, str, Span] | None:
    """Lex one line into (indent_level, keyword, rest, span) or record diagnostics."""
    if "\t" in raw:
        _error(diags, "tabs-forbidden", "tabs are not allowed; indent with spaces", Span(lineno, raw.index("\t") + 1))
        return None
    line = raw.rstrip()
    m = _LINE_RE.match(line)
    if m is None:
        indent = len(line) - len(line.lstrip(" "))
        _error(diags, "bad-syntax", "expected '<keyword>: ...'", Span(lineno, indent + 1))
        return None
    indent = len(m.group("indent"))
    span = Span(lineno, indent + 1)
    if indent % INDENT_UNIT != 0:
        _error(diags, "bad-indent", f"indent must be a multiple of {INDENT_UNIT} spaces", span)
        return None
    return indent // INDENT_UNIT, m.group("kw"), m.group("rest").strip(), span


def _lex_node(kw: str, rest: str, span: Span, diags: list[Diagnostic]) -> _Builder | None:
    if kw not in NODE_KINDS:
        _error(diags, "unknown-node", f"unknown node keyword {kw!r}", span)
        return None
    if kw in COMPOSITE_KINDS:
        if rest:
            _error(diags, "bad-syntax", f"{kw} takes no argument", span)
            return None
        return _Builder(kw, 0, span)
    if kw == CONDITION:
        if not _IDENT_RE.match(rest):
            _error(diags, "bad-syntax", "condition needs exactly one key", span)
            return None
        return _Builder(CONDITION, 0, span, key=rest)
    tokens = rest.split()
    if len(tokens) not in (1, 2) or not all(_IDENT_RE.match(t) for t in tokens):
        _error(diags, "bad-syntax", "task needs an action and at most one param", span)
        return None
    return _Builder(TASK, 0, span, action=tokens[0], param=tokens[1] if len(tokens) == 2 else None)


def _fuse_negations(builder: _Builder, diags: list[Diagnostic]) -> None:
    """Collapse ``condition: no`` markers into the following sibling condition."""
    fused: list[_Builder] = []
    pending_marker: _Builder | None = None
    for child in builder.children:
        _fuse_negations(child, diags)
        is_marker = child.kind == CONDITION and child.key == NEGATION_MARKER
        if pending_marker is not None:
            if child.kind == CONDITION and not is_marker:
                child.negated = True
                fused.append(child)
            else:
                _error(diags, "dangling-negation", "'condition: no' must be followed by a condition line", pending_marker.span)
                fused.append(child)
            pending_marker = None
        elif is_marker:
            pending_marker = child
        else:
            fused.append(child)
    if pending_marker is not None:
        _error(diags, "dangling-negation", "'condition: no' must be followed by a condition line", pending_marker.span)
    builder.children = fused


def _freeze(builder: _Builder, diags: list[Diagnostic]) -> BtNode | None:
    if builder.kind in COMPOSITE_KINDS:
        children = [_freeze(c, diags) for c in builder.children]
        if not builder.children:
            _error(diags, "empty-composite", f"{builder.kind} has no children", builder.span)
            return None
        if any(c is None for c in children):
            return None
        return BtNode(builder.kind, children=tuple(c for c in children if c is not None), span=builder.span)
    if builder.kind == CONDITION:
        return BtNode(CONDITION, key=builder.key, negated=builder.negated, span=builder.span)
    return BtNode(TASK, action=builder.action, param=builder.param, span=builder.span)


def parse(source: str) -> BtNode:
    """Parse DSL text into a tree. Raises :class:`DslError` listing every problem."""
    diags: list[Diagnostic] = []
    root: _Builder | None = None
    stack: list[_Builder] = []

    for lineno, raw in enumerate(source.splitlines(), start=1):
        if not raw.strip() or raw.lstrip().startswith("#"):
            continue
        scanned = _scan_line(raw, lineno, diags)
        if scanned is None:
            continue
        level, kw, rest, span = scanned
        node = _lex_node(kw, rest, span, diags)
        if node is None:
            continue
        node.level = level

        while stack and stack[-1].level >= level:
            stack.pop()
        if level == 0:
            if root is not None:
                _error(diags, "multiple-roots", "document must contain a single root node", span)
                continue
            root = node
        elif not stack:
            _error(diags, "bad-indent", "node is indented but has no parent", span)
            continue
        elif level > stack[-1].level + 1:
            _error(diags, "bad-indent", "indent jumps more than one level", span)
            continue
        else:
            parent = stack[-1]
            if parent.kind in LEAF_KINDS:
                _error(diags, "leaf-has-children", f"{parent.kind} on line {parent.span.line} cannot have children", span)
                continue
            parent.children.append(node)
        stack.append(node)

    if root is None:
        if not diags:
            _error(diags, "empty-source", "document contains no nodes", Span(1, 1))
        raise DslError(diags)

    if root.kind == CONDITION and root.key == NEGATION_MARKER:
        _error(diags, "dangling-negation", "'condition: no' must be followed by a condition line", root.span)
        raise DslError(diags)
    _fuse_negations(root, diags)
    tree = _freeze(root, diags)
    if any(d.severity == "error" for d in diags) or tree is None:
        raise DslError([d for d in diags if d.severity == "error"] or diags)
    return tree


def try_parse(source: str) -> tuple[BtNode | None, list[Diagnostic]]:
    """Like :func:`parse` but never raises; invalid input yields (None, diagnostics)."""
    try:
        return parse(source), []
    except DslError as err:
        return None, list(err.diagnostics)


# ---------------------------------------------------------------------------
# validation


def validate(tree: BtNode, catalog: NodeCatalog) -> list[Diagnostic]:
    """Check a tree against a catalog. Empty result means deployable.

    Errors: ``unknown-condition``, ``unknown-action``, ``bad-param``,
    ``too-many-nodes``. Warnings: ``deep-tree``, ``duplicate-sibling``.
    """
    diags: list[Diagnostic] = []
    count = 0
    deep_flagged = False

    def visit(node: BtNode, depth: int) -> None:
        nonlocal count, deep_flagged
        count += 1
        if depth > MAX_DEPTH and not deep_flagged:
            deep_flagged = True
            diags.append(Diagnostic("warning", "deep-tree", f"tree exceeds depth {MAX_DEPTH}", node.span))
        if node.kind == CONDITION and node.key not in catalog.conditions:
            diags.append(Diagnostic("error", "unknown-condition", f"unknown condition key {node.key!r}", node.span))
        elif node.kind == TASK:
            spec = catalog.actions.get(node.action or "")
            if spec is None:
                diags.append(Diagnostic("error", "unknown-action", f"unknown action {node.action!r}", node.span))
            elif node.param is not None and node.param not in spec.params:
                diags.append(Diagnostic("error", "bad-param", f"action {node.action!r} does not accept param {node.param!r}", node.span))
        seen: set[BtNode] = set()
        for child in node.children:
            if child in seen:
                diags.append(Diagnostic("warning", "duplicate-sibling", "duplicate sibling subtree", child.span))
            seen.add(child)
            visit(child, depth + 1)

    visit(tree, 1)
    if count > MAX_NODES:
        diags.append(Diagnostic("error", "too-many-nodes", f"tree has {count} nodes, limit is {MAX_NODES}", tree.span))
    return diags


# ---------------------------------------------------------------------------
# printing


def to_canonical_dsl(tree: BtNode) -> str:
    """Render a tree back to canonical DSL text (negations as marker lines)."""
    lines: list[str] = []

    def emit(node: BtNode, level: int) -> None:
        pad = " " * (INDENT_UNIT * level)
        if node.kind in COMPOSITE_KINDS:
            lines.append(f"{pad}{node.kind}:")
            for child in node.children:
                emit(child, level + 1)
        elif node.kind == CONDITION:
            if node.negated:
                lines.append(f"{pad}condition: {NEGATION_MARKER}")
            lines.append(f"{pad}condition: {node.key}")
        else:
            suffix = f" {node.param}" if node.param is not None else ""
            lines.append(f"{pad}task: {node.action}{suffix}")

    emit(tree, 0)
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# JSON deployment documents

SCHEMA_VERSION = 1

_FIELDS_BY_KIND = {
    SELECTOR: {"type", "children"},
    SEQUENCE: {"type", "children"},
    CONDITION: {"type", "key", "negated"},
    TASK: {"type", "action", "param"},
}


def to_json(tree: BtNode) -> dict[str, Any]:
    """Export a tree as a versioned deployment document."""

    def node_doc(node: BtNode) -> dict[str, Any]:
        if node.kind in COMPOSITE_KINDS:
            return {"type": node.kind, "children": [node_doc(c) for c in node.children]}
        if node.kind == CONDITION:
            return {"type": CONDITION, "key": node.key, "negated": node.negated}
        return {"type": TASK, "action": node.action, "param": node.param}

    return {"version": SCHEMA_VERSION, "root": node_doc(tree)}


def _ident_from(obj: Mapping[str, Any], name: str, pointer: str) -> str:
    value = obj.get(name)
    if not isinstance(value, str) or not _IDENT_RE.match(value):
        raise SchemaError(f"{pointer}/{name}", f"expected an identifier string for {name!r}")
    return value


def _node_from_json(obj: Any, pointer: str) -> BtNode:
    if not isinstance(obj, Mapping):
        raise SchemaError(pointer or "/", "node must be an object")
    kind = obj.get("type")
    if kind not in NODE_KINDS:
        raise SchemaError(f"{pointer}/type", f"expected one of {sorted(NODE_KINDS)}, got {kind!r}")
    extra = set(obj) - _FIELDS_BY_KIND[kind]
    if extra:
        raise SchemaError(f"{pointer}/{sorted(extra)[0]}", f"unexpected field on {kind}")
    if kind in COMPOSITE_KINDS:
        children = obj.get("children")
        if not isinstance(children, list) or not children:
            raise SchemaError(f"{pointer}/children", "composite needs a non-empty children array")
        parsed = tuple(_node_from_json(c, f"{pointer}/children/{i}") for i, c in enumerate(children))
        return BtNode(kind, children=parsed)
    if kind == CONDITION:
        key = _ident_from(obj, "key", pointer)
        negated = obj.get("negated", False)
        if not isinstance(negated, bool):
            raise SchemaError(f"{pointer}/negated", "negated must be a boolean")
        return BtNode(CONDITION, key=key, negated=negated)
    action = _ident_from(obj, "action", pointer)
    param = obj.get("param")
    if param is not None and (not isinstance(param, str) or not _IDENT_RE.match(param)):
        raise SchemaError(f"{pointer}/param", "param must be null or an identifier string")
    return BtNode(TASK, action=action, param=param)


def from_json(doc: Any) -> BtNode:
    """Load a tree from a deployment document (or a bare node object).

    Raises :class:`SchemaError` with a JSON-pointer path on the first violation.
    """
    if isinstance(doc, Mapping) and "root" in doc:
        if doc.get("version") != SCHEMA_VERSION:
            raise SchemaError("/version", f"expected version {SCHEMA_VERSION}")
        extra = set(doc) - {"version", "root"}
        if extra:
            raise SchemaError(f"/{sorted(extra)[0]}", "unexpected top-level field")
        return _node_from_json(doc["root"], "/root")
    return _node_from_json(doc, "")
