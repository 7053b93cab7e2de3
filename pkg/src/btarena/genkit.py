"""Prompt rendering and candidate-tree generation.

Two halves:

* A tiny template language (``{{ dotted.path }}`` interpolation plus
  ``{% if dotted.path %} ... {% endif %}`` blocks) with the stock prompt
  template and a context builder that embeds a node catalog's docs.
* Generators that turn a prompt into candidate DSL texts: ``remote`` posts
  to a chat-completion endpoint, ``mutate`` applies seeded grammar-preserving
  edits to a base tree so search runs stay hermetic and reproducible.
"""

from __future__ import annotations

import dataclasses
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np
import requests

from . import dsl


class GenKitError(ValueError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


class TemplateError(GenKitError):
    def __init__(self, code: str, message: str, pos: int, source: str):
        line = source.count("\n", 0, pos) + 1
        column = pos - (source.rfind("\n", 0, pos) + 1) + 1
        super().__init__(code, f"{line}:{column}: {message}")
        self.line, self.column = line, column


class GeneratorError(RuntimeError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


# ---------------------------------------------------------------------------
# template engine

_TAG = re.compile(r"\{\{|\{%")


def _lookup(context: Mapping[str, Any], path: str) -> Any:
    node: Any = context
    for part in path.split("."):
        if not isinstance(node, Mapping) or part not in node:
            return None
        node = node[part]
    return node


def _parse_tag(source: str, start: int, open_tok: str, close_tok: str) -> tuple[str, int]:
    end = source.find(close_tok, start)
    if end < 0:
        raise TemplateError("bad-syntax", f"unterminated {open_tok!r} tag", start, source)
    return source[start + 2 : end].strip(), end + 2


def render(template: str, context: Mapping[str, Any]) -> str:
    """Substitute every ``{{ path }}``; keep ``{% if path %}`` blocks only
    when the path resolves to a non-empty value. A newline directly after a
    block tag is swallowed so dropped blocks leave no blank lines behind."""
    out: list[str] = []
    emitting = [True]  # one entry per open if-block, plus the root
    pos = 0
    if_starts: list[int] = []
    while True:
        match = _TAG.search(template, pos)
        if match is None:
            if if_starts:
                raise TemplateError("unclosed-block", "missing {% endif %}", if_starts[-1], template)
            if all(emitting):
                out.append(template[pos:])
            return "".join(out)
        if all(emitting):
            out.append(template[pos : match.start()])
        if match.group() == "{{":
            path, pos = _parse_tag(template, match.start(), "{{", "}}")
            if not path:
                raise TemplateError("bad-syntax", "empty interpolation", match.start(), template)
            if all(emitting):
                value = _lookup(context, path)
                if value is None:
                    raise TemplateError("unbound-path", f"no value for {path!r}", match.start(), template)
                out.append(str(value))
        else:
            body, pos = _parse_tag(template, match.start(), "{%", "%}")
            if body == "endif":
                if not if_starts:
                    raise TemplateError("bad-syntax", "endif without if", match.start(), template)
                if_starts.pop()
                emitting.pop()
            elif body.startswith("if ") and len(body.split()) == 2:
                if_starts.append(match.start())
                emitting.append(bool(_lookup(context, body.split()[1])))
            else:
                raise TemplateError("bad-syntax", f"unknown block {body!r}", match.start(), template)
            if pos < len(template) and template[pos] == "\n":
                pos += 1  # trim the newline after block tags


# ---------------------------------------------------------------------------
# the stock prompt

DEFAULT_TEMPLATE = """\
# Task
You are a diligent AI programmer working on behavior trees design for game AI.
You use domain specific language (DSL) to behavior tree implementation.
Your goal is to implement the DSL given a specified tactic.

## Game Scenario
{{ instructions.scenarios.cs }}

## Available Nodes
You are also given a collection of existing basic nodes in the game.
{{ instructions.actions.selector }}
{{ instructions.actions.sequence }}
{{ instructions.actions.condition }}
{{ instructions.actions.param }}
{{ instructions.actions.action }}

## Tactics
{{ state.tactics }}

## DSL Format
{{ instructions.format.dsl_syntax }}

## Response
{{ instructions.format.dsl_nlu }}

{% if history.dsl_tree %}
### History Format Errors
Here's your last DSL implementation and its corresponding format problems, you should improve upon it and fix the format problems.

{{ history.dsl_tree }}
{{ history.message }}
{% endif %}
"""

_DSL_SYNTAX = """\
A behavior tree is plain text. Composite nodes end with a colon and their
children are indented exactly two spaces deeper; tabs are rejected. Leaves
are `condition: <key>` and `task: <action>` or `task: <action> <param>`.
A condition is negated by placing the line `condition: no` directly above it
at the same indentation. Emit exactly one tree."""

_DSL_NLU = """\
Reason step by step inside <think>...</think>. If you are improving on a
previous tree, state what you learned inside <reflection>...</reflection>.
Then output the complete DSL tree inside a fenced code block."""


def build_context(
    catalog: dsl.NodeCatalog,
    *,
    scenario: str,
    tactics: str,
    history_dsl: str | None = None,
    history_message: str | None = None,
) -> dict[str, Any]:
    """Context for DEFAULT_TEMPLATE; every catalog doc appears exactly once."""
    cond_lines = "\n".join(f"  - {k}: {doc}" for k, doc in sorted(catalog.conditions.items()))
    act_lines = "\n".join(f"  - {k}: {spec.doc}" for k, spec in sorted(catalog.actions.items()))
    param_lines = "\n".join(
        f"  - {k}: {' | '.join(spec.params) if spec.params else '(no parameter)'}"
        for k, spec in sorted(catalog.actions.items())
    )
    context: dict[str, Any] = {
        "instructions": {
            "scenarios": {"cs": scenario},
            "actions": {
                "selector": (
                    "- selector: ticks children left to right and returns the first"
                    " non-failure result; later children run only when earlier ones fail."
                ),
                "sequence": (
                    "- sequence: ticks children left to right and fails fast;"
                    " it succeeds only when every child succeeds."
                ),
                "condition": "- condition: <key> checks one observable fact. Available conditions:\n" + cond_lines,
                "param": "Task parameters pick targets at runtime. Allowed per action:\n" + param_lines,
                "action": "- task: <action> [param] runs one primitive behavior. Available actions:\n" + act_lines,
            },
            "format": {"dsl_syntax": _DSL_SYNTAX, "dsl_nlu": _DSL_NLU},
        },
        "state": {"tactics": tactics},
        "history": {},
    }
    if history_dsl is not None:
        context["history"] = {"dsl_tree": history_dsl, "message": history_message or ""}
    return context


# ---------------------------------------------------------------------------
# completion parsing

_FENCE = re.compile(r"```[^\n]*\n(.*?)```", re.DOTALL)
_DSL_LINE = re.compile(r"^(?:  )*(?:selector:|sequence:|condition: *\S+|task: *\S+(?: +\S+)?) *$")


def _tag_spans(completion: str, tag: str) -> list[tuple[int, int, int, int]]:
    opens = [m.start() for m in re.finditer(re.escape(f"<{tag}>"), completion)]
    closes = [m.start() for m in re.finditer(re.escape(f"</{tag}>"), completion)]
    if len(opens) != len(closes) or any(o >= c for o, c in zip(opens, closes)):
        raise GenKitError("malformed-tags", f"unbalanced <{tag}> tags")
    return [(o, o + len(tag) + 2, c, c + len(tag) + 3) for o, c in zip(opens, closes)]


def _mask_spans(completion: str, spans: list[tuple[int, int]]) -> str:
    """Blank out tagged regions so DSL extraction never reads inside them."""
    chars = list(completion)
    for begin, end in spans:
        for i in range(begin, end):
            if chars[i] != "\n":
                chars[i] = " "
    return "".join(chars)


def _extract_dsl(masked: str) -> str | None:
    fence = _FENCE.search(masked)
    if fence and fence.group(1).strip():
        return fence.group(1)
    lines = masked.split("\n")
    best: tuple[int, int] | None = None  # (length, start)
    run = 0
    for i, line in enumerate(lines + [""]):
        if line.strip() and _DSL_LINE.match(line):
            run += 1
        else:
            if run and (best is None or run > best[0]):
                best = (run, i - run)
            run = 0
    if best is None:
        return None
    return "\n".join(lines[best[1] : best[1] + best[0]]) + "\n"


def extract_tagged(completion: str) -> dict[str, str | None]:
    """First ``<reflection>`` and ``<think>`` spans plus the DSL block.

    Tags must be absent, or closed and either disjoint or fully nested;
    anything else raises ``malformed-tags``.
    """
    spans: dict[str, list] = {t: _tag_spans(completion, t) for t in ("reflection", "think")}
    regions = [(s[0], s[3]) for lst in spans.values() for s in lst]
    for i, (a0, a1) in enumerate(regions):
        for b0, b1 in regions[i + 1 :]:
            disjoint = a1 <= b0 or b1 <= a0
            nested = (a0 < b0 and b1 < a1) or (b0 < a0 and a1 < b1)
            if not (disjoint or nested):
                raise GenKitError("malformed-tags", "overlapping tag spans")
    out: dict[str, str | None] = {}
    for tag in ("reflection", "think"):
        first = spans[tag][0] if spans[tag] else None
        out[tag] = completion[first[1] : first[2]].strip() if first else ""
    out["dsl"] = _extract_dsl(_mask_spans(completion, regions))
    return out


# ---------------------------------------------------------------------------
# generators

MUTATION_WEIGHTS: Mapping[str, float] = {
    "swap": 0.20,       # reorder two siblings
    "re-key": 0.30,     # different condition key
    "insert": 0.20,     # add a guarded sequence
    "delete": 0.15,     # drop a removable subtree
    "negate": 0.10,     # toggle a condition
    "re-param": 0.05,   # different task parameter
}


@dataclass(frozen=True)
class GeneratorConfig:
    mode: str = "mutate"
    url: str | None = None  # remote; falls back to $GENERATOR_URL
    model: str = "coder-32b"
    temperature: float = 0.7
    max_tokens: int = 1024
    timeout: float = 30.0
    retries: int = 2
    seed: int = 0
    weights: Mapping[str, float] = field(default_factory=lambda: dict(MUTATION_WEIGHTS))

    def __post_init__(self) -> None:
        if self.mode not in ("remote", "mutate"):
            raise GenKitError("bad-config", f"unknown mode {self.mode!r}")
        if not 0.0 <= self.temperature <= 2.0:
            raise GenKitError("bad-config", "temperature must be within [0, 2]")
        if self.retries < 0 or self.timeout <= 0 or self.max_tokens < 1:
            raise GenKitError("bad-config", "retries/timeout/max_tokens out of range")
        if set(self.weights) - set(MUTATION_WEIGHTS) or sum(self.weights.values()) <= 0:
            raise GenKitError("bad-config", "bad mutation weights")


@dataclass(frozen=True)
class GenerationRecord:
    prompt: str
    completion: str
    dsl: str | None
    reflection: str
    think: str
    latency: float
    mode: str
    flags: tuple[str, ...] = ()


def _record(prompt: str, completion: str, latency: float, mode: str) -> GenerationRecord:
    flags: tuple[str, ...] = ()
    try:
        parts = extract_tagged(completion)
    except GenKitError:
        parts = {"reflection": "", "think": "", "dsl": _extract_dsl(completion)}
        flags += ("malformed-tags",)
    if parts["dsl"] is None:
        flags += ("no-dsl",)
    return GenerationRecord(
        prompt=prompt,
        completion=completion,
        dsl=parts["dsl"],
        reflection=parts["reflection"] or "",
        think=parts["think"] or "",
        latency=latency,
        mode=mode,
        flags=flags,
    )


# -- remote -----------------------------------------------------------------


def _remote_generate(config: GeneratorConfig, prompt: str, n: int) -> list[GenerationRecord]:
    url = config.url or os.environ.get("GENERATOR_URL")
    if not url:
        raise GeneratorError("generator-unavailable", "no endpoint: set url or GENERATOR_URL")
    headers = {"Content-Type": "application/json"}
    key = os.environ.get("GENERATOR_KEY")
    if key:
        headers["Authorization"] = f"Bearer {key}"
    body = {
        "model": config.model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": config.temperature,
        "max_tokens": config.max_tokens,
        "n": 1,
    }

    def one(_: int) -> tuple[str, float]:
        last: Exception | None = None
        for _attempt in range(config.retries + 1):
            start = time.perf_counter()
            try:
                resp = requests.post(url, json=body, headers=headers, timeout=config.timeout)
                resp.raise_for_status()
                content = resp.json()["choices"][0]["message"]["content"]
                if not isinstance(content, str):
                    raise ValueError("non-string content")
                return content, time.perf_counter() - start
            except (requests.RequestException, KeyError, IndexError, TypeError, ValueError) as exc:
                last = exc
        raise GeneratorError("generator-unavailable", f"{url}: {last}")

    with ThreadPoolExecutor(max_workers=min(n, 8)) as pool:
        results = list(pool.map(one, range(n)))  # request order preserved
    return [_record(prompt, content, latency, "remote") for content, latency in results]


# -- mutate -----------------------------------------------------------------


def _paths(tree: dsl.BtNode) -> list[tuple[tuple[int, ...], dsl.BtNode]]:
    found: list[tuple[tuple[int, ...], dsl.BtNode]] = []

    def rec(node: dsl.BtNode, path: tuple[int, ...]) -> None:
        found.append((path, node))
        for i, child in enumerate(node.children):
            rec(child, path + (i,))

    rec(tree, ())
    return found


def _rebuild(tree: dsl.BtNode, path: tuple[int, ...], repl) -> dsl.BtNode:
    """Replace the node at ``path`` with repl(node); repl may return a list
    to splice several siblings in, or an empty list to drop the node."""
    if not path:
        out = repl(tree)
        if isinstance(out, list):
            raise ValueError("cannot splice at the root")
        return out
    i = path[0]
    new_child = _rebuild(tree.children[i], path[1:], repl) if len(path) > 1 else repl(tree.children[i])
    spliced = new_child if isinstance(new_child, list) else [new_child]
    children = tuple(tree.children[:i]) + tuple(spliced) + tuple(tree.children[i + 1 :])
    return dataclasses.replace(tree, children=children)


def _pick(rng: np.random.Generator, items: list):
    return items[int(rng.integers(len(items)))]


def _op_swap(tree, catalog, rng):
    spots = [p for p, n in _paths(tree) if n.kind in dsl.COMPOSITE_KINDS and len(n.children) >= 2]
    if not spots:
        return None
    path = _pick(rng, spots)

    def swap(node):
        i = int(rng.integers(len(node.children) - 1))
        kids = list(node.children)
        kids[i], kids[i + 1] = kids[i + 1], kids[i]
        return dataclasses.replace(node, children=tuple(kids))

    return _rebuild(tree, path, swap)


def _op_rekey(tree, catalog, rng):
    spots = [p for p, n in _paths(tree) if n.kind == dsl.CONDITION]
    keys = sorted(catalog.conditions)
    if not spots or len(keys) < 2:
        return None
    path = _pick(rng, spots)

    def rekey(node):
        return dataclasses.replace(node, key=_pick(rng, [k for k in keys if k != node.key]))

    return _rebuild(tree, path, rekey)


def _guarded_sequence(catalog, rng) -> dsl.BtNode:
    cond_key = _pick(rng, sorted(catalog.conditions))
    action = _pick(rng, sorted(catalog.actions))
    params = catalog.actions[action].params
    param = _pick(rng, list(params)) if params else None
    return dsl.sequence(dsl.condition(cond_key), dsl.task(action, param))


def _op_insert(tree, catalog, rng):
    if not catalog.conditions or not catalog.actions:
        return None
    spots = [p for p, n in _paths(tree) if n.kind in dsl.COMPOSITE_KINDS]
    if not spots:
        # leaf-only tree: grow a selector around it
        pair = [tree, _guarded_sequence(catalog, rng)]
        if rng.random() < 0.5:
            pair.reverse()
        return dsl.selector(*pair)
    path = _pick(rng, spots)
    new = _guarded_sequence(catalog, rng)

    def insert(node):
        at = int(rng.integers(len(node.children) + 1))
        kids = list(node.children)
        kids.insert(at, new)
        return dataclasses.replace(node, children=tuple(kids))

    return _rebuild(tree, path, insert)


def _op_delete(tree, catalog, rng):
    nodes = dict(_paths(tree))
    spots = [p for p in nodes if p and len(nodes[p[:-1]].children) >= 2]
    if not spots:
        return None
    return _rebuild(tree, _pick(rng, spots), lambda node: [])


def _op_negate(tree, catalog, rng):
    spots = [p for p, n in _paths(tree) if n.kind == dsl.CONDITION]
    if not spots:
        return None
    return _rebuild(
        tree, _pick(rng, spots), lambda node: dataclasses.replace(node, negated=not node.negated)
    )


def _op_reparam(tree, catalog, rng):
    def options(node):
        permitted = catalog.actions.get(node.action)
        return [p for p in permitted.params if p != node.param] if permitted else []

    spots = [p for p, n in _paths(tree) if n.kind == dsl.TASK and options(n)]
    if not spots:
        return None
    path = _pick(rng, spots)

    def reparam(node):
        return dataclasses.replace(node, param=_pick(rng, options(node)))

    return _rebuild(tree, path, reparam)


_OPS = {
    "swap": _op_swap,
    "re-key": _op_rekey,
    "insert": _op_insert,
    "delete": _op_delete,
    "negate": _op_negate,
    "re-param": _op_reparam,
}


def mutate_tree(
    tree: dsl.BtNode,
    catalog: dsl.NodeCatalog,
    rng: np.random.Generator,
    weights: Mapping[str, float] | None = None,
) -> dsl.BtNode | None:
    """One candidate: 1 or 2 weighted ops, valid against the catalog and not
    identical to the input. None when no applicable edit exists."""
    table = dict(MUTATION_WEIGHTS) if weights is None else {**dict.fromkeys(MUTATION_WEIGHTS, 0.0), **weights}
    names = sorted(table)
    weights_arr = np.array([table[n] for n in names])
    for _attempt in range(32):
        out = tree
        n_ops = 1 + int(rng.random() < 0.5)
        for _ in range(n_ops):
            name = names[int(rng.choice(len(names), p=weights_arr / weights_arr.sum()))]
            changed = _OPS[name](out, catalog, rng)
            if changed is not None:
                out = changed
        if out == tree:
            continue
        if any(d.severity == "error" for d in dsl.validate(out, catalog)):
            continue
        return out
    return None


def _mutate_generate(
    config: GeneratorConfig,
    prompt: str,
    n: int,
    catalog: dsl.NodeCatalog,
    base_tree: dsl.BtNode,
    salt: int,
) -> list[GenerationRecord]:
    rng = np.random.default_rng([config.seed, salt])
    texts: list[str] = []
    seen: set[str] = set()
    attempts = 0
    while len(texts) < n and attempts < 64 * n:
        attempts += 1
        mutant = mutate_tree(base_tree, catalog, rng, config.weights)
        if mutant is None:
            break
        text = dsl.to_canonical_dsl(mutant)
        if text in seen:
            continue
        seen.add(text)
        texts.append(text)
    while len(texts) < n and texts:
        texts.append(texts[len(texts) % len(seen)])  # tiny neighborhoods: allow repeats
    if not texts:
        raise GeneratorError("generator-unavailable", "base tree admits no valid mutation")
    return [_record(prompt, text, 0.0, "mutate") for text in texts]


def generate(
    config: GeneratorConfig,
    prompt: str,
    n: int,
    *,
    catalog: dsl.NodeCatalog | None = None,
    base_tree: dsl.BtNode | None = None,
    salt: int = 0,
) -> list[GenerationRecord]:
    """n candidate completions for ``prompt``.

    Remote mode needs a reachable endpoint; mutate mode needs ``catalog`` and
    ``base_tree`` (the best tree so far, or a seed tree) and is keyed on
    ``(config.seed, salt)`` so every call site gets its own stream.
    """
    if n < 1:
        raise GenKitError("bad-config", "n must be >= 1")
    if config.mode == "remote":
        return _remote_generate(config, prompt, n)
    if catalog is None or base_tree is None:
        raise GenKitError("bad-config", "mutate mode needs catalog and base_tree")
    return _mutate_generate(config, prompt, n, catalog, base_tree, salt)
