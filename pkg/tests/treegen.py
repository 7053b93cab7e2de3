"""Seeded random-tree generation shared by the test modules.

Trees produced here are valid by construction against the catalog handed in,
so round-trip and interpreter-equivalence suites can run at volume without
filtering. Kept independent of any generation code in the package on purpose:
this is the test-side source of cases, not a re-export.
"""

from __future__ import annotations

import random

from btarena import dsl

TEST_CATALOG = dsl.NodeCatalog(
    conditions={
        "has_enemy_in_view": "an enemy is visible",
        "has_known_enemy_location": "a last-known enemy position exists",
        "at_objective": "standing on an objective cell",
        "low_health": "health below half",
    },
    actions={
        "shoot": dsl.ActionSpec(("random_enemy_in_view", "nearest_enemy_in_view"), "engage a visible enemy"),
        "move_to": dsl.ActionSpec(("random_enemy_location", "nearest_enemy_location", "objective_location"), "navigate"),
        "wait": dsl.ActionSpec((), "do nothing this tick"),
        "idle": dsl.ActionSpec((), "hold position"),
    },
)


def random_leaf(rng: random.Random, catalog: dsl.NodeCatalog) -> dsl.BtNode:
    if rng.random() < 0.5:
        key = rng.choice(sorted(catalog.conditions))
        return dsl.condition(key, negated=rng.random() < 0.3)
    action = rng.choice(sorted(catalog.actions))
    params = catalog.actions[action].params
    param = rng.choice(params) if params and rng.random() < 0.7 else None
    return dsl.task(action, param)


def random_tree(
    rng: random.Random,
    catalog: dsl.NodeCatalog = TEST_CATALOG,
    max_depth: int = 4,
    max_children: int = 4,
) -> dsl.BtNode:
    """A random valid tree of bounded depth. Root is always a composite."""

    def build(depth: int) -> dsl.BtNode:
        if depth >= max_depth or (depth > 1 and rng.random() < 0.4):
            return random_leaf(rng, catalog)
        kind = rng.choice((dsl.SELECTOR, dsl.SEQUENCE))
        count = rng.randint(1, max_children)
        children = tuple(build(depth + 1) for _ in range(count))
        return dsl.BtNode(kind, children=children)

    kind = rng.choice((dsl.SELECTOR, dsl.SEQUENCE))
    count = rng.randint(1, max_children)
    return dsl.BtNode(kind, children=tuple(build(2) for _ in range(count)))


def random_bytes_text(rng: random.Random, max_len: int = 120) -> str:
    """Arbitrary text for fuzzing the parser, biased toward DSL-ish bytes."""
    n = rng.randint(0, max_len)
    if rng.random() < 0.5:
        alphabet = "selctorquna:_ \n\t#0123456789xyz"
        return "".join(rng.choice(alphabet) for _ in range(n))
    raw = bytes(rng.randrange(256) for _ in range(n))
    return raw.decode("utf-8", errors="replace")
