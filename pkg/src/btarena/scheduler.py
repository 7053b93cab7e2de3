"""Meta-policy over a library of compiled trees.

A small classifier looks at aggregate scenario features (team counts,
distances, health/ammo, objective possession) and picks which tree from a
fixed library an agent should run. The chosen tree executes as an option: it
keeps control until its root finishes or a review boundary arrives and the
classifier's argmax has moved elsewhere.

Training is supervised: each library tree is scored in each scenario, the
per-scenario winner becomes the label for every observation gathered there,
and a two-layer net fits the labels by cross-entropy.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np

from . import dsl, fps
from .arena import (
    MAX_HEALTH,
    START_AMMO,
    Action,
    GameMetrics,
    MapSpec,
    make_world,
    observe,
    parse_map,
    run_episode,
    step,
)
from .btree import Blackboard, CompiledPolicy, TickStatus, compile_tree
from .geom import cell_of
from .neural import NetParams, forward, init_params, load_params
from .search import AGENT_METRICS

SCENARIO_FEATURE_DIM = 12
DEFAULT_REVIEW_PERIOD = 25
_COUNT_CAP = 8.0  # living-count features saturate here


class SchedulerError(ValueError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


# ---------------------------------------------------------------------------
# the library


@dataclass(frozen=True)
class LibraryEntry:
    description: str
    tree: dsl.BtNode
    build: Callable[[int], CompiledPolicy]  # seed -> fresh policy instance


@dataclass(frozen=True)
class PolicyLibrary:
    entries: tuple[LibraryEntry, ...]

    def __post_init__(self) -> None:
        if not self.entries:
            raise SchedulerError("empty-library", "a library needs at least one tree")
        names = [e.description for e in self.entries]
        if len(set(names)) != len(names):
            raise SchedulerError("duplicate-description", "descriptions must be unique")

    def __len__(self) -> int:
        return len(self.entries)


def make_library(
    specs: Sequence[tuple[str, str | dsl.BtNode]],
    *,
    catalog: dsl.NodeCatalog | None = None,
    table=None,
) -> PolicyLibrary:
    """Library from (description, tree text or node) pairs, one shared binding."""
    catalog = catalog or fps.CATALOG
    table = table or fps.rule_bindings()
    entries = []
    for description, tree in specs:
        node = dsl.parse(tree) if isinstance(tree, str) else tree
        errors = [d for d in dsl.validate(node, catalog) if d.severity == "error"]
        if errors:
            raise SchedulerError("invalid-tree", f"{description}: {errors[0]}")

        def build(seed: int, _node=node) -> CompiledPolicy:
            return compile_tree(_node, catalog, table, deterministic=True, seed=seed)

        entries.append(LibraryEntry(description, node, build))
    return PolicyLibrary(tuple(entries))


def load_library(path: str | Path, *, catalog: dsl.NodeCatalog | None = None) -> PolicyLibrary:
    """Manifest: JSON array of {"description", "tree": <tree doc>, "weights"?}.

    Entries with a weights path get neural move_to bindings from that file
    (resolved relative to the manifest); the rest run scripted handlers.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise SchedulerError("bad-manifest", f"{path}: {exc}") from exc
    if not isinstance(doc, list) or not doc:
        raise SchedulerError("bad-manifest", "manifest must be a non-empty JSON array")
    catalog = catalog or fps.CATALOG
    entries = []
    for i, item in enumerate(doc):
        if not isinstance(item, Mapping) or "description" not in item or "tree" not in item:
            raise SchedulerError("bad-manifest", f"entry {i} needs description and tree")
        tree = dsl.from_json(item["tree"])
        if item.get("weights"):
            table = fps.neural_bindings(load_params(path.parent / item["weights"]))
        else:
            table = fps.rule_bindings()

        def build(seed: int, _tree=tree, _table=table) -> CompiledPolicy:
            return compile_tree(_tree, catalog, _table, deterministic=True, seed=seed)

        entries.append(LibraryEntry(str(item["description"]), tree, build))
    return PolicyLibrary(tuple(entries))


# ---------------------------------------------------------------------------
# features and selection


def scenario_features(obs) -> np.ndarray:
    """Twelve aggregates of one observation, each clipped to [-1, 1]."""
    diag = math.hypot(obs.width, obs.height)
    px, py = obs.position

    def norm_dist(points) -> tuple[float, float]:
        if not points:
            return 1.0, 1.0
        d = [math.dist((px, py), p) / diag for p in points]
        return float(np.mean(d)), float(min(d))

    visible = [pos for _, pos in obs.visible_enemies]
    known = [(cx + 0.5, cy + 0.5) for cx, cy in obs.known_enemies.values()]
    allies = [pos for _, pos in obs.allies]
    objectives = [(cx + 0.5, cy + 0.5) for cx, cy in obs.objectives]
    vis_mean, _ = norm_dist(visible)
    known_mean, known_min = norm_dist(known)
    ally_mean, _ = norm_dist(allies) if allies else (0.0, 0.0)
    obj_mean, obj_min = norm_dist(objectives)
    own_cells = {obs.cell} | {cell_of(x, y) for x, y in allies}
    holding = 1.0 if any(c in obs.objectives for c in own_cells) else 0.0
    feats = np.array(
        [
            (len(allies) + (1.0 if obs.alive else 0.0)) / _COUNT_CAP,
            len(visible) / _COUNT_CAP,
            len(known) / _COUNT_CAP,
            obs.health / MAX_HEALTH,
            min(obs.ammo, START_AMMO) / START_AMMO,
            vis_mean,
            known_mean,
            known_min,
            ally_mean,
            obj_min,
            holding,
            1.0 if visible else 0.0,
        ],
        dtype=np.float64,
    )
    return np.clip(feats, -1.0, 1.0)


@dataclass(frozen=True)
class SchedulerParams:
    net: NetParams
    feature_dim: int = SCENARIO_FEATURE_DIM


def select_from_features(params: SchedulerParams, library: PolicyLibrary, feats: np.ndarray) -> int:
    if len(library) == 1:
        return 0
    net = params.net
    if net.w1.shape[1] != feats.shape[0] or net.w2.shape[0] != len(library):
        raise SchedulerError(
            "dim-mismatch",
            f"net maps {net.w1.shape[1]} features to {net.w2.shape[0]} trees; "
            f"got {feats.shape[0]} features and a library of {len(library)}",
        )
    return int(np.argmax(forward(net, feats)))


def select(params: SchedulerParams, library: PolicyLibrary, obs) -> int:
    """Argmax tree index for one observation; ties go to the lowest index."""
    return select_from_features(params, library, scenario_features(obs))


# ---------------------------------------------------------------------------
# switching


@dataclass(frozen=True)
class SwitchPolicy:
    review_period: int = DEFAULT_REVIEW_PERIOD

    def __post_init__(self) -> None:
        if self.review_period < 1:
            raise SchedulerError("bad-arg", "review period must be at least 1 tick")


@dataclass(frozen=True)
class SwitchEvent:
    tick: int
    agent: str
    from_index: int
    to_index: int


class _ScheduledPolicy:
    """Duck-typed policy: forwards ticks to the currently selected tree.

    Re-selection happens when the running tree's root returned Success or
    Failure, or at review boundaries when the argmax moved. The outgoing
    instance is reset on every switch; the blackboard is shared and kept.
    """

    def __init__(self, params, library, switch, agent_id, seed, select_fn):
        self._params = params
        self._library = library
        self._switch = switch
        self._agent = agent_id
        self._select_fn = select_fn
        self._instances = [entry.build(seed) for entry in library.entries]
        self._current: int | None = None
        self._since_review = 0
        self._last_status: TickStatus | None = None
        self.log: list[SwitchEvent] = []
        self.selections = 0

    def reset(self, bb: Blackboard | None = None) -> None:
        for instance in self._instances:
            instance.reset()
        if bb is not None:
            bb.clear()
        self._current = None
        self._since_review = 0
        self._last_status = None
        self.log.clear()
        self.selections = 0

    def _choose(self, obs) -> int:
        self.selections += 1
        self._since_review = 0
        return self._select_fn(self._params, self._library, obs)

    def tick(self, obs, bb: Blackboard):
        if self._current is None:
            self._current = self._choose(obs)
        elif (
            self._last_status in (TickStatus.SUCCESS, TickStatus.FAILURE)
            or self._since_review >= self._switch.review_period
        ):
            choice = self._choose(obs)
            if choice != self._current:
                self._instances[self._current].reset()
                self.log.append(SwitchEvent(obs.tick, self._agent, self._current, choice))
                self._current = choice
        status, action = self._instances[self._current].tick(obs, bb)
        self._last_status = status
        self._since_review += 1
        return status, action


def run_scheduled_episode(
    params: SchedulerParams,
    library: PolicyLibrary,
    switch: SwitchPolicy,
    spec: MapSpec | str,
    seed: int,
    *,
    opponent: str | dsl.BtNode = "task: wait\n",
    opponent_table=None,
    max_ticks: int = 200,
    respawns: bool = True,
    select_fn=select,
) -> tuple[GameMetrics, list[SwitchEvent]]:
    """Team A runs the scheduler, team B runs a fixed opponent tree."""
    if isinstance(spec, str):
        spec = parse_map(spec)
    opp_tree = dsl.parse(opponent) if isinstance(opponent, str) else opponent
    opp_table = opponent_table or fps.rule_bindings()
    policies: dict[str, Any] = {}
    wrappers = []
    for i in range(len(spec.spawns["A"])):
        wrapper = _ScheduledPolicy(params, library, switch, f"A{i}", seed * 31 + i, select_fn)
        policies[f"A{i}"] = wrapper
        wrappers.append(wrapper)
    for i in range(len(spec.spawns["B"])):
        policies[f"B{i}"] = compile_tree(
            opp_tree, fps.CATALOG, opp_table, deterministic=True, seed=seed * 31 + 17 + i
        )
    metrics, _ = run_episode(policies, spec, seed=seed, max_ticks=max_ticks, respawns=respawns)
    log = sorted(
        (event for w in wrappers for event in w.log), key=lambda e: (e.tick, e.agent)
    )
    return metrics, log


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class Scenario:
    name: str
    map_text: str
    opponent: str = "task: wait\n"
    objective: str = "kills"

    def __post_init__(self) -> None:
        parse_map(self.map_text)
        dsl.parse(self.opponent)
        if self.objective not in AGENT_METRICS:
            raise SchedulerError("bad-objective", f"unknown metric {self.objective!r}")


@dataclass(frozen=True)
class SchedulerConfig:
    hidden: int = 16
    lr: float = 0.2
    iterations: int = 300
    episodes: int = 3  # per (scenario, tree) pair
    max_ticks: int = 200
    seed: int = 0

    def __post_init__(self) -> None:
        if min(self.hidden, self.iterations, self.episodes, self.max_ticks) < 1 or self.lr <= 0:
            raise SchedulerError("bad-config", "hidden/iterations/episodes/max_ticks/lr out of range")


@dataclass
class LabelSet:
    features: np.ndarray  # (rows, SCENARIO_FEATURE_DIM)
    labels: np.ndarray  # (rows,) best library index per row's scenario
    rewards: np.ndarray  # (scenarios, entries) mean objective
    scenario_index: np.ndarray  # (rows,)


def _collect_episode(policies, spec, seed, max_ticks):
    """run_episode's loop, additionally harvesting team-A feature rows."""
    world = make_world(spec, seed)
    boards = {aid: Blackboard() for aid in world.agents}
    for aid, policy in policies.items():
        policy.reset(boards[aid])
    rows = []
    for _ in range(max_ticks):
        actions: dict[str, Action] = {}
        for aid in sorted(world.agents):
            if not world.agents[aid].alive:
                continue
            obs = observe(world, aid)
            if aid.startswith("A"):
                rows.append(scenario_features(obs))
            _, action = policies[aid].tick(obs, boards[aid])
            actions[aid] = action if isinstance(action, Action) else Action.wait()
        step(world, actions)
    world.metrics.episode_length = world.tick
    return np.array(rows), world.metrics


def _fixed_policies(spec, entry: LibraryEntry, opponent, seed):
    policies = {f"A{i}": entry.build(seed * 31 + i) for i in range(len(spec.spawns["A"]))}
    table = fps.rule_bindings()
    opp = dsl.parse(opponent)
    for i in range(len(spec.spawns["B"])):
        policies[f"B{i}"] = compile_tree(
            opp, fps.CATALOG, table, deterministic=True, seed=seed * 31 + 17 + i
        )
    return policies


def label_scenarios(
    library: PolicyLibrary, scenarios: Sequence[Scenario], config: SchedulerConfig
) -> LabelSet:
    """Run every tree in every scenario; the per-scenario argmax labels every
    observation row harvested there."""
    if not scenarios:
        raise SchedulerError("bad-config", "at least one scenario required")
    rewards = np.zeros((len(scenarios), len(library)))
    per_scenario_rows: list[list[np.ndarray]] = [[] for _ in scenarios]
    for si, scenario in enumerate(scenarios):
        spec = parse_map(scenario.map_text)
        for li, entry in enumerate(library.entries):
            totals = []
            for e in range(config.episodes):
                seed = config.seed + 101 * si + e
                rows, metrics = _collect_episode(
                    _fixed_policies(spec, entry, scenario.opponent, seed),
                    spec,
                    seed,
                    config.max_ticks,
                )
                totals.append(metrics.team_total("A", scenario.objective))
                if len(rows):
                    per_scenario_rows[si].append(rows)
            rewards[si, li] = float(np.mean(totals))
    labels_per_scenario = np.argmax(rewards, axis=1)
    features = np.concatenate(
        [np.concatenate(rows) for rows in per_scenario_rows if rows], axis=0
    )
    labels = np.concatenate(
        [
            np.full(sum(len(r) for r in rows), labels_per_scenario[si], dtype=np.int64)
            for si, rows in enumerate(per_scenario_rows)
            if rows
        ]
    )
    scenario_index = np.concatenate(
        [
            np.full(sum(len(r) for r in rows), si, dtype=np.int64)
            for si, rows in enumerate(per_scenario_rows)
            if rows
        ]
    )
    return LabelSet(features=features, labels=labels, rewards=rewards, scenario_index=scenario_index)


def _batch_logits(net: NetParams, x: np.ndarray) -> np.ndarray:
    hidden = np.tanh(x @ net.w1.T + net.b1)
    return hidden @ net.w2.T + net.b2


def _fit_cross_entropy(x: np.ndarray, y: np.ndarray, out_dim: int, config: SchedulerConfig) -> NetParams:
    rng = np.random.default_rng(config.seed)
    net = init_params(x.shape[1], config.hidden, out_dim, rng)
    w1, b1 = net.w1.astype(np.float64), net.b1.astype(np.float64)
    w2, b2 = net.w2.astype(np.float64), net.b2.astype(np.float64)
    onehot = np.eye(out_dim)[y]
    for _ in range(config.iterations):
        hidden = np.tanh(x @ w1.T + b1)
        logits = hidden @ w2.T + b2
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        grad = (probs - onehot) / len(x)
        gw2, gb2 = grad.T @ hidden, grad.sum(axis=0)
        dh = (grad @ w2) * (1.0 - hidden**2)
        gw1, gb1 = dh.T @ x, dh.sum(axis=0)
        w1 -= config.lr * gw1
        b1 -= config.lr * gb1
        w2 -= config.lr * gw2
        b2 -= config.lr * gb2
    return NetParams(
        w1=w1.astype(np.float32),
        b1=b1.astype(np.float32),
        w2=w2.astype(np.float32),
        b2=b2.astype(np.float32),
    )


def train_scheduler(
    library: PolicyLibrary,
    scenarios: Sequence[Scenario],
    config: SchedulerConfig,
    *,
    labelset: LabelSet | None = None,
) -> SchedulerParams:
    """Supervised fit of the selection net; reproducible by config seed."""
    if labelset is None:
        labelset = label_scenarios(library, scenarios, config)
    if len(np.unique(labelset.labels)) < 2:
        warnings.warn(
            "no-selection-signal: one tree wins every scenario", RuntimeWarning, stacklevel=2
        )
    net = _fit_cross_entropy(labelset.features, labelset.labels, len(library), config)
    return SchedulerParams(net=net)


def selection_accuracy(params: SchedulerParams, labelset: LabelSet) -> float:
    logits = _batch_logits(params.net, labelset.features)
    return float(np.mean(np.argmax(logits, axis=1) == labelset.labels))


# ---------------------------------------------------------------------------
# suite evaluation


@dataclass
class SuiteReport:
    scheduled: np.ndarray  # (scenarios,) mean reward with the scheduler
    fixed: np.ndarray  # (scenarios, entries) mean reward per fixed tree
    switch_counts: np.ndarray  # (scenarios,) mean switches per episode

    @property
    def scheduled_mean(self) -> float:
        return float(np.mean(self.scheduled))

    @property
    def fixed_means(self) -> np.ndarray:
        return self.fixed.mean(axis=0)

    def dominates(self) -> bool:
        return bool(np.all(self.scheduled_mean > self.fixed_means))


def evaluate_suite(
    params: SchedulerParams,
    library: PolicyLibrary,
    switch: SwitchPolicy,
    scenarios: Sequence[Scenario],
    config: SchedulerConfig,
    *,
    labelset: LabelSet | None = None,
) -> SuiteReport:
    """Scheduled vs fixed-tree rewards on the same seeds the labels used."""
    if labelset is None:
        labelset = label_scenarios(library, scenarios, config)
    scheduled = np.zeros(len(scenarios))
    switch_counts = np.zeros(len(scenarios))
    for si, scenario in enumerate(scenarios):
        totals, switches = [], []
        for e in range(config.episodes):
            seed = config.seed + 101 * si + e
            metrics, log = run_scheduled_episode(
                params,
                library,
                switch,
                scenario.map_text,
                seed,
                opponent=scenario.opponent,
                max_ticks=config.max_ticks,
            )
            totals.append(metrics.team_total("A", scenario.objective))
            switches.append(len(log))
        scheduled[si] = float(np.mean(totals))
        switch_counts[si] = float(np.mean(switches))
    return SuiteReport(scheduled=scheduled, fixed=labelset.rewards, switch_counts=switch_counts)
