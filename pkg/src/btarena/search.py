"""Improvement loop over candidate trees.

Each iteration renders one prompt per retained parent, samples N candidate
trees, validates them (invalid ones are never run; their diagnostics are fed
back through the prompt's history section), scores the valid ones over E
seeded episodes per map, and keeps the K best seen so far. Elitism makes the
best-ever reward non-decreasing, so the loop's reward curve can be asserted,
not just eyeballed.

Feedback to the generator is text: a deterministic rendering of the game
metrics (worst regression first) plus a five-dimension tactical readout of
the best replay.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from . import dsl, fps, genkit
from .arena import GameMetrics, MapSpec, ReplayTrace, parse_map, run_episode
from .btree import HandlerTable, compile_tree
from .genkit import GeneratorConfig, GeneratorError
from .geom import cell_of

AGENT_METRICS = ("kills", "deaths", "shots", "hits", "damage_dealt", "objective_ticks")


class SearchError(ValueError):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class SearchConfig:
    """Loop shape, evaluation scenario, and the objective being maximized.

    ``objective`` is a team metric name, ``"time_between_kills"`` (scored as
    oracle_time/achieved capped at 1), or a {metric: weight} bundle.
    """

    maps: tuple[str, ...]  # map texts, parsed once at evaluation time
    n: int = 8
    k: int = 2
    iterations: int = 10
    episodes: int = 5  # seeded episodes per map per candidate
    objective: str | Mapping[str, float] = "kills"
    opponent: str = "task: wait\n"
    seed_tree: str = "task: wait\n"
    seed: int = 0
    max_ticks: int = 200
    respawns: bool = True
    oracle_time: float = 50.0  # reference for the time_between_kills score
    scenario: str = "Two teams fight in a walled grid arena; team A is yours."
    tactics: str = "Maximize the stated objective."

    def __post_init__(self) -> None:
        if not self.maps:
            raise SearchError("bad-config", "at least one map required")
        if not 1 <= self.k <= self.n:
            raise SearchError("bad-config", "need 1 <= k <= n")
        if self.episodes < 3:
            raise SearchError("bad-config", "need at least 3 evaluation episodes")
        if self.iterations < 1 or self.max_ticks < 1 or self.oracle_time <= 0:
            raise SearchError("bad-config", "iterations/max_ticks/oracle_time out of range")
        if isinstance(self.objective, str):
            if self.objective not in AGENT_METRICS and self.objective not in (
                "time_between_kills",
                "tactical",
            ):
                raise SearchError("bad-objective", f"unknown metric {self.objective!r}")
        else:
            for name in self.objective:
                if name not in AGENT_METRICS:
                    raise SearchError("bad-objective", f"unknown metric {name!r}")
        for text in self.maps:
            parse_map(text)
        for text in (self.opponent, self.seed_tree):
            dsl.parse(text)


def config_hash(config: SearchConfig) -> str:
    doc: dict[str, Any] = {
        "maps": list(config.maps),
        "n": config.n,
        "k": config.k,
        "iterations": config.iterations,
        "episodes": config.episodes,
        "objective": config.objective
        if isinstance(config.objective, str)
        else sorted(config.objective.items()),
        "opponent": config.opponent,
        "seed_tree": config.seed_tree,
        "seed": config.seed,
        "max_ticks": config.max_ticks,
        "respawns": config.respawns,
        "oracle_time": config.oracle_time,
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    reward: float
    fallback: bool  # objective undefined everywhere; secondary ordering used
    metrics: tuple[GameMetrics, ...]
    traces: tuple[ReplayTrace, ...]


def _episode_objective(
    metrics: GameMetrics, trace: ReplayTrace, config: SearchConfig, team: str = "A"
) -> float | None:
    if isinstance(config.objective, Mapping):
        return sum(w * metrics.team_total(team, name) for name, w in config.objective.items())
    if config.objective == "tactical":  # composite: mean of the five replay scores
        return float(np.mean(list(tactical_analysis(trace, team).scores().values())))
    if config.objective == "time_between_kills":
        gap = metrics.time_between_kills(team)
        return None if gap is None or gap <= 0 else min(1.0, config.oracle_time / gap)
    return float(metrics.team_total(team, config.objective))


def _build_team(
    spec: MapSpec, team: str, tree: dsl.BtNode, table: HandlerTable, base_seed: int
):
    return {
        f"{team}{i}": compile_tree(tree, fps.CATALOG, table, deterministic=True, seed=base_seed + i)
        for i in range(len(spec.spawns[team]))
    }


def evaluate(
    tree: dsl.BtNode | str,
    config: SearchConfig,
    *,
    table: HandlerTable | None = None,
    jobs: int = 1,
) -> EvalResult:
    """Mean objective for team A over episodes seeds x maps; deterministic.

    When the objective is undefined on every episode (time_between_kills with
    under two kills), the reward falls back to a strictly lower secondary
    ordering: -1 + mean_kills*1e-3 + mean_damage*1e-9.
    """
    if isinstance(tree, str):
        tree = dsl.parse(tree)
    table = table or fps.rule_bindings()
    opponent = dsl.parse(config.opponent)
    specs = [parse_map(text) for text in config.maps]

    def run_one(args: tuple[int, int]) -> tuple[GameMetrics, ReplayTrace]:
        mi, e = args
        seed = config.seed + 1009 * mi + e
        policies = _build_team(specs[mi], "A", tree, table, seed * 31)
        policies.update(_build_team(specs[mi], "B", opponent, table, seed * 31 + 17))
        return run_episode(
            policies, specs[mi], seed=seed, max_ticks=config.max_ticks, respawns=config.respawns
        )

    jobs_list = [(mi, e) for mi in range(len(specs)) for e in range(config.episodes)]
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(run_one, jobs_list))
    else:
        outcomes = [run_one(a) for a in jobs_list]

    metrics = tuple(m for m, _ in outcomes)
    traces = tuple(t for _, t in outcomes)
    scores = [
        s
        for m, tr in outcomes
        if (s := _episode_objective(m, tr, config)) is not None
    ]
    if scores:
        return EvalResult(float(np.mean(scores)), False, metrics, traces)
    mean_kills = float(np.mean([m.team_total("A", "kills") for m in metrics]))
    mean_damage = float(np.mean([m.team_total("A", "damage_dealt") for m in metrics]))
    return EvalResult(-1.0 + mean_kills * 1e-3 + mean_damage * 1e-9, True, metrics, traces)


# ---------------------------------------------------------------------------
# metrics narration


_LOWER_BETTER = frozenset({"deaths", "time_between_kills"})


def _metric_values(metrics: GameMetrics, team: str) -> dict[str, float | None]:
    out: dict[str, float | None] = {
        name: float(metrics.team_total(team, name)) for name in AGENT_METRICS
    }
    out["time_between_kills"] = metrics.time_between_kills(team)
    return out


def metrics_to_text(metrics: GameMetrics, baseline: GameMetrics | None = None, team: str = "A") -> str:
    """Deterministic prose for every team metric; with a baseline, lines are
    ordered worst regression first and say improved/regressed/no change."""
    values = _metric_values(metrics, team)
    names = list(values)

    def fmt(name: str, v: float | None) -> str:
        if v is None:
            return "not observed (fewer than 2 kills)"
        return f"{v:g}"

    if baseline is None:
        return "\n".join(f"{n.replace('_', ' ')}: {fmt(n, values[n])}" for n in names)

    base = _metric_values(baseline, team)

    def goodness(name: str) -> float:
        v, b = values[name], base[name]
        if v is None or b is None:  # observability changed; no ordering claim
            return 0.0
        delta = v - b
        return -delta if name in _LOWER_BETTER else delta

    lines = []
    for name in sorted(names, key=lambda n: (goodness(n), names.index(n))):
        label = name.replace("_", " ")
        v, b = values[name], base[name]
        if v == b or (v is None and b is None):
            lines.append(f"{label}: no change ({fmt(name, v)})")
        elif v is None or b is None:
            lines.append(f"{label}: was {fmt(name, b)}, now {fmt(name, v)}")
        elif goodness(name) > 0:
            lines.append(f"{label} improved from {fmt(name, b)} to {fmt(name, v)}")
        else:
            lines.append(f"{label} regressed from {fmt(name, b)} to {fmt(name, v)}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# tactical analysis


TACTICAL_DIMS = (
    "map_control",
    "adaptability",
    "team_coordination",
    "team_aggression",
    "goal_achievement",
)


@dataclass(frozen=True)
class TacticalReport:
    map_control: float
    adaptability: float
    team_coordination: float
    team_aggression: float
    goal_achievement: float
    justifications: Mapping[str, str]

    def scores(self) -> dict[str, float]:
        return {dim: getattr(self, dim) for dim in TACTICAL_DIMS}

    def to_text(self) -> str:
        return "\n".join(
            f"{dim.replace('_', ' ')}: {getattr(self, dim):.1f}/10 - {self.justifications[dim]}"
            for dim in TACTICAL_DIMS
        )


def _alive_positions(record, team: str) -> list[tuple[float, float]]:
    return [(x, y) for x, y, alive, t in record.agents.values() if alive and t == team]


def tactical_analysis(trace: ReplayTrace, team: str = "A") -> TacticalReport:
    """Programmatic scores in [0, 10] for one team of a replay."""
    if not trace.ticks:
        raise SearchError("empty-trace", "cannot analyze an empty trace")
    spec = trace.map
    enemy = "B" if team == "A" else "A"
    free = np.array(
        [
            (x + 0.5, y + 0.5)
            for y in range(spec.height)
            for x in range(spec.width)
            if (x, y) not in spec.obstacles
        ]
    )

    # map control: mean fraction of free cells closer to an own living agent
    def control(record) -> float:
        own = _alive_positions(record, team)
        theirs = _alive_positions(record, enemy)
        if not own:
            return 0.0
        if not theirs:
            return 1.0
        d_own = np.min(np.linalg.norm(free[:, None, :] - np.array(own)[None], axis=2), axis=1)
        d_their = np.min(np.linalg.norm(free[:, None, :] - np.array(theirs)[None], axis=2), axis=1)
        return float(np.mean((d_own < d_their) + 0.5 * np.isclose(d_own, d_their)))

    control_frac = float(np.mean([control(r) for r in trace.ticks]))

    # adaptability: verb-mix shift after the first damage event anywhere
    def verb_mix(records) -> np.ndarray | None:
        kinds = {"move": 0, "aim": 1, "fire": 2, "wait": 3}
        counts = np.zeros(4)
        for r in records:
            for aid, action in r.actions.items():
                if aid.startswith(team):
                    counts[kinds.get(action.get("kind", "wait"), 3)] += 1
        return counts / counts.sum() if counts.sum() else None

    first_hit = next((i for i, r in enumerate(trace.ticks) if any(e["kind"] == "hit" for e in r.events)), None)
    shift = 0.0
    if first_hit is not None:
        before, after = verb_mix(trace.ticks[: first_hit + 1]), verb_mix(trace.ticks[first_hit + 1 :])
        if before is not None and after is not None:
            shift = float(np.abs(before - after).sum() / 2.0)  # total variation

    # coordination: inverse pairwise teammate spread while the team is shooting
    spreads = []
    for r in trace.ticks:
        if not any(e["kind"] == "shot" and e["actor"].startswith(team) for e in r.events):
            continue
        own = _alive_positions(r, team)
        if len(own) < 2:
            continue
        dists = [
            math.dist(own[i], own[j]) for i in range(len(own)) for j in range(i + 1, len(own))
        ]
        spreads.append(float(np.mean(dists)))
    mean_spread = float(np.mean(spreads)) if spreads else None
    coordination = 10.0 / (1.0 + mean_spread) if mean_spread is not None else 0.0

    # aggression: shots per alive agent-tick plus closing-on-the-enemy rate
    shot_events = sum(
        1 for r in trace.ticks for e in r.events if e["kind"] == "shot" and e["actor"].startswith(team)
    )
    alive_ticks = sum(len(_alive_positions(r, team)) for r in trace.ticks)
    advance = 0
    advance_chances = 0
    for prev, cur in zip(trace.ticks, trace.ticks[1:]):
        enemies_prev = _alive_positions(prev, enemy)
        if not enemies_prev:
            continue
        for aid, (x, y, alive, t) in cur.agents.items():
            if t != team or not alive or aid not in prev.agents:
                continue
            px, py = prev.agents[aid][0], prev.agents[aid][1]
            before = min(math.dist((px, py), e) for e in enemies_prev)
            now = min(math.dist((x, y), e) for e in enemies_prev)
            advance_chances += 1
            advance += now < before - 1e-9
    shot_rate = shot_events / alive_ticks if alive_ticks else 0.0
    advance_rate = advance / advance_chances if advance_chances else 0.0
    aggression = (shot_rate + advance_rate) / 2.0

    # goal achievement: objective presence when the map has objectives,
    # otherwise the kill share
    if spec.objectives:
        held = sum(
            1
            for r in trace.ticks
            if any(
                alive and t == team and cell_of(x, y) in spec.objectives
                for x, y, alive, t in r.agents.values()
            )
        )
        goal = held / len(trace.ticks)
        goal_note = f"an agent held an objective on {held}/{len(trace.ticks)} ticks"
    else:
        own_kills = sum(
            1 for r in trace.ticks for e in r.events if e["kind"] == "kill" and e["actor"].startswith(team)
        )
        their_kills = sum(
            1 for r in trace.ticks for e in r.events if e["kind"] == "kill" and e["actor"].startswith(enemy)
        )
        goal = own_kills / (own_kills + their_kills) if own_kills + their_kills else 0.5
        goal_note = f"kill share {own_kills}:{their_kills}"

    just = {
        "map_control": f"closer to {control_frac:.0%} of free cells on an average tick",
        "adaptability": f"verb mix shifted {shift:.2f} (total variation) after first damage"
        if first_hit is not None
        else "0 damage events to adapt to",
        "team_coordination": f"mean teammate spread {mean_spread:.2f} cells while shooting"
        if mean_spread is not None
        else "0 shooting ticks with 2 or more teammates alive",
        "team_aggression": f"{shot_rate:.3f} shots per agent-tick, closing on the enemy {advance_rate:.0%} of the time",
        "goal_achievement": goal_note,
    }
    return TacticalReport(
        map_control=round(10.0 * control_frac, 3),
        adaptability=round(10.0 * shift, 3),
        team_coordination=round(coordination, 3),
        team_aggression=round(min(10.0, 10.0 * aggression), 3),
        goal_achievement=round(10.0 * goal, 3),
        justifications=just,
    )


# ---------------------------------------------------------------------------
# candidates and history


UNSCORED = None  # reward sentinel for invalid candidates


@dataclass
class Candidate:
    dsl: str
    gen_index: int
    iteration: int
    reward: float | None = UNSCORED
    fallback: bool = False
    diagnostics: tuple[str, ...] = ()
    parent: int | None = None
    tactical: TacticalReport | None = None

    @property
    def valid(self) -> bool:
        return not self.diagnostics

    def sort_key(self):
        return (-self.reward, self.gen_index, self.dsl)

    def to_dict(self) -> dict[str, Any]:
        return {
            "dsl": self.dsl,
            "gen_index": self.gen_index,
            "iteration": self.iteration,
            "reward": self.reward,
            "fallback": self.fallback,
            "diagnostics": list(self.diagnostics),
            "parent": self.parent,
        }

    @staticmethod
    def from_dict(doc: Mapping[str, Any]) -> "Candidate":
        return Candidate(
            dsl=doc["dsl"],
            gen_index=doc["gen_index"],
            iteration=doc["iteration"],
            reward=doc["reward"],
            fallback=doc["fallback"],
            diagnostics=tuple(doc["diagnostics"]),
            parent=doc["parent"],
        )


@dataclass(frozen=True)
class TrajectoryRecord:
    t: int
    prompt: str
    dsl: str
    reward: float | None
    tactical: Mapping[str, float] | None
    valid: bool
    diagnostics: tuple[str, ...]

    def to_dict(self) -> dict[str, Any]:
        return {
            "t": self.t,
            "prompt": self.prompt,
            "dsl": self.dsl,
            "reward": self.reward,
            "tactical": dict(self.tactical) if self.tactical is not None else None,
            "valid": self.valid,
            "diagnostics": list(self.diagnostics),
        }

    @staticmethod
    def from_dict(doc: Mapping[str, Any]) -> "TrajectoryRecord":
        return TrajectoryRecord(
            t=doc["t"],
            prompt=doc["prompt"],
            dsl=doc["dsl"],
            reward=doc["reward"],
            tactical=doc["tactical"],
            valid=doc["valid"],
            diagnostics=tuple(doc["diagnostics"]),
        )


@dataclass
class SearchHistory:
    config_hash: str
    candidates: list[Candidate] = field(default_factory=list)
    records: list[TrajectoryRecord] = field(default_factory=list)
    best_per_iteration: list[float] = field(default_factory=list)
    iteration_seconds: list[float] = field(default_factory=list)


def export_trajectories(history: SearchHistory, path: str | Path) -> None:
    """JSONL, one record per line; schema is stable for downstream training."""
    if not history.records:
        raise SearchError("empty-history", "nothing to export")
    path = Path(path)
    try:
        with path.open("w", encoding="utf-8") as fh:
            for record in history.records:
                fh.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
    except OSError as exc:
        raise SearchError("io-error", f"{path}: {exc}") from exc


def load_trajectories(path: str | Path) -> list[TrajectoryRecord]:
    with Path(path).open("r", encoding="utf-8") as fh:
        return [TrajectoryRecord.from_dict(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# the loop


def _diagnose(text: str | None) -> tuple[dsl.BtNode | None, tuple[str, ...]]:
    if text is None:
        return None, ("no-dsl: completion contained no tree",)
    try:
        tree = dsl.parse(text)
    except dsl.DslError as exc:
        return None, tuple(str(d) for d in exc.diagnostics)
    errors = [d for d in dsl.validate(tree, fps.CATALOG) if d.severity == "error"]
    if errors:
        return None, tuple(str(d) for d in errors)
    return tree, ()


def _prompt_for(
    config: SearchConfig,
    parent: Candidate | None,
    parent_metrics: GameMetrics | None,
    baseline_metrics: GameMetrics | None,
    invalid_children: list[Candidate],
) -> str:
    tactics = config.tactics
    if parent is not None and parent_metrics is not None:
        tactics += "\n\nYour current tree:\n" + parent.dsl
        tactics += "\n\nLatest results:\n" + metrics_to_text(parent_metrics, baseline_metrics)
        if parent.tactical is not None:
            tactics += "\n\nTactical analysis:\n" + parent.tactical.to_text()
    history_dsl = history_msg = None
    if invalid_children:
        last = invalid_children[-1]
        history_dsl = last.dsl
        history_msg = "\n".join(last.diagnostics)
    context = genkit.build_context(
        fps.CATALOG,
        scenario=config.scenario,
        tactics=tactics,
        history_dsl=history_dsl,
        history_message=history_msg,
    )
    return genkit.render(genkit.DEFAULT_TEMPLATE, context)


def _save_checkpoint(path: Path, config: SearchConfig, history: SearchHistory, next_t: int) -> None:
    doc = {
        "config_hash": history.config_hash,
        "iteration": next_t,
        "candidates": [c.to_dict() for c in history.candidates],
        "records": [r.to_dict() for r in history.records],
        "best_per_iteration": history.best_per_iteration,
    }
    path.write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")


def load_checkpoint(path: str | Path, config: SearchConfig) -> tuple[SearchHistory, int]:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if doc["config_hash"] != config_hash(config):
        raise SearchError("checkpoint-mismatch", "checkpoint was written by a different config")
    history = SearchHistory(
        config_hash=doc["config_hash"],
        candidates=[Candidate.from_dict(c) for c in doc["candidates"]],
        records=[TrajectoryRecord.from_dict(r) for r in doc["records"]],
        best_per_iteration=list(doc["best_per_iteration"]),
    )
    return history, int(doc["iteration"])


def bfs_search(
    config: SearchConfig,
    generator: GeneratorConfig,
    catalog: dsl.NodeCatalog | None = None,
    *,
    table: HandlerTable | None = None,
    jobs: int = 1,
    checkpoint: str | Path | None = None,
    resume: str | Path | None = None,
) -> tuple[Candidate, SearchHistory]:
    """Run the sample-N / keep-top-K loop; returns (best-ever, full history).

    Retention pools each iteration's valid candidates with the previously
    retained set, so the best-ever candidate is always kept (elitism). If the
    generator becomes unavailable mid-run the state is checkpointed (when a
    path was given) before the error propagates; ``resume`` continues it.
    """
    catalog = catalog or fps.CATALOG
    table = table or fps.rule_bindings()
    start_t = 0
    if resume is not None:
        history, start_t = load_checkpoint(resume, config)
    else:
        history = SearchHistory(config_hash=config_hash(config))

    retained: list[Candidate] = sorted(
        (c for c in history.candidates if c.valid and c.reward is not None),
        key=Candidate.sort_key,
    )[: config.k]
    eval_cache: dict[str, EvalResult] = {}

    def scored(candidate: Candidate) -> EvalResult:
        if candidate.dsl not in eval_cache:
            eval_cache[candidate.dsl] = evaluate(candidate.dsl, config, table=table, jobs=jobs)
        return eval_cache[candidate.dsl]

    for c in retained:  # resumed candidates need their replays back
        result = scored(c)
        c.tactical = tactical_analysis(result.traces[0])

    seed_tree = dsl.parse(config.seed_tree)
    gen_counter = max((c.gen_index + 1 for c in history.candidates), default=0)
    invalid_by_parent: dict[int | None, list[Candidate]] = {}

    for t in range(start_t, config.iterations):
        tick_start = time.perf_counter()
        # each retained parent seeds ceil(N/K) children; leftover slots are
        # fresh generations from the seed tree
        per_parent = math.ceil(config.n / config.k)
        allocations: list[tuple[Candidate | None, int]] = []
        remaining = config.n
        for parent in retained:
            take = min(per_parent, remaining)
            if take <= 0:
                break
            allocations.append((parent, take))
            remaining -= take
        if remaining > 0:
            allocations.append((None, remaining))
        baseline = retained[0] if retained else None
        baseline_metrics = scored(baseline).metrics[0] if baseline else None

        batch: list[Candidate] = []
        for slot, (parent, want) in enumerate(allocations):
            parent_metrics = scored(parent).metrics[0] if parent else None
            prompt = _prompt_for(
                config,
                parent,
                parent_metrics,
                baseline_metrics,
                invalid_by_parent.get(parent.gen_index if parent else None, []),
            )
            base = dsl.parse(parent.dsl) if parent else seed_tree
            try:
                records = genkit.generate(
                    generator,
                    prompt,
                    want,
                    catalog=catalog,
                    base_tree=base,
                    salt=t * 1000 + slot,
                )
            except GeneratorError:
                if checkpoint is not None:
                    _save_checkpoint(Path(checkpoint), config, history, t)
                raise
            for record in records:
                tree, diagnostics = _diagnose(record.dsl)
                cand = Candidate(
                    dsl=record.dsl if record.dsl is not None else "",
                    gen_index=gen_counter,
                    iteration=t,
                    diagnostics=diagnostics,
                    parent=parent.gen_index if parent else None,
                )
                gen_counter += 1
                if tree is not None:
                    result = scored(cand)
                    cand.reward = result.reward
                    cand.fallback = result.fallback
                batch.append(cand)
                history.candidates.append(cand)
                history.records.append(
                    TrajectoryRecord(
                        t=t,
                        prompt=prompt,
                        dsl=cand.dsl,
                        reward=cand.reward,
                        tactical=None,
                        valid=cand.valid,
                        diagnostics=cand.diagnostics,
                    )
                )

        invalid_by_parent = {}
        for cand in batch:
            if not cand.valid:
                invalid_by_parent.setdefault(cand.parent, []).append(cand)

        pool = {c.gen_index: c for c in retained}
        pool.update({c.gen_index: c for c in batch if c.valid})
        retained = sorted(pool.values(), key=Candidate.sort_key)[: config.k]
        for c in retained:
            if c.tactical is None:
                c.tactical = tactical_analysis(scored(c).traces[0])
        history.best_per_iteration.append(retained[0].reward if retained else None)
        history.iteration_seconds.append(time.perf_counter() - tick_start)
        # retrofit the retained candidates' trajectory records with tactics
        for record_i in range(len(history.records) - 1, -1, -1):
            rec = history.records[record_i]
            match = next((c for c in retained if c.dsl == rec.dsl and rec.tactical is None), None)
            if match is not None and match.tactical is not None:
                history.records[record_i] = TrajectoryRecord(
                    t=rec.t,
                    prompt=rec.prompt,
                    dsl=rec.dsl,
                    reward=rec.reward,
                    tactical=match.tactical.scores(),
                    valid=rec.valid,
                    diagnostics=rec.diagnostics,
                )
        if checkpoint is not None:
            _save_checkpoint(Path(checkpoint), config, history, t + 1)

    if not retained:
        raise SearchError("no-valid-candidate", "every generated candidate was invalid")
    return retained[0], history
