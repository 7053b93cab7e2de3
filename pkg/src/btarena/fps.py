"""Stock node vocabulary for the grid shooter, plus the handler bindings
that make trees over it executable.

The catalog pairs four observable facts (conditions) with three actions:

* ``shoot``   engage one visible enemy, aim-then-fire
* ``move_to`` walk to a param-selected location
* ``wait``    hold position

Each action exists as a scripted handler; ``move_to`` and ``shoot`` also
come in network-backed variants wrapping trained weights.  A tree compiled
with ``rule_bindings()`` uses classical logic only; ``neural_bindings()``
swaps the hot tasks for their learned counterparts.
"""

from __future__ import annotations

import math

import numpy as np

from . import dsl
from .arena import MOVE_SPEED, Action
from .btree import HandlerTable, TaskHandler, TickStatus
from .geom import DIR_OFFSETS, DIR_VECTORS, bfs_distance_field, cell_of, in_bounds
from .neural import (
    NAV_ACTION_DIM,
    NAV_WAIT,
    SHOOT_AIM,
    SHOOT_FIRE,
    NetParams,
    encode_task_features,
    forward,
    masked_nav_probs,
)

LOW_HEALTH = 35

CATALOG = dsl.NodeCatalog(
    conditions={
        "has_enemy_in_view": "an enemy is within weapon range with a clear line of sight",
        "has_known_enemy_location": "some enemy position is known from spawn intel or sightings",
        "at_objective": "this agent is standing on an objective cell",
        "low_health": f"health is at or below {LOW_HEALTH}",
    },
    actions={
        "shoot": dsl.ActionSpec(
            ("random_enemy_in_view", "nearest_enemy_in_view"),
            "aim at the selected visible enemy and keep firing while it stays in view",
        ),
        "move_to": dsl.ActionSpec(
            ("random_enemy_location", "nearest_enemy_location", "objective_location"),
            "walk toward the selected location, avoiding walls",
        ),
        "wait": dsl.ActionSpec((), "hold position and do nothing"),
    },
)

# the worked example: engage on sight, otherwise close on known enemy positions
HUNT_TREE = (
    "selector:\n"
    "  sequence:\n"
    "    condition: has_enemy_in_view\n"
    "    task: shoot random_enemy_in_view\n"
    "  sequence:\n"
    "    condition: no\n"
    "    condition: has_enemy_in_view\n"
    "    task: move_to random_enemy_location\n"
)


def _dist(a: tuple[float, float], b: tuple[float, float]) -> float:
    return math.hypot(b[0] - a[0], b[1] - a[1])


def _center(cell: tuple[int, int]) -> tuple[float, float]:
    return cell[0] + 0.5, cell[1] + 0.5


def _legal_steer(obs, target: tuple[float, float]) -> int:
    """Compass step making the most progress toward ``target`` whose half-step
    destination is passable. Cell-level plans can clip corners; masking the
    actual continuous step is what keeps walkers from wedging against walls."""
    px, py = obs.position
    dx, dy = target[0] - px, target[1] - py
    best, best_dot = NAV_WAIT, -math.inf
    for i, (vx, vy) in enumerate(DIR_VECTORS):
        ncell = cell_of(px + MOVE_SPEED * vx, py + MOVE_SPEED * vy)
        if not in_bounds(ncell[0], ncell[1], obs.width, obs.height) or ncell in obs.obstacles:
            continue
        dot = dx * vx + dy * vy
        if dot > best_dot:
            best, best_dot = i, dot
    return best


# ---------------------------------------------------------------------------
# conditions


def _has_enemy_in_view(obs) -> bool:
    return bool(obs.visible_enemies)


def _has_known_enemy_location(obs) -> bool:
    return bool(obs.known_enemies)


def _at_objective(obs) -> bool:
    return obs.cell in obs.objectives


def _low_health(obs) -> bool:
    return obs.health <= LOW_HEALTH


CONDITIONS = {
    "has_enemy_in_view": _has_enemy_in_view,
    "has_known_enemy_location": _has_known_enemy_location,
    "at_objective": _at_objective,
    "low_health": _low_health,
}


# ---------------------------------------------------------------------------
# shoot


class ShootTask(TaskHandler):
    """Engage one visible enemy: aim once, then fire while it stays in view.

    Fails immediately when nothing is visible, and after the chosen target
    has been out of view for LOST_LIMIT consecutive ticks (dead or escaped,
    the engagement is over either way).
    """

    LOST_LIMIT = 5

    def __init__(self, param: str | None):
        self.param = param or "random_enemy_in_view"
        self.target: str | None = None
        self.aimed = False
        self.lost = 0

    def reset(self) -> None:
        self.target, self.aimed, self.lost = None, False, 0

    def _acquire(self, obs, rng) -> str | None:
        if not obs.visible_enemies:
            return None
        if self.param == "nearest_enemy_in_view":
            return min(obs.visible_enemies, key=lambda e: _dist(obs.position, e[1]))[0]
        return obs.visible_enemies[int(rng.integers(len(obs.visible_enemies)))][0]

    def _combat_action(self, obs, rt, target_pos) -> Action:
        if not self.aimed:
            self.aimed = True
            return Action.aim(self.target)
        return Action.fire()

    def tick(self, obs, bb, rt):
        visible = dict(obs.visible_enemies)
        if self.target is None:
            self.target = self._acquire(obs, rt.rng)
            if self.target is None:
                return TickStatus.FAILURE, None
        if self.target not in visible:
            self.lost += 1
            if self.lost >= self.LOST_LIMIT:
                return TickStatus.FAILURE, None
            return TickStatus.RUNNING, Action.wait()
        self.lost = 0
        return TickStatus.RUNNING, self._combat_action(obs, rt, visible[self.target])


class NeuralShootTask(ShootTask):
    """Target bookkeeping from ShootTask; the aim/fire/hold verb comes from a
    trained net, sampled through the policy rng so episodes stay replayable."""

    def __init__(self, params: NetParams, param: str | None):
        super().__init__(param)
        self.net = params

    def _combat_action(self, obs, rt, target_pos) -> Action:
        feats = encode_task_features(
            obs.width, obs.height, obs.obstacles, obs.position, obs.facing, target_pos
        )
        probs = forward(self.net, feats)
        verb = int(rt.rng.choice(len(probs), p=probs))
        if verb == SHOOT_AIM:
            return Action.aim(self.target)
        if verb == SHOOT_FIRE:
            return Action.fire()
        return Action.wait()


# ---------------------------------------------------------------------------
# move_to


class MoveToTask(TaskHandler):
    """Walk to a param-selected location; succeeds within half a cell of it.

    Enemy-location params pick one enemy per activation and then track its
    last-known position, so fresh intel re-aims the walk mid-flight.
    """

    ARRIVE = 0.5

    def __init__(self, param: str | None):
        self.param = param or "random_enemy_location"
        self.enemy: str | None = None
        self.objective: tuple[int, int] | None = None
        self._field: np.ndarray | None = None
        self._field_goal: tuple[int, int] | None = None

    def reset(self) -> None:
        self.enemy = None
        self.objective = None
        self._field = None
        self._field_goal = None

    def _goal_cell(self, obs, rng) -> tuple[int, int] | None:
        if self.param == "objective_location":
            if self.objective is None and obs.objectives:
                self.objective = min(
                    obs.objectives, key=lambda c: _dist(obs.position, _center(c))
                )
            return self.objective
        if self.enemy is None and obs.known_enemies:
            ids = sorted(obs.known_enemies)
            if self.param == "nearest_enemy_location":
                self.enemy = min(
                    ids, key=lambda e: _dist(obs.position, _center(obs.known_enemies[e]))
                )
            else:
                self.enemy = ids[int(rng.integers(len(ids)))]
        return obs.known_enemies.get(self.enemy) if self.enemy else None

    def _step_verb(self, obs, rt, goal: tuple[int, int]) -> int:
        if obs.cell == goal:
            return _legal_steer(obs, _center(goal))
        if self._field_goal != goal:
            self._field = bfs_distance_field(obs.width, obs.height, obs.obstacles, goal)
            self._field_goal = goal
        cx, cy = obs.cell
        if not np.isfinite(self._field[cy, cx]):
            return NAV_WAIT  # goal unreachable from here

        def downhill(i: int) -> float:
            ox, oy = DIR_OFFSETS[i]
            nx, ny = cx + ox, cy + oy
            if not in_bounds(nx, ny, obs.width, obs.height):
                return math.inf
            return float(self._field[ny, nx])

        ox, oy = DIR_OFFSETS[min(range(8), key=downhill)]
        return _legal_steer(obs, _center((cx + ox, cy + oy)))

    def tick(self, obs, bb, rt):
        goal = self._goal_cell(obs, rt.rng)
        if goal is None:
            return TickStatus.FAILURE, None
        if _dist(obs.position, _center(goal)) <= self.ARRIVE:
            return TickStatus.SUCCESS, None
        verb = self._step_verb(obs, rt, goal)
        if verb == NAV_WAIT:
            return TickStatus.FAILURE, None
        return TickStatus.RUNNING, Action.move(verb)


class NeuralMoveToTask(MoveToTask):
    """Goal selection from MoveToTask; steps come from a trained net with
    infeasible moves masked out. Argmax under deterministic evaluation,
    seeded sampling otherwise."""

    def __init__(self, params: NetParams, param: str | None):
        super().__init__(param)
        self.net = params

    def _step_verb(self, obs, rt, goal: tuple[int, int]) -> int:
        feats = encode_task_features(
            obs.width, obs.height, obs.obstacles, obs.position, obs.facing, _center(goal)
        )
        probs = masked_nav_probs(self.net, feats, obs.cell, (obs.width, obs.height, obs.obstacles))
        if rt.deterministic:
            return int(np.argmax(probs))
        return int(rt.rng.choice(NAV_ACTION_DIM, p=probs))


class WaitTask(TaskHandler):
    """Stand still; runs forever so a selector can park on it."""

    def tick(self, obs, bb, rt):
        return TickStatus.RUNNING, Action.wait()


# ---------------------------------------------------------------------------
# binding tables


def rule_bindings() -> HandlerTable:
    """Every task scripted; no trained weights involved."""
    return HandlerTable(
        conditions=dict(CONDITIONS),
        rule_tasks={
            "shoot": ShootTask,
            "move_to": MoveToTask,
            "wait": lambda param: WaitTask(),
        },
    )


def neural_bindings(nav: NetParams, shoot: NetParams | None = None) -> HandlerTable:
    """move_to (and optionally shoot) backed by trained nets; wait stays scripted."""
    rule_tasks: dict = {"wait": lambda param: WaitTask()}
    neural_tasks: dict = {"move_to": lambda param: NeuralMoveToTask(nav, param)}
    if shoot is None:
        rule_tasks["shoot"] = ShootTask
    else:
        neural_tasks["shoot"] = lambda param: NeuralShootTask(shoot, param)
    return HandlerTable(
        conditions=dict(CONDITIONS), rule_tasks=rule_tasks, neural_tasks=neural_tasks
    )
