"""Deterministic FPS-lite grid arena.

A world is a small 2D grid with continuous agent positions (a cell is the
unit square; ``floor(pos)`` is the occupied cell). Two teams, "A" and "B",
spawn from map-defined points, move at fixed speed in 8 compass directions,
and fight with a hitscan weapon limited by range and line of sight.

Combat numbers are fixed so oracles stay exact: health 100, damage 25 per
hit, weapon range 8 cells, move speed 0.5 cells/tick, respawn after 50
ticks, 100 starting ammo.

Step resolution order within one tick is: aims, moves, fires (in agent-id
order, so earlier kills void later shots at the corpse), respawns, objective
accounting, intel (last-known enemy positions). Everything is a pure
function of (map, seed, actions), which is what makes replays bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .btree import Blackboard, CompiledPolicy
from .geom import DIR_VECTORS, cell_of, in_bounds, line_of_sight

MAX_HEALTH = 100
DAMAGE = 25
WEAPON_RANGE = 8.0
MOVE_SPEED = 0.5
RESPAWN_TICKS = 50
START_AMMO = 100

TEAMS = ("A", "B")

REPLAY_MAGIC = b"BTRR"
REPLAY_VERSION = 1


class ArenaError(ValueError):
    """Arena contract violation; ``code`` is a short machine tag."""

    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(f"{code}: {message}")


# ---------------------------------------------------------------------------
# maps

Cell = tuple[int, int]


@dataclass(frozen=True)
class MapSpec:
    width: int
    height: int
    name: str
    obstacles: frozenset
    spawns: Mapping[str, tuple]  # team -> ordered spawn cells
    objectives: tuple = ()

    def __post_init__(self):
        if not (8 <= self.width <= 128 and 8 <= self.height <= 128):
            raise ArenaError("bad-map", f"dimensions {self.width}x{self.height} outside [8, 128]")
        for team in TEAMS:
            points = self.spawns.get(team, ())
            if not points:
                raise ArenaError("bad-map", f"team {team} has no spawn point")
            for c in points:
                if not in_bounds(c[0], c[1], self.width, self.height):
                    raise ArenaError("bad-map", f"spawn {c} out of bounds")
                if c in self.obstacles:
                    raise ArenaError("bad-map", f"spawn {c} inside an obstacle")
        for c in self.objectives:
            if not in_bounds(c[0], c[1], self.width, self.height):
                raise ArenaError("bad-map", f"objective {c} out of bounds")


def parse_map(text: str) -> MapSpec:
    """Parse the plain-text map format (header ``W H name`` then the grid)."""
    lines = text.splitlines()
    if not lines:
        raise ArenaError("bad-map", "empty map text")
    head = lines[0].split(maxsplit=2)
    if len(head) < 3 or not head[0].isdigit() or not head[1].isdigit():
        raise ArenaError("bad-map", f"malformed header {lines[0]!r}, expected 'W H name'")
    width, height, name = int(head[0]), int(head[1]), head[2]
    rows = lines[1:]
    if len(rows) != height:
        raise ArenaError("bad-map", f"expected {height} grid rows, got {len(rows)}")
    obstacles = set()
    spawns: dict = {"A": [], "B": []}
    objectives = []
    for y, row in enumerate(rows):
        if len(row) != width:
            raise ArenaError("bad-map", f"row {y} has length {len(row)}, expected {width}")
        for x, ch in enumerate(row):
            if ch == "#":
                obstacles.add((x, y))
            elif ch == "A" or ch == "B":
                spawns[ch].append((x, y))
            elif ch == "O":
                objectives.append((x, y))
            elif ch != ".":
                raise ArenaError("bad-map", f"unknown map character {ch!r} at ({x}, {y})")
    return MapSpec(
        width=width,
        height=height,
        name=name,
        obstacles=frozenset(obstacles),
        spawns={t: tuple(spawns[t]) for t in TEAMS},
        objectives=tuple(objectives),
    )


def format_map(spec: MapSpec) -> str:
    """Canonical text for a map; ``parse_map(format_map(m)) == m``."""
    grid = [["." for _ in range(spec.width)] for _ in range(spec.height)]
    for (x, y) in spec.obstacles:
        grid[y][x] = "#"
    for (x, y) in spec.objectives:
        grid[y][x] = "O"
    for team in TEAMS:
        for (x, y) in spec.spawns[team]:
            grid[y][x] = team
    body = "\n".join("".join(row) for row in grid)
    return f"{spec.width} {spec.height} {spec.name}\n{body}"


def map_hash(spec: MapSpec) -> str:
    return hashlib.sha256(format_map(spec).encode()).hexdigest()


# ---------------------------------------------------------------------------
# world state

@dataclass
class AgentState:
    id: str
    team: str
    pos: tuple[float, float]
    facing: tuple[float, float]
    health: int = MAX_HEALTH
    ammo: int = START_AMMO
    alive: bool = True
    respawn_timer: int = 0
    aim_target: str | None = None

    @property
    def cell(self) -> Cell:
        return cell_of(self.pos[0], self.pos[1])


@dataclass(frozen=True)
class Action:
    kind: str  # move | aim | fire | wait
    direction: int | None = None
    target: str | None = None

    @staticmethod
    def move(direction: int) -> "Action":
        return Action("move", direction=direction)

    @staticmethod
    def aim(target: str) -> "Action":
        return Action("aim", target=target)

    @staticmethod
    def fire() -> "Action":
        return Action("fire")

    @staticmethod
    def wait() -> "Action":
        return Action("wait")

    def to_dict(self) -> dict:
        out: dict[str, Any] = {"kind": self.kind}
        if self.direction is not None:
            out["direction"] = self.direction
        if self.target is not None:
            out["target"] = self.target
        return out

    @staticmethod
    def from_dict(data: Mapping[str, Any]) -> "Action":
        return Action(data["kind"], direction=data.get("direction"), target=data.get("target"))


@dataclass
class AgentMetrics:
    kills: int = 0
    deaths: int = 0
    shots: int = 0
    hits: int = 0
    damage_dealt: int = 0
    objective_ticks: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class GameMetrics:
    per_agent: dict = field(default_factory=dict)  # id -> AgentMetrics
    kill_ticks: dict = field(default_factory=lambda: {t: [] for t in TEAMS})
    episode_length: int = 0

    def agent(self, agent_id: str) -> AgentMetrics:
        return self.per_agent.setdefault(agent_id, AgentMetrics())

    def team_total(self, team: str, stat: str) -> int:
        return sum(getattr(m, stat) for aid, m in self.per_agent.items() if aid.startswith(team))

    def time_between_kills(self, team: str) -> float | None:
        """Mean tick gap between the team's consecutive kills; None below 2 kills."""
        ticks = self.kill_ticks[team]
        if len(ticks) < 2:
            return None
        return float(np.mean(np.diff(ticks)))

    def to_dict(self) -> dict:
        return {
            "per_agent": {aid: m.to_dict() for aid, m in sorted(self.per_agent.items())},
            "per_team": {
                t: {s: self.team_total(t, s) for s in ("kills", "deaths", "shots", "hits", "damage_dealt", "objective_ticks")}
                for t in TEAMS
            },
            "kill_ticks": {t: list(v) for t, v in self.kill_ticks.items()},
            "time_between_kills": {t: self.time_between_kills(t) for t in TEAMS},
            "episode_length": self.episode_length,
        }


@dataclass
class WorldState:
    map: MapSpec
    agents: dict  # id -> AgentState
    rng: np.random.Generator
    tick: int = 0
    respawns_enabled: bool = True
    aim_noise: bool = False
    metrics: GameMetrics = field(default_factory=GameMetrics)
    last_known: dict = field(default_factory=dict)  # observer -> {enemy -> cell}
    _respawn_counts: dict = field(default_factory=lambda: {t: 0 for t in TEAMS})


def make_world(
    spec: MapSpec,
    seed: int,
    *,
    respawns: bool = True,
    aim_noise: bool = False,
) -> WorldState:
    """One agent per spawn point; ids are 'A0', 'A1', ... by spawn order.

    Every agent starts knowing the enemy spawn cells as last-known positions,
    so hunting policies have somewhere to head before first contact.
    """
    agents: dict[str, AgentState] = {}
    for team in TEAMS:
        facing = (1.0, 0.0) if team == "A" else (-1.0, 0.0)
        for i, (cx, cy) in enumerate(spec.spawns[team]):
            aid = f"{team}{i}"
            agents[aid] = AgentState(id=aid, team=team, pos=(cx + 0.5, cy + 0.5), facing=facing)
    world = WorldState(
        map=spec,
        agents=agents,
        rng=np.random.default_rng(seed),
        respawns_enabled=respawns,
        aim_noise=aim_noise,
    )
    for aid, agent in agents.items():
        world.last_known[aid] = {
            eid: other.cell for eid, other in agents.items() if other.team != agent.team
        }
    for aid in agents:
        world.metrics.agent(aid)
    return world


def _dist(a: tuple[float, float], b: tuple[float, float]) -> float:
    return math.hypot(b[0] - a[0], b[1] - a[1])


def visible(world: WorldState, viewer: AgentState, target: AgentState) -> bool:
    """Alive, within weapon range, and with unobstructed line of sight."""
    if not (viewer.alive and target.alive):
        return False
    if _dist(viewer.pos, target.pos) > WEAPON_RANGE:
        return False
    return line_of_sight(viewer.pos[0], viewer.pos[1], target.pos[0], target.pos[1], world.map.obstacles)


def step(world: WorldState, joint_actions: Mapping[str, Action]) -> list[dict]:
    """Advance one tick in place; returns this tick's events as dicts."""
    events: list[dict] = []
    t = world.tick

    def event(kind: str, actor: str, target: str | None = None, **extra):
        e = {"t": t, "kind": kind, "actor": actor}
        if target is not None:
            e["target"] = target
        e.update(extra)
        events.append(e)

    live_actions: dict[str, Action] = {}
    for aid in sorted(joint_actions):
        agent = world.agents.get(aid)
        if agent is None or not agent.alive:
            event("warning", aid, reason="action-from-dead-agent")
            continue
        live_actions[aid] = joint_actions[aid]

    # aims: snap facing onto the target and arm the weapon
    for aid, action in live_actions.items():
        if action.kind != "aim":
            continue
        agent = world.agents[aid]
        target = world.agents.get(action.target or "")
        if target is None:
            event("warning", aid, reason="aim-at-unknown-agent")
            continue
        dx, dy = target.pos[0] - agent.pos[0], target.pos[1] - agent.pos[1]
        norm = math.hypot(dx, dy)
        if norm > 1e-9:
            agent.facing = (dx / norm, dy / norm)
        agent.aim_target = target.id

    # moves: fixed speed, obstacle and boundary collision makes a no-op
    for aid, action in live_actions.items():
        if action.kind != "move":
            continue
        agent = world.agents[aid]
        if action.direction is None or not (0 <= action.direction < 8):
            event("warning", aid, reason="bad-move-direction")
            continue
        vx, vy = DIR_VECTORS[action.direction]
        agent.facing = (vx, vy)
        nx, ny = agent.pos[0] + vx * MOVE_SPEED, agent.pos[1] + vy * MOVE_SPEED
        ncell = cell_of(nx, ny)
        if in_bounds(ncell[0], ncell[1], world.map.width, world.map.height) and ncell not in world.map.obstacles:
            agent.pos = (nx, ny)

    # fires: agent-id order; a kill earlier in the order voids later shots at the corpse
    for aid, action in sorted(live_actions.items()):
        if action.kind != "fire":
            continue
        agent = world.agents[aid]
        if agent.ammo <= 0:
            event("warning", aid, reason="out-of-ammo")
            continue
        agent.ammo -= 1
        world.metrics.agent(aid).shots += 1
        target = world.agents.get(agent.aim_target or "")
        event("shot", aid, target=target.id if target else None)
        if target is None or not target.alive:
            continue
        if _dist(agent.pos, target.pos) > WEAPON_RANGE:
            continue
        if not line_of_sight(agent.pos[0], agent.pos[1], target.pos[0], target.pos[1], world.map.obstacles):
            continue
        if world.aim_noise:
            jitter = world.rng.integers(-1, 2, size=2)
            if jitter[0] != 0 or jitter[1] != 0:
                continue  # shot drifted off target
        world.metrics.agent(aid).hits += 1
        world.metrics.agent(aid).damage_dealt += DAMAGE
        target.health = max(0, target.health - DAMAGE)
        event("hit", aid, target=target.id, damage=DAMAGE)
        if target.health == 0:
            target.alive = False
            target.aim_target = None
            target.respawn_timer = RESPAWN_TICKS
            world.metrics.agent(aid).kills += 1
            world.metrics.agent(target.id).deaths += 1
            world.metrics.kill_ticks[agent.team].append(t)
            event("kill", aid, target=target.id)

    # respawns: deterministic rotation over the team's spawn points
    for aid in sorted(world.agents):
        agent = world.agents[aid]
        if agent.alive or not world.respawns_enabled:
            continue
        agent.respawn_timer -= 1
        if agent.respawn_timer > 0:
            continue
        spawns = world.map.spawns[agent.team]
        idx = world._respawn_counts[agent.team] % len(spawns)
        world._respawn_counts[agent.team] += 1
        cx, cy = spawns[idx]
        agent.pos = (cx + 0.5, cy + 0.5)
        agent.facing = (1.0, 0.0) if agent.team == "A" else (-1.0, 0.0)
        agent.health = MAX_HEALTH
        agent.ammo = START_AMMO
        agent.alive = True
        agent.aim_target = None
        event("respawn", aid)

    # objective holding
    objective_cells = set(world.map.objectives)
    if objective_cells:
        for aid, agent in world.agents.items():
            if agent.alive and agent.cell in objective_cells:
                world.metrics.agent(aid).objective_ticks += 1

    # intel: visibility updates last-known positions, which persist otherwise
    for aid, agent in world.agents.items():
        if not agent.alive:
            continue
        for eid, enemy in world.agents.items():
            if enemy.team != agent.team and visible(world, agent, enemy):
                world.last_known[aid][eid] = enemy.cell

    world.tick += 1
    return events


# ---------------------------------------------------------------------------
# observations

@dataclass(frozen=True)
class Observation:
    tick: int
    agent_id: str
    team: str
    position: tuple[float, float]
    facing: tuple[float, float]
    health: int
    ammo: int
    alive: bool
    width: int
    height: int
    obstacles: frozenset
    visible_enemies: tuple  # ((id, (x, y)), ...) sorted by id
    known_enemies: Mapping[str, Cell]  # last-known enemy cells
    allies: tuple  # ((id, (x, y)), ...) alive allies sorted by id
    objectives: tuple

    @property
    def cell(self) -> Cell:
        return cell_of(self.position[0], self.position[1])


def observe(world: WorldState, agent_id: str) -> Observation:
    agent = world.agents.get(agent_id)
    if agent is None:
        raise ArenaError("no-such-agent", f"unknown agent {agent_id!r}")
    vis = tuple(
        (eid, world.agents[eid].pos)
        for eid in sorted(world.agents)
        if world.agents[eid].team != agent.team and visible(world, agent, world.agents[eid])
    )
    allies = tuple(
        (aid, world.agents[aid].pos)
        for aid in sorted(world.agents)
        if aid != agent_id and world.agents[aid].team == agent.team and world.agents[aid].alive
    )
    return Observation(
        tick=world.tick,
        agent_id=agent_id,
        team=agent.team,
        position=agent.pos,
        facing=agent.facing,
        health=agent.health,
        ammo=agent.ammo,
        alive=agent.alive,
        width=world.map.width,
        height=world.map.height,
        obstacles=world.map.obstacles,
        visible_enemies=vis,
        known_enemies=dict(world.last_known[agent_id]),
        allies=allies,
        objectives=world.map.objectives,
    )


# ---------------------------------------------------------------------------
# episodes and traces

@dataclass(frozen=True)
class TickRecord:
    tick: int
    agents: Mapping[str, tuple]  # id -> (x, y, alive, team)
    actions: Mapping[str, dict]
    events: tuple

    def to_dict(self) -> dict:
        return {
            "t": self.tick,
            "agents": {aid: list(v) for aid, v in sorted(self.agents.items())},
            "actions": {aid: a for aid, a in sorted(self.actions.items())},
            "events": list(self.events),
        }

    @staticmethod
    def from_dict(data: Mapping[str, Any]) -> "TickRecord":
        return TickRecord(
            tick=data["t"],
            agents={aid: tuple(v) for aid, v in data["agents"].items()},
            actions=dict(data["actions"]),
            events=tuple(data["events"]),
        )


@dataclass(frozen=True)
class ReplayTrace:
    map: MapSpec
    seed: int
    ticks: tuple

    @property
    def map_hash(self) -> str:
        return map_hash(self.map)


def run_episode(
    policies: Mapping[str, CompiledPolicy],
    spec: MapSpec,
    seed: int,
    max_ticks: int = 600,
    *,
    respawns: bool = True,
    aim_noise: bool = False,
) -> tuple[GameMetrics, ReplayTrace]:
    """Tick every living agent's policy, apply the joint actions, accumulate
    metrics and a replayable trace. Policy instances must not be shared
    between agents (node memory is per instance)."""
    if max_ticks > 10000:
        raise ArenaError("bad-arg", "max_ticks above 10000")
    world = make_world(spec, seed, respawns=respawns, aim_noise=aim_noise)
    missing = sorted(set(world.agents) - set(policies))
    if missing:
        raise ArenaError("missing-policy", f"no policy for agents {missing}")
    boards = {aid: Blackboard() for aid in world.agents}
    for aid in world.agents:
        policies[aid].reset(boards[aid])

    records = []
    for _ in range(max_ticks):
        actions: dict[str, Action] = {}
        for aid in sorted(world.agents):
            agent = world.agents[aid]
            if not agent.alive:
                continue
            obs = observe(world, aid)
            _, action = policies[aid].tick(obs, boards[aid])
            actions[aid] = action if isinstance(action, Action) else Action.wait()
        tick_index = world.tick
        events = step(world, actions)
        records.append(
            TickRecord(
                tick=tick_index,
                agents={
                    aid: (a.pos[0], a.pos[1], a.alive, a.team) for aid, a in world.agents.items()
                },
                actions={aid: act.to_dict() for aid, act in actions.items()},
                events=tuple(events),
            )
        )
        world.metrics.episode_length = world.tick
        if not world.respawns_enabled:
            alive_teams = {a.team for a in world.agents.values() if a.alive}
            if len(alive_teams) < 2:
                break
    return world.metrics, ReplayTrace(map=spec, seed=seed, ticks=tuple(records))


def resimulate(trace: ReplayTrace, *, respawns: bool = True, aim_noise: bool = False) -> ReplayTrace:
    """Re-run the recorded joint actions from (map, seed); the result must
    equal the original trace bit-exactly."""
    world = make_world(trace.map, trace.seed, respawns=respawns, aim_noise=aim_noise)
    records = []
    for rec in trace.ticks:
        actions = {aid: Action.from_dict(a) for aid, a in rec.actions.items()}
        tick_index = world.tick
        events = step(world, actions)
        records.append(
            TickRecord(
                tick=tick_index,
                agents={
                    aid: (a.pos[0], a.pos[1], a.alive, a.team) for aid, a in world.agents.items()
                },
                actions={aid: act.to_dict() for aid, act in actions.items()},
                events=tuple(events),
            )
        )
    return ReplayTrace(map=trace.map, seed=trace.seed, ticks=tuple(records))


# ---------------------------------------------------------------------------
# replay files

def save_replay(trace: ReplayTrace, path: str | Path) -> None:
    """Binary replay: magic, version, seed, map hash + text, then one
    length-prefixed canonical-JSON record per tick, crc32 sealed."""
    blob = bytearray()
    blob += REPLAY_MAGIC
    blob += struct.pack("<HQ", REPLAY_VERSION, trace.seed)
    digest = trace.map_hash.encode()
    map_text = format_map(trace.map).encode()
    blob += struct.pack("<I", len(digest)) + digest
    blob += struct.pack("<I", len(map_text)) + map_text
    blob += struct.pack("<I", len(trace.ticks))
    for rec in trace.ticks:
        payload = json.dumps(rec.to_dict(), sort_keys=True, separators=(",", ":")).encode()
        blob += struct.pack("<I", len(payload)) + payload
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    Path(path).write_bytes(bytes(blob))


def load_replay(path: str | Path) -> ReplayTrace:
    data = Path(path).read_bytes()
    if len(data) < 4 + 10 + 4:
        raise ArenaError("bad-length", "replay file too short")
    if data[:4] != REPLAY_MAGIC:
        raise ArenaError("bad-magic", f"expected {REPLAY_MAGIC!r}")
    (stored_crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != stored_crc:
        raise ArenaError("bad-checksum", "replay payload does not match its checksum")
    version, seed = struct.unpack_from("<HQ", data, 4)
    if version != REPLAY_VERSION:
        raise ArenaError("bad-version", f"unsupported replay version {version}")
    offset = 4 + 10

    def take() -> bytes:
        nonlocal offset
        (n,) = struct.unpack_from("<I", data, offset)
        offset2 = offset + 4
        chunk = data[offset2 : offset2 + n]
        if len(chunk) != n:
            raise ArenaError("bad-length", "replay record truncated")
        offset = offset2 + n
        return chunk

    digest = take().decode()
    spec = parse_map(take().decode())
    if map_hash(spec) != digest:
        raise ArenaError("bad-checksum", "embedded map does not match its recorded hash")
    (count,) = struct.unpack_from("<I", data, offset)
    offset += 4
    records = []
    for _ in range(count):
        records.append(TickRecord.from_dict(json.loads(take().decode())))
    return ReplayTrace(map=spec, seed=int(seed), ticks=tuple(records))


# ---------------------------------------------------------------------------
# minimaps

@dataclass(frozen=True)
class Frame:
    tick: int
    grid: tuple  # H strings of length W
    events: tuple

    def to_text(self) -> str:
        return "\n".join(self.grid)


def minimap_frames(trace: ReplayTrace, stride: int) -> list[Frame]:
    """Top-down symbolic frames sampled every ``stride`` ticks."""
    if stride < 1:
        raise ArenaError("bad-arg", "stride must be >= 1")
    spec = trace.map
    base = [["." for _ in range(spec.width)] for _ in range(spec.height)]
    for (x, y) in spec.obstacles:
        base[y][x] = "#"
    for (x, y) in spec.objectives:
        base[y][x] = "O"
    frames = []
    for rec in trace.ticks[::stride]:
        grid = [row[:] for row in base]
        for aid in sorted(rec.agents):
            x, y, alive, team = rec.agents[aid]
            if alive:
                cx, cy = cell_of(x, y)
                grid[cy][cx] = team
        frames.append(Frame(tick=rec.tick, grid=tuple("".join(r) for r in grid), events=rec.events))
    return frames


_SVG_COLORS = {"#": "#444444", "O": "#d4a017", "A": "#c0392b", "B": "#2980b9"}


def frame_to_svg(frame: Frame, cell_px: int = 12) -> str:
    """One SVG image per frame; enough for the CLI's --render svg."""
    h = len(frame.grid)
    w = len(frame.grid[0]) if h else 0
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * cell_px}" height="{h * cell_px}" '
        f'viewBox="0 0 {w * cell_px} {h * cell_px}">',
        f'<rect width="{w * cell_px}" height="{h * cell_px}" fill="#f5f5f0"/>',
    ]
    for y, row in enumerate(frame.grid):
        for x, ch in enumerate(row):
            color = _SVG_COLORS.get(ch)
            if color is None:
                continue
            if ch in ("A", "B"):
                cx, cy = x * cell_px + cell_px / 2, y * cell_px + cell_px / 2
                parts.append(f'<circle cx="{cx}" cy="{cy}" r="{cell_px * 0.4}" fill="{color}"/>')
            else:
                parts.append(
                    f'<rect x="{x * cell_px}" y="{y * cell_px}" width="{cell_px}" height="{cell_px}" fill="{color}"/>'
                )
    parts.append(f"<!-- tick {frame.tick} -->")
    parts.append("</svg>")
    return "".join(parts)
