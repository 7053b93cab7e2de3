"""Tiny two-layer policy networks for task nodes, plus their training loops.

A network is exactly two weight layers (input -> tanh hidden -> softmax) and
maps a fixed 37-feature task observation to a distribution over the verbs a
task is allowed to use. Training is episodic REINFORCE with reward-to-go and
a mean baseline; everything is seeded and single-threaded, so runs reproduce
bit-for-bit.

Feature layout (all components in [-1, 1]):

* [0:2]   goal offset: unit direction toward the goal
* [2:10]  eight compass rays: scaled distance to the first blocking cell
* [10:12] facing unit vector
* [12:37] flattened 5x5 occupancy patch centered on the agent (+1 blocked)
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geom import DIR_OFFSETS, DIR_VECTORS, bfs_distance_field, cell_of, in_bounds

FEATURE_DIM = 37
RAY_RANGE = 8
PATCH_RADIUS = 2

# Verb indices for the two trainable tasks.
NAV_WAIT = 8          # move_to: 0..7 compass moves, 8 = wait
NAV_ACTION_DIM = 9
SHOOT_AIM, SHOOT_FIRE, SHOOT_WAIT = 0, 1, 2
SHOOT_ACTION_DIM = 3

WEIGHT_MAGIC = b"PNET"
WEIGHT_VERSION = 1


class NetError(ValueError):
    """Network-level contract violation; ``code`` is a short machine tag."""

    def __init__(self, code: str, message: str):
        self.code = code
        super().__init__(f"{code}: {message}")


class WeightError(NetError):
    """A weight file could not be loaded."""


class TrainingDiverged(RuntimeError):
    """Loss or parameters went non-finite; ``iteration`` is where it happened."""

    def __init__(self, iteration: int):
        self.iteration = iteration
        super().__init__(f"diverged: non-finite values at iteration {iteration}")


@dataclass(frozen=True)
class NetParams:
    """Two weight layers. Arrays are float64 in memory, float32 on disk."""

    w1: np.ndarray  # (hidden, in)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (out, hidden)
    b2: np.ndarray  # (out,)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.w1.shape[1], self.w1.shape[0], self.w2.shape[0]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.w1.ravel(), self.b1, self.w2.ravel(), self.b2])


def init_params(in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator) -> NetParams:
    return NetParams(
        w1=rng.normal(0.0, 1.0 / math.sqrt(in_dim), (hidden, in_dim)),
        b1=np.zeros(hidden),
        w2=rng.normal(0.0, 0.1 / math.sqrt(hidden), (out_dim, hidden)),
        b2=np.zeros(out_dim),
    )


def _check_input(params: NetParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (params.dims[0],):
        raise NetError("dim-mismatch", f"expected observation of length {params.dims[0]}, got shape {x.shape}")
    return x


def forward(params: NetParams, x: np.ndarray) -> np.ndarray:
    """Action distribution (softmax probabilities) for one observation."""
    x = _check_input(params, x)
    hidden = np.tanh(params.w1 @ x + params.b1)
    logits = params.w2 @ hidden + params.b2
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def sample_action(params: NetParams, x: np.ndarray, rng: np.random.Generator, deterministic: bool = False) -> int:
    probs = forward(params, x)
    if deterministic:
        return int(np.argmax(probs))
    return int(np.searchsorted(np.cumsum(probs), rng.random()))


def log_prob_and_grad(params: NetParams, x: np.ndarray, action: int) -> tuple[float, NetParams]:
    """log pi(action|x) and its analytic gradient w.r.t. every parameter."""
    x = _check_input(params, x)
    hidden = np.tanh(params.w1 @ x + params.b1)
    logits = params.w2 @ hidden + params.b2
    z = logits - logits.max()
    probs = np.exp(z) / np.exp(z).sum()
    logp = float(np.log(probs[action]))
    dlogits = -probs
    dlogits[action] += 1.0
    db2 = dlogits
    dw2 = np.outer(dlogits, hidden)
    dpre = (params.w2.T @ dlogits) * (1.0 - hidden**2)
    return logp, NetParams(w1=np.outer(dpre, x), b1=dpre, w2=dw2, b2=db2)


def _batch_policy_gradient(params: NetParams, xs: np.ndarray, actions: np.ndarray, weights: np.ndarray) -> NetParams:
    """mean_i weights[i] * grad log pi(actions[i]|xs[i]); vectorized training path."""
    hidden = np.tanh(xs @ params.w1.T + params.b1)
    logits = hidden @ params.w2.T + params.b2
    z = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(z)
    probs /= probs.sum(axis=1, keepdims=True)
    d = -probs
    d[np.arange(len(actions)), actions] += 1.0
    d *= weights[:, None]
    n = len(actions)
    dh = d @ params.w2
    dpre = dh * (1.0 - hidden**2)
    return NetParams(
        w1=dpre.T @ xs / n,
        b1=dpre.mean(axis=0),
        w2=d.T @ hidden / n,
        b2=d.mean(axis=0),
    )


# ---------------------------------------------------------------------------
# task observation encoding

Grid = tuple[int, int, frozenset]  # (width, height, obstacle cells)


def encode_task_features(
    width: int,
    height: int,
    obstacles: frozenset,
    pos: tuple[float, float],
    facing: tuple[float, float],
    goal: tuple[float, float],
) -> np.ndarray:
    """The fixed 37-feature task observation (see module docstring)."""
    feats = np.empty(FEATURE_DIM)
    px, py = pos
    dx, dy = goal[0] - px, goal[1] - py
    dist = math.hypot(dx, dy)
    if dist > 1e-9:
        feats[0], feats[1] = dx / dist, dy / dist
    else:
        feats[0] = feats[1] = 0.0
    cx, cy = cell_of(px, py)
    for i, (ox, oy) in enumerate(DIR_OFFSETS):
        d = RAY_RANGE
        for k in range(1, RAY_RANGE + 1):
            nx, ny = cx + k * ox, cy + k * oy
            if not in_bounds(nx, ny, width, height) or (nx, ny) in obstacles:
                d = k
                break
        feats[2 + i] = (d - 1) / 3.5 - 1.0
    feats[10], feats[11] = facing
    j = 12
    for oy in range(-PATCH_RADIUS, PATCH_RADIUS + 1):
        for ox in range(-PATCH_RADIUS, PATCH_RADIUS + 1):
            nx, ny = cx + ox, cy + oy
            blocked = not in_bounds(nx, ny, width, height) or (nx, ny) in obstacles
            feats[j] = 1.0 if blocked else -1.0
            j += 1
    return feats


# ---------------------------------------------------------------------------
# training environments (single-task, single-agent)


class NavEnv:
    """Reach a goal cell on a grid. Reward is the per-step drop in straight
    line distance to the goal, a small step cost, and a terminal bonus."""

    STEP_COST = 0.05
    REACH_BONUS = 3.0

    def __init__(self, width: int, height: int, obstacles: frozenset, start: tuple[int, int], goal: tuple[int, int]):
        self.width, self.height, self.obstacles = width, height, frozenset(obstacles)
        self.goal_cell = goal
        self.cell = start
        self.facing = (1.0, 0.0)

    def _dist(self) -> float:
        return math.hypot(self.goal_cell[0] - self.cell[0], self.goal_cell[1] - self.cell[1])

    def features(self) -> np.ndarray:
        px, py = self.cell[0] + 0.5, self.cell[1] + 0.5
        gx, gy = self.goal_cell[0] + 0.5, self.goal_cell[1] + 0.5
        return encode_task_features(self.width, self.height, self.obstacles, (px, py), self.facing, (gx, gy))

    def step(self, verb: int) -> tuple[float, bool]:
        before = self._dist()
        if verb != NAV_WAIT:
            ox, oy = DIR_OFFSETS[verb]
            self.facing = DIR_VECTORS[verb]
            nx, ny = self.cell[0] + ox, self.cell[1] + oy
            if in_bounds(nx, ny, self.width, self.height) and (nx, ny) not in self.obstacles:
                self.cell = (nx, ny)
        reward = before - self._dist() - self.STEP_COST
        done = self.cell == self.goal_cell
        if done:
            reward += self.REACH_BONUS
        return reward, done


class ShootRangeEnv:
    """Stationary target inside weapon range; +1 per hit, 4 hits to finish.

    ``aim`` snaps facing onto the target; ``fire`` only connects while aimed.
    """

    KILL_HITS = 4

    def __init__(self, rng: np.random.Generator, width: int = 16, height: int = 16):
        self.width, self.height = width, height
        self.obstacles: frozenset = frozenset()
        self.pos = (width / 2.0, height / 2.0)
        angle = rng.uniform(0.0, 2.0 * math.pi)
        radius = rng.uniform(2.0, 7.5)
        self.target = (self.pos[0] + radius * math.cos(angle), self.pos[1] + radius * math.sin(angle))
        fangle = rng.uniform(0.0, 2.0 * math.pi)
        self.facing = (math.cos(fangle), math.sin(fangle))
        self.aimed = False
        self.hits = 0

    def features(self) -> np.ndarray:
        return encode_task_features(self.width, self.height, self.obstacles, self.pos, self.facing, self.target)

    def step(self, verb: int) -> tuple[float, bool]:
        if verb == SHOOT_AIM:
            dx, dy = self.target[0] - self.pos[0], self.target[1] - self.pos[1]
            norm = math.hypot(dx, dy)
            self.facing = (dx / norm, dy / norm)
            self.aimed = True
            return 0.0, False
        if verb == SHOOT_FIRE and self.aimed:
            self.hits += 1
            return 1.0, self.hits >= self.KILL_HITS
        return 0.0, False


def sample_nav_map(rng: np.random.Generator) -> Grid:
    """Training map mix: open rooms, scattered blocks, and walls with gaps."""
    width = height = int(rng.integers(10, 13))
    roll = rng.random()
    obstacles: set = set()
    if roll < 0.3:
        pass  # open room
    elif roll < 0.55:
        count = int(rng.integers(8, 16))
        for _ in range(count):
            obstacles.add((int(rng.integers(0, width)), int(rng.integers(0, height))))
    elif roll < 0.7:
        # full-height wall, 1-2 gap cells
        wall_x = int(rng.integers(width // 2 - 1, width // 2 + 2))
        gaps = {int(rng.integers(0, height)) for _ in range(int(rng.integers(1, 3)))}
        for y in range(height):
            if y not in gaps:
                obstacles.add((wall_x, y))
    else:
        # partial wall attached to one edge; go around the free end
        wall_x = int(rng.integers(width // 2 - 1, width // 2 + 2))
        span = int(rng.integers(height // 2, height - 1))
        cells = range(span) if rng.random() < 0.5 else range(height - span, height)
        for y in cells:
            obstacles.add((wall_x, y))
    return width, height, frozenset(obstacles)


def _sample_nav_episode(rng: np.random.Generator) -> NavEnv:
    for _ in range(64):
        width, height, obstacles = sample_nav_map(rng)
        free = [(x, y) for y in range(height) for x in range(width) if (x, y) not in obstacles]
        goal = free[int(rng.integers(len(free)))]
        field = bfs_distance_field(width, height, obstacles, goal)
        starts = [c for c in free if 1 <= field[c[1], c[0]] <= 14]
        if starts:
            start = starts[int(rng.integers(len(starts)))]
            return NavEnv(width, height, obstacles, start, goal)
    raise RuntimeError("could not sample a connected navigation episode")


# ---------------------------------------------------------------------------
# REINFORCE training


@dataclass(frozen=True)
class TrainSpec:
    """What to train and with which budget. ``task`` is move_to or shoot."""

    task: str = "move_to"
    hidden: int = 32
    lr: float = 0.3  # advantages are standardized, so this is scale-free
    iterations: int = 1600
    episodes_per_iter: int = 64
    max_steps: int = 40
    gamma: float = 0.95  # discount for the reward-to-go
    seed: int = 0


@dataclass
class TrainResult:
    params: NetParams
    mean_returns: list[float] = field(default_factory=list)
    iterations_run: int = 0


def _make_env(spec: TrainSpec, rng: np.random.Generator):
    if spec.task == "move_to":
        return _sample_nav_episode(rng)
    if spec.task == "shoot":
        return ShootRangeEnv(rng)
    raise ValueError(f"unknown trainable task {spec.task!r}")


def train_task_node(spec: TrainSpec) -> TrainResult:
    """Seeded REINFORCE (reward-to-go, mean baseline). Raises
    :class:`TrainingDiverged` with the iteration index on non-finite values."""
    rng = np.random.default_rng(spec.seed)
    out_dim = NAV_ACTION_DIM if spec.task == "move_to" else SHOOT_ACTION_DIM
    params = init_params(FEATURE_DIM, spec.hidden, out_dim, rng)
    result = TrainResult(params)

    for it in range(spec.iterations):
        xs: list[np.ndarray] = []
        acts: list[int] = []
        gos: list[float] = []
        ep_returns = []
        for _ in range(spec.episodes_per_iter):
            env = _make_env(spec, rng)
            rewards: list[float] = []
            for _ in range(spec.max_steps):
                x = env.features()
                a = sample_action(params, x, rng)
                reward, done = env.step(a)
                xs.append(x)
                acts.append(a)
                rewards.append(reward)
                if done:
                    break
            ep_returns.append(sum(rewards))
            go = 0.0
            tail: list[float] = []
            for r in reversed(rewards):
                go = r + spec.gamma * go
                tail.append(go)
            gos.extend(reversed(tail))

        gos_arr = np.asarray(gos)
        adv = gos_arr - gos_arr.mean()  # mean baseline
        adv /= adv.std() + 1e-8  # unit scale so lr is geometry-independent
        grad = _batch_policy_gradient(params, np.asarray(xs), np.asarray(acts), adv)
        params = NetParams(
            w1=params.w1 + spec.lr * grad.w1,
            b1=params.b1 + spec.lr * grad.b1,
            w2=params.w2 + spec.lr * grad.w2,
            b2=params.b2 + spec.lr * grad.b2,
        )
        if not np.isfinite(params.flat()).all():
            raise TrainingDiverged(it)
        result.params = params
        result.mean_returns.append(float(np.mean(ep_returns)))
        result.iterations_run = it + 1
    return result


def masked_nav_probs(
    params: NetParams,
    features: np.ndarray,
    cell: tuple[int, int],
    grid: Grid,
) -> np.ndarray:
    """Action distribution with moves into walls or out of bounds zeroed out.

    Deployment-side feasibility mask; training samples the raw distribution so
    collisions stay visible to the reward.
    """
    width, height, obstacles = grid
    probs = forward(params, features).copy()
    for verb, (dx, dy) in enumerate(DIR_OFFSETS):
        nx, ny = cell[0] + dx, cell[1] + dy
        if not in_bounds(nx, ny, width, height) or (nx, ny) in obstacles:
            probs[verb] = 0.0
    total = probs.sum()
    if total <= 0.0:
        probs[:] = 0.0
        probs[NAV_WAIT] = 1.0
        return probs
    return probs / total


def greedy_nav_rollout(
    params: NetParams,
    grid: Grid,
    start: tuple[int, int],
    goal: tuple[int, int],
    max_steps: int = 200,
) -> int | None:
    """Steps a masked-argmax policy takes to reach ``goal``, or None if it never does."""
    width, height, obstacles = grid
    env = NavEnv(width, height, obstacles, start, goal)
    for step_idx in range(max_steps):
        if env.cell == env.goal_cell:
            return step_idx
        probs = masked_nav_probs(params, env.features(), env.cell, grid)
        env.step(int(np.argmax(probs)))
    return max_steps if env.cell == env.goal_cell else None


# ---------------------------------------------------------------------------
# weight files

_HEADER = struct.Struct("<4sHH")  # magic, version, ndims


def save_params(params: NetParams, path: str | Path) -> None:
    """Write weights: magic, version, dims, little-endian float32, crc32."""
    in_dim, hidden, out_dim = params.dims
    blob = bytearray()
    blob += _HEADER.pack(WEIGHT_MAGIC, WEIGHT_VERSION, 3)
    blob += struct.pack("<3I", in_dim, hidden, out_dim)
    for arr in (params.w1, params.b1, params.w2, params.b2):
        blob += arr.astype("<f4").tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)))
    Path(path).write_bytes(bytes(blob))


def load_params(path: str | Path) -> NetParams:
    """Read a weight file; rejects bad magic/version/checksum and non-finite values."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size + 12 + 4:
        raise WeightError("bad-length", "file too short to be a weight file")
    magic, version, ndims = _HEADER.unpack_from(data, 0)
    if magic != WEIGHT_MAGIC:
        raise WeightError("bad-magic", f"expected {WEIGHT_MAGIC!r}, got {magic!r}")
    if version != WEIGHT_VERSION:
        raise WeightError("bad-version", f"unsupported weight version {version}")
    if ndims != 3:
        raise WeightError("bad-length", f"expected 3 dims, got {ndims}")
    (stored_crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) != stored_crc:
        raise WeightError("bad-checksum", "weight payload does not match its checksum")
    in_dim, hidden, out_dim = struct.unpack_from("<3I", data, _HEADER.size)
    counts = (hidden * in_dim, hidden, out_dim * hidden, out_dim)
    expected = _HEADER.size + 12 + 4 * sum(counts) + 4
    if len(data) != expected:
        raise WeightError("bad-length", f"expected {expected} bytes, got {len(data)}")
    offset = _HEADER.size + 12
    arrays = []
    for count in counts:
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=offset).astype(np.float64)
        if not np.isfinite(arr).all():
            raise WeightError("non-finite-weight", "weight file contains NaN or infinity")
        arrays.append(arr)
        offset += 4 * count
    w1, b1, w2, b2 = arrays
    return NetParams(
        w1=w1.reshape(hidden, in_dim),
        b1=b1,
        w2=w2.reshape(out_dim, hidden),
        b2=b2,
    )
