"""Synthetic instructional tasks, expert demonstrations and hindsight relabeling.

Each task is a set of steps (global action ids) with a partial order over
them. An expert performs the steps in a uniformly random order compatible
with that partial order. Observation ``t`` shows the scene after step ``t``
has been carried out::

    o_t = E[task] + P[{a_1, ..., a_t}] + noise

so the final observation (all steps done) is the same for every
demonstration of a task, whatever order the expert chose.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

log = logging.getLogger(__name__)


@dataclass
class WorldConfig:
    num_tasks: int = 8
    steps_per_task: tuple[int, int] = (4, 6)
    num_actions: int = 30
    obs_dim: int = 40
    noise_sigma: float = 0.05
    interchangeable_fraction: float = 0.3
    demos_per_task: int = 200
    seed: int = 0
    # multiplies the unit embeddings; None gives sqrt(obs_dim), i.e. roughly
    # unit variance per coordinate
    signal_scale: float | None = None

    def __post_init__(self):
        if self.signal_scale is None:
            self.signal_scale = float(np.sqrt(self.obs_dim))
        if self.signal_scale <= 0:
            raise ValueError("signal_scale must be positive")
        self.steps_per_task = tuple(int(x) for x in self.steps_per_task)
        lo, hi = self.steps_per_task
        if not 2 <= lo <= hi:
            raise ValueError(f"steps_per_task must satisfy 2 <= lo <= hi, got {self.steps_per_task}")
        if hi > self.num_actions:
            raise ValueError(f"tasks need up to {hi} distinct steps but num_actions is {self.num_actions}")
        if self.obs_dim < 2:
            raise ValueError("obs_dim must be >= 2")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not 0.0 <= self.interchangeable_fraction <= 1.0:
            raise ValueError("interchangeable_fraction must lie in [0, 1]")
        if self.num_tasks < 1:
            raise ValueError("num_tasks must be >= 1")


@dataclass
class TaskSpec:
    task_id: int
    steps: list[int]
    # (i, j): steps[i] must happen before steps[j]
    precedence: set[tuple[int, int]] = field(default_factory=set)

    def __post_init__(self):
        self._pred_mask = [0] * len(self.steps)
        for i, j in self.precedence:
            self._pred_mask[j] |= 1 << i
        if self.num_linear_extensions == 0:
            raise ValueError(f"task {self.task_id}: precedence graph has a cycle")

    @property
    def num_steps(self):
        return len(self.steps)

    @cached_property
    def _completions(self):
        # completions[mask] = number of ways to finish the task once the
        # steps in ``mask`` are done (mask must be a down-set)
        k = self.num_steps
        full = (1 << k) - 1
        counts = np.zeros(1 << k, dtype=object)
        counts[full] = 1
        for mask in range(full - 1, -1, -1):
            c = 0
            for i in self._available(mask):
                c += counts[mask | (1 << i)]
            counts[mask] = c
        return counts

    def _available(self, mask):
        return [
            i for i in range(self.num_steps)
            if not mask >> i & 1 and self._pred_mask[i] & ~mask == 0
        ]

    @property
    def num_linear_extensions(self) -> int:
        return int(self._completions[0])

    def is_valid_order(self, actions) -> bool:
        pos = {a: t for t, a in enumerate(actions)}
        if sorted(pos) != sorted(self.steps) or len(actions) != self.num_steps:
            return False
        return all(pos[self.steps[i]] < pos[self.steps[j]] for i, j in self.precedence)

    def linear_extensions(self):
        """All valid step orders (as action id lists). Exponential; for tests."""
        out = []

        def rec(mask, prefix):
            if mask == (1 << self.num_steps) - 1:
                out.append([self.steps[i] for i in prefix])
                return
            for i in self._available(mask):
                rec(mask | (1 << i), prefix + [i])
        rec(0, [])
        return out

    def sample_order(self, rng) -> list[int]:
        """Uniform draw from the linear extensions, via completion counts."""
        counts = self._completions
        mask, order = 0, []
        for _ in range(self.num_steps):
            cand = self._available(mask)
            w = np.array([float(counts[mask | (1 << i)]) for i in cand])
            i = cand[rng.choice(len(cand), p=w / w.sum())]
            order.append(i)
            mask |= 1 << i
        return [self.steps[i] for i in order]


@dataclass(eq=False)
class Trajectory:
    task_id: int
    observations: np.ndarray
    actions: np.ndarray
    relabeled: bool = False

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        if self.observations.ndim != 2:
            raise ValueError("observations must be a (T, obs_dim) array")
        if len(self.observations) != len(self.actions):
            raise ValueError(
                f"{len(self.observations)} observations but {len(self.actions)} actions")
        if len(self.actions) < 2:
            raise ValueError("a trajectory needs at least two steps")

    def __len__(self):
        return len(self.actions)

    def __eq__(self, other):
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (
            self.task_id == other.task_id
            and self.relabeled == other.relabeled
            and np.array_equal(self.actions, other.actions)
            and self.observations.shape == other.observations.shape
            and self.observations.tobytes() == other.observations.tobytes()
        )

    def window(self, start, length, relabeled=None):
        sl = slice(start, start + length)
        return Trajectory(self.task_id, self.observations[sl].copy(), self.actions[sl].copy(),
                          self.relabeled if relabeled is None else relabeled)


def _unit(rng, d):
    v = rng.standard_normal(d)
    return v / np.linalg.norm(v)


def generate_world(config: WorldConfig) -> list[TaskSpec]:
    rng = np.random.default_rng([config.seed, 1])
    lo, hi = config.steps_per_task
    tasks = []
    for tid in range(config.num_tasks):
        k = int(rng.integers(lo, hi + 1))
        steps = [int(a) for a in rng.choice(config.num_actions, size=k, replace=False)]
        n_edges = int(round((1.0 - config.interchangeable_fraction) * (k - 1)))
        chosen = rng.choice(k - 1, size=n_edges, replace=False)
        precedence = {(int(i), int(i) + 1) for i in chosen}
        tasks.append(TaskSpec(tid, steps, precedence))
    return tasks


class World:
    """Tasks plus the fixed observation model of one synthetic world."""

    def __init__(self, config: WorldConfig):
        self.config = config
        self.tasks = generate_world(config)
        emb_rng = np.random.default_rng([config.seed, 2])
        self.task_embedding = np.stack([_unit(emb_rng, config.obs_dim) for _ in self.tasks])
        self._progress: dict[frozenset, np.ndarray] = {}

    def progress_embedding(self, completed) -> np.ndarray:
        key = frozenset(int(a) for a in completed)
        v = self._progress.get(key)
        if v is None:
            ids = sorted(key)
            rng = np.random.default_rng([self.config.seed, 3, len(ids), *ids])
            v = self._progress[key] = _unit(rng, self.config.obs_dim)
        return v

    def emit(self, task_id, completed, rng=None) -> np.ndarray:
        o = self.config.signal_scale * (self.task_embedding[task_id] + self.progress_embedding(completed))
        if self.config.noise_sigma > 0:
            o = o + self.config.noise_sigma * rng.standard_normal(self.config.obs_dim)
        return o

    def goal_observation(self, task_id):
        """Noise-free observation of a finished task."""
        steps = self.tasks[task_id].steps
        return self.config.signal_scale * (self.task_embedding[task_id] + self.progress_embedding(steps))


def sample_expert_trajectory(world: World, task: TaskSpec, rng) -> Trajectory:
    actions = task.sample_order(rng)
    obs = [world.emit(task.task_id, actions[: t + 1], rng) for t in range(len(actions))]
    return Trajectory(task.task_id, np.stack(obs), np.array(actions))


def sample_dataset(world: World, demos_per_task=None, seed=None) -> list[Trajectory]:
    """Expert demonstrations for every task, one RNG stream per trajectory."""
    n = world.config.demos_per_task if demos_per_task is None else demos_per_task
    master = np.random.default_rng([world.config.seed if seed is None else seed, 4])
    streams = master.spawn(len(world.tasks) * n)
    out = []
    for ti, task in enumerate(world.tasks):
        for j in range(n):
            out.append(sample_expert_trajectory(world, task, streams[ti * n + j]))
    return out


@dataclass
class RelabelReport:
    added: int = 0
    skipped: int = 0


def relabel_pairs(T):
    """Index pairs (m, n), n >= m + 2, that give a proper sub-trajectory."""
    return [(m, n) for m in range(T) for n in range(m + 2, T) if (m, n) != (0, T - 1)]


def her_relabel(dataset, fraction=0.30, rng=None, report=None):
    """Append relabeled sub-trajectories for a random ``fraction`` of ``dataset``.

    Each chosen trajectory contributes at most one slice ``o_{m:n}`` whose
    end observation becomes the new goal. Originals are kept.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    rng = np.random.default_rng() if rng is None else rng
    report = RelabelReport() if report is None else report
    n_pick = int(round(fraction * len(dataset)))
    picked = rng.choice(len(dataset), size=n_pick, replace=False) if n_pick else []
    extra = []
    for idx in sorted(int(i) for i in picked):
        traj = dataset[idx]
        pairs = relabel_pairs(len(traj))
        if not pairs:
            report.skipped += 1
            continue
        m, n = pairs[rng.integers(len(pairs))]
        extra.append(traj.window(m, n - m + 1, relabeled=True))
    report.added += len(extra)
    if report.skipped:
        log.info("her_relabel: skipped %d trajectories too short to relabel", report.skipped)
    return list(dataset) + extra


# ------------------------------------------------------------------ file io

class TrajectoryFormatError(ValueError):
    pass


def _encode_obs(obs):
    return [[float(x).hex() for x in row] for row in obs]


def _decode_float(x):
    if isinstance(x, str):
        return float.fromhex(x)
    if isinstance(x, (int, float)) and not isinstance(x, bool):
        return float(x)
    raise TypeError(f"not a number: {x!r}")


def save_trajectories(path, dataset):
    with open(path, "w", encoding="utf-8") as fh:
        for traj in dataset:
            rec = {
                "task_id": int(traj.task_id),
                "obs": _encode_obs(traj.observations),
                "actions": [int(a) for a in traj.actions],
                "relabeled": bool(traj.relabeled),
            }
            fh.write(json.dumps(rec) + "\n")


def load_trajectories(path, num_actions=None) -> list[Trajectory]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            out.append(_parse_record(line, lineno, num_actions))
    return out


def _parse_record(line, lineno, num_actions):
    def fail(fieldname, msg):
        raise TrajectoryFormatError(f"line {lineno}: field {fieldname!r}: {msg}")

    try:
        rec = json.loads(line)
    except json.JSONDecodeError as e:
        raise TrajectoryFormatError(f"line {lineno}: invalid JSON ({e})") from None
    if not isinstance(rec, dict):
        raise TrajectoryFormatError(f"line {lineno}: record is not an object")
    for key in ("task_id", "obs", "actions", "relabeled"):
        if key not in rec:
            fail(key, "missing")
    if not isinstance(rec["task_id"], int) or isinstance(rec["task_id"], bool) or rec["task_id"] < 0:
        fail("task_id", f"expected non-negative integer, got {rec['task_id']!r}")
    if not isinstance(rec["relabeled"], bool):
        fail("relabeled", "expected boolean")
    acts = rec["actions"]
    if not isinstance(acts, list) or not all(isinstance(a, int) and not isinstance(a, bool) for a in acts):
        fail("actions", "expected a list of integers")
    for a in acts:
        if a < 0 or (num_actions is not None and a >= num_actions):
            fail("actions", f"action id {a} outside [0, {num_actions})")
    try:
        obs = np.array([[_decode_float(x) for x in row] for row in rec["obs"]], dtype=np.float64)
    except (TypeError, ValueError) as e:
        fail("obs", str(e))
    if obs.ndim != 2 or len(obs) != len(acts):
        fail("obs", f"expected {len(acts)} rows of equal length")
    try:
        return Trajectory(rec["task_id"], obs, np.array(acts, dtype=np.int64), rec["relabeled"])
    except ValueError as e:
        fail("actions", str(e))
