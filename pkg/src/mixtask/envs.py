"""Point-robot task suites.

A 2D double integrator stands in for the locomotion simulators.  Four base
tasks with qualitatively different reward forms cover the parametric,
out-of-distribution, non-stationary and non-parametric regimes.

The per-state functions (:func:`reset`, :func:`step`, :func:`maybe_switch_task`)
are the reference semantics; :class:`BatchPointEnv` runs many episodes in lock
step with the same arithmetic and is what the trainer uses.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from dataclasses import dataclass
from typing import IO, Iterable, Sequence

import numpy as np

DT = 0.1
A_SCALE = 5.0
V_MAX = 10.0
STATE_DIM = 4
ACTION_DIM = 2
# Fixed feature scaling for (px, py, vx, vy) before they reach any network.
OBS_SCALE = np.array([10.0, 10.0, 3.0, 3.0])


class BaseTask(enum.IntEnum):
    VELOCITY = 0
    GOAL = 1
    ANGLE = 2
    BURST = 3


class Regime(str, enum.Enum):
    PARAMETRIC = "parametric"
    OOD = "ood"
    NONSTATIONARY = "nonstationary"
    NONPARAMETRIC = "nonparametric"


@dataclass(frozen=True)
class TaskSpec:
    base_task: BaseTask
    goal: tuple[float, ...]
    direction: int = 1
    nonstationary: bool = False
    change_period: int = 100
    change_prob: float = 0.5

    @property
    def param(self) -> float:
        """Scalar task parameter (speed, goal radius or target angle)."""
        if self.base_task == BaseTask.GOAL:
            return math.hypot(*self.goal)
        return self.goal[0]

    def goal_vector(self) -> np.ndarray:
        g = np.zeros(2)
        g[: len(self.goal)] = self.goal
        return g


Interval = tuple[float, float]


@dataclass(frozen=True)
class BaseTaskRange:
    """Goal ranges for one base task.

    The sampled scalar is the target speed (VELOCITY, BURST), the goal radius
    (GOAL, with a uniform polar angle) or the target heading (ANGLE).
    """

    base_task: BaseTask
    train: tuple[Interval, ...]
    test: tuple[Interval, ...] | None = None

    def intervals(self, split: str) -> tuple[Interval, ...]:
        if split == "train":
            return self.train
        if split == "test":
            if self.test is None:
                raise ValueError(f"{self.base_task.name} has no test range")
            return self.test
        raise ValueError(f"unknown split {split!r}")

    def contains(self, value: float, split: str) -> bool:
        return any(lo <= value <= hi for lo, hi in self.intervals(split))


@dataclass(frozen=True)
class TaskDistributionSpec:
    name: str
    regime: Regime
    base_tasks: tuple[BaseTaskRange, ...]
    change_period: int = 100
    change_prob: float = 0.5

    def __post_init__(self):
        if self.regime == Regime.OOD:
            for bt in self.base_tasks:
                for lo, hi in bt.intervals("test"):
                    for tlo, thi in bt.train:
                        if lo < thi and tlo < hi:
                            raise ValueError(f"{self.name}: test interval {(lo, hi)} overlaps train {(tlo, thi)}")
        if self.regime == Regime.NONPARAMETRIC and len({b.base_task for b in self.base_tasks}) < 2:
            raise ValueError(f"{self.name}: non-parametric suites need >= 2 base tasks")

    def range_for(self, base_task: BaseTask) -> BaseTaskRange:
        for bt in self.base_tasks:
            if bt.base_task == base_task:
                return bt
        raise KeyError(base_task)


def _sample_interval_union(intervals: Sequence[Interval], rng: np.random.Generator) -> float:
    lengths = np.array([hi - lo for lo, hi in intervals], dtype=float)
    idx = 0 if len(intervals) == 1 else int(rng.choice(len(intervals), p=lengths / lengths.sum()))
    lo, hi = intervals[idx]
    return float(rng.uniform(lo, hi))


_QUARTER = math.pi / 4
SUITES: dict[str, TaskDistributionSpec] = {
    "point-vel": TaskDistributionSpec(
        "point-vel", Regime.PARAMETRIC,
        (BaseTaskRange(BaseTask.VELOCITY, ((0.0, 3.0),), ((0.0, 3.0),)),)),
    "point-vel-ood": TaskDistributionSpec(
        "point-vel-ood", Regime.OOD,
        (BaseTaskRange(BaseTask.VELOCITY, ((2.0, 4.0),), ((1.0, 2.0), (4.0, 5.0))),)),
    "point-vel-nonstat": TaskDistributionSpec(
        "point-vel-nonstat", Regime.NONSTATIONARY,
        (BaseTaskRange(BaseTask.VELOCITY, ((0.0, 3.0),), ((0.0, 3.0),)),),
        change_period=100, change_prob=0.5),
    "point-multi": TaskDistributionSpec(
        "point-multi", Regime.NONPARAMETRIC,
        (BaseTaskRange(BaseTask.VELOCITY, ((1.0, 3.0),), ((1.0, 3.0),)),
         BaseTaskRange(BaseTask.GOAL, ((1.0, 3.0),), ((1.0, 3.0),)),
         BaseTaskRange(BaseTask.ANGLE, ((_QUARTER, 3 * _QUARTER), (-3 * _QUARTER, -_QUARTER)),
                       ((_QUARTER, 3 * _QUARTER), (-3 * _QUARTER, -_QUARTER))),
         BaseTaskRange(BaseTask.BURST, ((1.0, 3.0),), ((1.0, 3.0),)))),
}


def _goal_from_param(bt: BaseTask, value: float, rng: np.random.Generator) -> tuple[float, ...]:
    if bt == BaseTask.GOAL:
        angle = float(rng.uniform(0.0, 2 * math.pi))
        return (value * math.cos(angle), value * math.sin(angle))
    return (value,)


def sample_tasks(dist: TaskDistributionSpec | str, n: int, split: str,
                 rng: np.random.Generator) -> list[TaskSpec]:
    if isinstance(dist, str):
        dist = SUITES[dist]
    if n < 1:
        raise ValueError("n must be >= 1")
    for bt in dist.base_tasks:
        bt.intervals(split)  # raises when the split is missing
    nonstat = dist.regime == Regime.NONSTATIONARY
    tasks = []
    for _ in range(n):
        bt = dist.base_tasks[int(rng.integers(len(dist.base_tasks)))] if len(dist.base_tasks) > 1 \
            else dist.base_tasks[0]
        value = _sample_interval_union(bt.intervals(split), rng)
        tasks.append(TaskSpec(bt.base_task, _goal_from_param(bt.base_task, value, rng),
                              nonstationary=nonstat, change_period=dist.change_period,
                              change_prob=dist.change_prob))
    return tasks


# --- dynamics and rewards -------------------------------------------------

def _wrap_angle(x):
    return (np.asarray(x) + np.pi) % (2 * np.pi) - np.pi


def reward_arrays(base: np.ndarray, goal: np.ndarray, direction: np.ndarray,
                  pos: np.ndarray, vel: np.ndarray) -> np.ndarray:
    """Vectorised reward for arrays of shape (N,), (N,2), (N,), (N,2), (N,2)."""
    r = np.empty(len(base))
    m = base == BaseTask.VELOCITY
    r[m] = -np.abs(direction[m] * goal[m, 0] - vel[m, 0])
    m = base == BaseTask.GOAL
    r[m] = -np.linalg.norm(goal[m] - pos[m], axis=1)
    m = base == BaseTask.ANGLE
    heading = np.arctan2(vel[m, 1], vel[m, 0])
    r[m] = -np.abs(_wrap_angle(goal[m, 0] - heading))
    m = base == BaseTask.BURST
    r[m] = -np.abs(goal[m, 0] - np.abs(vel[m, 1]))
    return r


def integrate(pos: np.ndarray, vel: np.ndarray, action: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    new_pos = pos + DT * vel
    new_vel = np.clip(vel + DT * A_SCALE * action, -V_MAX, V_MAX)
    return new_pos, new_vel


def reward_bound(dist: TaskDistributionSpec | str, max_path_length: int) -> float:
    """Upper bound on |reward| reachable within one episode."""
    if isinstance(dist, str):
        dist = SUITES[dist]
    max_speed_norm = V_MAX * math.sqrt(2)
    bound = 0.0
    for bt in dist.base_tasks:
        hi = max(abs(v) for split in ("train", "test") if split == "train" or bt.test
                 for iv in bt.intervals(split) for v in iv)
        if bt.base_task in (BaseTask.VELOCITY, BaseTask.BURST):
            bound = max(bound, hi + V_MAX)
        elif bt.base_task == BaseTask.GOAL:
            bound = max(bound, hi + DT * max_speed_norm * max_path_length)
        else:
            bound = max(bound, math.pi)
    return bound


@dataclass(frozen=True)
class PointEnvState:
    position: np.ndarray
    velocity: np.ndarray
    t: int
    active_task: TaskSpec
    max_path_length: int = 200
    task_changed: bool = False
    action_clipped: bool = False

    @property
    def obs(self) -> np.ndarray:
        return np.concatenate([self.position, self.velocity])


def reset(task: TaskSpec, rng: np.random.Generator | None = None, max_path_length: int = 200) -> PointEnvState:
    return PointEnvState(np.zeros(2), np.zeros(2), 0, task, max_path_length)


def _task_arrays(tasks: Sequence[TaskSpec]):
    base = np.array([int(t.base_task) for t in tasks])
    goal = np.array([t.goal_vector() for t in tasks]).reshape(len(tasks), 2)
    direction = np.array([t.direction for t in tasks], dtype=float)
    return base, goal, direction


def step(state: PointEnvState, action, rng: np.random.Generator | None = None):
    """Advance one step.  Returns ``(next_state, reward, done)``."""
    action = np.asarray(action, dtype=float)
    clipped = np.clip(action, -1.0, 1.0)
    pos, vel = integrate(state.position[None], state.velocity[None], clipped[None])
    base, goal, direction = _task_arrays([state.active_task])
    reward = float(reward_arrays(base, goal, direction, pos, vel)[0])
    t = state.t + 1
    nxt = PointEnvState(pos[0], vel[0], t, state.active_task, state.max_path_length,
                        task_changed=False, action_clipped=bool(np.any(clipped != action)))
    return nxt, reward, t >= state.max_path_length


def _resample_goal(task: TaskSpec, rng: np.random.Generator, dist: TaskDistributionSpec | None) -> TaskSpec:
    bt_range = dist.range_for(task.base_task) if dist is not None else _default_range(task)
    value = _sample_interval_union(bt_range.train, rng)
    return dataclasses.replace(task, goal=_goal_from_param(task.base_task, value, rng))


def _default_range(task: TaskSpec) -> BaseTaskRange:
    for dist in SUITES.values():
        if dist.regime == Regime.NONSTATIONARY:
            try:
                return dist.range_for(task.base_task)
            except KeyError:
                pass
    return SUITES["point-multi"].range_for(task.base_task)


def maybe_switch_task(state: PointEnvState, rng: np.random.Generator,
                      dist: TaskDistributionSpec | None = None) -> PointEnvState:
    task = state.active_task
    if not task.nonstationary:
        return state
    if state.t <= 0 or state.t >= state.max_path_length or state.t % task.change_period:
        return state
    if rng.random() >= task.change_prob:
        return state
    return dataclasses.replace(state, active_task=_resample_goal(task, rng, dist), task_changed=True)


# --- reference controllers -----------------------------------------------

def _speed_controller(target_vel: np.ndarray, vel: np.ndarray) -> np.ndarray:
    return np.clip((target_vel - vel) / (DT * A_SCALE), -1.0, 1.0)


def oracle_action_arrays(base, goal, direction, pos, vel) -> np.ndarray:
    """Hand-coded controller with privileged knowledge of the active task."""
    target = np.zeros_like(vel)
    m = base == BaseTask.VELOCITY
    target[m, 0] = direction[m] * goal[m, 0]
    m = base == BaseTask.BURST
    target[m, 1] = goal[m, 0]
    m = base == BaseTask.ANGLE
    target[m, 0] = np.cos(goal[m, 0])
    target[m, 1] = np.sin(goal[m, 0])
    m = base == BaseTask.GOAL
    if m.any():
        err = goal[m] - pos[m]
        dist = np.linalg.norm(err, axis=1, keepdims=True)
        # brake early enough to stop at the goal under the acceleration limit
        speed = np.minimum(np.minimum(0.5 * np.sqrt(2 * A_SCALE * dist), dist / DT), 3.0)
        target[m] = err / np.maximum(dist, 1e-9) * speed
    return _speed_controller(target, vel)


def oracle_action(state: PointEnvState) -> np.ndarray:
    base, goal, direction = _task_arrays([state.active_task])
    return oracle_action_arrays(base, goal, direction, state.position[None], state.velocity[None])[0]


# --- batched episodes -----------------------------------------------------

class BatchPointEnv:
    """Lock-step episodes for a list of tasks.

    Each episode owns an rng stream, used only for non-stationary goal
    switches, so results do not depend on how episodes are grouped.
    """

    def __init__(self, tasks: Sequence[TaskSpec], rngs: Sequence[np.random.Generator],
                 max_path_length: int, dist: TaskDistributionSpec | None = None):
        if len(tasks) != len(rngs):
            raise ValueError("one rng per task is required")
        self.initial_tasks = list(tasks)
        self.rngs = list(rngs)
        self.max_path_length = max_path_length
        self.dist = dist
        self.reset()

    def __len__(self):
        return len(self.initial_tasks)

    def reset(self) -> np.ndarray:
        n = len(self.initial_tasks)
        self.tasks = list(self.initial_tasks)
        self.pos = np.zeros((n, 2))
        self.vel = np.zeros((n, 2))
        self.t = 0
        self._refresh()
        return self.obs

    def _refresh(self):
        self.base, self.goal, self.direction = _task_arrays(self.tasks)

    @property
    def obs(self) -> np.ndarray:
        return np.concatenate([self.pos, self.vel], axis=1)

    def step(self, actions: np.ndarray):
        """Returns ``(next_obs, reward, done, task_changed)``; switches apply after the step."""
        actions = np.clip(np.asarray(actions, dtype=float), -1.0, 1.0)
        self.pos, self.vel = integrate(self.pos, self.vel, actions)
        reward = reward_arrays(self.base, self.goal, self.direction, self.pos, self.vel)
        self.t += 1
        done = self.t >= self.max_path_length
        changed = np.zeros(len(self.tasks), dtype=bool)
        if not done:
            for i, task in enumerate(self.tasks):
                if task.nonstationary and self.t % task.change_period == 0:
                    if self.rngs[i].random() < task.change_prob:
                        self.tasks[i] = _resample_goal(task, self.rngs[i], self.dist)
                        changed[i] = True
            if changed.any():
                self._refresh()
        return self.obs, reward, np.full(len(self.tasks), done), changed

    def oracle_actions(self) -> np.ndarray:
        return oracle_action_arrays(self.base, self.goal, self.direction, self.pos, self.vel)


def obs_features(obs):
    """Scale raw (px, py, vx, vy) for network inputs; works on numpy and torch."""
    return obs / (OBS_SCALE if isinstance(obs, np.ndarray) else obs.new_tensor(OBS_SCALE))


def run_controller(tasks: Sequence[TaskSpec], controller: str, max_path_length: int,
                   rngs: Sequence[np.random.Generator] | None = None,
                   dist: TaskDistributionSpec | None = None) -> np.ndarray:
    """Undiscounted returns of the privileged oracle (``"oracle"``) or the idle policy (``"zero"``)."""
    if rngs is None:
        rngs = [np.random.default_rng(0) for _ in tasks]
    env = BatchPointEnv(tasks, rngs, max_path_length, dist)
    total = np.zeros(len(tasks))
    for _ in range(max_path_length):
        act = env.oracle_actions() if controller == "oracle" else np.zeros((len(tasks), 2))
        _, r, _, _ = env.step(act)
        total += r
    return total


# --- trace export ---------------------------------------------------------

def write_trace(fh: IO[str], records: Iterable[dict]) -> None:
    """JSON-lines trace, one step per line: t, s, a, r, s', done, task_goal, task_changed."""
    for rec in records:
        fh.write(json.dumps(rec) + "\n")


def read_trace(fh: IO[str]) -> list[dict]:
    return [json.loads(line) for line in fh if line.strip()]
