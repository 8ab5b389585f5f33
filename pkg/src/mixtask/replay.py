"""Per-task trajectory store shared by the inference and policy updates."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Hashable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import RunningNormalizer
from .inference import Belief, SequenceBatch, TaskInference, transition_features

FIELDS = ("obs", "actions", "rewards", "next_obs", "dones", "task_changed")


class IntegrityError(ValueError):
    pass


class NotReady(RuntimeError):
    """Not enough data yet; retry after more collection."""


@dataclass(frozen=True)
class TrajectorySegment:
    obs: np.ndarray           # (L, 4)
    actions: np.ndarray       # (L, 2)
    rewards: np.ndarray       # (L,)
    next_obs: np.ndarray      # (L, 4)
    dones: np.ndarray         # (L,) bool
    task_changed: np.ndarray  # (L,) bool
    task_goals: np.ndarray | None = None  # (L, 2) active goal per step, for traces

    def __len__(self):
        return len(self.rewards)

    def window(self, start: int, length: int) -> "TrajectorySegment":
        sl = slice(start, start + length)
        return TrajectorySegment(*(getattr(self, f)[sl] for f in FIELDS),
                                 None if self.task_goals is None else self.task_goals[sl])

    def check(self):
        if len(self) == 0:
            raise IntegrityError("empty segment")
        n = len(self)
        for f in FIELDS:
            if len(getattr(self, f)) != n:
                raise IntegrityError(f"field {f} has length {len(getattr(self, f))}, expected {n}")
        if n > 1 and not np.array_equal(self.next_obs[:-1], self.obs[1:]):
            bad = int(np.flatnonzero(np.any(self.next_obs[:-1] != self.obs[1:], axis=1))[0])
            raise IntegrityError(f"next_obs[{bad}] does not match obs[{bad + 1}]")

    def trace_records(self, start_t: int = 0):
        for i in range(len(self)):
            yield {"t": start_t + i, "s": self.obs[i].tolist(), "a": self.actions[i].tolist(),
                   "r": float(self.rewards[i]), "s'": self.next_obs[i].tolist(), "done": bool(self.dones[i]),
                   "task_goal": None if self.task_goals is None else self.task_goals[i].tolist(),
                   "task_changed": bool(self.task_changed[i])}

    @classmethod
    def from_records(cls, records) -> "TrajectorySegment":
        records = list(records)
        goals = [r.get("task_goal") for r in records]
        return cls(np.array([r["s"] for r in records], dtype=float),
                   np.array([r["a"] for r in records], dtype=float),
                   np.array([r["r"] for r in records], dtype=float),
                   np.array([r["s'"] for r in records], dtype=float),
                   np.array([r["done"] for r in records], dtype=bool),
                   np.array([r["task_changed"] for r in records], dtype=bool),
                   None if any(g is None for g in goals) else np.array(goals, dtype=float))


class TaskBuffer:
    """FIFO ring of whole trajectories for one task."""

    def __init__(self, task_id: Hashable, capacity: int):
        self.task_id = task_id
        self.capacity = capacity
        self.trajectories: deque[TrajectorySegment] = deque()
        self.size = 0
        self.arrivals = 0
        self.evictions = 0

    def add(self, segment: TrajectorySegment):
        segment.check()
        if len(segment) > self.capacity:
            raise IntegrityError(f"trajectory of {len(segment)} steps exceeds capacity {self.capacity}")
        self.trajectories.append(segment)
        self.size += len(segment)
        self.arrivals += len(segment)
        while self.size > self.capacity:
            old = self.trajectories.popleft()
            self.size -= len(old)
            self.evictions += len(old)


class ReplayBuffer:
    def __init__(self, capacity_per_task: int = 100_000):
        self.capacity = capacity_per_task
        self.tasks: dict[Hashable, TaskBuffer] = {}
        self.reward_stats = RunningNormalizer()

    def __contains__(self, task_id):
        return task_id in self.tasks

    def size(self, task_id=None) -> int:
        if task_id is not None:
            return self.tasks[task_id].size if task_id in self.tasks else 0
        return sum(b.size for b in self.tasks.values())

    def task_ids(self) -> list:
        return list(self.tasks)

    def content_hash(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for tid, buf in self.tasks.items():
            h.update(repr(tid).encode())
            for seg in buf.trajectories:
                for f in FIELDS:
                    h.update(np.ascontiguousarray(getattr(seg, f)).tobytes())
        return h.hexdigest()

    # --- persistence ---------------------------------------------------------

    def save(self, directory: str | Path):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for tid, buf in self.tasks.items():
            with open(directory / f"task_{tid}.jsonl", "w") as fh:
                for n, seg in enumerate(buf.trajectories):
                    for rec in seg.trace_records():
                        fh.write(json.dumps({"traj": n, **rec}) + "\n")

    @classmethod
    def load(cls, directory: str | Path, capacity_per_task: int = 100_000) -> "ReplayBuffer":
        buf = cls(capacity_per_task)
        for path in sorted(Path(directory).glob("task_*.jsonl")):
            tid = path.stem[len("task_"):]
            tid = int(tid) if tid.lstrip("-").isdigit() else tid
            groups: dict[int, list] = {}
            with open(path) as fh:
                for line in fh:
                    if line.strip():
                        rec = json.loads(line)
                        groups.setdefault(rec["traj"], []).append(rec)
            for n in sorted(groups):
                add_trajectory(buf, tid, TrajectorySegment.from_records(groups[n]), update_stats=True)
        return buf


def add_trajectory(buf: ReplayBuffer, task_id: Hashable, segment: TrajectorySegment,
                   update_stats: bool = True) -> ReplayBuffer:
    if task_id not in buf.tasks:
        buf.tasks[task_id] = TaskBuffer(task_id, buf.capacity)
    buf.tasks[task_id].add(segment)
    if update_stats:
        buf.reward_stats.update_many(segment.rewards)
    return buf


@dataclass
class WindowRef:
    task_id: Hashable
    traj: int
    start: int


def _pick_windows(buf: ReplayBuffer, task_ids: Sequence, batch: int, length: int, rng: np.random.Generator):
    refs = []
    for _ in range(batch):
        tid = task_ids[int(rng.integers(len(task_ids)))]
        tb = buf.tasks.get(tid)
        long_enough = [i for i, seg in enumerate(tb.trajectories) if len(seg) >= length] if tb else []
        if not long_enough:
            raise NotReady(f"task {tid!r} has no trajectory of length >= {length}")
        traj = long_enough[int(rng.integers(len(long_enough)))]
        start = int(rng.integers(len(tb.trajectories[traj]) - length + 1))
        refs.append(WindowRef(tid, traj, start))
    return refs


def sample_sequences(buf: ReplayBuffer, task_ids: Sequence, batch: int, length: int,
                     rng: np.random.Generator) -> tuple[dict[str, np.ndarray], list[WindowRef]]:
    """Uniform trajectory, then uniform contiguous window of ``length`` steps."""
    if not task_ids:
        raise NotReady("no tasks requested")
    refs = _pick_windows(buf, task_ids, batch, length, rng)
    windows = [buf.tasks[r.task_id].trajectories[r.traj].window(r.start, length) for r in refs]
    out = {f: np.stack([getattr(w, f) for w in windows]) for f in FIELDS}
    return out, refs


def windows_to_batch(windows: dict[str, np.ndarray], dtype=torch.float32) -> SequenceBatch:
    return SequenceBatch.from_numpy(windows["obs"], windows["actions"], windows["rewards"],
                                    windows["next_obs"], dtype=dtype)


def _segment_features(seg: TrajectorySegment, dtype) -> torch.Tensor:
    return transition_features(*(torch.as_tensor(x, dtype=dtype)
                                 for x in (seg.obs, seg.actions, seg.rewards, seg.next_obs)))


@torch.no_grad()
def _unroll_spans(model: TaskInference, feats: list[torch.Tensor | None], lengths: np.ndarray) -> Belief:
    """Fresh-hidden unroll over right-aligned, left-padded spans; empty spans get the prior."""
    n = len(feats)
    prior = model.prior(n)
    T = int(lengths.max()) if n else 0
    if T == 0:
        return prior
    dtype = model.encoder.embed.weight.dtype
    x = torch.zeros(n, T, model.encoder.input_size, dtype=dtype)
    for i, f in enumerate(feats):
        if lengths[i]:
            x[i, T - lengths[i]:] = f
    valid = torch.as_tensor(np.arange(T)[None, :] >= (T - lengths)[:, None])
    hidden = model.initial_state(n).hidden
    for t in range(T):
        step_mask = valid[:, t]
        if step_mask.all():
            hidden = model.encoder.recur(x[:, t], hidden)
        elif step_mask.any():
            # padded steps leave the hidden state untouched, which equals starting later
            hidden = torch.where(step_mask[:, None], model.encoder.recur(x[:, t], hidden), hidden)
    return Belief.where(torch.as_tensor(lengths > 0), model.encoder.heads(hidden), prior)


@torch.no_grad()
def _prefix_beliefs(model: TaskInference, feats: list[torch.Tensor], lengths: np.ndarray) -> Belief:
    """Beliefs before every step of left-aligned spans: entry t has seen steps [0, t); entry 0 is the prior.

    Entries past a span's length are padding and must be ignored by the caller.
    """
    n, T = len(feats), int(lengths.max())
    dtype = model.encoder.embed.weight.dtype
    x = torch.zeros(n, T, model.encoder.input_size, dtype=dtype)
    for i, f in enumerate(feats):
        x[i, :lengths[i]] = f[:lengths[i]]
    inputs = F.relu(model.encoder.embed(x))
    hidden, states = model.initial_state(n).hidden, []
    for t in range(T):
        hidden = model.encoder.gru(inputs[:, t], hidden)
        states.append(hidden)
    after = model.encoder.heads(torch.stack(states, 1))
    prior = model.prior(n)
    return Belief(*(torch.cat([p[:, None], a], 1) for p, a in ((prior.cat_probs, after.cat_probs),
                                                              (prior.means, after.means),
                                                              (prior.log_stds, after.log_stds))))


@torch.no_grad()
def context_beliefs(model: TaskInference, contexts: list[TrajectorySegment | None], max_len: int) -> Belief:
    """Belief after unrolling a fresh encoder over the last ``max_len`` steps of each context."""
    dtype = model.encoder.embed.weight.dtype
    lengths = np.array([0 if c is None else min(len(c), max_len) for c in contexts], dtype=np.int64)
    feats = [None if L == 0 else _segment_features(c.window(len(c) - L, L), dtype) for c, L in zip(contexts, lengths)]
    return _unroll_spans(model, feats, lengths)


class BeliefCache:
    """Memoises windowed beliefs per (trajectory, step) for one encoder version.

    Entries are dropped whenever the model's ``version`` counter moves, so a
    cached belief always equals a fresh recomputation from the current weights.
    """

    def __init__(self):
        self.key = None
        self.entries: dict[int, tuple] = {}
        self.features: dict[int, tuple] = {}
        self.hits = 0
        self.misses = 0

    def _segment(self, seg: TrajectorySegment, model: TaskInference, time_steps: int):
        key = (id(model), model.version, time_steps)
        if key != self.key:
            self.key, self.entries = key, {}
        entry = self.entries.get(id(seg))
        if entry is None or entry[0] is not seg:
            L = len(seg)
            dtype = model.encoder.embed.weight.dtype
            K, D = model.num_classes, model.latent_size
            entry = (seg, torch.zeros(L + 1, K, dtype=dtype), torch.zeros(L + 1, K, D, dtype=dtype),
                     torch.zeros(L + 1, K, D, dtype=dtype), np.zeros(L + 1, dtype=bool))
            self.entries[id(seg)] = entry
        return entry

    def segment_features(self, seg: TrajectorySegment, dtype) -> torch.Tensor:
        f = self.features.get(id(seg))
        if f is None or f[0] is not seg or f[1].dtype != dtype:
            f = (seg, _segment_features(seg, dtype))
            self.features[id(seg)] = f
        return f[1]

    def prune(self, live: set[int]):
        self.features = {k: v for k, v in self.features.items() if k in live}
        self.entries = {k: v for k, v in self.entries.items() if k in live}

    def lookup(self, model: TaskInference, segs: list[TrajectorySegment], ends: list[int], time_steps: int) -> Belief:
        """Belief before transition ``ends[i]`` of ``segs[i]`` from at most ``time_steps`` preceding steps."""
        rows = [self._segment(seg, model, time_steps) for seg in segs]
        todo: dict[tuple[int, int], tuple] = {}
        for seg, t, row in zip(segs, ends, rows):
            if not row[4][t]:
                todo.setdefault((id(seg), t), (seg, t, row))
        self.misses += len(todo)
        self.hits += len(segs) - len(todo)
        if todo:
            # a whole-prefix unroll fills every step whose window still starts at 0
            fresh = {id(seg): (seg, row) for seg, t, row in todo.values()}
            dtype = model.encoder.embed.weight.dtype
            spans = np.array([min(len(seg), time_steps) for seg, _ in fresh.values()], dtype=np.int64)
            prefix = _prefix_beliefs(model, [self.segment_features(seg, dtype) for seg, _ in fresh.values()], spans)
            for i, ((_, row), P) in enumerate(zip(fresh.values(), spans)):
                row[1][:P + 1], row[2][:P + 1], row[3][:P + 1] = (prefix.cat_probs[i, :P + 1],
                                                                  prefix.means[i, :P + 1],
                                                                  prefix.log_stds[i, :P + 1])
                row[4][:P + 1] = True
            todo = {k: v for k, v in todo.items() if not v[2][4][v[1]]}
        if todo:
            dtype = model.encoder.embed.weight.dtype
            items = list(todo.values())
            lengths = np.array([min(t, time_steps) for _, t, _ in items], dtype=np.int64)
            feats = [self.segment_features(seg, dtype)[t - L:t] if L else None
                     for (seg, t, _), L in zip(items, lengths)]
            new = _unroll_spans(model, feats, lengths)
            for i, (_, t, row) in enumerate(items):
                row[1][t], row[2][t], row[3][t] = new.cat_probs[i], new.means[i], new.log_stds[i]
                row[4][t] = True
        return Belief(torch.stack([row[1][t] for row, t in zip(rows, ends)]),
                      torch.stack([row[2][t] for row, t in zip(rows, ends)]),
                      torch.stack([row[3][t] for row, t in zip(rows, ends)]))


@dataclass
class RLBatch:
    obs: torch.Tensor
    beliefs: Belief
    actions: torch.Tensor
    rewards: torch.Tensor        # normalised when requested
    raw_rewards: torch.Tensor
    next_obs: torch.Tensor
    next_beliefs: Belief
    dones: torch.Tensor
    refs: list


def sample_rl_batch(buf: ReplayBuffer, task_ids: Sequence, batch: int, rng: np.random.Generator,
                    model: TaskInference, time_steps: int, normalize_rewards: bool = True,
                    reward_scale: float = 1.0, trajectory_sample: bool = False,
                    trajectory_context: bool = False, cache: BeliefCache | None = None) -> RLBatch:
    """Transitions with beliefs recomputed from the current encoder.

    The belief for the transition at index t is the encoder's output after the
    preceding ``min(t, time_steps)`` transitions of the same trajectory.  A
    ``cache`` only avoids repeated unrolls; results are identical without it.
    """
    if not task_ids:
        raise NotReady("no tasks requested")
    refs = []
    if trajectory_sample:
        chunk = min(time_steps, min((len(s) for tid in task_ids if tid in buf.tasks
                                     for s in buf.tasks[tid].trajectories), default=0))
        if chunk == 0:
            raise NotReady("no data")
        n_chunks = -(-batch // chunk)
        for w in _pick_windows(buf, task_ids, n_chunks, chunk, rng):
            refs.extend((w.task_id, w.traj, w.start + i) for i in range(chunk))
        refs = refs[:batch]
    else:
        for _ in range(batch):
            tid = task_ids[int(rng.integers(len(task_ids)))]
            tb = buf.tasks.get(tid)
            if tb is None or tb.size == 0:
                raise NotReady(f"task {tid!r} has no data")
            traj = int(rng.integers(len(tb.trajectories)))
            refs.append((tid, traj, int(rng.integers(len(tb.trajectories[traj])))))

    segs = [buf.tasks[tid].trajectories[traj] for tid, traj, _ in refs]
    if trajectory_context:
        # trajectory-level inference: one belief per sample from another episode of the same task
        ctx = []
        for tid, traj, _ in refs:
            trajs = buf.tasks[tid].trajectories
            others = [j for j in range(len(trajs)) if j != traj] or [traj]
            other = trajs[others[int(rng.integers(len(others)))]]
            L = min(time_steps, len(other))
            ctx.append(other.window(int(rng.integers(len(other) - L + 1)), L))
        shared = context_beliefs(model, ctx, time_steps)
        beliefs = Belief(*(torch.cat([x, x]) for x in (shared.cat_probs, shared.means, shared.log_stds)))
    else:
        cache = cache if cache is not None else BeliefCache()
        ends = [t for _, _, t in refs]
        beliefs = cache.lookup(model, segs + segs, ends + [t + 1 for t in ends], time_steps)
    n = len(refs)
    dtype = model.encoder.embed.weight.dtype

    def col(field):
        return torch.as_tensor(np.stack([getattr(seg, field)[t] for seg, (_, _, t) in zip(segs, refs)]), dtype=dtype)

    raw = col("rewards")
    rewards = raw
    if normalize_rewards:
        rewards = torch.as_tensor(buf.reward_stats.normalize(raw.numpy().astype(np.float64)), dtype=dtype)
    return RLBatch(col("obs"), beliefs.index(slice(0, n)), col("actions"), rewards * reward_scale, raw,
                   col("next_obs"), beliefs.index(slice(n, 2 * n)), col("dones"), refs)
