"""Meta-training loop, rollouts and evaluation protocols."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
import torch.nn as nn

from . import contrastive
from .core import RunConfig, RunningNormalizer, seeded_rng, torch_generator
from .envs import SUITES, BatchPointEnv, Regime, TaskSpec, run_controller, sample_tasks
from .inference import Belief, EncoderState, TaskInference, encode_step, select_component, sequence_elbo
from .policy import BAYES, SAMPLING, NonFiniteLoss, SacAgent, SacBatch, act, make_hyper_state
from .replay import (BeliefCache, NotReady, ReplayBuffer, TrajectorySegment, add_trajectory, context_beliefs,
                     sample_rl_batch, sample_sequences, windows_to_batch)

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


@dataclass
class EpochReport:
    epoch: int
    env_steps_total: int
    vae_loss: float
    contrastive_loss: float | None
    critic_loss: float
    actor_loss: float
    eval_return_mean: float
    eval_return_std: float
    eval_score: float
    adaptation_latency_mean: float | None
    wall_time: float

    def metrics_record(self) -> dict:
        rec = dataclasses.asdict(self)
        rec.pop("wall_time")
        return rec


@dataclass
class Snapshot:
    """Frozen copy of the weights that rollouts read from."""

    model: TaskInference
    actor: nn.Module
    config: RunConfig

    @property
    def mode(self) -> str:
        return BAYES if self.config.bayes_adaptive else SAMPLING


@dataclass
class Rollouts:
    segments: list[TrajectorySegment]
    returns: np.ndarray
    # per-step traces, indexed (task, t): belief before acting
    cat_probs: np.ndarray
    k_star: np.ndarray
    mu: np.ndarray
    goals: np.ndarray
    final_hidden: torch.Tensor


def _hyper(snapshot: Snapshot, obs: torch.Tensor, belief: Belief, gen: torch.Generator | None):
    cfg = snapshot.config
    return make_hyper_state(obs, belief, snapshot.mode, gen, cfg.policy_uses_cat_probs, cfg.policy_full_belief)


@torch.no_grad()
def collect_rollouts(snapshot: Snapshot, tasks: Sequence[TaskSpec], env_rngs: Sequence[np.random.Generator],
                     explore: bool, generator: torch.Generator | None, max_path_length: int,
                     init_hidden: torch.Tensor | None = None, fixed_beliefs: Belief | None = None,
                     dist=None, init_mask: torch.Tensor | None = None) -> Rollouts:
    """Run one episode per task in lock step.

    The belief is refreshed after every transition (online inference) unless
    ``fixed_beliefs`` is given, in which case it is held for the whole episode.
    """
    model = snapshot.model
    n = len(tasks)
    env = BatchPointEnv(tasks, env_rngs, max_path_length, dist)
    obs_np = env.reset()
    dtype = model.encoder.embed.weight.dtype
    state = model.initial_state(n) if init_hidden is None else EncoderState(init_hidden.clone(), 0)
    if fixed_beliefs is not None:
        belief = fixed_beliefs
    elif init_hidden is None:
        belief = model.prior(n)
    else:
        # rows without a carried hidden state start from the prior
        carried = torch.ones(n, dtype=torch.bool) if init_mask is None else init_mask
        belief = Belief.where(carried, model.encoder.heads(state.hidden), model.prior(n))
    H = max_path_length
    K, D = model.num_classes, model.latent_size
    rec = {k: np.zeros((n, H) + shape) for k, shape in
           [("obs", (4,)), ("act", (2,)), ("rew", ()), ("next", (4,)), ("goal", (2,)), ("cat", (K,)), ("mu", (D,))]}
    rec_done = np.zeros((n, H), dtype=bool)
    rec_changed = np.zeros((n, H), dtype=bool)
    rec_k = np.zeros((n, H), dtype=np.int64)
    for t in range(H):
        obs = torch.as_tensor(obs_np, dtype=dtype)
        k_star, mu, _ = select_component(belief)
        rec["cat"][:, t] = belief.cat_probs.numpy()
        rec["mu"][:, t] = mu.numpy()
        rec_k[:, t] = k_star.numpy()
        rec["goal"][:, t] = env.goal
        h = _hyper(snapshot, obs, belief, generator)
        action, _ = act(snapshot.actor, h, deterministic=not explore, generator=generator)
        action_np = action.numpy().astype(np.float64)
        next_np, reward, done, changed = env.step(action_np)
        rec["obs"][:, t], rec["act"][:, t], rec["rew"][:, t], rec["next"][:, t] = obs_np, action_np, reward, next_np
        rec_done[:, t], rec_changed[:, t] = done, changed
        if fixed_beliefs is None:
            transition = (obs, torch.as_tensor(action_np, dtype=dtype), torch.as_tensor(reward, dtype=dtype),
                          torch.as_tensor(next_np, dtype=dtype))
            belief, state = encode_step(model.encoder, transition, state)
        else:
            _, state = encode_step(model.encoder, (obs, torch.as_tensor(action_np, dtype=dtype),
                                                   torch.as_tensor(reward, dtype=dtype),
                                                   torch.as_tensor(next_np, dtype=dtype)), state)
        obs_np = next_np
    segments = [TrajectorySegment(rec["obs"][i], rec["act"][i], rec["rew"][i], rec["next"][i], rec_done[i],
                                  rec_changed[i], rec["goal"][i]) for i in range(n)]
    return Rollouts(segments, rec["rew"].sum(1), rec["cat"], rec_k, rec["mu"], rec["goal"], state.hidden)


def collect_rollout(snapshot: Snapshot, task: TaskSpec, explore: bool, rng: np.random.Generator,
                    generator: torch.Generator | None = None, max_path_length: int | None = None,
                    init_hidden: torch.Tensor | None = None) -> TrajectorySegment:
    """Single-task convenience wrapper around :func:`collect_rollouts`."""
    H = max_path_length or snapshot.config.max_path_length
    return collect_rollouts(snapshot, [task], [rng], explore, generator, H, init_hidden,
                            dist=SUITES.get(snapshot.config.env)).segments[0]


# --- metrics helpers ------------------------------------------------------

def normalized_score(returns, oracle_returns, zero_returns) -> float:
    """Fraction of the idle-to-oracle return gap that the learned policy closes."""
    gap = float(np.mean(oracle_returns) - np.mean(zero_returns))
    return float((np.mean(returns) - np.mean(zero_returns)) / gap) if gap > 0 else float("nan")


def adaptation_latencies(rewards: np.ndarray, changed: np.ndarray, window: int = 20,
                         tolerance: float = 0.2) -> list[int]:
    """Steps until reward recovers after each task change.

    For a change flagged on transition c, the reference is the mean reward of
    the ``window`` transitions up to c.  Recovery is the first step j > c with
    ``ref - r[j] <= tolerance * (ref - r[c+1])``; latency is ``j - (c+1)``.
    Changes that never recover before the next change (or episode end) get the
    full segment length.
    """
    idx = list(np.flatnonzero(changed))
    out = []
    for n, c in enumerate(idx):
        start = c + 1
        stop = idx[n + 1] + 1 if n + 1 < len(idx) else len(rewards)
        if start >= len(rewards):
            continue
        ref = float(np.mean(rewards[max(0, c - window + 1): c + 1]))
        drop = ref - float(rewards[start])
        latency = stop - start
        for j in range(start, stop):
            if ref - rewards[j] <= tolerance * max(drop, 0.0):
                latency = j - start
                break
        out.append(latency)
    return out


def pca_project(x: np.ndarray, n_components: int = 2) -> np.ndarray:
    """Scores on the leading principal axes (via SVD of the centred matrix)."""
    centred = x - x.mean(0, keepdims=True)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    comps = vt[:n_components]
    out = centred @ comps.T
    if out.shape[1] < n_components:
        out = np.pad(out, ((0, 0), (0, n_components - out.shape[1])))
    return out


def state_hash(*modules: nn.Module) -> str:
    h = hashlib.sha256()
    for m in modules:
        for k, v in m.state_dict().items():
            h.update(k.encode())
            h.update(v.detach().cpu().numpy().tobytes())
    return h.hexdigest()


# --- evaluation protocols -------------------------------------------------

def _eval_rngs(seed: int, n: int) -> list[np.random.Generator]:
    # one fixed stream per evaluation task so switch schedules repeat across evaluations
    return [seeded_rng(seed, f"eval/{i}") for i in range(n)]


def evaluate_zero_shot(tasks: Sequence[TaskSpec], snapshot: Snapshot, seed: int = 0,
                       max_path_length: int | None = None) -> tuple[np.ndarray, Rollouts]:
    """First-episode returns: fresh prior, deterministic policy, no prior data.

    With ``online_inference`` disabled the prior is held for the whole episode.
    """
    cfg = snapshot.config
    H = max_path_length or cfg.max_path_length
    fixed = None if cfg.online_inference else snapshot.model.prior(len(tasks))
    roll = collect_rollouts(snapshot, tasks, _eval_rngs(seed, len(tasks)), explore=False,
                            generator=torch_generator(seed, "eval"), max_path_length=H,
                            fixed_beliefs=fixed, dist=SUITES.get(cfg.env))
    return roll.returns, roll


def baseline_returns(tasks: Sequence[TaskSpec], cfg: RunConfig, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """(oracle, idle) returns on the same switch schedules as :func:`evaluate_zero_shot`."""
    dist = SUITES.get(cfg.env)
    oracle = run_controller(tasks, "oracle", cfg.max_path_length, _eval_rngs(seed, len(tasks)), dist)
    zero = run_controller(tasks, "zero", cfg.max_path_length, _eval_rngs(seed, len(tasks)), dist)
    return oracle, zero


def evaluate_k_shot(task: TaskSpec, k: int, snapshot: Snapshot, rng: np.random.Generator,
                    generator: torch.Generator | None = None) -> np.ndarray:
    """Trajectory-level protocol: belief fixed per episode, built from all earlier episodes."""
    if k < 1:
        raise ValueError("k must be >= 1")
    cfg = snapshot.config
    H = cfg.max_path_length
    history: list[TrajectorySegment] = []
    returns = []
    for _ in range(k):
        if not history:
            belief = snapshot.model.prior(1)
        else:
            context = _concat_segments(history)
            belief = context_beliefs(snapshot.model, [context], len(context))
        roll = collect_rollouts(snapshot, [task], [rng], explore=False, generator=generator, max_path_length=H,
                                fixed_beliefs=belief, dist=SUITES.get(cfg.env))
        history.append(roll.segments[0])
        returns.append(float(roll.returns[0]))
    return np.array(returns)


def _concat_segments(segs: Sequence[TrajectorySegment]) -> TrajectorySegment:
    # stitched episodes are not state-continuous; only the encoder reads them
    fields = ("obs", "actions", "rewards", "next_obs", "dones", "task_changed")
    return TrajectorySegment(*(np.concatenate([getattr(s, f) for s in segs]) for f in fields))


EMBED_HEADER_PREFIX = ("task_id", "base_task", "goal", "t", "k_star")


def export_embeddings(tasks: Sequence[TaskSpec], snapshot: Snapshot, path: str | Path | None = None,
                      seed: int = 0) -> tuple[list[str], list[list], np.ndarray]:
    """Roll one zero-shot episode per task and tabulate the per-step belief.

    Columns: task_id, base_task, goal, t, k_star, cat_probs_*, mu_*, pc1, pc2.
    Returns ``(header, rows, mu_matrix)`` and writes a TSV when ``path`` is set.
    """
    _, roll = evaluate_zero_shot(tasks, snapshot, seed)
    n, H, K = roll.cat_probs.shape
    D = roll.mu.shape[-1]
    mu = roll.mu.reshape(n * H, D)
    pcs = pca_project(mu, 2)
    header = list(EMBED_HEADER_PREFIX) + [f"cat_probs_{k}" for k in range(K)] + [f"mu_{d}" for d in range(D)] \
        + ["pc1", "pc2"]
    rows = []
    for i, task in enumerate(tasks):
        for t in range(H):
            r = i * H + t
            goal = ";".join(f"{g:.6g}" for g in roll.goals[i, t][: len(task.goal)])
            rows.append([i, task.base_task.name, goal, t, int(roll.k_star[i, t]),
                         *roll.cat_probs[i, t].tolist(), *mu[r].tolist(), float(pcs[r, 0]), float(pcs[r, 1])])
    if path is not None:
        with open(path, "w") as fh:
            fh.write("\t".join(header) + "\n")
            for row in rows:
                fh.write("\t".join(f"{v:.9g}" if isinstance(v, float) else str(v) for v in row) + "\n")
    return header, rows, mu


# --- checkpoints ----------------------------------------------------------

class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, model: TaskInference, agent: SacAgent, cfg: RunConfig, epoch: int,
                    env_steps: int, reward_stats: RunningNormalizer, extra: dict | None = None):
    torch.save({"format_version": CHECKPOINT_VERSION, "config": cfg.to_dict(), "epoch": epoch,
                "env_steps_total": env_steps, "inference": model.state_dict(), "policy": agent.nets.state_dict(),
                "actor_opt": agent.actor_opt.state_dict(), "critic_opt": agent.critic_opt.state_dict(),
                "reward_stats": reward_stats.state_dict(), **(extra or {})}, path)


def load_checkpoint(path: str | Path, cfg: RunConfig | None = None) -> dict:
    """Load a checkpoint; refuses one whose mixture size or latent size differ from ``cfg``."""
    blob = torch.load(path, map_location="cpu", weights_only=False)
    if blob.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {blob.get('format_version')!r}")
    saved = blob["config"]
    if cfg is not None:
        for key in ("num_classes", "latent_size"):
            if saved[key] != getattr(cfg, key):
                raise CheckpointError(f"checkpoint {key}={saved[key]} does not match config {key}={getattr(cfg, key)}")
    return blob


def snapshot_from_checkpoint(path: str | Path, cfg: RunConfig | None = None) -> Snapshot:
    blob = load_checkpoint(path, cfg)
    saved_cfg = RunConfig(**blob["config"])
    cfg = cfg or saved_cfg
    model = TaskInference.from_config(cfg)
    model.load_state_dict(blob["inference"])
    agent = SacAgent.from_config(cfg)
    agent.nets.load_state_dict(blob["policy"])
    return Snapshot(model.eval(), agent.nets.actor.eval(), cfg)


# --- training -------------------------------------------------------------

class Trainer:
    """Alternates data collection, inference-network updates and SAC updates."""

    def __init__(self, cfg: RunConfig, out_dir: str | Path | None = None, workers: int = 1):
        self.cfg = cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.workers = max(1, workers)
        self.dist = SUITES[cfg.env]
        seed = cfg.seed
        torch.manual_seed(int(seeded_rng(seed, "init").integers(2**62)))
        self.model = TaskInference.from_config(cfg)
        self.agent = SacAgent.from_config(cfg)
        self.vae_opt = torch.optim.Adam([
            {"params": self.model.encoder.parameters(), "lr": cfg.lr_encoder},
            {"params": self.model.decoder.parameters(), "lr": cfg.lr_decoder}])
        self.buffer = ReplayBuffer(cfg.replay_capacity)
        task_rng = seeded_rng(seed, "tasks")
        self.train_tasks = sample_tasks(self.dist, cfg.n_train_tasks, "train", task_rng)
        self.eval_tasks = sample_tasks(self.dist, cfg.n_eval_tasks, "test", task_rng)
        self.env_seeds = seeded_rng(seed, "env")
        self.collect_gen = torch_generator(seed, "collect")
        self.vae_rng = seeded_rng(seed, "vae")
        self.vae_gen = torch_generator(seed, "vae")
        self.contrastive_rng = seeded_rng(seed, "contrastive")
        self.sac_rng = seeded_rng(seed, "sac")
        self.sac_gen = torch_generator(seed, "sac")
        self.epoch = 0
        self.env_steps_total = 0
        self.episodes_collected = 0
        self.phase_log: list[tuple[int, str]] = []
        self.retained_hidden: dict[int, torch.Tensor] = {}
        self.belief_cache = BeliefCache()
        self._baselines = None
        self.best_score = -math.inf
        # task identity is ill-defined once goals switch mid-episode
        self.contrastive_enabled = cfg.use_contrastive and self.dist.regime != Regime.NONSTATIONARY
        self.last_eval = (float("nan"), float("nan"), float("nan"), None)

    # -- snapshots --------------------------------------------------------

    def snapshot(self) -> Snapshot:
        return Snapshot(self.model, self.agent.nets.actor, self.cfg)

    def frozen_snapshot(self) -> Snapshot:
        import copy
        return Snapshot(copy.deepcopy(self.model).eval(), copy.deepcopy(self.agent.nets.actor).eval(), self.cfg)

    # -- collection -------------------------------------------------------

    def _episode_rngs(self, n: int) -> list[np.random.Generator]:
        return [np.random.default_rng(int(s)) for s in self.env_seeds.integers(2**63, size=n)]

    def collect(self, task_indices: Sequence[int], episodes_per_task: int = 1, explore: bool = True):
        cfg = self.cfg
        for _ in range(episodes_per_task):
            rngs = self._episode_rngs(len(task_indices))
            fixed = self._trajectory_beliefs(task_indices) if not cfg.online_inference else None
            init = mask = None
            if cfg.retain_hidden and any(i in self.retained_hidden for i in task_indices):
                zeros = self.model.initial_state(1).hidden
                init = torch.cat([self.retained_hidden.get(i, zeros) for i in task_indices])
                mask = torch.as_tensor([i in self.retained_hidden for i in task_indices])
            groups = np.array_split(np.arange(len(task_indices)), min(self.workers, len(task_indices)))
            gens = [self.collect_gen] if len(groups) == 1 else \
                [torch_generator(int(self.env_seeds.integers(2**62)), f"collect/{g}") for g in range(len(groups))]

            def run(gi):
                idx = groups[gi]
                return collect_rollouts(
                    self.snapshot(), [self.train_tasks[task_indices[j]] for j in idx], [rngs[j] for j in idx],
                    explore, gens[gi], cfg.max_path_length,
                    None if init is None else init[idx], None if fixed is None else fixed.index(idx), self.dist,
                    None if mask is None else mask[idx])

            if len(groups) == 1:
                results = [run(0)]
            else:
                with ThreadPoolExecutor(len(groups)) as pool:
                    results = list(pool.map(run, range(len(groups))))
            for gi, roll in enumerate(results):
                for j, seg in zip(groups[gi], roll.segments):
                    add_trajectory(self.buffer, task_indices[j], seg)
                    self.env_steps_total += len(seg)
                    self.episodes_collected += 1
                if cfg.retain_hidden:
                    for j, h in zip(groups[gi], roll.final_hidden):
                        self.retained_hidden[task_indices[j]] = h[None].clone()

    def _trajectory_beliefs(self, task_indices: Sequence[int]) -> Belief:
        ctx = []
        for i in task_indices:
            tb = self.buffer.tasks.get(i)
            ctx.append(tb.trajectories[-1] if tb and tb.trajectories else None)
        return context_beliefs(self.model, ctx, self.cfg.time_steps)

    # -- updates ------------------------------------------------------------

    def _task_minibatch(self) -> list:
        ids = self.buffer.task_ids()
        n = min(self.cfg.num_train_tasks_per_episode, len(ids))
        return [ids[i] for i in sorted(self.vae_rng.choice(len(ids), size=n, replace=False))]

    def inference_step(self) -> dict[str, float]:
        cfg = self.cfg
        task_ids = self._task_minibatch()
        windows, refs = sample_sequences(self.buffer, task_ids, cfg.batch_size_reconstruction, cfg.time_steps,
                                         self.vae_rng)
        batch = windows_to_batch(windows)
        loss, details = sequence_elbo(self.model, batch, None, cfg.alpha, cfg.beta, self.vae_gen,
                                      cfg.use_global_prior, return_details=True)
        out = {"vae_loss": float(loss.detach()), "contrastive_loss": None}
        total = loss
        if self.contrastive_enabled and len({r.task_id for r in refs}) >= 2:
            pairs = self._contrastive_pairs(details["beliefs"], refs)
            c_loss = contrastive.info_nce_loss(pairs)
            total = total + cfg.contrastive_weight * c_loss
            out["contrastive_loss"] = float(c_loss.detach())
            out["positive_rank_mean"] = contrastive.positive_rank_mean(pairs)
        if not math.isfinite(float(total.detach())):
            self._crash_dump({"vae": out})
            raise NonFiniteLoss(f"non-finite inference loss: {out}", out)
        self.vae_opt.zero_grad()
        total.backward()
        if cfg.clip_grad_vae:
            nn.utils.clip_grad_norm_(self.model.parameters(), cfg.max_grad_norm_vae)
        self.vae_opt.step()
        self.model.version += 1
        return out

    def _contrastive_pairs(self, beliefs: list[Belief], refs) -> contrastive.PairBatch:
        stacked = Belief.stack(beliefs, 1)          # (B, T, ...)
        _, mu, _ = select_component(stacked)        # (B, T, d_z)
        by_task: dict = {}
        for b, ref in enumerate(refs):
            by_task.setdefault(ref.task_id, []).append(mu[b])
        embeddings = {tid: torch.cat(v, 0) for tid, v in by_task.items()}
        return contrastive.build_pairs(embeddings, self.cfg.contrastive_queries, self.cfg.contrastive_keys,
                                       self.contrastive_rng)

    def policy_step(self) -> dict[str, float]:
        cfg = self.cfg
        task_ids = self.buffer.task_ids()
        rl = sample_rl_batch(self.buffer, task_ids, cfg.batch_size_policy, self.sac_rng, self.model,
                             cfg.time_steps, cfg.use_reward_normalization, cfg.reward_scale,
                             cfg.use_trajectory_sample_sac, trajectory_context=not cfg.online_inference,
                             cache=self.belief_cache)
        mode = BAYES if cfg.bayes_adaptive else SAMPLING
        h = make_hyper_state(rl.obs, rl.beliefs, mode, self.sac_gen, cfg.policy_uses_cat_probs, cfg.policy_full_belief)
        h_next = make_hyper_state(rl.next_obs, rl.next_beliefs, mode, self.sac_gen, cfg.policy_uses_cat_probs,
                                  cfg.policy_full_belief)
        batch = SacBatch(h.as_input(), rl.actions, rl.rewards, h_next.as_input(), rl.dones)
        try:
            return self.agent.update(batch, self.sac_gen)
        except NonFiniteLoss as err:
            self._crash_dump({"sac": err.diagnostics})
            raise

    def _crash_dump(self, diagnostics: dict):
        if self.out_dir is None:
            return
        torch.save({"epoch": self.epoch, "diagnostics": diagnostics, "inference": self.model.state_dict(),
                    "policy": self.agent.nets.state_dict(), "config": self.cfg.to_dict()},
                   self.out_dir / "crash_dump.pt")

    # -- evaluation -----------------------------------------------------------

    def evaluate(self) -> tuple[float, float, float, float | None]:
        snap = self.snapshot()
        returns, roll = evaluate_zero_shot(self.eval_tasks, snap, self.cfg.seed)
        if self._baselines is None:
            self._baselines = baseline_returns(self.eval_tasks, self.cfg, self.cfg.seed)
        score = normalized_score(returns, *self._baselines)
        latency = None
        if self.dist.regime == Regime.NONSTATIONARY:
            lat = [l for seg in roll.segments for l in adaptation_latencies(seg.rewards, seg.task_changed)]
            latency = float(np.mean(lat)) if lat else 0.0
        return float(np.mean(returns)), float(np.std(returns)), score, latency

    # -- main loop ------------------------------------------------------------

    def initial_collection(self):
        cfg = self.cfg
        per_task = max(1, -(-cfg.num_transitions_initial // cfg.max_path_length))
        self.phase_log.append((-1, "collect"))
        self.collect(list(range(len(self.train_tasks))), per_task)

    def train_epoch(self) -> EpochReport:
        cfg = self.cfg
        start = time.perf_counter()
        epoch = self.epoch
        if not self.buffer.task_ids():
            self.initial_collection()

        self.phase_log.append((epoch, "collect"))
        chosen = sorted(self.env_seeds.choice(len(self.train_tasks),
                                              size=min(cfg.num_train_tasks_per_episode, len(self.train_tasks)),
                                              replace=False).tolist())
        per_task = max(1, -(-cfg.num_transitions_per_episode // cfg.max_path_length))
        self.collect(chosen, per_task)
        self.belief_cache.prune({id(seg) for tb in self.buffer.tasks.values() for seg in tb.trajectories})

        self.phase_log.append((epoch, "inference"))
        vae_losses, c_losses = [], []
        for _ in range(cfg.reconstruction_steps):
            out = self.inference_step()
            vae_losses.append(out["vae_loss"])
            if out["contrastive_loss"] is not None:
                c_losses.append(out["contrastive_loss"])

        self.phase_log.append((epoch, "policy"))
        critic, actor = [], []
        for _ in range(cfg.policy_steps):
            out = self.policy_step()
            critic.append(out["critic_loss"])
            actor.append(out["actor_loss"])

        is_last = epoch == cfg.num_train_epochs - 1
        if epoch % cfg.eval_interval == 0 or is_last:
            self.phase_log.append((epoch, "eval"))
            self.last_eval = self.evaluate()
        ret_mean, ret_std, score, latency = self.last_eval
        report = EpochReport(epoch, self.env_steps_total, float(np.mean(vae_losses)),
                             float(np.mean(c_losses)) if c_losses else None, float(np.mean(critic)),
                             float(np.mean(actor)), ret_mean, ret_std, score, latency,
                             time.perf_counter() - start)
        if self.out_dir is not None:
            self._write_outputs(report, evaluated=(epoch % cfg.eval_interval == 0 or is_last))
        self.epoch += 1
        return report

    def _write_outputs(self, report: EpochReport, evaluated: bool):
        with open(self.out_dir / "metrics.jsonl", "a") as fh:
            fh.write(json.dumps(report.metrics_record()) + "\n")
        with open(self.out_dir / "timing.jsonl", "a") as fh:
            fh.write(json.dumps({"epoch": report.epoch, "wall_time": report.wall_time}) + "\n")
        ckpt_dir = self.out_dir / "checkpoints"
        ckpt_dir.mkdir(exist_ok=True)
        self.save(ckpt_dir / "latest.pt")
        if evaluated and report.eval_score > self.best_score:
            self.best_score = report.eval_score
            self.save(ckpt_dir / "best.pt")

    def save(self, path):
        save_checkpoint(path, self.model, self.agent, self.cfg, self.epoch, self.env_steps_total,
                        self.buffer.reward_stats, {"episodes_collected": self.episodes_collected,
                                                   "best_score": self.best_score})

    def restore(self, path):
        blob = load_checkpoint(path, self.cfg)
        self.model.load_state_dict(blob["inference"])
        self.model.version += 1
        self.agent.nets.load_state_dict(blob["policy"])
        self.agent.actor_opt.load_state_dict(blob["actor_opt"])
        self.agent.critic_opt.load_state_dict(blob["critic_opt"])
        self.epoch = blob["epoch"] + 1
        self.env_steps_total = blob["env_steps_total"]
        self.episodes_collected = blob.get("episodes_collected", 0)
        self.best_score = blob.get("best_score", -math.inf)

    def train(self, epochs: int | None = None) -> Iterator[EpochReport]:
        end = self.cfg.num_train_epochs if epochs is None else self.epoch + epochs
        while self.epoch < end:
            report = self.train_epoch()
            log.info("epoch %d steps %d vae %.4f critic %.4f eval %.2f score %.3f (%.1fs)", report.epoch,
                     report.env_steps_total, report.vae_loss, report.critic_loss, report.eval_return_mean,
                     report.eval_score, report.wall_time)
            yield report


def train(cfg: RunConfig, out_dir: str | Path | None = None, epochs: int | None = None) -> Iterator[EpochReport]:
    """Run meta-training, yielding one report per epoch."""
    yield from Trainer(cfg, out_dir).train(epochs)
