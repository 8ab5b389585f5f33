"""InfoNCE over latent task embeddings with Euclidean similarity."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
import torch


@dataclass
class PairBatch:
    queries: torch.Tensor          # (N_Q, d_z)
    keys: torch.Tensor             # (N_Q, N_K, d_z)
    positive_index: torch.Tensor   # (N_Q,) long
    # provenance of every embedding as (task, step) for validation
    query_source: np.ndarray | None = None   # (N_Q, 2)
    key_source: np.ndarray | None = None     # (N_Q, N_K, 2)


def build_pairs(embeddings_by_task: Mapping | Sequence[torch.Tensor], num_queries: int, num_keys: int,
                rng: np.random.Generator) -> PairBatch:
    """Sample queries with one same-task positive and ``num_keys - 1`` other-task negatives.

    ``embeddings_by_task`` maps a task id to a (T_i, d_z) tensor.  The positive
    comes from a different step of the query's task; the positive slot among
    the keys is uniformly random.
    """
    if isinstance(embeddings_by_task, Mapping):
        task_ids = list(embeddings_by_task)
        seqs = [embeddings_by_task[k] for k in task_ids]
    else:
        seqs = list(embeddings_by_task)
        task_ids = list(range(len(seqs)))
    if len(seqs) < 2:
        raise ValueError("contrastive pairs need embeddings from at least two tasks")
    if num_keys < 2:
        raise ValueError("num_keys must be >= 2")
    lengths = np.array([len(s) for s in seqs])
    eligible = np.flatnonzero(lengths >= 2)
    if len(eligible) == 0:
        raise ValueError("no task has two or more steps")

    offsets = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    flat = torch.cat(list(seqs), 0)
    q_src = np.empty((num_queries, 2), dtype=np.int64)
    k_src = np.empty((num_queries, num_keys, 2), dtype=np.int64)
    pos_idx = np.empty(num_queries, dtype=np.int64)
    for i in range(num_queries):
        task = int(eligible[rng.integers(len(eligible))])
        q_step, p_step = rng.choice(lengths[task], size=2, replace=False)
        others = np.delete(np.arange(len(seqs)), task)
        neg_tasks = others[rng.integers(len(others), size=num_keys - 1)]
        neg_steps = rng.integers(lengths[neg_tasks])
        slot = int(rng.integers(num_keys))
        keys = [(t, s) for t, s in zip(neg_tasks, neg_steps)]
        keys.insert(slot, (task, p_step))
        q_src[i] = (task, q_step)
        k_src[i] = keys
        pos_idx[i] = slot
    q_flat = offsets[q_src[:, 0]] + q_src[:, 1]
    k_flat = offsets[k_src[..., 0]] + k_src[..., 1]
    return PairBatch(flat[torch.as_tensor(q_flat)], flat[torch.as_tensor(k_flat)],
                     torch.as_tensor(pos_idx), q_src, k_src)


def similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Negated Euclidean distance over the last axis (closer is larger)."""
    return -torch.linalg.vector_norm(a - b, dim=-1)


def info_nce(batch: PairBatch) -> torch.Tensor:
    """Mean log-probability of the positive key under an N_K-way softmax (to be maximised)."""
    logits = similarity(batch.queries[:, None, :], batch.keys)
    log_norm = torch.logsumexp(logits, dim=-1)  # max-shifted internally
    positive = logits.gather(1, batch.positive_index[:, None]).squeeze(1)
    return (positive - log_norm).mean()


def info_nce_loss(batch: PairBatch) -> torch.Tensor:
    return -info_nce(batch)


def positive_rank_mean(batch: PairBatch) -> float:
    """Mean 0-based rank of the positive key by similarity (0 = nearest)."""
    with torch.no_grad():
        logits = similarity(batch.queries[:, None, :], batch.keys)
        positive = logits.gather(1, batch.positive_index[:, None])
        return float((logits > positive).sum(1).float().mean())

