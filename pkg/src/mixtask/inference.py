"""Recurrent Gaussian-mixture VAE for online task inference.

At every step the encoder emits a categorical distribution over K mixture
components and one diagonal Gaussian per component.  The step-wise ELBO uses
the previous step's posterior as its prior, so the bound penalises abrupt
belief changes between adjacent steps.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .envs import ACTION_DIM, OBS_SCALE, STATE_DIM, obs_features

LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0
PROB_FLOOR = 1e-8
TRANSITION_DIM = 2 * STATE_DIM + ACTION_DIM + 1


@dataclass
class Belief:
    """Batched posterior: ``cat_probs`` (B, K), ``means`` / ``log_stds`` (B, K, d_z)."""

    cat_probs: torch.Tensor
    means: torch.Tensor
    log_stds: torch.Tensor

    @classmethod
    def prior(cls, batch: int, num_classes: int, latent_size: int, dtype=torch.float32) -> "Belief":
        return cls(torch.full((batch, num_classes), 1.0 / num_classes, dtype=dtype),
                   torch.zeros(batch, num_classes, latent_size, dtype=dtype),
                   torch.zeros(batch, num_classes, latent_size, dtype=dtype))

    @property
    def num_classes(self) -> int:
        return self.cat_probs.shape[-1]

    @property
    def latent_size(self) -> int:
        return self.means.shape[-1]

    def detach(self) -> "Belief":
        return Belief(self.cat_probs.detach(), self.means.detach(), self.log_stds.detach())

    def index(self, idx) -> "Belief":
        return Belief(self.cat_probs[idx], self.means[idx], self.log_stds[idx])

    @staticmethod
    def where(mask: torch.Tensor, a: "Belief", b: "Belief") -> "Belief":
        """Per-row choice: rows with ``mask`` set come from ``a``."""
        m2, m3 = mask[:, None], mask[:, None, None]
        return Belief(torch.where(m2, a.cat_probs, b.cat_probs), torch.where(m3, a.means, b.means),
                      torch.where(m3, a.log_stds, b.log_stds))

    @staticmethod
    def stack(beliefs: list["Belief"], dim: int = 1) -> "Belief":
        return Belief(torch.stack([b.cat_probs for b in beliefs], dim),
                      torch.stack([b.means for b in beliefs], dim),
                      torch.stack([b.log_stds for b in beliefs], dim))


@dataclass
class EncoderState:
    hidden: torch.Tensor
    t: int = 0

    @classmethod
    def zeros(cls, batch: int, hidden_size: int, dtype=torch.float32) -> "EncoderState":
        return cls(torch.zeros(batch, hidden_size, dtype=dtype), 0)


@dataclass
class ReconTargets:
    next_state: torch.Tensor
    reward: torch.Tensor


def transition_features(obs, action, reward, next_obs) -> torch.Tensor:
    """Encoder input for one transition: scaled s, a, raw r, scaled s'."""
    return torch.cat([obs_features(obs), action, reward.unsqueeze(-1), obs_features(next_obs)], dim=-1)


class TaskEncoder(nn.Module):
    def __init__(self, num_classes: int, latent_size: int, hidden_size: int = 128,
                 input_size: int = TRANSITION_DIM):
        super().__init__()
        self.num_classes = num_classes
        self.latent_size = latent_size
        self.hidden_size = hidden_size
        self.input_size = input_size
        self.embed = nn.Linear(input_size, hidden_size)
        self.gru = nn.GRUCell(hidden_size, hidden_size)
        self.cat_head = nn.Linear(hidden_size, num_classes)
        self.mean_head = nn.Linear(hidden_size, num_classes * latent_size)
        self.log_std_head = nn.Linear(hidden_size, num_classes * latent_size)

    def heads(self, hidden: torch.Tensor) -> Belief:
        shape = hidden.shape[:-1] + (self.num_classes, self.latent_size)
        log_stds = self.log_std_head(hidden).view(shape).clamp(LOG_STD_MIN, LOG_STD_MAX)
        return Belief(F.softmax(self.cat_head(hidden), dim=-1), self.mean_head(hidden).view(shape), log_stds)

    def recur(self, x: torch.Tensor, hidden: torch.Tensor) -> torch.Tensor:
        return self.gru(F.relu(self.embed(x)), hidden)

    def forward(self, x: torch.Tensor, hidden: torch.Tensor) -> tuple[Belief, torch.Tensor]:
        if x.shape[-1] != self.input_size or hidden.shape[-1] != self.hidden_size:
            raise ValueError(f"expected input width {self.input_size} and hidden width {self.hidden_size}, "
                             f"got {tuple(x.shape)} and {tuple(hidden.shape)}")
        hidden = self.recur(x, hidden)
        return self.heads(hidden), hidden


class _Regressor(nn.Module):
    """MLP with a parallel linear path, so affine dynamics are easy to fit."""

    def __init__(self, in_size: int, out_size: int, hidden_size: int):
        super().__init__()
        self.mlp = nn.Sequential(nn.Linear(in_size, hidden_size), nn.ReLU(),
                                 nn.Linear(hidden_size, hidden_size), nn.ReLU(),
                                 nn.Linear(hidden_size, out_size))
        self.linear = nn.Linear(in_size, out_size)

    def forward(self, x):
        return self.mlp(x) + self.linear(x)


class Decoder(nn.Module):
    """Independent state and reward regressors conditioned on (z, s, a)."""

    def __init__(self, latent_size: int, hidden_size: int = 64):
        super().__init__()
        in_size = latent_size + STATE_DIM + ACTION_DIM
        self.state_decoder = _Regressor(in_size, STATE_DIM, hidden_size)
        self.reward_decoder = _Regressor(in_size, 1, hidden_size)

    def forward(self, z, state, action):
        x = torch.cat([z, obs_features(state), action], dim=-1)
        # state regressor works in scaled units; targets stay raw
        return self.state_decoder(x) * x.new_tensor(OBS_SCALE), self.reward_decoder(x).squeeze(-1)


class TaskInference(nn.Module):
    def __init__(self, num_classes: int, latent_size: int, encoder_hidden: int = 128, decoder_hidden: int = 64):
        super().__init__()
        self.encoder = TaskEncoder(num_classes, latent_size, encoder_hidden)
        self.decoder = Decoder(latent_size, decoder_hidden)
        # bumped after every optimiser step; keys cached beliefs
        self.version = 0

    @classmethod
    def from_config(cls, cfg) -> "TaskInference":
        return cls(cfg.num_classes, cfg.latent_size, cfg.encoder_hidden_size, cfg.decoder_hidden_size)

    @property
    def num_classes(self) -> int:
        return self.encoder.num_classes

    @property
    def latent_size(self) -> int:
        return self.encoder.latent_size

    def initial_state(self, batch: int) -> EncoderState:
        return EncoderState.zeros(batch, self.encoder.hidden_size, dtype=self._dtype())

    def prior(self, batch: int) -> Belief:
        return Belief.prior(batch, self.num_classes, self.latent_size, dtype=self._dtype())

    def _dtype(self):
        return self.encoder.embed.weight.dtype


def encode_step(encoder: TaskEncoder, transition, prev: EncoderState) -> tuple[Belief, EncoderState]:
    """One recurrent update from a ``(s, a, r, s')`` transition (each batched)."""
    x = transition_features(*transition) if isinstance(transition, (tuple, list)) else transition
    belief, hidden = encoder(x, prev.hidden)
    return belief, EncoderState(hidden, prev.t + 1)


def decode(decoder: Decoder, z, s, a):
    return decoder(z, s, a)


# --- loss terms -----------------------------------------------------------

def recon_loss(pred: tuple[torch.Tensor, torch.Tensor], target: ReconTargets) -> torch.Tensor:
    """Squared state error plus squared reward error (per sample)."""
    s_hat, r_hat = pred
    return ((s_hat - target.next_state) ** 2).sum(-1) + (r_hat - target.reward) ** 2


def gaussian_kl(mean_q, log_std_q, mean_p, log_std_p) -> torch.Tensor:
    """KL(q || p) between diagonal Gaussians, summed over the last axis."""
    var_q = torch.exp(2 * log_std_q)
    var_p = torch.exp(2 * log_std_p)
    kl = log_std_p - log_std_q + (var_q + (mean_q - mean_p) ** 2) / (2 * var_p) - 0.5
    return kl.sum(-1)


def categorical_kl(q: torch.Tensor, p: torch.Tensor) -> torch.Tensor:
    log_p = torch.log(p.clamp_min(PROB_FLOOR))
    log_q = torch.log(q.clamp_min(PROB_FLOOR))
    terms = torch.where(q > 0, q * (log_q - log_p), torch.zeros_like(q))
    return terms.sum(-1)


def select_component(belief: Belief) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Most probable component per row; ties go to the lowest index.

    Returns ``(k_star, mean, log_std)`` with the component's parameters.
    """
    k_star = torch.argmax(belief.cat_probs, dim=-1)  # first maximal index
    idx = k_star[..., None, None].expand(*k_star.shape, 1, belief.latent_size)
    mean = torch.gather(belief.means, -2, idx).squeeze(-2)
    log_std = torch.gather(belief.log_stds, -2, idx).squeeze(-2)
    return k_star, mean, log_std


def elbo_terms(belief: Belief, prior: Belief, targets: ReconTargets, context, decoder: Decoder,
               alpha: float, beta: float, generator: torch.Generator | None = None,
               noise: torch.Tensor | None = None) -> dict[str, torch.Tensor]:
    """Per-sample negative ELBO and its parts for one step.

    One reparameterised sample per component is decoded.  ``noise`` (B, K, d_z)
    overrides the sampled standard normals.
    """
    state, action = context
    B, K, D = belief.means.shape
    if noise is None:
        noise = torch.randn(B, K, D, generator=generator, dtype=belief.means.dtype)
    z = belief.means + torch.exp(belief.log_stds) * noise
    s_hat, r_hat = decoder(z.reshape(B * K, D), state.repeat_interleave(K, 0), action.repeat_interleave(K, 0))
    rep_targets = ReconTargets(targets.next_state.repeat_interleave(K, 0), targets.reward.repeat_interleave(K, 0))
    recon = recon_loss((s_hat, r_hat), rep_targets).view(B, K)
    kl_z = gaussian_kl(belief.means, belief.log_stds, prior.means, prior.log_stds)
    kl_y = categorical_kl(belief.cat_probs, prior.cat_probs)
    w = belief.cat_probs
    loss = (w * (recon + alpha * kl_z)).sum(-1) + beta * kl_y
    with torch.no_grad():
        k_star = torch.argmax(w, -1, keepdim=True)
        selected = torch.gather(recon + alpha * kl_z, -1, k_star).squeeze(-1) + beta * kl_y
    return {"loss": loss, "recon": (w * recon).sum(-1), "kl_z": (w * kl_z).sum(-1), "kl_y": kl_y,
            "selected_loss": selected}


def elbo_step(belief: Belief, prior: Belief, targets: ReconTargets, context, decoder: Decoder,
              alpha: float, beta: float, generator: torch.Generator | None = None):
    """Scalar loss (negated ELBO, batch mean) plus per-term diagnostics."""
    terms = elbo_terms(belief, prior, targets, context, decoder, alpha, beta, generator)
    diagnostics = {k: float(v.detach().mean()) for k, v in terms.items() if k != "loss"}
    return terms["loss"].mean(), diagnostics


@dataclass
class SequenceBatch:
    """Aligned windows: ``obs`` (B, T, 4), ``actions`` (B, T, 2), ``rewards`` (B, T), ``next_obs`` (B, T, 4)."""

    obs: torch.Tensor
    actions: torch.Tensor
    rewards: torch.Tensor
    next_obs: torch.Tensor

    def __len__(self):
        return self.obs.shape[1]

    @classmethod
    def from_numpy(cls, obs, actions, rewards, next_obs, dtype=torch.float32) -> "SequenceBatch":
        def t(x):
            return torch.as_tensor(x, dtype=dtype)
        return cls(t(obs), t(actions), t(rewards), t(next_obs))

    def features(self) -> torch.Tensor:
        return transition_features(self.obs, self.actions, self.rewards, self.next_obs)


def unroll(encoder: TaskEncoder, features: torch.Tensor, init: EncoderState) -> tuple[list[Belief], EncoderState]:
    """Posterior after each transition of ``features`` (B, T, F)."""
    T = features.shape[1]
    if T == 0:
        return [], init
    # only the GRU update is sequential; embedding and heads run on the whole window at once
    inputs = F.relu(encoder.embed(features))
    hidden, states = init.hidden, []
    for t in range(T):
        hidden = encoder.gru(inputs[:, t], hidden)
        states.append(hidden)
    stacked = encoder.heads(torch.stack(states, 1))
    beliefs = [Belief(stacked.cat_probs[:, t], stacked.means[:, t], stacked.log_stds[:, t]) for t in range(T)]
    return beliefs, EncoderState(hidden, init.t + T)


def sequence_elbo(model: TaskInference, segment: SequenceBatch, init: EncoderState | None, alpha: float,
                  beta: float, generator: torch.Generator | None = None, use_global_prior: bool = False,
                  return_details: bool = False):
    """Mean per-step negative ELBO over a batch of windows.

    Step t's prior is the posterior of step t-1 (the initial prior at t=0, or
    at every step with ``use_global_prior``).
    """
    T = len(segment)
    if T == 0:
        raise ValueError("empty segment")
    B = segment.obs.shape[0]
    if init is None:
        init = model.initial_state(B)
    beliefs, final = unroll(model.encoder, segment.features(), init)
    initial_prior = model.prior(B)
    priors = [initial_prior] * T if use_global_prior else [initial_prior] + beliefs[:-1]
    K, D = model.num_classes, model.latent_size
    dtype = initial_prior.means.dtype
    # per-step draws keep the noise stream identical to a step-by-step evaluation
    noise = torch.stack([torch.randn(B, K, D, generator=generator, dtype=dtype) for _ in range(T)])

    def flat(x):  # (B, T, ...) -> (T * B, ...)
        return x.transpose(0, 1).reshape(T * B, *x.shape[2:])

    def flat_belief(bs):
        stacked = Belief.stack(bs, 0)
        return Belief(*(x.reshape(T * B, *x.shape[2:]) for x in (stacked.cat_probs, stacked.means,
                                                                   stacked.log_stds)))
    # decoding does not depend on the recurrence, so all steps go through in one batch
    terms = elbo_terms(flat_belief(beliefs), flat_belief(priors),
                       ReconTargets(flat(segment.next_obs), flat(segment.rewards)),
                       (flat(segment.obs), flat(segment.actions)), model.decoder, alpha, beta,
                       noise=noise.reshape(T * B, K, D))
    diag = {k: float(terms[k].detach().mean()) for k in ("recon", "kl_z", "kl_y", "selected_loss")}
    loss = terms["loss"].mean()
    if return_details:
        return loss, {"beliefs": beliefs, "final_state": final, **diag}
    return loss


def belief_before_each_step(model: TaskInference, segment: SequenceBatch, init: EncoderState | None = None):
    """Belief available to the agent before acting at each step (prior at t=0)."""
    B = segment.obs.shape[0]
    beliefs, _ = unroll(model.encoder, segment.features(), init or model.initial_state(B))
    return [model.prior(B)] + beliefs[:-1]
