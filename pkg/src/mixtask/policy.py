"""Soft actor-critic conditioned on the task belief (hyper-state input)."""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .envs import ACTION_DIM, STATE_DIM, obs_features
from .inference import Belief, select_component

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0

BAYES = "bayes"
SAMPLING = "sampling"


class NonFiniteLoss(FloatingPointError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


def belief_feature_size(num_classes: int, latent_size: int, mode: str = BAYES,
                        use_cat_probs: bool = True, full_belief: bool = False) -> int:
    if mode == SAMPLING:
        return latent_size
    comps = num_classes if full_belief else 1
    return (num_classes if use_cat_probs else 0) + 2 * comps * latent_size


@dataclass
class HyperState:
    state: torch.Tensor            # (B, 4) scaled env state
    belief_features: torch.Tensor  # (B, F)

    def as_input(self) -> torch.Tensor:
        return torch.cat([self.state, self.belief_features], dim=-1)


@torch.no_grad()
def make_hyper_state(s: torch.Tensor, belief: Belief, mode: str = BAYES, generator: torch.Generator | None = None,
                     use_cat_probs: bool = True, full_belief: bool = False) -> HyperState:
    """Concatenate the scaled state with belief features.

    Runs under ``no_grad`` on detached values: nothing the policy computes can
    send gradient back into the encoder.
    """
    belief = belief.detach()
    _, mean, log_std = select_component(belief)
    if mode == SAMPLING:
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        feats = mean + torch.exp(log_std) * noise
    elif mode == BAYES:
        if full_belief:
            parts = [belief.means.flatten(-2), belief.log_stds.flatten(-2)]
        else:
            parts = [mean, log_std]
        if use_cat_probs:
            parts.insert(0, belief.cat_probs)
        feats = torch.cat(parts, dim=-1)
    else:
        raise ValueError(f"unknown belief mode {mode!r}")
    return HyperState(obs_features(s.to(mean.dtype)), feats)


def _mlp(in_size: int, hidden: int, out_size: int, layers: int = 2) -> nn.Sequential:
    mods, size = [], in_size
    for _ in range(layers):
        mods += [nn.Linear(size, hidden), nn.ReLU()]
        size = hidden
    mods.append(nn.Linear(size, out_size))
    return nn.Sequential(*mods)


class InputEmbedding(nn.Module):
    """Separate linear embeddings of state and belief features before the trunk."""

    def __init__(self, belief_size: int, state_embed: int, latent_embed: int, enabled: bool):
        super().__init__()
        self.enabled = enabled
        self.belief_size = belief_size
        if enabled:
            self.state_embed = nn.Linear(STATE_DIM, state_embed)
            self.latent_embed = nn.Linear(belief_size, latent_embed)
            self.out_size = state_embed + latent_embed
        else:
            self.out_size = STATE_DIM + belief_size

    def forward(self, x):
        if not self.enabled:
            return x
        s, b = x[..., :STATE_DIM], x[..., STATE_DIM:]
        return torch.cat([F.relu(self.state_embed(s)), F.relu(self.latent_embed(b))], dim=-1)


class Actor(nn.Module):
    def __init__(self, belief_size: int, hidden: int = 300, preprocess: bool = True,
                 state_embed: int = 32, latent_embed: int = 32):
        super().__init__()
        self.embed = InputEmbedding(belief_size, state_embed, latent_embed, preprocess)
        self.trunk = _mlp(self.embed.out_size, hidden, 2 * ACTION_DIM)

    def forward(self, x):
        mean, log_std = self.trunk(self.embed(x)).chunk(2, dim=-1)
        return mean, log_std.clamp(LOG_STD_MIN, LOG_STD_MAX)


class Critic(nn.Module):
    def __init__(self, belief_size: int, hidden: int = 300, preprocess: bool = True,
                 state_embed: int = 32, latent_embed: int = 32):
        super().__init__()
        self.embed = InputEmbedding(belief_size, state_embed, latent_embed, preprocess)
        self.trunk = _mlp(self.embed.out_size + ACTION_DIM, hidden, 1)

    def forward(self, x, action):
        return self.trunk(torch.cat([self.embed(x), action], dim=-1)).squeeze(-1)


def tanh_log_prob(u: torch.Tensor, mean: torch.Tensor, log_std: torch.Tensor) -> torch.Tensor:
    """log pi(tanh(u)) for u ~ N(mean, std), including the change-of-variables term."""
    gauss = (-0.5 * ((u - mean) / torch.exp(log_std)) ** 2 - log_std - 0.5 * math.log(2 * math.pi)).sum(-1)
    # log(1 - tanh(u)^2) written stably
    correction = (2 * (math.log(2) - u - F.softplus(-2 * u))).sum(-1)
    return gauss - correction


def sample_action(actor: Actor, x: torch.Tensor, generator: torch.Generator | None = None,
                  noise: torch.Tensor | None = None):
    mean, log_std = actor(x)
    if noise is None:
        noise = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
    u = mean + torch.exp(log_std) * noise
    return torch.tanh(u), tanh_log_prob(u, mean, log_std)


@torch.no_grad()
def act(actor: Actor, h: HyperState | torch.Tensor, deterministic: bool = False,
        generator: torch.Generator | None = None):
    """Action in [-1, 1]^2 and its log-probability (``None`` when deterministic)."""
    x = h.as_input() if isinstance(h, HyperState) else h
    if deterministic:
        mean, _ = actor(x)
        return torch.tanh(mean), None
    return sample_action(actor, x, generator)


class SacNets(nn.Module):
    def __init__(self, belief_size: int, hidden: int = 300, preprocess: bool = True,
                 state_embed: int = 32, latent_embed: int = 32):
        super().__init__()
        kw = dict(hidden=hidden, preprocess=preprocess, state_embed=state_embed, latent_embed=latent_embed)
        self.belief_size = belief_size
        self.actor = Actor(belief_size, **kw)
        self.critic1 = Critic(belief_size, **kw)
        self.critic2 = Critic(belief_size, **kw)
        self.target1 = copy.deepcopy(self.critic1)
        self.target2 = copy.deepcopy(self.critic2)
        for p in list(self.target1.parameters()) + list(self.target2.parameters()):
            p.requires_grad_(False)

    @classmethod
    def from_config(cls, cfg) -> "SacNets":
        mode = BAYES if cfg.bayes_adaptive else SAMPLING
        size = belief_feature_size(cfg.num_classes, cfg.latent_size, mode, cfg.policy_uses_cat_probs,
                                   cfg.policy_full_belief)
        return cls(size, cfg.sac_layer_size, cfg.policy_dim_preprocess, cfg.state_embed_dim, cfg.latent_embed_dim)

    def critic_parameters(self):
        return list(self.critic1.parameters()) + list(self.critic2.parameters())


@dataclass
class SacBatch:
    h: torch.Tensor        # hyper-state inputs (B, 4 + F)
    actions: torch.Tensor
    rewards: torch.Tensor
    h_next: torch.Tensor
    dones: torch.Tensor


def sac_losses(nets: SacNets, batch: SacBatch, gamma: float, sac_alpha: float,
               generator: torch.Generator | None = None, noise_next=None, noise_new=None) -> dict[str, torch.Tensor]:
    """Twin-critic soft Bellman losses and the actor loss, all from the current weights."""
    with torch.no_grad():
        a_next, logp_next = sample_action(nets.actor, batch.h_next, generator, noise_next)
        q_next = torch.min(nets.target1(batch.h_next, a_next), nets.target2(batch.h_next, a_next))
        target = batch.rewards + gamma * (1.0 - batch.dones.to(q_next.dtype)) * (q_next - sac_alpha * logp_next)
    q1 = nets.critic1(batch.h, batch.actions)
    q2 = nets.critic2(batch.h, batch.actions)
    critic1_loss = ((q1 - target) ** 2).mean()
    critic2_loss = ((q2 - target) ** 2).mean()
    a_new, logp_new = sample_action(nets.actor, batch.h, generator, noise_new)
    q_new = torch.min(nets.critic1(batch.h, a_new), nets.critic2(batch.h, a_new))
    actor_loss = (sac_alpha * logp_new - q_new).mean()
    return {"critic1_loss": critic1_loss, "critic2_loss": critic2_loss, "actor_loss": actor_loss,
            "target": target, "q_mean": q1.detach().mean(), "entropy": -logp_new.detach().mean()}


class SacAgent:
    """Nets plus optimisers; fixed entropy temperature."""

    def __init__(self, nets: SacNets, lr: float = 3e-4, gamma: float = 0.99, sac_alpha: float = 0.2,
                 tau: float = 0.005, max_grad_norm: float | None = 0.5):
        self.nets = nets
        self.gamma = gamma
        self.sac_alpha = sac_alpha
        self.tau = tau
        self.max_grad_norm = max_grad_norm
        self.actor_opt = torch.optim.Adam(nets.actor.parameters(), lr=lr)
        self.critic_opt = torch.optim.Adam(nets.critic_parameters(), lr=lr)

    @classmethod
    def from_config(cls, cfg) -> "SacAgent":
        return cls(SacNets.from_config(cfg), cfg.policy_net_lr, cfg.gamma, cfg.sac_alpha, cfg.tau_polyak,
                   cfg.max_grad_norm_policy if cfg.clip_grad_policy else None)

    def update(self, batch: SacBatch, generator: torch.Generator | None = None) -> dict[str, float]:
        return sac_update(self, batch, generator)


def polyak_update(target: nn.Module, source: nn.Module, tau: float):
    with torch.no_grad():
        for tp, sp in zip(target.parameters(), source.parameters()):
            tp.mul_(1.0 - tau).add_(tau * sp)


def sac_update(agent: SacAgent, batch: SacBatch, generator: torch.Generator | None = None) -> dict[str, float]:
    """One gradient step on both critics and the actor, then a polyak target update."""
    nets = agent.nets
    losses = sac_losses(nets, batch, agent.gamma, agent.sac_alpha, generator)
    critic_loss = losses["critic1_loss"] + losses["critic2_loss"]
    scalars = {"critic_loss": float(critic_loss.detach()), "actor_loss": float(losses["actor_loss"].detach()),
               "q_mean": float(losses["q_mean"]), "entropy": float(losses["entropy"])}
    if not all(math.isfinite(v) for v in scalars.values()):
        raise NonFiniteLoss(f"non-finite SAC loss: {scalars}", scalars)
    actor_params = list(nets.actor.parameters())
    critic_params = nets.critic_parameters()
    critic_grads = torch.autograd.grad(critic_loss, critic_params)
    actor_grads = torch.autograd.grad(losses["actor_loss"], actor_params)
    for p, g in zip(critic_params, critic_grads):
        p.grad = g
    for p, g in zip(actor_params, actor_grads):
        p.grad = g
    if agent.max_grad_norm is not None:
        nn.utils.clip_grad_norm_(critic_params, agent.max_grad_norm)
        nn.utils.clip_grad_norm_(actor_params, agent.max_grad_norm)
    agent.critic_opt.step()
    agent.actor_opt.step()
    polyak_update(nets.target1, nets.critic1, agent.tau)
    polyak_update(nets.target2, nets.critic2, agent.tau)
    return scalars
