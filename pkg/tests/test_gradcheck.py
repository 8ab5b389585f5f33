"""Central finite-difference checks on tiny float64 networks."""

import numpy as np
import pytest
import torch

from mixtask.contrastive import build_pairs, info_nce_loss
from mixtask.inference import Belief, SequenceBatch, TaskInference, select_component, sequence_elbo
from mixtask.policy import SacBatch, SacNets, belief_feature_size, sac_losses

from oracles import central_differences, max_relative_error

TOL = 1e-3


def tiny_model(K=2, D=3):
    torch.manual_seed(0)
    return TaskInference(K, D, encoder_hidden=8, decoder_hidden=8).double()


def random_windows(B=4, T=5, seed=0):
    rng = np.random.default_rng(seed)
    obs = rng.normal(size=(B, T + 1, 4)) * [3, 3, 1, 1]
    return SequenceBatch.from_numpy(obs[:, :-1], rng.uniform(-1, 1, (B, T, 2)), rng.normal(size=(B, T)) - 1,
                                    obs[:, 1:], dtype=torch.float64)


def elbo_loss(model, batch):
    # fresh generator per call so every evaluation sees the same reparameterisation noise
    return sequence_elbo(model, batch, None, 1.0, 1.0, torch.Generator().manual_seed(0))


def elbo_contrastive_loss(model, batch, task_of_row):
    loss, details = sequence_elbo(model, batch, None, 1.0, 1.0, torch.Generator().manual_seed(0),
                                  return_details=True)
    _, mu, _ = select_component(Belief.stack(details["beliefs"], 1))
    emb = {t: mu[[i for i, r in enumerate(task_of_row) if r == t]].reshape(-1, mu.shape[-1])
           for t in sorted(set(task_of_row))}
    pairs = build_pairs(emb, 6, 3, np.random.default_rng(0))
    return loss + 0.5 * info_nce_loss(pairs)


def check(loss_fn, params):
    analytic = torch.autograd.grad(loss_fn(), params, allow_unused=True)
    analytic = [torch.zeros_like(p) if g is None else g for p, g in zip(params, analytic)]
    numeric = central_differences(loss_fn, params, eps=1e-4)
    return max_relative_error(analytic, numeric)


class TestInferenceGradients:
    def test_elbo(self):
        model, batch = tiny_model(), random_windows()
        assert check(lambda: elbo_loss(model, batch), list(model.parameters())) < TOL

    def test_elbo_single_component(self):
        model, batch = tiny_model(K=1, D=2), random_windows(seed=1)
        assert check(lambda: elbo_loss(model, batch), list(model.parameters())) < TOL

    def test_elbo_plus_contrastive(self):
        model, batch = tiny_model(), random_windows(B=6, seed=2)
        tasks = [0, 0, 1, 1, 2, 2]
        params = list(model.parameters())
        err = check(lambda: elbo_contrastive_loss(model, batch, tasks), params)
        assert err < TOL
        # the contrastive term must actually contribute encoder gradients
        g_with = torch.autograd.grad(elbo_contrastive_loss(model, batch, tasks), model.encoder.mean_head.weight)[0]
        g_without = torch.autograd.grad(elbo_loss(model, batch), model.encoder.mean_head.weight)[0]
        assert not torch.allclose(g_with, g_without)


def make_sac_setup():
    torch.manual_seed(0)
    size = belief_feature_size(2, 3)
    nets = SacNets(size, hidden=8, state_embed=8, latent_embed=8).double()
    with torch.no_grad():
        for p in nets.target1.parameters():
            p.add_(0.05)
    g = torch.Generator().manual_seed(0)
    width = 4 + size
    batch = SacBatch(torch.randn(8, width, generator=g, dtype=torch.float64),
                     torch.rand(8, 2, generator=g, dtype=torch.float64) * 2 - 1,
                     torch.randn(8, generator=g, dtype=torch.float64),
                     torch.randn(8, width, generator=g, dtype=torch.float64),
                     (torch.rand(8, generator=g) < 0.3).double())
    noise = torch.randn(2, 8, 2, generator=g, dtype=torch.float64)
    return nets, batch, noise


@pytest.fixture
def sac_setup():
    return make_sac_setup()


class TestSacGradients:
    def test_critic(self, sac_setup):
        nets, batch, noise = sac_setup

        def loss():
            out = sac_losses(nets, batch, 0.99, 0.2, noise_next=noise[0], noise_new=noise[1])
            return out["critic1_loss"] + out["critic2_loss"]
        assert check(loss, nets.critic_parameters()) < TOL

    def test_actor(self, sac_setup):
        nets, batch, noise = sac_setup

        def loss():
            return sac_losses(nets, batch, 0.99, 0.2, noise_next=noise[0], noise_new=noise[1])["actor_loss"]
        assert check(loss, list(nets.actor.parameters())) < TOL
