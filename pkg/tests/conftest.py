import os

import pytest
import torch
from hypothesis import HealthCheck, settings

torch.set_num_threads(1)
os.environ.pop("MOSS_SEED", None)

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_tiny_config():
    from mixtask.core import RunConfig
    return RunConfig(env="point-vel", n_train_tasks=4, n_eval_tasks=3, num_train_tasks_per_episode=2,
                     batch_size_reconstruction=4, batch_size_policy=16, max_path_length=30, time_steps=10,
                     sac_layer_size=16, state_embed_dim=8, latent_embed_dim=8, encoder_hidden_size=8,
                     decoder_hidden_size=8, num_training_steps_reconstruction=2, num_training_steps_policy=3,
                     num_transitions_initial=30, num_transitions_per_episode=30, num_train_epochs=2,
                     eval_interval=1, contrastive_queries=4, contrastive_keys=3)


@pytest.fixture
def tiny_config():
    return make_tiny_config()
