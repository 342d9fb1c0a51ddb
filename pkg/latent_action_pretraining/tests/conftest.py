import pytest

from latent_action_pretraining.datasets import TrajectoryDataset, generate_dataset
from latent_action_pretraining.laq import LaqModel
from latent_action_pretraining.laq_utils import label_dataset
from latent_action_pretraining.schemas import (
    DataConfig, EnvConfig, EvalConfig, FinetuneConfig, LaqConfig, PolicyConfig, RunConfig,
)


@pytest.fixture(scope='session')
def env_config():
    return EnvConfig(image_size=16)


@pytest.fixture(scope='session')
def laq_config():
    return LaqConfig(image_size=16, patch_size=4, embed_dim=16, code_dim=16, heads=2, spatial_depth=1,
                     temporal_depth=1, decoder_depth=1, codebook_size=4, sequence_length=1, reducer_kernel=4,
                     reducer_stride=4, window=2, steps=3, batch_size=4, replacement_window=2, warmup_fraction=1.0,
                     eval_every=3, validation_pairs=8, buffer_size=16, log_every=1)


@pytest.fixture(scope='session')
def policy_config():
    return PolicyConfig(patch_size=4, embed_dim=16, heads=2, vision_depth=1, fusion_depth=1, pretrain_steps=2,
                        batch_size=4, validation_fraction=0.25, eval_every=2, log_every=1)


@pytest.fixture(scope='session')
def run_config(env_config, laq_config, policy_config):
    return RunConfig(
        seed=0,
        env=env_config,
        data=DataConfig(pretrain_trajectories=4, finetune_trajectories=4, shard_size=2),
        laq=laq_config,
        policy=policy_config,
        finetune=FinetuneConfig(training_seeds=1, bins=4, steps=2, batch_size=4, action_pretrain_steps=2,
                                idm_steps=2, idm_embed_dim=16),
        eval=EvalConfig(episodes_per_category=1, bootstrap_samples=20, rollout_steps=2, rollout_tasks=2,
                        analysis_grid_frames=2),
    )


@pytest.fixture(scope='session')
def dataset(tmp_path_factory, env_config):
    directory = tmp_path_factory.mktemp('data')
    generate_dataset(directory, 4, seed=0, config=env_config, workers=1)
    return TrajectoryDataset(directory)


@pytest.fixture(scope='session')
def labels(laq_config, dataset):
    return label_dataset(LaqModel(laq_config), dataset)
