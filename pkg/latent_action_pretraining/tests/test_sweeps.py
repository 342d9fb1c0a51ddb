import pandas as pd
import pytest

from latent_action_pretraining.artifacts import RunDirectory
from latent_action_pretraining.exceptions import ConfigError, ContractViolation
from latent_action_pretraining.schemas import RunConfig
from latent_action_pretraining.sweeps import SWEEP_COLUMNS, run_sweep, sweep_config


@pytest.mark.parametrize('length, kernel', [(1, 8), (4, 4), (16, 2), (64, 1)])
def test_sequence_axis_sets_reducer(length, kernel):
    config = sweep_config(RunConfig(), 'seq', length)

    assert config.laq.sequence_length == length
    assert config.laq.reducer_kernel == config.laq.reducer_stride == kernel
    assert config.sweep.axis == 'seq'


@pytest.mark.parametrize('length', [2, 9])
def test_sequence_axis_rejects_uneven_grid(length):
    with pytest.raises(ContractViolation):
        sweep_config(RunConfig(), 'seq', length)


def test_scalar_axes():
    base = RunConfig()

    assert sweep_config(base, 'vocab', 16).laq.codebook_size == 16
    assert sweep_config(base, 'window', 5).laq.window == 5
    assert sweep_config(base, 'finetune_n', 50).data.finetune_trajectories == 50
    assert sweep_config(base, 'pretrain_fraction', 0.5).data.pretrain_trajectories == 10000
    assert base.laq.codebook_size == 8


def test_invalid_values():
    with pytest.raises(ConfigError):
        sweep_config(RunConfig(), 'vocab', 1)
    with pytest.raises(ContractViolation):
        sweep_config(RunConfig(), 'pretrain_fraction', 0.0)
    with pytest.raises(ContractViolation):
        sweep_config(RunConfig(), 'depth', 2)


def test_sweep_needs_two_values(tmp_path, run_config):
    with pytest.raises(ContractViolation):
        run_sweep(RunDirectory('sweep', run_config, tmp_path), run_config, 'vocab', [4])


@pytest.mark.slow
def test_run_sweep(tmp_path, run_config):
    config = RunConfig.parse_obj({**run_config.dict(), 'finetune': {**run_config.finetune.dict(), 'modes': ['scratch']}})

    with RunDirectory('sweep', config, tmp_path) as run:
        frame = run_sweep(run, config, 'finetune_n', [2, 4], workers=1)

    assert list(frame.columns) == SWEEP_COLUMNS
    assert sorted(frame['value'].unique()) == [2, 4]
    assert set(frame['mode']) == {'scratch'}
    assert pd.read_csv(run.path / 'sweep-finetune_n.csv').shape == frame.shape
    assert (run.path / 'sweep-finetune_n.png').exists()
