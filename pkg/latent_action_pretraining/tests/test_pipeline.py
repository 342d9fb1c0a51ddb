import json

import pytest

from latent_action_pretraining.artifacts import RunDirectory, completed_runs, read_index
from latent_action_pretraining.pipeline import pooled_table, run_analyze_latents, run_pipeline, run_rollout
from latent_action_pretraining.schemas import EvalReport


MODES = ['lapa', 'scratch']


@pytest.fixture(scope='module')
def pipeline(tmp_path_factory, run_config):
    root = tmp_path_factory.mktemp('runs')
    return root, run_pipeline(run_config, root, workers=1, modes=MODES)


def test_pipeline_runs_every_stage(pipeline):
    root, _ = pipeline

    commands = sorted(entry.command for entry in read_index(root).values())

    assert commands == sorted(['gen-data', 'train-laq', 'label', 'pretrain', 'finetune', 'eval'])
    assert all(entry.status == 'completed' for entry in read_index(root).values())
    for manifest in completed_runs(root):
        for path in manifest.artifacts.values():
            assert path and (root / path).exists()


def test_pipeline_report(pipeline, run_config):
    root, report = pipeline
    stored = EvalReport.parse_file(next(root.glob('eval-*/report.json')))

    assert stored.config_hash == report.config_hash == run_config.config_hash()
    assert len(stored.rows) == len(report.rows)
    assert sorted({row.mode for row in report.rows}) == MODES
    assert len(report.episodes) == 3 * run_config.eval.episodes_per_category * len(run_config.eval.splits)
    assert set(pooled_table(report)['split']) == set(run_config.eval.splits)
    assert all(0.0 <= report.pooled(mode) <= 1.0 for mode in MODES)


def test_rollout_stage(pipeline, run_config):
    root, _ = pipeline

    with RunDirectory('rollout', run_config, root) as run:
        run_rollout(run, run_config)

    rollout = json.loads((run.path / 'rollout.json').read_text(encoding='utf-8'))
    assert rollout['tasks'] == run_config.eval.rollout_tasks
    assert rollout['finite']
    assert 0.0 <= rollout['reconstruction_within_bound'] <= 1.0
    assert (run.path / 'rollouts.png').exists()


def test_analyze_latents_stage(pipeline, run_config):
    root, _ = pipeline

    with RunDirectory('analyze-latents', run_config, root) as run:
        run_analyze_latents(run, run_config)

    clusters = json.loads((run.path / 'clusters.json').read_text(encoding='utf-8'))
    assert clusters['total'] == sum(cluster['count'] for cluster in clusters['clusters'])
    for name in ('scatter.csv', 'scatter.png', 'decoded-grid.png'):
        assert (run.path / name).exists()
    assert len(read_index(root)[run.path.name].summary['direction_consistency']) == run_config.laq.codebook_size
