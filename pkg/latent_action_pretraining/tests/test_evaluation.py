import numpy as np
import pandas as pd
import pytest

from latent_action_pretraining.binning import fit_bins
from latent_action_pretraining.evaluation import (
    EVAL_COLUMNS, EpisodeResult, EpisodeSpec, ExpertPolicy, LearnedPolicy, ZeroPolicy, bootstrap_interval,
    build_report, check_paired, episode_list, eval_suite, run_episode, run_episodes, win_rates, write_report_csv,
)
from latent_action_pretraining.exceptions import ContractViolation
from latent_action_pretraining.grammar import CATEGORIES, VocabMap
from latent_action_pretraining.policy import ACTION_HEAD, PolicyModel
from latent_action_pretraining.schemas import EnvConfig


CONFIG = EnvConfig(image_size=16)


def test_episode_list_is_balanced_and_deterministic():
    episodes = episode_list(3, ['seen', 'unseen'], 2, CONFIG)

    assert episodes == episode_list(3, ['seen', 'unseen'], 2, CONFIG)
    assert [episode.index for episode in episodes] == list(range(12))
    for split in ('seen', 'unseen'):
        categories = [episode.category for episode in episodes if episode.split == split]
        assert sorted(categories) == sorted(CATEGORIES * 2)


def test_zero_policy_never_succeeds():
    results = run_episodes(ZeroPolicy(), episode_list(0, ['seen'], 1, CONFIG), CONFIG, workers=1)

    assert [result.score for result in results] == [0.0, 0.0, 0.0]
    assert all(result.steps == CONFIG.max_steps for result in results)


def test_expert_policy_scores_and_is_deterministic():
    episodes = episode_list(1, ['seen'], 2, CONFIG)

    first = run_episodes(ExpertPolicy(CONFIG), episodes, CONFIG, workers=1)
    second = run_episodes(ExpertPolicy(CONFIG), episodes, CONFIG, workers=1)

    assert [result.scores for result in first] == [result.scores for result in second]
    assert sum(result.score for result in first) > 0.0


def test_learned_policy_runs_closed_loop(policy_config):
    vocab = VocabMap()
    model = PolicyModel(policy_config, 16, len(vocab), 0, vocab.pad_id)
    model.attach_head(ACTION_HEAD, 2, 4)
    spec = fit_bins(np.random.default_rng(0).uniform(-0.08, 0.08, size=(100, 2)), 4)
    episode = episode_list(0, ['unseen'], 1, CONFIG)[0]

    result = run_episode(LearnedPolicy(model, spec, vocab, CONFIG.delta_max), episode, CONFIG, max_steps=3)

    assert result.steps == 3
    assert len(result.scores) == 4
    assert result.score in (0.0, 0.5, 1.0)


def test_check_paired_rejects_different_episodes():
    results = {'lapa': {0: [_result(0, 11, 1.0)]}, 'scratch': {0: [_result(0, 12, 0.0)]}}

    with pytest.raises(ContractViolation):
        check_paired(results)


def test_build_report(tmp_path):
    results = {
        'lapa': {0: _results([1.0, 1.0, 0.5]), 1: _results([1.0, 0.0, 0.0])},
        'scratch': {0: _results([0.0, 1.0, 0.0]), 1: _results([0.0, 0.0, 0.5])},
    }

    report, frame = build_report(results, bootstrap_samples=50, seed=0, config_hash='abc')
    path = write_report_csv(report, tmp_path / 'report.csv')
    table = pd.read_csv(path)

    assert len(frame) == 12
    # (2 сида + pooled) x (3 категории + all) на режим
    assert len(report.rows) == 2 * 3 * 4
    assert report.pooled('lapa') == pytest.approx(3 / 6)
    assert report.pooled('scratch', 'seen') == pytest.approx(1 / 6)
    assert report.episodes == [(100, 'seen', 'block2block'), (101, 'seen', 'block2absolute'),
                               (102, 'seen', 'separate')]
    assert list(table.columns) == ['schema_version'] + EVAL_COLUMNS
    assert table.loc[(table['mode'] == 'lapa') & (table['training_seed'] == 'pooled')
                     & (table['category'] == 'all'), 'seeds'].item() == '0 1'
    assert len(report.win_rates) == 1


def test_report_is_reproducible():
    results = {'lapa': {0: _results([1.0, 0.0, 0.5])}}

    first, _ = build_report(results, bootstrap_samples=50, seed=4)
    second, _ = build_report(results, bootstrap_samples=50, seed=4)

    assert first == second


def test_bootstrap_interval():
    values = np.array([0.0, 1.0, 1.0, 0.0, 1.0])

    low, high = bootstrap_interval(values, 200, np.random.default_rng(0))

    assert (low, high) == bootstrap_interval(values, 200, np.random.default_rng(0))
    assert low <= values.mean() <= high
    assert bootstrap_interval(np.array([]), 200, np.random.default_rng(0)) == (0.0, 0.0)


def test_win_rates():
    frame = pd.DataFrame({
        'mode': ['a', 'a', 'a', 'b', 'b', 'b'],
        'index': [0, 1, 2, 0, 1, 2],
        'score': [1.0, 0.5, 0.0, 0.0, 0.5, 1.0],
    })

    rate, = win_rates(frame)

    assert (rate.mode_a, rate.mode_b) == ('a', 'b')
    assert (rate.wins, rate.losses, rate.ties) == (1, 1, 1)
    assert rate.win_rate_without_ties == 0.5
    assert rate.win_rate_with_ties == 0.5
    assert rate.tie_rate == pytest.approx(1 / 3)


def test_eval_suite_pairs_modes():
    episodes = episode_list(2, ['seen'], 1, CONFIG)

    report, frame = eval_suite({'expert': {0: ExpertPolicy(CONFIG)}, 'zero': {0: ZeroPolicy()}}, episodes, CONFIG,
                               bootstrap_samples=10, workers=1)

    assert set(frame['mode']) == {'expert', 'zero'}
    assert report.pooled('zero') == 0.0
    assert report.win_rates[0].losses == 0


def _result(index, seed, score, category='block2block'):
    return EpisodeResult(spec=EpisodeSpec(index, seed, 'seen', category), score=score, steps=1, scores=[score])


def _results(scores):
    return [_result(index, 100 + index, score, category) for index, (score, category)
            in enumerate(zip(scores, CATEGORIES))]
