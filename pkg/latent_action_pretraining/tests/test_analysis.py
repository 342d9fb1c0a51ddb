import numpy as np
import pytest

from latent_action_pretraining import analysis
from latent_action_pretraining.exceptions import ContractViolation
from latent_action_pretraining.grammar import VocabMap
from latent_action_pretraining.laq import LaqModel
from latent_action_pretraining.policy import LATENT_HEAD, PolicyModel


VOCAB = VocabMap()


@pytest.mark.parametrize('first, second, expected', [
    ([0, 1, 2, 3] * 25, [0, 1, 2, 3] * 25, 2.0),
    ([0, 1] * 50, [0, 0, 1, 1] * 25, 0.0),
    ([], [], 0.0),
])
def test_mutual_information(first, second, expected):
    assert analysis.mutual_information(np.array(first), np.array(second)) == pytest.approx(expected, abs=1e-9)


def test_mutual_information_length_mismatch():
    with pytest.raises(ContractViolation):
        analysis.mutual_information(np.zeros(3), np.zeros(4))


def test_action_quadrant():
    actions = np.array([[1.0, 1.0], [-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [0.0, 0.0]])

    assert analysis.action_quadrant(actions).tolist() == [0, 1, 2, 3, 0]


def test_combined_labels():
    assert analysis.combined_labels(np.array([[0, 1], [3, 3], [2, 0]]), 4).tolist() == [1, 15, 8]


def test_latent_analysis(dataset, labels):
    report, scatter = analysis.latent_analysis(labels, dataset, 0.08)
    quadrants = analysis.action_quadrant(analysis.window_actions(dataset, labels))
    labels_used = len(report.clusters)

    assert report.total == len(labels) == len(scatter)
    assert sum(cluster.count for cluster in report.clusters) == report.total
    assert report.total_pairs == labels_used * (labels_used - 1) // 2
    assert 0 <= report.separated_pairs <= report.total_pairs
    assert report.separation_threshold == pytest.approx(0.02)
    assert list(scatter.columns) == ['label', 'dx', 'dy']
    assert 0.0 <= report.mutual_information + 1e-9
    assert report.mutual_information <= analysis.mutual_information(quadrants, quadrants) + 1e-9
    assert report == analysis.latent_analysis(labels, dataset, 0.08)[0]


def test_labels_equal_to_quadrants_carry_full_information(dataset, labels):
    quadrants = analysis.action_quadrant(analysis.window_actions(dataset, labels))
    labels.codes, original = quadrants[:, None], labels.codes
    try:
        report, _ = analysis.latent_analysis(labels, dataset, 0.08)
    finally:
        labels.codes = original

    assert report.mutual_information == pytest.approx(analysis.mutual_information(quadrants, quadrants))


def test_window_actions_are_window_means(dataset, labels):
    actions = analysis.window_actions(dataset, labels)
    index, t = labels.trajectory[0], labels.t[0]

    assert actions.shape == (len(labels), 2)
    assert np.allclose(actions[0], dataset[index].actions[t:t + labels.window].mean(axis=0))


def test_decoded_grid(laq_config):
    model = LaqModel(laq_config)
    frames = np.zeros((2, 16, 16, 3), dtype=np.uint8)

    grid = analysis.decoded_grid(model, frames)

    assert grid.shape == (2, laq_config.codebook_size, 16, 16, 3)
    assert grid.min() >= 0.0 and grid.max() <= 1.0


def test_neural_rollout_is_finite_and_deterministic(laq_config, policy_config, dataset):
    model, policy = _models(laq_config, policy_config)
    trajectory = dataset[0]

    first = analysis.neural_rollout(model, policy, VOCAB, trajectory.frames[0], trajectory.instruction, 3)
    second = analysis.neural_rollout(model, policy, VOCAB, trajectory.frames[0], trajectory.instruction, 3)

    assert first.shape == (4, 16, 16, 3)
    assert np.isfinite(first).all()
    assert np.array_equal(first, second)
    assert np.allclose(first[0], trajectory.frames[0] / 255.0)


def test_rollout_report(laq_config, policy_config, env_config):
    model, policy = _models(laq_config, policy_config)

    result = analysis.rollout_report(model, policy, VOCAB, env_config, [0, 1], 2, consistency=0.5)

    assert result.report.tasks == 2
    assert result.report.finite
    assert 0.0 <= result.report.sign_agreement <= 1.0
    assert result.report.reconstruction_within_bound == 0.5
    assert [frames.shape for frames in result.rollouts] == [(3, 16, 16, 3)] * 2


def test_self_consistency(laq_config, dataset):
    model = LaqModel(laq_config)
    pairs = dataset.pair_index(laq_config.window)[:5]

    assert analysis.self_consistency(model, dataset, pairs, np.inf) == 1.0
    assert analysis.self_consistency(model, dataset, pairs, -1.0) == 0.0


def test_label_direction_consistency(laq_config, env_config):
    agreement = analysis.label_direction_consistency(LaqModel(laq_config), env_config, [0, 1, 2])

    assert agreement.shape == (laq_config.codebook_size, )
    assert ((agreement >= 0.0) & (agreement <= 1.0)).all()


def _models(laq_config, policy_config):
    policy = PolicyModel(policy_config, 16, len(VOCAB), 0, VOCAB.pad_id)
    policy.attach_head(LATENT_HEAD, laq_config.sequence_length, laq_config.codebook_size)
    return LaqModel(laq_config), policy
