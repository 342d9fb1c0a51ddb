import numpy as np
import pytest

from latent_action_pretraining import tensor as T
from latent_action_pretraining.checkpoint import save_checkpoint
from latent_action_pretraining.exceptions import ContractViolation, MissingArtifact
from latent_action_pretraining.laq import LaqModel, load_laq, nearest_codes, nsvq_substitute, quantize_nearest, save_laq
from latent_action_pretraining.laq_utils import (
    label_dataset, load_labels, perplexity, replace_dead_codes, save_labels, train_laq,
)
from latent_action_pretraining.layers import ParamStore
from latent_action_pretraining.schemas import LaqConfig
from latent_action_pretraining.tensor import Tensor


INSTANCES = 10000


def test_nearest_codes_match_exhaustive_search():
    generator = np.random.default_rng(0)
    d = generator.standard_normal((20, 3))
    codebook = generator.standard_normal((5, 3))

    indices, distances = nearest_codes(d, codebook)

    for row, index, distance in zip(d, indices, distances):
        exhaustive = [float(((row - code) ** 2).sum()) for code in codebook]
        assert index == int(np.argmin(exhaustive))
        assert distance == pytest.approx(min(exhaustive))


def test_nearest_codes_tie_takes_smaller_index():
    codebook = np.array([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])

    index, code = quantize_nearest(np.array([0.0, 0.0]), codebook)

    assert index == 0
    assert np.array_equal(code, codebook[0])
    assert quantize_nearest(np.array([0.9, 0.1]), codebook)[0] == 0


@pytest.mark.parametrize('codebook_size', [2, 8, 64])
def test_nsvq_preserves_quantization_error_norm(codebook_size):
    generator = np.random.default_rng(codebook_size)
    d = generator.standard_normal((INSTANCES, 4))
    codebook = generator.standard_normal((codebook_size, 4))
    indices, _ = nearest_codes(d, codebook)
    z = codebook[indices]

    d_hat = nsvq_substitute(Tensor(d), Tensor(z), np.random.default_rng(codebook_size + 1))

    assert np.allclose(np.linalg.norm(d_hat.data - d, axis=-1), np.linalg.norm(d - z, axis=-1), atol=1e-5)


def test_nsvq_is_unbiased():
    d = np.array([0.3, -0.2, 0.5, 0.1])
    z = np.array([0.1, 0.4, -0.3, 0.2])
    draws = 100000

    d_hat = nsvq_substitute(Tensor(np.tile(d, (draws, 1))), Tensor(np.tile(z, (draws, 1))), np.random.default_rng(3))

    # отклонение среднего: E||mean - d||^2 = ||d - z||^2 / n
    assert np.linalg.norm(d_hat.data.mean(axis=0) - d) <= 3 * np.linalg.norm(d - z) / np.sqrt(draws)


def test_nsvq_requires_noise_source():
    value = Tensor(np.ones((1, 3)))

    with pytest.raises(ContractViolation):
        nsvq_substitute(value, value)
    with pytest.raises(ContractViolation):
        nsvq_substitute(value, value, noise=np.zeros((1, 3)))


def test_nsvq_gradient_reaches_code():
    d = Tensor(np.array([[1.0, 2.0]]), requires_grad=True)
    code = Tensor(np.array([[0.0, 0.0]]), requires_grad=True)

    T.backward(nsvq_substitute(d, code, noise=np.array([[0.0, 1.0]])).sum())

    assert np.abs(code.grad).sum() > 0
    assert np.abs(d.grad).sum() > 0


def test_decoder_does_not_backpropagate_into_first_frame_patches(laq_config):
    model = LaqModel(laq_config)
    frames = np.random.default_rng(0).integers(0, 256, size=(2, 16, 16, 3), dtype=np.uint8)

    out = model.decode(model.embed_patches(frames), Tensor(np.zeros((2, 1, laq_config.code_dim))))
    T.backward(out.sum())

    assert model.patch.weight.grad is None
    assert model.head.weight.grad is not None


def test_training_loss_reaches_encoder_and_codebook(laq_config):
    model = LaqModel(laq_config)
    generator = np.random.default_rng(0)
    first, second = (generator.integers(0, 256, size=(2, 16, 16, 3), dtype=np.uint8) for _ in range(2))

    loss, trace = model.loss(first, second, np.random.default_rng(1))
    T.backward(loss)

    assert trace.indices.shape == (2, 1)
    assert np.abs(model.patch.weight.grad).sum() > 0
    assert np.abs(model.codebook.grad).sum() > 0


def test_label_is_exact_and_deterministic(laq_config):
    model = LaqModel(laq_config, seed=3)
    generator = np.random.default_rng(0)
    first, second = (generator.integers(0, 256, size=(3, 16, 16, 3), dtype=np.uint8) for _ in range(2))

    labels = model.label(first, second)
    _, trace = model.forward(first, second)

    assert labels.shape == (3, 1)
    assert np.array_equal(labels, model.label(first, second))
    assert np.array_equal(labels, trace.indices)
    assert np.allclose(trace.d_hat, model.codebook.data[labels])


def test_world_step(laq_config):
    model = LaqModel(laq_config)
    frames = np.zeros((2, 16, 16, 3), dtype=np.uint8)

    predicted = model.world_step(frames, np.array([[0], [3]]))

    assert predicted.shape == (2, 16, 16, 3)
    assert predicted.min() >= 0.0 and predicted.max() <= 1.0
    with pytest.raises(ContractViolation):
        model.world_step(frames, np.array([[0], [4]]))
    with pytest.raises(ContractViolation):
        model.world_step(frames, np.array([[0, 1], [2, 3]]))


@pytest.mark.parametrize('overrides', [
    {'patch_size': 5},
    {'code_dim': 8},
    {'sequence_length': 2},
    {'codebook_size': 1},
])
def test_laq_config_geometry(laq_config, overrides):
    with pytest.raises(ValueError):
        LaqConfig(**{**laq_config.dict(), **overrides})


def test_sequence_length_four(laq_config):
    config = LaqConfig(**{**laq_config.dict(), 'sequence_length': 4, 'reducer_kernel': 2, 'reducer_stride': 2})
    model = LaqModel(config)
    frames = np.zeros((2, 16, 16, 3), dtype=np.uint8)

    assert model.label(frames, frames).shape == (2, 4)


def test_save_and_load(tmp_path, laq_config):
    model = LaqModel(laq_config, seed=5)
    frames = np.random.default_rng(0).integers(0, 256, size=(2, 16, 16, 3), dtype=np.uint8)

    path = save_laq(tmp_path / 'laq.ckpt', model, extra={'validation_mse': 0.01})
    restored, manifest = load_laq(path)

    assert restored.config == laq_config
    assert manifest.extra['validation_mse'] == 0.01
    assert np.array_equal(restored.world_step(frames, [[1], [2]]), model.world_step(frames, [[1], [2]]))


def test_load_laq_rejects_other_kind(tmp_path):
    store = ParamStore()
    store.create('head.weight', np.ones((2, 2)))
    path = save_checkpoint(tmp_path / 'policy.ckpt', store, 'policy')

    with pytest.raises(ContractViolation):
        load_laq(path)


def test_replace_dead_codes():
    codebook = np.zeros((4, 2))
    buffer = np.array([[1.0, 1.0], [2.0, 2.0]])

    replaced, dead = replace_dead_codes(codebook, np.array([3, 0, 1, 0]), buffer, np.random.default_rng(0))

    assert dead == [1, 3]
    assert np.array_equal(replaced[[0, 2]], codebook[[0, 2]])
    assert all(any(np.array_equal(row, candidate) for candidate in buffer) for row in replaced[dead])
    assert replace_dead_codes(codebook, np.ones(4), buffer, np.random.default_rng(0))[1] == []


@pytest.mark.slow
def test_replacement_revives_unreachable_codes(laq_config, dataset):
    config = laq_config.copy(update={'codebook_size': 8, 'steps': 8, 'eval_every': 8})
    results = {}
    for replacement in (False, True):
        model = LaqModel(config.copy(update={'replacement': replacement}))
        model.codebook.data[1:] += 100.0
        results[replacement] = train_laq(model, dataset, seed=0, validation_fraction=0.25)

    dead = {replacement: int((result.usage < config.usage_floor).sum()) for replacement, result in results.items()}

    assert results[False].replaced == 0
    assert np.all(results[False].usage[1:] == 0.0)
    assert results[True].replaced > 0
    assert dead[True] < dead[False]
    assert results[True].usage.sum() == pytest.approx(1.0)


@pytest.mark.parametrize('usage, expected', [([5, 5, 5, 5], 4.0), ([10, 0, 0, 0], 1.0), ([0, 0], 0.0)])
def test_perplexity(usage, expected):
    assert perplexity(np.array(usage)) == pytest.approx(expected)


def test_train_and_label(tmp_path, laq_config, dataset):
    model = LaqModel(laq_config)
    rows = []

    result = train_laq(model, dataset, seed=0, checkpoint_path=tmp_path / 'laq.ckpt', validation_fraction=0.25,
                       on_metrics=rows.append)
    labels = label_dataset(model, dataset, batch_size=8, config_hash='abc')
    path = save_labels(tmp_path / 'labels.npz', labels)
    loaded = load_labels(path)

    assert [row['step'] for row in rows] == [0, 1, 2]
    assert 'validation_mse' in rows[-1]
    assert np.isfinite(result.validation_mse)
    assert result.checkpoint == tmp_path / 'laq.ckpt'
    assert len(labels) == sum(trajectory.steps - 1 for trajectory in dataset)
    assert labels.codes.max() < laq_config.codebook_size
    assert np.array_equal(loaded.codes, labels.codes)
    assert loaded.config_hash == 'abc'
    assert loaded.window == 2


def test_load_labels_missing(tmp_path):
    with pytest.raises(MissingArtifact):
        load_labels(tmp_path / 'labels.npz')
