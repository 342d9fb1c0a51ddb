import numpy as np
import pytest

from latent_action_pretraining import settings
from latent_action_pretraining import tensor as T
from latent_action_pretraining.checkpoint import HEADER, load_checkpoint, restore_store, save_checkpoint
from latent_action_pretraining.exceptions import ContractViolation
from latent_action_pretraining.layers import (
    ParamStore, PatchEmbed, TransformerBlock, images_to_tensor, key_padding_mask,
)
from latent_action_pretraining.optim import AdamState, adam_step, clip_grad_norm
from latent_action_pretraining.tensor import Tensor


def test_param_store_registration():
    store = _store()

    assert len(store) == 3
    assert store.parameter_count() == 6 + 3 + 4
    with pytest.raises(ContractViolation):
        store.create('encoder.weight', np.zeros(1))


def test_param_store_freeze_and_remove():
    store = _store()

    assert store.freeze('encoder.') == ['encoder.weight', 'encoder.bias']
    assert [name for name, _ in store.trainable_items()] == ['head.weight']
    assert not store['encoder.weight'].requires_grad

    assert store.remove('head.') == ['head.weight']
    assert 'head.weight' not in store


def test_load_state_dict_checks_names_and_shapes():
    store = _store()

    with pytest.raises(ContractViolation):
        store.load_state_dict({'encoder.weight': np.ones((2, 3))})
    with pytest.raises(ContractViolation):
        store.load_state_dict({**store.state_dict(), 'encoder.bias': np.ones(4)})

    store.load_state_dict({'encoder.weight': np.ones((2, 3))}, strict=False)
    assert np.array_equal(store['encoder.weight'].data, np.ones((2, 3)))


def test_adam_first_step_moves_by_learning_rate():
    store = _store()
    store.freeze('head.')
    before = store.state_dict()
    _set_grads(store, 0.5)

    adam_step(store, AdamState(lr=0.01))

    assert np.allclose(store['encoder.weight'].data, before['encoder.weight'] - 0.01, atol=1e-6)
    assert np.array_equal(store['head.weight'].data, before['head.weight'])
    assert store['encoder.weight'].grad is None


def test_adam_requires_gradients_of_trainable_params():
    store = _store()
    store['encoder.weight'].grad = np.ones((2, 3), dtype=np.float32)

    with pytest.raises(ContractViolation):
        adam_step(store, AdamState())


def test_adam_reset_rows():
    store = _store()
    state = AdamState()
    _set_grads(store, 1.0)
    adam_step(store, state)

    state.reset_rows('encoder.weight', [1])

    assert np.all(state.first_moment['encoder.weight'][1] == 0.0)
    assert np.all(state.second_moment['encoder.weight'][1] == 0.0)
    assert np.all(state.first_moment['encoder.weight'][0] != 0.0)


def test_clip_grad_norm():
    store = _store()
    _set_grads(store, 2.0)

    total = clip_grad_norm(store, 1.0)

    assert np.isclose(total, 2.0 * np.sqrt(13))
    clipped = np.sqrt(sum((param.grad.astype(np.float64) ** 2).sum() for _, param in store.trainable_items()))
    assert np.isclose(clipped, 1.0, atol=1e-5)


def test_checkpoint_round_trip(tmp_path):
    store = _store()
    store.freeze('head.')
    path = save_checkpoint(tmp_path / 'model.ckpt', store, 'laq', {'lr': 0.1}, {'seed': 3}, {'window': 3})

    manifest, state = load_checkpoint(path)
    restored = _store(seed=99)
    restore_store(restored, manifest, state)

    assert manifest.kind == 'laq'
    assert manifest.extra == {'window': 3}
    assert manifest.rng_state == {'seed': 3}
    for name, value in store.state_dict().items():
        assert np.array_equal(restored[name].data, value)
    assert not restored.is_trainable('head.weight')


def test_restore_keeps_flags_of_names_sharing_a_prefix(tmp_path):
    store = _prefixed_store()
    store.freeze('head.weight')
    store.set_trainable('head.weight_scale', True, exact=True)
    path = save_checkpoint(tmp_path / 'model.ckpt', store, 'policy')

    restored = restore_store(_prefixed_store(), *load_checkpoint(path))

    assert restored.is_trainable('head.weight_scale')
    assert restored['head.weight_scale'].requires_grad
    assert not restored.is_trainable('head.weight')


def test_checkpoint_bytes_are_deterministic(tmp_path):
    first = save_checkpoint(tmp_path / 'a.ckpt', _store(), 'policy')
    second = save_checkpoint(tmp_path / 'b.ckpt', _store(), 'policy')

    assert first.read_bytes() == second.read_bytes()


@pytest.mark.parametrize('corruption', ['magic', 'version', 'truncated'])
def test_checkpoint_rejects_corruption(tmp_path, corruption):
    path = save_checkpoint(tmp_path / 'model.ckpt', _store(), 'laq')
    raw = bytearray(path.read_bytes())
    if corruption == 'magic':
        raw[:8] = b'NOTACKPT'
    elif corruption == 'version':
        magic, _, length = HEADER.unpack_from(raw)
        raw[:HEADER.size] = HEADER.pack(magic, settings.CHECKPOINT_VERSION + 1, length)
    else:
        raw = raw[:-4]
    path.write_bytes(bytes(raw))

    with pytest.raises(ContractViolation):
        load_checkpoint(path)


def test_transformer_block_gradients_reach_all_params():
    store = ParamStore()
    rng = np.random.default_rng(0)
    block = TransformerBlock(store, 'block', 8, 2, rng)
    value = Tensor(rng.standard_normal((2, 5, 8)))

    T.backward(block(value, causal=True).sum())

    assert all(param.grad is not None and np.abs(param.grad).sum() > 0 for _, param in store.items())


def test_patch_embed_shape():
    store = ParamStore()
    embed = PatchEmbed(store, 'patch', 4, 3, 16, np.random.default_rng(0))

    tokens = embed(images_to_tensor(np.zeros((2, 32, 32, 3), dtype=np.uint8)))

    assert tokens.shape == (2, 64, 16)


def test_images_to_tensor_scales_uint8_only():
    frames = np.full((1, 2, 2, 3), 255, dtype=np.uint8)

    assert np.allclose(images_to_tensor(frames).data, 1.0)
    assert np.allclose(images_to_tensor(frames.astype(np.float32) / 255.0).data, 1.0)


def test_key_padding_mask():
    mask = key_padding_mask(np.array([[5, 6, 0, 0]]), pad_id=0, prefix=2)

    assert mask.shape == (1, 1, 1, 6)
    assert np.array_equal(mask[0, 0, 0] == 0.0, [True, True, True, True, False, False])


def _store(seed: int = 0) -> ParamStore:
    store = ParamStore()
    rng = np.random.default_rng(seed)
    store.create('encoder.weight', rng.standard_normal((2, 3)))
    store.create('encoder.bias', rng.standard_normal(3))
    store.create('head.weight', rng.standard_normal((2, 2)))
    return store


def _set_grads(store: ParamStore, value: float) -> None:
    for _, param in store.trainable_items():
        param.grad = np.full(param.shape, value, dtype=np.float32)


def _prefixed_store() -> ParamStore:
    store = ParamStore()
    store.create('head.weight_scale', np.ones(2))
    store.create('head.weight', np.ones((2, 2)))
    return store
