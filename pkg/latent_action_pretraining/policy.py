"""
Политика "зрение + инструкция" с заменяемой головой и модель обратной динамики
"""
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from latent_action_pretraining import rng as lapa_rng
from latent_action_pretraining import tensor as T
from latent_action_pretraining import validators
from latent_action_pretraining.binning import BinSpec
from latent_action_pretraining.checkpoint import load_checkpoint, restore_store, save_checkpoint
from latent_action_pretraining.exceptions import ContractViolation
from latent_action_pretraining.layers import (
    LayerNorm, Linear, ParamStore, PatchEmbed, TransformerBlock, images_to_tensor, key_padding_mask, normal,
    positional,
)
from latent_action_pretraining.schemas import CheckpointManifest, FinetuneConfig, PolicyConfig
from latent_action_pretraining.tensor import Tensor


LATENT_HEAD = 'latent'
ACTION_HEAD = 'action'
ACTION_DIMS = 2
PathType = Union[str, Path]


class PolicyModel:
    """ Кодировщик кадра, эмбеддинги инструкции, трансформер слияния и одна голова """

    def __init__(self, config: PolicyConfig, image_size: int, vocab_size: int, seed: int = 0,
                 pad_id: int = 0) -> None:
        self.config = config
        self.image_size = image_size
        self.vocab_size = vocab_size
        self.seed = seed
        self.pad_id = pad_id
        self.store = ParamStore()
        self.head: Optional[Linear] = None
        self.head_kind: Optional[str] = None
        self.head_shape: Tuple[int, int] = (0, 0)

        if image_size % config.patch_size:
            raise ContractViolation(f'Размер кадра {image_size} не делится на патч {config.patch_size}')

        rng = lapa_rng.generator(seed, 'policy', 'init')
        dim = config.embed_dim
        tokens = (image_size // config.patch_size) ** 2

        self.patch = PatchEmbed(self.store, 'vision.patch', config.patch_size, 3, dim, rng)
        self.vision_pos = positional(self.store, 'vision.pos', tokens, dim, rng)
        self.vision = [TransformerBlock(self.store, f'vision.blocks.{index}', dim, config.heads, rng)
                       for index in range(config.vision_depth)]

        self.text_embedding = self.store.create('text.embedding', normal(rng, (vocab_size, dim), 0.02))
        self.text_pos = positional(self.store, 'text.pos', config.max_instruction_length, dim, rng)
        self.readout = self.store.create('fusion.readout', normal(rng, (1, 1, dim), 0.02))
        self.fusion = [TransformerBlock(self.store, f'fusion.blocks.{index}', dim, config.heads, rng)
                       for index in range(config.fusion_depth)]
        self.norm = LayerNorm(self.store, 'fusion.norm', dim)

        if config.freeze_vision:
            self.store.freeze('vision.')

    def attach_head(self, kind: str, groups: int, classes: int) -> Linear:
        """
        Подключение новой головы (предыдущая удаляется)
        :param kind: latent / action
        :param groups: число токенов выхода (s или число осей действия)
        :param classes: число классов на токен (|C| или B)
        :return: голова
        """
        if kind not in (LATENT_HEAD, ACTION_HEAD):
            raise ContractViolation(f'Неизвестная голова {kind}')

        self.detach_head()
        rng = lapa_rng.generator(self.seed, 'policy', 'head', kind)
        self.head = Linear(self.store, f'head.{kind}', self.config.embed_dim, groups * classes, rng)
        self.head_kind, self.head_shape = kind, (groups, classes)
        return self.head

    def detach_head(self) -> None:
        self.store.remove('head.')
        self.head, self.head_kind, self.head_shape = None, None, (0, 0)

    def trunk_state(self) -> dict:
        """ Параметры без головы """
        return {name: value for name, value in self.store.state_dict().items() if not name.startswith('head.')}

    def forward(self, frames: np.ndarray, token_ids: np.ndarray) -> Tensor:
        """
        :param frames: (B, H, W, 3)
        :param token_ids: (B, L)
        :return: логиты (B, groups, classes)
        """
        if self.head is None:
            raise ContractViolation('У политики нет головы')

        token_ids = np.asarray(token_ids)
        batch = len(frames)
        validators.validate_shape('policy.frames', np.shape(frames), (batch, self.image_size, self.image_size, 3))
        validators.validate_shape('policy.token_ids', token_ids.shape, (batch, self.config.max_instruction_length))
        validators.validate_index_range('policy.token_ids', token_ids, self.vocab_size)

        vision = self.patch(images_to_tensor(frames)) + self.vision_pos
        for block in self.vision:
            vision = block(vision)

        text = T.embedding(self.text_embedding, token_ids) + self.text_pos
        readout = self.readout + np.zeros((batch, 1, self.config.embed_dim), dtype=np.float32)
        hidden = T.concat([readout, vision, text], axis=1)

        mask = key_padding_mask(token_ids, self.pad_id, prefix=1 + vision.shape[1])
        for block in self.fusion:
            hidden = block(hidden, mask=mask)

        groups, classes = self.head_shape
        return self.head(self.norm(hidden)[:, 0]).reshape(batch, groups, classes)


def policy_forward(model: PolicyModel, frames: np.ndarray, token_ids: np.ndarray, kind: str) -> Tensor:
    """
    Прямой проход с проверкой режима головы
    :param model: политика
    :param frames: кадры
    :param token_ids: токены инструкции
    :param kind: ожидаемая голова (latent / action)
    :return: логиты (B, s, |C|) или (B, 2, B)
    """
    if model.head_kind != kind:
        raise ContractViolation(f'Подключена голова {model.head_kind}, запрошен режим {kind}')
    return model.forward(frames, token_ids)


def predict_action(model: PolicyModel, spec: BinSpec, frames: np.ndarray, token_ids: np.ndarray,
                   delta_max: float) -> np.ndarray:
    """
    Действие: argmax по каждой оси, центр корзины, ограничение ±delta_max
    :return: (B, 2) float32
    """
    with T.no_grad():
        logits = policy_forward(model, frames, token_ids, ACTION_HEAD)
    actions = spec.decode(logits.data.argmax(axis=-1))
    return np.clip(actions, -delta_max, delta_max).astype(np.float32)


class InverseDynamicsModel:
    """ Модель обратной динамики: пара кадров (t, t + 1) -> корзины действия """

    def __init__(self, config: FinetuneConfig, image_size: int, patch_size: int, heads: int, seed: int = 0) -> None:
        self.config = config
        self.image_size = image_size
        self.seed = seed
        self.store = ParamStore()
        rng = lapa_rng.generator(seed, 'idm', 'init')

        dim = config.idm_embed_dim
        tokens = (image_size // patch_size) ** 2
        self.patch_size = patch_size
        self.heads = heads
        self.patch = PatchEmbed(self.store, 'idm.patch', patch_size, 6, dim, rng)
        self.pos = positional(self.store, 'idm.pos', tokens, dim, rng)
        self.blocks = [TransformerBlock(self.store, f'idm.blocks.{index}', dim, heads, rng)
                       for index in range(config.idm_depth)]
        self.norm = LayerNorm(self.store, 'idm.norm', dim)
        self.head = Linear(self.store, 'idm.head', dim, ACTION_DIMS * config.bins, rng)

    def forward(self, first: np.ndarray, second: np.ndarray) -> Tensor:
        """
        :return: логиты (B, 2, bins)
        """
        validators.validate_same_shape('idm', np.shape(first), np.shape(second))
        pair = np.concatenate([images_to_tensor(first).data, images_to_tensor(second).data], axis=-1)

        hidden = self.patch(Tensor(pair)) + self.pos
        for block in self.blocks:
            hidden = block(hidden)
        pooled = self.norm(hidden).mean(axis=1)
        return self.head(pooled).reshape(len(first), ACTION_DIMS, self.config.bins)

    def predict_bins(self, first: np.ndarray, second: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self.forward(first, second).data.argmax(axis=-1)


def save_policy(path: PathType, model: PolicyModel, mode: str, spec: Optional[BinSpec] = None,
                hyperparameters: Optional[dict] = None, rng_state: Optional[dict] = None,
                extra: Optional[dict] = None) -> Path:
    """ Чекпоинт политики: параметры, голова, BinSpec и режим обучения """
    payload = {
        'config': model.config.dict(),
        'image_size': model.image_size,
        'vocab_size': model.vocab_size,
        'pad_id': model.pad_id,
        'seed': model.seed,
        'head_kind': model.head_kind,
        'head_shape': list(model.head_shape),
        'mode': mode,
        'bin_spec': spec.dict() if spec is not None else None,
    }
    payload.update(extra or {})
    return save_checkpoint(path, model.store, 'policy', hyperparameters, rng_state, payload)


def load_policy(path: PathType) -> Tuple[PolicyModel, Optional[BinSpec], CheckpointManifest]:
    """
    Загрузка политики
    :param path: путь чекпоинта
    :return: модель, BinSpec (для головы действий) и манифест
    """
    manifest, state = load_checkpoint(path)
    if manifest.kind != 'policy':
        raise ContractViolation(f'{path}: ожидался чекпоинт policy, получен {manifest.kind}')

    extra = manifest.extra
    model = PolicyModel(PolicyConfig(**extra['config']), extra['image_size'], extra['vocab_size'], extra['seed'],
                        extra['pad_id'])
    if extra['head_kind']:
        model.attach_head(extra['head_kind'], *extra['head_shape'])
    restore_store(model.store, manifest, state)

    spec = BinSpec(**extra['bin_spec']) if extra.get('bin_spec') else None
    return model, spec, manifest
