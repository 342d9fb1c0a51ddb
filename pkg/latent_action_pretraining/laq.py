"""
Модель квантования латентных действий.

Кодировщик: патчи обоих кадров -> пространственные блоки -> причинный временной
блок -> свёрточный редуктор; d = e2 - e1. Квантование: ближайший код с
подстановкой шума (NSVQ) при обучении и точным кодом при разметке. Декодер:
запросы sg[p1] внимают к d̂, затем пространственные блоки и попиксельная голова.
"""
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from latent_action_pretraining import rng as lapa_rng
from latent_action_pretraining import tensor as T
from latent_action_pretraining import validators
from latent_action_pretraining.checkpoint import load_checkpoint, restore_store, save_checkpoint
from latent_action_pretraining.exceptions import ContractViolation
from latent_action_pretraining.layers import (
    ConvReducer, CrossAttentionBlock, LayerNorm, Linear, ParamStore, PatchEmbed, TransformerBlock,
    images_to_tensor, normal, positional,
)
from latent_action_pretraining.schemas import CheckpointManifest, LaqConfig
from latent_action_pretraining.tensor import Tensor


@dataclass
class QuantizationTrace:
    """ След квантования пакета: d, индексы, d̂, расстояния до выбранных кодов """
    d: np.ndarray
    indices: np.ndarray
    d_hat: np.ndarray
    distances: np.ndarray


def nearest_codes(d: np.ndarray, codebook: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Ближайшие коды по квадрату евклидова расстояния (float64), при равенстве - меньший индекс
    :param d: (..., D_c)
    :param codebook: (|C|, D_c)
    :return: индексы (...) и квадраты расстояний (...)
    """
    d = np.asarray(d, dtype=np.float64)
    codebook = np.asarray(codebook, dtype=np.float64)
    if d.shape[-1] != codebook.shape[-1]:
        raise ContractViolation(f'Размерность вектора {d.shape[-1]} не совпадает с кодами {codebook.shape[-1]}')

    distances = ((d[..., None, :] - codebook) ** 2).sum(axis=-1)
    indices = distances.argmin(axis=-1)
    return indices, np.take_along_axis(distances, indices[..., None], axis=-1)[..., 0]


def quantize_nearest(d_token: np.ndarray, codebook: np.ndarray) -> Tuple[int, np.ndarray]:
    """
    Квантование одного токена
    :param d_token: (D_c,)
    :param codebook: (|C|, D_c)
    :return: индекс и строка кодовой книги
    """
    indices, _ = nearest_codes(np.asarray(d_token)[None], codebook)
    index = int(indices[0])
    return index, np.asarray(codebook)[index]


def nsvq_substitute(d: Tensor, z: Tensor, generator: Optional[np.random.Generator] = None,
                    noise: Optional[np.ndarray] = None) -> Tensor:
    """
    Подстановка ошибки квантования: d̂ = d + ‖d - z‖ · v / ‖v‖, v ~ N(0, I).
    Градиент проходит к d с единичным якобианом и к коду через норму ошибки.

    :param d: (..., D_c)
    :param z: ближайшие коды той же формы
    :param generator: генератор шума
    :param noise: заданный шум v (для проверок)
    :return: d̂
    """
    validators.validate_same_shape('nsvq_substitute', d.shape, z.shape)
    if noise is None and generator is None:
        raise ContractViolation('nsvq_substitute: нужен генератор или заданный шум')

    noise = generator.standard_normal(d.shape) if noise is None else np.array(noise, dtype=np.float64)
    norms = np.sqrt((noise ** 2).sum(axis=-1, keepdims=True))
    while generator is not None and (norms == 0).any():
        zero = (norms == 0)[..., 0]
        noise[zero] = generator.standard_normal((int(zero.sum()), d.shape[-1]))
        norms = np.sqrt((noise ** 2).sum(axis=-1, keepdims=True))
    if (norms == 0).any():
        raise ContractViolation('nsvq_substitute: нулевой вектор шума')

    return d + T.row_norm(d - z) * (noise / norms)


class LaqModel:
    """ Кодировщик, кодовая книга и декодер латентных действий """

    def __init__(self, config: LaqConfig, seed: int = 0) -> None:
        self.config = config
        self.seed = seed
        self.store = ParamStore()
        rng = lapa_rng.generator(seed, 'laq', 'init')

        dim, grid = config.embed_dim, config.grid
        tokens = grid * grid

        self.patch = PatchEmbed(self.store, 'encoder.patch', config.patch_size, 3, dim, rng)
        self.spatial_pos = positional(self.store, 'encoder.spatial_pos', tokens, dim, rng)
        self.time_pos = positional(self.store, 'encoder.time_pos', 2, dim, rng)
        self.spatial = [TransformerBlock(self.store, f'encoder.spatial.{index}', dim, config.heads, rng)
                        for index in range(config.spatial_depth)]
        self.temporal = [TransformerBlock(self.store, f'encoder.temporal.{index}', dim, config.heads, rng)
                         for index in range(config.temporal_depth)]
        self.reducer = ConvReducer(self.store, 'encoder.reducer', dim, config.code_dim, config.reducer_kernel,
                                   config.reducer_stride, config.reducer_padding, rng)

        bound = 1.0 / config.codebook_size
        self.codebook = self.store.create('codebook', rng.uniform(-bound, bound, size=(config.codebook_size,
                                                                                     config.code_dim)))

        self.latent_proj = Linear(self.store, 'decoder.latent_proj', config.code_dim, dim, rng)
        self.latent_pos = positional(self.store, 'decoder.latent_pos', config.sequence_length, dim, rng)
        self.decoder_pos = positional(self.store, 'decoder.pos', tokens, dim, rng)
        self.cross = CrossAttentionBlock(self.store, 'decoder.cross', dim, config.heads, rng)
        self.decoder = [TransformerBlock(self.store, f'decoder.blocks.{index}', dim, config.heads, rng)
                        for index in range(config.decoder_depth)]
        self.norm = LayerNorm(self.store, 'decoder.norm', dim)
        self.head = Linear(self.store, 'decoder.head', dim, config.patch_size ** 2 * 3, rng)
        self.head.weight.data[...] = normal(rng, self.head.weight.shape, 0.02)

    def _check_frames(self, name: str, frames: np.ndarray) -> None:
        size = self.config.image_size
        validators.validate_shape(name, np.shape(frames), (None, size, size, 3))

    def set_output_bias(self, mean_rgb: np.ndarray) -> None:
        """ Начальное смещение пиксельной головы - средний цвет кадров набора """
        self.head.bias.data[...] = np.tile(np.asarray(mean_rgb, dtype=np.float32), self.config.patch_size ** 2)

    def embed_patches(self, frames: np.ndarray) -> Tensor:
        self._check_frames('embed_patches', frames)
        return self.patch(images_to_tensor(frames))

    def encode_pair(self, first: np.ndarray, second: np.ndarray) -> Tuple[Tensor, Tensor]:
        """
        Кодирование пары кадров
        :param first: x_t (B, H, W, 3)
        :param second: x_{t+H} (B, H, W, 3)
        :return: d (B, s, D_c) и патчи первого кадра p1 (B, N, D)
        """
        self._check_frames('encode_pair.first', first)
        self._check_frames('encode_pair.second', second)
        validators.validate_same_shape('encode_pair', np.shape(first), np.shape(second))

        batch, grid, dim = len(first), self.config.grid, self.config.embed_dim
        tokens = grid * grid

        patches = self.patch(images_to_tensor(np.concatenate([first, second])))
        hidden = patches + self.spatial_pos
        for block in self.spatial:
            hidden = block(hidden)

        hidden = hidden.reshape(2, batch, tokens, dim).transpose(1, 2, 0, 3).reshape(batch * tokens, 2, dim)
        hidden = hidden + self.time_pos
        for block in self.temporal:
            hidden = block(hidden, causal=True)

        hidden = hidden.reshape(batch, tokens, 2, dim)
        first_tokens = self.reducer(hidden[:, :, 0], grid)
        second_tokens = self.reducer(hidden[:, :, 1], grid)
        return second_tokens - first_tokens, patches[:batch]

    def decode(self, p1: Tensor, d_hat: Tensor) -> Tensor:
        """
        Предсказание x_{t+H}: запросы sg[p1], ключи / значения - d̂
        :param p1: патчи x_t (B, N, D)
        :param d_hat: (B, s, D_c)
        :return: кадр (B, H, W, 3) в масштабе [0, 1]
        """
        validators.validate_shape('decode.d_hat', d_hat.shape, (p1.shape[0], self.config.sequence_length,
                                                                self.config.code_dim))
        config = self.config
        batch, grid, patch = p1.shape[0], config.grid, config.patch_size

        query = T.stop_gradient(p1) + self.decoder_pos
        context = self.latent_proj(d_hat) + self.latent_pos
        hidden = self.cross(query, context)
        for block in self.decoder:
            hidden = block(hidden)

        pixels = self.head(self.norm(hidden))
        pixels = pixels.reshape(batch, grid, grid, patch, patch, 3).transpose(0, 1, 3, 2, 4, 5)
        return pixels.reshape(batch, config.image_size, config.image_size, 3)

    def forward(self, first: np.ndarray, second: np.ndarray,
                generator: Optional[np.random.Generator] = None) -> Tuple[Tensor, QuantizationTrace]:
        """
        Прямой проход; с генератором - NSVQ (обучение), без него - точный код
        :param first: x_t
        :param second: x_{t+H}
        :param generator: генератор шума NSVQ
        :return: реконструкция x_{t+H} и след квантования
        """
        d, p1 = self.encode_pair(first, second)
        indices, distances = nearest_codes(d.data, self.codebook.data)
        z = T.embedding(self.codebook, indices)
        d_hat = nsvq_substitute(d, z, generator) if generator is not None else z

        trace = QuantizationTrace(d=d.data.copy(), indices=indices, d_hat=d_hat.data.copy(),
                                  distances=np.sqrt(distances))
        return self.decode(p1, d_hat), trace

    def loss(self, first: np.ndarray, second: np.ndarray,
             generator: Optional[np.random.Generator] = None) -> Tuple[Tensor, QuantizationTrace]:
        """ L2-реконструкция x_{t+H} """
        reconstruction, trace = self.forward(first, second, generator)
        return T.mse(reconstruction, images_to_tensor(second)), trace

    def label(self, first: np.ndarray, second: np.ndarray) -> np.ndarray:
        """
        Латентные метки пар точным квантованием, без шума
        :return: (B, s) индексы
        """
        with T.no_grad():
            d, _ = self.encode_pair(first, second)
        indices, _ = nearest_codes(d.data, self.codebook.data)
        return indices.astype(np.int64)

    def world_step(self, frames: np.ndarray, labels: np.ndarray) -> np.ndarray:
        """
        Шаг модели мира: кадр и латентная метка -> предсказанный кадр
        :param frames: (B, H, W, 3) uint8 или float в [0, 1]
        :param labels: (B, s)
        :return: (B, H, W, 3) float32 в [0, 1]
        """
        labels = np.asarray(labels)
        validators.validate_shape('world_step.labels', labels.shape, (len(frames), self.config.sequence_length))
        validators.validate_index_range('world_step.labels', labels, self.config.codebook_size)

        with T.no_grad():
            prediction = self.decode(self.embed_patches(frames), T.embedding(self.codebook, labels))
        return np.clip(prediction.data, 0.0, 1.0)


def save_laq(path: Union[str, Path], model: LaqModel, hyperparameters: Optional[dict] = None,
             rng_state: Optional[dict] = None, extra: Optional[dict] = None) -> Path:
    """ Чекпоинт LAQ: параметры + LaqConfig в манифесте """
    payload = {'config': model.config.dict(), 'seed': model.seed}
    payload.update(extra or {})
    return save_checkpoint(path, model.store, 'laq', hyperparameters, rng_state, payload)


def load_laq(path: Union[str, Path]) -> Tuple[LaqModel, CheckpointManifest]:
    """
    Загрузка LAQ из чекпоинта
    :param path: путь
    :return: модель и манифест
    """
    manifest, state = load_checkpoint(path)
    if manifest.kind != 'laq':
        raise ContractViolation(f'{path}: ожидался чекпоинт laq, получен {manifest.kind}')

    model = LaqModel(LaqConfig(**manifest.extra['config']), manifest.extra.get('seed', 0))
    restore_store(model.store, manifest, state)
    return model, manifest
