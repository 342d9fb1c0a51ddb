"""
Дискретизация действий корзинами равного наполнения по каждой оси
"""
# pylint: disable=no-self-argument
from typing import List
import logging

import numpy as np
from pydantic import BaseModel, root_validator

from latent_action_pretraining import validators
from latent_action_pretraining.exceptions import ContractViolation


logger = logging.getLogger(__name__)


class BinSpec(BaseModel):
    """
    Границы корзин по осям действия.
    Корзины замкнуты слева: значение, равное границе, попадает в верхнюю корзину.
    """
    bins: int
    boundaries: List[List[float]]
    centers: List[List[float]]
    low: List[float]
    high: List[float]

    @root_validator(skip_on_failure=True)
    def _validate_boundaries(cls, values):
        bins = values['bins']
        for dimension, boundaries in enumerate(values['boundaries']):
            if len(boundaries) != bins - 1:
                raise ValueError(f'ось {dimension}: {len(boundaries)} границ вместо {bins - 1}')
            if any(left >= right for left, right in zip(boundaries, boundaries[1:])):
                raise ValueError(f'ось {dimension}: границы должны строго возрастать')
        if any(len(centers) != bins for centers in values['centers']):
            raise ValueError('число центров должно совпадать с числом корзин')
        return values

    @property
    def dims(self) -> int:
        return len(self.boundaries)

    def encode(self, actions: np.ndarray) -> np.ndarray:
        """
        Номера корзин; значения вне диапазона обучения попадают в крайние корзины
        :param actions: (..., dims)
        :return: (..., dims) int64
        """
        actions = np.asarray(actions, dtype=np.float64)
        validators.validate_shape('BinSpec.encode', actions.shape[-1:], (self.dims, ))
        columns = [np.searchsorted(np.asarray(self.boundaries[dimension]), actions[..., dimension], side='right')
                   for dimension in range(self.dims)]
        return np.stack(columns, axis=-1).astype(np.int64)

    def decode(self, bins: np.ndarray) -> np.ndarray:
        """
        Центры корзин (медианы обучающих значений)
        :param bins: (..., dims)
        :return: (..., dims) float32
        """
        bins = np.asarray(bins)
        validators.validate_index_range('BinSpec.decode', bins, self.bins)
        columns = [np.asarray(self.centers[dimension])[bins[..., dimension]] for dimension in range(self.dims)]
        return np.stack(columns, axis=-1).astype(np.float32)

    def width(self, dimension: int, index: int) -> float:
        """ Ширина корзины; крайние корзины ограничены диапазоном обучающих данных """
        edges = [self.low[dimension], *self.boundaries[dimension], self.high[dimension]]
        return float(edges[index + 1] - edges[index])


def _fit_dimension(values: np.ndarray, bins: int, dimension: int) -> List[float]:
    ordered = np.sort(values.astype(np.float64))
    unique = np.unique(ordered)
    if len(unique) < bins:
        raise ContractViolation(f'Вырожденная ось {dimension}: {len(unique)} различных значений на {bins} корзин')

    gaps = (unique[:-1] + unique[1:]) / 2.0
    count = len(ordered)
    # Граница k лежит между ⌊kn/B⌋-м и следующим значением; при совпадении значений - в ближайшем разрыве выше
    positions = [int(np.searchsorted(unique, ordered[k * count // bins - 1])) for k in range(1, bins)]
    for index in range(1, len(positions)):
        positions[index] = max(positions[index], positions[index - 1] + 1)
    upper = len(gaps)
    for index in range(len(positions) - 1, -1, -1):
        positions[index] = min(positions[index], upper - 1)
        upper = positions[index]

    if any(ordered[k * count // bins - 1] == ordered[k * count // bins] for k in range(1, bins)):
        logger.warning('Ось %d: совпадающие значения нарушают равное наполнение корзин', dimension)

    return [float(gaps[position]) for position in positions]


def fit_bins(actions: np.ndarray, bins: int) -> BinSpec:
    """
    Подбор границ равного наполнения
    :param actions: (n, dims)
    :param bins: число корзин B
    :return: BinSpec
    """
    validators.validate_bin_count(bins)
    actions = np.asarray(actions, dtype=np.float64)
    if actions.ndim == 1:
        actions = actions[:, None]
    if len(actions) < bins:
        raise ContractViolation(f'Нужно не меньше {bins} значений на ось, получено {len(actions)}')

    boundaries = [_fit_dimension(actions[:, dimension], bins, dimension) for dimension in range(actions.shape[1])]

    centers = []
    for dimension, edges in enumerate(boundaries):
        assigned = np.searchsorted(np.asarray(edges), actions[:, dimension], side='right')
        centers.append([float(np.median(actions[assigned == index, dimension])) for index in range(bins)])

    return BinSpec(bins=bins, boundaries=boundaries, centers=centers,
                   low=actions.min(axis=0).tolist(), high=actions.max(axis=0).tolist())


def encode_action(action: np.ndarray, spec: BinSpec) -> np.ndarray:
    return spec.encode(action)


def decode_action(bins: np.ndarray, spec: BinSpec) -> np.ndarray:
    return spec.decode(bins)
