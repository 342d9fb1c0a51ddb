"""
Проверка обратного прохода центральными конечными разностями
"""
from typing import Callable, List, Sequence

import numpy as np

from latent_action_pretraining import tensor as T
from latent_action_pretraining.tensor import Tensor


def gradcheck(function: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-3,
              seed: int = 0) -> List[float]:
    """
    Сравнение аналитических градиентов с численными.
    Выход функции сворачивается в скаляр случайной линейной комбинацией.

    :param function: функция от тензоров
    :param inputs: значения входов
    :param h: шаг конечной разности
    :param seed: зерно весов свёртки выхода
    :return: относительная ошибка (по норме) для каждого входа
    """
    with T.precision(np.float64):
        leaves = [Tensor(np.array(value, dtype=np.float64), requires_grad=True) for value in inputs]
        output = function(*leaves)
        weights = np.random.default_rng(seed).standard_normal(output.shape)
        T.backward((output * weights).sum())

        errors = []
        for leaf in leaves:
            analytic = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
            numeric = np.zeros_like(leaf.data)

            for index in np.ndindex(leaf.data.shape):
                original = leaf.data[index]
                leaf.data[index] = original + h
                upper = _weighted(function, leaves, weights)
                leaf.data[index] = original - h
                lower = _weighted(function, leaves, weights)
                leaf.data[index] = original
                numeric[index] = (upper - lower) / (2 * h)

            scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
            errors.append(float(np.linalg.norm(analytic - numeric) / scale))

    return errors


def _weighted(function: Callable[..., Tensor], leaves: Sequence[Tensor], weights: np.ndarray) -> float:
    with T.no_grad():
        return float((function(*leaves).data * weights).sum())
