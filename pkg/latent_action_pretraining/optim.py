from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional
import math

import numpy as np

from latent_action_pretraining.exceptions import ContractViolation
from latent_action_pretraining.layers import ParamStore


@dataclass
class AdamState:
    """ Состояние оптимизатора Adam """
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    def hyperparameters(self) -> dict:
        return {'lr': self.lr, 'beta1': self.beta1, 'beta2': self.beta2, 'eps': self.eps, 'step': self.step}

    def reset_rows(self, name: str, rows: Iterable[int]) -> None:
        """
        Обнуление моментов для строк параметра (после замены кодов)
        :param name: имя параметра
        :param rows: индексы строк
        :return: None
        """
        rows = list(rows)
        for moments in (self.first_moment, self.second_moment):
            if name in moments and rows:
                moments[name][rows] = 0.0


def adam_step(store: ParamStore, state: AdamState) -> ParamStore:
    """
    Шаг Adam с коррекцией смещения.
    Замороженные параметры не изменяются, градиенты всех параметров очищаются.

    :param store: хранилище параметров
    :param state: состояние оптимизатора
    :return: хранилище параметров
    """
    trainable = store.trainable_items()

    missing = [name for name, param in trainable if param.grad is None]
    if missing:
        raise ContractViolation(f'Нет градиента у обучаемых параметров: {missing}')

    state.step += 1
    first_correction = 1.0 - state.beta1 ** state.step
    second_correction = 1.0 - state.beta2 ** state.step

    for name, param in trainable:
        first = state.first_moment.setdefault(name, np.zeros_like(param.data))
        second = state.second_moment.setdefault(name, np.zeros_like(param.data))
        if first.shape != param.data.shape:
            raise ContractViolation(f'{name}: форма момента {first.shape} вместо {param.data.shape}')

        grad = param.grad
        first *= state.beta1
        first += (1.0 - state.beta1) * grad
        second *= state.beta2
        second += (1.0 - state.beta2) * grad * grad

        update = state.lr * (first / first_correction) / (np.sqrt(second / second_correction) + state.eps)
        param.data -= update.astype(param.data.dtype)

    store.zero_grad()
    return store


def clip_grad_norm(store: ParamStore, max_norm: Optional[float]) -> float:
    """
    Ограничение общей нормы градиента обучаемых параметров
    :param store: хранилище параметров
    :param max_norm: предельная норма, None - без ограничения
    :return: норма до ограничения
    """
    grads = [param.grad for _, param in store.trainable_items() if param.grad is not None]
    total = math.sqrt(sum(float((grad.astype(np.float64) ** 2).sum()) for grad in grads))

    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for grad in grads:
            grad *= scale

    return total
