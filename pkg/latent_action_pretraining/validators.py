from typing import Iterable, Optional, Sequence, Tuple, Union
import math

import numpy as np

from latent_action_pretraining.exceptions import ContractViolation, NumericFault


NumericType = Union[int, float, np.floating]
ShapeType = Tuple[int, ...]


def validate_shape(name: str, shape: Sequence[int], expected: Sequence[Optional[int]]) -> None:
    """
    Проверка формы массива.
    Вызывает ContractViolation, если число осей или размер оси не совпадает.

    :param name: наименование проверяемого значения
    :param shape: фактическая форма
    :param expected: ожидаемая форма, None - любой размер оси
    :return: None
    """
    shape = tuple(shape)
    if len(shape) != len(expected) or any(e is not None and e != s for s, e in zip(shape, expected)):
        pretty = tuple('*' if e is None else e for e in expected)
        raise ContractViolation(f'{name}: ожидалась форма {pretty}, получена {shape}')


def validate_same_shape(name: str, left: Sequence[int], right: Sequence[int]) -> None:
    """
    Проверка совпадения форм двух массивов
    :param name: наименование операции
    :param left: форма левого операнда
    :param right: форма правого операнда
    :return: None
    """
    if tuple(left) != tuple(right):
        raise ContractViolation(f'{name}: формы не совпадают {tuple(left)} и {tuple(right)}')


def validate_finite(name: str, values: np.ndarray) -> None:
    """
    Проверка отсутствия NaN / Inf.
    Вызывает NumericFault, если встречено неконечное значение.

    :param name: наименование операции
    :param values: значения
    :return: None
    """
    if not np.isfinite(values).all():
        raise NumericFault(f'{name}: неконечное значение в результате формы {tuple(np.shape(values))}')


def validate_action(action: Iterable[NumericType], delta_max: float) -> None:
    """
    Проверка действия манипулятора: две компоненты, каждая по модулю не превышает delta_max
    :param action: действие (dx, dy)
    :param delta_max: предельная величина смещения за шаг
    :return: None
    """
    values = tuple(float(component) for component in action)
    if len(values) != 2:
        raise ContractViolation(f'Действие должно иметь 2 компоненты, получено {len(values)}')
    if any(not math.isfinite(value) or abs(value) > delta_max + 1e-7 for value in values):
        raise ContractViolation(f'Действие {values} вне допустимого диапазона ±{delta_max}')


def validate_bin_count(bins: int) -> None:
    """
    Проверка количества корзин дискретизации
    :param bins: количество корзин
    :return: None
    """
    if bins < 2:
        raise ContractViolation(f'Количество корзин должно быть не меньше 2, получено {bins}')


def validate_index_range(name: str, indices: Union[Sequence[int], np.ndarray], size: int) -> None:
    """
    Проверка принадлежности индексов диапазону [0, size)
    :param name: наименование индексов
    :param indices: индексы
    :param size: размер словаря
    :return: None
    """
    indices = np.asarray(indices)
    if indices.size and (indices.min() < 0 or indices.max() >= size):
        raise ContractViolation(f'{name}: индексы [{indices.min()}, {indices.max()}] вне диапазона [0, {size})')


def reduced_token_count(grid: int, kernel: int, stride: int, padding: int) -> int:
    """
    Количество токенов на выходе свёрточного редуктора для квадратной сетки патчей
    :param grid: размер стороны сетки патчей
    :param kernel: размер ядра
    :param stride: шаг
    :param padding: дополнение
    :return: количество токенов (сторона в квадрате)
    """
    side = (grid + 2 * padding - kernel) // stride + 1
    if side < 1:
        raise ContractViolation(f'Редуктор (kernel={kernel}, stride={stride}, padding={padding}) '
                                f'не применим к сетке {grid}x{grid}')
    return side * side


def validate_sequence_length(sequence_length: int, grid: int, kernel: int, stride: int, padding: int) -> None:
    """
    Проверка того, что длина латентной последовательности определяется свёрточным редуктором
    :param sequence_length: заявленная длина s
    :param grid: размер стороны сетки патчей
    :param kernel: размер ядра
    :param stride: шаг
    :param padding: дополнение
    :return: None
    """
    produced = reduced_token_count(grid, kernel, stride, padding)
    if produced != sequence_length:
        raise ContractViolation(f'Длина последовательности s={sequence_length} не совпадает с числом токенов '
                                f'редуктора ({produced}) для сетки {grid}x{grid}')
