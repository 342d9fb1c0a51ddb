"""
Тензоры с обратным автоматическим дифференцированием поверх numpy.

Граф вычислений строится заново при каждом прямом проходе: каждый результат
хранит ссылки на родителей и функцию, возвращающую градиенты родителей.
"""
from typing import Callable, Iterator, List, Optional, Sequence, Tuple, Union
import contextlib
import math

import numpy as np

from latent_action_pretraining import validators
from latent_action_pretraining.exceptions import ContractViolation


ArrayLike = Union['Tensor', np.ndarray, float, int, Sequence[float]]
BackwardFn = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]

MASK_VALUE = -1e9

_grad_enabled = True
_dtype = np.float32


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """ Отключение построения графа (инференс) """
    global _grad_enabled  # pylint: disable=global-statement
    previous, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = previous


@contextlib.contextmanager
def precision(dtype: type) -> Iterator[None]:
    """
    Временная смена точности новых тензоров.
    Используется только проверкой конечными разностями.

    :param dtype: np.float32 или np.float64
    """
    global _dtype  # pylint: disable=global-statement
    previous, _dtype = _dtype, dtype
    try:
        yield
    finally:
        _dtype = previous


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    """ Плотный тензор с опциональным градиентом """

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None) -> None:
        """
        :param data: значения
        :param requires_grad: нужен ли градиент по тензору
        :param name: имя (для параметров)
        """
        self.data = np.ascontiguousarray(data, dtype=_dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: Tuple['Tensor', ...] = ()
        self._backward: Optional[BackwardFn] = None

    def __repr__(self) -> str:
        label = f', name={self.name!r}' if self.name else ''
        return f'Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})'

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.data.shape)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        backward(self)

    def __add__(self, other: ArrayLike) -> 'Tensor':
        return add(self, other)

    def __radd__(self, other: ArrayLike) -> 'Tensor':
        return add(other, self)

    def __sub__(self, other: ArrayLike) -> 'Tensor':
        return sub(self, other)

    def __rsub__(self, other: ArrayLike) -> 'Tensor':
        return sub(other, self)

    def __mul__(self, other: ArrayLike) -> 'Tensor':
        return mul(self, other)

    def __rmul__(self, other: ArrayLike) -> 'Tensor':
        return mul(other, self)

    def __truediv__(self, other: ArrayLike) -> 'Tensor':
        return div(self, other)

    def __neg__(self) -> 'Tensor':
        return mul(self, -1.0)

    def __matmul__(self, other: 'Tensor') -> 'Tensor':
        return matmul(self, other)

    def __getitem__(self, index) -> 'Tensor':
        return getitem(self, index)

    def reshape(self, *shape: int) -> 'Tensor':
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)

    def transpose(self, *axes: int) -> 'Tensor':
        return transpose(self, axes)

    def sum(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> 'Tensor':
        return tensor_sum(self, axis, keepdims)

    def mean(self, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> 'Tensor':
        return mean(self, axis, keepdims)


def as_tensor(value: ArrayLike) -> Tensor:
    """
    Приведение значения к тензору без градиента
    :param value: тензор, массив или число
    :return: тензор
    """
    return value if isinstance(value, Tensor) else Tensor(value)


def _result(name: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """
    Создание результата операции с регистрацией в графе
    :param name: наименование ядра (для диагностики)
    :param data: значения результата
    :param parents: входы операции
    :param backward_fn: функция градиентов по входам
    :return: тензор-результат
    """
    validators.validate_finite(name, data)
    requires_grad = _grad_enabled and any(parent.requires_grad for parent in parents)
    out = Tensor(data, requires_grad=requires_grad)
    if requires_grad:
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """ Свёртка градиента по осям, размноженным при broadcasting """
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _topological_order(root: Tensor) -> List[Tensor]:
    """ Обход графа в глубину без рекурсии """
    order: List[Tensor] = []
    visited = set()
    stack: List[Tuple[Tensor, bool]] = [(root, False)]

    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:  # pylint: disable=protected-access
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))

    return order


def backward(loss: Tensor) -> None:
    """
    Обратный проход от скалярной функции потерь.
    Градиенты накапливаются только в листьях, требующих градиента.

    :param loss: скалярный тензор
    :return: None
    """
    if loss.data.size != 1:
        raise ContractViolation(f'backward вызывается только для скаляра, получена форма {loss.shape}')
    if not loss.requires_grad:
        return

    grads = {id(loss): np.ones_like(loss.data)}

    for node in reversed(_topological_order(loss)):
        grad = grads.pop(id(node), None)
        if grad is None:
            continue
        if node.is_leaf:
            node.grad = grad.astype(node.data.dtype) if node.grad is None else node.grad + grad
            continue

        parent_grads = node._backward(grad)  # pylint: disable=protected-access
        for parent, parent_grad in zip(node._parents, parent_grads):  # pylint: disable=protected-access
            if parent_grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = parent_grad if key not in grads else grads[key] + parent_grad


# Элементарные операции

def add(left: ArrayLike, right: ArrayLike) -> Tensor:
    left, right = as_tensor(left), as_tensor(right)

    def _backward(grad: np.ndarray):
        return _unbroadcast(grad, left.shape), _unbroadcast(grad, right.shape)

    return _result('add', left.data + right.data, (left, right), _backward)


def sub(left: ArrayLike, right: ArrayLike) -> Tensor:
    left, right = as_tensor(left), as_tensor(right)

    def _backward(grad: np.ndarray):
        return _unbroadcast(grad, left.shape), _unbroadcast(-grad, right.shape)

    return _result('sub', left.data - right.data, (left, right), _backward)


def mul(left: ArrayLike, right: ArrayLike) -> Tensor:
    left, right = as_tensor(left), as_tensor(right)

    def _backward(grad: np.ndarray):
        return _unbroadcast(grad * right.data, left.shape), _unbroadcast(grad * left.data, right.shape)

    return _result('mul', left.data * right.data, (left, right), _backward)


def div(left: ArrayLike, right: ArrayLike) -> Tensor:
    left, right = as_tensor(left), as_tensor(right)

    def _backward(grad: np.ndarray):
        return (_unbroadcast(grad / right.data, left.shape),
                _unbroadcast(-grad * left.data / (right.data * right.data), right.shape))

    return _result('div', left.data / right.data, (left, right), _backward)


def matmul(left: Tensor, right: Tensor) -> Tensor:
    """
    Матричное произведение по двум последним осям с broadcasting по остальным
    :param left: (..., n, k)
    :param right: (..., k, m)
    :return: (..., n, m)
    """
    left, right = as_tensor(left), as_tensor(right)
    if left.ndim < 2 or right.ndim < 2 or left.shape[-1] != right.shape[-2]:
        raise ContractViolation(f'matmul: несовместимые формы {left.shape} и {right.shape}')

    def _backward(grad: np.ndarray):
        return (_unbroadcast(np.matmul(grad, np.swapaxes(right.data, -1, -2)), left.shape),
                _unbroadcast(np.matmul(np.swapaxes(left.data, -1, -2), grad), right.shape))

    return _result('matmul', np.matmul(left.data, right.data), (left, right), _backward)


def reshape(value: Tensor, shape: Tuple[int, ...]) -> Tensor:
    source_shape = value.shape

    def _backward(grad: np.ndarray):
        return (grad.reshape(source_shape), )

    try:
        data = value.data.reshape(shape)
    except ValueError as ex:
        raise ContractViolation(f'reshape: нельзя привести {source_shape} к {tuple(shape)}') from ex

    return _result('reshape', data, (value, ), _backward)


def transpose(value: Tensor, axes: Tuple[int, ...]) -> Tensor:
    inverse = tuple(np.argsort(axes))

    def _backward(grad: np.ndarray):
        return (np.transpose(grad, inverse), )

    return _result('transpose', np.transpose(value.data, axes), (value, ), _backward)


def _is_basic_index(index) -> bool:
    items = index if isinstance(index, tuple) else (index, )
    return all(isinstance(item, (int, slice, type(Ellipsis), type(None))) for item in items)


def getitem(value: Tensor, index) -> Tensor:
    basic = _is_basic_index(index)

    def _backward(grad: np.ndarray):
        full = np.zeros_like(value.data)
        if basic:
            full[index] = grad
        else:
            np.add.at(full, index, grad)
        return (full, )

    return _result('getitem', value.data[index], (value, ), _backward)


def concat(values: Sequence[Tensor], axis: int = 0) -> Tensor:
    values = [as_tensor(value) for value in values]
    sizes = np.cumsum([value.shape[axis] for value in values])[:-1]

    def _backward(grad: np.ndarray):
        return tuple(np.split(grad, sizes, axis=axis))

    try:
        data = np.concatenate([value.data for value in values], axis=axis)
    except ValueError as ex:
        raise ContractViolation(f'concat: несовместимые формы {[value.shape for value in values]}') from ex

    return _result('concat', data, values, _backward)


def tensor_sum(value: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    shape = value.shape

    def _backward(grad: np.ndarray):
        if axis is not None and not keepdims:
            grad = np.expand_dims(grad, axis)
        return (np.broadcast_to(grad, shape).copy(), )

    return _result('sum', value.data.sum(axis=axis, keepdims=keepdims), (value, ), _backward)


def mean(value: Tensor, axis: Optional[Union[int, Tuple[int, ...]]] = None, keepdims: bool = False) -> Tensor:
    count = value.data.size if axis is None else int(np.prod([value.shape[a] for a in np.atleast_1d(axis)]))
    return tensor_sum(value, axis, keepdims) * (1.0 / count)


def stop_gradient(value: Tensor) -> Tensor:
    """
    Тождественное отображение в прямом проходе, блокирующее градиент в обратном
    :param value: тензор
    :return: лист графа без градиента с теми же значениями
    """
    return Tensor(value.data, requires_grad=False)


# Нелинейности и ядра слоёв

def relu(value: Tensor) -> Tensor:
    mask = value.data > 0

    def _backward(grad: np.ndarray):
        return (grad * mask, )

    return _result('relu', value.data * mask, (value, ), _backward)


def sigmoid(value: Tensor) -> Tensor:
    out = 1.0 / (1.0 + np.exp(-value.data))

    def _backward(grad: np.ndarray):
        return (grad * out * (1.0 - out), )

    return _result('sigmoid', out, (value, ), _backward)


def gelu(value: Tensor) -> Tensor:
    """ GELU в tanh-аппроксимации """
    x = value.data
    coefficient = math.sqrt(2.0 / math.pi)
    inner = coefficient * (x + 0.044715 * x ** 3)
    tanh = np.tanh(inner)

    def _backward(grad: np.ndarray):
        derivative = 0.5 * (1.0 + tanh) + 0.5 * x * (1.0 - tanh ** 2) * coefficient * (1.0 + 3 * 0.044715 * x ** 2)
        return (grad * derivative, )

    return _result('gelu', 0.5 * x * (1.0 + tanh), (value, ), _backward)


def softmax(value: Tensor, axis: int = -1) -> Tensor:
    shifted = value.data - value.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=axis, keepdims=True)

    def _backward(grad: np.ndarray):
        return (out * (grad - (grad * out).sum(axis=axis, keepdims=True)), )

    return _result('softmax', out, (value, ), _backward)


def layernorm(value: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """
    Нормализация по последней оси
    :param value: (..., d)
    :param gamma: (d,)
    :param beta: (d,)
    :param eps: стабилизатор дисперсии
    :return: (..., d)
    """
    validators.validate_shape('layernorm.gamma', gamma.shape, (value.shape[-1], ))
    validators.validate_shape('layernorm.beta', beta.shape, (value.shape[-1], ))

    centered = value.data - value.data.mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt((centered ** 2).mean(axis=-1, keepdims=True) + eps)
    normalized = centered * rstd

    def _backward(grad: np.ndarray):
        grad_normalized = grad * gamma.data
        grad_value = rstd * (grad_normalized
                             - grad_normalized.mean(axis=-1, keepdims=True)
                             - normalized * (grad_normalized * normalized).mean(axis=-1, keepdims=True))
        lead_axes = tuple(range(value.ndim - 1))
        return grad_value, (grad * normalized).sum(axis=lead_axes), grad.sum(axis=lead_axes)

    return _result('layernorm', normalized * gamma.data + beta.data, (value, gamma, beta), _backward)


def row_norm(value: Tensor) -> Tensor:
    """
    Евклидова норма по последней оси (keepdims).
    В нуле градиент полагается равным нулю.

    :param value: (..., d)
    :return: (..., 1)
    """
    norm = np.sqrt((value.data ** 2).sum(axis=-1, keepdims=True))

    def _backward(grad: np.ndarray):
        safe = np.where(norm > 0, norm, 1.0)
        return (np.where(norm > 0, grad * value.data / safe, 0.0), )

    return _result('row_norm', norm, (value, ), _backward)


def causal_mask(length: int) -> np.ndarray:
    """ Аддитивная причинная маска (length, length) """
    return np.triu(np.full((length, length), MASK_VALUE, dtype=_dtype), k=1)


def attention(query: Tensor, key: Tensor, value: Tensor, mask: Optional[np.ndarray] = None,
              causal: bool = False) -> Tensor:
    """
    Scaled dot-product attention
    :param query: (..., Lq, d)
    :param key: (..., Lk, d)
    :param value: (..., Lk, dv)
    :param mask: аддитивная маска, совместимая по broadcasting с (..., Lq, Lk)
    :param causal: наложить причинную маску (только для квадратного внимания)
    :return: (..., Lq, dv)
    """
    if query.shape[-1] != key.shape[-1] or key.shape[-2] != value.shape[-2]:
        raise ContractViolation(f'attention: несовместимые формы q={query.shape}, k={key.shape}, v={value.shape}')

    scores = matmul(query, transpose(key, tuple(range(key.ndim - 2)) + (key.ndim - 1, key.ndim - 2)))
    scores = scores * (1.0 / math.sqrt(query.shape[-1]))

    if causal:
        if query.shape[-2] != key.shape[-2]:
            raise ContractViolation(f'attention: причинная маска требует квадратного внимания, '
                                    f'Lq={query.shape[-2]}, Lk={key.shape[-2]}')
        scores = scores + causal_mask(query.shape[-2])
    if mask is not None:
        scores = scores + mask.astype(_dtype)

    return matmul(softmax(scores, axis=-1), value)


def conv2d(value: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """
    Двумерная свёртка в раскладке NHWC через развёртку окон
    :param value: (B, H, W, C)
    :param weight: (kh, kw, C, O)
    :param bias: (O,)
    :param stride: шаг
    :param padding: нулевое дополнение с каждой стороны
    :return: (B, Ho, Wo, O)
    """
    if value.ndim != 4 or weight.ndim != 4 or value.shape[3] != weight.shape[2]:
        raise ContractViolation(f'conv2d: несовместимые формы входа {value.shape} и ядра {weight.shape}')

    batch, height, width, channels = value.shape
    kernel_h, kernel_w, _, out_channels = weight.shape
    out_h = (height + 2 * padding - kernel_h) // stride + 1
    out_w = (width + 2 * padding - kernel_w) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ContractViolation(f'conv2d: ядро {weight.shape[:2]} больше входа {value.shape[1:3]}')

    padded = np.pad(value.data, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (kernel_h, kernel_w), axis=(1, 2))
    windows = windows[:, ::stride, ::stride][:, :out_h, :out_w]
    columns = windows.transpose(0, 1, 2, 4, 5, 3).reshape(batch, out_h, out_w, kernel_h * kernel_w * channels)
    weight_matrix = weight.data.reshape(-1, out_channels)

    out = columns @ weight_matrix
    if bias is not None:
        out = out + bias.data

    def _backward(grad: np.ndarray):
        flat_grad = grad.reshape(-1, out_channels)
        grad_weight = (columns.reshape(-1, weight_matrix.shape[0]).T @ flat_grad).reshape(weight.shape)
        grad_columns = (grad @ weight_matrix.T).reshape(batch, out_h, out_w, kernel_h, kernel_w, channels)

        grad_padded = np.zeros_like(padded)
        for row in range(kernel_h):
            for col in range(kernel_w):
                grad_padded[:, row:row + stride * out_h:stride, col:col + stride * out_w:stride, :] += \
                    grad_columns[:, :, :, row, col, :]

        grad_value = grad_padded[:, padding:padding + height, padding:padding + width, :]
        grad_bias = flat_grad.sum(axis=0) if bias is not None else None
        return grad_value, grad_weight, grad_bias

    parents = (value, weight) if bias is None else (value, weight, bias)
    return _result('conv2d', out, parents, _backward)


def conv1d(value: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """
    Одномерная свёртка (B, L, C) * (k, C, O) -> (B, Lo, O)
    """
    if value.ndim != 3 or weight.ndim != 3:
        raise ContractViolation(f'conv1d: ожидались 3-мерные вход и ядро, получены {value.shape} и {weight.shape}')

    padded = concat([Tensor(np.zeros((value.shape[0], padding, value.shape[2]))), value,
                     Tensor(np.zeros((value.shape[0], padding, value.shape[2])))], axis=1) if padding else value
    out = conv2d(reshape(padded, (padded.shape[0], 1) + padded.shape[1:]),
                 reshape(weight, (1, ) + weight.shape), bias, stride=stride)
    return reshape(out, (out.shape[0], ) + out.shape[2:])


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """
    Выборка строк таблицы
    :param table: (V, d)
    :param ids: целочисленный массив любой формы
    :return: ids.shape + (d,)
    """
    ids = np.asarray(ids)
    validators.validate_index_range('embedding', ids, table.shape[0])

    def _backward(grad: np.ndarray):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, grad)
        return (full, )

    return _result('embedding', table.data[ids], (table, ), _backward)


# Функции потерь (накопление в float64)

def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """
    Средняя перекрёстная энтропия
    :param logits: (N, C)
    :param targets: (N,) индексы классов
    :return: скаляр
    """
    targets = np.asarray(targets)
    validators.validate_shape('cross_entropy.logits', logits.shape, (targets.shape[0], None))
    validators.validate_index_range('cross_entropy.targets', targets, logits.shape[1])

    wide = logits.data.astype(np.float64)
    shifted = wide - wide.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    rows = np.arange(targets.shape[0])
    loss = -log_probs[rows, targets].mean()

    def _backward(grad: np.ndarray):
        probs = np.exp(log_probs)
        probs[rows, targets] -= 1.0
        return ((probs * (float(grad.reshape(-1)[0]) / targets.shape[0])).astype(logits.data.dtype), )

    return _result('cross_entropy', np.asarray(loss), (logits, ), _backward)


def mse(prediction: Tensor, target: ArrayLike) -> Tensor:
    """
    Средний квадрат ошибки
    :param prediction: предсказание
    :param target: цель той же формы
    :return: скаляр
    """
    target = as_tensor(target)
    validators.validate_same_shape('mse', prediction.shape, target.shape)

    difference = prediction.data.astype(np.float64) - target.data.astype(np.float64)
    count = difference.size

    def _backward(grad: np.ndarray):
        scaled = (difference * (2.0 * float(grad.reshape(-1)[0]) / count)).astype(prediction.data.dtype)
        return scaled, -scaled

    return _result('mse', np.asarray((difference ** 2).mean()), (prediction, target), _backward)
