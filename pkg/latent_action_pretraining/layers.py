"""
Хранилище параметров и слои трансформера поверх tensor.py
"""
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from latent_action_pretraining import tensor as T
from latent_action_pretraining.exceptions import ContractViolation
from latent_action_pretraining.tensor import Tensor


class ParamStore:
    """ Именованные параметры модели с флагом обучаемости """

    def __init__(self) -> None:
        self._params: Dict[str, Tensor] = {}
        self._trainable: Dict[str, bool] = {}

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def create(self, name: str, data: np.ndarray, trainable: bool = True) -> Tensor:
        """
        Регистрация параметра
        :param name: уникальное имя
        :param data: начальное значение
        :param trainable: обучаемый ли параметр
        :return: тензор параметра
        """
        if name in self._params:
            raise ContractViolation(f'Параметр {name} уже зарегистрирован')

        param = Tensor(data, requires_grad=trainable, name=name)
        self._params[name] = param
        self._trainable[name] = trainable
        return param

    def items(self) -> List[Tuple[str, Tensor]]:
        return list(self._params.items())

    def trainable_items(self) -> List[Tuple[str, Tensor]]:
        return [(name, param) for name, param in self._params.items() if self._trainable[name]]

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def set_trainable(self, prefix: str, trainable: bool, exact: bool = False) -> List[str]:
        """
        Заморозка / разморозка параметров по префиксу имени
        :param prefix: префикс имени
        :param trainable: новое значение флага
        :param exact: только параметр с именем, равным prefix
        :return: список затронутых имён
        """
        names = [name for name in self._params if (name == prefix if exact else name.startswith(prefix))]
        for name in names:
            self._trainable[name] = trainable
            self._params[name].requires_grad = trainable
        return names

    def freeze(self, prefix: str) -> List[str]:
        return self.set_trainable(prefix, False)

    def remove(self, prefix: str) -> List[str]:
        """
        Удаление параметров по префиксу (снятие головы)
        :param prefix: префикс имени
        :return: список удалённых имён
        """
        names = [name for name in self._params if name.startswith(prefix)]
        for name in names:
            del self._params[name]
            del self._trainable[name]
        return names

    def zero_grad(self) -> None:
        for param in self._params.values():
            param.grad = None

    def state_dict(self, prefix: str = '') -> Dict[str, np.ndarray]:
        return {name: param.data.copy() for name, param in self._params.items() if name.startswith(prefix)}

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        """
        Загрузка значений в существующие тензоры (на месте)
        :param state: словарь {имя: значение}
        :param strict: требовать точного совпадения набора имён
        :return: None
        """
        if strict and set(state) != set(self._params):
            missing = sorted(set(self._params) - set(state))
            unexpected = sorted(set(state) - set(self._params))
            raise ContractViolation(f'Несовпадение параметров: отсутствуют {missing}, лишние {unexpected}')

        for name, value in state.items():
            if name not in self._params:
                continue
            param = self._params[name]
            if tuple(value.shape) != param.shape:
                raise ContractViolation(f'{name}: форма {tuple(value.shape)} вместо {param.shape}')
            param.data[...] = value

    def parameter_count(self) -> int:
        return int(sum(param.data.size for param in self._params.values()))


def normal(rng: np.random.Generator, shape: Tuple[int, ...], std: float) -> np.ndarray:
    return rng.normal(0.0, std, size=shape).astype(np.float32)


class Linear:
    """ Полносвязный слой x @ W + b """

    def __init__(self, store: ParamStore, name: str, in_features: int, out_features: int,
                 rng: np.random.Generator, bias: bool = True) -> None:
        self.weight = store.create(f'{name}.weight', normal(rng, (in_features, out_features), in_features ** -0.5))
        self.bias = store.create(f'{name}.bias', np.zeros(out_features, dtype=np.float32)) if bias else None

    def __call__(self, value: Tensor) -> Tensor:
        out = value @ self.weight
        return out + self.bias if self.bias is not None else out


class LayerNorm:
    def __init__(self, store: ParamStore, name: str, dim: int) -> None:
        self.gamma = store.create(f'{name}.gamma', np.ones(dim, dtype=np.float32))
        self.beta = store.create(f'{name}.beta', np.zeros(dim, dtype=np.float32))

    def __call__(self, value: Tensor) -> Tensor:
        return T.layernorm(value, self.gamma, self.beta)


class MultiHeadAttention:
    """ Многоголовое внимание; при переданном context - перекрёстное """

    def __init__(self, store: ParamStore, name: str, dim: int, heads: int, rng: np.random.Generator) -> None:
        if dim % heads:
            raise ContractViolation(f'Размерность {dim} не делится на число голов {heads}')

        self.heads = heads
        self.query = Linear(store, f'{name}.query', dim, dim, rng)
        self.key = Linear(store, f'{name}.key', dim, dim, rng)
        self.value = Linear(store, f'{name}.value', dim, dim, rng)
        self.out = Linear(store, f'{name}.out', dim, dim, rng)

    def _split(self, value: Tensor) -> Tensor:
        batch, length, dim = value.shape
        return value.reshape(batch, length, self.heads, dim // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, value: Tensor, context: Optional[Tensor] = None, mask: Optional[np.ndarray] = None,
                 causal: bool = False) -> Tensor:
        """
        :param value: запросы (B, Lq, D)
        :param context: ключи / значения (B, Lk, D), по умолчанию value
        :param mask: аддитивная маска, совместимая с (B, heads, Lq, Lk)
        :param causal: причинная маска
        :return: (B, Lq, D)
        """
        context = value if context is None else context
        batch, length, dim = value.shape

        attended = T.attention(self._split(self.query(value)), self._split(self.key(context)),
                               self._split(self.value(context)), mask=mask, causal=causal)
        return self.out(attended.transpose(0, 2, 1, 3).reshape(batch, length, dim))


class MLP:
    def __init__(self, store: ParamStore, name: str, dim: int, hidden: int, rng: np.random.Generator) -> None:
        self.fc_in = Linear(store, f'{name}.fc_in', dim, hidden, rng)
        self.fc_out = Linear(store, f'{name}.fc_out', hidden, dim, rng)

    def __call__(self, value: Tensor) -> Tensor:
        return self.fc_out(T.gelu(self.fc_in(value)))


class TransformerBlock:
    """ Блок трансформера с pre-LN """

    def __init__(self, store: ParamStore, name: str, dim: int, heads: int, rng: np.random.Generator,
                 mlp_ratio: int = 4) -> None:
        self.norm_attention = LayerNorm(store, f'{name}.norm_attention', dim)
        self.attention = MultiHeadAttention(store, f'{name}.attention', dim, heads, rng)
        self.norm_mlp = LayerNorm(store, f'{name}.norm_mlp', dim)
        self.mlp = MLP(store, f'{name}.mlp', dim, dim * mlp_ratio, rng)

    def __call__(self, value: Tensor, mask: Optional[np.ndarray] = None, causal: bool = False) -> Tensor:
        value = value + self.attention(self.norm_attention(value), mask=mask, causal=causal)
        return value + self.mlp(self.norm_mlp(value))


class CrossAttentionBlock:
    """ Запросы из value внимают к context; остаточная связь по запросам """

    def __init__(self, store: ParamStore, name: str, dim: int, heads: int, rng: np.random.Generator) -> None:
        self.norm_query = LayerNorm(store, f'{name}.norm_query', dim)
        self.norm_context = LayerNorm(store, f'{name}.norm_context', dim)
        self.attention = MultiHeadAttention(store, f'{name}.attention', dim, heads, rng)
        self.norm_mlp = LayerNorm(store, f'{name}.norm_mlp', dim)
        self.mlp = MLP(store, f'{name}.mlp', dim, dim * 4, rng)

    def __call__(self, value: Tensor, context: Tensor) -> Tensor:
        value = value + self.attention(self.norm_query(value), context=self.norm_context(context))
        return value + self.mlp(self.norm_mlp(value))


class PatchEmbed:
    """ Разбиение кадра на патчи свёрткой kernel = stride = patch_size """

    def __init__(self, store: ParamStore, name: str, patch_size: int, channels: int, dim: int,
                 rng: np.random.Generator) -> None:
        fan_in = patch_size * patch_size * channels
        self.patch_size = patch_size
        self.weight = store.create(f'{name}.weight', normal(rng, (patch_size, patch_size, channels, dim),
                                                            fan_in ** -0.5))
        self.bias = store.create(f'{name}.bias', np.zeros(dim, dtype=np.float32))

    def __call__(self, images: Tensor) -> Tensor:
        """
        :param images: (B, H, W, C)
        :return: (B, N, D), N = (H / patch) * (W / patch)
        """
        grid = T.conv2d(images, self.weight, self.bias, stride=self.patch_size)
        batch, rows, cols, dim = grid.shape
        return grid.reshape(batch, rows * cols, dim)


class ConvReducer:
    """ Свёртка по сетке токенов, задающая длину латентной последовательности """

    def __init__(self, store: ParamStore, name: str, in_dim: int, out_dim: int, kernel: int, stride: int,
                 padding: int, rng: np.random.Generator) -> None:
        self.stride = stride
        self.padding = padding
        self.weight = store.create(f'{name}.weight', normal(rng, (kernel, kernel, in_dim, out_dim),
                                                            (kernel * kernel * in_dim) ** -0.5))
        self.bias = store.create(f'{name}.bias', np.zeros(out_dim, dtype=np.float32))

    def __call__(self, tokens: Tensor, grid: int) -> Tensor:
        """
        :param tokens: (B, grid * grid, D)
        :param grid: сторона сетки
        :return: (B, s, out_dim)
        """
        batch, _, dim = tokens.shape
        reduced = T.conv2d(tokens.reshape(batch, grid, grid, dim), self.weight, self.bias,
                           stride=self.stride, padding=self.padding)
        return reduced.reshape(batch, reduced.shape[1] * reduced.shape[2], reduced.shape[3])


def positional(store: ParamStore, name: str, length: int, dim: int, rng: np.random.Generator) -> Tensor:
    """ Обучаемое позиционное кодирование """
    return store.create(name, normal(rng, (length, dim), 0.02))


def images_to_tensor(frames: np.ndarray) -> Tensor:
    """
    Кадры uint8 (B, H, W, 3) -> тензор в [0, 1]; вещественные кадры считаются уже нормированными
    :param frames: кадры
    :return: тензор
    """
    frames = np.asarray(frames)
    if frames.dtype.kind == 'f':
        return Tensor(frames.astype(np.float32))
    return Tensor(frames.astype(np.float32) / 255.0)


def key_padding_mask(token_ids: np.ndarray, pad_id: int, prefix: int = 0, suffix: int = 0) -> np.ndarray:
    """
    Аддитивная маска ключей для паддинга
    :param token_ids: (B, L)
    :param pad_id: идентификатор паддинга
    :param prefix: число непаддинговых токенов перед текстом
    :param suffix: число непаддинговых токенов после текста
    :return: (B, 1, 1, prefix + L + suffix)
    """
    batch = token_ids.shape[0]
    masked = np.concatenate([np.zeros((batch, prefix), dtype=bool), token_ids == pad_id,
                             np.zeros((batch, suffix), dtype=bool)], axis=1)
    return np.where(masked, T.MASK_VALUE, 0.0).astype(np.float32)[:, None, None, :]
