"""
Именованные потоки случайных чисел на счётчиковом генераторе Philox.

Каждый поток (данные, инициализация, шум NSVQ, ...) получает собственный ключ,
выведенный из общего зерна и имени, поэтому потоки воспроизводимы независимо.
"""
from typing import Dict, Union
import hashlib

import numpy as np


def derive_key(seed: int, *names: Union[str, int]) -> int:
    """
    Вывод 128-битного ключа Philox из зерна и имени потока
    :param seed: общее зерно
    :param names: составное имя потока
    :return: ключ
    """
    label = ':'.join([str(seed), *[str(name) for name in names]])
    return int.from_bytes(hashlib.sha256(label.encode('utf-8')).digest()[:16], 'little')


def generator(seed: int, *names: Union[str, int]) -> np.random.Generator:
    """
    Независимый генератор для пары (зерно, имя)
    :param seed: общее зерно
    :param names: составное имя потока
    :return: генератор numpy
    """
    return np.random.Generator(np.random.Philox(key=derive_key(seed, *names)))


def derive_seed(seed: int, *names: Union[str, int]) -> int:
    """ Дочернее 63-битное зерно """
    return derive_key(seed, *names) >> 65


class RngStreams:
    """ Набор именованных потоков от одного зерна """

    def __init__(self, seed: int) -> None:
        self.seed = int(seed)
        self._streams: Dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        """
        Поток по имени; повторный вызов возвращает тот же генератор
        :param name: имя потока
        :return: генератор
        """
        if name not in self._streams:
            self._streams[name] = generator(self.seed, name)
        return self._streams[name]

    def fork(self, name: Union[str, int]) -> 'RngStreams':
        """ Дочерний набор потоков с выведенным зерном """
        return RngStreams(derive_seed(self.seed, 'fork', name))

    def state(self) -> dict:
        """
        Сериализуемое в JSON состояние всех созданных потоков
        :return: словарь {имя: состояние Philox}
        """
        return {'seed': self.seed,
                'streams': {name: _jsonify(stream.bit_generator.state) for name, stream in self._streams.items()}}

    def load_state(self, state: dict) -> None:
        """
        Восстановление состояния потоков
        :param state: результат state()
        :return: None
        """
        self.seed = int(state['seed'])
        self._streams = {}
        for name, stream_state in state['streams'].items():
            stream = self.stream(name)
            stream.bit_generator.state = _restore(stream_state)


def _jsonify(value):
    if isinstance(value, np.ndarray):
        return {'__uint64__': [int(item) for item in value.reshape(-1)]}
    if isinstance(value, dict):
        return {key: _jsonify(item) for key, item in value.items()}
    if isinstance(value, np.integer):
        return int(value)
    return value


def _restore(value):
    if isinstance(value, dict) and '__uint64__' in value:
        return np.array(value['__uint64__'], dtype=np.uint64)
    if isinstance(value, dict):
        return {key: _restore(item) for key, item in value.items()}
    return value
