"""
Контейнер чекпоинта: магический заголовок, версия, JSON-манифест и
полезная нагрузка float32 little-endian в порядке манифеста.
"""
from pathlib import Path
from typing import Dict, Optional, Tuple, Union
import os
import struct

import numpy as np

from latent_action_pretraining import settings
from latent_action_pretraining.exceptions import ContractViolation
from latent_action_pretraining.layers import ParamStore
from latent_action_pretraining.schemas import CheckpointManifest, ParamEntry


HEADER = struct.Struct('<8sIQ')
PathType = Union[str, Path]


def save_checkpoint(path: PathType, store: ParamStore, kind: str, hyperparameters: Optional[dict] = None,
                    rng_state: Optional[dict] = None, extra: Optional[dict] = None) -> Path:
    """
    Запись чекпоинта (атомарно через временный файл)
    :param path: путь файла
    :param store: параметры
    :param kind: тип модели (laq, policy, idm)
    :param hyperparameters: гиперпараметры оптимизатора
    :param rng_state: состояние ГСЧ
    :param extra: конфигурация модели, BinSpec, режим и т.п.
    :return: путь
    """
    path = Path(path)
    manifest = CheckpointManifest(
        format_version=settings.CHECKPOINT_VERSION,
        kind=kind,
        params=[ParamEntry(name=name, shape=list(param.shape), trainable=store.is_trainable(name))
                for name, param in store.items()],
        hyperparameters=hyperparameters or {},
        rng_state=rng_state or {},
        extra=extra or {},
    )
    manifest_bytes = manifest.json().encode('utf-8')

    path.parent.mkdir(parents=True, exist_ok=True)
    temporary = path.with_suffix(path.suffix + '.tmp')
    with open(temporary, 'wb') as stream:
        stream.write(HEADER.pack(settings.CHECKPOINT_MAGIC, settings.CHECKPOINT_VERSION, len(manifest_bytes)))
        stream.write(manifest_bytes)
        for _, param in store.items():
            stream.write(param.data.astype('<f4').tobytes())
    os.replace(temporary, path)

    return path


def load_checkpoint(path: PathType) -> Tuple[CheckpointManifest, Dict[str, np.ndarray]]:
    """
    Чтение чекпоинта
    :param path: путь файла
    :return: манифест и словарь {имя: значение}
    """
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise ContractViolation(f'{path}: файл слишком короткий для чекпоинта')

    magic, version, manifest_length = HEADER.unpack_from(raw)
    if magic != settings.CHECKPOINT_MAGIC:
        raise ContractViolation(f'{path}: неверный заголовок {magic!r}')
    if version != settings.CHECKPOINT_VERSION:
        raise ContractViolation(f'{path}: версия формата {version} не поддерживается')

    offset = HEADER.size + manifest_length
    manifest = CheckpointManifest.parse_raw(raw[HEADER.size:offset])
    payload = np.frombuffer(raw, dtype='<f4', offset=offset)

    expected = sum(int(np.prod(entry.shape)) for entry in manifest.params)
    if payload.size != expected:
        raise ContractViolation(f'{path}: длина данных {payload.size} не совпадает с манифестом ({expected})')

    state = {}
    position = 0
    for entry in manifest.params:
        size = int(np.prod(entry.shape))
        state[entry.name] = payload[position:position + size].astype(np.float32).reshape(entry.shape)
        position += size

    return manifest, state


def restore_store(store: ParamStore, manifest: CheckpointManifest, state: Dict[str, np.ndarray]) -> ParamStore:
    """
    Загрузка значений и флагов обучаемости в хранилище
    :param store: хранилище с той же архитектурой
    :param manifest: манифест чекпоинта
    :param state: значения
    :return: хранилище
    """
    store.load_state_dict(state)
    for entry in manifest.params:
        store.set_trainable(entry.name, entry.trainable, exact=True)
    return store
