"""
Наборы траекторий: запись шардов, ленивое чтение, выборка пар кадров
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union
import collections
import logging
import math
import struct

import numpy as np
from PIL import Image

from latent_action_pretraining import rng as lapa_rng
from latent_action_pretraining import settings, world
from latent_action_pretraining.exceptions import ContractViolation, DatasetWriteError, MissingArtifact
from latent_action_pretraining.schemas import DatasetManifest, EnvConfig, ShardManifest


logger = logging.getLogger(__name__)

HEADER = struct.Struct('<8sIQ')
# Длина записи, зерно, длина инструкции, число шагов T, оценка эксперта, индекс категории
RECORD = struct.Struct('<IQIIfB')
MANIFEST_NAME = 'manifest.json'
PathType = Union[str, Path]


@dataclass
class Trajectory:
    """ Траектория: инструкция, T + 1 кадров, T действий """
    instruction: str
    frames: np.ndarray
    actions: np.ndarray
    seed: int
    score: float
    category: str
    split: str = 'seen'

    @property
    def steps(self) -> int:
        return int(self.actions.shape[0])

    @property
    def succeeded(self) -> bool:
        return self.score == 1.0


def encode_record(trajectory: Trajectory) -> bytes:
    """
    Сериализация траектории в запись шарда
    :param trajectory: траектория
    :return: байты записи с префиксом длины
    """
    if len(trajectory.frames) != trajectory.steps + 1:
        raise ContractViolation(f'Кадров {len(trajectory.frames)} при {trajectory.steps} действиях')

    text = trajectory.instruction.encode('utf-8')
    frames = np.ascontiguousarray(trajectory.frames, dtype=np.uint8).tobytes()
    actions = np.ascontiguousarray(trajectory.actions, dtype='<f4').tobytes()
    length = RECORD.size + len(text) + len(frames) + len(actions)

    header = RECORD.pack(length, trajectory.seed, len(text), trajectory.steps, trajectory.score,
                         world.CATEGORIES.index(trajectory.category))
    return header + text + frames + actions


def decode_record(buffer: Union[bytes, np.ndarray, memoryview], offset: int, image_size: int,
                  split: str) -> Trajectory:
    """
    Разбор записи шарда без копирования кадров
    :param buffer: содержимое шарда
    :param offset: начало записи
    :param image_size: сторона кадра
    :param split: сплит набора
    :return: траектория
    """
    length, seed, text_length, steps, score, category = RECORD.unpack_from(buffer, offset)
    position = offset + RECORD.size
    instruction = bytes(buffer[position:position + text_length]).decode('utf-8')
    position += text_length

    frame_bytes = (steps + 1) * image_size * image_size * 3
    frames = np.frombuffer(buffer, dtype=np.uint8, count=frame_bytes, offset=position)
    position += frame_bytes
    actions = np.frombuffer(buffer, dtype='<f4', count=steps * 2, offset=position)

    if position + steps * 8 != offset + length:
        raise ContractViolation(f'Повреждённая запись шарда по смещению {offset}')

    return Trajectory(instruction=instruction,
                      frames=frames.reshape(steps + 1, image_size, image_size, 3),
                      actions=actions.astype(np.float32).reshape(steps, 2),
                      seed=seed, score=float(score), category=world.CATEGORIES[category], split=split)


def write_shard(path: PathType, trajectories: Sequence[Trajectory], image_size: int, split: str) -> ShardManifest:
    """
    Запись шарда: заголовок, манифест, записи с префиксом длины
    :param path: путь файла
    :param trajectories: траектории
    :param image_size: сторона кадра
    :param split: сплит
    :return: манифест шарда
    """
    records = [encode_record(trajectory) for trajectory in trajectories]
    offsets = np.concatenate([[0], np.cumsum([len(record) for record in records])[:-1]]).astype(int).tolist()
    manifest = ShardManifest(
        grammar_version=settings.GRAMMAR_VERSION,
        image_size=image_size,
        records=len(records),
        splits={split: len(records)},
        categories=dict(collections.Counter(trajectory.category for trajectory in trajectories)),
        offsets=offsets if records else [],
    )
    manifest_bytes = manifest.json().encode('utf-8')

    path = Path(path)
    try:
        with open(path, 'wb') as stream:
            stream.write(HEADER.pack(settings.SHARD_MAGIC, settings.SHARD_VERSION, len(manifest_bytes)))
            stream.write(manifest_bytes)
            for record in records:
                stream.write(record)
    except OSError as ex:
        raise DatasetWriteError(str(path), ex.strerror or str(ex)) from ex

    return manifest


def read_shard(path: PathType, split: str = 'seen') -> Tuple[ShardManifest, List[Trajectory]]:
    """
    Чтение шарда через отображение в память
    :param path: путь файла
    :param split: сплит набора
    :return: манифест и траектории (кадры - представления без копирования)
    """
    buffer = np.memmap(path, dtype=np.uint8, mode='r')
    magic, version, manifest_length = HEADER.unpack_from(buffer, 0)
    if magic != settings.SHARD_MAGIC:
        raise ContractViolation(f'{path}: неверный заголовок шарда {magic!r}')
    if version != settings.SHARD_VERSION:
        raise ContractViolation(f'{path}: версия шарда {version} не поддерживается')

    start = HEADER.size + manifest_length
    manifest = ShardManifest.parse_raw(bytes(buffer[HEADER.size:start]))
    trajectories = [decode_record(buffer, start + offset, manifest.image_size, split) for offset in manifest.offsets]
    return manifest, trajectories


def _expert_job(job: Tuple[int, EnvConfig, str]) -> world.Episode:
    seed, config, split = job
    return world.expert_episode(seed, config, split)


def _run_jobs(jobs: List[Tuple[int, EnvConfig, str]], workers: int) -> List[world.Episode]:
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            return list(executor.map(_expert_job, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    return [_expert_job(job) for job in jobs]


def generate_dataset(directory: PathType, count: int, seed: int, config: Optional[EnvConfig] = None,
                     split: str = 'seen', shard_size: Optional[int] = None, workers: Optional[int] = None,
                     dump_frames: int = 0) -> DatasetManifest:
    """
    Генерация набора траекторий скриптовым экспертом с шумом.
    Неуспешные эпизоды отбрасываются, вместо них берутся следующие выведенные зёрна.

    :param directory: каталог набора
    :param count: число траекторий
    :param seed: зерно набора
    :param config: параметры мира
    :param split: сплит
    :param shard_size: записей на шард
    :param workers: число процессов
    :param dump_frames: сколько первых траекторий выгрузить PNG-лентами
    :return: манифест набора
    """
    if count < 1:
        raise ContractViolation(f'Размер набора должен быть положительным, получено {count}')

    config = config or EnvConfig()
    shard_size = shard_size or settings.DATA_SHARD_SIZE
    workers = workers or settings.WORKERS
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as ex:
        raise DatasetWriteError(str(directory), ex.strerror or str(ex)) from ex

    accepted: List[Trajectory] = []
    attempt, rejected = 0, 0
    attempt_limit = 10 * count + 100
    while len(accepted) < count:
        if attempt >= attempt_limit:
            raise ContractViolation(f'Эксперт не справился: {rejected} отказов на {attempt} попыток')

        batch = min(count - len(accepted) + max(2, (count - len(accepted)) // 10), attempt_limit - attempt)
        seeds = [lapa_rng.derive_seed(seed, 'trajectory', split, index) for index in range(attempt, attempt + batch)]
        attempt += batch

        for episode_seed, episode in zip(seeds, _run_jobs([(item, config, split) for item in seeds], workers)):
            if len(accepted) == count:
                break
            if not episode.succeeded:
                rejected += 1
                continue
            accepted.append(Trajectory(instruction=episode.task.instruction, frames=episode.frames,
                                       actions=episode.actions, seed=episode_seed, score=episode.score,
                                       category=episode.task.category, split=split))

    shards, shard_records = [], []
    for number, start in enumerate(range(0, count, shard_size)):
        name = f'shard-{number:05d}.bin'
        write_shard(directory / name, accepted[start:start + shard_size], config.image_size, split)
        shards.append(name)
        shard_records.append(len(accepted[start:start + shard_size]))

    manifest = DatasetManifest(
        grammar_version=settings.GRAMMAR_VERSION,
        seed=seed,
        split=split,
        trajectories=count,
        rejected=rejected,
        image_size=config.image_size,
        delta_max=config.delta_max,
        categories=dict(sorted(collections.Counter(trajectory.category for trajectory in accepted).items())),
        shards=shards,
        shard_records=shard_records,
        success_rate=count / (count + rejected),
    )
    try:
        (directory / MANIFEST_NAME).write_text(manifest.json(indent=2), encoding='utf-8')
    except OSError as ex:
        raise DatasetWriteError(str(directory / MANIFEST_NAME), ex.strerror or str(ex)) from ex

    if dump_frames:
        dump_frame_strips(directory / 'frames', accepted[:dump_frames])

    logger.info('Набор %s: %d траекторий, %d отброшено, категории %s', directory, count, rejected,
                manifest.categories)
    return manifest


def dump_frame_strips(directory: PathType, trajectories: Sequence[Trajectory], scale: int = 4) -> List[Path]:
    """
    Выгрузка кадров траекторий PNG-лентами для просмотра
    :param directory: каталог
    :param trajectories: траектории
    :param scale: увеличение
    :return: пути файлов
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    paths = []
    for index, trajectory in enumerate(trajectories):
        strip = np.concatenate(list(trajectory.frames), axis=1)
        image = Image.fromarray(strip)
        image = image.resize((image.width * scale, image.height * scale), Image.Resampling.NEAREST)
        path = directory / f'trajectory-{index:05d}.png'
        image.save(path)
        paths.append(path)
    return paths


class TrajectoryDataset:
    """ Набор траекторий на диске; шарды отображаются в память при первом обращении """

    def __init__(self, directory: PathType) -> None:
        self.directory = Path(directory)
        manifest_path = self.directory / MANIFEST_NAME
        if not manifest_path.exists():
            raise MissingArtifact(str(manifest_path), 'gen-data')

        self.manifest = DatasetManifest.parse_file(manifest_path)
        if self.manifest.grammar_version != settings.GRAMMAR_VERSION:
            raise ContractViolation(f'{manifest_path}: версия грамматики {self.manifest.grammar_version} '
                                    f'не поддерживается')
        self._trajectories: Optional[List[Trajectory]] = None

    def _load(self) -> List[Trajectory]:
        if self._trajectories is None:
            trajectories = []
            for name in self.manifest.shards:
                _, records = read_shard(self.directory / name, self.manifest.split)
                trajectories.extend(records)
            self._trajectories = trajectories
        return self._trajectories

    def __len__(self) -> int:
        return self.manifest.trajectories

    def __getitem__(self, index: int) -> Trajectory:
        return self._load()[index]

    def __iter__(self) -> Iterator[Trajectory]:
        return iter(self._load())

    @property
    def image_size(self) -> int:
        return self.manifest.image_size

    def split_indices(self, fraction: float) -> Tuple[np.ndarray, np.ndarray]:
        """
        Детерминированное разбиение на обучение / валидацию: валидация - хвост набора
        :param fraction: доля валидации
        :return: индексы обучения и валидации
        """
        held_out = min(max(int(math.ceil(len(self) * fraction)), 1), len(self) - 1) if len(self) > 1 else 0
        indices = np.arange(len(self))
        return indices[:len(self) - held_out], indices[len(self) - held_out:]

    def pair_index(self, window: int, trajectories: Optional[Sequence[int]] = None) -> np.ndarray:
        """
        Все пары (траектория, t) с t + window в пределах траектории
        :param window: окно H
        :param trajectories: подмножество траекторий
        :return: (N, 2)
        """
        if window < 1:
            raise ContractViolation(f'Окно должно быть положительным, получено {window}')

        selected = range(len(self)) if trajectories is None else trajectories
        pairs = [(index, t) for index in selected for t in range(self[index].steps + 1 - window)]
        return np.array(pairs, dtype=np.int64).reshape(-1, 2)

    def frame_pairs(self, pairs: np.ndarray, window: int) -> Tuple[np.ndarray, np.ndarray]:
        """
        Кадры x_t и x_{t+H} для списка пар
        :param pairs: (N, 2) индексы (траектория, t)
        :param window: окно H
        :return: два массива (N, H, W, 3)
        """
        first = np.stack([self[index].frames[t] for index, t in pairs])
        second = np.stack([self[index].frames[t + window] for index, t in pairs])
        return first, second

    def sample_pairs(self, generator: np.random.Generator, count: int, window: int,
                     pairs: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
        """ Случайная выборка пар кадров с возвращением """
        pairs = self.pair_index(window) if pairs is None else pairs
        if len(pairs) == 0:
            raise ContractViolation(f'В наборе нет пар кадров с окном {window}')
        return self.frame_pairs(pairs[generator.integers(len(pairs), size=count)], window)

    def category_counts(self) -> Dict[str, int]:
        return dict(self.manifest.categories)
