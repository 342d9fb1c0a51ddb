"""
Обучение LAQ, замена неиспользуемых кодов, разметка набора латентными метками
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple, Union
import logging
import math

import numpy as np

from latent_action_pretraining import tensor as T
from latent_action_pretraining.datasets import TrajectoryDataset
from latent_action_pretraining.exceptions import ContractViolation, MissingArtifact, NumericFault
from latent_action_pretraining.laq import LaqModel, save_laq
from latent_action_pretraining.optim import AdamState, adam_step, clip_grad_norm
from latent_action_pretraining.rng import RngStreams


logger = logging.getLogger(__name__)

PathType = Union[str, Path]
MetricsCallback = Callable[[dict], None]


@dataclass
class LaqTrainingResult:
    checkpoint: Optional[Path]
    metrics: List[dict]
    validation_mse: float
    baseline_mse: float
    usage: np.ndarray
    replaced: int = 0


@dataclass
class LatentLabels:
    """ Латентные метки, ключ - (шард, траектория, t) """
    shard: np.ndarray
    trajectory: np.ndarray
    t: np.ndarray
    codes: np.ndarray
    window: int
    codebook_size: int
    config_hash: str = ''
    extra: Dict[str, str] = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.codes.shape[0])

    def for_trajectory(self, index: int) -> np.ndarray:
        return self.codes[self.trajectory == index]


def replace_dead_codes(codebook: np.ndarray, usage: np.ndarray, buffer: np.ndarray,
                       generator: np.random.Generator) -> Tuple[np.ndarray, List[int]]:
    """
    Замена кодов, не выбранных за окно, случайными недавними векторами d
    :param codebook: (|C|, D_c)
    :param usage: число выборов каждого кода за окно
    :param buffer: недавние векторы d (M, D_c)
    :param generator: генератор
    :return: новая кодовая книга и индексы заменённых строк
    """
    dead = [int(index) for index in np.flatnonzero(np.asarray(usage) == 0)]
    codebook = np.array(codebook, copy=True)
    if not dead or len(buffer) == 0:
        return codebook, []

    picks = generator.choice(len(buffer), size=len(dead), replace=len(buffer) < len(dead))
    codebook[dead] = np.asarray(buffer)[picks]
    return codebook, dead


def perplexity(usage: np.ndarray) -> float:
    """ Перплексия распределения использования кодов """
    total = float(np.sum(usage))
    if total == 0:
        return 0.0
    probabilities = np.asarray(usage, dtype=np.float64) / total
    probabilities = probabilities[probabilities > 0]
    return float(math.exp(-(probabilities * np.log(probabilities)).sum()))


class _RecentBuffer:
    """ Кольцевой буфер последних векторов d """

    def __init__(self, size: int, dim: int) -> None:
        self.values = np.zeros((size, dim), dtype=np.float32)
        self.position = 0
        self.filled = 0

    def extend(self, rows: np.ndarray) -> None:
        for row in rows[-len(self.values):]:
            self.values[self.position] = row
            self.position = (self.position + 1) % len(self.values)
            self.filled = min(self.filled + 1, len(self.values))

    def contents(self) -> np.ndarray:
        return self.values[:self.filled]


def reconstruction_mse(model: LaqModel, dataset: TrajectoryDataset, pairs: np.ndarray,
                       batch_size: int = 64) -> Tuple[float, float]:
    """
    Валидационная MSE (точное квантование) и MSE базовой линии "копия x_t"
    :param model: модель
    :param dataset: набор
    :param pairs: (N, 2) пары (траектория, t)
    :param batch_size: размер пакета
    :return: (mse модели, mse копии)
    """
    window = model.config.window
    model_error, baseline_error, count = 0.0, 0.0, 0
    for start in range(0, len(pairs), batch_size):
        first, second = dataset.frame_pairs(pairs[start:start + batch_size], window)
        with T.no_grad():
            reconstruction, _ = model.forward(first, second)

        target = second.astype(np.float64) / 255.0
        model_error += float(((reconstruction.data.astype(np.float64) - target) ** 2).mean()) * len(first)
        baseline_error += float(((first.astype(np.float64) / 255.0 - target) ** 2).mean()) * len(first)
        count += len(first)

    return model_error / count, baseline_error / count


def codebook_usage(model: LaqModel, dataset: TrajectoryDataset, pairs: np.ndarray,
                   batch_size: int = 256) -> np.ndarray:
    """ Доля токенов, назначенных каждому коду, на заданных парах """
    counts = np.zeros(model.config.codebook_size, dtype=np.int64)
    for start in range(0, len(pairs), batch_size):
        first, second = dataset.frame_pairs(pairs[start:start + batch_size], model.config.window)
        counts += np.bincount(model.label(first, second).ravel(), minlength=model.config.codebook_size)
    return counts / max(int(counts.sum()), 1)


def train_laq(model: LaqModel, dataset: TrajectoryDataset, seed: int, checkpoint_path: Optional[PathType] = None,
              validation_fraction: float = 0.05, on_metrics: Optional[MetricsCallback] = None) -> LaqTrainingResult:
    """
    Обучение LAQ на L2-реконструкции с NSVQ и заменой кодов в начале обучения
    :param model: модель
    :param dataset: набор траекторий (действия не используются)
    :param seed: зерно потоков выборки и шума
    :param checkpoint_path: путь чекпоинта; обновляется на каждой валидации
    :param validation_fraction: доля траекторий валидации
    :param on_metrics: обработчик строк метрик
    :return: результат обучения
    """
    config = model.config
    if dataset.image_size != config.image_size:
        raise ContractViolation(f'Кадры набора {dataset.image_size}px, модель ожидает {config.image_size}px')

    streams = RngStreams(seed)
    train_ids, validation_ids = dataset.split_indices(validation_fraction)
    train_pairs = dataset.pair_index(config.window, train_ids)
    validation_pairs = dataset.pair_index(config.window, validation_ids)
    if len(train_pairs) == 0 or len(validation_pairs) == 0:
        raise ContractViolation(f'Недостаточно пар кадров для окна {config.window}')
    if len(validation_pairs) > config.validation_pairs:
        chosen = streams.stream('laq-validation').choice(len(validation_pairs), config.validation_pairs,
                                                          replace=False)
        validation_pairs = validation_pairs[np.sort(chosen)]

    sample_first, _ = dataset.sample_pairs(streams.stream('laq-bias'), min(256, len(train_pairs)), config.window,
                                           train_pairs)
    model.set_output_bias(sample_first.reshape(-1, 3).mean(axis=0) / 255.0)

    optimizer = AdamState(lr=config.lr)
    usage = np.zeros(config.codebook_size, dtype=np.int64)
    recent = _RecentBuffer(config.buffer_size, config.code_dim)
    metrics: List[dict] = []
    last_good: Optional[Path] = None
    validation_mse, baseline_mse = float('nan'), float('nan')
    replaced_total = 0

    def emit(row: dict) -> None:
        metrics.append(row)
        if on_metrics is not None:
            on_metrics(row)

    for step in range(config.steps):
        first, second = dataset.sample_pairs(streams.stream('laq-batch'), config.batch_size, config.window,
                                             train_pairs)
        try:
            loss, trace = model.loss(first, second, streams.stream('laq-nsvq'))
            T.backward(loss)
        except NumericFault as ex:
            raise NumericFault(f'LAQ разошлась: {ex}', step=step,
                               checkpoint=str(last_good) if last_good else None) from ex

        grad_norm = clip_grad_norm(model.store, config.grad_clip)
        adam_step(model.store, optimizer)

        usage += np.bincount(trace.indices.ravel(), minlength=config.codebook_size)
        recent.extend(trace.d.reshape(-1, config.code_dim))

        if step % config.log_every == 0:
            logger.info('LAQ шаг %d: loss %.5f, норма градиента %.3f', step, loss.item(), grad_norm)
        row = {'step': step, 'loss': loss.item(), 'grad_norm': grad_norm}

        if (step + 1) % config.replacement_window == 0:
            row['perplexity'] = perplexity(usage)
            logger.info('LAQ шаг %d: использование кодов %s', step, usage.tolist())
            if config.replacement and step < config.warmup_steps:
                codebook, dead = replace_dead_codes(model.codebook.data, usage, recent.contents(),
                                                    streams.stream('laq-replace'))
                if dead:
                    model.codebook.data[...] = codebook
                    optimizer.reset_rows('codebook', dead)
                    replaced_total += len(dead)
                    logger.info('LAQ шаг %d: заменены коды %s', step, dead)
            usage[...] = 0

        if (step + 1) % config.eval_every == 0 or step + 1 == config.steps:
            validation_mse, baseline_mse = reconstruction_mse(model, dataset, validation_pairs)
            row.update(validation_mse=validation_mse, baseline_mse=baseline_mse)
            logger.info('LAQ шаг %d: валидация %.5f, копия x_t %.5f', step, validation_mse, baseline_mse)
            if checkpoint_path is not None:
                last_good = save_laq(checkpoint_path, model, optimizer.hyperparameters(), streams.state(),
                                     {'step': step + 1, 'validation_mse': validation_mse})

        emit(row)

    held_out_usage = codebook_usage(model, dataset, validation_pairs)
    if (held_out_usage < config.usage_floor).any():
        logger.warning('Коды ниже порога использования %.3f: %s', config.usage_floor,
                       np.flatnonzero(held_out_usage < config.usage_floor).tolist())

    return LaqTrainingResult(checkpoint=last_good, metrics=metrics, validation_mse=validation_mse,
                             baseline_mse=baseline_mse, usage=held_out_usage, replaced=replaced_total)


def label_dataset(model: LaqModel, dataset: TrajectoryDataset, batch_size: int = 256,
                  config_hash: str = '') -> LatentLabels:
    """
    Латентные метки всех пар (t, t + H): T + 1 - H меток на траекторию, без шума
    :param model: обученная модель
    :param dataset: набор
    :param batch_size: размер пакета
    :param config_hash: хэш конфигурации, создавшей чекпоинт
    :return: метки
    """
    if dataset.image_size != model.config.image_size:
        raise ContractViolation(f'Кадры набора {dataset.image_size}px не совпадают с чекпоинтом '
                                f'({model.config.image_size}px)')

    window = model.config.window
    pairs = dataset.pair_index(window)
    codes = np.zeros((len(pairs), model.config.sequence_length), dtype=np.int64)
    for start in range(0, len(pairs), batch_size):
        first, second = dataset.frame_pairs(pairs[start:start + batch_size], window)
        codes[start:start + batch_size] = model.label(first, second)

    boundaries = np.cumsum(dataset.manifest.shard_records)
    shards = np.searchsorted(boundaries, pairs[:, 0], side='right') if len(pairs) else np.zeros(0, dtype=np.int64)

    logger.info('Размечено %d пар кадров (окно %d)', len(pairs), window)
    return LatentLabels(shard=shards.astype(np.int64), trajectory=pairs[:, 0], t=pairs[:, 1], codes=codes,
                        window=window, codebook_size=model.config.codebook_size, config_hash=config_hash)


def save_labels(path: PathType, labels: LatentLabels) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as stream:
        np.savez(stream, shard=labels.shard, trajectory=labels.trajectory, t=labels.t, codes=labels.codes,
                 window=np.array(labels.window), codebook_size=np.array(labels.codebook_size),
                 config_hash=np.array(labels.config_hash))
    return path


def load_labels(path: PathType) -> LatentLabels:
    """
    Чтение файла меток
    :param path: путь labels.npz
    :return: метки
    """
    path = Path(path)
    if not path.exists():
        raise MissingArtifact(str(path), 'label')

    with np.load(path) as archive:
        return LatentLabels(shard=archive['shard'], trajectory=archive['trajectory'], t=archive['t'],
                            codes=archive['codes'], window=int(archive['window']),
                            codebook_size=int(archive['codebook_size']), config_hash=str(archive['config_hash']))
