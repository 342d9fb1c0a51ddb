"""
Латентное предобучение политики и дообучение на действиях во всех режимах
"""
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union
import collections
import logging

import numpy as np

from latent_action_pretraining import tensor as T
from latent_action_pretraining.binning import BinSpec, fit_bins
from latent_action_pretraining.datasets import TrajectoryDataset
from latent_action_pretraining.exceptions import ContractViolation, NumericFault
from latent_action_pretraining.grammar import VocabMap
from latent_action_pretraining.laq_utils import LatentLabels
from latent_action_pretraining.layers import ParamStore
from latent_action_pretraining.optim import AdamState, adam_step, clip_grad_norm
from latent_action_pretraining.policy import (
    ACTION_DIMS, ACTION_HEAD, LATENT_HEAD, InverseDynamicsModel, PolicyModel, load_policy, policy_forward,
    save_policy,
)
from latent_action_pretraining.rng import RngStreams
from latent_action_pretraining.schemas import MODES, FinetuneConfig, PolicyConfig, RunConfig


logger = logging.getLogger(__name__)

PathType = Union[str, Path]
MetricsCallback = Callable[[dict], None]


@dataclass
class Examples:
    """
    Обучающие примеры политики: индексы кадров в наборе, токены инструкции траектории
    и целевые классы (латентные коды или корзины действия)
    """
    dataset: TrajectoryDataset
    pairs: np.ndarray
    tokens: np.ndarray
    targets: np.ndarray

    def __len__(self) -> int:
        return len(self.pairs)

    def subset(self, mask: np.ndarray) -> 'Examples':
        return Examples(self.dataset, self.pairs[mask], self.tokens, self.targets[mask])

    def batch(self, indices: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """
        :param indices: номера примеров
        :return: кадры (B, H, W, 3), токены (B, L), цели (B, k)
        """
        pairs = self.pairs[indices]
        frames = np.stack([self.dataset[index].frames[t] for index, t in pairs])
        return frames, self.tokens[pairs[:, 0]], self.targets[indices]


@dataclass
class TrainingResult:
    checkpoint: Optional[Path]
    metrics: List[dict]
    train_accuracy: float = 0.0
    validation_accuracy: Optional[float] = None
    one_epoch_accuracy: Optional[float] = None
    steps: int = 0
    extra: Dict[str, float] = field(default_factory=dict)


def tokenize_dataset(dataset: TrajectoryDataset, vocab: VocabMap, length: int) -> np.ndarray:
    """ Токены инструкции каждой траектории (n, L) """
    return np.array([vocab.tokenize(trajectory.instruction, length) for trajectory in dataset], dtype=np.int64)


def latent_examples(dataset: TrajectoryDataset, labels: LatentLabels, vocab: VocabMap, length: int) -> Examples:
    if len(labels) and int(labels.trajectory.max()) >= len(dataset):
        raise ContractViolation('Метки не соответствуют набору: индекс траектории вне диапазона')
    return Examples(dataset, np.stack([labels.trajectory, labels.t], axis=1), tokenize_dataset(dataset, vocab, length),
                    labels.codes)


def action_examples(dataset: TrajectoryDataset, spec: BinSpec, vocab: VocabMap, length: int,
                    actions: Optional[Sequence[np.ndarray]] = None) -> Examples:
    """
    Примеры (кадр x_t, корзины действия a_t)
    :param dataset: набор
    :param spec: границы корзин
    :param vocab: словарь
    :param length: длина инструкции
    :param actions: действия по траекториям вместо истинных (псевдоразметка)
    :return: примеры
    """
    pairs, targets = [], []
    for index, trajectory in enumerate(dataset):
        trajectory_actions = trajectory.actions if actions is None else actions[index]
        pairs.extend((index, t) for t in range(len(trajectory_actions)))
        targets.append(spec.encode(trajectory_actions))
    return Examples(dataset, np.array(pairs, dtype=np.int64).reshape(-1, 2), tokenize_dataset(dataset, vocab, length),
                    np.concatenate(targets).astype(np.int64) if targets else np.zeros((0, ACTION_DIMS), np.int64))


def _token_loss(logits: T.Tensor, targets: np.ndarray) -> T.Tensor:
    """ Сумма перекрёстных энтропий по токенам выхода """
    loss = None
    for group in range(logits.shape[1]):
        term = T.cross_entropy(logits[:, group], targets[:, group])
        loss = term if loss is None else loss + term
    return loss


def token_accuracy(model: PolicyModel, examples: Examples, kind: str, batch_size: int = 256) -> float:
    """ Доля верно предсказанных токенов выхода """
    if len(examples) == 0:
        return 0.0
    correct = 0
    for start in range(0, len(examples), batch_size):
        frames, tokens, targets = examples.batch(np.arange(start, min(start + batch_size, len(examples))))
        with T.no_grad():
            logits = policy_forward(model, frames, tokens, kind)
        correct += int((logits.data.argmax(axis=-1) == targets).sum())
    return correct / (len(examples) * examples.targets.shape[1])


def _train_step(store: ParamStore, optimizer: AdamState, loss: T.Tensor, grad_clip: Optional[float]) -> float:
    T.backward(loss)
    norm = clip_grad_norm(store, grad_clip)
    adam_step(store, optimizer)
    return norm


def pretrain_latent(model: PolicyModel, dataset: TrajectoryDataset, labels: LatentLabels, vocab: VocabMap,
                    config: PolicyConfig, seed: int, checkpoint_path: Optional[PathType] = None,
                    on_metrics: Optional[MetricsCallback] = None) -> TrainingResult:
    """
    Клонирование поведения на латентных метках при замороженном кодировщике кадра
    :param model: политика с латентной головой
    :param dataset: набор предобучения
    :param labels: латентные метки набора
    :param vocab: словарь
    :param config: параметры политики
    :param seed: зерно выборки
    :param checkpoint_path: путь чекпоинта
    :param on_metrics: обработчик строк метрик
    :return: результат
    """
    if model.head_kind != LATENT_HEAD:
        raise ContractViolation('Латентное предобучение требует латентной головы')
    if model.head_shape != (labels.codes.shape[1], labels.codebook_size):
        raise ContractViolation(f'Голова {model.head_shape} не совпадает с метками '
                                f'({labels.codes.shape[1]}, {labels.codebook_size})')

    examples = latent_examples(dataset, labels, vocab, config.max_instruction_length)
    _, validation_ids = dataset.split_indices(config.validation_fraction)
    held_out = np.isin(examples.pairs[:, 0], validation_ids)
    train, validation = examples.subset(~held_out), examples.subset(held_out)
    if len(train) == 0:
        raise ContractViolation('Нет обучающих примеров с латентными метками')

    streams = RngStreams(seed)
    optimizer = AdamState(lr=config.lr)
    metrics: List[dict] = []
    last_good: Optional[Path] = None
    one_epoch: Optional[float] = None
    validation_accuracy: Optional[float] = None

    for step in range(config.pretrain_steps):
        frames, tokens, targets = train.batch(streams.stream('pretrain-batch').integers(len(train),
                                                                                      size=config.batch_size))
        try:
            loss = _token_loss(policy_forward(model, frames, tokens, LATENT_HEAD), targets)
            grad_norm = _train_step(model.store, optimizer, loss, config.grad_clip)
        except NumericFault as ex:
            raise NumericFault(f'Латентное предобучение разошлось: {ex}', step=step,
                               checkpoint=str(last_good) if last_good else None) from ex

        row = {'step': step, 'loss': loss.item(), 'grad_norm': grad_norm}
        if step % config.log_every == 0:
            logger.info('Предобучение шаг %d: loss %.4f', step, loss.item())

        seen = (step + 1) * config.batch_size
        if one_epoch is None and seen >= len(train) and len(validation):
            one_epoch = token_accuracy(model, validation, LATENT_HEAD)
            row['one_epoch_accuracy'] = one_epoch
            logger.info('Предобучение: точность после одной эпохи %.3f', one_epoch)

        if (step + 1) % config.eval_every == 0 or step + 1 == config.pretrain_steps:
            if len(validation):
                validation_accuracy = token_accuracy(model, validation, LATENT_HEAD)
                row['validation_accuracy'] = validation_accuracy
                logger.info('Предобучение шаг %d: точность валидации %.3f (случайная %.3f)', step,
                            validation_accuracy, 1.0 / labels.codebook_size)
            if checkpoint_path is not None:
                last_good = save_policy(checkpoint_path, model, 'latent', None, optimizer.hyperparameters(),
                                        streams.state(), {'step': step + 1})

        metrics.append(row)
        if on_metrics is not None:
            on_metrics(row)

    return TrainingResult(checkpoint=last_good, metrics=metrics, validation_accuracy=validation_accuracy,
                          one_epoch_accuracy=one_epoch, steps=config.pretrain_steps)


def train_actions(model: PolicyModel, examples: Examples, steps: int, batch_size: int, lr: float,
                  grad_clip: Optional[float], streams: RngStreams, stream_name: str,
                  stop_accuracy: Optional[float] = None, accuracy_window: int = 20,
                  on_metrics: Optional[MetricsCallback] = None) -> TrainingResult:
    """
    Обучение головы действий с остановкой по точности на обучении
    :param model: политика с головой действий
    :param examples: примеры
    :param steps: предел шагов
    :param batch_size: размер пакета
    :param lr: скорость обучения
    :param grad_clip: предел нормы градиента
    :param streams: потоки ГСЧ
    :param stream_name: имя потока выборки
    :param stop_accuracy: порог средней точности токенов на скользящем окне
    :param accuracy_window: длина окна
    :param on_metrics: обработчик строк метрик
    :return: результат
    """
    if len(examples) == 0:
        raise ContractViolation('Нет примеров с действиями')

    optimizer = AdamState(lr=lr)
    recent = collections.deque(maxlen=accuracy_window)
    metrics: List[dict] = []

    for step in range(steps):
        frames, tokens, targets = examples.batch(streams.stream(stream_name).integers(len(examples), size=batch_size))
        try:
            logits = policy_forward(model, frames, tokens, ACTION_HEAD)
            loss = _token_loss(logits, targets)
            _train_step(model.store, optimizer, loss, grad_clip)
        except NumericFault as ex:
            raise NumericFault(f'Обучение действий разошлось: {ex}', step=step) from ex

        recent.append(float((logits.data.argmax(axis=-1) == targets).mean()))
        row = {'step': step, 'loss': loss.item(), 'train_accuracy': float(np.mean(recent))}
        metrics.append(row)
        if on_metrics is not None:
            on_metrics(row)

        if stop_accuracy is not None and len(recent) == accuracy_window and np.mean(recent) >= stop_accuracy:
            logger.info('Точность на обучении %.3f достигнута на шаге %d', np.mean(recent), step)
            break

    return TrainingResult(checkpoint=None, metrics=metrics, train_accuracy=float(np.mean(recent)) if recent else 0.0,
                          steps=len(metrics))


def train_idm(dataset: TrajectoryDataset, spec: BinSpec, config: FinetuneConfig, image_size: int,
              policy_config: PolicyConfig, streams: RngStreams, seed: int) -> Tuple[InverseDynamicsModel, float]:
    """
    Обучение модели обратной динамики на размеченном наборе
    :return: модель и MSE действий на валидации
    """
    model = InverseDynamicsModel(config, image_size, policy_config.patch_size, policy_config.heads, seed)
    pairs, targets, actions = [], [], []
    for index, trajectory in enumerate(dataset):
        pairs.extend((index, t) for t in range(trajectory.steps))
        targets.append(spec.encode(trajectory.actions))
        actions.append(trajectory.actions)
    pairs = np.array(pairs, dtype=np.int64)
    targets, actions = np.concatenate(targets), np.concatenate(actions)

    _, validation_ids = dataset.split_indices(config.idm_validation_fraction)
    held_out = np.isin(pairs[:, 0], validation_ids)
    train_index, validation_index = np.flatnonzero(~held_out), np.flatnonzero(held_out)

    optimizer = AdamState(lr=config.lr)
    for step in range(config.idm_steps):
        chosen = train_index[streams.stream('idm-batch').integers(len(train_index), size=config.batch_size)]
        first, second = dataset.frame_pairs(pairs[chosen], 1)
        loss = _token_loss(model.forward(first, second), targets[chosen])
        _train_step(model.store, optimizer, loss, 1.0)
        if step % 100 == 0:
            logger.info('IDM шаг %d: loss %.4f', step, loss.item())

    errors = []
    for start in range(0, len(validation_index), 256):
        chosen = validation_index[start:start + 256]
        first, second = dataset.frame_pairs(pairs[chosen], 1)
        errors.append((spec.decode(model.predict_bins(first, second)) - actions[chosen]) ** 2)
    validation_mse = float(np.concatenate(errors).mean()) if errors else float('nan')

    logger.info('IDM: MSE действий на валидации %.6f', validation_mse)
    return model, validation_mse


def pseudo_label(model: InverseDynamicsModel, dataset: TrajectoryDataset, spec: BinSpec,
                 batch_size: int = 256) -> List[np.ndarray]:
    """ Псевдодействия для каждой траектории набора """
    labelled = []
    for trajectory in dataset:
        bins = [model.predict_bins(trajectory.frames[start:start + batch_size][:trajectory.steps - start],
                                   trajectory.frames[start + 1:start + 1 + batch_size])
                for start in range(0, trajectory.steps, batch_size)]
        labelled.append(spec.decode(np.concatenate(bins)) if bins else np.zeros((0, ACTION_DIMS), np.float32))
    return labelled


def finetune_actions(mode: str, finetune_dataset: TrajectoryDataset, config: RunConfig, training_seed: int,
                     vocab: VocabMap, pretrained: Optional[PathType] = None,
                     pretrain_dataset: Optional[TrajectoryDataset] = None, checkpoint_path: Optional[PathType] = None,
                     on_metrics: Optional[MetricsCallback] = None) -> Tuple[PolicyModel, BinSpec, TrainingResult]:
    """
    Дообучение на действиях
    lapa - латентно предобученный ствол и новая голова действий;
    scratch - случайная инициализация;
    vpt - IDM на размеченном наборе, псевдоразметка набора предобучения, предобучение, дообучение;
    actionvla - предобучение на истинных действиях набора предобучения, затем дообучение.

    :param mode: режим
    :param finetune_dataset: малый набор с действиями
    :param config: конфигурация запуска
    :param training_seed: сид обучения
    :param vocab: словарь
    :param pretrained: чекпоинт латентного предобучения (lapa)
    :param pretrain_dataset: набор предобучения (vpt, actionvla)
    :param checkpoint_path: путь итогового чекпоинта
    :param on_metrics: обработчик строк метрик
    :return: политика, BinSpec, результат
    """
    if mode not in MODES:
        raise ContractViolation(f'Неизвестный режим {mode}, допустимы {MODES}')
    if mode == 'lapa' and (pretrained is None or not Path(pretrained).exists()):
        raise ContractViolation('Режим lapa требует чекпоинт латентного предобучения (подкоманда pretrain)')
    if mode in ('vpt', 'actionvla') and pretrain_dataset is None:
        raise ContractViolation(f'Режим {mode} требует набор предобучения')

    finetune = config.finetune
    policy_config = config.policy
    streams = RngStreams(config.seed).fork(f'finetune-{mode}-{training_seed}')
    all_actions = np.concatenate([trajectory.actions for trajectory in finetune_dataset])
    spec = fit_bins(all_actions, finetune.bins)
    extra: Dict[str, float] = {}

    if mode == 'lapa':
        model, _, _ = load_policy(pretrained)
        trunk = model.trunk_state()
        model.seed = streams.seed
        model.attach_head(ACTION_HEAD, ACTION_DIMS, finetune.bins)
        if any(not np.array_equal(model.store[name].data, value) for name, value in trunk.items()):
            raise ContractViolation('Ствол политики изменился при замене головы')
    else:
        model = PolicyModel(policy_config, config.env.image_size, len(vocab), streams.seed, vocab.pad_id)
        model.attach_head(ACTION_HEAD, ACTION_DIMS, finetune.bins)

    if mode in ('vpt', 'actionvla'):
        if mode == 'vpt':
            idm, idm_mse = train_idm(finetune_dataset, spec, finetune, config.env.image_size, policy_config,
                                     streams, streams.seed)
            extra['idm_validation_mse'] = idm_mse
            pretrain_actions = pseudo_label(idm, pretrain_dataset, spec)
        else:
            pretrain_actions = None

        pretraining = action_examples(pretrain_dataset, spec, vocab, policy_config.max_instruction_length,
                                      pretrain_actions)
        logger.info('%s: предобучение на %d действиях', mode, len(pretraining))
        train_actions(model, pretraining, finetune.action_pretrain_steps, finetune.batch_size, finetune.lr,
                      policy_config.grad_clip, streams, 'action-pretrain-batch')

    examples = action_examples(finetune_dataset, spec, vocab, policy_config.max_instruction_length)
    result = train_actions(model, examples, finetune.steps, finetune.batch_size, finetune.lr, policy_config.grad_clip,
                           streams, 'finetune-batch', finetune.stop_accuracy, finetune.accuracy_window, on_metrics)
    result.extra.update(extra)
    logger.info('%s (сид %d): %d шагов, точность на обучении %.3f', mode, training_seed, result.steps,
                result.train_accuracy)

    if checkpoint_path is not None:
        result.checkpoint = save_policy(checkpoint_path, model, mode, spec, None, streams.state(),
                                        {'training_seed': training_seed, **extra})
    return model, spec, result
