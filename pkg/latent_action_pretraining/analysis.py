"""
Анализ латентных действий и нейронные роллауты декодером LAQ
"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple
import itertools
import logging

import numpy as np
import pandas as pd

from latent_action_pretraining import rng as lapa_rng
from latent_action_pretraining import tensor as T
from latent_action_pretraining import world
from latent_action_pretraining.datasets import TrajectoryDataset
from latent_action_pretraining.exceptions import ContractViolation
from latent_action_pretraining.grammar import VocabMap
from latent_action_pretraining.laq import LaqModel
from latent_action_pretraining.laq_utils import LatentLabels
from latent_action_pretraining.policy import LATENT_HEAD, PolicyModel, policy_forward
from latent_action_pretraining.schemas import ClusterReport, EnvConfig, LabelCluster, RolloutReport


logger = logging.getLogger(__name__)


def mutual_information(first: np.ndarray, second: np.ndarray) -> float:
    """
    Подстановочная оценка взаимной информации двух дискретных величин, в битах
    :param first: (N,) метки
    :param second: (N,) метки
    :return: I(first; second)
    """
    first, second = np.asarray(first).ravel(), np.asarray(second).ravel()
    if len(first) != len(second):
        raise ContractViolation(f'Длины выборок не совпадают: {len(first)} и {len(second)}')
    if len(first) == 0:
        return 0.0

    joint = pd.crosstab(first, second).to_numpy(dtype=np.float64)
    joint /= joint.sum()
    outer = joint.sum(axis=1, keepdims=True) @ joint.sum(axis=0, keepdims=True)
    nonzero = joint > 0
    return float((joint[nonzero] * np.log2(joint[nonzero] / outer[nonzero])).sum())


def action_quadrant(actions: np.ndarray) -> np.ndarray:
    """ Квадрант знаков действия: 0 (+,+), 1 (-,+), 2 (-,-), 3 (+,-) """
    actions = np.asarray(actions)
    positive_x, positive_y = actions[:, 0] >= 0, actions[:, 1] >= 0
    return np.select([positive_x & positive_y, ~positive_x & positive_y, ~positive_x & ~positive_y],
                     [0, 1, 2], default=3)


def combined_labels(codes: np.ndarray, codebook_size: int) -> np.ndarray:
    """ Последовательность из s кодов -> один номер в [0, |C|^s) """
    codes = np.asarray(codes)
    return np.ravel_multi_index(tuple(codes.T), (codebook_size, ) * codes.shape[1])


def window_actions(dataset: TrajectoryDataset, labels: LatentLabels) -> np.ndarray:
    """ Среднее истинное действие на окне каждой размеченной пары (N, 2) """
    return np.stack([dataset[index].actions[t:t + labels.window].mean(axis=0)
                     for index, t in zip(labels.trajectory, labels.t)]) if len(labels) else np.zeros((0, 2))


def latent_analysis(labels: LatentLabels, dataset: TrajectoryDataset, delta_max: float, seed: int = 0,
                    separation: float = 0.25) -> Tuple[ClusterReport, pd.DataFrame]:
    """
    Кластеры истинных действий по латентным меткам
    :param labels: метки
    :param dataset: набор с истинными действиями
    :param delta_max: предельное действие
    :param seed: зерно нулевого контроля
    :param separation: порог разделения средних в долях delta_max
    :return: отчёт и таблица точек (label, dx, dy) для диаграммы рассеяния
    """
    actions = window_actions(dataset, labels)
    combined = combined_labels(labels.codes, labels.codebook_size)
    scatter = pd.DataFrame({'label': combined, 'dx': actions[:, 0], 'dy': actions[:, 1]})

    means = scatter.groupby('label')[['dx', 'dy']].mean()
    counts = scatter.groupby('label').size()
    clusters = [LabelCluster(label=str(label), count=int(counts[label]),
                             mean_action=(float(means.loc[label, 'dx']), float(means.loc[label, 'dy'])))
                for label in means.index]

    pairs = list(itertools.combinations(means.to_numpy(), 2))
    threshold = separation * delta_max
    separated = sum(1 for left, right in pairs if np.linalg.norm(left - right) >= threshold)

    null_labels = lapa_rng.generator(seed, 'null-labels').integers(labels.codebook_size ** labels.codes.shape[1],
                                                                   size=len(combined))
    quadrants = action_quadrant(actions)
    report = ClusterReport(
        clusters=clusters,
        total=len(combined),
        mutual_information=mutual_information(combined, quadrants),
        null_mutual_information=mutual_information(null_labels, quadrants),
        separated_pairs=separated,
        total_pairs=len(pairs),
        separation_threshold=threshold,
    )
    logger.info('Латентный анализ: MI %.3f бит (контроль %.3f), разделено %d из %d пар',
                report.mutual_information, report.null_mutual_information, separated, len(pairs))
    return report, scatter


def decoded_grid(model: LaqModel, frames: np.ndarray) -> np.ndarray:
    """
    Декодирование каждого кадра со всеми кодами (все токены последовательности - один код)
    :param frames: (k, H, W, 3)
    :return: (k, |C|, H, W, 3) float в [0, 1]
    """
    config = model.config
    rows = []
    for frame in frames:
        labels = np.repeat(np.arange(config.codebook_size)[:, None], config.sequence_length, axis=1)
        rows.append(model.world_step(np.repeat(frame[None], config.codebook_size, axis=0), labels))
    return np.stack(rows)


def predict_latent(policy: PolicyModel, frame: np.ndarray, tokens: np.ndarray) -> np.ndarray:
    """ Латентная метка (s,) политики с латентной головой """
    with T.no_grad():
        logits = policy_forward(policy, frame[None], tokens[None], LATENT_HEAD)
    return logits.data[0].argmax(axis=-1)


def neural_rollout(model: LaqModel, policy: PolicyModel, vocab: VocabMap, frame: np.ndarray, instruction: str,
                   steps: int) -> np.ndarray:
    """
    Замкнутый цикл без симулятора: политика предсказывает латентное действие, декодер - следующий кадр
    :param model: LAQ
    :param policy: латентно предобученная политика
    :param vocab: словарь
    :param frame: начальный кадр (H, W, 3)
    :param instruction: инструкция
    :param steps: число шагов k
    :return: кадры (k + 1, H, W, 3) float в [0, 1]
    """
    tokens = np.array(vocab.tokenize(instruction, policy.config.max_instruction_length))
    current = np.asarray(frame, dtype=np.float32) / 255.0 if np.asarray(frame).dtype.kind != 'f' else frame
    frames = [current]
    for _ in range(steps):
        label = predict_latent(policy, current, tokens)
        current = model.world_step(current[None], label[None])[0]
        frames.append(current)
    return np.stack(frames)


def self_consistency(model: LaqModel, dataset: TrajectoryDataset, pairs: np.ndarray, bound: float,
                     batch_size: int = 64) -> float:
    """
    Доля пар, для которых decode(encode(x_t, x_{t+H})) восстанавливает x_{t+H} с MSE не выше bound
    """
    within = []
    for start in range(0, len(pairs), batch_size):
        first, second = dataset.frame_pairs(pairs[start:start + batch_size], model.config.window)
        prediction = model.world_step(first, model.label(first, second))
        errors = ((prediction.astype(np.float64) - second / 255.0) ** 2).mean(axis=(1, 2, 3))
        within.append(errors <= bound)
    return float(np.concatenate(within).mean()) if within else 0.0


@dataclass
class RolloutResult:
    report: RolloutReport
    rollouts: List[np.ndarray]


def rollout_report(model: LaqModel, policy: PolicyModel, vocab: VocabMap, config: EnvConfig, seeds: Sequence[int],
                   steps: int, consistency: Optional[float] = None) -> RolloutResult:
    """
    Нейронные роллауты на задачах: согласие смещения манипулятора с направлением на цель
    :param model: LAQ
    :param policy: латентная политика
    :param vocab: словарь
    :param config: параметры мира
    :param seeds: зёрна задач
    :param steps: длина роллаута
    :param consistency: доля самосогласованных пар (если посчитана)
    :return: отчёт и кадры роллаутов
    """
    agreements, rollouts, finite = [], [], True
    for seed in seeds:
        state, task = world.reset(seed, config)
        frames = neural_rollout(model, policy, vocab, world.render(state, config), task.instruction, steps)
        rollouts.append(frames)
        finite = finite and bool(np.isfinite(frames).all())

        start, end = world.effector_centroid(frames[0]), world.effector_centroid(frames[-1])
        if start is None or end is None:
            agreements.append(False)
            continue
        displacement = np.subtract(end, start)
        direction = np.subtract(state.blocks[task.target].position, state.effector)
        agreements.append(bool(np.dot(displacement, direction) > 0))

    report = RolloutReport(tasks=len(seeds), steps=steps, finite=finite,
                           sign_agreement=float(np.mean(agreements)) if agreements else 0.0,
                           reconstruction_within_bound=consistency if consistency is not None else 0.0)
    logger.info('Нейронные роллауты: %d задач, согласие направления %.2f', len(seeds), report.sign_agreement)
    return RolloutResult(report=report, rollouts=rollouts)


def label_direction_consistency(model: LaqModel, config: EnvConfig, seeds: Sequence[int]) -> np.ndarray:
    """
    Для каждого кода - доля сцен, где смещение манипулятора под этим кодом совпадает
    по знаку квадранта с преобладающим для кода
    :return: (|C|,)
    """
    frames = np.stack([world.render(world.reset(seed, config)[0], config) for seed in seeds])
    start = [world.effector_centroid(frame) for frame in frames]

    agreement = np.zeros(model.config.codebook_size)
    for code in range(model.config.codebook_size):
        labels = np.full((len(frames), model.config.sequence_length), code)
        predicted = model.world_step(frames, labels)
        moves = [np.subtract(end, begin) for begin, end in
                 zip(start, (world.effector_centroid(frame) for frame in predicted))
                 if begin is not None and end is not None]
        if not moves:
            continue
        quadrants = action_quadrant(np.array(moves))
        agreement[code] = np.bincount(quadrants, minlength=4).max() / len(quadrants)
    return agreement
