"""
Замкнутая оценка политик на парных эпизодах
"""
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union
import collections
import itertools
import logging

import numpy as np
import pandas as pd

from latent_action_pretraining import rng as lapa_rng
from latent_action_pretraining import settings, world
from latent_action_pretraining.binning import BinSpec
from latent_action_pretraining.exceptions import ContractViolation
from latent_action_pretraining.grammar import CATEGORIES, VocabMap
from latent_action_pretraining.policy import PolicyModel, predict_action
from latent_action_pretraining.schemas import EnvConfig, EvalReport, EvalRow, WinRate


logger = logging.getLogger(__name__)

EVAL_COLUMNS = ['mode', 'training_seed', 'category', 'split', 'success_mean', 'partial_mean', 'stderr',
                'ci_low', 'ci_high', 'episodes', 'seeds']
EPISODE_COLUMNS = ['mode', 'training_seed', 'index', 'seed', 'split', 'category', 'score', 'steps']


@dataclass(frozen=True)
class EpisodeSpec:
    index: int
    seed: int
    split: str
    category: str


@dataclass
class EpisodeResult:
    """ Итог эпизода: 1 - успех, 0.5 - манипулятор дошёл до цели, 0 - нет """
    spec: EpisodeSpec
    score: float
    steps: int
    scores: List[float]


class EpisodePolicy:
    """ Политика замкнутого цикла: кадр и задача -> действие """

    def __call__(self, frame: np.ndarray, state: world.EnvState, task: world.Task) -> np.ndarray:
        raise NotImplementedError


class LearnedPolicy(EpisodePolicy):
    def __init__(self, model: PolicyModel, spec: BinSpec, vocab: VocabMap, delta_max: float) -> None:
        self.model = model
        self.spec = spec
        self.vocab = vocab
        self.delta_max = delta_max

    def __call__(self, frame: np.ndarray, state: world.EnvState, task: world.Task) -> np.ndarray:
        tokens = np.array([self.vocab.tokenize(task.instruction, self.model.config.max_instruction_length)])
        return predict_action(self.model, self.spec, frame[None], tokens, self.delta_max)[0]


class ExpertPolicy(EpisodePolicy):
    """ Скриптовый эксперт без шума; видит состояние мира """

    def __init__(self, config: EnvConfig) -> None:
        self.config = config

    def __call__(self, frame: np.ndarray, state: world.EnvState, task: world.Task) -> np.ndarray:
        return world.expert_action(state, task, self.config)


class ZeroPolicy(EpisodePolicy):
    def __call__(self, frame: np.ndarray, state: world.EnvState, task: world.Task) -> np.ndarray:
        return np.zeros(2, dtype=np.float32)


def run_episode(policy: EpisodePolicy, episode: EpisodeSpec, config: EnvConfig,
                max_steps: Optional[int] = None) -> EpisodeResult:
    """
    Замкнутый цикл render -> действие -> step до успеха или лимита шагов
    :param policy: политика
    :param episode: эпизод (зерно, сплит)
    :param config: параметры мира
    :param max_steps: лимит шагов (по умолчанию из конфигурации)
    :return: итог эпизода
    """
    max_steps = config.max_steps if max_steps is None else max_steps
    state, task = world.reset(episode.seed, config, episode.split)

    scores = [world.success(state, task, config)]
    while scores[-1] < 1.0 and state.steps < max_steps:
        action = np.clip(np.asarray(policy(world.render(state, config), state, task), dtype=np.float32),
                         -config.delta_max, config.delta_max)
        state = world.step(state, action, config)
        scores.append(world.success(state, task, config))

    final = 1.0 if scores[-1] == 1.0 else (0.5 if max(scores) >= 0.5 else 0.0)
    return EpisodeResult(spec=episode, score=final, steps=state.steps, scores=scores)


def episode_list(seed: int, splits: Sequence[str], per_category: int,
                 config: Optional[EnvConfig] = None) -> List[EpisodeSpec]:
    """
    Детерминированный список эпизодов: per_category эпизодов каждой категории в каждом сплите
    :param seed: зерно оценки
    :param splits: сплиты
    :param per_category: эпизодов на категорию
    :param config: параметры мира
    :return: эпизоды
    """
    config = config or EnvConfig()
    episodes: List[EpisodeSpec] = []
    for split in splits:
        counts = collections.Counter()
        for number in itertools.count():
            if all(counts[category] >= per_category for category in CATEGORIES):
                break
            episode_seed = lapa_rng.derive_seed(seed, 'eval', split, number)
            _, task = world.reset(episode_seed, config, split)
            if counts[task.category] < per_category:
                counts[task.category] += 1
                episodes.append(EpisodeSpec(len(episodes), episode_seed, split, task.category))
    return episodes


def _episode_job(job: Tuple[EpisodePolicy, List[EpisodeSpec], EnvConfig]) -> List[EpisodeResult]:
    policy, episodes, config = job
    return [run_episode(policy, episode, config) for episode in episodes]


def run_episodes(policy: EpisodePolicy, episodes: Sequence[EpisodeSpec], config: EnvConfig,
                 workers: Optional[int] = None) -> List[EpisodeResult]:
    """ Прогон списка эпизодов; порядок результатов совпадает с порядком эпизодов """
    workers = workers or settings.WORKERS
    if workers <= 1 or len(episodes) < 2:
        return _episode_job((policy, list(episodes), config))

    chunks = [list(episodes[start::workers]) for start in range(workers)]
    with ProcessPoolExecutor(max_workers=workers) as executor:
        parts = list(executor.map(_episode_job, [(policy, chunk, config) for chunk in chunks]))
    merged = [result for part in parts for result in part]
    return sorted(merged, key=lambda result: result.spec.index)


def check_paired(results: Dict[str, Dict[int, List[EpisodeResult]]]) -> None:
    """
    Все режимы и сиды обучения должны пройти один и тот же набор эпизодов
    :param results: {режим: {сид обучения: итоги}}
    :return: None
    """
    reference = None
    for mode, by_seed in results.items():
        for training_seed, episodes in by_seed.items():
            multiset = collections.Counter((result.spec.seed, result.spec.split) for result in episodes)
            if reference is None:
                reference = multiset
            elif multiset != reference:
                raise ContractViolation(f'Эпизоды режима {mode} (сид {training_seed}) не совпадают с остальными')


def episodes_frame(results: Dict[str, Dict[int, List[EpisodeResult]]]) -> pd.DataFrame:
    rows = [{
        'mode': mode, 'training_seed': training_seed, 'index': result.spec.index, 'seed': result.spec.seed,
        'split': result.spec.split, 'category': result.spec.category, 'score': result.score, 'steps': result.steps,
    } for mode, by_seed in results.items() for training_seed, episodes in by_seed.items() for result in episodes]
    return pd.DataFrame(rows, columns=EPISODE_COLUMNS)


def bootstrap_interval(values: np.ndarray, samples: int, generator: np.random.Generator,
                       level: float = 0.95) -> Tuple[float, float]:
    """ Перцентильный бутстреп-интервал среднего """
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0 or samples < 1:
        return 0.0, 0.0
    means = values[generator.integers(len(values), size=(samples, len(values)))].mean(axis=1)
    tail = (1.0 - level) / 2.0 * 100.0
    return float(np.percentile(means, tail)), float(np.percentile(means, 100.0 - tail))


def _summary_row(group: pd.DataFrame, mode: str, training_seed: str, category: str, split: str,
                 bootstrap_samples: int, seed: int) -> EvalRow:
    success = (group['score'] == 1.0).to_numpy(dtype=np.float64)
    count = len(success)
    stderr = float(success.std(ddof=1) / np.sqrt(count)) if count > 1 else 0.0
    generator = lapa_rng.generator(seed, 'bootstrap', mode, training_seed, category, split)
    low, high = bootstrap_interval(success, bootstrap_samples, generator)
    return EvalRow(mode=mode, training_seed=training_seed, category=category, split=split,
                   success_mean=float(success.mean()) if count else 0.0,
                   partial_mean=float(group['score'].mean()) if count else 0.0,
                   stderr=stderr, ci_low=low, ci_high=high, episodes=count,
                   seeds=sorted(int(value) for value in group['training_seed'].unique()))


def win_rates(frame: pd.DataFrame) -> List[WinRate]:
    """
    Попарные доли побед режимов по эпизодам (оценка усредняется по сидам обучения)
    :param frame: таблица эпизодов
    :return: доли побед с учётом и без учёта ничьих
    """
    pooled = frame.groupby(['mode', 'index'])['score'].mean().unstack(level=0)
    rates = []
    for mode_a, mode_b in itertools.combinations(sorted(pooled.columns), 2):
        difference = pooled[mode_a] - pooled[mode_b]
        wins, losses = int((difference > 0).sum()), int((difference < 0).sum())
        ties = int((difference == 0).sum())
        total = wins + losses + ties
        rates.append(WinRate(
            mode_a=mode_a, mode_b=mode_b, wins=wins, losses=losses, ties=ties,
            win_rate_without_ties=wins / (wins + losses) if wins + losses else None,
            win_rate_with_ties=(wins + 0.5 * ties) / total if total else 0.0,
            tie_rate=ties / total if total else 0.0,
        ))
    return rates


def build_report(results: Dict[str, Dict[int, List[EpisodeResult]]], bootstrap_samples: int, seed: int,
                 config_hash: str = '') -> Tuple[EvalReport, pd.DataFrame]:
    """
    Сводный отчёт: строки по режиму x сиду обучения x категории x сплиту, плюс 'pooled' и 'all'
    :param results: {режим: {сид обучения: итоги}}
    :param bootstrap_samples: число бутстреп-выборок
    :param seed: зерно бутстрепа
    :param config_hash: хэш конфигурации
    :return: отчёт и таблица эпизодов
    """
    check_paired(results)
    frame = episodes_frame(results)

    rows = []
    for mode, by_mode in frame.groupby('mode', sort=True):
        for split, by_split in by_mode.groupby('split', sort=True):
            seed_groups = [(str(training_seed), group) for training_seed, group in by_split.groupby('training_seed')]
            for training_seed, group in seed_groups + [('pooled', by_split)]:
                for category, by_category in group.groupby('category', sort=True):
                    rows.append(_summary_row(by_category, mode, training_seed, category, split, bootstrap_samples,
                                             seed))
                rows.append(_summary_row(group, mode, training_seed, 'all', split, bootstrap_samples, seed))

    first = next(iter(next(iter(results.values())).values())) if results else []
    report = EvalReport(
        config_hash=config_hash,
        rows=rows,
        win_rates=win_rates(frame) if len(frame) else [],
        episodes=[(result.spec.seed, result.spec.split, result.spec.category) for result in first],
    )
    return report, frame


def eval_suite(policies: Dict[str, Dict[int, EpisodePolicy]], episodes: Sequence[EpisodeSpec], config: EnvConfig,
               bootstrap_samples: int = 1000, seed: int = 0, config_hash: str = '',
               workers: Optional[int] = None) -> Tuple[EvalReport, pd.DataFrame]:
    """
    Оценка всех режимов на одном списке эпизодов
    :param policies: {режим: {сид обучения: политика}}
    :param episodes: общий список эпизодов
    :param config: параметры мира
    :param bootstrap_samples: число бутстреп-выборок
    :param seed: зерно бутстрепа
    :param config_hash: хэш конфигурации
    :param workers: число процессов
    :return: отчёт и таблица эпизодов
    """
    results: Dict[str, Dict[int, List[EpisodeResult]]] = {}
    for mode, by_seed in policies.items():
        for training_seed, policy in by_seed.items():
            results.setdefault(mode, {})[training_seed] = run_episodes(policy, episodes, config, workers)
            logger.info('Оценка %s (сид %d): средняя оценка %.3f', mode, training_seed,
                        np.mean([result.score for result in results[mode][training_seed]]))

    return build_report(results, bootstrap_samples, seed, config_hash)


def write_report_csv(report: EvalReport, path: Union[str, Path]) -> Path:
    """ CSV-отчёт с фиксированным набором колонок """
    frame = pd.DataFrame([row.dict() for row in report.rows], columns=EVAL_COLUMNS)
    frame['seeds'] = frame['seeds'].map(lambda seeds: ' '.join(str(seed) for seed in seeds))
    frame.insert(0, 'schema_version', report.schema_version)
    frame.to_csv(path, index=False)
    return Path(path)
