"""
Стадии конвейера: каждая подкоманда - одна стадия в своём каталоге запуска
"""
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union
import json
import logging

import numpy as np
import pandas as pd

from latent_action_pretraining import plots
from latent_action_pretraining.analysis import (
    decoded_grid, label_direction_consistency, latent_analysis, rollout_report, self_consistency,
)
from latent_action_pretraining.artifacts import RunDirectory
from latent_action_pretraining.datasets import TrajectoryDataset, generate_dataset
from latent_action_pretraining.evaluation import (
    EpisodePolicy, ExpertPolicy, LearnedPolicy, ZeroPolicy, episode_list, eval_suite, write_report_csv,
)
from latent_action_pretraining.exceptions import ContractViolation
from latent_action_pretraining.grammar import VocabMap
from latent_action_pretraining.laq import LaqModel, load_laq
from latent_action_pretraining.laq_utils import label_dataset, load_labels, reconstruction_mse, save_labels, train_laq
from latent_action_pretraining.policy import LATENT_HEAD, PolicyModel, load_policy, save_policy
from latent_action_pretraining.policy_utils import finetune_actions, pretrain_latent
from latent_action_pretraining.rng import derive_seed
from latent_action_pretraining.schemas import EvalReport, RunConfig


logger = logging.getLogger(__name__)

PathType = Union[str, Path]
REFERENCE_MODES = ('expert', 'zero')


def policy_artifact(mode: str, training_seed: int) -> str:
    return f'policy_{mode}_{training_seed}'


def _write_json(path: Path, payload: str) -> Path:
    path.write_text(payload, encoding='utf-8')
    return path


def run_gen_data(run: RunDirectory, config: RunConfig, workers: Optional[int] = None,
                 dump_frames: int = 0) -> None:
    """ Наборы предобучения (без действий для LAQ и латентной политики) и дообучения """
    pretrain = generate_dataset(run.artifact('pretrain_data', 'data/pretrain'), config.data.pretrain_trajectories,
                                derive_seed(config.seed, 'data', 'pretrain'), config.env, 'seen',
                                config.data.shard_size, workers, dump_frames)
    finetune = generate_dataset(run.artifact('finetune_data', 'data/finetune'), config.data.finetune_trajectories,
                                derive_seed(config.seed, 'data', 'finetune'), config.env, 'seen',
                                config.data.shard_size, workers)
    run.summary.update(pretrain=pretrain.dict(exclude={'shards', 'shard_records'}),
                       finetune=finetune.dict(exclude={'shards', 'shard_records'}))


def run_train_laq(run: RunDirectory, config: RunConfig, data: Optional[PathType] = None) -> LaqModel:
    dataset = TrajectoryDataset(run.upstream('pretrain_data', 'gen-data', data))
    model = LaqModel(config.laq, derive_seed(config.seed, 'laq'))
    result = train_laq(model, dataset, derive_seed(config.seed, 'laq', 'train'), run.artifact('laq', 'laq.ckpt'),
                       config.data.validation_fraction, run.record('train-laq'))
    run.summary.update(validation_mse=result.validation_mse, baseline_mse=result.baseline_mse,
                       replaced_codes=result.replaced, usage=result.usage.tolist())
    return model


def run_label(run: RunDirectory, config: RunConfig, laq: Optional[PathType] = None,
              data: Optional[PathType] = None) -> None:
    model, _ = load_laq(run.upstream('laq', 'train-laq', laq))
    dataset = TrajectoryDataset(run.upstream('pretrain_data', 'gen-data', data))
    labels = label_dataset(model, dataset, config_hash=model.config.config_hash())
    save_labels(run.artifact('labels', 'labels.npz'), labels)
    run.summary.update(pairs=len(labels), window=labels.window, codebook_size=labels.codebook_size)


def run_pretrain(run: RunDirectory, config: RunConfig, labels: Optional[PathType] = None,
                 data: Optional[PathType] = None) -> PolicyModel:
    """ Латентное предобучение политики на метках LAQ """
    dataset = TrajectoryDataset(run.upstream('pretrain_data', 'gen-data', data))
    latent = load_labels(run.upstream('labels', 'label', labels))
    vocab = VocabMap()

    model = PolicyModel(config.policy, dataset.image_size, len(vocab), derive_seed(config.seed, 'policy'),
                        vocab.pad_id)
    model.attach_head(LATENT_HEAD, latent.codes.shape[1], latent.codebook_size)
    path = run.artifact('policy_latent', 'policy-latent.ckpt')
    result = pretrain_latent(model, dataset, latent, vocab, config.policy, derive_seed(config.seed, 'pretrain'), path,
                             run.record('pretrain'))
    if result.checkpoint is None:
        save_policy(path, model, 'latent')

    run.summary.update(validation_accuracy=result.validation_accuracy, one_epoch_accuracy=result.one_epoch_accuracy,
                       chance=1.0 / latent.codebook_size)
    return model


def run_finetune(run: RunDirectory, config: RunConfig, modes: Optional[Sequence[str]] = None,
                 pretrained: Optional[PathType] = None, data: Optional[PathType] = None) -> None:
    """ Дообучение всех режимов на всех сидах обучения """
    modes = list(modes or config.finetune.modes)
    finetune_dataset = TrajectoryDataset(run.upstream('finetune_data', 'gen-data', data))
    pretrain_dataset = (TrajectoryDataset(run.upstream('pretrain_data', 'gen-data', data))
                        if {'vpt', 'actionvla'} & set(modes) else None)
    latent = run.upstream('policy_latent', 'pretrain', pretrained) if 'lapa' in modes else None
    vocab = VocabMap()

    results = {}
    for mode in modes:
        for training_seed in range(config.finetune.training_seeds):
            path = run.artifact(policy_artifact(mode, training_seed), f'policies/{mode}-{training_seed}.ckpt')
            _, _, result = finetune_actions(mode, finetune_dataset, config, training_seed, vocab, latent,
                                            pretrain_dataset, path, run.record(f'finetune-{mode}-{training_seed}'))
            results[f'{mode}/{training_seed}'] = {'steps': result.steps, 'train_accuracy': result.train_accuracy,
                                                  **result.extra}
    run.summary['finetune'] = results


def load_policies(run: RunDirectory, config: RunConfig, modes: Sequence[str],
                  policies: Optional[PathType] = None, reference: bool = False) -> Dict[str, Dict[int, EpisodePolicy]]:
    vocab = VocabMap()
    loaded: Dict[str, Dict[int, EpisodePolicy]] = {}
    for mode in modes:
        for training_seed in range(config.finetune.training_seeds):
            model, spec, _ = load_policy(run.upstream(policy_artifact(mode, training_seed), 'finetune', policies))
            if spec is None:
                raise ContractViolation(f'Политика {mode} (сид {training_seed}) не дообучена на действиях')
            loaded.setdefault(mode, {})[training_seed] = LearnedPolicy(model, spec, vocab, config.env.delta_max)
    if reference:
        loaded['expert'] = {0: ExpertPolicy(config.env)}
        loaded['zero'] = {0: ZeroPolicy()}
    return loaded


def run_eval(run: RunDirectory, config: RunConfig, modes: Optional[Sequence[str]] = None,
             policies: Optional[PathType] = None, workers: Optional[int] = None,
             reference: bool = False) -> EvalReport:
    """
    Замкнутая оценка режимов на общем списке эпизодов
    :param run: каталог запуска
    :param config: конфигурация
    :param modes: режимы (по умолчанию из конфигурации)
    :param policies: каталог запуска finetune
    :param workers: число процессов
    :param reference: добавить скриптового эксперта и нулевую политику
    :return: отчёт
    """
    modes = list(modes or config.finetune.modes)
    episodes = episode_list(derive_seed(config.seed, 'eval'), config.eval.splits, config.eval.episodes_per_category,
                            config.env)
    report, frame = eval_suite(load_policies(run, config, modes, policies, reference), episodes, config.env,
                               config.eval.bootstrap_samples, derive_seed(config.seed, 'bootstrap'),
                               config.config_hash(), workers)

    write_report_csv(report, run.artifact('report_csv', 'report.csv'))
    frame.to_csv(run.artifact('episodes_csv', 'episodes.csv'), index=False)
    _write_json(run.artifact('report', 'report.json'), report.json(indent=2))

    pooled = {mode: {split: report.pooled(mode, split) for split in config.eval.splits} for mode in report_modes(report)}
    for mode, by_split in pooled.items():
        logger.info('Режим %s: успех %s', mode, ', '.join(f'{split} {value:.3f}' for split, value in by_split.items()))
    run.summary.update(pooled=pooled, report=json.loads(report.json()))
    return report


def report_modes(report: EvalReport) -> List[str]:
    return sorted({row.mode for row in report.rows})


def _held_out_pairs(dataset: TrajectoryDataset, config: RunConfig, window: int) -> np.ndarray:
    _, validation_ids = dataset.split_indices(config.data.validation_fraction)
    return dataset.pair_index(window, validation_ids)[:config.laq.validation_pairs]


def run_rollout(run: RunDirectory, config: RunConfig, laq: Optional[PathType] = None,
                pretrained: Optional[PathType] = None, data: Optional[PathType] = None) -> None:
    """ Нейронные роллауты: латентная политика + декодер LAQ, без симулятора """
    model, manifest = load_laq(run.upstream('laq', 'train-laq', laq))
    policy, _, _ = load_policy(run.upstream('policy_latent', 'pretrain', pretrained))
    if policy.head_kind != LATENT_HEAD:
        raise ContractViolation('Нейронный роллаут требует латентно предобученную политику')
    dataset = TrajectoryDataset(run.upstream('pretrain_data', 'gen-data', data))

    pairs = _held_out_pairs(dataset, config, model.config.window)
    training_mse = manifest.extra.get('validation_mse')
    if training_mse is None:
        training_mse, _ = reconstruction_mse(model, dataset, pairs)
    consistency = self_consistency(model, dataset, pairs, 1.5 * training_mse)

    seeds = [derive_seed(config.seed, 'rollout', number) for number in range(config.eval.rollout_tasks)]
    result = rollout_report(model, policy, VocabMap(), config.env, seeds, config.eval.rollout_steps, consistency)

    _write_json(run.artifact('rollout', 'rollout.json'), result.report.json(indent=2))
    plots.rollout_strips(result.rollouts[:8], run.artifact('rollout_png', 'rollouts.png'))
    run.summary.update(result.report.dict())


def run_analyze_latents(run: RunDirectory, config: RunConfig, labels: Optional[PathType] = None,
                        laq: Optional[PathType] = None, data: Optional[PathType] = None) -> None:
    """ Кластеры истинных действий по латентным меткам и сетка декодированных кадров """
    latent = load_labels(run.upstream('labels', 'label', labels))
    dataset = TrajectoryDataset(run.upstream('pretrain_data', 'gen-data', data))
    model, _ = load_laq(run.upstream('laq', 'train-laq', laq))

    report, scatter = latent_analysis(latent, dataset, config.env.delta_max, derive_seed(config.seed, 'analysis'))
    _write_json(run.artifact('clusters', 'clusters.json'), report.json(indent=2))
    scatter.to_csv(run.artifact('scatter_csv', 'scatter.csv'), index=False)
    plots.latent_scatter(scatter, run.artifact('scatter_png', 'scatter.png'), config.env.delta_max)

    count = min(config.eval.analysis_grid_frames, len(dataset))
    frames = np.stack([dataset[index].frames[0] for index in range(count)])
    plots.frame_grid(decoded_grid(model, frames), run.artifact('grid_png', 'decoded-grid.png'))

    seeds = [derive_seed(config.seed, 'direction', number) for number in range(config.eval.rollout_tasks)]
    direction = label_direction_consistency(model, config.env, seeds)
    run.summary.update(report.dict(exclude={'clusters'}), direction_consistency=direction.tolist())


def run_pipeline(config: RunConfig, root: PathType, workers: Optional[int] = None,
                 modes: Optional[Sequence[str]] = None) -> EvalReport:
    """
    Полный конвейер gen-data -> train-laq -> label -> pretrain -> finetune -> eval, каждая стадия в своём каталоге
    :param config: конфигурация
    :param root: корень каталогов запусков
    :param workers: число процессов
    :param modes: режимы
    :return: отчёт оценки
    """
    modes = list(modes or config.finetune.modes)
    with RunDirectory('gen-data', config, root) as run:
        run_gen_data(run, config, workers)
        data = run.path

    pretrained = None
    if 'lapa' in modes:
        with RunDirectory('train-laq', config, root) as run:
            run_train_laq(run, config, data)
            laq = run.path
        with RunDirectory('label', config, root) as run:
            run_label(run, config, laq, data)
            labels = run.path
        with RunDirectory('pretrain', config, root) as run:
            run_pretrain(run, config, labels, data)
            pretrained = run.path
    with RunDirectory('finetune', config, root) as run:
        run_finetune(run, config, modes, pretrained, data)
        policies = run.path
    with RunDirectory('eval', config, root) as run:
        return run_eval(run, config, modes, policies, workers)


def pooled_table(report: EvalReport) -> pd.DataFrame:
    """ Строки отчёта 'pooled' x 'all' """
    rows = [row.dict() for row in report.rows if row.training_seed == 'pooled' and row.category == 'all']
    return pd.DataFrame(rows, columns=['mode', 'split', 'success_mean', 'partial_mean', 'stderr', 'episodes'])
