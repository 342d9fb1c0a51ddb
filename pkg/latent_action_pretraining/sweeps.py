"""
Абляции: полный конвейер на каждое значение оси при общих эпизодах оценки
"""
from typing import Optional, Sequence
import json
import logging
import math

import pandas as pd
from pydantic import ValidationError

from latent_action_pretraining import plots
from latent_action_pretraining.artifacts import RunDirectory
from latent_action_pretraining.exceptions import ConfigError, ContractViolation
from latent_action_pretraining.pipeline import pooled_table, run_pipeline
from latent_action_pretraining.schemas import SWEEP_AXES, RunConfig


logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ['axis', 'value', 'mode', 'split', 'success_mean', 'partial_mean', 'stderr', 'episodes']


def _sequence_geometry(data: dict, length: int) -> None:
    """ s токенов: свёртка-редуктор с ядром и шагом grid / sqrt(s) """
    root = math.isqrt(length)
    grid = data['laq']['image_size'] // data['laq']['patch_size']
    if root * root != length or grid % root:
        raise ContractViolation(f'Длина последовательности {length} должна быть квадратом делителя сетки {grid}')
    data['laq'].update(sequence_length=length, reducer_kernel=grid // root, reducer_stride=grid // root,
                       reducer_padding=0)


def sweep_config(base: RunConfig, axis: str, value: float) -> RunConfig:
    """
    Конфигурация для одного значения оси абляции
    :param base: базовая конфигурация
    :param axis: vocab / seq / window / finetune_n / pretrain_fraction
    :param value: значение
    :return: конфигурация
    """
    data = base.dict()
    if axis == 'vocab':
        data['laq']['codebook_size'] = int(value)
    elif axis == 'seq':
        _sequence_geometry(data, int(value))
    elif axis == 'window':
        data['laq']['window'] = int(value)
    elif axis == 'finetune_n':
        data['data']['finetune_trajectories'] = int(value)
    elif axis == 'pretrain_fraction':
        if not 0.0 < value <= 1.0:
            raise ContractViolation(f'Доля данных предобучения {value} вне (0, 1]')
        data['data']['pretrain_trajectories'] = max(1, round(value * base.data.pretrain_trajectories))
    else:
        raise ContractViolation(f'Неизвестная ось {axis}, допустимы {SWEEP_AXES}')

    data['sweep'] = {'axis': axis, 'values': list(base.sweep.values)}
    try:
        return RunConfig.parse_obj(data)
    except ValidationError as ex:
        raise ConfigError(f'значение {value} оси {axis} недопустимо: {ex.errors()[0]["msg"]}',
                          key=f'sweep.{axis}') from ex


def run_sweep(run: RunDirectory, config: RunConfig, axis: Optional[str] = None,
              values: Optional[Sequence[float]] = None, workers: Optional[int] = None) -> pd.DataFrame:
    """
    Абляция по оси: CSV и график средних успехов режимов
    :param run: каталог запуска
    :param config: базовая конфигурация
    :param axis: ось (по умолчанию из секции sweep)
    :param values: значения
    :param workers: число процессов
    :return: таблица результатов
    """
    axis = axis or config.sweep.axis
    values = list(values or config.sweep.values)
    if len(values) < 2:
        raise ContractViolation('Абляции нужно не меньше двух значений')

    # Проверка всех значений до первого долгого запуска
    configs = [sweep_config(config, axis, value) for value in values]

    tables = []
    for value, value_config in zip(values, configs):
        logger.info('Абляция %s = %s', axis, value)
        report = run_pipeline(value_config, run.path / f'{axis}-{value:g}', workers)
        table = pooled_table(report)
        table.insert(0, 'value', value)
        table.insert(0, 'axis', axis)
        tables.append(table)

    frame = pd.concat(tables, ignore_index=True)[SWEEP_COLUMNS]
    frame.to_csv(run.artifact('sweep_csv', f'sweep-{axis}.csv'), index=False)
    plots.sweep_plot(frame, axis, run.artifact('sweep_png', f'sweep-{axis}.png'))
    run.summary.update(axis=axis, values=values, rows=json.loads(frame.to_json(orient='records')))
    return frame
