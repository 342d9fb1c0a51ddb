"""
Командная строка: одна программа, подкоманды конвейера
"""
from typing import Callable, Dict, List, Optional, Sequence
import argparse
import logging
import logging.config
import sys

import configargparse

from latent_action_pretraining import settings
from latent_action_pretraining.artifacts import RunDirectory
from latent_action_pretraining.config import dump_config, load_config
from latent_action_pretraining.exceptions import ConfigError, LapaError
from latent_action_pretraining.pipeline import (
    run_analyze_latents, run_eval, run_finetune, run_gen_data, run_label, run_pretrain, run_rollout, run_train_laq,
)
from latent_action_pretraining.schemas import RunConfig
from latent_action_pretraining.sweeps import run_sweep


logger = logging.getLogger(__name__)

EXIT_FAILURE = 1
EXIT_CONFIG = 2


def _comma_list(value: str) -> List[str]:
    return [item.strip() for item in value.split(',') if item.strip()]


def _float_list(value: str) -> List[float]:
    try:
        return [float(item) for item in _comma_list(value)]
    except ValueError as ex:
        raise argparse.ArgumentTypeError(f'ожидался список чисел через запятую: {value}') from ex


def _common() -> configargparse.ArgumentParser:
    common = configargparse.ArgumentParser(add_help=False)
    common.add_argument('--config', help='INI-файл конфигурации')
    common.add_argument('--set', action='append', default=[], metavar='SECTION.KEY=VALUE',
                        help='переопределение ключа конфигурации (можно повторять)')
    common.add_argument('--seed', type=int, help='зерно запуска')
    common.add_argument('--dry-run', action='store_true', help='напечатать итоговую конфигурацию и выйти')
    return common


# Флаги подкоманд: (флаг, ключ конфигурации или None, параметры argparse)
COMMAND_FLAGS: Dict[str, Sequence[tuple]] = {
    'gen-data': (
        ('--n', 'data.pretrain_trajectories', {'type': int, 'help': 'траекторий предобучения'}),
        ('--finetune-n', 'data.finetune_trajectories', {'type': int, 'help': 'траекторий дообучения'}),
        ('--dump-frames', None, {'type': int, 'default': 0, 'help': 'выгрузить PNG первых траекторий'}),
    ),
    'train-laq': (
        ('--data', None, {'help': 'каталог запуска gen-data'}),
        ('--steps', 'laq.steps', {'type': int}),
        ('--codebook-size', 'laq.codebook_size', {'type': int}),
        ('--window', 'laq.window', {'type': int}),
    ),
    'label': (
        ('--laq', None, {'help': 'каталог запуска train-laq'}),
        ('--data', None, {'help': 'каталог запуска gen-data'}),
    ),
    'pretrain': (
        ('--labels', None, {'help': 'каталог запуска label'}),
        ('--data', None, {'help': 'каталог запуска gen-data'}),
        ('--steps', 'policy.pretrain_steps', {'type': int}),
    ),
    'finetune': (
        ('--modes', 'finetune.modes', {'type': _comma_list, 'help': 'режимы через запятую'}),
        ('--pretrained', None, {'help': 'каталог запуска pretrain'}),
        ('--data', None, {'help': 'каталог запуска gen-data'}),
        ('--training-seeds', 'finetune.training_seeds', {'type': int}),
        ('--steps', 'finetune.steps', {'type': int}),
    ),
    'eval': (
        ('--modes', 'finetune.modes', {'type': _comma_list, 'help': 'режимы через запятую'}),
        ('--policies', None, {'help': 'каталог запуска finetune'}),
        ('--episodes', 'eval.episodes_per_category', {'type': int, 'help': 'эпизодов на категорию и сплит'}),
        ('--reference', None, {'action': 'store_true', 'help': 'добавить эксперта и нулевую политику'}),
    ),
    'rollout': (
        ('--laq', None, {'help': 'каталог запуска train-laq'}),
        ('--pretrained', None, {'help': 'каталог запуска pretrain'}),
        ('--data', None, {'help': 'каталог запуска gen-data'}),
        ('--steps', 'eval.rollout_steps', {'type': int}),
        ('--tasks', 'eval.rollout_tasks', {'type': int}),
    ),
    'analyze-latents': (
        ('--labels', None, {'help': 'каталог запуска label'}),
        ('--laq', None, {'help': 'каталог запуска train-laq'}),
        ('--data', None, {'help': 'каталог запуска gen-data'}),
    ),
    'sweep': (
        ('--axis', 'sweep.axis', {'help': 'vocab, seq, window, finetune_n, pretrain_fraction'}),
        ('--values', 'sweep.values', {'type': _float_list, 'help': 'значения через запятую'}),
    ),
}


def build_parser() -> configargparse.ArgumentParser:
    parser = configargparse.ArgumentParser(prog='manage.py', description='Латентное предобучение действий')
    parser.add_argument('--output-root', env_var='LAPA_OUTPUT_ROOT', default=settings.OUTPUT_ROOT,
                        help='корень каталогов запусков')
    parser.add_argument('--workers', env_var='LAPA_WORKERS', type=int, default=settings.WORKERS,
                        help='число процессов генерации и оценки')

    common = _common()
    commands = parser.add_subparsers(dest='command', metavar='COMMAND')
    commands.required = True
    for command, flags in COMMAND_FLAGS.items():
        subparser = commands.add_parser(command, parents=[common])
        for flag, _, options in flags:
            subparser.add_argument(flag, **options)
    return parser


def config_values(args: argparse.Namespace) -> Dict[str, object]:
    """ Значения флагов подкоманды, привязанных к ключам конфигурации """
    values: Dict[str, object] = {'seed': args.seed}
    for flag, key, _ in COMMAND_FLAGS[args.command]:
        if key is not None:
            values[key] = getattr(args, flag.lstrip('-').replace('-', '_'))
    return values


Stage = Callable[[RunDirectory, RunConfig, argparse.Namespace], object]

STAGES: Dict[str, Stage] = {
    'gen-data': lambda run, config, args: run_gen_data(run, config, args.workers, args.dump_frames),
    'train-laq': lambda run, config, args: run_train_laq(run, config, args.data),
    'label': lambda run, config, args: run_label(run, config, args.laq, args.data),
    'pretrain': lambda run, config, args: run_pretrain(run, config, args.labels, args.data),
    'finetune': lambda run, config, args: run_finetune(run, config, None, args.pretrained, args.data),
    'eval': lambda run, config, args: run_eval(run, config, None, args.policies, args.workers, args.reference),
    'rollout': lambda run, config, args: run_rollout(run, config, args.laq, args.pretrained, args.data),
    'analyze-latents': lambda run, config, args: run_analyze_latents(run, config, args.labels, args.laq, args.data),
    'sweep': lambda run, config, args: run_sweep(run, config, None, None, args.workers),
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Запуск подкоманды
    :param argv: аргументы командной строки
    :return: код возврата: 0 только при завершении без нарушений контрактов
    """
    args = build_parser().parse_args(argv)
    logging.config.dictConfig(settings.LOGGING)

    try:
        config = load_config(args.config, args.set, config_values(args))
        if args.dry_run:
            sys.stdout.write(dump_config(config))
            sys.stdout.write(f'\n# config_hash = {config.config_hash()}\n')
            return 0

        with RunDirectory(args.command, config, args.output_root) as run:
            STAGES[args.command](run, config, args)
        sys.stdout.write(f'{run.path}\n')
    except ConfigError as ex:
        sys.stderr.write(f'Ошибка конфигурации: {ex}\n')
        return EXIT_CONFIG
    except LapaError as ex:
        sys.stderr.write(f'Ошибка: {ex}\n')
        return EXIT_FAILURE
    return 0
