"""
Конфигурация запуска: INI-файл, переопределения из командной строки, валидация RunConfig
"""
from pathlib import Path
from typing import Dict, Iterable, Optional, Tuple, Union
import json
import logging

import iniconfig
from pydantic import ValidationError

from latent_action_pretraining.exceptions import ConfigError
from latent_action_pretraining.schemas import RunConfig


logger = logging.getLogger(__name__)

# Ключи верхнего уровня (seed) задаются в секции [run]
ROOT_SECTION = 'run'
PathType = Union[str, Path]


def parse_value(raw: str):
    """ JSON-литерал, если строка разбирается как JSON, иначе строка как есть """
    try:
        return json.loads(raw)
    except ValueError:
        return raw


def read_config_file(path: PathType) -> Tuple[dict, Dict[str, int]]:
    """
    Чтение INI-файла конфигурации
    :param path: путь
    :return: дерево значений и номера строк ключей вида section.key
    """
    path = Path(path)
    if not path.exists():
        raise ConfigError('файл конфигурации не найден', path=str(path))

    try:
        parsed = iniconfig.IniConfig(str(path), encoding='utf-8')
    except iniconfig.ParseError as ex:
        raise ConfigError(ex.msg, path=str(path), line=ex.lineno + 1) from ex

    tree: dict = {}
    lines: Dict[str, int] = {}
    for section in parsed:
        for name, raw in section.items():
            key = name if section.name == ROOT_SECTION else f'{section.name}.{name}'
            _assign(tree, key, parse_value(raw))
            lines[key] = section.lineof(name)
    return tree, lines


def apply_override(tree: dict, assignment: str) -> str:
    """
    Переопределение вида section.key=value
    :param tree: дерево конфигурации (изменяется)
    :param assignment: строка переопределения
    :return: ключ
    """
    key, separator, raw = assignment.partition('=')
    key = key.strip()
    if not separator or not key:
        raise ConfigError(f'переопределение {assignment!r} должно иметь вид section.key=value', key=key or None)
    if key.count('.') > 1:
        raise ConfigError('допустим только один уровень вложенности', key=key)

    _assign(tree, key, parse_value(raw.strip()))
    return key


def load_config(path: Optional[PathType] = None, overrides: Iterable[str] = (),
                values: Optional[Dict[str, object]] = None) -> RunConfig:
    """
    Сборка RunConfig: значения по умолчанию, файл, --set, затем флаги подкоманды
    :param path: INI-файл
    :param overrides: строки section.key=value
    :param values: значения флагов подкоманды {section.key: value}; None пропускается
    :return: конфигурация
    """
    tree, lines = read_config_file(path) if path is not None else ({}, {})
    for assignment in overrides:
        lines.pop(apply_override(tree, assignment), None)
    for key, value in (values or {}).items():
        if value is not None:
            _assign(tree, key, value)
            lines.pop(key, None)

    try:
        config = RunConfig.parse_obj(tree)
    except ValidationError as ex:
        error = ex.errors()[0]
        key = '.'.join(str(part) for part in error['loc'] if part != '__root__') or None
        raise ConfigError(error['msg'], path=str(path) if path is not None and key in lines else None,
                          line=lines.get(key), key=key) from ex

    logger.debug('Конфигурация %s', config.config_hash()[:8])
    return config


def dump_config(config: RunConfig) -> str:
    """ Снимок конфигурации в том же INI-формате """
    data = config.dict()
    out = [f'[{ROOT_SECTION}]', f'seed = {json.dumps(data.pop("seed"))}', '']
    for section, fields in data.items():
        out.append(f'[{section}]')
        out.extend(f'{name} = {json.dumps(value)}' for name, value in fields.items())
        out.append('')
    return '\n'.join(out)


def _assign(tree: dict, key: str, value) -> None:
    section, _, name = key.rpartition('.')
    (tree.setdefault(section, {}) if section else tree)[name] = value
