"""
Каталоги запусков: снимок конфигурации, журнал, метрики, манифест и поиск артефактов предыдущих подкоманд
"""
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Union
import logging
import os
import time

import pandas as pd

from latent_action_pretraining import settings
from latent_action_pretraining.config import dump_config
from latent_action_pretraining.exceptions import ContractViolation, LapaError, MissingArtifact
from latent_action_pretraining.schemas import ReportIndex, ReportIndexEntry, RunConfig, RunManifest


logger = logging.getLogger(__name__)

PathType = Union[str, Path]
RUN_MANIFEST = 'run.json'
LOCK_NAME = '.lock'
INDEX_NAME = 'report.json'
PACKAGE_LOGGER = 'latent_action_pretraining'


def _now() -> datetime:
    return datetime.now(timezone.utc)


def _acquire(path: Path, attempts: int = 1, delay: float = 0.05) -> None:
    for attempt in range(attempts):
        try:
            descriptor = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            if attempt + 1 == attempts:
                raise ContractViolation(f'{path} занят другим процессом') from None
            time.sleep(delay)
            continue
        with os.fdopen(descriptor, 'w') as stream:
            stream.write(str(os.getpid()))
        return


class RunDirectory:
    """
    Каталог одного запуска {команда}-{время}-{хэш8}; принадлежит ровно одному процессу
    """

    def __init__(self, command: str, config: RunConfig, root: Optional[PathType] = None) -> None:
        self.command = command
        self.config = config
        self.root = Path(root or settings.OUTPUT_ROOT)
        self.started = _now()
        self.path = self.root / f'{command}-{self.started:%Y%m%d-%H%M%S-%f}-{config.config_hash()[:8]}'
        self.manifest = RunManifest(command=command, status='running', seed=config.seed,
                                    config_hash=config.config_hash(), started_at=self.started.isoformat())
        self.summary: dict = {}
        self.metrics: List[dict] = []
        self._handler: Optional[logging.Handler] = None

    def __enter__(self) -> 'RunDirectory':
        self.path.mkdir(parents=True, exist_ok=True)
        _acquire(self.path / LOCK_NAME)

        (self.path / 'config.ini').write_text(dump_config(self.config), encoding='utf-8')
        (self.path / 'config.json').write_text(self.config.json(indent=2, sort_keys=True), encoding='utf-8')
        self._handler = logging.FileHandler(self.path / 'run.log', encoding='utf-8')
        self._handler.setFormatter(logging.Formatter('%(asctime)s %(levelname)s %(name)s: %(message)s'))
        logging.getLogger(PACKAGE_LOGGER).addHandler(self._handler)
        self._write_manifest()

        logger.info('Запуск %s в %s', self.command, self.path)
        return self

    def __exit__(self, exc_type, exc, traceback) -> bool:
        if exc is not None:
            logger.error('Запуск %s завершился ошибкой: %s', self.command, exc)
        self.manifest.status = 'completed' if exc is None else 'failed'
        self.manifest.finished_at = _now().isoformat()

        try:
            if self.metrics:
                pd.DataFrame(self.metrics).to_csv(self.path / 'metrics.csv', index=False)
            self._write_manifest()
            update_index(self.root, self)
        finally:
            logging.getLogger(PACKAGE_LOGGER).removeHandler(self._handler)
            self._handler.close()
            (self.path / LOCK_NAME).unlink(missing_ok=True)
        return False

    def _write_manifest(self) -> None:
        (self.path / RUN_MANIFEST).write_text(self.manifest.json(indent=2), encoding='utf-8')

    def artifact(self, name: str, relative: str) -> Path:
        """
        Регистрация артефакта в манифесте
        :param name: имя артефакта (например laq, labels)
        :param relative: путь внутри каталога запуска
        :return: абсолютный путь
        """
        path = self.path / relative
        path.parent.mkdir(parents=True, exist_ok=True)
        self.manifest.artifacts[name] = relative
        return path

    def record(self, stage: str):
        """ Обработчик строк метрик для обучающих циклов """
        def callback(row: dict) -> None:
            self.metrics.append({'stage': stage, **row})
        return callback

    def upstream(self, name: str, producer: str, explicit: Optional[PathType] = None) -> Path:
        """ Путь артефакта предыдущей подкоманды с записью в манифест """
        path = find_artifact(self.root, name, producer, explicit)
        self.manifest.upstream[name] = str(path)
        return path


def completed_runs(root: PathType) -> List[RunManifest]:
    """ Завершённые запуски в корне, от новых к старым """
    manifests = []
    for path in Path(root).glob(f'*/{RUN_MANIFEST}'):
        try:
            manifest = RunManifest.parse_file(path)
        except ValueError:
            logger.warning('Пропущен повреждённый манифест %s', path)
            continue
        if manifest.status == 'completed':
            manifests.append((manifest, path.parent))
    manifests.sort(key=lambda item: (item[0].started_at, item[1].name), reverse=True)
    return [_with_path(manifest, directory) for manifest, directory in manifests]


def _with_path(manifest: RunManifest, directory: Path) -> RunManifest:
    manifest.artifacts = {name: str(directory / relative) for name, relative in manifest.artifacts.items()}
    return manifest


def find_artifact(root: PathType, name: str, producer: str, explicit: Optional[PathType] = None) -> Path:
    """
    Поиск артефакта по манифестам запусков, а не по соглашению об именах файлов
    :param root: корень каталогов запусков
    :param name: имя артефакта
    :param producer: подкоманда, создающая артефакт
    :param explicit: каталог запуска или путь к артефакту, указанный явно
    :return: путь
    """
    if explicit is not None:
        explicit = Path(explicit)
        if (explicit / RUN_MANIFEST).exists():
            manifest = RunManifest.parse_file(explicit / RUN_MANIFEST)
            if manifest.status == 'completed' and name in manifest.artifacts:
                return explicit / manifest.artifacts[name]
            raise MissingArtifact(f'{name} в {explicit}', producer)
        if explicit.exists():
            return explicit
        raise MissingArtifact(str(explicit), producer)

    for manifest in completed_runs(root):
        if name in manifest.artifacts and Path(manifest.artifacts[name]).exists():
            return Path(manifest.artifacts[name])
    raise MissingArtifact(f'{name} в {root}', producer)


def update_index(root: PathType, run: RunDirectory) -> Path:
    """
    Сводный report.json: все запуски с хэшами конфигураций
    :param root: корень каталогов запусков
    :param run: завершившийся запуск
    :return: путь индекса
    """
    root = Path(root)
    path, lock = root / INDEX_NAME, root / f'{INDEX_NAME}.lock'
    _acquire(lock, attempts=200)
    try:
        index = ReportIndex.parse_file(path) if path.exists() else ReportIndex()
        index.runs = [entry for entry in index.runs if entry.run != run.path.name]
        index.runs.append(ReportIndexEntry(
            run=run.path.name,
            command=run.command,
            status=run.manifest.status,
            config_hash=run.manifest.config_hash,
            started_at=run.manifest.started_at,
            finished_at=run.manifest.finished_at,
            artifacts=dict(run.manifest.artifacts),
            summary=run.summary,
        ))
        temporary = path.with_suffix('.tmp')
        temporary.write_text(index.json(indent=2), encoding='utf-8')
        os.replace(temporary, path)
    except (OSError, ValueError) as ex:
        raise LapaError(f'Не удалось обновить {path}: {ex}') from ex
    finally:
        lock.unlink(missing_ok=True)
    return path


def read_index(root: PathType) -> Dict[str, ReportIndexEntry]:
    path = Path(root) / INDEX_NAME
    if not path.exists():
        return {}
    return {entry.run: entry for entry in ReportIndex.parse_file(path).runs}
