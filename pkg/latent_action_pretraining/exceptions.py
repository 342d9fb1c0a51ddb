from typing import Optional


class LapaError(Exception):
    """ Базовая ошибка пакета """


class ContractViolation(LapaError, ValueError):
    """ Нарушение контракта операции: формы, диапазоны, предусловия """


class NumericFault(LapaError, ArithmeticError):
    """ Появление NaN / Inf в вычислениях """

    def __init__(self, message: str, step: Optional[int] = None, checkpoint: Optional[str] = None) -> None:
        """
        :param message: описание ошибки
        :param step: номер шага обучения, на котором обнаружена ошибка
        :param checkpoint: путь к последнему корректному чекпоинту
        """
        details = [message]
        if step is not None:
            details.append(f'шаг {step}')
        if checkpoint is not None:
            details.append(f'последний корректный чекпоинт: {checkpoint}')

        super().__init__('; '.join(details))
        self.step = step
        self.checkpoint = checkpoint


class MissingArtifact(LapaError, FileNotFoundError):
    """ Отсутствует артефакт, который должна была создать предыдущая подкоманда """

    def __init__(self, artifact: str, producer: str) -> None:
        """
        :param artifact: описание / путь артефакта
        :param producer: подкоманда, создающая артефакт
        """
        super().__init__(f'Не найден артефакт {artifact}. Запустите сначала `manage.py {producer}`')
        self.artifact = artifact
        self.producer = producer


class ConfigError(LapaError):
    """ Ошибка разбора или валидации конфигурации """

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None,
                 key: Optional[str] = None) -> None:
        """
        :param message: описание ошибки
        :param path: путь к файлу конфигурации
        :param line: номер строки (с единицы)
        :param key: ключ вида section.key
        """
        location = ''.join(part for part in (
            path or '',
            f':{line}' if line is not None else '',
            f' [{key}]' if key else '',
        ))

        super().__init__(f'{location}: {message}' if location else message)
        self.path = path
        self.line = line
        self.key = key


class DatasetWriteError(LapaError, OSError):
    """ Ошибка записи набора данных """

    def __init__(self, path: str, reason: str) -> None:
        super().__init__(f'Не удалось записать {path}: {reason}')
        self.path = path
