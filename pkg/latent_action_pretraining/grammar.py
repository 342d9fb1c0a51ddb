"""
Грамматика инструкций мира толкания блоков и словарь токенизатора
"""
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple
import re

from latent_action_pretraining.exceptions import ContractViolation


COLORS = ('red', 'blue', 'green', 'yellow', 'purple', 'orange')
SHAPES = ('circle', 'square', 'triangle', 'moon')
CATEGORIES = ('block2block', 'block2absolute', 'separate')

# Удержанные объекты для сплита unseen
UNSEEN_COLOR = 'purple'
UNSEEN_COMBINATION = ('green', 'moon')

REGIONS: Dict[str, Tuple[float, float]] = {
    'top left corner': (0.15, 0.85),
    'top right corner': (0.85, 0.85),
    'bottom left corner': (0.15, 0.15),
    'bottom right corner': (0.85, 0.15),
    'center': (0.5, 0.5),
    'left side': (0.15, 0.5),
    'right side': (0.85, 0.5),
    'top side': (0.5, 0.85),
    'bottom side': (0.5, 0.15),
}

TEMPLATES = {
    'block2block': 'push the {target} to the {reference}',
    'block2absolute': 'push the {target} to the {region}',
    'separate': 'separate the {target} from the {reference}',
}

PAD = '<pad>'
UNK = '<unk>'

_NOUN = r'(?P<{name}>(?:{colors}) (?:{shapes}))'


class Noun(NamedTuple):
    color: str
    shape: str

    def __str__(self) -> str:
        return f'{self.color} {self.shape}'


class ParsedInstruction(NamedTuple):
    category: str
    target: Noun
    reference: Optional[Noun]
    region: Optional[str]


def is_unseen_object(noun: Noun) -> bool:
    """ Относится ли объект к удержанным для сплита unseen """
    return noun.color == UNSEEN_COLOR or tuple(noun) == UNSEEN_COMBINATION


def make_instruction(category: str, target: Noun, reference: Optional[Noun] = None,
                     region: Optional[str] = None) -> str:
    """
    Построение текста инструкции по шаблону категории
    :param category: категория задачи
    :param target: толкаемый блок
    :param reference: опорный блок (block2block, separate)
    :param region: область (block2absolute)
    :return: инструкция
    """
    if category not in TEMPLATES:
        raise ContractViolation(f'Неизвестная категория {category}')
    if category == 'block2absolute' and region not in REGIONS:
        raise ContractViolation(f'Неизвестная область {region}')
    if category != 'block2absolute' and reference is None:
        raise ContractViolation(f'Категория {category} требует опорного блока')

    return TEMPLATES[category].format(target=target, reference=reference, region=region)


def _compile_patterns() -> Dict[str, re.Pattern]:
    colors, shapes = '|'.join(COLORS), '|'.join(SHAPES)
    regions = '|'.join(re.escape(region) for region in REGIONS)
    fields = {
        'target': _NOUN.format(name='target', colors=colors, shapes=shapes),
        'reference': _NOUN.format(name='reference', colors=colors, shapes=shapes),
        'region': f'(?P<region>{regions})',
    }
    return {category: re.compile('^' + template.format(**fields) + '$') for category, template in TEMPLATES.items()}


_PATTERNS = _compile_patterns()


def parse_instruction(text: str) -> ParsedInstruction:
    """
    Разбор инструкции обратно в параметры задачи
    :param text: инструкция
    :return: категория, блоки, область
    """
    for category, pattern in _PATTERNS.items():
        match = pattern.match(text)
        if match:
            groups = match.groupdict()
            reference = Noun(*groups['reference'].split(' ')) if groups.get('reference') else None
            return ParsedInstruction(category, Noun(*groups['target'].split(' ')), reference, groups.get('region'))

    raise ContractViolation(f'Инструкция не соответствует грамматике: {text!r}')


def grammar_words() -> List[str]:
    """ Все слова грамматики в детерминированном порядке """
    words = set(COLORS) | set(SHAPES)
    for template in TEMPLATES.values():
        words.update(word for word in template.split(' ') if not word.startswith('{'))
    for region in REGIONS:
        words.update(region.split(' '))
    return sorted(words)


class VocabMap:
    """ Словарь слово -> идентификатор; 0 - паддинг, 1 - неизвестное слово """

    def __init__(self, words: Optional[Sequence[str]] = None) -> None:
        self.words = [PAD, UNK] + list(words if words is not None else grammar_words())
        self.ids = {word: index for index, word in enumerate(self.words)}

    def __len__(self) -> int:
        return len(self.words)

    @property
    def pad_id(self) -> int:
        return self.ids[PAD]

    def tokenize(self, text: str, length: Optional[int] = None) -> List[int]:
        """
        Токенизация по пробелам с паддингом до length
        :param text: инструкция
        :param length: итоговая длина
        :return: идентификаторы
        """
        ids = [self.ids.get(word, self.ids[UNK]) for word in text.split(' ') if word]
        if length is None:
            return ids
        if len(ids) > length:
            raise ContractViolation(f'Инструкция длиннее {length} токенов: {text!r}')
        return ids + [self.pad_id] * (length - len(ids))

    def detokenize(self, ids: Sequence[int]) -> str:
        return ' '.join(self.words[index] for index in ids if index != self.pad_id)
