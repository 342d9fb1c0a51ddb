import pytest

from latent_action_pretraining import grammar
from latent_action_pretraining.exceptions import ContractViolation
from latent_action_pretraining.grammar import Noun, VocabMap


@pytest.mark.parametrize('category, reference, region, text', [
    ('block2block', Noun('blue', 'square'), None, 'push the red circle to the blue square'),
    ('block2absolute', None, 'top left corner', 'push the red circle to the top left corner'),
    ('separate', Noun('yellow', 'moon'), None, 'separate the red circle from the yellow moon'),
])
def test_make_and_parse_instruction(category, reference, region, text):
    target = Noun('red', 'circle')

    assert grammar.make_instruction(category, target, reference, region) == text
    assert grammar.parse_instruction(text) == grammar.ParsedInstruction(category, target, reference, region)


@pytest.mark.parametrize('category, reference, region', [
    ('stack', Noun('blue', 'square'), None),
    ('block2absolute', None, 'nowhere'),
    ('block2block', None, None),
])
def test_make_instruction_errors(category, reference, region):
    with pytest.raises(ContractViolation):
        grammar.make_instruction(category, Noun('red', 'circle'), reference, region)


@pytest.mark.parametrize('text', ['push the red circle', 'push the pink circle to the center', ''])
def test_parse_instruction_errors(text):
    with pytest.raises(ContractViolation):
        grammar.parse_instruction(text)


@pytest.mark.parametrize('noun, is_unseen', [
    (Noun('purple', 'circle'), True), (Noun('green', 'moon'), True),
    (Noun('green', 'square'), False), (Noun('red', 'moon'), False),
])
def test_is_unseen_object(noun, is_unseen):
    assert grammar.is_unseen_object(noun) is is_unseen


def test_vocab_covers_grammar():
    vocab = VocabMap()
    text = grammar.make_instruction('block2absolute', Noun('orange', 'triangle'), region='bottom right corner')

    ids = vocab.tokenize(text)

    assert vocab.pad_id == 0
    assert vocab.ids[grammar.UNK] not in ids
    assert vocab.detokenize(ids) == text


def test_vocab_padding_and_unknown_words():
    vocab = VocabMap(['push', 'the'])

    assert vocab.tokenize('push the box', length=5) == [2, 3, 1, 0, 0]
    with pytest.raises(ContractViolation):
        vocab.tokenize('push the box', length=2)
