import pytest

from latent_action_pretraining.config import apply_override, dump_config, load_config, parse_value, read_config_file
from latent_action_pretraining.exceptions import ConfigError
from latent_action_pretraining.schemas import RunConfig


@pytest.mark.parametrize('raw, expected', [
    ('16', 16), ('0.5', 0.5), ('true', True), ('null', None), ('["lapa", "vpt"]', ['lapa', 'vpt']),
    ('vocab', 'vocab'), ('"vocab"', 'vocab'),
])
def test_parse_value(raw, expected):
    assert parse_value(raw) == expected


def test_load_config_file(tmp_path):
    path = _write(tmp_path, '[run]\nseed = 7\n\n# кодовая книга\n[laq]\ncodebook_size = 16\n\n'
                            '[finetune]\nmodes = ["lapa", "scratch"]\n')

    config = load_config(path)

    assert config.seed == 7
    assert config.laq.codebook_size == 16
    assert config.finetune.modes == ['lapa', 'scratch']
    assert config.policy == RunConfig().policy


def test_overrides_and_flags_take_precedence(tmp_path):
    path = _write(tmp_path, '[run]\nseed = 7\n[laq]\ncodebook_size = 16\n')

    config = load_config(path, ['laq.codebook_size=32', 'seed=3'], {'laq.window': 5, 'laq.steps': None, 'seed': 4})

    assert config.laq.codebook_size == 32
    assert config.laq.window == 5
    assert config.laq.steps == RunConfig().laq.steps
    assert config.seed == 4


def test_unknown_key_reports_line(tmp_path):
    path = _write(tmp_path, '[run]\nseed = 7\n\n[laq]\nbogus = 1\n')

    with pytest.raises(ConfigError) as error:
        load_config(path)

    assert error.value.key == 'laq.bogus'
    assert error.value.line == 5
    assert error.value.path == str(path)


def test_invalid_value_from_override_has_no_line(tmp_path):
    path = _write(tmp_path, '[laq]\ncodebook_size = 16\n')

    with pytest.raises(ConfigError) as error:
        load_config(path, ['laq.codebook_size=1'])

    assert error.value.key == 'laq.codebook_size'
    assert error.value.line is None


@pytest.mark.parametrize('text, line', [('[run]\ngarbage\n', 2), ('seed = 1\n', 1)])
def test_syntax_errors(tmp_path, text, line):
    with pytest.raises(ConfigError) as error:
        read_config_file(_write(tmp_path, text))

    assert error.value.line == line


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_config(tmp_path / 'absent.ini')


@pytest.mark.parametrize('assignment', ['laq.codebook_size', '=3', 'a.b.c=1'])
def test_bad_overrides(assignment):
    with pytest.raises(ConfigError):
        apply_override({}, assignment)


def test_cross_section_validation():
    with pytest.raises(ConfigError):
        load_config(values={'env.image_size': 16})


def test_hash_ignores_key_order(tmp_path):
    first = load_config(_write(tmp_path, '[laq]\nwindow = 2\ncodebook_size = 4\n[run]\nseed = 1\n', 'a.ini'))
    second = load_config(_write(tmp_path, '[run]\nseed = 1\n[laq]\ncodebook_size = 4\nwindow = 2\n', 'b.ini'))

    assert first.config_hash() == second.config_hash()
    assert first.config_hash() != load_config(values={'seed': 2}).config_hash()


def test_dump_and_load(tmp_path):
    config = load_config(values={'seed': 11, 'laq.grad_clip': None, 'finetune.modes': ['vpt'], 'sweep.axis': 'seq'})

    restored = load_config(_write(tmp_path, dump_config(config)))

    assert restored == config
    assert restored.config_hash() == config.config_hash()


def _write(tmp_path, text, name='config.ini'):
    path = tmp_path / name
    path.write_text(text, encoding='utf-8')
    return path
