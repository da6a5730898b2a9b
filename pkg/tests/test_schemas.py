import pytest
from pydantic import ValidationError

from config import Config
from schemas import COMMANDS, RunConfig, load_config_file, schema_help


def _delta_raw(tmp_path, write_lines):
    path = write_lines(tmp_path / 'm.csv', 'task,metric,lower_is_better', 'seg,0.5,0')
    return {'model': str(path), 'baseline': str(path)}


def test_defaults_from_config():
    cfg = RunConfig.build('crop-stats', {})
    assert cfg.seed == Config.DEFAULT_SEED
    assert cfg.threads == Config.THREADS
    assert cfg.params.bins == Config.IOU_BINS


def test_unknown_key_rejected():
    with pytest.raises(ValidationError):
        RunConfig.build('crop-stats', {'width': 64, 'colour': 'red'})


def test_flags_override_file_values():
    cfg = RunConfig.build('crop-stats', {'seed': 1, 'threads': 2, 'output': 'a'}, seed=9, threads=3, output='b')
    assert (cfg.seed, cfg.threads, cfg.output) == (9, 3, 'b')
    cfg = RunConfig.build('crop-stats', {'seed': 1})
    assert cfg.seed == 1


def test_digest_ignores_output_directory():
    a = RunConfig.build('crop-stats', {'samples': 10}, output='x')
    b = RunConfig.build('crop-stats', {'samples': 10}, output='y')
    c = RunConfig.build('crop-stats', {'samples': 11}, output='x')
    assert a.digest() == b.digest() != c.digest()
    assert a.metadata()['config_sha256'] == a.digest()


def test_missing_input_file_rejected(tmp_path, write_lines):
    raw = _delta_raw(tmp_path, write_lines)
    RunConfig.build('delta-mtl', raw)
    raw['baseline'] = str(tmp_path / 'absent.csv')
    with pytest.raises(ValidationError, match='input file not found'):
        RunConfig.build('delta-mtl', raw)


def test_strategy_specific_inputs_required(tmp_path, write_lines):
    trace = write_lines(tmp_path / 't.csv', 'iter,task,loss,grad_norm', '0,a,1.0,')
    with pytest.raises(ValidationError, match='kpis'):
        RunConfig.build('balance', {'trace': str(trace), 'strategy': 'dtp'})
    with pytest.raises(ValidationError):
        RunConfig.build('balance', {'trace': str(trace), 'strategy': 'softmax'})


def test_branch_search_costs_non_negative(tmp_path, write_lines):
    tensor = write_lines(tmp_path / 'a.mtkt', 'x')
    with pytest.raises(ValidationError, match='non-negative'):
        RunConfig.build('branch-search', {'affinity': str(tensor), 'shared_costs': [1, -1],
                                          'decoder_costs': [1], 'budget': 3})


def test_load_config_file(tmp_path, write_lines):
    assert load_config_file(None) == {}
    assert load_config_file(str(write_lines(tmp_path / 'empty.yaml', ''))) == {}
    assert load_config_file(str(write_lines(tmp_path / 'c.yaml', 'seed: 4', 'samples: 3'))) == {'seed': 4, 'samples': 3}
    with pytest.raises(ValueError, match='mapping'):
        load_config_file(str(write_lines(tmp_path / 'l.yaml', '- 1', '- 2')))


@pytest.mark.parametrize('command', sorted(COMMANDS))
def test_schema_help_lists_every_key(command):
    text = schema_help(command)
    assert 'seed, threads, output' in text
    for name in COMMANDS[command].model_fields:
        assert f"  {name}:" in text


def test_distill_param_names_validated(tmp_path, write_lines):
    path = str(write_lines(tmp_path / 'w.mtkt', 'x'))
    with pytest.raises(ValidationError, match='wieght'):
        RunConfig.build('distill-check', {'operator': 'padnet', 'params': {'wieght': path, 'bias': path}})
    with pytest.raises(ValidationError, match='missing harmonize'):
        RunConfig.build('distill-check', {'operator': 'harmonize', 'params': {'mix_weight': path}})
    cfg = RunConfig.build('distill-check', {'operator': 'padnet', 'params': {'weight': path, 'bias': path}})
    assert set(cfg.params.params) == {'weight', 'bias'}
