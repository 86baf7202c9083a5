#!/usr/bin/env python3
"""
Tests for run-config parsing, stage settings and the config hash.
"""
import sys
import tempfile
from pathlib import Path

from config import Config
from logger import setup_logger
from run_config import StageConfig, build_run_config, load_run_config, parse_config_text
from utils import ParseError, run_test_suite

logger = setup_logger("TestRunConfig")

SAMPLE = """
# sample run
[data]
interactions = {out}/log.tsv
behaviors = view, cart, buy
min_count = 2

[model]
dim = 8
layers = 3

[train]
epochs = 5
lr = 0.05
seed = 11

[stage1]
delta = 0.1

[stage3]
epochs = 2
prompt_variant = projection

[eval]
mode = sampled
"""


def _expect_parse_error(text, line_number):
    try:
        parse_config_text(text)
    except ParseError as e:
        assert e.line_number == line_number, (e.line_number, str(e))
        return str(e)
    raise AssertionError(f"expected a parse error at line {line_number}")


def test_parse_sections_and_types():
    sections = parse_config_text(SAMPLE)
    assert sections['data']['behaviors'] == ('view', 'cart', 'buy')
    assert sections['data']['min_count'] == 2
    assert sections['model'] == {'dim': 8, 'layers': 3}
    assert sections['train']['lr'] == 0.05
    assert sections['stage3']['prompt_variant'] == 'projection'


def test_grammar_errors_carry_line_numbers():
    assert 'unknown section' in _expect_parse_error("[data]\nmin_count = 1\n[optim]\n", 3)
    assert 'unknown key' in _expect_parse_error("[model]\ndim = 4\nwidth = 9\n", 3)
    assert 'duplicate' in _expect_parse_error("[model]\ndim = 4\n\ndim = 5\n", 4)
    assert 'outside' in _expect_parse_error("dim = 4\n", 1)
    assert 'malformed' in _expect_parse_error("; header\n[model\n", 2)
    _expect_parse_error("[model]\nlayers\n", 2)
    _expect_parse_error("[model]\ninclude_layer0 = maybe\n", 2)
    _expect_parse_error("[train]\nepochs = ten\n", 2)


def test_paths_resolve():
    with tempfile.TemporaryDirectory() as tmp:
        base = Path(tmp) / 'cfg'
        run = build_run_config(parse_config_text(SAMPLE), Path(tmp) / 'out', base_dir=base)
        assert run.interactions == Path(tmp) / 'out' / 'log.tsv'
        assert run.noise == Path(tmp) / 'out' / 'log.noise'

        relative = build_run_config({'data': {'interactions': 'data/log.tsv', 'noise': 'x.noise'}},
                                    Path(tmp) / 'out', base_dir=base)
        assert relative.interactions == base / 'data' / 'log.tsv'
        assert relative.noise == base / 'x.noise'


def test_stage_settings_merge():
    run = build_run_config(parse_config_text(SAMPLE), 'out')
    first, second, third = run.stage(1), run.stage(2), run.stage(3)
    assert isinstance(first, StageConfig)
    assert (first.epochs, first.lr, first.delta) == (5, 0.05, 0.1)
    assert (second.epochs, second.delta) == (5, 0.2)
    assert (third.epochs, third.prompt_variant) == (2, 'projection')
    assert all(s.dim == 8 and s.layers == 3 and s.seed == 11 for s in (first, second, third))
    assert run.eval_mode == 'sampled'


def test_invalid_values_rejected():
    for sections in ({'model': {'interaction_norm': 'cosine'}},
                     {'eval': {'mode': 'partial'}},
                     {'data': {'behaviors': ('view', 'buy'), 'drop': ('buy',)}},
                     {'data': {'behaviors': ('view', 'buy'), 'drop': ('cart',)}},
                     {'data': {'top_k': 0}}):
        try:
            build_run_config(sections, 'out')
        except ValueError:
            continue
        raise AssertionError(f"accepted invalid settings {sections}")
    run = build_run_config({'stage1': {'delta': 0.7}}, 'out')
    try:
        run.stage(1)
    except ValueError:
        pass
    else:
        raise AssertionError("delta outside (0, 0.5) accepted")


def test_overrides():
    run = build_run_config(parse_config_text(SAMPLE), 'out')
    changed = run.with_overrides(seed=3, prompt_variant='shallow', dropped=['cart'], eval_mode='full', threads=4)
    assert changed.seed == 3 and changed.threads == 4 and changed.eval_mode == 'full'
    assert changed.dropped == ('cart',)
    assert changed.stage(3).prompt_variant == 'shallow'
    assert changed.stage(3).epochs == 2
    assert run.stage(3).prompt_variant == 'projection'
    assert run.with_overrides() is run


def test_config_hash():
    run = build_run_config(parse_config_text(SAMPLE), 'out')
    again = build_run_config(parse_config_text(SAMPLE), 'elsewhere')
    assert len(run.config_hash) == 16
    assert run.config_hash == again.config_hash

    stage_only = run.with_overrides(prompt_variant='add', threads=8, eval_mode='full')
    assert stage_only.config_hash == run.config_hash

    assert run.with_overrides(seed=12).config_hash != run.config_hash
    assert run.with_overrides(dropped=['view']).config_hash != run.config_hash
    deeper = build_run_config(parse_config_text(SAMPLE.replace('layers = 3', 'layers = 2')), 'out')
    assert deeper.config_hash != run.config_hash


def test_load_run_config_file():
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / 'run.cfg'
        path.write_text(SAMPLE, encoding='utf-8')
        run = load_run_config(path, Path(tmp) / 'out')
        assert run.source == path
        assert run.behaviors == ('view', 'cart', 'buy')
        try:
            load_run_config(Path(tmp) / 'missing.cfg')
        except FileNotFoundError:
            pass
        else:
            raise AssertionError("missing config file accepted")


def test_shipped_config_loads():
    run = load_run_config(Path(__file__).parent / 'configs' / 'synthetic_200.cfg', 'runs/synth')
    assert run.target_label == 'buy'
    spec = run.synthetic_spec()
    assert (spec.num_users, spec.num_items, spec.num_aux_behaviors) == (200, 200, 3)
    assert spec.labels == ('aux1', 'aux2', 'aux3', 'buy')
    assert (run.stage(1).epochs, run.stage(2).epochs, run.stage(3).epochs) == (60, 60, 80)
    assert run.stage(3).lr == 0.01 and run.stage(2).lr == 0.005
    assert run.interaction_norm == 'none' and run.include_layer0
    assert spec.density == (0.1, 0.05, 0.05, 0.03)


def test_plain_sum_is_the_default_norm():
    run = build_run_config({}, 'out')
    assert run.interaction_norm == 'none'
    assert all(run.stage(n).interaction_norm == 'none' for n in (1, 2, 3))
    assert StageConfig(stage=2).interaction_norm == 'none'
    opted = build_run_config({'model': {'interaction_norm': 'symmetric'}}, 'out')
    assert opted.stage(2).interaction_norm == 'symmetric'
    assert opted.config_hash != run.config_hash


def test_environment_config_validation():
    saved = (Config.THREADS, Config.DEFAULT_BEHAVIORS)
    try:
        Config.THREADS, Config.DEFAULT_BEHAVIORS = 2, ['view', 'buy']
        assert Config.validate() == {'valid': True, 'errors': []}
        assert 'target: buy' in Config.get_config_summary()
        Config.THREADS, Config.DEFAULT_BEHAVIORS = 0, ['buy', 'buy']
        result = Config.validate()
        assert not result['valid'] and len(result['errors']) == 2
    finally:
        Config.THREADS, Config.DEFAULT_BEHAVIORS = saved


def main():
    """Run all run-config tests."""
    tests = [
        ("Parse Sections", test_parse_sections_and_types),
        ("Grammar Errors", test_grammar_errors_carry_line_numbers),
        ("Path Resolution", test_paths_resolve),
        ("Stage Merge", test_stage_settings_merge),
        ("Invalid Values", test_invalid_values_rejected),
        ("Overrides", test_overrides),
        ("Config Hash", test_config_hash),
        ("Load File", test_load_run_config_file),
        ("Shipped Config", test_shipped_config_loads),
        ("Default Norm", test_plain_sum_is_the_default_norm),
        ("Environment Config", test_environment_config_validation),
    ]
    return run_test_suite("RUN CONFIG", tests, logger)


if __name__ == "__main__":
    sys.exit(main())
