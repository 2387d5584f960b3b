import json
from pathlib import Path

import pytest

from core.config import base_rates, dump_config, load_experiment_config
from core.errors import ConfigError
from core.numerics import ENCODER_GROUP, HEAD_GROUP

CONFIG_DIR = Path(__file__).parent.parent / "config"


def _write(tmp_path, text):
    path = tmp_path / "c.json"
    path.write_text(text, encoding="utf-8")
    return str(path)


def test_defaults_resolve_everything():
    config = load_experiment_config(env={})
    assert config.lam == 2.0
    assert (config.K, config.M) == (7, 12)
    assert (config.lr_encoder, config.lr_heads) == (1e-3, 1e-2)
    assert config.world.au_set == config.au_set
    assert config.world.frames == config.frames


@pytest.mark.parametrize("name", ["experiment.json", "reference-rates.json", "smoke.json"])
def test_shipped_configs_load(name):
    config = load_experiment_config(str(CONFIG_DIR / name), env={})
    assert config.epochs >= 1


def test_reference_rates_preset():
    config = load_experiment_config(str(CONFIG_DIR / "reference-rates.json"), env={})
    assert base_rates(config) == {ENCODER_GROUP: 1e-6, HEAD_GROUP: 1e-4}


def test_lambda_uses_json_key(tmp_path):
    config = load_experiment_config(_write(tmp_path, '{"lambda": 0.5}'), env={})
    assert config.lam == 0.5
    assert dump_config(config)["lambda"] == 0.5


def test_unknown_key_reports_key_and_line(tmp_path):
    path = _write(tmp_path, '{\n  "epochs": 3,\n  "epochz": 4\n}\n')
    with pytest.raises(ConfigError) as err:
        load_experiment_config(path, env={})
    assert err.value.key == "epochz"
    assert err.value.line == 3


def test_out_of_range_value_reports_key(tmp_path):
    path = _write(tmp_path, '{\n  "tau": -1\n}')
    with pytest.raises(ConfigError) as err:
        load_experiment_config(path, env={})
    assert err.value.key == "tau"
    assert err.value.line == 2


def test_nested_error_names_dotted_key(tmp_path):
    path = _write(tmp_path, '{\n  "moe": {\n    "num_experts": 2,\n    "top_k": 3\n  }\n}')
    with pytest.raises(ConfigError) as err:
        load_experiment_config(path, env={})
    assert err.value.key == "moe.top_k"
    assert err.value.line == 4


def test_invalid_json_reports_line(tmp_path):
    path = _write(tmp_path, '{\n  "epochs": 3,,\n}')
    with pytest.raises(ConfigError) as err:
        load_experiment_config(path, env={})
    assert err.value.line == 2


def test_custom_rates_need_values(tmp_path):
    with pytest.raises(ConfigError) as err:
        load_experiment_config(_write(tmp_path, '{"rates": "custom", "lr_heads": 0.1}'), env={})
    assert err.value.key == "lr_encoder"
    config = load_experiment_config(_write(tmp_path, '{"rates": "custom", "lr_encoder": 0, "lr_heads": 0.1}'),
        env={})
    assert base_rates(config) == {ENCODER_GROUP: 0.0, HEAD_GROUP: 0.1}


def test_seed_overrides(tmp_path):
    path = _write(tmp_path, '{"seed": 1}')
    assert load_experiment_config(path, env={}).seed == 1
    assert load_experiment_config(path, env={"SSM_SEED": "7"}).seed == 7
    assert load_experiment_config(path, seed=9, env={"SSM_SEED": "7"}).seed == 9
    with pytest.raises(ConfigError):
        load_experiment_config(path, env={"SSM_SEED": "x"})


def test_resolved_config_reloads_identically(tmp_path):
    config = load_experiment_config(str(CONFIG_DIR / "smoke.json"), env={})
    text = json.dumps(dump_config(config))
    again = load_experiment_config(_write(tmp_path, text), env={})
    assert again == config


def test_duplicate_labels_rejected(tmp_path):
    with pytest.raises(ConfigError) as err:
        load_experiment_config(_write(tmp_path, '{"au_set": [1, 2, 1]}'), env={})
    assert err.value.key == "au_set"
