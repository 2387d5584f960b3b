import json
import logging
import os
import re
from dataclasses import replace
from typing import Any, Dict, Mapping, Optional, Tuple

from marshmallow import ValidationError

from core.errors import ConfigError
from core.numerics import ENCODER_GROUP, HEAD_GROUP
from core.world import resolve_world_spec
from ontology.config import ExperimentConfig, ExperimentConfigSchema

SEED_ENV = "SSM_SEED"

RATE_PRESETS = {
    "desk": {ENCODER_GROUP: 1e-3, HEAD_GROUP: 1e-2},
    "reference": {ENCODER_GROUP: 1e-6, HEAD_GROUP: 1e-4},
}


def base_rates(config: ExperimentConfig) -> Dict[str, float]:
    """Per-group learning rates; explicit values win over the preset."""
    preset = RATE_PRESETS.get(config.rates, {})
    encoder = config.lr_encoder if config.lr_encoder is not None else preset.get(ENCODER_GROUP)
    heads = config.lr_heads if config.lr_heads is not None else preset.get(HEAD_GROUP)
    if encoder is None or heads is None:
        raise ConfigError("lr_encoder" if encoder is None else "lr_heads", None,
            f"no learning rate for rate preset '{config.rates}'")
    return {ENCODER_GROUP: float(encoder), HEAD_GROUP: float(heads)}


def resolve_config(config: ExperimentConfig) -> ExperimentConfig:
    """Materialize every default so the dumped config reproduces the run on its own."""
    rates = base_rates(config)
    world = resolve_world_spec(config.world, config.expr_set, config.au_set, config.frames, config.d_raw)
    return replace(config, lr_encoder=rates[ENCODER_GROUP], lr_heads=rates[HEAD_GROUP], world=world)


def dump_config(config: ExperimentConfig) -> Dict[str, Any]:
    return ExperimentConfigSchema().dump(config)


def _first_error(messages, path=()) -> Tuple[str, str]:
    if isinstance(messages, Mapping):
        key, inner = next(iter(messages.items()))
        if isinstance(key, int):
            return _first_error(inner, path)
        return _first_error(inner, path + (str(key),))
    if isinstance(messages, list) and messages:
        return ".".join(path), "; ".join(str(m) for m in messages if not isinstance(m, (dict, list))) or str(messages)
    return ".".join(path), str(messages)


def _line_of(text: Optional[str], key: str) -> Optional[int]:
    if not text or not key:
        return None
    leaf = key.split(".")[-1]
    match = re.search(r'"' + re.escape(leaf) + r'"\s*:', text)
    if match is None:
        return None
    return text.count("\n", 0, match.start()) + 1


def config_from_dict(data: Mapping[str, Any], text: Optional[str] = None) -> ExperimentConfig:
    try:
        config = ExperimentConfigSchema().load(dict(data))
    except ValidationError as e:
        key, message = _first_error(e.messages)
        raise ConfigError(key or None, _line_of(text, key), message) from e
    return resolve_config(config)


def load_experiment_config(path: Optional[str] = None, seed: Optional[int] = None,
    env: Optional[Mapping[str, str]] = None) -> ExperimentConfig:
    """Read, override, validate and resolve an experiment config.

    The seed comes from ``SSM_SEED`` if set, then from an explicit ``seed``.
    """
    env = os.environ if env is None else env
    text = None
    data: Dict[str, Any] = {}
    if path:
        with open(path, "r", encoding="utf-8") as f:
            text = f.read()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(None, e.lineno, f"invalid JSON: {e.msg}") from e
        if not isinstance(data, dict):
            raise ConfigError(None, 1, "top level must be a JSON object")

    if env.get(SEED_ENV):
        try:
            data["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError("seed", None, f"{SEED_ENV}={env[SEED_ENV]!r} is not an integer") from None
    if seed is not None:
        data["seed"] = int(seed)

    config = config_from_dict(data, text)
    logging.info(f"Resolved config from {path or 'defaults'}: seed {config.seed}, head {config.head}, "
                 f"dpm {config.dpm_mode}/{config.dpm_init}, rates {config.lr_encoder:g}/{config.lr_heads:g}")
    return config
