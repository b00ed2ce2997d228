"""Run configuration: defaults <- JSON file <- command-line overrides."""

import copy
import json
import logging
from pathlib import Path

from . import io
from .degrade import DEFAULT_RANGES
from .errors import ConfigError

log = logging.getLogger(__name__)

DEFAULTS = {
    "seed": 0,
    "data": {"train_count": 512, "test_count": 64, "size": 128, "seed": 0, "hu_lo": -135.0, "hu_hi": 215.0},
    "dose": {"blank_flux": 0.5e5, "mu_scale": 4.0},
    "degrade": {"scale": 2, "ranges": dict(DEFAULT_RANGES)},
    "text": {"instruction": "list"},
    "vae": {"iterations": 1500, "batch_size": 8, "lr": 1e-3, "kl_weight": 1e-6, "crop": 64, "widths": [32, 64]},
    "diffusion": {"timesteps": 1000, "beta_1": 1e-4, "beta_T": 0.02, "sample_steps": 50, "variance": "posterior"},
    "model": {"latent_channels": 4, "widths": [32, 64, 96], "context_dim": 64, "time_dim": 64, "heads": 4, "groups": 8, "output": "v"},
    "pretrain": {"iterations": 4000, "batch_size": 8, "lr": 2e-4, "text_dropout": 0.1, "checkpoint_every": 500},
    "finetune": {
        "iterations": 4000,
        "batch_size": 8,
        "lr": 5e-5,
        "visual_encoder": "learnable",
        "cond_init": "pretrained",
        "fusion": "zero-init",
        "checkpoint_every": 500,
    },
    "eval": {"seed": 0, "batch_size": 16},
    "ablation": {"iterations": 300, "scales": [2, 4]},
}

ENUMS = {
    ("text", "instruction"): ("none", "describe", "list"),
    ("model", "output"): ("eps", "v"),
    ("finetune", "visual_encoder"): ("frozen", "learnable"),
    ("finetune", "cond_init"): ("pretrained", "random"),
    ("finetune", "fusion"): ("zero-init", "bare"),
    ("degrade", "scale"): (2, 4),
    ("diffusion", "variance"): ("posterior", "beta"),
}


def defaults() -> dict:
    return copy.deepcopy(DEFAULTS)


def _merge(base: dict, override: dict, path: str, unknown: list) -> dict:
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            unknown.append(where)
            base[key] = copy.deepcopy(value)
        elif isinstance(base[key], dict) and isinstance(value, dict) and key != "ranges":
            _merge(base[key], value, where, unknown)
        elif key == "ranges" and isinstance(value, dict):
            for k in value:
                if k not in base[key]:
                    unknown.append(f"{where}.{k}")
            base[key] = {**base[key], **value}
        else:
            base[key] = copy.deepcopy(value)
    return base


def parse_config_text(text: str, source: str = "<config>") -> dict:
    if not text.strip():
        return {}
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}: malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{source}: top level must be an object")
    return data


def set_dotted(cfg: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        node = node.setdefault(k, {})
    node[keys[-1]] = value


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Resolve a config. ``overrides`` maps dotted keys (``"degrade.scale"``) to values.

    Unknown keys produce a warning and are kept, so newer configs still load.
    """
    cfg = defaults()
    unknown: list[str] = []
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        _merge(cfg, parse_config_text(text, str(path)), "", unknown)
    nested: dict = {}
    for dotted, value in (overrides or {}).items():
        if value is not None:
            set_dotted(nested, dotted, value)
    _merge(cfg, nested, "", unknown)
    for where in unknown:
        log.warning("unknown config key %r (ignored by this version)", where)
    validate(cfg)
    return cfg


def validate(cfg: dict) -> None:
    for (section, key), allowed in ENUMS.items():
        value = cfg[section][key]
        if value not in allowed:
            raise ConfigError(f"{section}.{key} must be one of {allowed}, got {value!r}")
    for section in ("vae", "pretrain", "finetune"):
        if int(cfg[section]["iterations"]) <= 0:
            raise ConfigError(f"{section}.iterations must be positive")
        if float(cfg[section]["lr"]) <= 0:
            raise ConfigError(f"{section}.lr must be positive")
    if float(cfg["dose"]["blank_flux"]) <= 0:
        raise ConfigError("dose.blank_flux must be positive")
    s, T = int(cfg["diffusion"]["sample_steps"]), int(cfg["diffusion"]["timesteps"])
    if not 1 <= s <= T:
        raise ConfigError(f"diffusion.sample_steps must be in 1..{T}")


def config_hash(cfg: dict) -> str:
    return io.hash_json(cfg)
