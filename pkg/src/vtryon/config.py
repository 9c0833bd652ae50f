"""Default configuration and the plain-text config file loader.

Config files are ``section.key = value`` lines; values are parsed as int,
float, bool or comma-separated lists thereof.  Unknown keys are rejected so
typos fail loudly.
"""

from __future__ import annotations

import copy


class ConfigError(ValueError):
    pass


def default_config() -> dict:
    return {
        "track": {"window_n": 3, "mu": 0.1, "epsilon": 0.05},
        "warp": {
            "lambda_sdc": 0.04,
            "lambda_sec": 20.0,
            "charbonnier_alpha": 0.45,
            "charbonnier_eps": 1e-3,
            "tps_grid": 5,
            "tps_steps": 120,
            "tps_lr": 0.5,
            "flow_steps": 80,
            "flow_lr": 0.2,
            "flow_scales": 3,
        },
        "tryon": {"lambda1": 1.0, "lambda2": 10.0, "lambda3": 1.0, "lambda4": 0.01},
        "adam": {"lr": 2e-4, "beta1": 0.5, "beta2": 0.999},
        "generator": {"channels": 256, "blocks": 8, "heads": 4,
                      "patch_sizes": [8, 4, 2, 1]},
        "generator_tiny": {"channels": 96, "blocks": 6},
        # desk-scale runtime profile used by the pipeline and train-toy
        "toy": {"channels": 16, "blocks": 2, "heads": 2, "patch_sizes": [2, 1],
                "train_lr": 2e-3, "train_steps": 500},
        "agnostic": {"dilation_radius": 5, "fill_value": 0.5},
        "scene": {"T": 8, "H": 64, "W": 48},
    }


def flatten(cfg: dict) -> dict:
    flat = {}
    for section, entries in cfg.items():
        for key, val in entries.items():
            flat[f"{section}.{key}"] = val
    return flat


def _parse_value(text: str):
    text = text.strip()
    if "," in text:
        return [_parse_value(v) for v in text.split(",") if v.strip()]
    for caster in (int, float):
        try:
            return caster(text)
        except ValueError:
            pass
    if text.lower() in ("true", "false"):
        return text.lower() == "true"
    return text


def load_config(path, base: dict | None = None) -> dict:
    cfg = copy.deepcopy(base if base is not None else default_config())
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, _, val = line.partition("=")
            key = key.strip()
            if "." not in key:
                raise ConfigError(f"{path}:{lineno}: key must be section.name")
            section, name = key.split(".", 1)
            if section not in cfg or name not in cfg[section]:
                raise ConfigError(f"{path}:{lineno}: unknown key {key}")
            cfg[section][name] = _parse_value(val)
    return cfg
