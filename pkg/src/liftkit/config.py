"""Run-config file: one JSON document with sections and strict keys.

Every field is optional and falls back to the documented default below;
unknown keys are rejected so typos fail loudly. Precedence is
flag > file > default (flag handling lives in the CLI).
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from .analysis import GridSpec
from .denoiser import ModelConfig
from .diffusion import RhoStrategy
from .errors import ConfigError, MissingFileError
from .objectives import ObjectiveSpec
from .sampler import DecodeConfig
from .trainer import TrainConfig

DEFAULT_CONFIG: dict = {
    "seed": 0,
    "corpus": {
        "task": "addition_cot",
        "count": 2000,
        "eval_count": 200,
        "tokenization": "char",
        "max_length": None,
    },
    "model": {
        "d_model": 128,
        "n_heads": 4,
        "n_layers": 4,
        "max_seq_len": 256,
        "dropout_rate": 0.0,
    },
    "train": {
        "objective": {
            "kind": "lift",
            "H": 3,
            "rho": {"kind": "uniform", "k": None},
            "cart_window": 8,
            "gift_exponent": 0.5,
        },
        "precision": "float64",
        "learning_rate": 2e-3,
        "beta1": 0.9,
        "beta2": 0.999,
        "adam_eps": 1e-8,
        "weight_decay": 0.1,
        "max_grad_norm": 1.0,
        "grad_accum_steps": 1,
        "batch_size": 32,
        "epochs": 45,
        "checkpoint_every": 500,
        "lr_schedule": "linear",
    },
    "decode": {
        "gen_len": 64,
        "steps": 32,
        "tokens_per_step": 2,
        "temperature": 0.0,
        "remask_strategy": "confidence",
    },
    "analysis": {
        "samples_per_example": 4,
        "n_time_bins": 8,
        "top_tokens_per_bin": 10,
    },
}


def _merge(defaults: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in override.items():
        here = f"{path}.{key}" if path else key
        if key not in defaults:
            raise ConfigError(f"unknown config key '{here}'")
        if isinstance(defaults[key], dict) and defaults[key]:
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{here}' must be an object")
            out[key] = _merge(defaults[key], value, here)
        else:
            out[key] = value
    return out


def load_config(path=None) -> dict:
    """Defaults merged with the JSON file at ``path`` (if given)."""
    if path is None:
        return copy.deepcopy(DEFAULT_CONFIG)
    p = Path(path)
    if not p.exists():
        raise MissingFileError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{p}: top-level config must be an object")
    return _merge(DEFAULT_CONFIG, doc)


# ---------------------------------------------------------------------------
# typed views
# ---------------------------------------------------------------------------

def objective_spec(cfg: dict) -> ObjectiveSpec:
    obj = cfg["train"]["objective"]
    rho = obj["rho"]
    k = rho.get("k")
    return ObjectiveSpec(
        kind=obj["kind"],
        H=int(obj["H"]),
        rho=RhoStrategy(kind=rho["kind"], k=None if k is None else float(k)),
        cart_window=int(obj["cart_window"]),
        gift_exponent=float(obj["gift_exponent"]),
    )


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        objective=objective_spec(cfg),
        learning_rate=float(t["learning_rate"]),
        beta1=float(t["beta1"]),
        beta2=float(t["beta2"]),
        adam_eps=float(t["adam_eps"]),
        weight_decay=float(t["weight_decay"]),
        max_grad_norm=float(t["max_grad_norm"]),
        grad_accum_steps=int(t["grad_accum_steps"]),
        batch_size=int(t["batch_size"]),
        epochs=int(t["epochs"]),
        seed=int(cfg["seed"]),
        checkpoint_every=int(t["checkpoint_every"]),
        lr_schedule=t["lr_schedule"],
    )


def model_config(cfg: dict, vocab_size: int) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        vocab_size=vocab_size,
        d_model=int(m["d_model"]),
        n_heads=int(m["n_heads"]),
        n_layers=int(m["n_layers"]),
        max_seq_len=int(m["max_seq_len"]),
        dropout_rate=float(m["dropout_rate"]),
    )


def decode_config(cfg: dict) -> DecodeConfig:
    d = cfg["decode"]
    return DecodeConfig(
        gen_len=int(d["gen_len"]),
        steps=int(d["steps"]),
        tokens_per_step=int(d["tokens_per_step"]),
        temperature=float(d["temperature"]),
        remask_strategy=d["remask_strategy"],
    )


def grid_spec(cfg: dict) -> GridSpec:
    return GridSpec(n_time_bins=int(cfg["analysis"]["n_time_bins"]))
