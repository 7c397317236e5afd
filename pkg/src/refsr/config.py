"""Run configuration: a commented key-value text file.

Every command writes its fully resolved configuration beside its outputs so a
run is reproducible from that artifact alone. Values may be overridden by
environment variables with the ``REFSR_`` prefix (e.g. ``REFSR_SEED=3``).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

from .model import ModelConfig
from .training import TrainConfig

ENV_PREFIX = "REFSR_"

# key -> (type, default, section)
SCHEMA: dict[str, tuple] = {
    "num_stages": (int, 3, "model"),
    "blocks_per_stage": (int, 2, "model"),
    "num_heads": (int, 2, "model"),
    "window": (int, 8, "model"),
    "lr_input_size": (int, 40, "model"),
    "ablation": (str, "full", "model"),
    "gating_level": (str, "output", "model"),
    "mlp_ratio": (int, 4, "model"),
    "fe_blocks": (int, 16, "model"),
    "dtype": (str, "float64", "model"),
    "steps": (int, 200, "training"),
    "max_lr": (float, 1e-4, "training"),
    "batch_size": (int, 4, "training"),
    "seed": (int, 0, "training"),
    "rec_weight": (float, 10.0, "training"),
    "start_div": (float, 25.0, "training"),
    "peak_frac": (float, 0.3, "training"),
    "grad_clip": (float, 1.0, "training"),
    "checkpoint_every": (int, 0, "training"),
    "manifest": (str, "", "data"),
    "out": (str, "", "data"),
}

SECTION_NOTES = {
    "model": "# model architecture",
    "training": (
        "# training (reconstruction-only; the perceptual/adversarial weights of the\n"
        "# wider setup would be 1e-4 each but are unused here)"
    ),
    "data": "# data paths",
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        merged = {k: spec[1] for k, spec in SCHEMA.items()}
        merged.update(self.values)
        self.values = merged

    def __getitem__(self, key):
        return self.values[key]

    def override(self, **kwargs) -> "RunConfig":
        vals = dict(self.values)
        for k, v in kwargs.items():
            if v is None:
                continue
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
            vals[k] = SCHEMA[k][0](v)
        return RunConfig(vals)

    def model_config(self) -> ModelConfig:
        v = self.values
        return ModelConfig(
            num_stages=v["num_stages"],
            blocks_per_stage=v["blocks_per_stage"],
            num_heads=v["num_heads"],
            window=v["window"],
            lr_input_size=v["lr_input_size"],
            ablation_mode=v["ablation"],
            gating_level=v["gating_level"],
            mlp_ratio=v["mlp_ratio"],
            fe_blocks=v["fe_blocks"],
            dtype=v["dtype"],
        ).validate()

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(
            total_steps=v["steps"],
            max_lr=v["max_lr"],
            batch_size=v["batch_size"],
            seed=v["seed"],
            rec_weight=v["rec_weight"],
            start_div=v["start_div"],
            peak_frac=v["peak_frac"],
            grad_clip=v["grad_clip"],
            checkpoint_every=v["checkpoint_every"],
        ).validate()

    def to_text(self) -> str:
        lines = ["# resolved run configuration (reproducible from this file alone)"]
        current = None
        for key, (typ, _default, section) in SCHEMA.items():
            if section != current:
                lines.append("")
                lines.append(SECTION_NOTES[section])
                current = section
            val = self.values[key]
            lines.append(f"{key} = {val!r}" if isinstance(val, float) else f"{key} = {val}")
        return "\n".join(lines) + "\n"

    def write(self, path: str):
        with open(path, "w") as f:
            f.write(self.to_text())


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        typ = SCHEMA[key][0]
        try:
            values[key] = typ(val)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: field {key!r}: cannot parse {val!r} as {typ.__name__}") from exc
    return RunConfig(values)


def apply_env_overrides(cfg: RunConfig, environ=None) -> RunConfig:
    env = os.environ if environ is None else environ
    overrides = {}
    for key, (typ, _d, _s) in SCHEMA.items():
        env_key = ENV_PREFIX + key.upper()
        if env_key in env:
            try:
                overrides[key] = typ(env[env_key])
            except ValueError as exc:
                raise ConfigError(f"environment {env_key}: cannot parse {env[env_key]!r} as {typ.__name__}") from exc
    return cfg.override(**overrides) if overrides else cfg


def load_config(path: str | None) -> RunConfig:
    if path is None:
        cfg = RunConfig({})
    else:
        try:
            with open(path) as f:
                text = f.read()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        cfg = parse_config_text(text, source=path)
    return apply_env_overrides(cfg)
