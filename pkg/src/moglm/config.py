"""Flat run configuration: every tunable knob, one field per CLI flag.

Field names double as flag spellings, so the tuner ranges, the config-file
format and the command line all speak the same vocabulary.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from .cells import CELL_KINDS
from .errors import ConfigError, FormatError


@dataclass
class RunConfig:
    # model
    cell: str = "lstm"
    depth: int = 1
    hidden_size: int = 64
    input_embedding_ratio: float = 1.0
    tie_embeddings: bool = True
    mogrifier_rounds: int = 0
    mogrifier_rank: int = 0
    input_dropout: float = 0.0
    inter_layer_dropout: float = 0.0
    state_dropout: float = 0.0
    output_dropout: float = 0.0
    # optimization
    learning_rate: float = 0.002
    l2_penalty: float = 0.0
    batch_size: int = 32
    bptt_window: int = 70
    steps: int = 1000
    checkpoint_interval: int = 0  # 0: one pass-equivalent over the training shards
    patience: int = 30
    averaging_start_fraction: float = 0.8
    max_grad_norm: float = 10.0
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    # evaluation
    mc_samples: int = 200
    mc_rate_scale: float = 1.0
    temperature: float = 1.0
    eval_batch_size: int = 0  # 0: reuse batch_size
    # dynamic evaluation
    max_time_steps: int = 20
    dyneval_learning_rate: float = 0.0001
    dyneval_decay_rate: float = 0.0001
    dyneval_epsilon: float = 1e-05
    ms_batch_size: int = 1024
    # execution
    seed: int = 1
    threads: int = 0  # 0: library default; 1: fully deterministic mode
    precision: str = "32"

    def validate(self) -> "RunConfig":
        if self.cell not in CELL_KINDS:
            raise ConfigError(f"cell: unknown kind '{self.cell}' (one of {CELL_KINDS})")
        if self.depth < 1:
            raise ConfigError(f"depth: must be >= 1, got {self.depth}")
        if self.hidden_size < 1:
            raise ConfigError(f"hidden_size: must be >= 1, got {self.hidden_size}")
        if self.input_embedding_ratio < 0:
            raise ConfigError("input_embedding_ratio: must be >= 0")
        if self.mogrifier_rounds < 0:
            raise ConfigError(f"mogrifier_rounds: must be >= 0, got {self.mogrifier_rounds}")
        for name in ("input_dropout", "inter_layer_dropout", "state_dropout",
                     "output_dropout"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name}: must be in [0, 1), got {v}")
        if self.learning_rate < 0:
            raise ConfigError("learning_rate: must be >= 0")
        if self.l2_penalty < 0:
            raise ConfigError("l2_penalty: must be >= 0")
        if self.batch_size < 1 or self.bptt_window < 1:
            raise ConfigError("batch_size and bptt_window must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps: must be >= 0")
        if not 0.0 < self.averaging_start_fraction <= 1.0:
            raise ConfigError("averaging_start_fraction: must be in (0, 1]")
        if self.temperature <= 0:
            raise ConfigError(f"temperature: must be > 0, got {self.temperature}")
        if self.mc_samples < 1:
            raise ConfigError(f"mc_samples: must be >= 1, got {self.mc_samples}")
        if self.max_time_steps < 1:
            raise ConfigError("max_time_steps: must be >= 1")
        for name in ("dyneval_learning_rate", "dyneval_decay_rate", "dyneval_epsilon"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0")
        if self.precision not in ("32", "64"):
            raise ConfigError(f"precision: must be '32' or '64', got '{self.precision}'")
        return self


def config_fields() -> list[dataclasses.Field]:
    return list(dataclasses.fields(RunConfig))


def echo_config(cfg: RunConfig) -> str:
    """`key = value` lines, parseable back by parse_config_text."""
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines)


def _coerce(field: dataclasses.Field, raw: str):
    if field.type in ("bool", bool):
        low = raw.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"{field.name}: expected a boolean, got '{raw}'")
    if field.type in ("int", int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{field.name}: expected an integer, got '{raw}'") from None
    if field.type in ("float", float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{field.name}: expected a number, got '{raw}'") from None
    return raw.strip()


def parse_config_text(text: str, base: RunConfig | None = None) -> RunConfig:
    """Parse `key = value` lines (# comments allowed) on top of ``base``."""
    cfg = dataclasses.replace(base) if base is not None else RunConfig()
    by_name = {f.name: f for f in dataclasses.fields(RunConfig)}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise FormatError(f"config line {lineno}: expected 'key = value', got '{line}'")
        key, _, raw = stripped.partition("=")
        key = key.strip()
        if key not in by_name:
            raise ConfigError(f"unknown configuration field '{key}' (line {lineno})")
        setattr(cfg, key, _coerce(by_name[key], raw.strip()))
    return cfg
