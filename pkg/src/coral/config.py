"""Flat key = value run configuration with command-line overrides.

Unknown keys are rejected; the effective configuration is echoed into every
run directory so any run can be reproduced from its own config file.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from pathlib import Path


@dataclass
class RunConfig:
    seed: int = 0
    # corpus
    vocab_size: int = 4000
    max_context_turns: int = 4
    max_context_len: int = 64
    max_response_len: int = 16
    # seq2seq
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 128
    dropout: float = 0.0
    # scorer
    esim_embed_dim: int = 64
    esim_hidden_dim: int = 64
    esim_mlp_hidden_1: int = 128
    esim_mlp_hidden_2: int = 64
    esim_lr: float = 1e-3
    esim_negatives: int = 1
    esim_epochs: int = 10
    esim_patience: int = 3
    esim_batch_size: int = 16
    # objective
    loss: str = "coral"
    p_plus: float = 0.8
    margin: float = 0.4
    mode: str = "nucleus"
    top_p: float = 0.9
    both_terms: bool = False
    # optimization
    batch_size: int = 16
    epochs: int = 50
    patience: int = 5
    peak_lr: float = 1e-4
    warmup_steps: int = 1000
    clip_norm: float = 1.0
    # decoding
    decode: str = "greedy"

    def write(self, path) -> None:
        lines = [f"{f.name} = {_format_value(getattr(self, f.name))}" for f in fields(self)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _parse_value(key: str, raw: str):
    kind = _FIELD_TYPES[key]
    raw = raw.strip()
    if kind == "bool":
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {key}: expected a boolean, got {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the config file, then explicit overrides."""
    cfg = RunConfig()
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in line.split("=", 1))
            if key not in _FIELD_TYPES:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            setattr(cfg, key, _parse_value(key, raw))
    for key, value in (overrides or {}).items():
        if key not in _FIELD_TYPES:
            raise ValueError(f"unknown config key {key!r}")
        if value is not None:
            setattr(cfg, key, _parse_value(key, str(value)) if isinstance(value, str) else value)
    return cfg
