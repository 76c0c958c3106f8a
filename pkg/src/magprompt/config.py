"""Flat run configuration: dataclass defaults < JSON file < CLI overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path


@dataclass
class RunConfig:
    # data: either a dataset directory or an on-the-fly block-model graph
    dataset: str | None = None
    blocks: int = 2
    per_block: int = 50
    p_in: float = 0.5
    p_out: float = 0.05
    noise: float = 1.0
    data_seed: int = 7

    # backbone
    arch: str = "GCN"
    num_layers: int = 2
    hidden: int = 128
    checkpoint: str | None = None
    pretrain_epochs: int = 100
    neg_ratio: float = 1.0

    # prompting
    variant: str = "MAG_PLUS"
    gate_residual: float = 0.5     # lower bound of the message gate
    gate_dim: int = 16
    num_prompts: int = 10
    pc_weight: float = 0.0         # collapse-regularizer strength
    pc_eps: float = 1e-8
    slope: float = 0.2
    pin_prompts: bool = False      # gates only; no additive prompt trains

    # optimization / protocol
    k_shots: int = 5
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 32
    weight_decay: float = 0.0
    patience: int = 50
    model_selection: str = "best_val"
    readout: str = "mean"
    output_dir: str = "runs"

    def validate(self) -> None:
        from .backbone import ARCHS
        from .prompt import VARIANTS

        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        if self.variant not in VARIANTS + ("LINEAR_PROBE", "FINE_TUNE"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.pc_weight != 0.0 and self.variant != "MAG_PLUS":
            raise ValueError(
                f"collapse regularizer (pc_weight={self.pc_weight}) only applies "
                f"to MAG_PLUS, not {self.variant}")
        if not (0.0 <= self.gate_residual <= 1.0):
            raise ValueError(f"gate_residual must lie in [0, 1], got {self.gate_residual}")
        if self.pc_weight < 0:
            raise ValueError(f"pc_weight must be >= 0, got {self.pc_weight}")
        if self.pc_eps <= 0:
            raise ValueError(f"pc_eps must be > 0, got {self.pc_eps}")
        if self.slope < 0:
            raise ValueError(f"slope must be >= 0, got {self.slope}")
        for name in ("num_layers", "hidden", "gate_dim", "num_prompts", "k_shots",
                     "epochs", "batch_size", "pretrain_epochs", "blocks", "per_block"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.neg_ratio <= 0:
            raise ValueError(f"neg_ratio must be > 0, got {self.neg_ratio}")
        if self.patience < 0:
            raise ValueError(f"patience must be >= 0, got {self.patience}")
        if self.weight_decay < 0:
            raise ValueError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")
        if not (0.0 <= self.p_out <= self.p_in <= 1.0):
            raise ValueError(f"need 0 <= p_out <= p_in <= 1, got "
                             f"p_in={self.p_in}, p_out={self.p_out}")
        if self.readout not in ("mean", "sum"):
            raise ValueError(f"readout must be mean or sum, got {self.readout!r}")
        if self.model_selection not in ("best_val", "last"):
            raise ValueError(f"model_selection must be best_val or last, "
                             f"got {self.model_selection!r}")
        if not self.seeds:
            raise ValueError("seeds list is empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ValueError(f"duplicate seeds in {self.seeds}")

    def dims_for(self, feature_dim: int) -> list:
        return [int(feature_dim)] + [self.hidden] * self.num_layers

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n")


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, value):
    """Parse a string override into the field's declared type."""
    if name not in _FIELDS:
        raise ValueError(f"unknown config key {name!r}")
    default = RunConfig()
    current = getattr(default, name)
    if isinstance(value, str):
        if name == "seeds":
            return [int(v) for v in value.split(",") if v != ""]
        if isinstance(current, bool) or name == "pin_prompts":
            if value.lower() in ("true", "1", "yes"):
                return True
            if value.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"{name} expects a boolean, got {value!r}")
        if isinstance(current, int) and not isinstance(current, bool):
            return int(value)
        if isinstance(current, float):
            return float(value)
        return value
    return value


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Precedence: override flags beat the file, the file beats defaults."""
    values: dict = {}
    if path is not None:
        raw = json.loads(Path(path).read_text())
        if not isinstance(raw, dict):
            raise ValueError(f"{path}: config must be a flat JSON object")
        for key, val in raw.items():
            values[key] = _coerce(key, val)
    for key, val in (overrides or {}).items():
        values[key] = _coerce(key, val)
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg
