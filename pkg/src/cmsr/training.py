"""Bits shared by both training loops: divergence checks, histories, checkpoints."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import torch
from torch import nn

__all__ = [
    "TrainingDivergence",
    "FingerprintMismatch",
    "OptimizerConfig",
    "History",
    "check_finite",
    "make_adam",
    "batch_order",
    "save_checkpoint",
    "load_checkpoint",
]


class TrainingDivergence(RuntimeError):
    """A loss term went non-finite; ``term`` names it."""

    def __init__(self, term: str, value=None, epoch: int | None = None):
        self.term = term
        self.value = value
        self.epoch = epoch
        where = "" if epoch is None else f" at epoch {epoch}"
        super().__init__(f"training diverged{where}: loss term {term!r} is {value}")


class FingerprintMismatch(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999


def check_finite(term: str, value, epoch: int | None = None):
    v = float(value.detach()) if isinstance(value, torch.Tensor) else float(value)
    if not math.isfinite(v):
        raise TrainingDivergence(term, v, epoch)
    return value


def make_adam(params, cfg: OptimizerConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))


def batch_order(n: int, minibatch: int, gen: torch.Generator) -> list[torch.Tensor]:
    perm = torch.randperm(n, generator=gen)
    return [perm[k:k + minibatch] for k in range(0, n, minibatch)]


@dataclass
class History:
    """Per-epoch means of every loss component."""

    columns: list[str]
    rows: list[dict[str, float]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def add_epoch(self, epoch: int, sums: dict[str, float], steps: int) -> None:
        row = {"epoch": epoch}
        row.update({k: sums[k] / steps for k in self.columns})
        self.rows.append(row)

    def column(self, name: str) -> list[float]:
        return [r[name] for r in self.rows]

    def all_finite(self) -> bool:
        return all(math.isfinite(r[c]) for r in self.rows for c in self.columns)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["epoch", *self.columns])
            writer.writeheader()
            for r in self.rows:
                writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})

    @classmethod
    def from_csv(cls, path) -> "History":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            columns = [c for c in reader.fieldnames or [] if c != "epoch"]
            rows = [{"epoch": int(r["epoch"]), **{c: float(r[c]) for c in columns}} for r in reader]
        return cls(columns, rows)


def save_checkpoint(path, models: dict[str, nn.Module], config: dict, config_hash: str, rng_state=None) -> None:
    """Write weights, the config that produced them and the RNG state."""
    payload = {
        "format": "cmsr-checkpoint/1",
        "config": config,
        "config_hash": config_hash,
        "state_dicts": {k: m.state_dict() for k, m in models.items()},
        "rng_state": torch.get_rng_state() if rng_state is None else rng_state,
    }
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def load_checkpoint(path) -> dict:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != "cmsr-checkpoint/1":
        raise ValueError(f"{path} is not a cmsr checkpoint")
    return payload
