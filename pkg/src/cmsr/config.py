"""Experiment configuration: a YAML file mapped onto frozen dataclasses.

Every key has a default; the defaults are the published experimental settings
(32/256 px patches, 2000 patches per case, C1=0.02, C2=0.06, lambda1=0.5,
lambda2=0.4, lambda=0.001, 200 epochs, minibatch 64, 8x pyramid). Unknown keys
are rejected with the dotted path of the offending key.

Schema (all sections optional)::

    seed: 0
    data:
      source: phantom            # phantom | files
      phantom: {n_train: 8, n_test: 2, hr_dims: [64, 64, 64], structure_scale: 6.0,
                gap: {blur_sigma: 0.6, contrast_gamma: -0.5, noise_sigma: 40.0, intensity_shift: 120.0}}
      clinical_train: [paths]    # used when source == files
      micro_train: [paths]
      micro_test: [paths]
      clinical_infer: [paths]
    preprocess:
      clinical_range: [-1000, 400]   # null -> per-volume min/max
      micro_range: [-1000, 400]
      air_threshold: -400
      clinical_domain: lung          # lung | slab | volume
      micro_domain: volume
    patch: {lr_size: 32, hr_size: 256, count_per_case: 2000, test_count_per_case: null, axis: 0}
    pyramid: {factor: 8, kernel_sigma: 1.0, kernel_size: 5}
    ssim: {c1: 0.02, c2: 0.06, window: global, window_size: 8, stride: 4}
    synth: {epochs: 200, minibatch: 64, lr: 2.0e-4, beta1: 0.5, beta2: 0.999,
            lambda1: 0.5, lambda2: 0.4, lambda_cyc: 10.0,
            gen_width: 32, gen_blocks: 6, disc_width: 32, disc_down: 4}
    sr: {epochs: 200, minibatch: 64, lr: 2.0e-4, beta1: 0.5, beta2: 0.999, lambda_adv: 0.001,
         gen_width: 64, gen_blocks: 8, disc_width: 32, disc_down: 4}
    infer: {slice_index: null}       # null -> middle slice
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .imaging import PyramidSpec, SsimParams
from .phantom import ModalityGap
from .srnet import SrConfig, SrLossWeights
from .synthnet import SynthConfig, SynthLossWeights
from .training import OptimizerConfig
from .volumeio import PatchSpec

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "load_config",
    "config_from_dict",
    "config_to_dict",
    "config_hash",
    "derive_seed",
]

_DOMAINS = ("lung", "slab", "volume")


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"config key {key!r}: {message}")


@dataclass(frozen=True)
class PhantomDataConfig:
    n_train: int = 8
    n_test: int = 2
    hr_dims: tuple[int, int, int] = (64, 64, 64)
    structure_scale: float = 6.0
    gap: ModalityGap = field(default_factory=ModalityGap)


@dataclass(frozen=True)
class DataConfig:
    source: str = "phantom"
    phantom: PhantomDataConfig = field(default_factory=PhantomDataConfig)
    clinical_train: tuple[str, ...] = ()
    micro_train: tuple[str, ...] = ()
    micro_test: tuple[str, ...] = ()
    clinical_infer: tuple[str, ...] = ()


@dataclass(frozen=True)
class PreprocessConfig:
    clinical_range: tuple[float, float] | None = (-1000.0, 400.0)
    micro_range: tuple[float, float] | None = (-1000.0, 400.0)
    air_threshold: float = -400.0
    clinical_domain: str = "lung"
    micro_domain: str = "volume"


@dataclass(frozen=True)
class PatchConfig:
    lr_size: int = 32
    hr_size: int = 256
    count_per_case: int = 2000
    test_count_per_case: int | None = None
    axis: int = 0


@dataclass(frozen=True)
class SynthSection:
    epochs: int = 200
    minibatch: int = 64
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda1: float = 0.5
    lambda2: float = 0.4
    lambda_cyc: float = 10.0
    gen_width: int = 32
    gen_blocks: int = 6
    disc_width: int = 32
    disc_down: int = 4


@dataclass(frozen=True)
class SrSection:
    epochs: int = 200
    minibatch: int = 64
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    lambda_adv: float = 0.001
    gen_width: int = 64
    gen_blocks: int = 8
    disc_width: int = 32
    disc_down: int = 4


@dataclass(frozen=True)
class InferConfig:
    slice_index: int | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    patch: PatchConfig = field(default_factory=PatchConfig)
    pyramid: PyramidSpec = field(default_factory=PyramidSpec)
    ssim: SsimParams = field(default_factory=SsimParams)
    synth: SynthSection = field(default_factory=SynthSection)
    sr: SrSection = field(default_factory=SrSection)
    infer: InferConfig = field(default_factory=InferConfig)

    def synth_config(self) -> SynthConfig:
        s = self.synth
        return SynthConfig(
            epochs=s.epochs,
            minibatch=s.minibatch,
            optimizer=OptimizerConfig(s.lr, s.beta1, s.beta2),
            weights=SynthLossWeights(s.lambda1, s.lambda2, s.lambda_cyc),
            ssim=self.ssim,
            gen_width=s.gen_width,
            gen_blocks=s.gen_blocks,
            disc_width=s.disc_width,
            disc_down=s.disc_down,
            seed=derive_seed(self.seed, "train-synth"),
        )

    def sr_config(self) -> SrConfig:
        s = self.sr
        return SrConfig(
            epochs=s.epochs,
            minibatch=s.minibatch,
            optimizer=OptimizerConfig(s.lr, s.beta1, s.beta2),
            weights=SrLossWeights(s.lambda_adv),
            gen_width=s.gen_width,
            gen_blocks=s.gen_blocks,
            disc_width=s.disc_width,
            disc_down=s.disc_down,
            seed=derive_seed(self.seed, "train-sr"),
        )


def derive_seed(master: int, *labels) -> int:
    """Stable 31-bit seed for a named sub-task of an experiment."""
    words = [int(master)] + [int.from_bytes(hashlib.sha256(str(l).encode()).digest()[:4], "little") for l in labels]
    return int(np.random.SeedSequence(words).generate_state(1)[0] & 0x7FFFFFFF)


def _coerce(value, hint, key: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, f"{key}.")
    if origin is typing.Union or type(hint).__name__ == "UnionType":
        if value is None:
            if type(None) in args:
                return None
            raise ConfigError(key, "may not be null")
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], key)
    if origin is tuple:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(key, f"expected a list, got {value!r}")
        elem = args[0] if args else object
        if len(args) > 1 and args[-1] is not Ellipsis and len(value) != len(args):
            raise ConfigError(key, f"expected {len(args)} entries, got {len(value)}")
        return tuple(_coerce(v, elem, key) for v in value)
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(key, f"expected a string, got {value!r}")
        return value
    return value


def _build(cls, mapping, prefix: str = ""):
    if mapping is None:
        mapping = {}
    if not isinstance(mapping, dict):
        raise ConfigError(prefix or "<root>", f"expected a mapping, got {mapping!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in mapping:
        if key not in names:
            raise ConfigError(f"{prefix}{key}", "unknown key")
    kwargs = {k: _coerce(v, hints[k], f"{prefix}{k}") for k, v in mapping.items()}
    try:
        return cls(**kwargs)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(prefix.rstrip(".") or "<root>", str(exc)) from exc


def _validate(cfg: ExperimentConfig) -> None:
    if cfg.data.source not in ("phantom", "files"):
        raise ConfigError("data.source", "must be 'phantom' or 'files'")
    for key in ("clinical_domain", "micro_domain"):
        if getattr(cfg.preprocess, key) not in _DOMAINS:
            raise ConfigError(f"preprocess.{key}", f"must be one of {_DOMAINS}")
    for key in ("clinical_range", "micro_range"):
        r = getattr(cfg.preprocess, key)
        if r is not None and not r[1] > r[0]:
            raise ConfigError(f"preprocess.{key}", "zero or negative dynamic range")
    p = cfg.patch
    if p.hr_size != cfg.pyramid.factor * p.lr_size:
        raise ConfigError("patch.hr_size", f"must equal pyramid.factor x patch.lr_size ({cfg.pyramid.factor * p.lr_size})")
    if cfg.pyramid.factor != 8:
        raise ConfigError("pyramid.factor", "the SR generator is fixed at 8x")
    for section in ("synth", "sr"):
        s = getattr(cfg, section)
        if s.epochs < 0:
            raise ConfigError(f"{section}.epochs", "must be >= 0")
        if s.minibatch < 1:
            raise ConfigError(f"{section}.minibatch", "must be >= 1")
        if s.lr <= 0:
            raise ConfigError(f"{section}.lr", "must be positive")
    ph = cfg.data.phantom
    if cfg.data.source == "phantom" and (ph.n_train < 1 or ph.n_test < 1):
        raise ConfigError("data.phantom", "n_train and n_test must be >= 1")
    if cfg.data.source == "files":
        for key in ("clinical_train", "micro_train", "micro_test"):
            if not getattr(cfg.data, key):
                raise ConfigError(f"data.{key}", "at least one volume path is required")
        if set(cfg.data.micro_train) & set(cfg.data.micro_test):
            raise ConfigError("data.micro_test", "test volumes overlap the training volumes")
    try:
        PatchSpec(p.lr_size, p.hr_size, p.count_per_case, 0, p.axis)
    except ValueError as exc:
        raise ConfigError("patch", str(exc)) from exc


def config_from_dict(d: dict | None) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, d or {})
    _validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError("<file>", f"config file not found: {path}")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError("<file>", f"not valid YAML: {exc}") from exc
    return config_from_dict(raw)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    def plain(v):
        if isinstance(v, tuple):
            return [plain(x) for x in v]
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        return v

    return plain(dataclasses.asdict(cfg))


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()
