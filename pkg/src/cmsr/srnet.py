"""Supervised 8x super-resolution GAN trained on the synthesized pairs."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .nets import SrDiscriminator, SrGenerator, weights_fingerprint
from .synthnet import PairedDataset, as_batch
from .training import (
    FingerprintMismatch,
    History,
    OptimizerConfig,
    TrainingDivergence,
    batch_order,
    check_finite,
    make_adam,
)

__all__ = [
    "LOG_EPS",
    "SrLossWeights",
    "SrConfig",
    "SrResult",
    "l2_loss",
    "sr_adversarial_loss",
    "sr_discriminator_loss",
    "sr_total_loss",
    "build_sr_nets",
    "train_sr",
    "super_resolve",
]

log = logging.getLogger(__name__)

LOG_EPS = 1e-7
SR_HISTORY_COLUMNS = ["l2", "adv", "g_total", "d"]


@dataclass(frozen=True)
class SrLossWeights:
    lambda_adv: float = 0.001

    def __post_init__(self):
        if self.lambda_adv < 0:
            raise ValueError("lambda_adv must be non-negative")


@dataclass(frozen=True)
class SrConfig:
    epochs: int = 200
    minibatch: int = 64
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    weights: SrLossWeights = field(default_factory=SrLossWeights)
    gen_width: int = 64
    gen_blocks: int = 8
    disc_width: int = 32
    disc_down: int = 4
    seed: int = 0


@dataclass
class SrResult:
    g_s: nn.Module
    d_s: nn.Module
    history: History
    optimizers: dict = field(default_factory=dict, repr=False)


def l2_loss(sr, target):
    """Squared L2 norm of the pixel difference per image, averaged over the batch.

    2D inputs count as a single image.
    """
    if tuple(sr.shape) != tuple(target.shape):
        raise ValueError(f"shape mismatch: {tuple(sr.shape)} vs {tuple(target.shape)}")
    diff = sr - target
    if diff.ndim == 2:
        return (diff * diff).sum()
    per_image = (diff * diff).reshape(diff.shape[0], -1).sum(1)
    return per_image.mean()


def sr_adversarial_loss(d_outputs):
    """Mean of ``-log d`` with ``d`` clamped to ``[eps, 1 - eps]``."""
    if isinstance(d_outputs, torch.Tensor):
        return -torch.log(d_outputs.clamp(LOG_EPS, 1 - LOG_EPS)).mean()
    d = np.clip(np.asarray(d_outputs, dtype=np.float64), LOG_EPS, 1 - LOG_EPS)
    return float(-np.log(d).mean())


def sr_discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy with real micro-CT labelled 1 and SR output 0."""
    real = d_real.clamp(LOG_EPS, 1 - LOG_EPS)
    fake = d_fake.clamp(LOG_EPS, 1 - LOG_EPS)
    return -(torch.log(real).mean() + torch.log(1 - fake).mean())


def sr_total_loss(l2, adv, w: SrLossWeights):
    check_finite("l2", l2)
    check_finite("adv", adv)
    return l2 + w.lambda_adv * adv


def build_sr_nets(cfg: SrConfig):
    return SrGenerator(cfg.gen_width, cfg.gen_blocks), SrDiscriminator(cfg.disc_width, cfg.disc_down)


def train_sr(dataset: PairedDataset, g1_frozen: nn.Module, config: SrConfig) -> SrResult:
    """Fit G_S to map the synthetic low-res patches onto their micro-CT partners.

    ``g1_frozen`` is only checked against the dataset's fingerprint; it is
    never handed to an optimizer and its weights do not change.
    """
    if not len(dataset):
        raise ValueError("paired dataset is empty")
    fp = weights_fingerprint(g1_frozen)
    if fp != dataset.generator_fingerprint:
        raise FingerprintMismatch(
            "dataset was built by a different G1 "
            f"(dataset {dataset.generator_fingerprint[:12]}, given {fp[:12]})"
        )
    g1_frozen.eval()
    for p in g1_frozen.parameters():
        p.requires_grad_(False)

    lr_all = as_batch(dataset.lr)
    hr_all = as_batch(dataset.hr)
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        g_s, d_s = build_sr_nets(config)
    gen = torch.Generator().manual_seed(config.seed + 1)
    opt_g = make_adam(g_s.parameters(), config.optimizer)
    opt_d = make_adam(d_s.parameters(), config.optimizer)
    history = History(list(SR_HISTORY_COLUMNS))

    for epoch in range(1, config.epochs + 1):
        g_s.train()
        d_s.train()
        sums = dict.fromkeys(SR_HISTORY_COLUMNS, 0.0)
        batches = batch_order(len(lr_all), config.minibatch, gen)
        for idx in batches:
            lr, hr = lr_all[idx], hr_all[idx]

            opt_g.zero_grad(set_to_none=True)
            sr = g_s(lr)
            l2 = l2_loss(sr, hr)
            adv = sr_adversarial_loss(d_s(sr))
            try:
                g_total = sr_total_loss(l2, adv, config.weights)
            except TrainingDivergence as exc:
                raise TrainingDivergence(exc.term, exc.value, epoch) from None
            g_total.backward()
            opt_g.step()

            opt_d.zero_grad(set_to_none=True)
            loss_d = sr_discriminator_loss(d_s(hr), d_s(sr.detach()))
            check_finite("d", loss_d, epoch)
            loss_d.backward()
            opt_d.step()

            for name, value in (("l2", l2), ("adv", adv), ("g_total", g_total), ("d", loss_d)):
                sums[name] += float(value.detach())
        history.add_epoch(epoch, sums, len(batches))
        log.info("sr epoch %d: g_total=%.4f", epoch, history.rows[-1]["g_total"])

    g_s.eval()
    d_s.eval()
    return SrResult(g_s, d_s, history, {"generator": opt_g, "discriminator": opt_d})


@torch.no_grad()
def super_resolve(g_s: nn.Module, lr_image, tol: float = 1e-6) -> np.ndarray:
    """Enlarge one normalized, square low-res image (or a stack of them) 8x."""
    arr = lr_image.detach().cpu().numpy() if isinstance(lr_image, torch.Tensor) else np.asarray(lr_image)
    if arr.ndim not in (2, 3) or arr.shape[-1] != arr.shape[-2]:
        raise ValueError(f"super_resolve needs square images, got shape {arr.shape}")
    if arr.size and (arr.min() < -1 - tol or arr.max() > 1 + tol):
        raise ValueError("super_resolve needs normalized input in [-1, 1]")
    was_training = g_s.training
    g_s.eval()
    try:
        out = g_s(as_batch(arr.astype(np.float32)))
    finally:
        g_s.train(was_training)
    out = out[:, 0].numpy()
    return out[0] if arr.ndim == 2 else out
