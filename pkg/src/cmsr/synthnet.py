"""Modality translation: a CycleGAN with SSIM structure terms.

``G1`` maps downsampled micro-CT patches f(x) to clinical-CT-like patches,
``G2`` maps clinical patches back. ``D1``/``D2`` judge clinical-likeness and
downsampled-micro-CT-likeness. Once trained, ``G1`` turns micro-CT patches into
the synthetic low-resolution halves of the paired dataset.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .imaging import PyramidSpec, SsimParams, gaussian_downsample, ssim_loss
from .nets import PatchDiscriminator, TranslationGenerator, weights_fingerprint
from .training import History, OptimizerConfig, TrainingDivergence, batch_order, check_finite, make_adam
from .volumeio import PatchSet

__all__ = [
    "SynthLossWeights",
    "SynthConfig",
    "CycleLossComponents",
    "SsimTerms",
    "SynthResult",
    "PairedDataset",
    "as_batch",
    "cyclegan_core_loss",
    "cyclegan_discriminator_loss",
    "ssim_terms",
    "synth_total_loss",
    "build_translation_nets",
    "train_synthesize",
    "build_synthetic_dataset",
]

log = logging.getLogger(__name__)

SYNTH_HISTORY_COLUMNS = ["adv_g1", "adv_g2", "cycle_x", "cycle_y", "ssim_x", "ssim_y", "g_total", "d1", "d2"]


@dataclass(frozen=True)
class SynthLossWeights:
    lambda1: float = 0.5
    lambda2: float = 0.4
    lambda_cyc: float = 10.0

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda_cyc) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class SynthConfig:
    epochs: int = 200
    minibatch: int = 64
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    weights: SynthLossWeights = field(default_factory=SynthLossWeights)
    ssim: SsimParams = field(default_factory=SsimParams)
    gen_width: int = 32
    gen_blocks: int = 6
    disc_width: int = 32
    disc_down: int = 4
    seed: int = 0


@dataclass
class CycleLossComponents:
    """Generator-side terms of the plain CycleGAN objective.

    Works with tensors (training) or plain floats (hand checks). The
    translated batches are kept so the SSIM terms can reuse them.
    """

    adv_g1: torch.Tensor | float
    adv_g2: torch.Tensor | float
    cycle_x: torch.Tensor | float
    cycle_y: torch.Tensor | float
    lambda_cyc: float = 10.0
    fake_y: torch.Tensor | None = field(default=None, repr=False)
    fake_x: torch.Tensor | None = field(default=None, repr=False)

    @property
    def adversarial(self):
        return self.adv_g1 + self.adv_g2

    @property
    def cycle(self):
        return self.lambda_cyc * (self.cycle_x + self.cycle_y)

    @property
    def total(self):
        return self.adversarial + self.cycle

    def named_terms(self) -> dict:
        return {"adv_g1": self.adv_g1, "adv_g2": self.adv_g2, "cycle_x": self.cycle_x, "cycle_y": self.cycle_y}


@dataclass
class SsimTerms:
    """``x``: L_S(f(x), G1(f(x))); ``y``: L_S(y, G2(y))."""

    x: torch.Tensor | float
    y: torch.Tensor | float


def as_batch(images, dtype=torch.float32) -> torch.Tensor:
    """Coerce a patch set, array or tensor into ``(N, 1, H, W)``."""
    if isinstance(images, PatchSet):
        images = images.data
    t = images if isinstance(images, torch.Tensor) else torch.from_numpy(np.asarray(images))
    if t.ndim == 2:
        t = t[None, None]
    elif t.ndim == 3:
        t = t[:, None]
    if t.ndim != 4 or t.shape[1] != 1:
        raise ValueError(f"expected single-channel images, got shape {tuple(t.shape)}")
    return t.to(dtype)


def cyclegan_core_loss(g1, g2, d1, d2, batch_x_lr, batch_y, lambda_cyc: float = 10.0) -> CycleLossComponents:
    """Least-squares adversarial terms plus L1 cycle consistency."""
    x = batch_x_lr
    y = batch_y
    if x.ndim != 4 or y.ndim != 4 or x.shape[1:] != y.shape[1:]:
        raise ValueError(f"shape mismatch between domains: {tuple(x.shape)} vs {tuple(y.shape)}")
    if not len(x) or not len(y):
        raise ValueError("empty batch")
    fake_y = g1(x)
    fake_x = g2(y)
    return CycleLossComponents(
        adv_g1=((d1(fake_y) - 1) ** 2).mean(),
        adv_g2=((d2(fake_x) - 1) ** 2).mean(),
        cycle_x=(g2(fake_y) - x).abs().mean(),
        cycle_y=(g1(fake_x) - y).abs().mean(),
        lambda_cyc=lambda_cyc,
        fake_y=fake_y,
        fake_x=fake_x,
    )


def cyclegan_discriminator_loss(d, real, fake) -> torch.Tensor:
    return 0.5 * (((d(real) - 1) ** 2).mean() + (d(fake) ** 2).mean())


def ssim_terms(batch_x_lr, batch_y, fake_y, fake_x, params: SsimParams) -> SsimTerms:
    return SsimTerms(x=ssim_loss(batch_x_lr, fake_y, params), y=ssim_loss(batch_y, fake_x, params))


def synth_total_loss(components: CycleLossComponents, terms: SsimTerms, w: SynthLossWeights):
    """L_O + lambda1 * L_S(f(x), G1(f(x))) + lambda2 * L_S(y, G2(y))."""
    for name, value in {**components.named_terms(), "ssim_x": terms.x, "ssim_y": terms.y}.items():
        check_finite(name, value)
    return components.total + w.lambda1 * terms.x + w.lambda2 * terms.y


def build_translation_nets(cfg: SynthConfig):
    g1 = TranslationGenerator(cfg.gen_width, cfg.gen_blocks)
    g2 = TranslationGenerator(cfg.gen_width, cfg.gen_blocks)
    d1 = PatchDiscriminator(cfg.disc_width, cfg.disc_down)
    d2 = PatchDiscriminator(cfg.disc_width, cfg.disc_down)
    return g1, g2, d1, d2


@dataclass
class SynthResult:
    g1: nn.Module
    g2: nn.Module
    d1: nn.Module
    d2: nn.Module
    history: History
    optimizers: dict = field(default_factory=dict, repr=False)


def train_synthesize(micro_patches, clinical_patches, config: SynthConfig, pyramid: PyramidSpec = PyramidSpec()) -> SynthResult:
    """Alternate generator and discriminator updates for ``config.epochs``.

    Micro-CT patches arrive at full resolution and are reduced by the pyramid
    once up front. An epoch is one pass over the micro-CT pool; clinical
    batches are drawn with replacement from a seed-derived stream.
    """
    x_hr = as_batch(micro_patches)
    y_all = as_batch(clinical_patches)
    if not len(x_hr) or not len(y_all):
        raise ValueError("both patch pools must be nonempty")
    x_all = gaussian_downsample(x_hr, pyramid)
    if x_all.shape[1:] != y_all.shape[1:]:
        raise ValueError(
            f"shape mismatch between domains: f(x) is {tuple(x_all.shape[2:])}, clinical is {tuple(y_all.shape[2:])}"
        )

    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        g1, g2, d1, d2 = build_translation_nets(config)
    gen = torch.Generator().manual_seed(config.seed + 1)
    opt_g = make_adam(list(g1.parameters()) + list(g2.parameters()), config.optimizer)
    opt_d = make_adam(list(d1.parameters()) + list(d2.parameters()), config.optimizer)
    history = History(list(SYNTH_HISTORY_COLUMNS))
    w = config.weights

    for epoch in range(1, config.epochs + 1):
        for m in (g1, g2, d1, d2):
            m.train()
        sums = dict.fromkeys(SYNTH_HISTORY_COLUMNS, 0.0)
        batches = batch_order(len(x_all), config.minibatch, gen)
        for idx in batches:
            x = x_all[idx]
            y = y_all[torch.randint(len(y_all), (len(idx),), generator=gen)]

            opt_g.zero_grad(set_to_none=True)
            comps = cyclegan_core_loss(g1, g2, d1, d2, x, y, w.lambda_cyc)
            terms = ssim_terms(x, y, comps.fake_y, comps.fake_x, config.ssim)
            try:
                g_total = synth_total_loss(comps, terms, w)
            except TrainingDivergence as exc:
                raise TrainingDivergence(exc.term, exc.value, epoch) from None
            check_finite("g_total", g_total, epoch)
            g_total.backward()
            opt_g.step()

            opt_d.zero_grad(set_to_none=True)
            loss_d1 = cyclegan_discriminator_loss(d1, y, comps.fake_y.detach())
            loss_d2 = cyclegan_discriminator_loss(d2, x, comps.fake_x.detach())
            check_finite("d1", loss_d1, epoch)
            check_finite("d2", loss_d2, epoch)
            (loss_d1 + loss_d2).backward()
            opt_d.step()

            for name, value in {
                **comps.named_terms(),
                "ssim_x": terms.x,
                "ssim_y": terms.y,
                "g_total": g_total,
                "d1": loss_d1,
                "d2": loss_d2,
            }.items():
                sums[name] += float(value.detach())
        history.add_epoch(epoch, sums, len(batches))
        log.info("synth epoch %d: g_total=%.4f", epoch, history.rows[-1]["g_total"])

    for m in (g1, g2, d1, d2):
        m.eval()
    return SynthResult(g1, g2, d1, d2, history, {"generators": opt_g, "discriminators": opt_d})


@dataclass
class PairedDataset:
    """Aligned (micro-CT patch x, synthetic clinical patch G1(f(x))) pairs."""

    hr: np.ndarray
    lr: np.ndarray
    generator_fingerprint: str
    source_volume_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.hr) != len(self.lr):
            raise ValueError("hr and lr must hold the same number of patches")
        if len(self.hr) and self.hr.shape[1:] != tuple(8 * s for s in self.lr.shape[1:]):
            raise ValueError(f"hr dims must be 8x lr dims, got {self.hr.shape[1:]} vs {self.lr.shape[1:]}")

    def __len__(self) -> int:
        return len(self.hr)

    def save(self, path) -> None:
        np.savez(
            Path(path),
            hr=self.hr,
            lr=self.lr,
            generator_fingerprint=np.array(self.generator_fingerprint),
            source_volume_ids=np.array(self.source_volume_ids, dtype=str),
        )

    @classmethod
    def load(cls, path) -> "PairedDataset":
        with np.load(Path(path)) as z:
            return cls(
                hr=z["hr"],
                lr=z["lr"],
                generator_fingerprint=str(z["generator_fingerprint"]),
                source_volume_ids=[str(s) for s in z["source_volume_ids"]],
            )


@torch.no_grad()
def build_synthetic_dataset(g1: nn.Module, micro_patches, pyramid: PyramidSpec = PyramidSpec(), chunk: int = 64) -> PairedDataset:
    """Pair each micro-CT patch x with G1(f(x))."""
    ids = list(micro_patches.source_volume_ids) if isinstance(micro_patches, PatchSet) else []
    x = as_batch(micro_patches)
    was_training = g1.training
    g1.eval()
    try:
        lr = torch.cat([g1(gaussian_downsample(x[k:k + chunk], pyramid)) for k in range(0, len(x), chunk)])
    finally:
        g1.train(was_training)
    return PairedDataset(
        hr=x[:, 0].numpy().astype(np.float32),
        lr=lr[:, 0].numpy().astype(np.float32),
        generator_fingerprint=weights_fingerprint(g1),
        source_volume_ids=ids,
    )
