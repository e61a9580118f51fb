"""Round-trip SSIM evaluation and method comparison tables.

Without registered clinical/micro-CT pairs, the only quantitative check is to
push a held-out micro-CT patch x through the whole chain, G_S(G1(f(x))), and
score the result against x itself.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .imaging import PyramidSpec, SsimParams, gaussian_downsample, ssim, upsample_bicubic
from .nets import weights_fingerprint
from .synthnet import as_batch
from .training import FingerprintMismatch
from .volumeio import PatchSet

__all__ = [
    "REFERENCE_SSIM",
    "MetricReport",
    "ComparisonTable",
    "evaluate_roundtrip",
    "evaluate_bicubic_baseline",
    "compare_methods",
]

# Published means for the real-data experiment; not reproducible without that data.
REFERENCE_SSIM = {"SR-CycleGAN": 0.40, "synthesized-pair SR": 0.51}


@dataclass
class MetricReport:
    per_image: list[tuple[str, float]]
    config_hash: str = ""
    fingerprints: dict[str, str] = field(default_factory=dict)
    label: str = ""

    def __post_init__(self):
        if not self.per_image:
            raise ValueError("a metric report needs at least one image")

    @property
    def aggregate(self) -> float:
        return float(np.mean([s for _, s in self.per_image]))

    def to_json(self) -> str:
        d = asdict(self)
        d["aggregate"] = self.aggregate
        return json.dumps(d, indent=2)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["image_id", "ssim"])
        w.writerows((i, repr(s)) for i, s in self.per_image)
        return buf.getvalue()


def _ids(patches, n: int, image_ids) -> list[str]:
    if image_ids is not None:
        return list(image_ids)
    if isinstance(patches, PatchSet):
        return [f"{v}@{','.join(map(str, o))}" for v, o in zip(patches.source_volume_ids, patches.origins)]
    return [f"patch{k}" for k in range(n)]


def _per_image(pred: torch.Tensor, x: torch.Tensor, ids, ssim_params) -> list[tuple[str, float]]:
    scores = ssim(pred[:, 0].double(), x[:, 0].double(), ssim_params)
    return [(i, float(s)) for i, s in zip(ids, scores)]


@torch.no_grad()
def evaluate_roundtrip(
    g1: nn.Module,
    g_s: nn.Module,
    micro_test_patches,
    pyramid: PyramidSpec = PyramidSpec(),
    ssim_params: SsimParams = SsimParams(),
    expected_g1_fingerprint: str | None = None,
    image_ids: Sequence[str] | None = None,
    chunk: int = 64,
    config_hash: str = "",
) -> MetricReport:
    """SSIM(G_S(G1(f(x))), x) for every held-out patch x.

    ``expected_g1_fingerprint`` is the fingerprint recorded in the paired
    dataset G_S was trained on; a different G1 is refused.
    """
    x = as_batch(micro_test_patches)
    if not len(x):
        raise ValueError("empty test set")
    g1_fp = weights_fingerprint(g1)
    if expected_g1_fingerprint is not None and g1_fp != expected_g1_fingerprint:
        raise FingerprintMismatch("G1 differs from the one that built the SR training set")
    g1.eval()
    g_s.eval()
    pred = torch.cat(
        [g_s(g1(gaussian_downsample(x[k:k + chunk], pyramid))) for k in range(0, len(x), chunk)]
    )
    return MetricReport(
        per_image=_per_image(pred, x, _ids(micro_test_patches, len(x), image_ids), ssim_params),
        config_hash=config_hash,
        fingerprints={"g1": g1_fp, "g_s": weights_fingerprint(g_s)},
        label="round-trip",
    )


@torch.no_grad()
def evaluate_bicubic_baseline(
    g1: nn.Module,
    micro_test_patches,
    pyramid: PyramidSpec = PyramidSpec(),
    ssim_params: SsimParams = SsimParams(),
    image_ids: Sequence[str] | None = None,
    config_hash: str = "",
) -> MetricReport:
    """SSIM(bicubic_upsample(G1(f(x))), x): the no-learning reference."""
    x = as_batch(micro_test_patches)
    if not len(x):
        raise ValueError("empty test set")
    g1.eval()
    pred = upsample_bicubic(g1(gaussian_downsample(x, pyramid)), pyramid.factor)
    return MetricReport(
        per_image=_per_image(pred, x, _ids(micro_test_patches, len(x), image_ids), ssim_params),
        config_hash=config_hash,
        fingerprints={"g1": weights_fingerprint(g1)},
        label="bicubic",
    )


@dataclass
class ComparisonTable:
    labels: list[str]
    means: list[float]
    best: list[bool]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        w.writerow(["method", "mean_ssim", "best"])
        for label, m, b in zip(self.labels, self.means, self.best):
            w.writerow([label, f"{m:.4f}", int(b)])
        return buf.getvalue()

    def to_text(self) -> str:
        width = max(len("Method"), *(len(l) for l in self.labels))
        lines = [f"{'Method':<{width}}  SSIM", f"{'-' * width}  ------"]
        for label, m, b in zip(self.labels, self.means, self.best):
            lines.append(f"{label:<{width}}  {m:.4f}{'  *' if b else ''}")
        return "\n".join(lines)


def compare_methods(reports: Sequence[MetricReport | float], labels: Sequence[str]) -> ComparisonTable:
    """Tabulate mean SSIM per method and flag every maximum.

    Entries may be reports or bare means (for published reference numbers).
    """
    if not reports:
        raise ValueError("nothing to compare")
    if len(reports) != len(labels):
        raise ValueError("one label per report is required")
    means = [r.aggregate if isinstance(r, MetricReport) else float(r) for r in reports]
    top = max(means)
    return ComparisonTable(list(labels), means, [m == top for m in means])
