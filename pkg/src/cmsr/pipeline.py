"""Stage runner for the full experiment.

Each stage reads its inputs from the output directory, writes its artifacts
and then a manifest ``manifests/<stage>.json`` recording the config hash, the
digests of the upstream manifests it consumed and a SHA-256 of every file it
wrote. A stage whose manifest already matches the current config and
upstream chain is skipped.
"""

from __future__ import annotations

import hashlib
import json
import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import ExperimentConfig, config_hash, config_to_dict, derive_seed
from .evaluation import REFERENCE_SSIM, compare_methods, evaluate_bicubic_baseline, evaluate_roundtrip
from .nets import weights_fingerprint
from .phantom import PhantomSpec, generate_phantom_pair, spec_to_json
from .srnet import SrResult, build_sr_nets, super_resolve, train_sr
from .synthnet import PairedDataset, build_synthetic_dataset, build_translation_nets, train_synthesize
from .training import History, load_checkpoint, save_checkpoint
from .volumeio import (
    Mask,
    PatchSet,
    PatchSpec,
    Volume,
    extract_lung_mask,
    load_patchset,
    load_volume,
    normalize_intensity,
    sample_patches,
    save_patchset,
    save_volume,
    slab_mask,
    split_into_tiles,
    stitch_patches,
)

__all__ = ["STAGES", "MissingPrerequisite", "StageOutcome", "run_pipeline", "run_stage", "load_history"]

log = logging.getLogger(__name__)

STAGES = ("phantom-gen", "preprocess", "train-synth", "build-dataset", "train-sr", "infer", "evaluate")

_UPSTREAM = {
    "phantom-gen": (),
    "preprocess": ("phantom-gen",),
    "train-synth": ("preprocess",),
    "build-dataset": ("preprocess", "train-synth"),
    "train-sr": ("build-dataset", "train-synth"),
    "infer": ("preprocess", "train-sr"),
    "evaluate": ("preprocess", "train-synth", "build-dataset", "train-sr"),
}


class MissingPrerequisite(RuntimeError):
    def __init__(self, stage: str, reason: str = "has not been run"):
        self.stage = stage
        super().__init__(f"missing prerequisite: stage {stage!r} {reason}")


@dataclass
class StageOutcome:
    stage: str
    status: str  # "ran" or "skipped"
    manifest: dict


def _sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


class _Workspace:
    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = Path(out)
        self.hash = config_hash(cfg)

    def path(self, *parts) -> Path:
        return self.out.joinpath(*parts)

    def manifest_path(self, stage: str) -> Path:
        return self.path("manifests", f"{stage}.json")

    def read_manifest(self, stage: str) -> dict | None:
        p = self.manifest_path(stage)
        return json.loads(p.read_text()) if p.is_file() else None

    def manifest_digest(self, stage: str) -> str:
        return _sha256_file(self.manifest_path(stage))

    def outputs_intact(self, manifest: dict) -> bool:
        for rel, digest in manifest.get("outputs", {}).items():
            p = self.path(rel)
            if not p.is_file() or _sha256_file(p) != digest:
                return False
        return True

    def upstream_stages(self, stage: str) -> tuple[str, ...]:
        ups = _UPSTREAM[stage]
        if self.cfg.data.source != "phantom":
            ups = tuple(u for u in ups if u != "phantom-gen")
        return ups

    def require(self, stage: str) -> dict[str, str]:
        """Digests of the upstream manifests, or MissingPrerequisite."""
        digests = {}
        for up in self.upstream_stages(stage):
            m = self.read_manifest(up)
            if m is None:
                raise MissingPrerequisite(up)
            if m["config_hash"] != self.hash:
                raise MissingPrerequisite(up, "was run with a different config; rerun it")
            if not self.outputs_intact(m):
                raise MissingPrerequisite(up, "has missing or modified artifacts; rerun it")
            digests[up] = self.manifest_digest(up)
        return digests

    def is_current(self, stage: str, upstream: dict[str, str]) -> dict | None:
        m = self.read_manifest(stage)
        if m and m["config_hash"] == self.hash and m["upstream"] == upstream and self.outputs_intact(m):
            return m
        return None

    def write_manifest(self, stage: str, upstream: dict[str, str], files: list[Path], info: dict) -> dict:
        manifest = {
            "stage": stage,
            "config_hash": self.hash,
            "config": config_to_dict(self.cfg),
            "upstream": upstream,
            "outputs": {str(f.relative_to(self.out)): _sha256_file(f) for f in sorted(files)},
            "info": info,
        }
        p = self.manifest_path(stage)
        p.parent.mkdir(parents=True, exist_ok=True)
        tmp = p.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(manifest, indent=2))
        os.replace(tmp, p)
        return manifest


def _files_under(d: Path) -> list[Path]:
    return [p for p in d.rglob("*") if p.is_file()]


def _volume_sources(ws: _Workspace) -> dict[str, list[Path]]:
    cfg = ws.cfg
    if cfg.data.source == "files":
        return {
            "clinical_train": [Path(p) for p in cfg.data.clinical_train],
            "micro_train": [Path(p) for p in cfg.data.micro_train],
            "micro_test": [Path(p) for p in cfg.data.micro_test],
            "clinical_infer": [Path(p) for p in cfg.data.clinical_infer],
        }
    ph = cfg.data.phantom
    names = [f"phantom_{k:03d}" for k in range(ph.n_train + ph.n_test)]
    d = ws.path("phantoms")
    train, test = names[: ph.n_train], names[ph.n_train:]
    return {
        "clinical_train": [d / f"{n}_lr.raw" for n in train],
        "micro_train": [d / f"{n}_hr.raw" for n in train],
        "micro_test": [d / f"{n}_hr.raw" for n in test],
        "clinical_infer": [d / f"{n}_lr.raw" for n in test],
    }


def _stage_phantom_gen(ws: _Workspace) -> tuple[list[Path], dict]:
    cfg = ws.cfg
    ph = cfg.data.phantom
    d = ws.path("phantoms")
    d.mkdir(parents=True, exist_ok=True)
    files = []
    for k in range(ph.n_train + ph.n_test):
        spec = PhantomSpec(
            seed=derive_seed(cfg.seed, "phantom", k),
            hr_dims=ph.hr_dims,
            structure_scale=ph.structure_scale,
            gap=ph.gap,
        )
        hr, lr = generate_phantom_pair(spec, cfg.pyramid)
        name = f"phantom_{k:03d}"
        hr.volume_id, lr.volume_id = f"{name}_hr", f"{name}_lr"
        save_volume(hr, d / f"{name}_hr.raw")
        save_volume(lr, d / f"{name}_lr.raw")
        (d / f"{name}_spec.json").write_text(spec_to_json(spec))
        files += [d / f"{name}_hr.raw", d / f"{name}_lr.raw", d / f"{name}_spec.json"]
    return files, {"n_train": ph.n_train, "n_test": ph.n_test}


def _domain_mask(v: Volume, domain: str, air_threshold: float, axis: int) -> tuple[Mask | None, dict]:
    if domain == "volume":
        return None, {"domain": "volume"}
    lung = extract_lung_mask(v, air_threshold)
    info = {"domain": domain, "lung_voxels": lung.voxel_count}
    return (lung if domain == "lung" else slab_mask(lung, axis)), info


def _stage_preprocess(ws: _Workspace) -> tuple[list[Path], dict]:
    cfg = ws.cfg
    pc = cfg.preprocess
    sources = _volume_sources(ws)
    roles = {
        "micro_train": ("hr", pc.micro_range, pc.micro_domain, cfg.patch.count_per_case),
        "clinical_train": ("lr", pc.clinical_range, pc.clinical_domain, cfg.patch.count_per_case),
        "micro_test": ("hr", pc.micro_range, pc.micro_domain, cfg.patch.test_count_per_case or cfg.patch.count_per_case),
    }
    files: list[Path] = []
    info: dict = {"split": {}, "volumes": {}}
    for role, (side, rng_range, domain, count) in roles.items():
        sets = []
        for path in sources[role]:
            v = load_volume(path)
            spec = PatchSpec(
                cfg.patch.lr_size,
                cfg.patch.hr_size,
                count,
                derive_seed(cfg.seed, "patch", role, v.volume_id),
                cfg.patch.axis,
            )
            mask, minfo = _domain_mask(v, domain, pc.air_threshold, spec.axis)
            sets.append(sample_patches(normalize_intensity(v, rng_range), mask, spec, side))
            info["volumes"][f"{role}/{v.volume_id}"] = minfo
        ps = PatchSet.concat(sets)
        out = ws.path("patches", role)
        save_patchset(ps, out)
        files += _files_under(out)
        info["split"][role] = sorted(set(ps.source_volume_ids))
    leak = set(info["split"]["micro_test"]) & set(info["split"]["micro_train"])
    if leak:
        raise ValueError(f"test volumes overlap training volumes: {sorted(leak)}")
    return files, info


def _load_translation(ws: _Workspace):
    ckpt = load_checkpoint(ws.path("synth", "checkpoint.pt"))
    nets = dict(zip(("g1", "g2", "d1", "d2"), build_translation_nets(ws.cfg.synth_config())))
    for k, m in nets.items():
        m.load_state_dict(ckpt["state_dicts"][k])
        m.eval()
    return nets


def _load_sr(ws: _Workspace):
    ckpt = load_checkpoint(ws.path("sr", "checkpoint.pt"))
    g_s, d_s = build_sr_nets(ws.cfg.sr_config())
    g_s.load_state_dict(ckpt["state_dicts"]["g_s"])
    d_s.load_state_dict(ckpt["state_dicts"]["d_s"])
    g_s.eval()
    d_s.eval()
    return g_s, d_s


def _stage_train_synth(ws: _Workspace) -> tuple[list[Path], dict]:
    micro = load_patchset(ws.path("patches", "micro_train"))
    clinical = load_patchset(ws.path("patches", "clinical_train"))
    result = train_synthesize(micro, clinical, ws.cfg.synth_config(), ws.cfg.pyramid)
    d = ws.path("synth")
    d.mkdir(parents=True, exist_ok=True)
    models = {"g1": result.g1, "g2": result.g2, "d1": result.d1, "d2": result.d2}
    save_checkpoint(d / "checkpoint.pt", models, config_to_dict(ws.cfg), ws.hash)
    result.history.to_csv(d / "history.csv")
    return [d / "checkpoint.pt", d / "history.csv"], {
        "g1_fingerprint": weights_fingerprint(result.g1),
        "epochs": len(result.history),
    }


def _stage_build_dataset(ws: _Workspace) -> tuple[list[Path], dict]:
    g1 = _load_translation(ws)["g1"]
    micro = load_patchset(ws.path("patches", "micro_train"))
    ds = build_synthetic_dataset(g1, micro, ws.cfg.pyramid)
    d = ws.path("dataset")
    d.mkdir(parents=True, exist_ok=True)
    ds.save(d / "paired.npz")
    return [d / "paired.npz"], {"pairs": len(ds), "g1_fingerprint": ds.generator_fingerprint}


def _stage_train_sr(ws: _Workspace) -> tuple[list[Path], dict]:
    g1 = _load_translation(ws)["g1"]
    ds = PairedDataset.load(ws.path("dataset", "paired.npz"))
    result: SrResult = train_sr(ds, g1, ws.cfg.sr_config())
    d = ws.path("sr")
    d.mkdir(parents=True, exist_ok=True)
    save_checkpoint(d / "checkpoint.pt", {"g_s": result.g_s, "d_s": result.d_s}, config_to_dict(ws.cfg), ws.hash)
    result.history.to_csv(d / "history.csv")
    return [d / "checkpoint.pt", d / "history.csv"], {
        "trained_on_g1": ds.generator_fingerprint,
        "epochs": len(result.history),
    }


def _stage_infer(ws: _Workspace) -> tuple[list[Path], dict]:
    cfg = ws.cfg
    g_s, _ = _load_sr(ws)
    size = cfg.patch.lr_size
    d = ws.path("infer")
    d.mkdir(parents=True, exist_ok=True)
    files, outputs = [], {}
    for path in _volume_sources(ws)["clinical_infer"]:
        v = normalize_intensity(load_volume(path), cfg.preprocess.clinical_range)
        planes = np.moveaxis(v.data, cfg.patch.axis, 0)
        idx = cfg.infer.slice_index if cfg.infer.slice_index is not None else planes.shape[0] // 2
        sl = planes[idx]
        h, w = (sl.shape[0] // size) * size, (sl.shape[1] // size) * size
        if not h or not w:
            raise ValueError(f"slice of {path} is smaller than one {size}px tile")
        r0, c0 = (sl.shape[0] - h) // 2, (sl.shape[1] - w) // 2
        tiles, grid = split_into_tiles(sl[r0:r0 + h, c0:c0 + w], size)
        sr_tiles = PatchSet(
            data=super_resolve(g_s, tiles.data).astype(np.float32),
            origins=[(cfg.patch.axis, idx, (r0 + r) * 8, (c0 + c) * 8) for _, _, r, c in tiles.origins],
            source_volume_ids=[v.volume_id] * len(tiles),
            side="hr",
        )
        stitched = stitch_patches(sr_tiles, grid)
        tile_dir = d / f"{v.volume_id}_tiles"
        save_patchset(sr_tiles, tile_dir)
        modality = "phantom_hr" if cfg.data.source == "phantom" else "micro_ct"
        out_vol = Volume(
            stitched[None].astype(np.float32),
            tuple(s / 8 for s in v.spacing),
            modality,
            normalized=True,
            volume_id=f"{v.volume_id}_sr_slice{idx}",
        )
        save_volume(out_vol, d / f"{v.volume_id}_sr_slice.raw")
        files += _files_under(tile_dir) + [d / f"{v.volume_id}_sr_slice.raw"]
        outputs[v.volume_id] = {"slice_index": int(idx), "grid": list(grid), "stitched_shape": list(stitched.shape)}
    return files, {"volumes": outputs}


def _stage_evaluate(ws: _Workspace) -> tuple[list[Path], dict]:
    cfg = ws.cfg
    split = ws.read_manifest("preprocess")["info"]["split"]
    test = load_patchset(ws.path("patches", "micro_test"))
    used = set(test.source_volume_ids)
    if used & set(split["micro_train"]):
        raise ValueError("evaluation would read training-split volumes")
    if not used <= set(split["micro_test"]):
        raise ValueError("evaluation patches do not come from the recorded test split")

    g1 = _load_translation(ws)["g1"]
    g_s, _ = _load_sr(ws)
    trained_on = ws.read_manifest("train-sr")["info"]["trained_on_g1"]
    report = evaluate_roundtrip(g1, g_s, test, cfg.pyramid, cfg.ssim, expected_g1_fingerprint=trained_on, config_hash=ws.hash)
    baseline = evaluate_bicubic_baseline(g1, test, cfg.pyramid, cfg.ssim, config_hash=ws.hash)
    table = compare_methods([report, baseline], ["G_S(G1(f(x)))", "bicubic(G1(f(x)))"])

    d = ws.path("evaluate")
    d.mkdir(parents=True, exist_ok=True)
    (d / "report.json").write_text(report.to_json())
    (d / "per_image.csv").write_text(report.to_csv())
    (d / "baseline.json").write_text(baseline.to_json())
    (d / "comparison.csv").write_text(table.to_csv())
    (d / "comparison.txt").write_text(table.to_text() + "\n")
    (d / "reference.json").write_text(json.dumps(REFERENCE_SSIM, indent=2))
    files = [d / n for n in ("report.json", "per_image.csv", "baseline.json", "comparison.csv", "comparison.txt", "reference.json")]
    return files, {"mean_ssim": report.aggregate, "baseline_mean_ssim": baseline.aggregate, "n_images": len(report.per_image)}


_RUNNERS = {
    "phantom-gen": _stage_phantom_gen,
    "preprocess": _stage_preprocess,
    "train-synth": _stage_train_synth,
    "build-dataset": _stage_build_dataset,
    "train-sr": _stage_train_sr,
    "infer": _stage_infer,
    "evaluate": _stage_evaluate,
}


def run_stage(cfg: ExperimentConfig, stage: str, out_dir) -> StageOutcome:
    if stage not in _RUNNERS:
        raise ValueError(f"unknown stage {stage!r}")
    ws = _Workspace(cfg, Path(out_dir))
    if stage == "phantom-gen" and cfg.data.source != "phantom":
        raise ValueError("phantom-gen needs data.source = phantom")
    upstream = ws.require(stage)
    current = ws.is_current(stage, upstream)
    if current is not None:
        log.warning("stage %s already complete for config %s; nothing to do", stage, ws.hash[:12])
        return StageOutcome(stage, "skipped", current)
    log.info("running stage %s", stage)
    with torch.random.fork_rng():
        files, info = _RUNNERS[stage](ws)
    return StageOutcome(stage, "ran", ws.write_manifest(stage, upstream, files, info))


def run_pipeline(cfg: ExperimentConfig, stage: str, out_dir) -> list[StageOutcome]:
    """Run one stage, or every stage in order for ``stage == "all"``."""
    if stage == "all":
        stages = [s for s in STAGES if s != "phantom-gen" or cfg.data.source == "phantom"]
    else:
        stages = [stage]
    return [run_stage(cfg, s, out_dir) for s in stages]


def load_history(out_dir, stage: str) -> History:
    sub = {"train-synth": "synth", "train-sr": "sr"}[stage]
    return History.from_csv(Path(out_dir) / sub / "history.csv")
