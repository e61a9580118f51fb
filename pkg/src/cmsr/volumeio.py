"""Volume persistence and the pre/post-processing around the networks.

File format
-----------
A volume file is a UTF-8 text header, one ``key: value`` per line, terminated
by an empty line (``\\n\\n``), followed by the raw little-endian voxel payload
in x-fastest order. Header keys::

    format: cmsr-volume/1
    dims: nx ny nz
    spacing_um: sx sy sz
    dtype: int16 | float32
    byte_order: little
    modality: clinical_ct | micro_ct | phantom_hr | phantom_lr
    normalized: true | false
    id: <volume identifier>

In memory, ``Volume.data`` is indexed ``[z, y, x]`` and ``Volume.spacing`` is
in the same axis order, so the header lists both reversed.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

__all__ = [
    "MODALITIES",
    "VolumeFormatError",
    "NoLungRegionError",
    "PatchFitError",
    "Volume",
    "Mask",
    "PatchSpec",
    "PatchSet",
    "load_volume",
    "save_volume",
    "normalize_intensity",
    "extract_lung_mask",
    "slab_mask",
    "sample_patches",
    "split_into_tiles",
    "stitch_patches",
    "save_patchset",
    "load_patchset",
]

MODALITIES = ("clinical_ct", "micro_ct", "phantom_hr", "phantom_lr")
FORMAT_TAG = "cmsr-volume/1"
_DTYPES = {"int16": np.dtype("<i2"), "float32": np.dtype("<f4")}


class VolumeFormatError(ValueError):
    pass


class NoLungRegionError(ValueError):
    pass


class PatchFitError(ValueError):
    pass


@dataclass
class Volume:
    data: np.ndarray
    spacing: tuple[float, float, float]
    modality: str
    normalized: bool = False
    volume_id: str = ""

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise ValueError(f"volume data must be 3D with every axis >= 1, got {self.data.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")
        if self.modality not in MODALITIES:
            raise ValueError(f"unknown modality {self.modality!r}")
        if self.normalized and self.data.size and (self.data.min() < -1 or self.data.max() > 1):
            raise ValueError("normalized volume has values outside [-1, 1]")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.spacing == other.spacing
            and self.modality == other.modality
            and self.normalized == other.normalized
            and self.volume_id == other.volume_id
            and self.data.dtype == other.data.dtype
            and np.array_equal(self.data, other.data)
        )


@dataclass
class Mask:
    data: np.ndarray
    source_volume_id: str = ""

    @property
    def voxel_count(self) -> int:
        return int(self.data.sum())

    def bounding_box(self) -> tuple[tuple[int, int], ...]:
        """Half-open ``(start, stop)`` per axis of the nonzero region."""
        coords = np.nonzero(self.data)
        if not coords[0].size:
            raise NoLungRegionError("mask is empty")
        return tuple((int(c.min()), int(c.max()) + 1) for c in coords)


@dataclass(frozen=True)
class PatchSpec:
    lr_size: int = 32
    hr_size: int = 256
    count_per_case: int = 2000
    rng_seed: int = 0
    axis: int = 0

    def __post_init__(self):
        if self.hr_size != 8 * self.lr_size:
            raise ValueError(f"hr_size must be 8 x lr_size, got {self.hr_size} vs {self.lr_size}")
        if self.lr_size < 8:
            raise ValueError("lr_size must be at least 8")
        if self.count_per_case < 1:
            raise ValueError("count_per_case must be >= 1")
        if self.axis not in (0, 1, 2):
            raise ValueError("axis must be 0, 1 or 2")

    def size(self, side: str) -> int:
        if side == "lr":
            return self.lr_size
        if side == "hr":
            return self.hr_size
        raise ValueError(f"side must be 'lr' or 'hr', got {side!r}")


@dataclass
class PatchSet:
    """A stack of square 2D patches plus where each came from.

    ``origins[k]`` is ``(axis, slice_index, row, col)`` of patch ``k``'s top-left
    corner in its source volume.
    """

    data: np.ndarray
    origins: list[tuple[int, int, int, int]] = field(default_factory=list)
    source_volume_ids: list[str] = field(default_factory=list)
    normalized: bool = True
    side: str = ""
    spec: PatchSpec | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3 or self.data.shape[1] != self.data.shape[2]:
            raise ValueError(f"patch stack must be (N, S, S), got {self.data.shape}")
        n = len(self.data)
        if not self.origins:
            self.origins = [(0, 0, 0, 0)] * n
        if not self.source_volume_ids:
            self.source_volume_ids = [""] * n
        if len(self.origins) != n or len(self.source_volume_ids) != n:
            raise ValueError("provenance lists must match the number of patches")

    def __len__(self) -> int:
        return len(self.data)

    @property
    def patch_size(self) -> int:
        return self.data.shape[1]

    def __eq__(self, other):
        if not isinstance(other, PatchSet):
            return NotImplemented
        return (
            np.array_equal(self.data, other.data)
            and self.data.dtype == other.data.dtype
            and [tuple(o) for o in self.origins] == [tuple(o) for o in other.origins]
            and list(self.source_volume_ids) == list(other.source_volume_ids)
            and self.normalized == other.normalized
            and self.side == other.side
            and self.spec == other.spec
        )

    @classmethod
    def concat(cls, sets: Sequence["PatchSet"]) -> "PatchSet":
        if not sets:
            raise ValueError("nothing to concatenate")
        return cls(
            data=np.concatenate([s.data for s in sets]),
            origins=[o for s in sets for o in s.origins],
            source_volume_ids=[v for s in sets for v in s.source_volume_ids],
            normalized=all(s.normalized for s in sets),
            side=sets[0].side,
            spec=sets[0].spec,
        )


def _parse_header(text: str, path) -> dict[str, str]:
    header = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise VolumeFormatError(f"{path}: malformed header line {line!r}")
        header[key.strip()] = value.strip()
    return header


def load_volume(path) -> Volume:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"volume file not found: {path}")
    raw = path.read_bytes()
    end = raw.find(b"\n\n")
    if end < 0:
        raise VolumeFormatError(f"{path}: malformed header (no blank-line terminator)")
    try:
        header = _parse_header(raw[:end].decode("utf-8"), path)
    except UnicodeDecodeError as exc:
        raise VolumeFormatError(f"{path}: malformed header (not text)") from exc
    payload = raw[end + 2:]

    for key in ("dims", "spacing_um", "dtype"):
        if key not in header:
            raise VolumeFormatError(f"{path}: malformed header, missing {key!r}")
    if header.get("byte_order", "little") != "little":
        raise VolumeFormatError(f"{path}: unsupported byte_order {header['byte_order']!r}")
    if header["dtype"] not in _DTYPES:
        raise VolumeFormatError(f"{path}: unsupported dtype {header['dtype']!r}")
    try:
        nx, ny, nz = (int(v) for v in header["dims"].split())
        sx, sy, sz = (float(v) for v in header["spacing_um"].split())
    except ValueError as exc:
        raise VolumeFormatError(f"{path}: malformed header, bad dims/spacing") from exc

    dtype = _DTYPES[header["dtype"]]
    expected = nx * ny * nz * dtype.itemsize
    if len(payload) != expected:
        raise VolumeFormatError(
            f"{path}: payload size mismatch (expected {expected} bytes, found {len(payload)})"
        )
    data = np.frombuffer(payload, dtype=dtype).reshape(nz, ny, nx).astype(dtype.newbyteorder("="))
    return Volume(
        data=data,
        spacing=(sz, sy, sx),
        modality=header.get("modality", "micro_ct"),
        normalized=header.get("normalized", "false").lower() == "true",
        volume_id=header.get("id", path.stem),
    )


def save_volume(v: Volume, path) -> None:
    dtype_name = {np.dtype(np.int16): "int16", np.dtype(np.float32): "float32"}.get(
        v.data.dtype.newbyteorder("=")
    )
    if dtype_name is None:
        raise VolumeFormatError(f"cannot store dtype {v.data.dtype}; use int16 or float32")
    nz, ny, nx = v.data.shape
    sz, sy, sx = v.spacing
    lines = [
        f"format: {FORMAT_TAG}",
        f"dims: {nx} {ny} {nz}",
        f"spacing_um: {sx!r} {sy!r} {sz!r}",
        f"dtype: {dtype_name}",
        "byte_order: little",
        f"modality: {v.modality}",
        f"normalized: {'true' if v.normalized else 'false'}",
        f"id: {v.volume_id}",
    ]
    payload = np.ascontiguousarray(v.data, dtype=_DTYPES[dtype_name]).tobytes()
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n\n").encode("utf-8"))
        fh.write(payload)


def normalize_intensity(v: Volume, source_range: tuple[float, float] | None = None) -> Volume:
    """Affinely map ``source_range`` onto [-1, 1], clamping outliers.

    ``source_range=None`` uses the volume's own min/max.
    """
    data = v.data.astype(np.float64)
    if source_range is None:
        lo, hi = float(data.min()), float(data.max())
    else:
        lo, hi = (float(s) for s in source_range)
    if not hi > lo:
        raise ValueError(f"zero or negative dynamic range: ({lo}, {hi})")
    out = 2.0 * (data - lo) / (hi - lo) - 1.0
    out = np.clip(out, -1.0, 1.0).astype(np.float32)
    return replace(v, data=out, normalized=True)


_SIX_CONNECTED = ndimage.generate_binary_structure(3, 1)


def extract_lung_mask(
    v: Volume,
    air_threshold: float = -400.0,
    seed_policy: str | Sequence[tuple[int, int, int]] = "all",
) -> Mask:
    """Region-grow the interior air of a body.

    Voxels below ``air_threshold`` are grouped into 6-connected components and
    any component touching the volume boundary (exterior air) is dropped.
    ``seed_policy="all"`` keeps every remaining component; a sequence of
    ``(z, y, x)`` seeds keeps only the components containing a seed.
    """
    if v.normalized:
        raise ValueError("lung extraction needs native intensities, got a normalized volume")
    air = v.data < air_threshold
    labels, n = ndimage.label(air, structure=_SIX_CONNECTED)
    if n == 0:
        raise NoLungRegionError(f"no lung region below {air_threshold} in volume {v.volume_id!r}")
    border = np.zeros(n + 1, dtype=bool)
    for axis in range(3):
        for idx in (0, -1):
            border[np.unique(np.take(labels, idx, axis=axis))] = True
    keep = ~border
    keep[0] = False
    if not isinstance(seed_policy, str):
        chosen = np.zeros_like(keep)
        for z, y, x in seed_policy:
            chosen[labels[z, y, x]] = True
        keep &= chosen
    elif seed_policy != "all":
        raise ValueError(f"unknown seed policy {seed_policy!r}")
    mask = keep[labels]
    if not mask.any():
        raise NoLungRegionError(f"no lung region in volume {v.volume_id!r}")
    return Mask(data=mask, source_volume_id=v.volume_id)


def slab_mask(m: Mask, axis: int = 0) -> Mask:
    """Widen a mask to every in-plane voxel of the slices it touches."""
    touched = m.data.any(axis=tuple(a for a in range(3) if a != axis))
    shape = [1, 1, 1]
    shape[axis] = -1
    data = np.broadcast_to(touched.reshape(shape), m.data.shape).copy()
    return Mask(data=data, source_volume_id=m.source_volume_id)


def sample_patches(v: Volume, m: Mask | None, spec: PatchSpec, side: str) -> PatchSet:
    """Draw ``spec.count_per_case`` square slices centred on mask voxels.

    ``m=None`` uses the whole volume as the sampling domain. Centres are drawn
    with replacement, only from mask voxels whose full window stays inside the
    volume; the draw depends on nothing but the inputs and ``spec.rng_seed``.
    """
    if not v.normalized:
        raise ValueError("sample_patches expects a normalized volume")
    size = spec.size(side)
    axis = spec.axis
    mask = np.ones(v.shape, dtype=bool) if m is None else np.asarray(m.data, dtype=bool)
    if mask.shape != v.shape:
        raise ValueError(f"mask shape {mask.shape} does not match volume {v.shape}")
    bbox = Mask(mask).bounding_box()
    in_plane = [a for a in range(3) if a != axis]
    extents = [bbox[a][1] - bbox[a][0] for a in in_plane]
    if any(e < size for e in extents):
        raise PatchFitError(f"patch does not fit: {size}px patch vs mask bounding box {extents}")

    planes = np.moveaxis(v.data, axis, 0)
    centres = np.argwhere(np.moveaxis(mask, axis, 0))
    half = size // 2
    h, w = planes.shape[1:]
    ok = (
        (centres[:, 1] - half >= 0)
        & (centres[:, 1] - half + size <= h)
        & (centres[:, 2] - half >= 0)
        & (centres[:, 2] - half + size <= w)
    )
    centres = centres[ok]
    if not len(centres):
        raise PatchFitError(f"patch does not fit: no mask voxel admits a {size}px window")

    rng = np.random.default_rng(spec.rng_seed)
    picks = centres[rng.integers(0, len(centres), size=spec.count_per_case)]
    data = np.empty((spec.count_per_case, size, size), dtype=np.float32)
    origins = []
    for k, (s, r, c) in enumerate(picks):
        r0, c0 = int(r) - half, int(c) - half
        data[k] = planes[s, r0:r0 + size, c0:c0 + size]
        origins.append((axis, int(s), r0, c0))
    return PatchSet(
        data=data,
        origins=origins,
        source_volume_ids=[v.volume_id] * spec.count_per_case,
        normalized=True,
        side=side,
        spec=spec,
    )


def split_into_tiles(image: np.ndarray, tile: int) -> tuple[PatchSet, tuple[int, int]]:
    """Cut an image into a row-major grid of non-overlapping ``tile`` squares."""
    image = np.asarray(image)
    h, w = image.shape
    if h % tile or w % tile:
        raise ValueError(f"image {h}x{w} is not an exact multiple of tile size {tile}")
    rows, cols = h // tile, w // tile
    tiles = image.reshape(rows, tile, cols, tile).swapaxes(1, 2).reshape(-1, tile, tile)
    origins = [(0, 0, r * tile, c * tile) for r in range(rows) for c in range(cols)]
    return PatchSet(data=tiles.copy(), origins=origins, normalized=False), (rows, cols)


def stitch_patches(tiles, grid: tuple[int, int]) -> np.ndarray:
    """Inverse of :func:`split_into_tiles`: row-major tiling, no blending."""
    arr = tiles.data if isinstance(tiles, PatchSet) else tiles
    if not isinstance(arr, np.ndarray):
        shapes = {np.shape(t) for t in arr}
        if len(shapes) > 1:
            raise ValueError(f"non-uniform tiles: {sorted(shapes)}")
        arr = np.stack(arr)
    rows, cols = grid
    if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
        raise ValueError(f"tiles must be a stack of squares, got {arr.shape}")
    if rows * cols != len(arr):
        raise ValueError(f"tile count mismatch: {len(arr)} tiles for a {rows}x{cols} grid")
    j = arr.shape[1]
    return arr.reshape(rows, cols, j, j).swapaxes(1, 2).reshape(rows * j, cols * j)


def save_patchset(ps: PatchSet, directory) -> None:
    """Write a manifest plus one raw float32 file per patch."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for k, patch in enumerate(ps.data):
        name = f"patch_{k:06d}.raw"
        np.ascontiguousarray(patch, dtype="<f4").tofile(directory / name)
        files.append(name)
    manifest = {
        "format": "cmsr-patchset/1",
        "dtype": "float32",
        "byte_order": "little",
        "patch_size": ps.patch_size,
        "count": len(ps),
        "side": ps.side,
        "normalized": ps.normalized,
        "spec": None if ps.spec is None else vars(ps.spec),
        "patches": [
            {"file": f, "origin": list(o), "source_volume_id": s}
            for f, o, s in zip(files, ps.origins, ps.source_volume_ids)
        ],
    }
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1))
    os.replace(tmp, directory / "manifest.json")


def load_patchset(directory) -> PatchSet:
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no patch set manifest in {directory}")
    manifest = json.loads(manifest_path.read_text())
    size = manifest["patch_size"]
    data = np.empty((manifest["count"], size, size), dtype=np.float32)
    for k, entry in enumerate(manifest["patches"]):
        raw = np.fromfile(directory / entry["file"], dtype="<f4")
        if raw.size != size * size:
            raise VolumeFormatError(f"{entry['file']}: payload size mismatch")
        data[k] = raw.reshape(size, size)
    spec = manifest.get("spec")
    return PatchSet(
        data=data,
        origins=[tuple(e["origin"]) for e in manifest["patches"]],
        source_volume_ids=[e["source_volume_id"] for e in manifest["patches"]],
        normalized=manifest["normalized"],
        side=manifest["side"],
        spec=None if spec is None else PatchSpec(**spec),
    )
