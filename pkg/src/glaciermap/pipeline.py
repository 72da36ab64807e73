"""Patch extraction pipeline: slice, filter, impute, normalize, split, persist.

Patches are C x P x P float32 tensors cut from a tile on a regular grid
(edge remainders smaller than the patch size are dropped), paired with
binary mask planes in canonical class order (clean_ice, debris). Splits are
driven by a seeded PCG64 generator so every manifest is reproducible.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import json
import math
import os
import threading
from dataclasses import dataclass, field

import numpy as np

from . import container
from .errors import ConfigurationError, FormatError, ValidationError
from .geodata import CLASS_CLEAN_ICE, CLASS_DEBRIS, RasterTile

PATCH_SIZE = 512
MASK_PLANES = ("clean_ice", "debris")
NORM_EPS = 1e-6


def make_rng(seed: int) -> np.random.Generator:
    """The toolkit's split/init RNG: PCG64, seeded. Documented so manifests
    can be reproduced by any implementation of the same generator."""
    return np.random.Generator(np.random.PCG64(seed))


@dataclass
class PatchMeta:
    patch_id: str
    source_tile_id: str
    timestamp: str | None  # ISO date
    bounds: tuple[float, float, float, float]  # (minx, miny, maxx, maxy)
    row: int
    col: int
    glacier_fraction_clean: float
    glacier_fraction_debris: float

    def __post_init__(self):
        for name in ("glacier_fraction_clean", "glacier_fraction_debris"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name}={v} outside [0, 1]")
        self.bounds = tuple(float(b) for b in self.bounds)

    @property
    def centroid(self) -> tuple[float, float]:
        minx, miny, maxx, maxy = self.bounds
        return (minx + maxx) / 2.0, (miny + maxy) / 2.0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PatchMeta":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: (tuple(v) if k == "bounds" else v) for k, v in d.items() if k in known})


@dataclass
class Patch:
    data: np.ndarray  # (C, P, P) float32
    channels: list[str]
    meta: PatchMeta

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3 or self.data.shape[1] != self.data.shape[2]:
            raise ValidationError(f"patch data must be (C, P, P), got {self.data.shape}")
        if len(self.channels) != self.data.shape[0]:
            raise ConfigurationError("channel names do not match patch depth")

    def select(self, names: list[str]) -> "Patch":
        missing = [n for n in names if n not in self.channels]
        if missing:
            raise ConfigurationError(f"patch {self.meta.patch_id} lacks channels {missing}")
        idx = [self.channels.index(n) for n in names]
        return Patch(self.data[idx], list(names), self.meta)


@dataclass
class MaskPatch:
    data: np.ndarray  # (K, P, P) uint8, planes in MASK_PLANES order
    planes: list[str]
    meta: PatchMeta

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.uint8)
        if self.data.ndim != 3:
            raise ValidationError(f"mask data must be (K, P, P), got {self.data.shape}")
        if not np.isin(self.data, (0, 1)).all():
            raise ValidationError("mask planes must be binary")
        if len(self.planes) != self.data.shape[0]:
            raise ConfigurationError("plane names do not match mask depth")


@dataclass
class FilterConfig:
    min_glacier_fraction: float = 0.10
    classes_counted: tuple[str, ...] = MASK_PLANES

    def __post_init__(self):
        if not 0.0 <= self.min_glacier_fraction <= 1.0:
            raise ConfigurationError("min_glacier_fraction must be in [0, 1]")
        unknown = [c for c in self.classes_counted if c not in MASK_PLANES]
        if unknown:
            raise ConfigurationError(f"unknown classes {unknown}")


@dataclass
class SplitManifest:
    seed: int
    method: str  # random | geographic
    assignment: dict[str, str]  # patch_id -> train/dev/test
    parameters: dict = field(default_factory=dict)

    def ids(self, split: str) -> list[str]:
        return [pid for pid, s in self.assignment.items() if s == split]

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "method": self.method,
            "assignment": self.assignment,
            "parameters": self.parameters,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplitManifest":
        return cls(d["seed"], d["method"], dict(d["assignment"]), dict(d.get("parameters", {})))


# ---------------------------------------------------------------------------
# Slicing

def grid_positions(extent: int, patch_size: int, stride: int) -> list[int]:
    if extent < patch_size:
        return []
    return [k * stride for k in range((extent - patch_size) // stride + 1)]


def slice_tile(
    tile: RasterTile,
    mask: np.ndarray,
    patch_size: int = PATCH_SIZE,
    stride: int | None = None,
) -> list[tuple[Patch, MaskPatch]]:
    """Cut aligned (patch, mask) pairs on a row-major grid.

    Edge remainders narrower than patch_size are dropped so every patch is
    full-size; per-patch glacier fractions land in the metadata.
    """
    stride = patch_size if stride is None else stride
    if patch_size < 1 or stride < 1:
        raise ConfigurationError("patch_size and stride must be >= 1")
    mask = np.asarray(mask)
    if mask.shape != (tile.height, tile.width):
        raise ValidationError(
            f"mask {mask.shape} does not align with tile {tile.height}x{tile.width}"
        )
    t = tile.transform
    pairs = []
    stamp = tile.timestamp.isoformat() if tile.timestamp else None
    for row, i0 in enumerate(grid_positions(tile.height, patch_size, stride)):
        for col, j0 in enumerate(grid_positions(tile.width, patch_size, stride)):
            window = tile.data[:, i0 : i0 + patch_size, j0 : j0 + patch_size]
            mask_window = mask[i0 : i0 + patch_size, j0 : j0 + patch_size]
            planes = np.stack(
                [mask_window == CLASS_CLEAN_ICE, mask_window == CLASS_DEBRIS]
            ).astype(np.uint8)
            corners_x, corners_y = [], []
            for ci, cj in ((i0, j0), (i0, j0 + patch_size), (i0 + patch_size, j0), (i0 + patch_size, j0 + patch_size)):
                corners_x.append(t.origin_x + cj * t.pixel_width + ci * t.rot_x)
                corners_y.append(t.origin_y + cj * t.rot_y + ci * t.pixel_height)
            area = patch_size * patch_size
            meta = PatchMeta(
                patch_id=f"{tile.id}_r{row:03d}_c{col:03d}",
                source_tile_id=tile.id,
                timestamp=stamp,
                bounds=(min(corners_x), min(corners_y), max(corners_x), max(corners_y)),
                row=row,
                col=col,
                glacier_fraction_clean=float(planes[0].sum()) / area,
                glacier_fraction_debris=float(planes[1].sum()) / area,
            )
            pairs.append(
                (
                    Patch(window.copy(), list(tile.channels), meta),
                    MaskPatch(planes, list(MASK_PLANES), meta),
                )
            )
    return pairs


def glacier_fraction(mask_patch: MaskPatch, classes=MASK_PLANES) -> float:
    """Fraction of pixels positive in any of the selected class planes."""
    if not classes:
        raise ConfigurationError("at least one class must be counted")
    idx = []
    for c in classes:
        if c not in mask_patch.planes:
            raise ConfigurationError(f"unknown class {c!r}")
        idx.append(mask_patch.planes.index(c))
    union = np.any(mask_patch.data[idx] > 0, axis=0)
    return float(union.sum()) / union.size


def filter_patches(
    pairs: list[tuple[Patch, MaskPatch]], config: FilterConfig
) -> list[tuple[Patch, MaskPatch]]:
    """Keep pairs whose glacier fraction is >= the threshold, stable order."""
    kept = []
    for patch, mask_patch in pairs:
        if glacier_fraction(mask_patch, config.classes_counted) >= config.min_glacier_fraction:
            kept.append((patch, mask_patch))
    return kept


def impute_nan(patch: Patch) -> Patch:
    """Replace NaN cells with 0; everything else is untouched bitwise."""
    data = patch.data
    if np.isnan(data).any():
        data = np.where(np.isnan(data), np.float32(0.0), data)
    return Patch(data, list(patch.channels), patch.meta)


def normalize_patch(patch: Patch, stats: dict[str, tuple[float, float]] | None = None) -> Patch:
    """Per-channel z-score within the patch: x -> (x - mean) / (std + eps).

    Run after impute_nan; imputed zeros participate in the statistics.
    Constant channels map to all zeros. Passing ``stats`` (channel ->
    (mean, std)) switches to fixed global statistics instead of per-patch
    ones, for sensitivity analysis.
    """
    data = patch.data.copy()
    for c, name in enumerate(patch.channels):
        if stats is not None:
            mean, std = stats[name]
        else:
            mean = float(data[c].mean())
            std = float(data[c].std())
        data[c] = (data[c] - np.float32(mean)) / np.float32(std + NORM_EPS)
    return Patch(data, list(patch.channels), patch.meta)


# ---------------------------------------------------------------------------
# Splits

def _apportion(n: int, fractions: list[float]) -> list[int]:
    """Largest-remainder apportionment; each count within 1 of fraction*n."""
    quotas = [f * n for f in fractions]
    counts = [math.floor(q) for q in quotas]
    remainder = n - sum(counts)
    order = sorted(range(len(fractions)), key=lambda i: quotas[i] - counts[i], reverse=True)
    for i in order[:remainder]:
        counts[i] += 1
    return counts


def random_split(
    patch_ids: list[str],
    fractions: tuple[float, float, float] = (0.7, 0.1, 0.2),
    seed: int = 0,
) -> SplitManifest:
    """Seeded random train/dev/test partition.

    Fractions must be nonnegative and sum to at most 1; any unassigned
    remainder goes to test.
    """
    train_f, dev_f, test_f = fractions
    if min(fractions) < 0:
        raise ConfigurationError("fractions must be nonnegative")
    if train_f + dev_f + test_f > 1.0 + 1e-9:
        raise ConfigurationError("fractions must sum to at most 1")
    test_f = 1.0 - train_f - dev_f  # remainder defaults to test
    n = len(patch_ids)
    counts = _apportion(n, [train_f, dev_f, test_f])
    order = make_rng(seed).permutation(n)
    assignment = {}
    for rank, idx in enumerate(order):
        if rank < counts[0]:
            split = "train"
        elif rank < counts[0] + counts[1]:
            split = "dev"
        else:
            split = "test"
        assignment[patch_ids[idx]] = split
    return SplitManifest(
        seed=seed,
        method="random",
        assignment=assignment,
        parameters={"fractions": list(fractions)},
    )


def minimal_ball_radius(dists: np.ndarray, ball_fraction: float) -> float:
    """Smallest radius whose closed ball holds >= ball_fraction of points."""
    k = max(1, math.ceil(ball_fraction * len(dists)))
    return float(np.sort(dists)[k - 1])


def geographic_split(
    metas: list[PatchMeta],
    ball_fraction: float = 0.8,
    dev_fraction_within_ball: float = 0.1,
    seed: int = 0,
    seed_point: tuple[float, float] | None = None,
) -> SplitManifest:
    """Geographically disjoint split: grow a ball around a random seed point.

    The seed point is drawn uniformly from the bounding box of patch
    centroids; the radius grows until the closed ball holds at least
    ball_fraction of the centroids. In-ball patches become train plus a
    random dev share; everything outside is test, so train/dev and test are
    radius-separated by construction.
    """
    if len(metas) < 3:
        raise ConfigurationError("geographic split needs at least 3 patches")
    if not 0.0 < ball_fraction <= 1.0:
        raise ConfigurationError("ball_fraction must be in (0, 1]")
    rng = make_rng(seed)
    centroids = np.array([m.centroid for m in metas], dtype=float)
    if seed_point is None:
        lo = centroids.min(axis=0)
        hi = centroids.max(axis=0)
        seed_point = lo + rng.random(2) * (hi - lo)
    seed_point = np.asarray(seed_point, dtype=float)
    dists = np.hypot(*(centroids - seed_point).T)
    radius = minimal_ball_radius(dists, ball_fraction)
    in_ball = dists <= radius

    ball_idx = np.flatnonzero(in_ball)
    n_dev = int(round(dev_fraction_within_ball * len(ball_idx)))
    dev_pick = set(ball_idx[rng.permutation(len(ball_idx))[:n_dev]].tolist())
    assignment = {}
    for i, meta in enumerate(metas):
        if not in_ball[i]:
            assignment[meta.patch_id] = "test"
        elif i in dev_pick:
            assignment[meta.patch_id] = "dev"
        else:
            assignment[meta.patch_id] = "train"
    return SplitManifest(
        seed=seed,
        method="geographic",
        assignment=assignment,
        parameters={
            "ball_fraction": ball_fraction,
            "dev_fraction_within_ball": dev_fraction_within_ball,
            "seed_point": seed_point.tolist(),
            "radius": radius,
        },
    )


# ---------------------------------------------------------------------------
# Persistence

def write_patch(item: Patch | MaskPatch, directory, filename: str | None = None) -> str:
    """Write a patch or mask in the GLPX container; returns the file path."""
    if isinstance(item, Patch):
        dtype, names, payload = "f32", item.channels, container.array_payload(item.data)
        suffix = ""
    else:
        dtype, names, payload = "u8", item.planes, container.array_payload(item.data)
        suffix = "_mask"
    header = {
        "dtype": dtype,
        "shape": list(item.data.shape),
        "channels": list(names),
        "meta": item.meta.to_dict(),
    }
    name = filename or f"{item.meta.patch_id}{suffix}.glpx"
    path = os.path.join(str(directory), name)
    container.write_file(path, header, payload)
    return path


def read_patch(path) -> Patch | MaskPatch:
    """Read a GLPX patch or mask file; lossless inverse of write_patch."""
    header, payload = container.read_file(path)
    for key in ("dtype", "shape", "channels", "meta"):
        if key not in header:
            raise FormatError(f"{path}: header missing {key!r}", offset=8)
    arr = container.decode_array(header, payload, path=str(path))
    meta = PatchMeta.from_dict(header["meta"])
    if header["dtype"] == "f32":
        return Patch(arr, list(header["channels"]), meta)
    return MaskPatch(arr, list(header["channels"]), meta)


class DatasetWriter:
    """Persists patch/mask pairs plus a GeoJSON manifest.

    Patch payload writes are parallel-safe; manifest lines are appended
    under an exclusive lock (the single serialization point) and compiled
    into a FeatureCollection by finalize().
    """

    def __init__(self, directory):
        self.dir = str(directory)
        os.makedirs(self.dir, exist_ok=True)
        self._lock = threading.Lock()
        self._log_path = os.path.join(self.dir, "manifest.jsonl")
        self._features: list[dict] = []

    def write_pair(self, patch: Patch, mask: MaskPatch) -> dict:
        patch_path = write_patch(patch, self.dir)
        mask_path = write_patch(mask, self.dir)
        feature = manifest_feature(
            patch.meta,
            patch_file=os.path.basename(patch_path),
            mask_file=os.path.basename(mask_path),
        )
        line = json.dumps(feature, sort_keys=True)
        with self._lock:
            self._features.append(feature)
            with open(self._log_path, "a", encoding="utf-8") as fh:
                fh.write(line + "\n")
                fh.flush()
        return feature

    def finalize(self, split: SplitManifest | None = None) -> str:
        feats = [dict(f) for f in self._features]
        if split is not None:
            for f in feats:
                pid = f["properties"]["patch_id"]
                f["properties"]["split"] = split.assignment.get(pid)
        doc = {"type": "FeatureCollection", "features": feats}
        if split is not None:
            doc["properties"] = {"split": split.to_dict()}
        path = os.path.join(self.dir, "manifest.geojson")
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(doc, fh)
        os.replace(tmp, path)
        return path


def manifest_feature(meta: PatchMeta, **extra) -> dict:
    minx, miny, maxx, maxy = meta.bounds
    props = meta.to_dict()
    props.update(extra)
    return {
        "type": "Feature",
        "geometry": {
            "type": "Polygon",
            "coordinates": [
                [[minx, miny], [maxx, miny], [maxx, maxy], [minx, maxy], [minx, miny]]
            ],
        },
        "properties": props,
    }


def read_manifest(path) -> list[dict]:
    """Load manifest features as dicts with PatchMeta properties."""
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("type") != "FeatureCollection":
        raise FormatError(f"{path}: manifest is not a FeatureCollection")
    return doc["features"]
