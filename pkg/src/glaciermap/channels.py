"""Spectral indices, terrain layers, and named channel subsets.

The channel registry names every layer a tile can carry: raw sensor bands,
normalized-difference indices derived from band pairs, and terrain grids.
Subsets of the registry are the independent variable of the band-selection
experiments.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ValidationError
from .geodata import RasterTile

LE7_BANDS = ["B1", "B2", "B3", "B4", "B5", "B6_VCID_1", "B6_VCID_2", "B7", "B8"]
TERRAIN_CHANNELS = ["ELEVATION", "SLOPE"]

# normalized-difference pairs: value = (a - b) / (a + b)
DEFAULT_INDEX_BANDS = {
    "NDSI": ("B2", "B5"),
    "NDVI": ("B4", "B3"),
    "NDWI": ("B4", "B5"),
}


@dataclass
class ChannelRegistry:
    """Known channels and how index channels derive from raw bands."""

    raw_bands: list[str] = field(default_factory=lambda: list(LE7_BANDS))
    index_bands: dict[str, tuple[str, str]] = field(
        default_factory=lambda: dict(DEFAULT_INDEX_BANDS)
    )
    terrain: list[str] = field(default_factory=lambda: list(TERRAIN_CHANNELS))

    @property
    def all_channels(self) -> list[str]:
        return self.raw_bands + list(self.index_bands) + self.terrain

    def to_json(self) -> str:
        entries = {}
        for i, b in enumerate(self.raw_bands):
            entries[b] = {"source": i}
        for name, (a, b) in self.index_bands.items():
            entries[name] = {"index": [a, b]}
        for name in self.terrain:
            entries[name] = {"terrain": True}
        return json.dumps(entries, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "ChannelRegistry":
        entries = json.loads(text)
        raw = sorted((e["source"], n) for n, e in entries.items() if "source" in e)
        return cls(
            raw_bands=[n for _, n in raw],
            index_bands={
                n: tuple(e["index"]) for n, e in entries.items() if "index" in e
            },
            terrain=[n for n, e in entries.items() if e.get("terrain")],
        )


@dataclass(frozen=True)
class ChannelSubsetSpec:
    """A labeled, ordered subset of channels for one experiment run."""

    label: str
    members: tuple[str, ...]

    def __init__(self, label: str, members):
        object.__setattr__(self, "label", label)
        object.__setattr__(self, "members", tuple(members))
        if not self.members:
            raise ConfigurationError(f"subset {label!r} has no members")
        if len(set(self.members)) != len(self.members):
            raise ConfigurationError(f"subset {label!r} has duplicate members")


@dataclass
class ChannelStack:
    """Ordered channels resolved against one tile; defines tensor order."""

    tile: RasterTile
    names: list[str]

    def __post_init__(self):
        missing = [n for n in self.names if n not in self.tile.channels]
        if missing:
            raise ConfigurationError(
                f"channels {missing} not present in tile {self.tile.id!r}"
            )
        if len(set(self.names)) != len(self.names):
            raise ConfigurationError(f"duplicate channels in stack: {self.names}")

    def tensor(self) -> np.ndarray:
        """(C, H, W) float32 in stack order."""
        idx = [self.tile.channels.index(n) for n in self.names]
        return self.tile.data[idx]


def normalized_difference(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """(a - b) / (a + b) with zero denominators mapping to 0, NaN passing through."""
    num = a - b
    den = a + b
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(den == 0, 0.0, num / den)
    out[np.isnan(a) | np.isnan(b)] = np.nan
    return out.astype(np.float32)


def compute_index(
    tile: RasterTile, kind: str, registry: ChannelRegistry | None = None
) -> np.ndarray:
    """Compute one normalized-difference index grid from the tile's bands."""
    registry = registry or ChannelRegistry()
    if kind not in registry.index_bands:
        raise ConfigurationError(
            f"unknown index {kind!r}; registry defines {sorted(registry.index_bands)}"
        )
    band_a, band_b = registry.index_bands[kind]
    for b in (band_a, band_b):
        if b not in tile.channels:
            raise ConfigurationError(
                f"index {kind} needs band {b}, tile has {tile.channels}"
            )
    return normalized_difference(tile.channel(band_a), tile.channel(band_b))


def add_index_channels(
    tile: RasterTile, kinds=("NDSI", "NDVI", "NDWI"), registry: ChannelRegistry | None = None
) -> RasterTile:
    """Return a tile with index channels appended after the raw bands."""
    grids = [compute_index(tile, k, registry) for k in kinds]
    for k in kinds:
        if k in tile.channels:
            raise ConfigurationError(f"channel {k} already present in tile {tile.id!r}")
    return RasterTile(
        id=tile.id,
        channels=tile.channels + list(kinds),
        data=np.concatenate([tile.data, np.stack(grids)], axis=0),
        nodata_mask=tile.nodata_mask,
        transform=tile.transform,
        timestamp=tile.timestamp,
    )


def attach_terrain(
    tile: RasterTile, elevation: np.ndarray, slope: np.ndarray
) -> RasterTile:
    """Append ELEVATION and SLOPE grids as channels.

    Terrain inherits the tile's nodata mask: grids are NaN wherever the
    tile already carries nodata.
    """
    for name in TERRAIN_CHANNELS:
        if name in tile.channels:
            raise ConfigurationError(f"channel {name} already present in tile {tile.id!r}")
    for name, grid in (("elevation", elevation), ("slope", slope)):
        if np.shape(grid) != (tile.height, tile.width):
            raise ValidationError(
                f"{name} grid {np.shape(grid)} does not match tile "
                f"{tile.height}x{tile.width}"
            )
    extra = np.stack(
        [np.asarray(elevation, np.float32), np.asarray(slope, np.float32)]
    )
    return RasterTile(
        id=tile.id,
        channels=tile.channels + TERRAIN_CHANNELS,
        data=np.concatenate([tile.data, extra], axis=0),
        nodata_mask=tile.nodata_mask,
        transform=tile.transform,
        timestamp=tile.timestamp,
    )


def select_channels(stack: ChannelStack, spec: ChannelSubsetSpec) -> ChannelStack:
    """Reorder/restrict a stack to the subset, in the subset's order."""
    unknown = [m for m in spec.members if m not in stack.names]
    if unknown:
        raise ConfigurationError(
            f"subset {spec.label!r} references unknown channels {unknown}"
        )
    return ChannelStack(tile=stack.tile, names=list(spec.members))
