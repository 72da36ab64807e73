"""Seeded synthetic glacier scenes for desk-scale experiments.

Each tile carries five channels (B2, B4, B5, ELEVATION, SLOPE) over a
procedurally generated mountain landscape:

* clean ice sits on high ground and is driven by a bright visible band
  (high B2, low B5), but the scene also contains snow-lookalike "bait"
  patches at low elevation with the same spectral signature and background
  label, so rejecting them requires the terrain channels;
* debris-covered glacier fills valley pixels adjacent to ice and is defined
  by a fine checkerboard texture; spectrally identical "clutter" texture
  appears in valleys far from any ice, so telling debris from clutter
  requires spatial context rather than per-pixel values;
* ELEVATION and SLOPE are the generative terrain fields themselves, which
  makes them the strongest single-pixel predictors of glacier presence.

Everything is a pure function of the seed; generator parameters are
versioned here in code.
"""

from __future__ import annotations

import datetime as dt

import numpy as np
from scipy import ndimage

from .geodata import CLASS_CLEAN_ICE, CLASS_DEBRIS, GeoTransform, RasterTile
from .pipeline import make_rng

CHANNELS = ["B2", "B4", "B5", "ELEVATION", "SLOPE"]

# landscape composition (quantiles are tile-relative; noise scales are in
# absolute pixels so patch-level statistics do not depend on tile size)
ICE_ELEVATION_Q = 0.70  # ice lives above this elevation quantile
VALLEY_LO_Q, VALLEY_HI_Q = 0.35, 0.70  # debris/clutter elevation band
ICE_COVER_Q = 0.55  # patchiness of ice above the snow line
BAIT_COVER_Q = 0.55  # snow-lookalike frequency below the snow line
STEEP_SLOPE_Q = 0.80  # glaciers avoid the steepest slopes
ROCK_BAIT_COVER_Q = 0.40  # snow-dusted steep rock above the snow line
DEBRIS_COVER_Q = 0.45  # debris fill within near-ice valley pixels
CLUTTER_COVER_Q = 0.75  # clutter fill within far-from-ice valley pixels
COVER_SIGMA = 16.0  # pixels; scale of ice/bait cover blobs
TEXTURE_FIELD_SIGMA = 12.0  # pixels; scale of debris/clutter blobs
NEAR_ICE_SIGMA = 6.0  # pixels; softened adjacency-to-ice field
NEAR_ICE_THRESHOLD = 0.05
TEXTURE_PERIOD = 2  # checkerboard half-period in pixels
TEXTURE_AMPLITUDE = 0.22
BRIGHT_AMPLITUDE = 0.30  # weak enough that elevation adds real signal
NOISE_SIGMA = 0.10


def _smooth_noise(rng, size, sigma):
    """Normalized band-limited noise; large scales render coarse then upsample."""
    if sigma > 8:
        factor = int(np.ceil(sigma / 8.0))
        coarse = int(np.ceil(size / factor)) + 1
        field = ndimage.gaussian_filter(rng.standard_normal((coarse, coarse)), sigma / factor)
        field = ndimage.zoom(field, factor, order=3)[:size, :size]
    else:
        field = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma)
    lo, hi = field.min(), field.max()
    return (field - lo) / (hi - lo)


def generate_tile(
    seed: int,
    size: int = 1024,
    tile_id: str | None = None,
    origin: GeoTransform | None = None,
) -> tuple[RasterTile, np.ndarray]:
    """One synthetic tile plus its ground-truth class grid."""
    rng = make_rng(seed)
    elevation = _smooth_noise(rng, size, size / 8) + 0.5 * _smooth_noise(rng, size, size / 32)
    elevation /= elevation.max()
    gy, gx = np.gradient(elevation)
    slope = np.hypot(gx, gy)
    slope = slope / (slope.max() + 1e-12)

    high = elevation > np.quantile(elevation, ICE_ELEVATION_Q)
    steep = slope > np.quantile(slope, STEEP_SLOPE_Q)
    ice_noise = _smooth_noise(rng, size, COVER_SIGMA)
    ice = high & ~steep & (ice_noise > np.quantile(ice_noise, ICE_COVER_Q))

    # snow-lookalike bait: low-ground snow patches plus snow-dusted steep
    # rock above the snow line; bright like ice, labeled background
    bait_noise = _smooth_noise(rng, size, COVER_SIGMA)
    rock_noise = _smooth_noise(rng, size, COVER_SIGMA)
    bait = (~high & (bait_noise > np.quantile(bait_noise, BAIT_COVER_Q))) | (
        high & steep & (rock_noise > np.quantile(rock_noise, ROCK_BAIT_COVER_Q))
    )

    valley = (~high) & (elevation > np.quantile(elevation, VALLEY_LO_Q))
    near_ice = ndimage.gaussian_filter(ice.astype(float), NEAR_ICE_SIGMA) > NEAR_ICE_THRESHOLD
    debris_noise = _smooth_noise(rng, size, TEXTURE_FIELD_SIGMA)
    debris = valley & near_ice & (debris_noise > np.quantile(debris_noise, DEBRIS_COVER_Q))
    clutter_noise = _smooth_noise(rng, size, TEXTURE_FIELD_SIGMA)
    clutter = valley & ~near_ice & ~debris & (
        clutter_noise > np.quantile(clutter_noise, CLUTTER_COVER_Q)
    )

    yy, xx = np.mgrid[0:size, 0:size]
    checker = (((yy // TEXTURE_PERIOD) + (xx // TEXTURE_PERIOD)) % 2) * 2.0 - 1.0
    textured = debris | clutter
    bright = ice | bait

    b2 = (
        0.35
        + BRIGHT_AMPLITUDE * bright
        + 0.05 * textured
        + NOISE_SIGMA * rng.standard_normal((size, size))
    )
    b4 = (
        0.40
        + 0.5 * BRIGHT_AMPLITUDE * bright
        + 0.10 * textured
        + NOISE_SIGMA * rng.standard_normal((size, size))
    )
    b5 = (
        0.55
        - 0.6 * BRIGHT_AMPLITUDE * bright
        + TEXTURE_AMPLITUDE * checker * textured
        + NOISE_SIGMA * rng.standard_normal((size, size))
    )

    mask = np.zeros((size, size), dtype=np.uint8)
    mask[ice] = CLASS_CLEAN_ICE
    mask[debris] = CLASS_DEBRIS

    data = np.stack([b2, b4, b5, elevation, slope]).astype(np.float32)
    tile = RasterTile(
        id=tile_id or f"synth{seed:04d}",
        channels=list(CHANNELS),
        data=data,
        nodata_mask=np.zeros((size, size), dtype=bool),
        transform=origin or GeoTransform(
            origin_x=0.0, origin_y=0.0, pixel_width=1.0, pixel_height=-1.0,
            crs_code="EPSG:32645",
        ),
        timestamp=dt.date(2005, 10, 12),
    )
    return tile, mask


def generate_tiles(n_tiles: int, seed: int, size: int = 1024, grid_cols: int = 5):
    """Deterministic tile family laid out on a map grid.

    Tile k derives from seed*100003 + k and sits at grid cell
    (k // grid_cols, k % grid_cols), so centroid geometry is meaningful for
    geographic splits.
    """
    for k in range(n_tiles):
        transform = GeoTransform(
            origin_x=float(k % grid_cols) * size,
            origin_y=-float(k // grid_cols) * size,
            pixel_width=1.0,
            pixel_height=-1.0,
            crs_code="EPSG:32645",
        )
        yield generate_tile(
            seed * 100_003 + k, size=size,
            tile_id=f"synth_s{seed}_t{k:03d}", origin=transform,
        )
