import datetime as dt

import numpy as np
import pytest

from glaciermap.geodata import GeoTransform, RasterTile


def unit_transform(crs="EPSG:32645"):
    """Identity-like transform: pixel (i, j) center at map (j+0.5, -(i+0.5))."""
    return GeoTransform(
        origin_x=0.0, origin_y=0.0, pixel_width=1.0, pixel_height=-1.0, crs_code=crs
    )


def make_tile(data, channels=None, transform=None, tile_id="t0", timestamp=None):
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        data = data[None]
    if channels is None:
        channels = [f"B{i + 1}" for i in range(data.shape[0])]
    return RasterTile(
        id=tile_id,
        channels=list(channels),
        data=data,
        nodata_mask=np.any(np.isnan(data), axis=0),
        transform=transform or unit_transform(),
        timestamp=timestamp or dt.date(2005, 10, 12),
    )


@pytest.fixture
def rng():
    return np.random.default_rng(20260809)
