"""Raster tiles, vector labels, rasterization, and region cropping.

Rasters are held fully in memory as float32 channel stacks with NaN marking
nodata. Georeferencing follows the usual affine convention: pixel (row, col)
has its center at

    x = origin_x + (col + 0.5) * pixel_width  + (row + 0.5) * rot_x
    y = origin_y + (col + 0.5) * rot_y        + (row + 0.5) * pixel_height

Rasterization uses a pixel-center test with boundary points counting as
inside; where clean-ice and debris polygons overlap, debris wins.
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import json
import struct
from dataclasses import dataclass, field

import numpy as np
import tifffile
from PIL import Image

from .errors import ConfigurationError, MetadataError, ParseError, ValidationError

CLASS_BACKGROUND = 0
CLASS_CLEAN_ICE = 1
CLASS_DEBRIS = 2
CLASS_TAGS = ("clean_ice", "debris")
CLASS_CODE = {"clean_ice": CLASS_CLEAN_ICE, "debris": CLASS_DEBRIS}

# GeoTIFF tag ids used for on-disk georeferencing.
_TAG_PIXEL_SCALE = 33550
_TAG_TIEPOINT = 33922
_TAG_TRANSFORMATION = 34264
_TAG_GEO_KEYS = 34735
_TAG_GDAL_NODATA = 42113
_GEOKEY_PROJECTED_CRS = 3072
_GEOKEY_GEOGRAPHIC_CRS = 2048


@dataclass(frozen=True)
class GeoTransform:
    """Affine pixel-to-map transform plus a CRS identifier."""

    origin_x: float
    origin_y: float
    pixel_width: float
    pixel_height: float
    rot_x: float = 0.0
    rot_y: float = 0.0
    crs_code: str = "unknown"

    def __post_init__(self):
        if self.pixel_width == 0 or self.pixel_height == 0:
            raise ValidationError("pixel_width and pixel_height must be nonzero")
        if self.determinant == 0:
            raise ValidationError("transform is singular")

    @property
    def determinant(self) -> float:
        return self.pixel_width * self.pixel_height - self.rot_x * self.rot_y

    def pixel_to_map(self, row, col):
        """Map coordinates of the center of pixel (row, col). Accepts arrays."""
        r = np.asarray(row, dtype=float) + 0.5
        c = np.asarray(col, dtype=float) + 0.5
        x = self.origin_x + c * self.pixel_width + r * self.rot_x
        y = self.origin_y + c * self.rot_y + r * self.pixel_height
        return x, y

    def map_to_pixel(self, x, y):
        """Fractional pixel coordinates (row, col) of a map point. Exact inverse."""
        dx = np.asarray(x, dtype=float) - self.origin_x
        dy = np.asarray(y, dtype=float) - self.origin_y
        det = self.determinant
        c = (dx * self.pixel_height - dy * self.rot_x) / det
        r = (dy * self.pixel_width - dx * self.rot_y) / det
        return r - 0.5, c - 0.5

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GeoTransform":
        return cls(**d)


@dataclass
class RasterTile:
    """Multi-channel float32 raster with nodata carried as NaN."""

    id: str
    channels: list[str]
    data: np.ndarray  # (C, H, W) float32
    nodata_mask: np.ndarray  # (H, W) bool
    transform: GeoTransform
    timestamp: dt.date | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValidationError(f"data must be (C, H, W), got shape {self.data.shape}")
        if len(self.channels) != self.data.shape[0]:
            raise ConfigurationError(
                f"{len(self.channels)} channel names for {self.data.shape[0]} bands"
            )
        if len(set(self.channels)) != len(self.channels):
            raise ConfigurationError(f"duplicate channel names in {self.channels}")
        self.nodata_mask = np.asarray(self.nodata_mask, dtype=bool)
        if self.nodata_mask.shape != self.data.shape[1:]:
            raise ValidationError("nodata_mask shape does not match data")
        # canonical form: every channel is NaN at a nodata pixel
        if self.nodata_mask.any() and not np.isnan(self.data[:, self.nodata_mask]).all():
            self.data = self.data.copy()
            self.data[:, self.nodata_mask] = np.nan

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    def channel(self, name: str) -> np.ndarray:
        try:
            return self.data[self.channels.index(name)]
        except ValueError:
            raise ConfigurationError(
                f"channel {name!r} not in tile {self.id!r} (has {self.channels})"
            ) from None


@dataclass
class LabelVectors:
    """Glacier label polygons: one closed ring per entry with a class tag."""

    polygons: list[tuple[np.ndarray, str]] = field(default_factory=list)

    def __post_init__(self):
        checked = []
        for ring, tag in self.polygons:
            checked.append((_check_ring(ring), _check_tag(tag)))
        self.polygons = checked


@dataclass
class RegionBoundary:
    """Union of closed rings delimiting the study region."""

    rings: list[np.ndarray]

    def __post_init__(self):
        if not self.rings:
            raise ValidationError("boundary needs at least one ring")
        self.rings = [_check_ring(r) for r in self.rings]


def _check_ring(ring) -> np.ndarray:
    arr = np.asarray(ring, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 4:
        raise ValidationError(
            f"ring must be an Nx2 array with N >= 4, got shape {arr.shape}"
        )
    if not np.array_equal(arr[0], arr[-1]):
        raise ValidationError(f"ring is not closed: first {arr[0]} != last {arr[-1]}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("ring has non-finite coordinates")
    return arr

def _check_tag(tag: str) -> str:
    if tag not in CLASS_TAGS:
        raise ValidationError(f"class_tag must be one of {CLASS_TAGS}, got {tag!r}")
    return tag


# ---------------------------------------------------------------------------
# GeoTIFF-style IO

def load_tile(path, channel_names: list[str], tile_id: str | None = None) -> RasterTile:
    """Load a single- or multi-band GeoTIFF-style raster.

    Nodata cells (tagged value or stored NaN) come back as NaN with the
    corresponding nodata_mask bit set. Raises MetadataError when the file
    carries no georeferencing.
    """
    try:
        with tifffile.TiffFile(path) as tif:
            page = tif.pages[0]
            tags = {t.code: t.value for t in page.tags.values()}
            arr = tif.asarray()
    except (OSError, tifffile.TiffFileError) as exc:
        raise OSError(f"cannot read raster {path}: {exc}") from exc

    if arr.ndim == 2:
        arr = arr[None]
    elif arr.ndim == 3:
        # tifffile returns (H, W, C) for contiguous multiband pages
        if arr.shape[-1] == min(arr.shape):
            arr = np.moveaxis(arr, -1, 0)
    else:
        raise MetadataError(f"{path}: unsupported raster dimensionality {arr.shape}")

    if len(channel_names) != arr.shape[0]:
        raise ConfigurationError(
            f"{path}: {arr.shape[0]} bands but {len(channel_names)} channel names"
        )

    transform = _transform_from_tags(tags, path)
    data = arr.astype(np.float32, copy=True)

    nodata_mask = np.zeros(data.shape[1:], dtype=bool)
    nodata_val = tags.get(_TAG_GDAL_NODATA)
    if nodata_val is not None:
        try:
            nd = float(str(nodata_val).strip().strip("\x00"))
        except ValueError:
            nd = np.nan
        if np.isnan(nd):
            nodata_mask |= np.any(np.isnan(data), axis=0)
        else:
            nodata_mask |= np.any(data == nd, axis=0)
    nodata_mask |= np.any(np.isnan(data), axis=0)
    data[:, nodata_mask] = np.nan

    timestamp = None
    if 306 in tags:  # TIFF DateTime
        try:
            timestamp = dt.datetime.strptime(str(tags[306]), "%Y:%m:%d %H:%M:%S").date()
        except ValueError:
            timestamp = None

    if tile_id is None:
        tile_id = str(path).rsplit("/", 1)[-1].rsplit(".", 1)[0]
    return RasterTile(
        id=tile_id,
        channels=list(channel_names),
        data=data,
        nodata_mask=nodata_mask,
        transform=transform,
        timestamp=timestamp,
    )


def _transform_from_tags(tags: dict, path) -> GeoTransform:
    crs_code = "unknown"
    geokeys = tags.get(_TAG_GEO_KEYS)
    if geokeys is not None:
        keys = np.asarray(geokeys).ravel()
        # GeoKeyDirectory: groups of 4; key id at position 0, value at 3
        for k in range(4, len(keys) - 3, 4):
            if keys[k] in (_GEOKEY_PROJECTED_CRS, _GEOKEY_GEOGRAPHIC_CRS):
                crs_code = f"EPSG:{int(keys[k + 3])}"

    if _TAG_TRANSFORMATION in tags:
        m = np.asarray(tags[_TAG_TRANSFORMATION], dtype=float).reshape(4, 4)
        # Stored transform maps pixel corners; shift to our corner-origin form.
        return GeoTransform(
            origin_x=m[0, 3], origin_y=m[1, 3],
            pixel_width=m[0, 0], pixel_height=m[1, 1],
            rot_x=m[0, 1], rot_y=m[1, 0], crs_code=crs_code,
        )
    if _TAG_PIXEL_SCALE in tags and _TAG_TIEPOINT in tags:
        sx, sy = np.asarray(tags[_TAG_PIXEL_SCALE], dtype=float)[:2]
        tie = np.asarray(tags[_TAG_TIEPOINT], dtype=float)
        i, j, _, x, y = tie[0], tie[1], tie[2], tie[3], tie[4]
        return GeoTransform(
            origin_x=x - j * sx, origin_y=y + i * sy,
            pixel_width=sx, pixel_height=-sy, crs_code=crs_code,
        )
    raise MetadataError(f"{path}: no georeferencing tags present")


def write_tile(tile: RasterTile, path) -> None:
    """Write a tile as a GeoTIFF-style raster; inverse of load_tile."""
    t = tile.transform
    if t.rot_x != 0 or t.rot_y != 0:
        matrix = (
            t.pixel_width, t.rot_x, 0.0, t.origin_x,
            t.rot_y, t.pixel_height, 0.0, t.origin_y,
            0.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 1.0,
        )
        geo_tags = [(_TAG_TRANSFORMATION, "d", 16, matrix)]
    else:
        geo_tags = [
            (_TAG_PIXEL_SCALE, "d", 3, (t.pixel_width, -t.pixel_height, 0.0)),
            (_TAG_TIEPOINT, "d", 6, (0.0, 0.0, 0.0, t.origin_x, t.origin_y, 0.0)),
        ]
    if t.crs_code.upper().startswith("EPSG:"):
        code = int(t.crs_code.split(":")[1])
        key_id = _GEOKEY_GEOGRAPHIC_CRS if code == 4326 else _GEOKEY_PROJECTED_CRS
        directory = (1, 1, 0, 1, key_id, 0, 1, code)
        geo_tags.append((_TAG_GEO_KEYS, "H", len(directory), directory))
    geo_tags.append((_TAG_GDAL_NODATA, "s", 4, "nan\x00"))

    extra = {}
    if tile.timestamp is not None:
        stamp = dt.datetime.combine(tile.timestamp, dt.time())
        extra["datetime"] = stamp.strftime("%Y:%m:%d %H:%M:%S")

    data = np.moveaxis(tile.data, 0, -1)  # (H, W, C)
    if data.shape[-1] == 1:
        data = data[..., 0]
    else:
        extra["planarconfig"] = "contig"
    tifffile.imwrite(path, data, photometric="minisblack", extratags=geo_tags, **extra)


# ---------------------------------------------------------------------------
# Rasterization

def _ring_cover_mask(ring_px: np.ndarray, width: int, height: int) -> np.ndarray:
    """Pixels whose centers lie inside or on the boundary of one ring.

    Works in pixel coordinates where the center of pixel (i, j) is at
    (j + 0.5, i + 0.5). Even-odd ray casting plus an explicit on-segment
    pass so that boundary centers count as covered.
    """
    xs, ys = ring_px[:, 0], ring_px[:, 1]
    x1, y1 = xs[:-1], ys[:-1]
    x2, y2 = xs[1:], ys[1:]
    mask = np.zeros((height, width), dtype=bool)

    row_lo = max(0, int(np.floor(np.min(ys) - 0.5)))
    row_hi = min(height - 1, int(np.ceil(np.max(ys) - 0.5)))
    if row_hi < row_lo:
        return mask
    centers_x = np.arange(width) + 0.5

    for i in range(row_lo, row_hi + 1):
        y = i + 0.5
        crossing = (y1 > y) != (y2 > y)
        if np.any(crossing):
            xc = x1[crossing] + (y - y1[crossing]) * (x2[crossing] - x1[crossing]) / (
                y2[crossing] - y1[crossing]
            )
            xc.sort()
            left = np.searchsorted(xc, centers_x, side="left")
            right = np.searchsorted(xc, centers_x, side="right")
            mask[i] |= (left % 2 == 1) | (right > left)

        # centers lying exactly on an edge
        on_row = (np.minimum(y1, y2) <= y) & (np.maximum(y1, y2) >= y)
        for k in np.flatnonzero(on_row):
            if y1[k] == y2[k]:
                lo, hi = sorted((x1[k], x2[k]))
                j_lo = int(np.ceil(lo - 0.5))
                j_hi = int(np.floor(hi - 0.5))
                if j_hi >= j_lo:
                    mask[i, max(0, j_lo) : min(width, j_hi + 1)] = True
            else:
                x_at = x1[k] + (y - y1[k]) * (x2[k] - x1[k]) / (y2[k] - y1[k])
                j = x_at - 0.5
                if j == int(j) and 0 <= int(j) < width:
                    mask[i, int(j)] = True
    return mask


def _rings_to_pixel(rings, transform: GeoTransform):
    out = []
    for ring in rings:
        r, c = transform.map_to_pixel(ring[:, 0], ring[:, 1])
        out.append(np.column_stack([c + 0.5, r + 0.5]))  # (x=col, y=row) corners
    return out


def rasterize_labels(
    vectors: LabelVectors, transform: GeoTransform, width: int, height: int
) -> np.ndarray:
    """Burn label polygons into a per-pixel class grid.

    Returns a (H, W) uint8 grid with 0=background, 1=clean_ice, 2=debris.
    A pixel belongs to a class iff its center is covered by a polygon of
    that class; debris overrides clean ice where both cover a pixel.
    """
    class_masks = {tag: np.zeros((height, width), dtype=bool) for tag in CLASS_TAGS}
    for ring, tag in vectors.polygons:
        (ring_px,) = _rings_to_pixel([ring], transform)
        class_masks[tag] |= _ring_cover_mask(ring_px, width, height)

    grid = np.zeros((height, width), dtype=np.uint8)
    grid[class_masks["clean_ice"]] = CLASS_CLEAN_ICE
    grid[class_masks["debris"]] = CLASS_DEBRIS
    return grid


def crop_to_boundary(
    tile: RasterTile, mask: np.ndarray, boundary: RegionBoundary
) -> tuple[RasterTile, np.ndarray]:
    """Blank out everything whose pixel center falls outside the boundary.

    Dimensions are unchanged: outside pixels become NaN in the tile and
    background in the mask, so patch grids stay aligned across tiles.
    """
    mask = np.asarray(mask)
    if mask.shape != (tile.height, tile.width):
        raise ValidationError(
            f"mask shape {mask.shape} does not match tile {tile.height}x{tile.width}"
        )
    inside = np.zeros((tile.height, tile.width), dtype=bool)
    for ring_px in _rings_to_pixel(boundary.rings, tile.transform):
        inside |= _ring_cover_mask(ring_px, tile.width, tile.height)

    data = tile.data.copy()
    data[:, ~inside] = np.nan
    nodata = tile.nodata_mask | ~inside
    cropped_mask = np.where(inside, mask, CLASS_BACKGROUND).astype(mask.dtype)
    out_tile = RasterTile(
        id=tile.id, channels=list(tile.channels), data=data,
        nodata_mask=nodata, transform=tile.transform, timestamp=tile.timestamp,
    )
    return out_tile, cropped_mask


# ---------------------------------------------------------------------------
# Previews

def scale_to_bytes(channel: np.ndarray) -> np.ndarray:
    """Min-max scale one channel to [0, 255] ignoring NaN; NaN renders as 0."""
    finite = np.isfinite(channel)
    out = np.zeros(channel.shape, dtype=np.uint8)
    if not np.any(finite):
        return out
    lo = channel[finite].min()
    hi = channel[finite].max()
    if hi == lo:
        return out  # zero range: flag degenerate channels as black
    scaled = np.round((channel - lo) / (hi - lo) * 255.0)
    out[finite] = scaled[finite].astype(np.uint8)
    return out


def render_preview(tile: RasterTile, channel_triplet, out_path) -> None:
    """Write an 8-bit RGB PNG from three channels of the tile."""
    if len(channel_triplet) != 3:
        raise ConfigurationError("preview needs exactly 3 channels")
    rgb = np.stack([scale_to_bytes(tile.channel(c)) for c in channel_triplet], axis=-1)
    Image.fromarray(rgb, mode="RGB").save(out_path, format="PNG")


# ---------------------------------------------------------------------------
# Vector label ingestion (GeoJSON and ESRI shapefile)

def _geojson_polygons(doc: dict):
    if doc.get("type") != "FeatureCollection":
        raise ParseError(f"expected FeatureCollection, got {doc.get('type')!r}")
    for feature in doc.get("features", []):
        geom = feature.get("geometry") or {}
        props = feature.get("properties") or {}
        gtype = geom.get("type")
        if gtype == "Polygon":
            polys = [geom["coordinates"]]
        elif gtype == "MultiPolygon":
            polys = geom["coordinates"]
        else:
            continue
        for rings in polys:
            yield rings, props


def load_label_vectors(path, class_property: str = "class_tag") -> LabelVectors:
    """Read glacier label polygons from a GeoJSON FeatureCollection.

    Only exterior rings are used; label polygons carry no holes. The class
    tag comes from the named feature property.
    """
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc.msg}", position=exc.pos) from exc
    polygons = []
    for rings, props in _geojson_polygons(doc):
        tag = props.get(class_property)
        if tag is None:
            raise ValidationError(f"{path}: feature missing {class_property!r} property")
        polygons.append((np.asarray(rings[0], dtype=float), tag))
    return LabelVectors(polygons=polygons)


def load_boundary(path) -> RegionBoundary:
    """Read a region boundary from a GeoJSON FeatureCollection of polygons."""
    with open(path, "r", encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: {exc.msg}", position=exc.pos) from exc
    rings = [np.asarray(r[0], dtype=float) for r, _ in _geojson_polygons(doc)]
    return RegionBoundary(rings=rings)


def load_shapefile_vectors(shp_path, class_values: dict[int, str] | None = None) -> LabelVectors:
    """Read polygon records from an ESRI shapefile (.shp + optional .dbf).

    The class tag is taken from the first text field of the companion .dbf
    whose value is one of the known tags; ``class_values`` can remap numeric
    codes instead. Without a .dbf everything is tagged clean_ice.
    """
    rings = _read_shp_polygons(shp_path)
    record_tags = _read_dbf_tags(str(shp_path)[:-4] + ".dbf", class_values)
    polygons = []
    for ring, recno in rings:
        tag = record_tags[recno] if recno < len(record_tags) else "clean_ice"
        polygons.append((ring, tag))
    return LabelVectors(polygons=polygons)


def _read_shp_polygons(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 100 or struct.unpack(">i", blob[:4])[0] != 9994:
        raise ParseError(f"{path}: not a shapefile", position=0)
    out = []
    pos = 100
    recno = 0
    while pos + 8 <= len(blob):
        _, length = struct.unpack(">ii", blob[pos : pos + 8])
        content = blob[pos + 8 : pos + 8 + 2 * length]
        pos += 8 + 2 * length
        (shape_type,) = struct.unpack("<i", content[:4])
        if shape_type == 0:  # null shape
            recno += 1
            continue
        if shape_type != 5:
            raise ParseError(f"{path}: unsupported shape type {shape_type}")
        num_parts, num_points = struct.unpack("<ii", content[36:44])
        parts = struct.unpack(f"<{num_parts}i", content[44 : 44 + 4 * num_parts])
        pts_off = 44 + 4 * num_parts
        pts = np.frombuffer(
            content[pts_off : pts_off + 16 * num_points], dtype="<f8"
        ).reshape(num_points, 2)
        bounds = list(parts) + [num_points]
        for k in range(num_parts):
            out.append((pts[bounds[k] : bounds[k + 1]].copy(), recno))
        recno += 1
    return out


def _read_dbf_tags(path, class_values) -> list[str]:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError:
        return []
    n_records = struct.unpack("<i", blob[4:8])[0]
    header_size, record_size = struct.unpack("<hh", blob[8:12])
    fields = []
    off = 32
    while blob[off] != 0x0D:
        flen = blob[off + 16]
        fields.append(flen)
        off += 32
    tags_by_record = []
    for r in range(n_records):
        rec = blob[header_size + r * record_size : header_size + (r + 1) * record_size]
        tag = None
        p = 1  # skip deletion flag
        for flen in fields:
            raw = rec[p : p + flen].decode("ascii", "replace").strip()
            p += flen
            if tag is None:
                if raw in CLASS_TAGS:
                    tag = raw
                elif class_values and raw.isdigit() and int(raw) in class_values:
                    tag = class_values[int(raw)]
        tags_by_record.append(tag or "clean_ice")
    return tags_by_record
