"""Mask ↔ polygon conversion with exact round-trip guarantees.

Components are 4-connected; boundaries are traced along pixel edges (not
through pixel centers), so rasterizing the traced polygons reproduces the
source mask exactly. Holes are kept as interior rings and rasterization is
even-odd, which makes the inverse property independent of ring orientation.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ParseError, ValidationError
from .geodata import CLASS_CODE, GeoTransform, _ring_cover_mask, _rings_to_pixel

_CODE_TO_TAG = {code: tag for tag, code in CLASS_CODE.items()}

# directions in pixel-corner space (x right, y down): 0=+x, 1=+y, 2=-x, 3=-y
_STEP = {0: (1, 0), 1: (0, 1), 2: (-1, 0), 3: (0, -1)}


@dataclass
class PolygonFeature:
    """One connected region: exterior ring first, holes after."""

    rings: list[np.ndarray]
    class_tag: str
    mean_probability: float = 1.0
    pixel_area: int = 0

    def __post_init__(self):
        checked = []
        for ring in self.rings:
            arr = np.asarray(ring, dtype=float)
            if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 4:
                raise ValidationError(f"ring must be Nx2 with N >= 4, got {arr.shape}")
            if not np.array_equal(arr[0], arr[-1]):
                raise ValidationError(
                    f"ring is not closed: first {arr[0]} != last {arr[-1]}"
                )
            checked.append(arr)
        if not checked:
            raise ValidationError("feature has no rings")
        self.rings = checked


@dataclass
class PolygonSet:
    features: list[PolygonFeature] = field(default_factory=list)
    crs_code: str = "unknown"
    model_id: str | None = None
    created_at: str | None = None


def _corner_to_map(ring_px: np.ndarray, t: GeoTransform) -> np.ndarray:
    x = t.origin_x + ring_px[:, 0] * t.pixel_width + ring_px[:, 1] * t.rot_x
    y = t.origin_y + ring_px[:, 0] * t.rot_y + ring_px[:, 1] * t.pixel_height
    return np.column_stack([x, y])


def _boundary_rings(comp: np.ndarray) -> list[np.ndarray]:
    """Trace all boundary rings of one component along pixel edges.

    Every exposed pixel side becomes one directed unit edge with the
    component on its right-hand side; rings are stitched by preferring the
    leftmost turn, which keeps each ring simple even where the boundary
    pinches at a shared corner.
    """
    up = np.zeros_like(comp)
    up[1:, :] = comp[:-1, :]
    down = np.zeros_like(comp)
    down[:-1, :] = comp[1:, :]
    lft = np.zeros_like(comp)
    lft[:, 1:] = comp[:, :-1]
    rgt = np.zeros_like(comp)
    rgt[:, :-1] = comp[:, 1:]

    edges: dict[tuple[int, int], dict[int, tuple[int, int]]] = {}

    def add(x0, y0, d):
        dx, dy = _STEP[d]
        edges.setdefault((x0, y0), {})[d] = (x0 + dx, y0 + dy)

    for i, j in zip(*np.nonzero(comp & ~up)):
        add(int(j), int(i), 0)  # top side, walking +x
    for i, j in zip(*np.nonzero(comp & ~rgt)):
        add(int(j) + 1, int(i), 1)  # right side, walking +y
    for i, j in zip(*np.nonzero(comp & ~down)):
        add(int(j) + 1, int(i) + 1, 2)  # bottom side, walking -x
    for i, j in zip(*np.nonzero(comp & ~lft)):
        add(int(j), int(i) + 1, 3)  # left side, walking -y

    rings = []
    while edges:
        v0 = next(iter(edges))
        outs = edges[v0]
        d, v1 = next(iter(outs.items()))
        del outs[d]
        if not outs:
            del edges[v0]
        ring = [v0, v1]
        while ring[-1] != v0:
            v = ring[-1]
            outs = edges[v]
            for nd in ((d + 3) % 4, d, (d + 1) % 4):  # left, straight, right
                if nd in outs:
                    break
            else:  # pragma: no cover - boundary edge sets always close
                raise AssertionError(f"boundary does not close at {v}")
            nxt = outs.pop(nd)
            if not outs:
                del edges[v]
            if nd == d:
                ring[-1] = nxt  # collapse collinear run
            else:
                ring.append(nxt)
                d = nd
        rings.append(np.asarray(ring, dtype=float))
    return rings


def _signed_area(ring: np.ndarray) -> float:
    x, y = ring[:, 0], ring[:, 1]
    return 0.5 * float(np.sum(x[:-1] * y[1:] - x[1:] * y[:-1]))


def polygonize(
    mask: np.ndarray,
    transform: GeoTransform,
    min_area: int = 16,
    probabilities: np.ndarray | None = None,
) -> PolygonSet:
    """Trace every 4-connected component of every class into a feature.

    ``probabilities`` may give a per-class probability grid, indexed as
    probabilities[class_code - 1], to fill mean_probability; otherwise the
    mean probability defaults to 1. Components smaller than ``min_area``
    pixels are dropped.
    """
    mask = np.asarray(mask)
    features = []
    for code in sorted(_CODE_TO_TAG):
        tag = _CODE_TO_TAG[code]
        class_mask = mask == code
        if not class_mask.any():
            continue
        labels, n = ndimage.label(class_mask)  # default structure = 4-connectivity
        for comp_id in range(1, n + 1):
            comp = labels == comp_id
            area = int(comp.sum())
            if area < min_area:
                continue
            rings_px = _boundary_rings(comp)
            # exterior ring first: positive signed area in (x right, y down)
            rings_px.sort(key=_signed_area, reverse=True)
            if probabilities is not None:
                mean_prob = float(np.mean(probabilities[code - 1][comp]))
            else:
                mean_prob = 1.0
            features.append(
                PolygonFeature(
                    rings=[_corner_to_map(r, transform) for r in rings_px],
                    class_tag=tag,
                    mean_probability=mean_prob,
                    pixel_area=area,
                )
            )
    return PolygonSet(features=features, crs_code=transform.crs_code)


def rasterize_polygons(
    ps: PolygonSet, transform: GeoTransform, width: int, height: int
) -> tuple[np.ndarray, int]:
    """Paint features back onto a class grid; inverse of polygonize.

    Rasterization is even-odd over each feature's rings, so holes subtract.
    Returns the grid and the number of features that had geometry outside
    the grid extent (clipped silently).
    """
    grid = np.zeros((height, width), dtype=np.uint8)
    clipped = 0
    for feat in ps.features:
        rings_px = _rings_to_pixel(feat.rings, transform)
        cover = np.zeros((height, width), dtype=bool)
        for ring_px in rings_px:
            cover ^= _ring_cover_mask(ring_px, width, height)
        all_px = np.concatenate(rings_px)
        if (
            all_px[:, 0].min() < 0
            or all_px[:, 1].min() < 0
            or all_px[:, 0].max() > width
            or all_px[:, 1].max() > height
        ):
            clipped += 1
        grid[cover] = CLASS_CODE[feat.class_tag]
    return grid, clipped


# ---------------------------------------------------------------------------
# Simplification

def _perp_distances(a: np.ndarray, b: np.ndarray, pts: np.ndarray) -> np.ndarray:
    ab = b - a
    rel = pts - a
    norm = float(np.hypot(ab[0], ab[1]))
    if norm == 0:
        return np.hypot(rel[:, 0], rel[:, 1])
    return np.abs(ab[0] * rel[:, 1] - ab[1] * rel[:, 0]) / norm


def _douglas_peucker(points: np.ndarray, tolerance: float) -> np.ndarray:
    """Kept-vertex mask for an open polyline; endpoints always kept."""
    n = len(points)
    keep = np.zeros(n, dtype=bool)
    keep[0] = keep[-1] = True
    stack = [(0, n - 1)]
    while stack:
        lo, hi = stack.pop()
        if hi <= lo + 1:
            continue
        d = _perp_distances(points[lo], points[hi], points[lo + 1 : hi])
        k = int(np.argmax(d))
        if d[k] > tolerance:
            idx = lo + 1 + k
            keep[idx] = True
            stack.append((lo, idx))
            stack.append((idx, hi))
    return keep


def simplify_ring(ring: np.ndarray, tolerance: float) -> np.ndarray:
    """Douglas-Peucker on a closed ring; keeps closure, never adds vertices.

    The ring is split at vertex 0 and at the vertex farthest from it, and
    each open arc is simplified independently; this avoids collapsing the
    ring onto a single chord.
    """
    if tolerance < 0:
        raise ValidationError("tolerance must be nonnegative")
    if tolerance == 0 or len(ring) <= 4:
        return ring.copy()
    pts = ring[:-1]
    far = int(np.argmax(np.hypot(*(pts - pts[0]).T)))
    if far == 0:  # all vertices coincide
        return ring.copy()
    arc1 = pts[: far + 1]
    arc2 = np.vstack([pts[far:], pts[:1]])
    out = np.vstack([arc1[_douglas_peucker(arc1, tolerance)][:-1],
                     arc2[_douglas_peucker(arc2, tolerance)][:-1]])
    if len(out) < 3:
        return ring.copy()
    return np.vstack([out, out[:1]])


def simplify(ps: PolygonSet, tolerance: float) -> PolygonSet:
    """Simplify every ring of every feature; tolerance 0 is the identity."""
    features = [
        PolygonFeature(
            rings=[simplify_ring(r, tolerance) for r in feat.rings],
            class_tag=feat.class_tag,
            mean_probability=feat.mean_probability,
            pixel_area=feat.pixel_area,
        )
        for feat in ps.features
    ]
    return PolygonSet(
        features=features, crs_code=ps.crs_code,
        model_id=ps.model_id, created_at=ps.created_at,
    )


# ---------------------------------------------------------------------------
# GeoJSON wire format

def to_geojson(ps: PolygonSet) -> str:
    features = []
    for feat in ps.features:
        features.append(
            {
                "type": "Feature",
                "geometry": {
                    "type": "Polygon",
                    "coordinates": [r.tolist() for r in feat.rings],
                },
                "properties": {
                    "class_tag": feat.class_tag,
                    "class": feat.class_tag,
                    "mean_probability": feat.mean_probability,
                    "mean_prob": feat.mean_probability,
                    "pixel_area": feat.pixel_area,
                    "model_id": ps.model_id,
                    "created_at": ps.created_at,
                },
            }
        )
    doc = {
        "type": "FeatureCollection",
        "properties": {"crs_code": ps.crs_code},
        "features": features,
    }
    return json.dumps(doc)


def from_geojson(text: str) -> PolygonSet:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid GeoJSON: {exc.msg}", position=exc.pos) from exc
    if doc.get("type") != "FeatureCollection":
        raise ParseError(f"expected FeatureCollection, got {doc.get('type')!r}")
    ps = PolygonSet(crs_code=(doc.get("properties") or {}).get("crs_code", "unknown"))
    for k, f in enumerate(doc.get("features", [])):
        geom = f.get("geometry") or {}
        if geom.get("type") != "Polygon":
            raise ParseError(f"feature {k}: only Polygon geometry is supported")
        props = f.get("properties") or {}
        tag = props.get("class_tag", props.get("class"))
        if tag not in CLASS_CODE:
            raise ParseError(f"feature {k}: unknown class {tag!r}")
        try:
            rings = [np.asarray(r, dtype=float) for r in geom["coordinates"]]
            feat = PolygonFeature(
                rings=rings,
                class_tag=tag,
                mean_probability=float(
                    props.get("mean_probability", props.get("mean_prob", 1.0))
                ),
                pixel_area=int(props.get("pixel_area", 0)),
            )
        except (ValidationError, ValueError, TypeError) as exc:
            raise ParseError(f"feature {k}: {exc}") from exc
        if ps.model_id is None:
            ps.model_id = props.get("model_id")
        if ps.created_at is None:
            ps.created_at = props.get("created_at")
        ps.features.append(feat)
    return ps
