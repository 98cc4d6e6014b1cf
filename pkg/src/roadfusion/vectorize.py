"""Turn per-class labelled points into a vectorised map.

Per class the chain is: statistical outlier removal, nearest-neighbour
clustering, then per cluster either an alpha-shape polygon (pedestrian
crossings) or an orthogonal least-squares line segment (lane dividers and
stop lines).  Maps serialise as GeoJSON FeatureCollections.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay, cKDTree, QhullError
from shapely.geometry import MultiLineString, Polygon
from shapely.geometry.polygon import orient
from shapely.ops import polygonize, unary_union

from .errors import InputError
from .fusion import LabeledPoints
from .raster import LANE_DIVIDER, PEDESTRIAN_CROSSING, STOP_LINE

ELEMENT_CLASSES = (LANE_DIVIDER, STOP_LINE, PEDESTRIAN_CROSSING)

# Vertex equality tolerance for map-level duplicate removal.
UNION_DECIMALS = 6


class DegenerateCluster(InputError):
    """Cluster has too few points or no usable spread for the requested fit."""


@dataclass(frozen=True)
class MapElement:
    """One vectorised map element: a polyline or a closed polygon ring.

    Polygon vertices are stored without the closing duplicate.  confidence
    is the cluster support normalised by the largest cluster of the same
    class in the map.
    """

    element_class: str
    vertices: np.ndarray
    is_polygon: bool
    support_count: int = 0
    confidence: float = 1.0

    def __post_init__(self):
        v = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 2)
        if not np.all(np.isfinite(v)):
            raise InputError("element vertices must be finite")
        if self.element_class not in ELEMENT_CLASSES:
            raise InputError(f"unknown element class {self.element_class!r}")
        if self.is_polygon:
            if v.shape[0] < 3:
                raise InputError("polygon needs >= 3 vertices")
            ring = Polygon(v)
            if not ring.is_valid or ring.area <= 0:
                raise InputError("polygon ring must be simple with positive area")
        elif v.shape[0] < 2:
            raise InputError("polyline needs >= 2 vertices")
        v.setflags(write=False)
        object.__setattr__(self, "vertices", v)

    def length_or_perimeter(self) -> float:
        v = self.vertices
        if self.is_polygon:
            v = np.vstack([v, v[:1]])
        return float(np.sum(np.linalg.norm(np.diff(v, axis=0), axis=1)))


@dataclass(frozen=True)
class VectorMap:
    elements: tuple[MapElement, ...] = ()
    crs_note: str = "map"

    def __post_init__(self):
        object.__setattr__(self, "elements", tuple(self.elements))

    def __len__(self) -> int:
        return len(self.elements)

    def by_class(self, element_class: str) -> list[MapElement]:
        return [e for e in self.elements if e.element_class == element_class]

    def classes(self) -> list[str]:
        return sorted({e.element_class for e in self.elements})


@dataclass(frozen=True)
class VectorizeConfig:
    sor_k: int = 16
    sor_n_sigma: float = 2.0
    cluster_radius: float = 0.5
    min_cluster_size: int = 10
    alpha: float = 0.5
    # Long line clusters are split into fixed arc-length chunks before
    # fitting so a single segment never has to approximate tens of metres
    # of possibly curved marking.
    split_length: float = 20.0
    split_interval: float = 10.0
    crs_note: str = "map"


def sor_denoise(points: np.ndarray, k: int = 16, n_sigma: float = 2.0) -> np.ndarray:
    """Statistical outlier removal.

    Drops points whose mean distance to their k nearest neighbours exceeds
    the global mean by more than n_sigma standard deviations.  Inputs with
    at most k points are returned unchanged.
    """
    if k < 1:
        raise InputError("sor_denoise needs k >= 1")
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if n <= k:
        return pts
    tree = cKDTree(pts[:, :3])
    dists, _ = tree.query(pts[:, :3], k=k + 1)
    mean_dist = dists[:, 1:].mean(axis=1)
    thresh = mean_dist.mean() + n_sigma * mean_dist.std()
    return pts[mean_dist <= thresh]


class _UnionFind:
    def __init__(self, n: int):
        self.parent = list(range(n))

    def find(self, a: int) -> int:
        parent = self.parent
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    def union(self, a: int, b: int) -> None:
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            self.parent[ra] = rb


def cluster_nn(points: np.ndarray, radius: float, min_cluster_size: int = 10) -> list[np.ndarray]:
    """Connected components of the proximity graph linking points within radius.

    Exact single-linkage at the given radius.  Points are bucketed into
    cells of half the radius: everything inside one cell is mutually
    within the radius (cell diagonal < radius), so dense regions collapse
    to a handful of cell nodes, and only nearby cell pairs are checked
    with true pairwise distances.  Returns index arrays into ``points``;
    components smaller than min_cluster_size are discarded as noise.
    Components are ordered by smallest member index, members ascending.
    """
    if radius <= 0:
        raise InputError("cluster radius must be positive")
    pts = np.asarray(points, dtype=np.float64)[:, :3]
    n = pts.shape[0]
    if n == 0:
        return []

    cell = radius / 2.0  # diagonal = radius * sqrt(3) / 2 < radius
    cell_idx = np.floor(pts / cell).astype(np.int64)
    cells, inverse = np.unique(cell_idx, axis=0, return_inverse=True)
    m = cells.shape[0]

    order = np.argsort(inverse, kind="stable")
    sorted_inv = inverse[order]
    starts = np.flatnonzero(np.diff(sorted_inv, prepend=sorted_inv[0] - 1))
    bounds = np.append(starts, n)
    members = [order[s:e] for s, e in zip(bounds[:-1], bounds[1:])]

    cell_of = {tuple(c): i for i, c in enumerate(cells)}
    uf = _UnionFind(m)
    reach = int(np.ceil(radius / cell))
    offsets = [
        (di, dj, dk)
        for di in range(-reach, reach + 1)
        for dj in range(-reach, reach + 1)
        for dk in range(-reach, reach + 1)
        if (di, dj, dk) > (0, 0, 0)  # half the neighbourhood; symmetry covers the rest
    ]
    # prune offsets whose closest box corners are already beyond the radius
    kept_offsets = []
    for off in offsets:
        gaps = [max(0, abs(d) - 1) * cell for d in off]
        if float(np.hypot(np.hypot(gaps[0], gaps[1]), gaps[2])) <= radius:
            kept_offsets.append(off)

    for i in range(m):
        ci = cells[i]
        pi = pts[members[i]]
        for off in kept_offsets:
            j = cell_of.get((ci[0] + off[0], ci[1] + off[1], ci[2] + off[2]))
            if j is None or uf.find(i) == uf.find(j):
                continue
            pj = pts[members[j]]
            d2 = np.sum((pi[:, None, :] - pj[None, :, :]) ** 2, axis=-1)
            if d2.min() <= radius * radius:
                uf.union(i, j)

    point_root = np.fromiter((uf.find(int(c)) for c in inverse), dtype=np.int64, count=n)
    order = np.argsort(point_root, kind="stable")
    sorted_roots = point_root[order]
    starts = np.flatnonzero(np.diff(sorted_roots, prepend=sorted_roots[0] - 1))
    bounds = np.append(starts, n)
    clusters = []
    for s, e in zip(bounds[:-1], bounds[1:]):
        comp = np.sort(order[s:e])
        if comp.size >= min_cluster_size:
            clusters.append(comp)
    clusters.sort(key=lambda c: int(c[0]))
    return clusters


def _circumradii(pts: np.ndarray, simplices: np.ndarray) -> np.ndarray:
    tri = pts[simplices]
    a = np.linalg.norm(tri[:, 0] - tri[:, 1], axis=1)
    b = np.linalg.norm(tri[:, 1] - tri[:, 2], axis=1)
    c = np.linalg.norm(tri[:, 2] - tri[:, 0], axis=1)
    cross = np.abs(
        (tri[:, 1, 0] - tri[:, 0, 0]) * (tri[:, 2, 1] - tri[:, 0, 1])
        - (tri[:, 1, 1] - tri[:, 0, 1]) * (tri[:, 2, 0] - tri[:, 0, 0])
    )
    area = 0.5 * cross
    with np.errstate(divide="ignore", invalid="ignore"):
        r = a * b * c / (4.0 * area)
    r[area <= 0] = np.inf
    return r


def alpha_shape_polygon(cluster: np.ndarray, alpha: float) -> np.ndarray:
    """Outer boundary ring of the alpha shape of 2D points (z dropped).

    A Delaunay triangle belongs to the alpha complex when its circumradius
    is at most ``alpha`` (the probing disk radius); the returned ring is
    the exterior of the largest polygon of the complex, counter-clockwise,
    without the closing duplicate vertex.
    """
    if alpha <= 0:
        raise InputError("alpha must be positive")
    pts = np.unique(np.asarray(cluster, dtype=np.float64)[:, :2], axis=0)
    if pts.shape[0] < 3:
        raise DegenerateCluster(f"alpha shape needs >= 3 distinct points, got {pts.shape[0]}")
    try:
        tri = Delaunay(pts)
    except QhullError as exc:
        raise DegenerateCluster(f"points are collinear: {exc}") from exc

    keep = _circumradii(pts, tri.simplices) <= alpha
    if not keep.any():
        raise DegenerateCluster("alpha too small: no triangle has circumradius <= alpha")

    kept = tri.simplices[keep]
    # The boundary is exactly the set of edges used by one kept triangle.
    edges = np.concatenate([kept[:, [0, 1]], kept[:, [1, 2]], kept[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    boundary = uniq[counts == 1]
    if boundary.shape[0] < 3:
        raise DegenerateCluster("alpha complex has no closed boundary")

    rings = list(polygonize(MultiLineString([(tuple(pts[i]), tuple(pts[j])) for i, j in boundary])))
    if not rings:
        raise DegenerateCluster("alpha boundary does not close into a ring")
    outer = max(rings, key=lambda p: p.area)
    ring = orient(outer, sign=1.0).exterior
    coords = np.asarray(ring.coords[:-1], dtype=np.float64)
    return coords


def fit_line_segment(cluster: np.ndarray) -> np.ndarray:
    """Orthogonal least-squares segment through a 2D cluster (z dropped).

    The direction is the principal axis of the centred covariance; the
    endpoints are the projections of the extreme points onto that line.
    """
    pts = np.asarray(cluster, dtype=np.float64)[:, :2]
    if pts.shape[0] < 2:
        raise DegenerateCluster(f"line fit needs >= 2 points, got {pts.shape[0]}")
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    cov = centered.T @ centered / pts.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals[1] <= 0:
        raise DegenerateCluster("cluster has zero spread")
    direction = eigvecs[:, 1]
    if direction[0] < 0 or (direction[0] == 0 and direction[1] < 0):
        direction = -direction
    t = centered @ direction
    return np.vstack([centroid + t.min() * direction, centroid + t.max() * direction])


def _split_by_arc_length(pts: np.ndarray, split_length: float, split_interval: float) -> list[np.ndarray]:
    """Chunk a line-like cluster along its principal axis when it is long."""
    centroid = pts[:, :2].mean(axis=0)
    centered = pts[:, :2] - centroid
    cov = centered.T @ centered / pts.shape[0]
    _, eigvecs = np.linalg.eigh(cov)
    t = centered @ eigvecs[:, 1]
    extent = float(t.max() - t.min())
    if extent <= split_length:
        return [pts]
    bins = np.floor((t - t.min()) / split_interval).astype(np.int64)
    return [pts[bins == b] for b in np.unique(bins)]


def _dedup_points(pts: np.ndarray) -> np.ndarray:
    rounded = np.round(pts, 9)
    rounded = np.where(rounded == 0.0, 0.0, rounded)
    _, idx = np.unique(rounded, axis=0, return_index=True)
    return pts[np.sort(idx)]


def vectorize_map(labeled: LabeledPoints, cfg: VectorizeConfig = VectorizeConfig()) -> VectorMap:
    """Full vectorisation of labelled points into map elements.

    Deterministic and invariant to input point order: points are sorted
    and exact duplicates dropped per class before any processing.
    """
    elements: list[MapElement] = []
    name_of = labeled.class_table
    for cid in sorted(set(labeled.class_ids.tolist())):
        klass = name_of.get(cid)
        if klass not in ELEMENT_CLASSES:
            continue
        pts = labeled.for_class(cid)
        pts = pts[np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))]
        pts = _dedup_points(pts)
        pts = sor_denoise(pts, k=cfg.sor_k, n_sigma=cfg.sor_n_sigma)
        clusters = cluster_nn(pts, cfg.cluster_radius, cfg.min_cluster_size)

        class_elements: list[MapElement] = []
        for members in clusters:
            cluster_pts = pts[members]
            if klass == PEDESTRIAN_CROSSING:
                try:
                    ring = alpha_shape_polygon(cluster_pts, cfg.alpha)
                except DegenerateCluster:
                    continue
                class_elements.append(MapElement(
                    element_class=klass, vertices=ring, is_polygon=True,
                    support_count=int(members.size),
                ))
            else:
                for chunk in _split_by_arc_length(cluster_pts, cfg.split_length, cfg.split_interval):
                    try:
                        seg = fit_line_segment(chunk)
                    except DegenerateCluster:
                        continue
                    class_elements.append(MapElement(
                        element_class=klass, vertices=seg, is_polygon=False,
                        support_count=int(chunk.shape[0]),
                    ))

        if class_elements:
            top = max(e.support_count for e in class_elements)
            for e in class_elements:
                elements.append(MapElement(
                    element_class=e.element_class, vertices=e.vertices,
                    is_polygon=e.is_polygon, support_count=e.support_count,
                    confidence=e.support_count / top if top else 1.0,
                ))
    return VectorMap(elements=tuple(elements), crs_note=cfg.crs_note)


def _element_key(e: MapElement) -> tuple:
    v = np.round(e.vertices, UNION_DECIMALS)
    v = np.where(v == 0.0, 0.0, v)
    return (e.element_class, e.is_polygon, v.shape[0], tuple(v.ravel().tolist()))


def union_maps(a: VectorMap, b: VectorMap) -> VectorMap:
    """Concatenate two maps, dropping exact duplicates (same class, same
    vertices within the union tolerance)."""
    seen: set[tuple] = set()
    out: list[MapElement] = []
    for e in list(a.elements) + list(b.elements):
        key = _element_key(e)
        if key in seen:
            continue
        seen.add(key)
        out.append(e)
    note = a.crs_note if a.crs_note == b.crs_note else f"{a.crs_note}|{b.crs_note}"
    return VectorMap(elements=tuple(out), crs_note=note)


# ---------------------------------------------------------------------------
# GeoJSON serialisation


def map_to_geojson(vm: VectorMap) -> dict:
    features = []
    for e in vm.elements:
        if e.is_polygon:
            ring = e.vertices.tolist() + [e.vertices[0].tolist()]
            geometry = {"type": "Polygon", "coordinates": [ring]}
        else:
            geometry = {"type": "LineString", "coordinates": e.vertices.tolist()}
        features.append({
            "type": "Feature",
            "geometry": geometry,
            "properties": {
                "class": e.element_class,
                "support_count": e.support_count,
                "confidence": e.confidence,
            },
        })
    return {
        "type": "FeatureCollection",
        "properties": {"crs_note": vm.crs_note},
        "features": features,
    }


def map_from_geojson(data: dict) -> VectorMap:
    if data.get("type") != "FeatureCollection":
        raise InputError("expected a GeoJSON FeatureCollection")
    elements = []
    for feat in data.get("features", []):
        geom = feat.get("geometry") or {}
        props = feat.get("properties") or {}
        klass = props.get("class")
        if klass not in ELEMENT_CLASSES:
            raise InputError(f"feature has unknown class {klass!r}")
        gtype = geom.get("type")
        if gtype == "Polygon":
            ring = np.asarray(geom["coordinates"][0], dtype=np.float64)
            if ring.shape[0] >= 2 and np.allclose(ring[0], ring[-1]):
                ring = ring[:-1]
            elements.append(MapElement(
                element_class=klass, vertices=ring, is_polygon=True,
                support_count=int(props.get("support_count", 0)),
                confidence=float(props.get("confidence", 1.0)),
            ))
        elif gtype == "LineString":
            coords = np.asarray(geom["coordinates"], dtype=np.float64)
            elements.append(MapElement(
                element_class=klass, vertices=coords, is_polygon=False,
                support_count=int(props.get("support_count", 0)),
                confidence=float(props.get("confidence", 1.0)),
            ))
        else:
            raise InputError(f"unsupported geometry type {gtype!r}")
    note = (data.get("properties") or {}).get("crs_note", "map")
    return VectorMap(elements=tuple(elements), crs_note=note)


def write_map_geojson(vm: VectorMap, path: str | Path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(map_to_geojson(vm), indent=2) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def read_map_geojson(path: str | Path) -> VectorMap:
    path = Path(path)
    if not path.exists():
        raise InputError(f"map file not found: {path}")
    return map_from_geojson(json.loads(path.read_text(encoding="utf-8")))
