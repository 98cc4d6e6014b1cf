from __future__ import annotations

import numpy as np
import pytest

from roadfusion.errors import InputError
from roadfusion.fusion import LabeledPoints, Provenance
from roadfusion.raster import DEFAULT_CLASS_TABLE
from roadfusion.vectorize import (
    DegenerateCluster,
    MapElement,
    VectorizeConfig,
    VectorMap,
    alpha_shape_polygon,
    cluster_nn,
    fit_line_segment,
    map_from_geojson,
    map_to_geojson,
    read_map_geojson,
    sor_denoise,
    union_maps,
    vectorize_map,
    write_map_geojson,
)


def as3d(xy):
    xy = np.asarray(xy, dtype=np.float64)
    return np.column_stack([xy, np.zeros(len(xy))])


def brute_force_knn_mean(pts, k):
    pts = np.asarray(pts)[:, :3]
    out = np.empty(len(pts))
    for i in range(len(pts)):
        d = np.linalg.norm(pts - pts[i], axis=1)
        d = np.sort(d)[1:k + 1]
        out[i] = d.mean()
    return out


class TestSorDenoise:
    def test_far_outlier_removed(self):
        rng = np.random.default_rng(0)
        cluster = rng.normal(0, 0.2, (100, 3))
        outlier = np.array([[10.0, 0.0, 0.0]])
        pts = np.vstack([cluster, outlier])
        kept = sor_denoise(pts, k=8, n_sigma=2.0)
        assert len(kept) == 100
        assert not any(np.allclose(p, outlier[0]) for p in kept)
        # cross-check the decision against a brute-force kNN oracle
        means = brute_force_knn_mean(pts, 8)
        thresh = means.mean() + 2.0 * means.std()
        assert np.sum(means <= thresh) == 100

    def test_identical_points_all_kept(self):
        pts = np.zeros((20, 3))
        assert len(sor_denoise(pts, k=4, n_sigma=2.0)) == 20

    def test_single_point_unchanged(self):
        pts = np.array([[1.0, 2.0, 3.0]])
        assert np.array_equal(sor_denoise(pts, k=8, n_sigma=2.0), pts)

    def test_at_most_k_points_unchanged(self):
        pts = np.random.default_rng(1).normal(size=(8, 3))
        assert np.array_equal(sor_denoise(pts, k=8, n_sigma=2.0), pts)

    def test_output_is_subset_in_order(self):
        rng = np.random.default_rng(2)
        pts = rng.normal(size=(200, 3))
        kept = sor_denoise(pts, k=8, n_sigma=1.0)
        rows = {tuple(p) for p in pts}
        assert all(tuple(p) in rows for p in kept)

    def test_matches_oracle_decision(self):
        rng = np.random.default_rng(3)
        pts = np.vstack([rng.normal(0, 0.3, (60, 3)), rng.uniform(-4, 4, (10, 3))])
        kept = sor_denoise(pts, k=6, n_sigma=1.5)
        means = brute_force_knn_mean(pts, 6)
        thresh = means.mean() + 1.5 * means.std()
        expected = pts[means <= thresh]
        assert np.array_equal(kept, expected)


class TestClusterNN:
    def test_two_blobs(self):
        rng = np.random.default_rng(0)
        a = rng.normal(0, 0.1, (50, 2))
        b = rng.normal(0, 0.1, (50, 2)) + [5.0, 0.0]
        clusters = cluster_nn(as3d(np.vstack([a, b])), 0.5, min_cluster_size=10)
        assert len(clusters) == 2
        assert {len(c) for c in clusters} == {50}

    def test_chain_links_transitively(self):
        xs = np.arange(0, 10, 0.4)
        pts = as3d(np.column_stack([xs, np.zeros(len(xs))]))
        clusters = cluster_nn(pts, 0.5, min_cluster_size=2)
        assert len(clusters) == 1
        assert len(clusters[0]) == len(xs)

    def test_small_clusters_dropped(self):
        pts = as3d([[0, 0], [0.1, 0], [10, 10]])
        clusters = cluster_nn(pts, 0.5, min_cluster_size=2)
        assert len(clusters) == 1
        assert clusters[0].tolist() == [0, 1]

    def test_matches_union_find_oracle_on_random_scenes(self):
        # O(n^2) union-find oracle, 50 random scenes
        def oracle(pts, radius, min_size):
            n = len(pts)
            parent = list(range(n))

            def find(a):
                while parent[a] != a:
                    parent[a] = parent[parent[a]]
                    a = parent[a]
                return a

            for i in range(n):
                for j in range(i + 1, n):
                    if np.linalg.norm(pts[i, :3] - pts[j, :3]) <= radius:
                        ri, rj = find(i), find(j)
                        if ri != rj:
                            parent[ri] = rj
            groups: dict[int, list[int]] = {}
            for i in range(n):
                groups.setdefault(find(i), []).append(i)
            comps = [np.asarray(sorted(v)) for v in groups.values() if len(v) >= min_size]
            comps.sort(key=lambda c: c[0])
            return comps

        rng = np.random.default_rng(42)
        for _ in range(50):
            n = int(rng.integers(5, 200))
            z = rng.uniform(-1, 1, n) if rng.random() < 0.3 else np.zeros(n)
            pts = np.column_stack([rng.uniform(-5, 5, (n, 2)), z])
            radius = float(rng.uniform(0.2, 1.2))
            min_size = int(rng.integers(1, 4))
            got = cluster_nn(pts, radius, min_size)
            want = oracle(pts, radius, min_size)
            assert len(got) == len(want)
            for g, w in zip(got, want):
                assert np.array_equal(g, w)

    def test_rejects_bad_radius(self):
        with pytest.raises(InputError):
            cluster_nn(np.zeros((3, 3)), 0.0)


class TestAlphaShape:
    def test_dense_rectangle_area_and_perimeter(self):
        xs = np.arange(0, 3.0 + 1e-9, 0.05)
        ys = np.arange(0, 2.0 + 1e-9, 0.05)
        gx, gy = np.meshgrid(xs, ys)
        pts = as3d(np.column_stack([gx.ravel(), gy.ravel()]))
        ring = alpha_shape_polygon(pts, alpha=0.5)
        # shoelace area and perimeter oracles against the known rectangle
        x, y = ring[:, 0], ring[:, 1]
        area = 0.5 * abs(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))
        per = np.sum(np.linalg.norm(np.diff(np.vstack([ring, ring[:1]]), axis=0), axis=1))
        assert abs(area - 6.0) / 6.0 < 0.05
        assert abs(per - 10.0) / 10.0 < 0.05

    def test_ring_is_ccw(self):
        rng = np.random.default_rng(1)
        pts = as3d(rng.uniform(0, 2, (200, 2)))
        ring = alpha_shape_polygon(pts, alpha=1.0)
        x, y = ring[:, 0], ring[:, 1]
        signed = 0.5 * np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)
        assert signed > 0

    def test_triangle_limit(self):
        pts = as3d([[0, 0], [1, 0], [0, 1]])
        ring = alpha_shape_polygon(pts, alpha=100.0)
        assert ring.shape == (3, 2)
        assert {tuple(v) for v in ring} == {(0, 0), (1, 0), (0, 1)}

    def test_collinear_degenerate(self):
        pts = as3d([[i, 2 * i] for i in range(10)])
        with pytest.raises(DegenerateCluster):
            alpha_shape_polygon(pts, alpha=1.0)

    def test_too_few_points(self):
        with pytest.raises(DegenerateCluster):
            alpha_shape_polygon(as3d([[0, 0], [1, 1]]), alpha=1.0)

    def test_alpha_too_small(self):
        pts = as3d([[0, 0], [1, 0], [0, 1], [1, 1]])
        with pytest.raises(DegenerateCluster):
            alpha_shape_polygon(pts, alpha=0.01)

    def test_large_alpha_equals_convex_hull(self):
        # brute-force hull oracle: an edge is on the hull iff every other
        # point lies on one side of it
        def brute_hull_vertices(pts2):
            n = len(pts2)
            verts = set()
            for i in range(n):
                for j in range(n):
                    if i == j:
                        continue
                    d = pts2[j] - pts2[i]
                    rel = pts2 - pts2[i]
                    side = d[0] * rel[:, 1] - d[1] * rel[:, 0]
                    others = np.delete(side, [i, j])
                    if np.all(others > 1e-12) or np.all(others < -1e-12):
                        verts.add(i)
                        verts.add(j)
            return {tuple(np.round(pts2[v], 9)) for v in verts}

        rng = np.random.default_rng(7)
        for _ in range(10):
            pts2 = rng.uniform(-3, 3, (int(rng.integers(10, 50)), 2))
            ring = alpha_shape_polygon(as3d(pts2), alpha=1e6)
            ring_pts = {tuple(np.round(v, 9)) for v in ring}
            assert ring_pts == brute_hull_vertices(pts2)

    def test_concave_shape_not_convex_hull(self):
        # an L-shape: alpha shape must carve the notch out
        xs = np.arange(0, 4.0, 0.1)
        ys = np.arange(0, 4.0, 0.1)
        gx, gy = np.meshgrid(xs, ys)
        keep = ~((gx.ravel() > 2) & (gy.ravel() > 2))
        pts = as3d(np.column_stack([gx.ravel()[keep], gy.ravel()[keep]]))
        ring = alpha_shape_polygon(pts, alpha=0.4)
        x, y = ring[:, 0], ring[:, 1]
        area = 0.5 * abs(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))
        assert area < 13.0  # full square would be ~16, the L is ~12


class TestFitLineSegment:
    def test_exact_collinear_data(self):
        xs = np.linspace(0, 5, 20)
        pts = as3d(np.column_stack([xs, 2 * xs + 1]))
        seg = fit_line_segment(pts)
        assert seg.shape == (2, 2)
        for x, y in seg:
            assert abs(y - (2 * x + 1)) < 1e-9
        assert abs(seg[0, 0] - 0.0) < 1e-9
        assert abs(seg[1, 0] - 5.0) < 1e-9

    def test_symmetric_noise_direction(self):
        # closed-form covariance eigenvector oracle
        rng = np.random.default_rng(4)
        xs = rng.uniform(-5, 5, 5000)
        ys = rng.normal(0, 0.05, 5000)
        pts = as3d(np.column_stack([xs, ys]))
        seg = fit_line_segment(pts)
        d = seg[1] - seg[0]
        d = d / np.linalg.norm(d)
        angle = np.degrees(np.arctan2(abs(d[1]), abs(d[0])))
        assert angle < 0.5
        pts2 = pts[:, :2]
        cov = np.cov(pts2.T, bias=True)
        evals, evecs = np.linalg.eigh(cov)
        principal = evecs[:, np.argmax(evals)]
        assert abs(abs(d @ principal) - 1.0) < 1e-6

    def test_single_point_degenerate(self):
        with pytest.raises(DegenerateCluster):
            fit_line_segment(as3d([[1, 1]]))

    def test_zero_spread_degenerate(self):
        with pytest.raises(DegenerateCluster):
            fit_line_segment(as3d([[1, 1], [1, 1], [1, 1]]))

    def test_endpoints_on_fitted_line(self):
        rng = np.random.default_rng(6)
        pts2 = rng.uniform(-3, 3, (100, 2))
        seg = fit_line_segment(as3d(pts2))
        centroid = pts2.mean(axis=0)
        cov = np.cov(pts2.T, bias=True)
        evals, evecs = np.linalg.eigh(cov)
        direction = evecs[:, np.argmax(evals)]
        for endpoint in seg:
            off = endpoint - centroid
            perp = off - (off @ direction) * direction
            assert np.linalg.norm(perp) < 1e-9


def labeled(points_by_class: dict[int, np.ndarray]) -> LabeledPoints:
    rows = []
    cids = []
    for cid, pts in points_by_class.items():
        pts = np.asarray(pts, dtype=np.float64)
        if pts.shape[1] == 2:
            pts = np.column_stack([pts, np.zeros(len(pts))])
        rows.append(np.column_stack([pts, np.zeros(len(pts))]))
        cids.append(np.full(len(pts), cid, dtype=np.int32))
    if rows:
        xyzi = np.vstack(rows)
        class_ids = np.concatenate(cids)
    else:
        xyzi = np.empty((0, 4))
        class_ids = np.empty((0,), dtype=np.int32)
    return LabeledPoints(
        xyzi=xyzi, class_ids=class_ids,
        provenance=np.full(len(class_ids), Provenance.MERGED, dtype=np.int8),
        class_table=dict(DEFAULT_CLASS_TABLE),
    )


def synthetic_crossing_and_stop():
    rng = np.random.default_rng(11)
    crossing = rng.uniform([0, 0], [3, 2], (800, 2))
    stop = np.column_stack([rng.uniform(6, 12, 400), rng.normal(0, 0.05, 400)])
    return labeled({3: crossing, 2: stop})


class TestVectorizeMap:
    CFG = VectorizeConfig(min_cluster_size=10)

    def test_empty_input(self):
        vm = vectorize_map(labeled({}), self.CFG)
        assert len(vm) == 0

    def test_one_crossing_one_stop_line(self):
        vm = vectorize_map(synthetic_crossing_and_stop(), self.CFG)
        crossings = vm.by_class("pedestrian_crossing")
        stops = vm.by_class("stop_line")
        assert len(crossings) == 1 and crossings[0].is_polygon
        assert len(stops) == 1 and not stops[0].is_polygon
        assert crossings[0].confidence == 1.0
        # support is the post-denoise cluster size
        assert 700 <= crossings[0].support_count <= 800

    def test_duplicated_points_equal_single(self):
        lp = synthetic_crossing_and_stop()
        doubled = LabeledPoints(
            xyzi=np.vstack([lp.xyzi, lp.xyzi]),
            class_ids=np.concatenate([lp.class_ids, lp.class_ids]),
            provenance=np.concatenate([lp.provenance, lp.provenance]),
            class_table=lp.class_table,
        )
        v1 = vectorize_map(lp, self.CFG)
        v2 = vectorize_map(doubled, self.CFG)
        assert len(v1) == len(v2)
        for a, b in zip(v1.elements, v2.elements):
            assert a.element_class == b.element_class
            assert np.allclose(a.vertices, b.vertices)

    def test_permutation_invariance(self):
        lp = synthetic_crossing_and_stop()
        rng = np.random.default_rng(0)
        perm = rng.permutation(len(lp))
        shuffled = LabeledPoints(
            xyzi=lp.xyzi[perm], class_ids=lp.class_ids[perm],
            provenance=lp.provenance[perm], class_table=lp.class_table,
        )
        v1 = vectorize_map(lp, self.CFG)
        v2 = vectorize_map(shuffled, self.CFG)
        assert len(v1) == len(v2)
        for a, b in zip(v1.elements, v2.elements):
            assert a.element_class == b.element_class
            assert np.array_equal(a.vertices, b.vertices)
            assert a.support_count == b.support_count

    def test_long_divider_split_into_chunks(self):
        rng = np.random.default_rng(3)
        xs = rng.uniform(0, 45, 4000)
        pts = np.column_stack([xs, rng.normal(0, 0.03, 4000)])
        vm = vectorize_map(labeled({1: pts}), self.CFG)
        dividers = vm.by_class("lane_divider")
        assert len(dividers) == 5  # 45 m at 10 m intervals
        for e in dividers:
            d = e.vertices[1] - e.vertices[0]
            assert abs(d[1] / d[0]) < 0.05

    def test_confidence_normalised_by_largest_cluster(self):
        rng = np.random.default_rng(5)
        big = rng.uniform([0, 0], [3, 2], (600, 2))
        small = rng.uniform([10, 10], [12, 11.5], (150, 2))
        vm = vectorize_map(labeled({3: np.vstack([big, small])}), self.CFG)
        confs = sorted(e.confidence for e in vm.elements)
        assert confs[-1] == 1.0
        assert 0.0 < confs[0] < 1.0


class TestUnionMaps:
    def _map(self, *elements):
        return VectorMap(elements=tuple(elements))

    def _seg(self, x0, klass="lane_divider"):
        return MapElement(element_class=klass,
                          vertices=np.array([[x0, 0.0], [x0 + 1.0, 0.0]]),
                          is_polygon=False, support_count=5, confidence=1.0)

    def test_union_with_empty(self):
        a = self._map(self._seg(0))
        out = union_maps(a, self._map())
        assert len(out) == 1

    def test_idempotent(self):
        a = self._map(self._seg(0), self._seg(5))
        out = union_maps(a, a)
        assert len(out) == 2

    def test_disjoint_concatenation(self):
        a = self._map(self._seg(0))
        b = self._map(self._seg(5), self._seg(10))
        assert len(union_maps(a, b)) == 3

    def test_near_duplicates_collapse_within_tolerance(self):
        a = self._map(self._seg(0))
        shifted = MapElement(element_class="lane_divider",
                             vertices=np.array([[1e-8, 0.0], [1.0 + 1e-8, 0.0]]),
                             is_polygon=False, support_count=5, confidence=1.0)
        assert len(union_maps(a, self._map(shifted))) == 1

    def test_same_geometry_different_class_kept(self):
        a = self._map(self._seg(0, "lane_divider"))
        b = self._map(self._seg(0, "stop_line"))
        assert len(union_maps(a, b)) == 2


class TestGeoJson:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(2)
        ring = np.array([[0, 0], [2, 0], [2, 1], [0, 1.0]])
        poly = MapElement(element_class="pedestrian_crossing", vertices=ring,
                          is_polygon=True, support_count=42, confidence=0.5)
        line = MapElement(element_class="stop_line",
                          vertices=rng.uniform(0, 5, (4, 2)),
                          is_polygon=False, support_count=7, confidence=1.0)
        vm = VectorMap(elements=(poly, line), crs_note="map")
        path = tmp_path / "map.geojson"
        write_map_geojson(vm, path)
        loaded = read_map_geojson(path)
        assert len(loaded) == 2
        assert loaded.crs_note == "map"
        assert loaded.elements[0].is_polygon
        assert np.allclose(loaded.elements[0].vertices, ring)
        assert loaded.elements[0].support_count == 42
        assert loaded.elements[0].confidence == 0.5
        assert np.allclose(loaded.elements[1].vertices, line.vertices)

    def test_geojson_structure(self):
        ring = np.array([[0, 0], [1, 0], [1, 1.0]])
        vm = VectorMap(elements=(
            MapElement(element_class="pedestrian_crossing", vertices=ring, is_polygon=True),
        ))
        data = map_to_geojson(vm)
        assert data["type"] == "FeatureCollection"
        feat = data["features"][0]
        assert feat["geometry"]["type"] == "Polygon"
        # ring closed in GeoJSON
        assert feat["geometry"]["coordinates"][0][0] == feat["geometry"]["coordinates"][0][-1]
        assert feat["properties"]["class"] == "pedestrian_crossing"

    def test_rejects_unknown_class(self):
        data = {
            "type": "FeatureCollection",
            "features": [{
                "type": "Feature",
                "geometry": {"type": "LineString", "coordinates": [[0, 0], [1, 1]]},
                "properties": {"class": "road_edge"},
            }],
        }
        with pytest.raises(InputError):
            map_from_geojson(data)


class TestMapElementValidation:
    def test_polygon_needs_three_vertices(self):
        with pytest.raises(InputError):
            MapElement(element_class="pedestrian_crossing",
                       vertices=np.array([[0, 0], [1, 1.0]]), is_polygon=True)

    def test_polyline_needs_two_vertices(self):
        with pytest.raises(InputError):
            MapElement(element_class="stop_line",
                       vertices=np.array([[0, 0.0]]), is_polygon=False)

    def test_self_intersecting_ring_rejected(self):
        bowtie = np.array([[0, 0], [1, 1], [1, 0], [0, 1.0]])
        with pytest.raises(InputError):
            MapElement(element_class="pedestrian_crossing", vertices=bowtie, is_polygon=True)

    def test_non_finite_rejected(self):
        with pytest.raises(InputError):
            MapElement(element_class="stop_line",
                       vertices=np.array([[0, 0], [np.nan, 1.0]]), is_polygon=False)
