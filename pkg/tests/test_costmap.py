import numpy as np
import pytest

from monoloc import costmap as cmap
from monoloc.evidential import DirichletRaster
from conftest import rel_err


def brute_force_edt(mask):
    mask = np.asarray(mask, bool)
    feats = np.argwhere(mask)
    rr, cc = np.meshgrid(np.arange(mask.shape[0]), np.arange(mask.shape[1]), indexing="ij")
    d2 = ((rr[..., None] - feats[:, 0]) ** 2 + (cc[..., None] - feats[:, 1]) ** 2).min(axis=-1)
    return np.sqrt(d2.astype(float))


def brute_force_otsu(values):
    vals = np.asarray(values, float).ravel()
    lo, hi = vals.min(), vals.max()
    hist, edges = np.histogram(vals, bins=256, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    total = hist.sum()
    best_var, best_k = -1.0, None
    for k in range(1, 256):
        n0, n1 = hist[:k].sum(), hist[k:].sum()
        if n0 == 0 or n1 == 0:
            continue
        m0 = (hist[:k] * centers[:k]).sum() / n0
        m1 = (hist[k:] * centers[k:]).sum() / n1
        var = (n0 / total) * (n1 / total) * (m0 - m1) ** 2
        if var > best_var + 1e-15:
            best_var, best_k = var, k
    return edges[best_k]


class TestOtsu:
    def test_bimodal_separation(self, rng):
        vals = np.concatenate([np.full(500, 0.1), np.full(500, 0.9)])
        thr = cmap.otsu_threshold(vals)
        assert 0.1 < thr < 0.9

    def test_matches_exhaustive_search(self, rng):
        for _ in range(100):
            kind = rng.integers(0, 3)
            if kind == 0:
                vals = rng.uniform(size=(16, 16))
            elif kind == 1:
                vals = np.concatenate([rng.normal(0.2, 0.05, 300), rng.normal(0.7, 0.1, 150)])
            else:
                vals = rng.gamma(2.0, 0.1, size=400)
            thr = cmap.otsu_threshold(vals)
            assert thr == pytest.approx(brute_force_otsu(vals), abs=1e-12)

    def test_degenerate(self):
        with pytest.raises(cmap.DegenerateInput):
            cmap.otsu_threshold(np.full((4, 4), 0.5))


def raster_from_classes(classes, evidence, band=None, band_evidence=3.0):
    """Helper: onehot evidence raster with an optional low-evidence band."""
    classes = np.asarray(classes)
    h, w = classes.shape
    alpha = np.ones((h, w, 3))
    ev_map = np.full((h, w), float(evidence))
    if band is not None:
        ev_map[band] = band_evidence
    for c in range(3):
        alpha[..., c] += np.where(classes == c, ev_map, 0.0)
    return DirichletRaster(alpha)


class TestExtractBorders:
    def test_definition(self):
        classes = np.zeros((4, 4), int)
        classes[:, 2:] = 2
        band = np.zeros((4, 4), bool)
        band[:, 1] = True     # drivable, low evidence
        band[:, 2] = True     # non-lane, low evidence
        raster = raster_from_classes(classes, 200.0, band=band)
        thr = cmap.otsu_threshold(raster.uncertainty())
        mask, prob = cmap.extract_borders(raster, thr)
        assert mask[:, 1].all()          # uncertain drivable pixels are border
        assert not mask[:, 2].any()      # uncertain non-lane pixels are masked out
        assert not mask[:, 0].any()      # confident pixels are not border
        u = raster.uncertainty()
        np.testing.assert_allclose(prob[:, 1], 1.0 - u[:, 1])
        assert (prob[~mask] == 0).all()

    def test_uniform_low_uncertainty_empty(self):
        classes = np.zeros((4, 4), int)
        classes[2:] = 1
        raster = raster_from_classes(classes, 200.0)
        mask, _ = cmap.extract_borders(raster, 0.5)
        assert not mask.any()


class TestDistanceTransform:
    def test_1d_profile(self):
        mask = np.zeros((1, 5), bool)
        mask[0, 2] = True
        np.testing.assert_allclose(cmap.distance_transform(mask), [[2, 1, 0, 1, 2]])

    def test_three_four_five(self):
        mask = np.zeros((8, 8), bool)
        mask[0, 0] = True
        d = cmap.distance_transform(mask)
        assert d[4, 3] == pytest.approx(5.0)

    def test_matches_brute_force(self, rng):
        for _ in range(100):
            mask = rng.random((32, 32)) < rng.uniform(0.005, 0.2)
            if not mask.any():
                mask[rng.integers(32), rng.integers(32)] = True
            d = cmap.distance_transform(mask)
            np.testing.assert_array_equal(d, brute_force_edt(mask))

    def test_indices_point_to_nearest_feature(self, rng):
        mask = rng.random((24, 24)) < 0.05
        mask[3, 7] = True
        d, (nr, nc) = cmap.distance_transform(mask, return_indices=True)
        assert mask[nr, nc].all()
        rr, cc = np.meshgrid(np.arange(24), np.arange(24), indexing="ij")
        np.testing.assert_allclose(np.hypot(rr - nr, cc - nc), d)

    def test_empty_mask(self):
        with pytest.raises(cmap.EmptyMask):
            cmap.distance_transform(np.zeros((4, 4), bool))


class TestBuildCostMap:
    def test_disabled_weighting_returns_edt(self, rng):
        mask = rng.random((16, 16)) < 0.1
        mask[0, 0] = True
        edt = cmap.distance_transform(mask)
        prob = np.where(mask, 0.7, 0.0)
        cm = cmap.build_cost_map(edt, prob, w_p=0.0)
        np.testing.assert_array_equal(cm.cost, edt)

    def test_zero_set_preserved(self, rng):
        mask = rng.random((16, 16)) < 0.1
        mask[5, 5] = True
        edt = cmap.distance_transform(mask)
        prob = np.where(mask, rng.uniform(0.2, 1.0, mask.shape), 0.0)
        cm = cmap.build_cost_map(edt, prob, w_p=2.0)
        np.testing.assert_array_equal(cm.cost == 0.0, edt == 0.0)

    def test_multiplicative_scaling(self, rng):
        mask = rng.random((16, 16)) < 0.1
        mask[5, 5] = True
        edt = cmap.distance_transform(mask)
        prob = np.where(mask, 0.5, 0.0)
        a = cmap.build_cost_map(edt, prob, w_p=1.0)
        b = cmap.build_cost_map(3.0 * edt, prob, w_p=1.0)
        np.testing.assert_allclose(b.cost, 3.0 * a.cost, rtol=1e-12)

    def test_high_prob_border_has_larger_basin(self):
        # two parallel borders; the midline cost is lower on the high-prob side
        h, w = 64, 64
        mask = np.zeros((h, w), bool)
        mask[:, 16] = True
        mask[:, 48] = True
        prob = np.zeros((h, w))
        prob[:, 16] = 1.0
        prob[:, 48] = 0.5
        edt = cmap.distance_transform(mask)
        # blur radius wide enough for the diffusion to span the inter-border gap
        cm = cmap.build_cost_map(edt, prob, w_p=1.0, blur_radius=16)
        mid = 32
        row = h // 2
        assert cm.cost[row, mid - 4] < cm.cost[row, mid + 4]

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cmap.build_cost_map(np.zeros((4, 4)), np.zeros((4, 5)))


class TestBicubicSample:
    def make(self, grid):
        return cmap.CostMap(np.asarray(grid, float), np.zeros_like(grid, dtype=float),
                            np.ones_like(grid, dtype=float))

    def test_reproduces_grid_values(self, rng):
        grid = rng.random((12, 12))
        cm = self.make(grid)
        for _ in range(50):
            r, c = rng.integers(1, 10), rng.integers(1, 10)
            val, _ = cm.sample([c, r])
            assert val == pytest.approx(grid[r, c], abs=1e-12)

    def test_linear_ramp(self, rng):
        u = np.arange(16)
        grid = np.tile(3.0 * u, (16, 1))
        cm = self.make(grid)
        for _ in range(50):
            uv = rng.uniform(1.0, 13.9, size=2)
            val, grad = cm.sample(uv)
            assert val == pytest.approx(3.0 * uv[0], abs=1e-9)
            np.testing.assert_allclose(grad, [3.0, 0.0], atol=1e-9)

    def test_gradient_matches_finite_differences(self, rng):
        grid = rng.random((24, 24)) * 10
        cm = self.make(grid)
        ok = 0
        for _ in range(500):
            uv = rng.uniform(2.0, 21.0, size=2)
            _, grad = cm.sample(uv)
            h = 1e-4
            fd = np.array([
                (cm.sample(uv + [h, 0])[0] - cm.sample(uv - [h, 0])[0]) / (2 * h),
                (cm.sample(uv + [0, h])[0] - cm.sample(uv - [0, h])[0]) / (2 * h),
            ])
            assert rel_err(grad, fd) < 1e-4
            ok += 1
        assert ok == 500

    def test_c1_across_cell_boundaries(self, rng):
        grid = rng.random((16, 16)) * 5
        cm = self.make(grid)
        for k in range(2, 13):
            for other in (3.3, 7.7):
                _, g_right = cm.sample([float(k), other])
                _, g_left = cm.sample([k - 1e-12, other])
                np.testing.assert_allclose(g_right, g_left, atol=1e-9)
                _, g_down = cm.sample([other, float(k)])
                _, g_up = cm.sample([other, k - 1e-12])
                np.testing.assert_allclose(g_down, g_up, atol=1e-9)

    def test_out_of_bounds(self):
        cm = self.make(np.zeros((8, 8)))
        for uv in ([0.5, 4.0], [4.0, 0.5], [6.5, 4.0], [4.0, 6.5], [-1, -1]):
            with pytest.raises(cmap.OutOfBounds):
                cm.sample(uv)
        cm.sample([1.0, 1.0])
        cm.sample([6.0, 6.0])

    def test_sample_many_matches_scalar(self, rng):
        grid = rng.random((16, 16))
        cm = self.make(grid)
        uv = rng.uniform(1.0, 13.9, size=(40, 2))
        vals, grads, valid = cm.sample_many(uv)
        assert valid.all()
        for i in range(len(uv)):
            v, gr = cm.sample(uv[i])
            assert vals[i] == pytest.approx(v, abs=1e-14)
            np.testing.assert_allclose(grads[i], gr, atol=1e-14)


class TestPipelineAndDump:
    def test_cost_map_from_raster_modes(self, rng):
        classes = np.zeros((32, 32), int)
        classes[:, 20:] = 2
        band = np.zeros((32, 32), bool)
        band[:, 10:12] = True
        raster = raster_from_classes(classes, 200.0, band=band, band_evidence=37.0)
        cm_unc = cmap.cost_map_from_raster(raster, use_uncertainty=True)
        assert (cm_unc.cost[:, 10:12] == 0).all()
        assert cm_unc.border_info.max() <= 1.0
        cm_cls = cmap.cost_map_from_raster(raster, use_uncertainty=False)
        # class-boundary mode keys on the class change around column 20
        assert cm_cls.cost[16, 20] == 0.0
        np.testing.assert_array_equal(cm_cls.border_info, np.ones((32, 32)))

    def test_empty_extraction_raises(self):
        classes = np.zeros((8, 8), int)
        raster = raster_from_classes(classes, 200.0)
        with pytest.raises((cmap.EmptyMask, cmap.DegenerateInput)):
            cmap.cost_map_from_raster(raster, use_uncertainty=True)

    def test_dump_roundtrip(self, tmp_path, rng):
        mask = rng.random((9, 13)) < 0.2
        mask[0, 0] = True
        edt = cmap.distance_transform(mask)
        cm = cmap.build_cost_map(edt, np.where(mask, 1.0, 0.0))
        path = tmp_path / "cost.f32"
        cmap.dump_cost_raster(path, cm)
        back = cmap.load_cost_raster(path)
        assert back.shape == (9, 13)
        np.testing.assert_allclose(back, cm.cost, rtol=1e-6)
