import numpy as np
import pytest

from monoloc import costmap as cmap
from monoloc import geometry as g
from monoloc import map_model as mm
from monoloc import perception_sim as ps

CAM = g.CameraIntrinsics(300.0, 300.0, 160.0, 100.0, 320, 200)


def road_map(lights=((1, (40.0, 0.0, 4.0)),)):
    borders = [
        [[0, -1.75, 0], [80, -1.75, 0]],
        [[0, 1.75, 0], [80, 1.75, 0]],
        [[0, 5.25, 0], [80, 5.25, 0]],
    ]
    return mm.SemanticMap(borders, list(lights))


def ego_pose(x=5.0, y=0.0):
    return g.Pose6D(np.array([x, y, 1.5]))


class TestFillPolygon:
    def test_matches_path_containment(self, rng):
        from matplotlib.path import Path

        for _ in range(20):
            n = rng.integers(3, 8)
            poly = rng.uniform(2, 38, size=(n, 2))
            mask = ps.fill_polygon(40, 40, poly)
            cc, rr = np.meshgrid(np.arange(40), np.arange(40))
            ref = Path(poly).contains_points(
                np.stack([cc.ravel(), rr.ravel()], axis=1)).reshape(40, 40)
            assert (mask != ref).mean() < 0.01


class TestRenderScene:
    def test_deterministic_under_seed(self):
        m = road_map()
        noise = ps.NoiseProfile(class_noise_sd=0.5, bbox_center_sd_px=2.0,
                                detect_dropout_prob=0.3, rng_seed=99)
        a = ps.render_scene(m, ego_pose(), CAM, noise)
        b = ps.render_scene(m, ego_pose(), CAM, noise)
        np.testing.assert_array_equal(a.dirichlet.alpha, b.dirichlet.alpha)
        assert len(a.detections) == len(b.detections)
        for da, db in zip(a.detections, b.detections):
            assert da.edges == db.edges

    def test_alpha_at_least_one(self):
        r = ps.render_scene(road_map(), ego_pose(), CAM,
                            ps.NoiseProfile(class_noise_sd=1.0, rng_seed=3))
        assert r.dirichlet.alpha.min() >= 1.0

    def test_noiseless_classes_match_truth(self):
        r = ps.render_scene(road_map(), ego_pose(), CAM, ps.NoiseProfile())
        match = (r.dirichlet.argmax_class() == r.truth.classes).mean()
        assert match >= 0.999

    def test_border_band_carries_elevated_uncertainty(self):
        r = ps.render_scene(road_map(), ego_pose(), CAM, ps.NoiseProfile())
        u = r.dirichlet.uncertainty()
        thr = cmap.otsu_threshold(u)
        mask, _ = cmap.extract_borders(r.dirichlet, thr)
        assert mask.sum() > 200
        assert u[mask].min() > u[~mask].mean()

    def test_noiseless_detection_is_exact(self):
        cam = g.CameraIntrinsics(100.0, 100.0, 64.0, 64.0, 128, 128)
        m = mm.SemanticMap([], [(5, (10.0, 0.0, 1.5))])
        r = ps.render_scene(m, ego_pose(x=0.0), cam, ps.NoiseProfile())
        assert len(r.detections) == 1
        gam = [e.gamma for e in r.detections[0].edges]
        np.testing.assert_allclose(gam, [60.0, 60.0, 68.0, 68.0])
        np.testing.assert_allclose(r.truth.box_edges[0], [60.0, 60.0, 68.0, 68.0])
        assert r.truth.light_ids == (5,)

    def test_full_dropout(self):
        r = ps.render_scene(road_map(), ego_pose(), CAM,
                            ps.NoiseProfile(detect_dropout_prob=1.0))
        assert r.detections == ()

    def test_occlusion_rect_is_low_evidence_and_hides_lights(self):
        m = road_map()
        base = ps.render_scene(m, ego_pose(), CAM, ps.NoiseProfile())
        assert len(base.detections) == 1
        u0, v0 = 140, 60
        noise = ps.NoiseProfile(occlusion_rects=((u0, v0, 320, 120),))
        r = ps.render_scene(m, ego_pose(), CAM, noise)
        assert r.detections == ()
        occ = r.dirichlet.alpha[v0:120, u0:, :]
        assert occ.max() <= 1.0 + ps.OCCLUSION_TILT
        assert (r.dirichlet.argmax_class()[v0:120, u0:] == ps.CLASS_NON_LANE).all()

    def test_clutter_fools_class_boundaries_not_uncertainty(self):
        m = road_map(lights=())
        clutter = ((np.array([[5.0, 0.8, 0.0], [80.0, 0.8, 0.0]]),))
        noise = ps.NoiseProfile(clutter_lines=clutter)
        r = ps.render_scene(m, ego_pose(), CAM, noise)
        mask_unc, _ = cmap.extract_borders(
            r.dirichlet, cmap.otsu_threshold(r.dirichlet.uncertainty()))
        mask_cls, _ = cmap.class_boundary_borders(r.dirichlet)
        clean = ps.render_scene(m, ego_pose(), CAM, ps.NoiseProfile())
        mask_clean, _ = cmap.extract_borders(
            clean.dirichlet, cmap.otsu_threshold(clean.dirichlet.uncertainty()))
        # class-boundary extraction picks up the false border as new pixels
        base_cls, _ = cmap.class_boundary_borders(clean.dirichlet)
        assert mask_cls.sum() > base_cls.sum() * 1.3
        # uncertainty extraction stays essentially unchanged (clutter is non-lane)
        assert abs(int(mask_unc.sum()) - int(mask_clean.sum())) < 0.1 * mask_clean.sum()

    def test_box_invariant_holds_under_noise(self, rng):
        m = road_map()
        for seed in range(20):
            r = ps.render_scene(m, ego_pose(), CAM,
                                ps.NoiseProfile(bbox_center_sd_px=5.0, rng_seed=seed))
            for det in r.detections:
                gam = [e.gamma for e in det.edges]
                assert gam[0] < gam[2] and gam[1] < gam[3]

    def test_noise_profile_validation(self):
        with pytest.raises(ValueError):
            ps.NoiseProfile(detect_dropout_prob=1.5)
        with pytest.raises(ValueError):
            ps.NoiseProfile(class_noise_sd=-0.1)
        with pytest.raises(ValueError):
            ps.NoiseProfile(border_alpha_peak=0.5)


def lights_grid_map(n_side=5):
    lights = []
    lid = 0
    for i in range(n_side):
        for j in range(n_side):
            lights.append((lid, (12.0 + 6.0 * i, -6.0 + 3.0 * j, 2.0 + 0.6 * i)))
            lid += 1
    return mm.SemanticMap([], lights)


class TestCalibrationFidelity:
    def test_noiseless_render_is_calibrated(self):
        m = road_map()
        renders = [ps.render_scene(m, ego_pose(x=x), CAM, ps.NoiseProfile(rng_seed=i))
                   for i, x in enumerate(np.linspace(5, 20, 3))]
        # add boxes from a lights-only map so the box quota is met
        grid = lights_grid_map()
        noise = ps.NoiseProfile(bbox_center_sd_px=2.0, rng_seed=7)
        renders += [ps.render_scene(grid, ego_pose(), CAM,
                                    ps.NoiseProfile(bbox_center_sd_px=2.0, rng_seed=i))
                    for i in range(3)]
        ece_val, _ = ps.calibration_fidelity(renders, [r.truth for r in renders])
        assert ece_val < 0.02

    def test_matched_bbox_noise_is_ence_calibrated(self):
        grid = lights_grid_map()
        cam = g.CameraIntrinsics(150.0, 150.0, 80.0, 50.0, 160, 100)
        renders = []
        for i in range(440):
            noise = ps.NoiseProfile(bbox_center_sd_px=2.0, bbox_var_scale=1.0, rng_seed=i)
            renders.append(ps.render_scene(grid, ego_pose(), cam, noise))
        n_boxes = sum(len(r.detections) for r in renders)
        assert n_boxes >= 10_000
        _, ence_val = ps.calibration_fidelity(renders, [r.truth for r in renders])
        assert ence_val < 0.1

    def test_class_noise_degrades_ece_monotonically(self):
        m = road_map(lights=())
        grid = lights_grid_map()
        values = []
        for sd in (0.0, 0.45, 0.7, 1.0):
            renders = [ps.render_scene(m, ego_pose(), CAM,
                                       ps.NoiseProfile(class_noise_sd=sd, rng_seed=11))]
            renders += [ps.render_scene(grid, ego_pose(), CAM,
                                        ps.NoiseProfile(bbox_center_sd_px=1.0, rng_seed=i))
                        for i in range(3)]
            ece_val, _ = ps.calibration_fidelity(renders, [r.truth for r in renders])
            values.append(ece_val)
        assert all(b > a for a, b in zip(values, values[1:]))

    def test_insufficient_samples(self):
        m = road_map(lights=())
        r = ps.render_scene(m, ego_pose(), CAM, ps.NoiseProfile())
        with pytest.raises(ps.InsufficientSamples):
            ps.calibration_fidelity([r], [r.truth])


class TestPgmDump:
    def test_format(self, tmp_path, rng):
        arr = rng.uniform(size=(6, 9))
        path = tmp_path / "u.pgm"
        ps.dump_pgm16(path, arr)
        raw = path.read_bytes()
        assert raw.startswith(b"P5\n9 6\n65535\n")
        data = np.frombuffer(raw[len(b"P5\n9 6\n65535\n"):], dtype=">u2").reshape(6, 9)
        np.testing.assert_allclose(data / 65535.0, arr, atol=1e-4)
