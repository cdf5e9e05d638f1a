import json
import math

import numpy as np
import pytest

from bevloc.geometry import Pose2, compose, warp_grid
from bevloc import worldgen as wg


class TestGenerateMap:
    def test_same_seed_is_byte_identical(self):
        spec = wg.ScenarioSpec(seed=42)
        a, b = wg.generate_map(spec), wg.generate_map(spec)
        assert len(a.elements) == len(b.elements)
        for ea, eb in zip(a.elements, b.elements):
            assert ea.klass == eb.klass and ea.width == eb.width
            np.testing.assert_array_equal(ea.polyline, eb.polyline)
        assert a.junctions == b.junctions

    def test_zero_extent_is_empty(self):
        m = wg.generate_map(wg.ScenarioSpec(seed=1, map_extent=0.0))
        assert m.elements == []

    def test_seed_sweep_respects_invariants(self):
        for seed in range(100):
            m = wg.generate_map(wg.ScenarioSpec(seed=seed))
            m.check()  # every vertex inside bounds
            assert len(m.junctions) >= 1
            klasses = {el.klass for el in m.elements}
            assert "lane" in klasses and "curb" in klasses

    def test_extent_scales_junction_count(self):
        m = wg.generate_map(wg.ScenarioSpec(seed=5, map_extent=400.0))
        assert len(m.junctions) >= (400 / 200) ** 2


class TestRasterize:
    def test_empty_map_all_zero(self):
        m = wg.VectorMap([], (-10, -10, 10, 10))
        g = wg.rasterize(m, Pose2(0, 0, 0), 8.0, 0.25)
        assert g.values.shape == (32, 32, 4)
        assert g.values.sum() == 0.0

    def test_channel_count_fixed(self):
        m = wg.VectorMap(
            [wg.MapElement("lane", np.array([[-3, 0], [3, 0]]), 0.5)], (-10, -10, 10, 10)
        )
        g = wg.rasterize(m, Pose2(0, 0, 0), 8.0, 0.25)
        assert g.channels == wg.N_CLASSES == 4

    def test_single_lane_matches_brute_force_distance_oracle(self):
        res = 0.25
        width = 2 * res
        m = wg.VectorMap(
            [wg.MapElement("lane", np.array([[-3.0, 0.1], [3.0, 0.1]]), width)],
            (-10, -10, 10, 10),
        )
        center = Pose2(0.3, -0.2, 0.4)
        g = wg.rasterize(m, center, 8.0, res)
        # oracle: exhaustive distance from every world cell center to the segment
        h, w = g.height, g.width
        c, s = math.cos(center.phi), math.sin(center.phi)
        want = np.zeros((h, w))
        for r in range(h):
            for col in range(w):
                lx = (col - (w - 1) / 2) * res
                ly = ((h - 1) / 2 - r) * res
                wx = c * lx - s * ly + center.x
                wy = s * lx + c * ly + center.y
                d = wg.point_segment_distance((wx, wy), (-3.0, 0.1), (3.0, 0.1))
                want[r, col] = 1.0 if d <= width / 2 else 0.0
        np.testing.assert_array_equal(g.values[:, :, 0], want)
        assert want.sum() > 0

    def test_reraster_equals_integer_cell_warp(self):
        spec = wg.ScenarioSpec(seed=3, window_size=12.0)
        scn = wg.make_scenario(spec, 0)
        g = wg.rasterize(scn.vmap, scn.gt_pose, 12.0, 0.25)
        delta = Pose2(3 * 0.25, -5 * 0.25, 0.0)
        warped = warp_grid(g, delta, interp="nearest")
        rr = wg.rasterize(scn.vmap, compose(scn.gt_pose, delta), 12.0, 0.25)
        v = warped.valid[:, :, None] > 0.5
        inter = ((warped.values > 0.5) & (rr.values > 0.5) & v).sum()
        union = (((warped.values > 0.5) | (rr.values > 0.5)) & v).sum()
        assert union > 100
        assert inter / union >= 0.98


class TestPerturbation:
    def test_fine_bounds_and_mean(self):
        rng = np.random.default_rng(0)
        samples = np.array(
            [wg.sample_perturbation("fine", rng).as_array() for _ in range(10_000)]
        )
        assert np.all(np.abs(samples[:, :2]) <= 2.0)
        assert np.all(np.abs(samples[:, 2]) <= math.radians(2.0))
        # empirical mean within 3 sigma of zero (uniform: sigma = b/sqrt(3))
        for d, b in enumerate([2.0, 2.0, math.radians(2.0)]):
            se = b / math.sqrt(3) / math.sqrt(len(samples))
            assert abs(samples[:, d].mean()) < 3 * se

    def test_forced_midpoint_draw_gives_zero(self):
        class Midpoint:
            def random(self, n):
                return np.full(n, 0.5)

        p = wg.sample_perturbation("fine", Midpoint())
        assert (p.x, p.y, p.phi) == (0.0, 0.0, 0.0)

    def test_reloc_envelopes(self):
        rng = np.random.default_rng(1)
        for _ in range(500):
            p = wg.sample_perturbation("reloc", rng, full_reloc=True)
            assert abs(p.x) <= 30.0 and abs(p.y) <= 30.0
            assert abs(p.phi) <= math.radians(30.0)
            q = wg.sample_perturbation("reloc", rng)
            assert abs(q.x) <= 8.0 and abs(q.y) <= 8.0
            assert abs(q.phi) <= math.radians(10.0)


class TestObservation:
    def test_no_degradation_returns_clean(self):
        spec = wg.ScenarioSpec(seed=7, occlusion_fraction=0.0, noise_sigma=0.0)
        scn = wg.make_scenario(spec, 0)
        obs, occ, clean = wg.synthesize_observation(
            scn.vmap, scn.gt_pose, spec, scn.observation_rng()
        )
        np.testing.assert_array_equal(obs.values, clean.values)
        assert occ.values.sum() == 0

    def test_full_occlusion_zeroes_signal(self):
        spec = wg.ScenarioSpec(seed=7, occlusion_fraction=1.0, noise_sigma=0.0)
        scn = wg.make_scenario(spec, 0)
        obs, occ, clean = wg.synthesize_observation(
            scn.vmap, scn.gt_pose, spec, scn.observation_rng()
        )
        assert obs.values.sum() == 0.0
        assert occ.values.min() == 1.0

    def test_occluded_fraction_within_band_over_50_scenes(self):
        target = 0.3
        fracs = []
        for seed in range(50):
            spec = wg.ScenarioSpec(seed=seed, occlusion_fraction=target)
            scn = wg.make_scenario(spec, 0)
            _, occ, _ = wg.synthesize_observation(
                scn.vmap, scn.gt_pose, spec, scn.observation_rng()
            )
            fracs.append(occ.values.mean())
        fracs = np.array(fracs)
        assert np.all(np.abs(fracs - target) <= 0.05)

    def test_occluded_cells_only_contain_noise(self):
        spec = wg.ScenarioSpec(seed=9, occlusion_fraction=0.4, noise_sigma=0.1)
        scn = wg.make_scenario(spec, 0)
        obs, occ, clean = wg.synthesize_observation(
            scn.vmap, scn.gt_pose, spec, scn.observation_rng()
        )
        occluded = occ.values[:, :, 0] > 0.5
        # occluded cells: |obs| bounded by noise only, independent of clean
        assert np.abs(obs.values[occluded]).max() <= 0.1 * 6
        assert np.all(obs.values >= 0.0) and np.all(obs.values <= 1.0)

    def test_pose_outside_bounds_rejected(self):
        spec = wg.ScenarioSpec(seed=7)
        scn = wg.make_scenario(spec, 0)
        with pytest.raises(ValueError):
            wg.synthesize_observation(
                scn.vmap, Pose2(1e4, 0, 0), spec, scn.observation_rng()
            )

    def test_determinism(self):
        spec = wg.ScenarioSpec(seed=11, occlusion_fraction=0.3, noise_sigma=0.05)
        scn = wg.make_scenario(spec, 4)
        a = wg.synthesize_observation(scn.vmap, scn.gt_pose, spec, scn.observation_rng())
        b = wg.synthesize_observation(scn.vmap, scn.gt_pose, spec, scn.observation_rng())
        np.testing.assert_array_equal(a[0].values, b[0].values)


class TestScenarioFile:
    def test_round_trip_lossless(self, tmp_path):
        spec = wg.ScenarioSpec(
            seed=13, occlusion_fraction=0.25, noise_sigma=0.07, perturb_mode="reloc"
        )
        scn = wg.make_scenario(spec, 2)
        path = tmp_path / "scenario.json"
        wg.save_scenario(scn, path)
        loaded = wg.load_scenario(path)
        assert loaded.spec == scn.spec
        assert loaded.gt_pose == scn.gt_pose
        assert loaded.init_pose == scn.init_pose
        assert loaded.offset == scn.offset
        for a, b in zip(loaded.vmap.elements, scn.vmap.elements):
            np.testing.assert_array_equal(a.polyline, b.polyline)
        # writing again must be byte-identical
        path2 = tmp_path / "scenario2.json"
        wg.save_scenario(loaded, path2)
        assert path.read_bytes() == path2.read_bytes()

    def test_format_version_checked(self, tmp_path):
        d = wg.scenario_to_dict(wg.make_scenario(wg.ScenarioSpec(seed=1), 0))
        d["format_version"] = 99
        with pytest.raises(ValueError):
            wg.scenario_from_dict(d)

    def test_offset_composition_contract(self):
        scn = wg.make_scenario(wg.ScenarioSpec(seed=21), 0)
        q = compose(scn.gt_pose, scn.offset)
        assert q.x == pytest.approx(scn.init_pose.x, abs=1e-12)
        assert q.y == pytest.approx(scn.init_pose.y, abs=1e-12)
        assert q.phi == pytest.approx(scn.init_pose.phi, abs=1e-12)
