"""Heightmap tests: rendering against a shapely rasterization oracle, sensor
noise statistics, rotation/crop identities, and HMAP container round-trips."""

import numpy as np
import pytest
import shapely
import shapely.geometry as sg
from scipy import ndimage

from binpick import defaults as dflt
from binpick.heightmap import (
    DepthImage,
    apply_sensor_noise,
    hmap_bytes,
    hmap_from_bytes,
    load_hmap,
    pre_rotate,
    render_heightmap,
    rotated_crop,
    save_hmap,
    to_net_input,
)
from binpick.scene import BinSpec, ObjectShape, ScenePose, SceneState, object_polygon, spawn_scene

CUBE30 = ObjectShape("box", (30.0, 30.0, 30.0))


def empty_scene():
    return SceneState(BinSpec(), [])


class TestRender:
    def test_empty_bin_floor_and_walls(self):
        img = render_heightmap(empty_scene())
        assert img.shape == (109, 109)
        assert img.valid.all()
        assert img.values[54, 54] == 0.0
        # wall band: |x| in [140, 150] -> 50 mm tall; x = col*4 - 216
        assert img.values[54, 89] == 50.0    # x = 140, on the inner wall face
        assert img.values[54, 91] == 50.0    # x = 148, inside the slab
        assert img.values[54, 92] == 0.0     # x = 152, outside the bin
        assert img.values[54, 17] == 50.0    # x = -148, left wall
        # top/bottom walls: y = row*4 - 216, slab between |y| = 90 and 100
        assert img.values[31, 54] == 50.0    # y = -92, inside the bottom slab
        assert img.values[28, 54] == 0.0     # y = -104, beyond the slab

    def test_wall_band_rows(self):
        img = render_heightmap(empty_scene())
        # y = 90 -> row 76.5 not integral; row 77 -> y = 92 inside the slab
        assert img.values[77, 54] == 50.0
        assert img.values[79, 54] == 50.0    # y = 100, on the outer face
        assert img.values[80, 54] == 0.0     # y = 104, beyond the wall
        assert img.values[76, 54] == 0.0     # y = 88, bin interior

    def test_cube_plateau(self):
        scene = SceneState(BinSpec(), [(CUBE30, ScenePose(0, 0, 0))])
        img = render_heightmap(scene)
        assert img.values[54, 54] == 30.0
        assert img.values[54, 57] == 30.0    # x = 12 <= 15
        assert img.values[54, 58] == 0.0     # x = 16 > 15
        assert img.values[57, 54] == 30.0
        assert (img.values[51:58, 51:58] == 30.0).all()

    def test_resolution_scales_footprint(self):
        scene = SceneState(BinSpec(), [(CUBE30, ScenePose(0, 0, 0))])
        fine = render_heightmap(scene, side=109, resolution_mm=2.0)
        plateau = (fine.values == 30.0)
        assert plateau[54, 54]
        assert plateau[54, 47] and not plateau[54, 46]   # |x| <= 15 -> 7 px at 2 mm
        assert plateau[61, 54] and not plateau[62, 54]

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_shapely_rasterization(self, seed):
        scene = spawn_scene(3, seed=seed)
        img = render_heightmap(scene)
        half = (109 - 1) / 2.0
        coords = (np.arange(109) - half) * dflt.RESOLUTION_MM
        x, y = np.meshgrid(coords, coords, indexing="xy")
        pts = shapely.points(x.ravel(), y.ravel())
        want = np.zeros(109 * 109)
        b = scene.bin
        on_wall = ((np.abs(x) <= b.half_x + b.wall_thickness)
                   & (np.abs(y) <= b.half_y + b.wall_thickness)
                   & ((np.abs(x) >= b.half_x) | (np.abs(y) >= b.half_y))).ravel()
        want[on_wall] = b.wall_height
        for shape, pose in scene.objects:
            if shape.kind == "box":
                inside = shapely.covers(sg.Polygon(object_polygon(shape, pose)), pts)
            else:
                inside = ((x.ravel() - pose.x) ** 2 + (y.ravel() - pose.y) ** 2
                          <= shape.extents[0] ** 2)
            want = np.where(inside, np.maximum(want, shape.height), want)
        assert np.array_equal(img.values, want.reshape(109, 109).astype(np.float32))


class TestSensorNoise:
    def test_zero_noise_is_identity(self):
        img = render_heightmap(empty_scene())
        out = apply_sensor_noise(img, np.random.default_rng(0),
                                 height_std_mm=0.0, n_invalid_patches=0)
        assert np.array_equal(out.values, img.values)
        assert out.valid.all()

    def test_deterministic_given_seed(self):
        img = render_heightmap(empty_scene())
        a = apply_sensor_noise(img, np.random.default_rng(7))
        b = apply_sensor_noise(img, np.random.default_rng(7))
        assert np.array_equal(a.values, b.values)
        assert np.array_equal(a.valid, b.valid)

    def test_noise_standard_deviation(self):
        img = render_heightmap(empty_scene())
        out = apply_sensor_noise(img, np.random.default_rng(3),
                                 height_std_mm=1.0, n_invalid_patches=0)
        delta = out.values.astype(np.float64) - img.values
        assert 0.9 <= delta.std() <= 1.1
        assert abs(delta.mean()) < 0.1

    def test_invalid_patch_geometry(self):
        img = render_heightmap(empty_scene())
        for seed in range(20):
            out = apply_sensor_noise(img, np.random.default_rng(seed),
                                     height_std_mm=0.0, n_invalid_patches=3)
            holes = ~out.valid
            assert 3 * 2 * 2 <= holes.sum() <= 3 * 8 * 8
            n_components, _ = ndimage.label(holes)[1], None
            assert 1 <= n_components <= 3     # patches may touch, never overlap
        # a seed whose three patches are pairwise separated
        out = apply_sensor_noise(img, np.random.default_rng(0),
                                 height_std_mm=0.0, n_invalid_patches=3)
        labels, count = ndimage.label(~out.valid)
        assert count == 3
        for lbl in range(1, count + 1):
            rows, cols = np.nonzero(labels == lbl)
            area = (rows.max() - rows.min() + 1) * (cols.max() - cols.min() + 1)
            assert area == len(rows)          # each component is a full rectangle


def checkerboard_image(side=109, seed=5):
    rng = np.random.default_rng(seed)
    values = rng.uniform(0, 60, size=(side, side)).astype(np.float32)
    return DepthImage(values, np.ones((side, side), bool))


class TestRotatedCrop:
    def test_angle_zero_is_slice(self):
        img = checkerboard_image()
        crop = rotated_crop(img, (54.0, 54.0), 0.0, 31)
        assert np.array_equal(crop.values, img.values[39:70, 39:70])
        assert crop.valid.all()

    def test_angle_pi_is_flip(self):
        img = checkerboard_image()
        crop = rotated_crop(img, (54.0, 54.0), np.pi, 31)
        assert np.array_equal(crop.values, img.values[39:70, 39:70][::-1, ::-1])

    def test_angle_half_pi_is_rot90(self):
        img = checkerboard_image()
        crop = rotated_crop(img, (54.0, 54.0), np.pi / 2, 31)
        sub = img.values[39:70, 39:70]
        assert np.array_equal(crop.values, np.rot90(sub, 1))

    def test_out_of_bounds_raises_by_default(self):
        img = checkerboard_image()
        with pytest.raises(ValueError):
            rotated_crop(img, (5.0, 54.0), 0.0, 31)

    def test_out_of_bounds_fill_invalid(self):
        img = checkerboard_image()
        crop = rotated_crop(img, (5.0, 54.0), 0.0, 31, fill="invalid")
        assert not crop.valid[:, :10].any()    # columns left of the image edge
        assert crop.valid[:, 10:].all()
        assert (crop.values[~crop.valid] == 0.0).all()
        assert np.array_equal(crop.values[:, 10:], img.values[39:70, 0:21])

    def test_rejects_unknown_fill(self):
        with pytest.raises(ValueError):
            rotated_crop(checkerboard_image(), (54.0, 54.0), 0.0, 31, fill="zero")


class TestPreRotate:
    def test_zero_angle_identity(self):
        img = checkerboard_image()
        rot = pre_rotate(img, 0.0)
        assert np.array_equal(rot.values, img.values)
        assert rot.valid.all()

    def test_corners_become_invalid(self):
        img = checkerboard_image()
        rot = pre_rotate(img, np.pi / 7)
        assert not rot.valid[0, 0]
        assert not rot.valid[108, 108]
        assert rot.valid[54, 54]

    def test_crop_of_pre_rotated_equals_rotated_crop(self):
        # axis-aligned window in the rotated frame == rotated window in the
        # original frame, sampled at the mapped-back center: bit-identical
        img = checkerboard_image()
        o = np.array([54.0, 54.0])
        for angle in (0.3, 1.1, 2.4):
            rot = pre_rotate(img, angle)
            c, s = np.cos(angle), np.sin(angle)
            r_mat = np.array([[c, -s], [s, c]])
            for q0 in ((41.0, 33.0), (54.0, 54.0), (70.0, 61.0)):
                sub = rotated_crop(rot, q0, 0.0, 31, fill="invalid")
                center = o + r_mat @ (np.array(q0) - o)
                direct = rotated_crop(img, tuple(center), angle, 31, fill="invalid")
                assert np.array_equal(sub.values, direct.values)
                assert np.array_equal(sub.valid, direct.valid)


class TestNetInput:
    def test_scaling_and_sentinel(self):
        values = np.array([[0.0, 30.0], [100.0, 55.0]], dtype=np.float32)
        valid = np.array([[True, True], [True, False]])
        out = to_net_input(DepthImage(values, valid))
        assert out.dtype == np.float32
        assert out[0, 0] == 0.0
        assert out[0, 1] == np.float32(0.3)
        assert out[1, 0] == 1.0
        assert out[1, 1] == -1.0


class TestHmapFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        img = apply_sensor_noise(render_heightmap(spawn_scene(3, seed=2)),
                                 np.random.default_rng(1))
        path = tmp_path / "snap.hmap"
        save_hmap(img, path)
        back = load_hmap(path)
        assert np.array_equal(back.values, img.values)
        assert back.values.tobytes() == img.values.tobytes()
        assert np.array_equal(back.valid, img.valid)
        assert back.resolution_mm == img.resolution_mm

    def test_header_fields(self):
        img = DepthImage(np.zeros((4, 6), np.float32), np.ones((4, 6), bool), 2.5)
        blob = hmap_bytes(img)
        assert blob[:4] == b"HMAP"
        back = hmap_from_bytes(blob)
        assert back.shape == (4, 6)
        assert back.resolution_mm == 2.5

    def test_bad_magic_rejected(self):
        img = DepthImage(np.zeros((4, 4), np.float32), np.ones((4, 4), bool))
        blob = b"XMAP" + hmap_bytes(img)[4:]
        with pytest.raises(ValueError, match="magic"):
            hmap_from_bytes(blob)

    def test_truncation_rejected(self):
        img = DepthImage(np.zeros((4, 4), np.float32), np.ones((4, 4), bool))
        blob = hmap_bytes(img)
        with pytest.raises(ValueError):
            hmap_from_bytes(blob[:-3])
        with pytest.raises(ValueError):
            hmap_from_bytes(blob[:10])

    def test_unknown_version_rejected(self):
        img = DepthImage(np.zeros((4, 4), np.float32), np.ones((4, 4), bool))
        blob = bytearray(hmap_bytes(img))
        blob[4] = 9
        with pytest.raises(ValueError, match="version"):
            hmap_from_bytes(bytes(blob))
