import colorsys
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from towelfold.errors import ConfigError, DatasetError, RenderError
from towelfold.geometry import CameraModel, look_at, pixel_rays, project
from towelfold.render import (
    Distractor,
    GenConfig,
    LightingSpec,
    PerlinParams,
    ProceduralMaterial,
    SphericalCapParams,
    TowelGeometry,
    annotate_corners,
    perlin_noise,
    render_buffers,
    render_scene,
    sample_camera_pose,
    sample_scene,
    top_down_camera,
)
from towelfold.render.dataset import generate_dataset, load_annotations, read_image, write_image
from towelfold.render.raster import TOWEL

FLAT = PerlinParams(amplitude=0.0)


# ----------------------------------------------------------------- noise

def test_perlin_zero_at_lattice_points():
    for seed in range(5):
        params = PerlinParams(octaves=1, frequency=1.0, seed=seed)
        pts = np.array([[i, j] for i in range(-3, 4) for j in range(-3, 4)], dtype=float)
        np.testing.assert_array_equal(perlin_noise(pts, params), 0.0)


def test_perlin_zero_amplitude():
    assert perlin_noise([0.3, 0.7], PerlinParams(octaves=3, amplitude=0.0)) == 0.0


def test_perlin_continuity_sweep():
    rng = np.random.default_rng(0)
    params = PerlinParams(octaves=4, frequency=3.0, seed=9)
    p = rng.uniform(-10, 10, (1000, 2))
    delta = perlin_noise(p, params) - perlin_noise(p + 1e-5, params)
    assert np.max(np.abs(delta)) < 1e-3


@settings(max_examples=50, deadline=None)
@given(x=st.floats(-100, 100), y=st.floats(-100, 100), amp=st.floats(0, 10), seed=st.integers(0, 2**32 - 1))
def test_perlin_range_and_determinism(x, y, amp, seed):
    params = PerlinParams(octaves=3, frequency=2.0, amplitude=amp, seed=seed)
    a = perlin_noise([x, y], params)
    assert -1.0 <= a <= 1.0
    assert a == perlin_noise([x, y], params)


def test_perlin_octaves_validated():
    with pytest.raises(ValueError):
        PerlinParams(octaves=0)


# --------------------------------------------------------------- sampling

def test_sample_scene_deterministic():
    assert sample_scene(7) == sample_scene(7)


def test_neighbouring_seeds_differ():
    differ = sum(
        sample_scene(s).towel_material.base_color_hsv != sample_scene(s + 1).towel_material.base_color_hsv
        for s in range(0, 200, 2)
    )
    assert differ >= 99


def test_no_distractors_when_max_zero():
    cfg = GenConfig(distractor_max=0)
    assert all(sample_scene(s, cfg).distractors == () for s in range(20))


def test_distractor_count_covers_range():
    counts = {len(sample_scene(s).distractors) for s in range(200)}
    assert counts == set(range(6))


@pytest.mark.parametrize("field,kwargs", [
    ("towel_width", {"towel_width": (0.5, 0.2)}),
    ("distractor_max", {"distractor_max": 6}),
    ("resolution", {"resolution": 16}),
    ("camera.r_min", {"camera": SphericalCapParams(r_min=2.0, r_max=1.0)}),
    ("camera.polar_max_deg", {"camera": SphericalCapParams(polar_max_deg=95)}),
])
def test_invalid_config_names_field(field, kwargs):
    with pytest.raises(ConfigError) as err:
        GenConfig(**kwargs)
    assert err.value.field == field


def test_config_dict_roundtrip():
    cfg = GenConfig(resolution=64, distractor_max=2)
    assert GenConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        GenConfig.from_dict({"bogus": 1})


def test_towel_hue_uniform():
    hues = [sample_scene(s).towel_material.base_color_hsv[0] for s in range(1000)]
    assert stats.kstest(hues, "uniform").statistic < 0.05


def test_scene_invariants():
    cfg = GenConfig()
    for s in range(100):
        sc = sample_scene(s, cfg)
        assert len(sc.distractors) <= 5
        assert np.all(sc.towel.corners_3d[:, 2] >= 0)
        assert cfg.towel_width[0] <= sc.towel.width <= cfg.towel_width[1]
        dist = np.linalg.norm(sc.camera.position - [0, 0, 0])
        assert cfg.camera.r_min - 1e-12 <= dist <= cfg.camera.r_max + 1e-12


def test_flat_towel_is_planar_rectangle():
    cfg = GenConfig(wrinkle_amplitude=(0.0, 0.0), corner_jitter=0.0)
    c = sample_scene(3, cfg).towel.corners_3d
    assert np.all(c[:, 2] == 0)
    sides = [np.linalg.norm(c[(i + 1) % 4] - c[i]) for i in range(4)]
    assert sides[0] == pytest.approx(sides[2]) and sides[1] == pytest.approx(sides[3])
    assert np.dot(c[1] - c[0], c[3] - c[0]) == pytest.approx(0, abs=1e-12)


def test_camera_straight_down_at_one_metre():
    cam = sample_camera_pose(SphericalCapParams(1.0, 1.0, 0.0, (0.0, 0.0), (1.0, 1.0)), np.random.default_rng(0), 128)
    np.testing.assert_allclose(cam.position, [0, 0, 1], atol=1e-12)
    np.testing.assert_allclose(cam.forward, [0, 0, -1], atol=1e-12)


def test_camera_samples_look_at_centre():
    cap = SphericalCapParams()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        cam = sample_camera_pose(cap, rng, 128)
        worst = max(worst, float(np.max(np.abs(project(cam, [0, 0, 0]) - [cam.cx, cam.cy]))))
        r = np.linalg.norm(cam.position)
        assert cap.r_min - 1e-12 <= r <= cap.r_max + 1e-12
        assert math.degrees(math.acos(cam.position[2] / r)) <= cap.polar_max_deg + 1e-9
    assert worst < 0.5


# --------------------------------------------------------------- rendering

def plain_scene(size=0.6, center=(0.0, 0.0), yaw=0.0, distractors=(), lighting=None, res=64):
    """Flat untextured towel under a top-down camera 1 m up."""
    base = sample_scene(0, GenConfig(resolution=res))
    towel = TowelGeometry(size, size, center, yaw)
    light = lighting or LightingSpec(0.3, (0.3, 0.2, math.sqrt(1 - 0.13)), 0.6, (0.05, 0.02, 0.0))
    return replace(
        base,
        towel=towel,
        towel_material=ProceduralMaterial((0.6, 0.7, 0.8), FLAT),
        ground_material=ProceduralMaterial((0.1, 0.5, 0.4), FLAT),
        distractors=tuple(distractors),
        lighting=light,
        camera=top_down_camera(res),
        image_size=res,
    )


def expected_colour(rgb, light):
    n_dot_l = max(0.0, light.light_direction[2] / np.linalg.norm(light.light_direction))
    return np.clip(np.asarray(rgb) * (light.ambient + light.light_intensity * n_dot_l + np.asarray(light.env_tint)), 0, 1)


def test_probe_pixels_match_analytic_rays():
    sc = plain_scene(size=0.3)
    img = render_scene(sc)
    towel_rgb = colorsys.hsv_to_rgb(0.6, 0.7, 0.8)
    ground_rgb = colorsys.hsv_to_rgb(0.1, 0.5, 0.4)
    # centre ray hits the towel, image corner ray hits the bare table
    for (u, v), rgb in [((32, 32), towel_rgb), ((0, 0), ground_rgb)]:
        ray = pixel_rays(sc.camera, [u, v])
        hit = sc.camera.position + (-sc.camera.position[2] / ray[2]) * ray
        inside = max(abs(hit[0]), abs(hit[1])) < 0.15
        assert inside == (rgb is towel_rgb)
        np.testing.assert_allclose(img[v, u], expected_colour(rgb, sc.lighting), atol=1e-12)


def test_render_deterministic():
    sc = sample_scene(5)
    np.testing.assert_array_equal(render_scene(sc), render_scene(sc))


def test_light_behind_gives_tint_floor():
    light = LightingSpec(0.0, (0.0, 0.0, -1.0), 0.9, (0.2, 0.1, 0.05))
    sc = plain_scene(lighting=light)
    buf = render_buffers(sc)
    towel_rgb = np.array(colorsys.hsv_to_rgb(0.6, 0.7, 0.8))
    ground_rgb = np.array(colorsys.hsv_to_rgb(0.1, 0.5, 0.4))
    np.testing.assert_allclose(buf.image[buf.object_id == TOWEL], np.broadcast_to(towel_rgb * light.env_tint, (int((buf.object_id == TOWEL).sum()), 3)), atol=1e-12)
    np.testing.assert_allclose(buf.image[0, 0], ground_rgb * light.env_tint, atol=1e-12)


def test_rendered_values_finite_and_bounded():
    for s in range(40):
        img = render_scene(sample_scene(s))
        assert img.shape == (128, 128, 3)
        assert np.all(np.isfinite(img)) and img.min() >= 0 and img.max() <= 1


def test_render_other_resolution_rescales_intrinsics():
    sc = plain_scene(size=0.3, res=64)
    big = render_buffers(sc, 128)
    assert big.image.shape == (128, 128, 3)
    # the towel stays centred and covers about the same fraction of the frame
    frac_small = np.mean(render_buffers(sc).object_id == TOWEL)
    assert np.mean(big.object_id == TOWEL) == pytest.approx(frac_small, abs=0.02)


def test_scene_centre_behind_camera():
    sc = plain_scene()
    rot, trans = look_at((0, 0, 1.0), (0, 0, 2.0))
    with pytest.raises(RenderError):
        render_scene(replace(sc, camera=CameraModel(64, 64, 31.5, 31.5, rot, trans)))


def test_distractor_occludes_towel():
    box = Distractor("box", (0.0, 0.0), 0.0, (0.1, 0.1, 0.1), ProceduralMaterial((0.0, 1.0, 1.0), FLAT))
    buf = render_buffers(plain_scene(distractors=[box]))
    assert buf.object_id[32, 32] == 2
    assert buf.depth[32, 32] == pytest.approx(0.9)


# -------------------------------------------------------------- annotation

def test_centred_towel_corners_symmetric():
    sc = plain_scene(size=0.3)
    ann = annotate_corners(sc)
    assert all(ann.visible)
    c = np.array(ann.corners_px) - [sc.camera.cx, sc.camera.cy]
    np.testing.assert_allclose(c, -np.roll(c, 2, axis=0), atol=1e-9)
    np.testing.assert_allclose(np.abs(c), 0.15 * 64, atol=1e-9)


def test_corners_outside_frame_not_visible():
    sc = plain_scene(size=0.4, center=(0.4, 0.0))
    ann = annotate_corners(sc)
    u = np.array(ann.corners_px)[:, 0]
    np.testing.assert_array_equal(ann.visible, u <= 63)
    assert 0 < sum(ann.visible) < 4


def test_occluded_corner_not_visible():
    # corner 0 of a 0.3 m towel at the origin sits at (-0.15, -0.15, 0)
    box = Distractor("box", (-0.15, -0.15), 0.0, (0.04, 0.04, 0.05), ProceduralMaterial((0.0, 1.0, 1.0), FLAT))
    sc = plain_scene(size=0.3, distractors=[box])
    buf = render_buffers(sc)
    u, v = np.round(annotate_corners(sc).corners_px[0]).astype(int)
    assert buf.depth[v, u] == pytest.approx(0.95)  # box top is nearer than the corner at depth 1
    assert annotate_corners(sc).visible == (False, True, True, True)
    moved = replace(sc, distractors=(replace(box, center=(0.0, 0.0)),))
    assert annotate_corners(moved).visible == (True, True, True, True)


def test_annotation_consistency_random_scenes():
    cfg = GenConfig(wrinkle_amplitude=(0.0, 0.0))
    for s in range(100):
        sc = sample_scene(s, cfg)
        buf = render_buffers(sc, shade=False)
        ann = annotate_corners(sc, buffers=buf)
        for (u, v), vis in zip(ann.corners_px, ann.visible):
            if vis:
                assert 0 <= u < 128 and 0 <= v < 128
                assert buf.object_id[int(round(v)), int(round(u))] == TOWEL, (s, u, v)


# ----------------------------------------------------------------- dataset

def test_image_io_roundtrip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (9, 13, 3), dtype=np.uint8)
    for ext in ("ppm", "png"):
        write_image(tmp_path / f"a.{ext}", img)
        np.testing.assert_array_equal(read_image(tmp_path / f"a.{ext}"), img)


def test_read_image_errors(tmp_path):
    with pytest.raises(DatasetError):
        read_image(tmp_path / "missing.ppm")
    (tmp_path / "bad.ppm").write_bytes(b"P6\n4 4\n255\n\x00\x01")
    with pytest.raises(DatasetError):
        read_image(tmp_path / "bad.ppm")


def test_dataset_determinism_and_workers(tmp_path):
    cfg = GenConfig(resolution=48)
    a = generate_dataset(6, 1, tmp_path / "a", cfg)
    b = generate_dataset(6, 1, tmp_path / "b", cfg)
    c = generate_dataset(6, 1, tmp_path / "c", cfg, workers=3)
    assert a.content_hash == b.content_hash == c.content_hash
    for name in ("annotations.json", "manifest.json", "images/000003.ppm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "c" / name).read_bytes()
    recs = load_annotations(tmp_path / "a")
    assert [r["image_id"] for r in recs] == [f"{i:06d}" for i in range(6)]
    assert read_image(tmp_path / "a" / recs[0]["file"]).shape == (48, 48, 3)


def test_dataset_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(DatasetError):
        generate_dataset(2, 0, blocker / "sub", GenConfig(resolution=32))
