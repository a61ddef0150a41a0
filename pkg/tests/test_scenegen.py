import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ddl import imageio
from ddl.scenegen import (DEFAULT_CONDITIONS, TOM, ConditionTag, OracleParams, SceneSpec, apply_condition_oracle,
                          generate_scene, ground_depth, normalized_inverse_depth)


def painter(scene):
    """Far-to-near painter's render of depth, object ids and validity."""
    spec = scene.spec
    gdepth, gvalid = ground_depth(spec, scene.horizon_row)
    depth = np.repeat(gdepth[:, None], spec.width, axis=1)
    valid = np.repeat(gvalid[:, None], spec.width, axis=1)
    ids = np.zeros(depth.shape, dtype=np.int64)
    order = sorted(range(len(scene.primitives)), key=lambda k: (-scene.primitives[k].depth, -k))
    for k in order:
        p = scene.primitives[k]
        cover = p.coverage(spec.height, spec.width)
        for r in range(spec.height):
            for c in range(spec.width):
                # a primitive hides the ground only where it stands in front of it
                if cover[r, c] and p.depth < gdepth[r]:
                    depth[r, c] = p.depth
                    valid[r, c] = True
                    ids[r, c] = k + 1
    return np.clip(depth, spec.d_min, spec.d_max), valid, ids


def test_same_seed_identical():
    a, b = generate_scene(42), generate_scene(42)
    for x, y in ((a.depth.values, b.depth.values), (a.easy_image, b.easy_image),
                 (a.object_mask, b.object_mask), (a.material_mask, b.material_mask)):
        assert x.tobytes() == y.tobytes()
    assert a.primitives == b.primitives


def test_zero_objects_is_ground_ramp():
    spec = SceneSpec(n_objects=(0, 0))
    s = generate_scene(3, spec)
    assert not s.object_mask.any()
    g, valid = ground_depth(spec, s.horizon_row)
    np.testing.assert_array_equal(s.depth.values, np.clip(np.repeat(g[:, None], spec.width, 1), 1.0, 10.0))
    np.testing.assert_array_equal(s.depth.valid_mask, np.repeat(valid[:, None], spec.width, 1))


@pytest.mark.parametrize("kwargs", [dict(d_min=0.0), dict(d_min=-1.0), dict(height=0), dict(width=0)])
def test_bad_spec_rejected(kwargs):
    with pytest.raises(ValueError):
        SceneSpec(**kwargs)


def test_occlusion_matches_painter_oracle():
    spec = SceneSpec()
    for seed in range(1000):
        s = generate_scene(seed, spec)
        assert s.depth.values.min() >= spec.d_min and s.depth.values.max() <= spec.d_max
        assert s.easy_image.min() >= 0.0 and s.easy_image.max() <= 1.0
        if seed % 10:
            continue  # the per-pixel oracle is slow; every tenth scene gets it
        depth, valid, ids = painter(s)
        np.testing.assert_array_equal(s.depth.values, depth)
        np.testing.assert_array_equal(s.depth.valid_mask, valid)
        np.testing.assert_array_equal(s.object_mask, ids)


def test_nearer_object_overwrites_farther():
    for seed in range(300):
        s = generate_scene(seed)
        for r, c in zip(*np.nonzero(s.object_mask)):
            k = s.object_mask[r, c] - 1
            for j, p in enumerate(s.primitives):
                if p.coverage(s.spec.height, s.spec.width)[r, c]:
                    assert s.primitives[k].depth <= p.depth or j == k


def test_material_marks_tom_objects_only():
    for seed in range(50):
        s = generate_scene(seed)
        tom_ids = {k + 1 for k, p in enumerate(s.primitives) if p.tom}
        expected = np.isin(s.object_mask, list(tom_ids)) & (s.object_mask > 0)
        np.testing.assert_array_equal(s.material_mask == TOM, expected)


def test_unknown_tag_rejected():
    with pytest.raises(ValueError):
        apply_condition_oracle(generate_scene(0), "fog", 0)


@pytest.mark.parametrize("tag", DEFAULT_CONDITIONS)
def test_zero_strength_is_identity(tag):
    s = generate_scene(11)
    out = apply_condition_oracle(s, tag, 5, OracleParams().scaled(0.0))
    assert out.tobytes() == s.easy_image.tobytes()


def test_night_gamma_closed_form():
    s = generate_scene(0)
    s.easy_image = np.full_like(s.easy_image, 0.5)
    p = OracleParams(night_gamma=2.0, night_blue_bias=0.0, night_noise_sigma=0.0)
    np.testing.assert_allclose(apply_condition_oracle(s, "night", 0, p), 0.25, rtol=0, atol=1e-15)


def test_tom_only_touches_tom_pixels():
    hits = 0
    for seed in range(40):
        s = generate_scene(seed)
        out = apply_condition_oracle(s, ConditionTag.TOM, 1)
        outside = s.material_mask != TOM
        assert out[:, outside].tobytes() == s.easy_image[:, outside].tobytes()
        hits += int(np.any(out[:, ~outside] != s.easy_image[:, ~outside]))
    assert hits > 10


@pytest.mark.parametrize("tag", DEFAULT_CONDITIONS)
def test_depth_untouched_and_deterministic(tag):
    s = generate_scene(8)
    before = s.depth.values.copy()
    a = apply_condition_oracle(s, tag, 3)
    b = apply_condition_oracle(s, tag, 3)
    assert a.tobytes() == b.tobytes()
    assert s.depth.values.tobytes() == before.tobytes()
    assert a.min() >= 0 and a.max() <= 1


@pytest.mark.parametrize("tag", DEFAULT_CONDITIONS)
def test_photometric_challenge_floor(tag):
    shifts = []
    for seed in range(50):
        s = generate_scene(seed)
        shifts.append(np.abs(apply_condition_oracle(s, tag, seed) - s.easy_image).mean())
    assert np.mean(shifts) > 0.02


def test_normalized_inverse_depth_range():
    inv = normalized_inverse_depth(generate_scene(4).depth)
    assert inv.min() == 0.0 and inv.max() == 1.0


# ---------------------------------------------------------------- file formats
@settings(max_examples=25, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), seed=st.integers(0, 1000))
def test_netpbm_and_pfm_roundtrip(tmp_path_factory, h, w, seed):
    d = tmp_path_factory.mktemp("io")
    rng = np.random.default_rng(seed)
    img = rng.integers(0, 256, size=(3, h, w)) / 255.0
    imageio.write_ppm(d / "a.ppm", img)
    np.testing.assert_array_equal(imageio.read_ppm(d / "a.ppm"), img)
    mask = rng.integers(0, 256, size=(h, w)).astype(np.uint8)
    imageio.write_pgm(d / "m.pgm", mask)
    np.testing.assert_array_equal(imageio.read_pgm(d / "m.pgm"), mask)
    depth = rng.uniform(1, 10, size=(h, w)).astype(np.float32)
    imageio.write_pfm(d / "d.pfm", depth)
    assert imageio.read_pfm(d / "d.pfm").tobytes() == depth.tobytes()


def test_pfm_header_is_little_endian(tmp_path):
    imageio.write_pfm(tmp_path / "d.pfm", np.ones((2, 3)))
    assert (tmp_path / "d.pfm").read_bytes().startswith(b"Pf\n3 2\n-1.0\n")


def test_pgm_rejects_out_of_range(tmp_path):
    with pytest.raises(ValueError):
        imageio.write_pgm(tmp_path / "m.pgm", np.array([[256]]))
