import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from uvpulse.mesh_geometry import N_LANDMARKS, CanonicalUV, Tessellation, VertexOrientation
from uvpulse.synth_bench import make_atlas, render_frame
from uvpulse.mesh_geometry import rotation_matrix, frame_orientation
from uvpulse.uv_mapping import (ANGLE_SENTINEL, AngleFrame, UVMappingError, UVRasterizer,
                                angle_to_uint8, apply_mask, bilinear_sample, orientation_mask,
                                rasterize_angle_frame, rasterize_uv_texture, rasterize_triangles)
from meshes import embed, random_mesh
from oracles import bilinear_pixel, point_in_triangle_bary, warp_oracle

THRESHOLDS = (30.0, 45.0, 60.0, 90.0)


def one_triangle(size=16, corners=((1.0, 1.0), (13.0, 2.0), (3.0, 12.0))):
    uv = np.asarray(corners) / (size - 1)
    return embed([(0, 1, 2)], uv, np.asarray(corners))


# ------------------------------------------------------------- texture warp

def test_identity_affine_triangle(rng):
    size = 16
    tess, cuv, xy = one_triangle(size)
    src = rng.uniform(0, 255, size=(size, size, 3))
    out = rasterize_uv_texture(src, xy, tess, cuv, size)
    cov = out.coverage
    assert cov.sum() > 20
    np.testing.assert_allclose(out.texels[cov], src[cov], atol=1e-9)
    assert np.all(out.texels[~cov] == 0)


def test_translated_triangle_samples_shifted(rng):
    size = 16
    tess, cuv, xy = one_triangle(size)
    src = rng.uniform(0, 255, size=(32, 32, 3))
    out = rasterize_uv_texture(src, xy + (5.0, 3.0), tess, cuv, size)
    ty, tx = np.nonzero(out.coverage)
    np.testing.assert_allclose(out.texels[ty, tx], src[ty + 3, tx + 5], atol=1e-9)


@pytest.mark.parametrize("seed", range(4))
def test_random_mesh_matches_oracle(seed):
    rng = np.random.default_rng(100 + seed)
    size = 32
    tri, uv = random_mesh(rng, 10, size)
    uv_px = uv * (size - 1)
    xy = uv_px * rng.uniform(0.6, 1.4) + rng.uniform(-8, 8, size=uv_px.shape)
    src = rng.uniform(0, 255, size=(40, 40, 3))
    tess, cuv, xy_full = embed(tri, uv, xy)
    out = rasterize_uv_texture(src, xy_full, tess, cuv, size)
    ref, ref_cov = warp_oracle(src, uv_px, xy, tri, size)
    np.testing.assert_array_equal(out.coverage, ref_cov)
    np.testing.assert_allclose(out.texels, ref, atol=1e-5)


def test_zero_fill_and_range_on_assets(assets, rng):
    src = rng.uniform(20, 200, size=(150, 150, 3))
    pts = assets.canonical[:, :2] * 60 + 75
    out = rasterize_uv_texture(src, pts, assets.tess, assets.uv, 64)
    assert np.all(out.texels[~out.coverage] == 0)
    inside = out.texels[out.coverage]
    assert inside.min() >= src.min() - 1e-9 and inside.max() <= src.max() + 1e-9


def test_atlas_triangles_do_not_overlap(assets):
    rast = UVRasterizer(assets.tess, assets.uv, 128)
    multi = rast.n_hits > 1
    # texels claimed by several triangles may only lie on shared edges
    assert np.all(rast.bary[multi].min(axis=1) <= 1e-9)
    assert np.all(rast.n_hits[rast.coverage] >= 1)


def test_all_degenerate_uv_is_an_error(assets):
    cuv = CanonicalUV(np.full((N_LANDMARKS, 2), 0.5))
    with pytest.raises(UVMappingError, match="no texels"):
        UVRasterizer(assets.tess, cuv, 32)


def test_uv_size_must_be_at_least_two(assets):
    with pytest.raises(UVMappingError):
        UVRasterizer(assets.tess, assets.uv, 1)


def test_rasterize_triangles_priority(rng):
    # two identical triangles: the one first in `order` owns every texel
    verts = np.array([[0.0, 0.0], [9.0, 0.0], [0.0, 9.0]])
    tris = np.array([[0, 1, 2], [0, 1, 2]])
    idx, _, hits = rasterize_triangles(verts, tris, (10, 10))
    assert set(np.unique(idx[idx >= 0])) == {0}
    idx, _, _ = rasterize_triangles(verts, tris, (10, 10), order=[1.0, 0.0])
    assert set(np.unique(idx[idx >= 0])) == {1}
    assert hits.max() == 2


@given(arrays(np.float64, (6, 7, 2), elements=st.floats(0, 100)),
       arrays(np.float64, (50,), elements=st.floats(-2, 9)),
       arrays(np.float64, (50,), elements=st.floats(-2, 8)))
def test_bilinear_sample_matches_oracle(img, x, y):
    got = bilinear_sample(img, x, y)
    ref = np.array([bilinear_pixel(img, a, b) for a, b in zip(x, y)])
    np.testing.assert_allclose(got, ref, atol=1e-9)


# ---------------------------------------------------------------- angles

def test_constant_angle_field(assets):
    vo = VertexOrientation(np.zeros((N_LANDMARKS, 3)), np.full(N_LANDMARKS, 30.0))
    af = rasterize_angle_frame(vo, assets.tess, assets.uv, 64)
    np.testing.assert_allclose(af.theta_uv[af.coverage], 30.0)
    assert np.all(af.theta_uv[~af.coverage] == ANGLE_SENTINEL)


def test_angle_at_centroid():
    size = 8
    corners = np.array([[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]])
    tess, cuv = embed([(0, 1, 2)], corners / (size - 1), park_uv=(1.0, 1.0))
    theta = np.zeros(N_LANDMARKS)
    theta[2] = 90.0
    af = rasterize_angle_frame(VertexOrientation(np.zeros((N_LANDMARKS, 3)), theta), tess, cuv, size)
    assert af.coverage[2, 2]
    assert af.theta_uv[2, 2] == pytest.approx(30.0, abs=1e-9)


def test_random_angles_vs_oracle(assets, rng):
    size = 128
    theta = rng.uniform(0, 180, N_LANDMARKS)
    af = rasterize_angle_frame(VertexOrientation(np.zeros((N_LANDMARKS, 3)), theta),
                               assets.tess, assets.uv, size)
    uv_px = assets.uv.uv * (size - 1)
    rows, cols = np.nonzero(af.coverage)
    pick = rng.choice(len(rows), 1000, replace=False)
    for r, c in zip(rows[pick], cols[pick]):
        for t in assets.tess.triangles:
            lam = point_in_triangle_bary((c, r), *uv_px[t])
            if lam is not None and min(lam) >= -1e-9:
                lam = np.clip(lam, 0, 1) / np.clip(lam, 0, 1).sum()
                assert af.theta_uv[r, c] == pytest.approx(float(lam @ theta[t]), abs=1e-6)
                break
        else:
            pytest.fail(f"texel {(r, c)} marked covered but no triangle contains it")


# ------------------------------------------------------------------ masks

def angle_frames(size=12):
    return st.tuples(
        arrays(np.float64, (size, size), elements=st.floats(0, 180)),
        arrays(bool, (size, size)),
    ).map(lambda t: AngleFrame(np.where(t[1], t[0], ANGLE_SENTINEL), t[1]))


def test_mask_all_kept_at_30():
    af = AngleFrame(np.full((4, 4), 30.0), np.ones((4, 4), bool))
    assert orientation_mask(af, 45).keep.all()


def test_mask_at_threshold_is_removed():
    af = AngleFrame(np.full((4, 4), 90.0), np.ones((4, 4), bool))
    assert not orientation_mask(af, 90).keep.any()


@given(angle_frames())
def test_mask_definition_and_monotonicity(af):
    keeps = [orientation_mask(af, t).keep for t in THRESHOLDS]
    for t, k in zip(THRESHOLDS, keeps):
        np.testing.assert_array_equal(k, af.coverage & (af.theta_uv < t))
        assert not np.any(k & ~af.coverage)
    for small, large in zip(keeps, keeps[1:]):
        assert not np.any(small & ~large)


@pytest.mark.parametrize("bad", [0.0, -5.0, 181.0])
def test_mask_threshold_range(bad):
    af = AngleFrame(np.zeros((2, 2)), np.ones((2, 2), bool))
    with pytest.raises(UVMappingError):
        orientation_mask(af, bad)


def test_apply_mask_examples(rng):
    from uvpulse.uv_mapping import OrientationMask, UVFrame
    tex = rng.uniform(0, 1, size=(6, 6, 3))
    frame = UVFrame(tex, np.ones((6, 6), bool))
    same = apply_mask(frame, OrientationMask(np.ones((6, 6), bool), 45))
    np.testing.assert_array_equal(same.texels, tex)
    none = apply_mask(frame, OrientationMask(np.zeros((6, 6), bool), 45))
    assert np.all(none.texels == 0) and not none.coverage.any()
    keep = rng.random((6, 6)) < 0.5
    out = apply_mask(frame, OrientationMask(keep, 45))
    np.testing.assert_array_equal(out.texels, tex * keep[..., None])
    np.testing.assert_array_equal(out.coverage, keep)
    with pytest.raises(UVMappingError):
        apply_mask(frame, OrientationMask(np.ones((5, 5), bool), 45))


def test_angle_debug_dump_scaling():
    af = AngleFrame(np.array([[0.0, 90.0], [180.0, 45.0]]), np.ones((2, 2), bool))
    np.testing.assert_array_equal(angle_to_uint8(af), [[0, 128], [255, 64]])


# ------------------------------------------------------ rigid invariance

def test_in_plane_rigid_motion_invariance(assets):
    atlas = make_atlas(128, seed=3)

    def uv_at(roll, shift):
        verts = (60 * assets.canonical) @ rotation_matrix(0, 0, roll).T + (71.5 + shift[0], 71.5 + shift[1], 0)
        img, _ = render_frame(atlas, verts, assets.tess, assets.uv, (144, 144), (0, 0, 0))
        tex = rasterize_uv_texture(img, verts[:, :2], assets.tess, assets.uv, 128)
        af = rasterize_angle_frame(frame_orientation(verts, assets.tess), assets.tess, assets.uv, 128)
        return tex, orientation_mask(af, 45).keep

    a, ka = uv_at(0.0, (0.0, 0.0))
    b, kb = uv_at(20.0, (4.3, -2.7))
    keep = ka & kb
    assert keep.sum() > 1000
    diff = np.abs(a.texels[keep] - b.texels[keep])
    assert diff.mean() <= 0.02 * np.ptp(atlas)
