import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from skimage.metrics import structural_similarity

from adatrack.features import encode
from adatrack.flow import FlowField
from adatrack.geometry import Point2
from adatrack.synth import make_texture
from adatrack.template import (
    CONTEXT_MARGIN as M,
    TemplateState,
    encode_inner,
    fuse_features,
    resize_confidence,
    resize_occlusion,
    scale_ratio,
    warp_template,
)
from tests.oracles import psnr, rendered_rotation, similarity_node_flow, template_scene, warped_state

CENTER = Point2(32.0, 32.0)


def test_from_patch_initial_state(perlin):
    p0 = template_scene(perlin)
    s = TemplateState.from_patch(p0, margin=M)
    assert s.f0.shape == (8, 8, 32)
    assert s.g.shape == (8, 8) and not np.any(s.g.uv)
    assert s.scale == 1.0 and s.center == CENTER
    with pytest.raises(ValueError):
        TemplateState.from_patch(p0, margin=12)


def test_encode_inner_drops_margin(perlin):
    p0 = template_scene(perlin)
    np.testing.assert_array_equal(encode_inner(p0, 32, M), encode(p0)[2:-2, 2:-2])


def test_scale_ratio_examples():
    assert scale_ratio(FlowField.zeros(8, 8), CENTER) == 1.0
    assert scale_ratio(FlowField.uniform(8, 8, 10, 0), CENTER) == pytest.approx(1.0, abs=1e-12)
    zoom = similarity_node_flow((8, 8), (32, 32), zoom=1.5)
    assert scale_ratio(zoom, CENTER) == pytest.approx(1.5, abs=1e-3)


def test_scale_ratio_degenerate():
    with pytest.raises(ValueError, match="degenerate grid"):
        scale_ratio(FlowField.zeros(1, 1), Point2(4.0, 4.0))


@given(st.floats(0.7, 1.4), st.floats(-20, 20), st.floats(-30, 30), st.floats(-10, 10))
def test_scale_ratio_translation_invariant(zoom, deg, du, dv):
    g = similarity_node_flow((8, 8), (32, 32), zoom=zoom, degrees=deg)
    moved = FlowField(g.uv + np.array([du, dv]))
    assert scale_ratio(moved, CENTER) == pytest.approx(scale_ratio(g, CENTER), rel=1e-12)


def test_warp_identity_is_bit_exact(perlin):
    p0 = template_scene(perlin)
    s = TemplateState.from_patch(p0, margin=M)
    assert warp_template(s).tobytes() == p0.tobytes()


@given(st.floats(0.8, 1.25), st.floats(-12, 12), st.floats(-12, 12))
def test_warp_cancels_similarity(zoom, du, dv):
    p0 = template_scene(make_texture("perlin", 2))
    s = warped_state(p0, zoom=zoom, shift=(du, dv))
    assert np.max(np.abs(warp_template(s) - p0)) <= 1e-3


def test_warp_zoom_psnr():
    p0 = template_scene(make_texture("perlin", 4))
    pw = warp_template(warped_state(p0, zoom=1.25))
    assert psnr(pw[M:-M, M:-M], p0[M:-M, M:-M]) >= 40.0


def test_warp_keeps_rotation():
    tex = make_texture("perlin", 6)
    p0 = template_scene(tex)
    pw = warp_template(warped_state(p0, degrees=10.0))
    target = rendered_rotation(tex, 10.0)
    c = slice(M + 10, M + 54)  # central 70% of the template
    warped_ssim = structural_similarity(pw[c, c], target[c, c], data_range=1.0)
    assert warped_ssim >= 0.9
    assert warped_ssim > structural_similarity(p0[c, c], target[c, c], data_range=1.0)


def _feats(seed, shape=(8, 8, 32)):
    f = np.random.default_rng(seed).standard_normal(shape)
    return f / np.linalg.norm(f, axis=-1, keepdims=True)


def test_fuse_alpha_one():
    fw, fp = _feats(0), _feats(1)
    u = np.random.default_rng(2).random((8, 8))
    out = fuse_features(fw, fp, u, np.zeros((8, 8), bool), 1.0)
    np.testing.assert_allclose(out, fw, atol=1e-12)


def test_fuse_all_occluded_alpha_zero():
    out = fuse_features(_feats(0), _feats(1), np.ones((8, 8)), np.ones((8, 8), bool), 0.0)
    assert not np.any(out)


def test_fuse_pass_through():
    fp = _feats(1)
    out = fuse_features(_feats(0), fp, np.ones((8, 8)), np.zeros((8, 8), bool), 0.0)
    np.testing.assert_allclose(out, fp, atol=1e-12)


@given(st.floats(0, 1), st.integers(0, 1000))
def test_fuse_affine_in_alpha(alpha, seed):
    rng = np.random.default_rng(seed)
    fw, fp = _feats(seed), _feats(seed + 1)
    u = rng.random((8, 8))
    o = rng.random((8, 8)) > 0.7
    f1 = fuse_features(fw, fp, u, o, 1.0, normalize=False)
    f0 = fuse_features(fw, fp, u, o, 0.0, normalize=False)
    np.testing.assert_allclose(fuse_features(fw, fp, u, o, alpha, normalize=False),
                               alpha * f1 + (1 - alpha) * f0, atol=1e-12)


@given(st.integers(0, 1000))
def test_fuse_ignores_occluded_cells(seed):
    rng = np.random.default_rng(seed)
    fw, fp = _feats(seed), _feats(seed + 1)
    u = rng.random((8, 8))
    o = rng.random((8, 8)) > 0.5
    junk = fp.copy()
    junk[o] = rng.standard_normal((int(o.sum()), 32)) * 1e3
    np.testing.assert_array_equal(fuse_features(fw, fp, u, o, 0.5), fuse_features(fw, junk, u, o, 0.5))


def test_fuse_validation():
    with pytest.raises(ValueError):
        fuse_features(_feats(0), _feats(1, (8, 7, 32)), np.ones((8, 8)), np.zeros((8, 8), bool), 0.5)
    with pytest.raises(ValueError):
        fuse_features(_feats(0), _feats(1), np.ones((8, 8)), np.zeros((8, 8), bool), 1.5)


def test_resize_maps():
    o = np.zeros((32, 32), bool)
    o[:, :16] = True
    small = resize_occlusion(o, (8, 8))
    assert small.dtype == bool
    assert small[:, :4].all() and not small[:, 4:].any()
    u = np.full((32, 32), 0.25)
    np.testing.assert_allclose(resize_confidence(u, (8, 8)), 0.25)
