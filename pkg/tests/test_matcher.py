import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adatrack.features import encode
from adatrack.geometry import BBox
from adatrack.matcher import corner_fractions, interpolate_corner_flow, match_anchor, refine_corners
from adatrack.synth import make_texture
from adatrack.template import CONTEXT_MARGIN, encode_inner
from tests.conftest import texture_image
from tests.oracles import brute_force_blend, template_scene


def _pasted_roi(seed, at=(4, 4), size=(16, 16)):
    """ROI features with an exact copy of the template cells pasted at cell ``at``."""
    rng = np.random.default_rng(seed)
    roi = rng.standard_normal(size + (32,))
    roi /= np.linalg.norm(roi, axis=-1, keepdims=True)
    tpl = roi[at[1]:at[1] + 8, at[0]:at[0] + 8].copy()
    return tpl, roi


def test_self_paste_is_fixed_point():
    tpl, roi = _pasted_roi(0)
    init = BBox(32, 32, 64, 64)
    r = match_anchor(tpl, roi, None, init)
    np.testing.assert_allclose(r.bbox.as_tuple(), init.as_tuple(), atol=0.1)
    assert r.confidence >= 0.95
    assert r.iterations_run <= 2


def test_displaced_paste():
    tpl, roi = _pasted_roi(1, at=(6, 5))
    init = BBox(32, 32, 64, 64)
    r = match_anchor(tpl, roi, None, init)
    np.testing.assert_allclose(r.bbox.as_tuple(), (48, 40, 64, 64), atol=1.0)


@given(st.integers(0, 500), st.integers(2, 6), st.integers(2, 6))
def test_paste_history_monotone(seed, ax, ay):
    tpl, roi = _pasted_roi(seed, at=(ax, ay))
    r = match_anchor(tpl, roi, None, BBox(32, 32, 64, 64))
    assert np.all(np.diff(r.history) >= -1e-9)


def test_textureless_roi():
    tpl, _ = _pasted_roi(2)
    init = BBox(30, 30, 64, 64)
    r = match_anchor(tpl, np.zeros((16, 16, 32)), None, init)
    assert r.bbox == init and r.confidence == 0.0


def test_errors():
    tpl, roi = _pasted_roi(3)
    with pytest.raises(ValueError):
        match_anchor(tpl, roi, None, BBox(0, 0, 64, 64), iters=0)
    with pytest.raises(ValueError, match="template exceeds search region"):
        match_anchor(roi, tpl, None, BBox(0, 0, 64, 64))


@given(st.integers(0, 300), st.floats(-6, 6), st.floats(-6, 6))
def test_corner_bookkeeping(seed, dx, dy):
    tex = make_texture("perlin", seed)
    roi_img = texture_image(tex, 128, 128)
    p0 = template_scene(tex, origin=(32 + dx, 32 + dy))
    init = BBox(32, 32, 64, 64)
    r = match_anchor(encode_inner(p0, 32, CONTEXT_MARGIN), encode(roi_img), None, init,
                     template_image=p0, roi_image=roi_img, template_margin=CONTEXT_MARGIN)
    x1, y1, x2, y2 = r.bbox.corners()
    assert x1 == pytest.approx(init.x + r.corner_flow_tl.u, abs=1e-9)
    assert y1 == pytest.approx(init.y + r.corner_flow_tl.v, abs=1e-9)
    assert x2 == pytest.approx(init.x2 + r.corner_flow_br.u, abs=1e-9)
    assert y2 == pytest.approx(init.y2 + r.corner_flow_br.v, abs=1e-9)


@pytest.mark.parametrize("seed", range(4))
def test_subpixel_shift_recovered(seed):
    rng = np.random.default_rng(seed)
    dx, dy = rng.uniform(-6, 6, 2)
    tex = make_texture("perlin", 20 + seed)
    roi_img = texture_image(tex, 128, 128)
    p0 = template_scene(tex, origin=(32 + dx, 32 + dy))
    r = match_anchor(encode_inner(p0, 32, CONTEXT_MARGIN), encode(roi_img), None, BBox(32, 32, 64, 64),
                     template_image=p0, roi_image=roi_img, template_margin=CONTEXT_MARGIN)
    np.testing.assert_allclose(r.bbox.as_tuple(), (32 + dx, 32 + dy, 64, 64), atol=0.5)


def test_refine_corners_never_worsens():
    tex = make_texture("perlin", 31)
    roi_img = texture_image(tex, 128, 128)
    p0 = template_scene(tex, origin=(34.3, 30.6))
    box, before, after = refine_corners(p0, roi_img, BBox(33, 32, 64, 64), margin=CONTEXT_MARGIN)
    assert after <= before
    np.testing.assert_allclose(box.as_tuple(), (34.3, 30.6, 64, 64), atol=0.25)


def test_corner_fractions():
    s, t = corner_fractions((2, 4))
    np.testing.assert_allclose(s[0], [0.125, 0.375, 0.625, 0.875])
    np.testing.assert_allclose(t[:, 0], [0.25, 0.75])


@given(st.tuples(st.floats(-20, 20), st.floats(-20, 20)), st.tuples(st.floats(-20, 20), st.floats(-20, 20)),
       st.floats(0, 1), st.floats(0, 1))
def test_interpolation_equals_bilinear_blend(tl, br, s, t):
    got = interpolate_corner_flow(tl, br, np.array(s), np.array(t))
    np.testing.assert_allclose(got, brute_force_blend(tl, br, np.array(s), np.array(t)), atol=1e-9)


def test_interpolation_hits_corners():
    got = interpolate_corner_flow((1.0, 2.0), (3.0, 5.0), np.array([0.0, 1.0]), np.array([0.0, 1.0]))
    np.testing.assert_array_equal(got, [[1.0, 2.0], [3.0, 5.0]])
