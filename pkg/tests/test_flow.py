import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from adatrack.features import encode
from adatrack.flow import (
    CorrelationFlow,
    FlowField,
    build_cost_volume,
    compose_flow,
    estimate_flow,
    estimate_flow_pair,
    fb_occlusion,
    occlusion_fraction,
    read_flow,
    sample_flow,
    soft_argmax_step,
    weighted_median3,
    write_flow,
)
from adatrack.geometry import BBox
from adatrack.synth import Motion, Occluder, SynthSpec, generate, make_texture, render_pair
from tests.conftest import texture_image

floats = st.floats(-20, 20, allow_nan=False)


def _unit(rng, shape):
    f = rng.standard_normal(shape)
    return f / np.linalg.norm(f, axis=-1, keepdims=True)


# -- cost volume --------------------------------------------------------------

def test_self_correlation_peaks_on_diagonal():
    rng = np.random.default_rng(0)
    f = _unit(rng, (6, 5, 32))
    vol = build_cost_volume(f, f).levels[0]
    for i in range(6):
        for j in range(5):
            assert vol[i, j, i, j] == pytest.approx(1.0)
            assert vol[i, j].max() == pytest.approx(vol[i, j, i, j])


def test_orthogonal_features_give_zero():
    a = np.zeros((3, 3, 4))
    b = np.zeros((3, 3, 4))
    a[..., 0] = 1.0
    b[..., 1] = 1.0
    assert not np.any(build_cost_volume(a, b).levels[0])


def test_cost_volume_brute_force():
    rng = np.random.default_rng(1)
    a = rng.standard_normal((4, 4, 8))
    b = rng.standard_normal((4, 4, 8))
    vol = build_cost_volume(a, b, levels=2)
    for i, j, k, l in np.ndindex(4, 4, 4, 4):
        assert vol[i, j, k, l] == pytest.approx(float(np.sum(a[i, j] * b[k, l])))
    assert vol.levels[1].shape == (4, 4, 2, 2)
    assert vol.levels[1][1, 2, 0, 1] == pytest.approx(vol.levels[0][1, 2, 0:2, 2:4].mean())


def test_cost_volume_channel_mismatch():
    with pytest.raises(ValueError, match="channel mismatch"):
        build_cost_volume(np.zeros((2, 2, 3)), np.zeros((2, 2, 4)))


def test_lookup_matches_direct_indexing():
    rng = np.random.default_rng(2)
    a = _unit(rng, (5, 6, 8))
    b = _unit(rng, (7, 8, 8))
    vol = build_cost_volume(a, b)
    coords = np.zeros((5, 6, 2))
    coords[..., 0] = 3.0
    coords[..., 1] = 2.0
    out = vol.lookup(coords, radius=1)
    np.testing.assert_allclose(out[:, :, 1, 1], vol.levels[0][:, :, 2, 3])
    np.testing.assert_allclose(out[:, :, 0, 2], vol.levels[0][:, :, 1, 4])
    # far outside the target grid reads as zero
    assert not np.any(vol.lookup(coords + 100.0, radius=1))


# -- refinement primitives ------------------------------------------------------

def test_soft_argmax_symmetric_is_zero():
    y, x = np.mgrid[-2:3, -2:3]
    samples = np.exp(-(x ** 2 + y ** 2))[None, None]
    delta, _ = soft_argmax_step(samples, 0.05)
    np.testing.assert_allclose(delta, 0.0, atol=1e-12)


def test_weighted_median_rejects_outlier():
    vals = np.ones((5, 5))
    vals[2, 2] = 50.0
    med = weighted_median3(vals, np.ones((5, 5)))
    assert med[2, 2] == 1.0


# -- estimate_flow ----------------------------------------------------------------

def test_identity_pair_zero_flow(perlin):
    img = texture_image(perlin, 128, 128)
    flow, conf = estimate_flow(img, img)
    assert not np.any(flow.uv)
    assert conf.mean() >= 0.9


@pytest.mark.parametrize("shift", [(5.0, 0.0), (-3.5, 2.25)])
def test_translation_epe(shift):
    src, dst, gt = render_pair(make_texture("perlin", 5), (128, 128), shift)
    flow, _ = estimate_flow(src, dst)
    epe = np.hypot(*(flow.uv - gt.uv).transpose(2, 0, 1))
    inner = epe[16:-16, 16:-16]
    assert inner.mean() <= 0.5


def test_zoom_central_epe():
    src, dst, gt = render_pair(make_texture("perlin", 8), (192, 192), zoom=1.1)
    flow, _ = estimate_flow(src, dst)
    epe = np.hypot(*(flow.uv - gt.uv).transpose(2, 0, 1))
    assert epe[48:144, 48:144].mean() <= 0.7


def test_periodic_shift_equivariance():
    n = 256
    tex = make_texture("perlin", 3, period=n)
    src = texture_image(tex, n, n)
    for s in [(8, 0), (24, -16), (-32, 32)]:
        dst = np.roll(src, (s[1], s[0]), axis=(0, 1))
        flow, _ = estimate_flow(src, dst)
        yy, xx = np.mgrid[0:n, 0:n] + 0.5
        # pixels whose content stays inside the frame (the wrapped band has no source)
        v = (xx + s[0] > 0) & (xx + s[0] < n) & (yy + s[1] > 0) & (yy + s[1] < n)
        e = np.hypot(flow.u - s[0], flow.v - s[1])
        assert e[v].mean() <= 0.5


def test_confidence_drops_with_noise():
    src, dst, _ = render_pair(make_texture("perlin", 4), (96, 96), (3, 1))
    noise = np.random.default_rng(4).standard_normal(dst.shape)
    means = [estimate_flow(src, dst + a * noise)[1].mean() for a in (0.0, 0.05, 0.1)]
    assert means[0] >= means[1] >= means[2]


def test_estimate_flow_errors(perlin):
    img = texture_image(perlin, 32, 32)
    with pytest.raises(ValueError):
        estimate_flow(img, img[:16])
    with pytest.raises(ValueError):
        estimate_flow(img, img, iters=0)


def test_backend_is_pluggable(perlin):
    class Constant:
        def estimate_flow(self, src, dst, iters):
            h, w = src.shape[:2]
            return FlowField.uniform(h, w, 1.0, 0.0), np.ones((h, w))

    img = texture_image(perlin, 32, 32)
    pair = estimate_flow_pair(img, img, backend=Constant())
    assert np.all(pair.forward.u == 1.0)
    small = CorrelationFlow(levels=1, radius=3)
    f, c = estimate_flow(img, img, backend=small)
    assert f.shape == (32, 32) and c.shape == (32, 32)


# -- flow algebra -------------------------------------------------------------------

def test_compose_identity():
    rng = np.random.default_rng(5)
    v = FlowField(rng.uniform(-2, 2, (10, 12, 2)))
    out = compose_flow(FlowField.zeros(10, 12), v)
    np.testing.assert_array_equal(out.uv, v.uv)


@given(floats, floats, floats, floats)
def test_compose_translations_add(a, b, c, d):
    g = FlowField.uniform(16, 16, a, b)
    v = FlowField.uniform(16, 16, c, d)
    out = compose_flow(g, v)
    np.testing.assert_allclose(out.u, a + c, atol=1e-12)
    np.testing.assert_allclose(out.v, b + d, atol=1e-12)


def test_compose_example():
    out = compose_flow(FlowField.uniform(8, 8, 2, 0), FlowField.uniform(8, 8, 3, 0))
    np.testing.assert_allclose(out.u, 5.0)
    np.testing.assert_allclose(out.v, 0.0)


def _zoom_field(n, s):
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    c = (n - 1) / 2.0
    return FlowField(np.stack([(s - 1) * (xx - c), (s - 1) * (yy - c)], axis=-1))


def test_compose_zooms():
    n = 64
    out = compose_flow(_zoom_field(n, 1.05), _zoom_field(n, 1.04))
    expect = _zoom_field(n, 1.05 * 1.04)
    err = np.hypot(*(out.uv - expect.uv).transpose(2, 0, 1))
    assert err[out.valid].max() <= 0.2


def test_compose_extent_mismatch():
    with pytest.raises(ValueError):
        compose_flow(FlowField.zeros(4, 4), FlowField.zeros(4, 5))


def test_fb_exact_inverse_translation():
    o = fb_occlusion(FlowField.uniform(20, 30, 3, 0), FlowField.uniform(20, 30, -3, 0))
    assert not o[:, :-3].any()
    assert o[:, -3:].all()


def test_fb_zero_flow():
    assert not fb_occlusion(FlowField.zeros(10, 10), FlowField.zeros(10, 10)).any()


@given(st.floats(-4, 4), st.floats(-4, 4), st.floats(0.9, 1.1))
def test_fb_exact_inverse_affine(du, dv, s):
    n = 40
    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    c = (n - 1) / 2.0
    fwd = np.stack([(s - 1) * (xx - c) + du, (s - 1) * (yy - c) + dv], axis=-1)
    # inverse of x -> c + s (x - c) + d
    bwd = np.stack([(1 / s - 1) * (xx - c) - du / s, (1 / s - 1) * (yy - c) - dv / s], axis=-1)
    o = fb_occlusion(FlowField(fwd), FlowField(bwd))
    tx, ty = xx + fwd[..., 0], yy + fwd[..., 1]
    leaves = (tx < 0) | (tx > n - 1) | (ty < 0) | (ty > n - 1)
    np.testing.assert_array_equal(o, leaves)


def test_fb_flags_synthetic_occluder():
    spec = SynthSpec(seed=1, frames=3, size=(192, 192), motion=Motion(shift=(2, 1)),
                     occluder=Occluder(size=40, entry_frame=2, velocity=(-3, 0), start=(96, 96)),
                     init_box=BBox(70, 70, 50, 50))
    fr = generate(spec)
    pair = estimate_flow_pair(fr[1].image, fr[2].image)
    o = fb_occlusion(pair.forward, pair.backward)
    gt = fr[2].gt_occlusion | fr[1].gt_occlusion
    inner = np.zeros_like(o)
    inner[16:-16, 16:-16] = True
    assert o[gt].mean() >= 0.8
    assert o[~gt & inner].mean() <= 0.1


def test_occlusion_fraction():
    o = np.zeros((20, 20), dtype=bool)
    b = BBox(4, 4, 10, 8)
    assert occlusion_fraction(o, b) == 0.0
    o[:, :9] = True
    assert occlusion_fraction(o, b) == 0.5
    with pytest.raises(ValueError):
        occlusion_fraction(o, BBox(50, 50, 5, 5))


@given(st.integers(0, 10_000), st.integers(0, 20), st.integers(0, 20), st.integers(1, 12), st.integers(1, 12))
def test_occlusion_fraction_brute_force(seed, x, y, w, h):
    o = np.random.default_rng(seed).random((32, 32)) > 0.6
    frac = occlusion_fraction(o, BBox(x, y, w, h))
    count = sum(o[i, j] for i in range(y, y + h) for j in range(x, x + w))
    assert frac == count / (w * h)


def test_sample_flow_at_pixel_centers():
    uv = np.random.default_rng(6).standard_normal((6, 7, 2))
    f = FlowField(uv)
    pts = np.array([[0.5, 0.5], [6.5, 5.5], [3.5, 2.5]])
    vals, inside = sample_flow(f, pts)
    np.testing.assert_allclose(vals, uv[[0, 5, 2], [0, 6, 3]])
    assert inside.all()
    _, inside = sample_flow(f, np.array([[0.2, 3.0]]))
    assert not inside[0]


def test_flow_file_roundtrip(tmp_path):
    uv = np.random.default_rng(7).standard_normal((5, 9, 2)).astype(np.float32).astype(np.float64)
    valid = np.random.default_rng(8).random((5, 9)) > 0.3
    write_flow(tmp_path / "a.adfl", FlowField(uv, valid))
    back = read_flow(tmp_path / "a.adfl")
    np.testing.assert_array_equal(back.uv, uv)
    np.testing.assert_array_equal(back.valid, valid)
    (tmp_path / "b.adfl").write_bytes((tmp_path / "a.adfl").read_bytes()[:-3])
    with pytest.raises(ValueError, match="truncated"):
        read_flow(tmp_path / "b.adfl")


def test_flowfield_validation():
    with pytest.raises(ValueError):
        FlowField(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        FlowField(np.full((2, 2, 2), np.nan))


def test_features_shared_between_directions(perlin):
    # forward and backward flows of a swapped pair are mirror images
    src, dst, _ = render_pair(make_texture("perlin", 9), (96, 96), (2, -1))
    a = estimate_flow_pair(src, dst)
    b = estimate_flow_pair(dst, src)
    np.testing.assert_allclose(a.forward.uv, b.backward.uv)
    assert encode(src).shape == (12, 12, 32)
