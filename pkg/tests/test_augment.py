import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deglass.synthkit import FacePose, GlareSpot, SynthesisConfig, add_glare, apply_glare, apply_refraction, apply_tint
from deglass.synthkit.augment import random_tint


def lens_template(size=24, lens_value=0.5, lens_alpha=0.1):
    gy, gx = np.mgrid[0:size, 0:size]
    lens = (np.abs(gx - size / 2) < size / 3) & (np.abs(gy - size / 2) < size / 4)
    frame = ~lens & (np.abs(gx - size / 2) < size / 3 + 2) & (np.abs(gy - size / 2) < size / 4 + 2)
    layer = np.zeros((size, size, 4))
    layer[lens, :3] = lens_value
    layer[lens, 3] = lens_alpha
    layer[frame, :3] = 0.1
    layer[frame, 3] = 1.0
    c = size / 2
    return _template(layer, lens, [[c - 2, c], [c + 2, c]])


def _template(layer, lens, anchors):
    from deglass.synthkit import GlassesTemplate

    return GlassesTemplate(layer, layer[..., 3] > 0, FacePose.FRONTAL, np.array(anchors, float), lens, "t")


# -- refraction -------------------------------------------------------------------


def scalar_bilinear(img, x, y):
    h, w = img.shape[:2]
    x = min(max(x, 0.0), w - 1.0)
    y = min(max(y, 0.0), h - 1.0)
    x0, y0 = math.floor(x), math.floor(y)
    x1, y1 = min(x0 + 1, w - 1), min(y0 + 1, h - 1)
    fx, fy = x - x0, y - y0
    return (
        (1 - fx) * (1 - fy) * img[y0, x0]
        + fx * (1 - fy) * img[y0, x1]
        + (1 - fx) * fy * img[y1, x0]
        + fx * fy * img[y1, x1]
    )


def scalar_refraction(face, lens, strength, band_fraction=0.25):
    """Pointwise evaluation of the displacement model with a brute-force distance."""
    h, w = lens.shape
    out = face.copy()
    rows, cols = np.nonzero(lens)  # single connected lens in these tests
    cy, cx = rows.mean(), cols.mean()
    band = band_fraction * (cols.max() - cols.min() + 1)
    outside = [(r, c) for r in range(-1, h + 1) for c in range(-1, w + 1)
               if not (0 <= r < h and 0 <= c < w and lens[r, c])]
    for r, c in zip(rows, cols):
        dist = min(math.hypot(r - orow, c - ocol) for orow, ocol in outside)
        t = min(max(dist / band, 0.0), 1.0)
        mag = strength * (1.0 - t * t * (3.0 - 2.0 * t))
        vx, vy = c - cx, r - cy
        norm = math.hypot(vx, vy)
        if norm == 0 or mag == 0:
            continue
        out[r, c] = scalar_bilinear(face, c + mag * vx / norm, r + mag * vy / norm)
    return out


def stripe_card(h=20, w=28, period=4):
    gx = np.arange(w)
    col = ((gx // period) % 2).astype(float)
    return np.repeat(np.tile(col, (h, 1))[..., None], 3, axis=2)


def test_refraction_matches_scalar_oracle_on_stripes():
    face = stripe_card()
    lens = np.zeros(face.shape[:2], bool)
    lens[4:16, 5:23] = True
    out = apply_refraction(face, lens, 2.0)
    np.testing.assert_allclose(out, scalar_refraction(face, lens, 2.0), atol=1e-12)
    assert not np.array_equal(out, face)
    np.testing.assert_array_equal(out[~lens], face[~lens])


def test_refraction_matches_oracle_on_ellipse(rng):
    face = rng.random((18, 22, 3))
    gy, gx = np.mgrid[0:18, 0:22]
    lens = ((gx - 10.3) / 8) ** 2 + ((gy - 8.7) / 6) ** 2 <= 1
    np.testing.assert_allclose(apply_refraction(face, lens, 1.3), scalar_refraction(face, lens, 1.3), atol=1e-12)


def test_refraction_zero_strength_identity(rng):
    face = rng.random((16, 16, 3))
    lens = np.zeros((16, 16), bool)
    lens[3:12, 2:14] = True
    np.testing.assert_array_equal(apply_refraction(face, lens, 0.0), face)


@given(strength=st.floats(0, 6), value=st.floats(0, 1), r0=st.integers(0, 6), c0=st.integers(0, 6))
def test_refraction_uniform_face_unchanged(strength, value, r0, c0):
    face = np.full((16, 16, 3), value)
    lens = np.zeros((16, 16), bool)
    lens[r0 : r0 + 8, c0 : c0 + 9] = True
    np.testing.assert_array_equal(apply_refraction(face, lens, strength), face)


def test_refraction_rejects_negative_strength():
    with pytest.raises(ValueError):
        apply_refraction(np.zeros((4, 4, 3)), np.ones((4, 4), bool), -1.0)


# -- tint ---------------------------------------------------------------------------


def test_tint_zero_alpha_unchanged():
    t = lens_template()
    out = apply_tint(t, (1, 0, 0), 0.0)
    np.testing.assert_array_equal(out.color_layer, t.color_layer)


def test_tint_opaque_black():
    t = lens_template()
    out = apply_tint(t, (0, 0, 0), 1.0)
    np.testing.assert_array_equal(out.color_layer[t.lens_mask], [[0, 0, 0, 1]] * int(t.lens_mask.sum()))
    np.testing.assert_array_equal(out.color_layer[~t.lens_mask], t.color_layer[~t.lens_mask])


def test_tint_hand_value():
    t = lens_template(lens_value=0.5)
    out = apply_tint(t, (1, 0, 0), 0.4)
    rgb = out.color_layer[t.lens_mask][:, :3]
    np.testing.assert_allclose(rgb, np.tile([0.7, 0.3, 0.3], (len(rgb), 1)), atol=1e-12)


def test_random_tint_respects_probability(rng):
    t = lens_template()
    cfg = SynthesisConfig(tint_probability=0.0)
    np.testing.assert_array_equal(random_tint(t, rng, cfg).color_layer, t.color_layer)


# -- glare --------------------------------------------------------------------------


def test_glare_probability_zero_unchanged(rng):
    t = lens_template()
    out = apply_glare(t, rng, SynthesisConfig(glare_probability=0.0))
    np.testing.assert_array_equal(out.color_layer, t.color_layer)


def test_glare_outside_lens_unchanged():
    t = lens_template(size=24)
    spot = GlareSpot(center=(1.0, 1.0), radii=(1.0, 1.0), peak_alpha=0.7)
    out = add_glare(t, [spot])
    np.testing.assert_array_equal(out.color_layer, t.color_layer)


def test_glare_peak_hand_value():
    t = lens_template(size=24, lens_value=0.2, lens_alpha=0.2)
    spot = GlareSpot(center=(12.0, 12.0), radii=(2.0, 1.5), angle=0.3, peak_alpha=0.6)
    out = add_glare(t, [spot])
    np.testing.assert_allclose(out.color_layer[12, 12], [0.68, 0.68, 0.68, 0.68], atol=1e-12)


def test_glare_soft_edge_profile():
    spot = GlareSpot(center=(20.0, 20.0), radii=(4.0, 4.0), peak_alpha=0.5)
    a = spot.alpha_map((41, 41))
    sigma = 0.15 * 4.0
    assert a[20, 20] == 0.5
    assert a[20, 24] == 0.5  # on the rim
    assert a[20, 25] == pytest.approx(0.5 * math.exp(-0.5 * (1 / sigma) ** 2))
    assert a[20, 27] == 0.0  # beyond three sigma
    assert a.max() < 1.0


@given(
    cx=st.floats(0, 23), cy=st.floats(0, 23), r=st.floats(1, 6), aspect=st.floats(0.3, 1),
    angle=st.floats(0, math.pi), peak=st.floats(0, 0.99), sides=st.sampled_from([0, 3, 4, 5, 6]),
)
def test_glare_only_brightens_lens(cx, cy, r, aspect, angle, peak, sides):
    t = lens_template(size=24)
    spot = GlareSpot((cx, cy), (r, r * aspect), angle, peak, sides)
    a = spot.alpha_map(t.shape)
    assert np.all(a >= 0) and np.all(a < 1)
    out = add_glare(t, [spot])
    assert np.all(out.color_layer >= t.color_layer)
    assert np.all(out.color_layer <= 1.0)
    np.testing.assert_array_equal(out.color_layer[~t.lens_mask], t.color_layer[~t.lens_mask])


def test_glare_peak_alpha_must_be_below_one():
    with pytest.raises(ValueError):
        GlareSpot((1.0, 1.0), (1.0, 1.0), peak_alpha=1.0).alpha_map((4, 4))
    with pytest.raises(ValueError):
        SynthesisConfig(glare_peak_alpha_range=(0.5, 1.0))
