import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deglass.synthkit import AlignmentError, FacePose, align_face, canonical_landmarks, classify_pose
from deglass.synthkit.geometry import (
    apply_transform,
    bilinear_sample,
    fit_similarity,
    invert_transform,
    mirror_landmarks,
)


def lstsq_similarity(src, dst):
    """Independent oracle: solve the 4-parameter system with numpy's least squares."""
    rows, rhs = [], []
    for (x, y), (u, v) in zip(src, dst):
        rows.append([x, -y, 1, 0])
        rhs.append(u)
        rows.append([y, x, 0, 1])
        rhs.append(v)
    a, b, tx, ty = np.linalg.lstsq(np.array(rows), np.array(rhs), rcond=None)[0]
    return np.array([[a, -b, tx], [b, a, ty]])


def random_similarity(rng, size):
    angle = rng.uniform(-0.4, 0.4)
    scale = rng.uniform(0.6, 1.6)
    t = rng.uniform(-0.2, 0.2, 2) * size
    c, s = np.cos(angle) * scale, np.sin(angle) * scale
    return np.array([[c, -s, t[0]], [s, c, t[1]]])


def test_canonical_template_is_mirror_symmetric():
    for size in (32, 64, 256):
        pts = canonical_landmarks(size)
        np.testing.assert_allclose(mirror_landmarks(pts, size), pts, atol=1e-12)


def test_fit_similarity_matches_lstsq_oracle(rng):
    for _ in range(50):
        src = rng.uniform(0, 100, (5, 2))
        dst = apply_transform(random_similarity(rng, 100), src) + rng.normal(0, 0.5, (5, 2))
        np.testing.assert_allclose(fit_similarity(src, dst), lstsq_similarity(src, dst), atol=1e-9)


def test_perturbed_landmarks_map_to_template_within_half_pixel(rng):
    size = 64
    canon = canonical_landmarks(size)
    for _ in range(50):
        raw = apply_transform(random_similarity(rng, size), canon) + rng.normal(0, 0.1, (5, 2))
        m = lstsq_similarity(raw, canon)
        err = np.linalg.norm(apply_transform(m, raw) - canon, axis=1)
        assert err.max() < 0.5
        np.testing.assert_allclose(fit_similarity(raw, canon), m, atol=1e-9)


def test_invert_transform_round_trip(rng):
    m = random_similarity(rng, 50)
    pts = rng.uniform(0, 50, (10, 2))
    np.testing.assert_allclose(apply_transform(invert_transform(m), apply_transform(m, pts)), pts, atol=1e-10)


def test_bilinear_sample_integer_and_constant_exact(rng):
    img = rng.random((7, 9, 3))
    ys, xs = np.mgrid[0:7, 0:9]
    np.testing.assert_array_equal(bilinear_sample(img, xs, ys), img)
    flat = np.full((5, 5), 0.3)
    out = bilinear_sample(flat, rng.uniform(0, 4, 100), rng.uniform(0, 4, 100))
    np.testing.assert_array_equal(out, 0.3)


def test_bilinear_sample_hand_value():
    img = np.array([[0.0, 1.0], [2.0, 3.0]])
    assert bilinear_sample(img, np.array(0.25), np.array(0.5)) == pytest.approx(0.25 + 1.0)


def test_align_identity_case(rng):
    size = 32
    img = rng.random((size, size, 3))
    out = align_face(img, canonical_landmarks(size), size)
    np.testing.assert_allclose(out, img, atol=1e-9)


def test_align_downscale_is_resize():
    # landmarks at canonical positions of a 2x larger image: a pure 0.5 scale
    big = 64
    gy, gx = np.mgrid[0:big, 0:big].astype(np.float64)
    ramp = np.stack([gx / big, gy / big, (gx + gy) / (2 * big)], axis=-1)
    out = align_face(ramp, canonical_landmarks(big), big // 2)
    sy, sx = np.mgrid[0 : big // 2, 0 : big // 2] * 2.0 + 0.5
    expected = np.stack([sx / big, sy / big, (sx + sy) / (2 * big)], axis=-1)
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_align_mirror_symmetry(rng):
    size = 48
    img = rng.random((60, 50, 3))
    raw = apply_transform(random_similarity(rng, 10), canonical_landmarks(48)) * 0.8 + np.array([3.0, 4.0])
    a = align_face(img, raw, size)
    b = align_face(img[:, ::-1], mirror_landmarks(raw, img.shape[1]), size)
    np.testing.assert_allclose(b, a[:, ::-1], atol=1e-9)


@pytest.mark.parametrize(
    "landmarks",
    [
        np.zeros((4, 2)),
        np.array([[10, 10], [20, 10], [30, 10], [12, 20], [18, 20]], float),  # collinear eyes/nose
        np.array([[10, 10], [10, 10], [10, 15], [8, 20], [12, 20]], float),  # coincident eyes
        np.array([[10, 10], [20, 10], [15, 15], [12, 20], [18, 200]], float),  # outside image
        np.array([[10, 10], [20, np.nan], [15, 15], [12, 20], [18, 20]], float),
    ],
)
def test_align_rejects_bad_landmarks(landmarks):
    with pytest.raises(AlignmentError):
        align_face(np.zeros((40, 40, 3)), landmarks, 32)


def _pose_points(nose_offset, iod=100.0):
    return np.array([[0.0, 0.0], [iod, 0.0], [iod / 2 + nose_offset, 30.0], [20.0, 60.0], [80.0, 60.0]])


def test_pose_examples():
    tau = 0.08 * 100.0
    assert classify_pose(_pose_points(0.0)) == FacePose.FRONTAL
    assert classify_pose(_pose_points(-3 * tau)) == FacePose.LEFT_FRONT
    assert classify_pose(_pose_points(3 * tau)) == FacePose.RIGHT_FRONT
    assert classify_pose(_pose_points(tau)) == FacePose.FRONTAL
    assert classify_pose(_pose_points(-tau)) == FacePose.FRONTAL
    assert classify_pose(canonical_landmarks(256)) == FacePose.FRONTAL


@given(
    # the inclusive boundary itself is covered by test_pose_examples
    offset=st.floats(-40, 40).filter(lambda o: abs(abs(o) - 8.0) > 1e-6),
    tx=st.floats(-500, 500),
    ty=st.floats(-500, 500),
    k=st.sampled_from([0.25, 0.5, 2.0, 4.0, 8.0]),
)
def test_pose_invariant_to_translation_and_scale(offset, tx, ty, k):
    pts = _pose_points(offset)
    moved = pts * k + np.array([tx, ty]) * k
    assert classify_pose(moved) == classify_pose(pts)


@given(offset=st.floats(-40, 40))
def test_pose_mirror_swaps_sides(offset):
    pts = _pose_points(offset)
    pose = classify_pose(pts)
    mirrored = classify_pose(mirror_landmarks(pts, 101))
    swap = {FacePose.FRONTAL: FacePose.FRONTAL, FacePose.LEFT_FRONT: FacePose.RIGHT_FRONT,
            FacePose.RIGHT_FRONT: FacePose.LEFT_FRONT}
    assert mirrored == swap[pose]
