"""Landmark geometry: canonical template, similarity fits, bilinear warping, pose."""
from __future__ import annotations

import enum

import numpy as np

# Normalised (x, y) positions of left eye, right eye, nose, left mouth, right mouth.
# Mirror-symmetric about the vertical centre line.
CANONICAL_LANDMARKS = np.array(
    [
        [0.350, 0.420],
        [0.650, 0.420],
        [0.500, 0.580],
        [0.380, 0.740],
        [0.620, 0.740],
    ]
)

POSE_TOLERANCE = 0.08  # fraction of inter-ocular distance
DEGENERATE_AREA = 0.02  # eye/eye/nose triangle area over inter-ocular distance squared


class AlignmentError(ValueError):
    pass


class FacePose(str, enum.Enum):
    FRONTAL = "Frontal"
    LEFT_FRONT = "LeftFront"
    RIGHT_FRONT = "RightFront"


def canonical_landmarks(size: int) -> np.ndarray:
    """Pixel coordinates of the canonical template for a ``size`` x ``size`` image.

    Pixel centres sit on integers, so normalised ``u`` maps to ``u * size - 0.5``
    and a horizontal mirror maps ``x`` to ``size - 1 - x``.
    """
    return CANONICAL_LANDMARKS * size - 0.5


def mirror_landmarks(landmarks: np.ndarray, width: int) -> np.ndarray:
    """Landmarks of the horizontally flipped image, with left/right labels swapped."""
    pts = np.asarray(landmarks, dtype=np.float64).copy()
    pts[:, 0] = width - 1 - pts[:, 0]
    return pts[[1, 0, 2, 4, 3]]


def fit_similarity(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Least-squares 4-parameter similarity mapping ``src`` points onto ``dst``.

    Returns a 2x3 matrix ``[[a, -b, tx], [b, a, ty]]``.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 2 or len(src) < 2:
        raise AlignmentError(f"need matching (n>=2, 2) point sets, got {src.shape} and {dst.shape}")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    s = src - mu_s
    d = dst - mu_d
    denom = np.sum(s * s)
    if denom <= 1e-12:
        raise AlignmentError("source points coincide")
    a = np.sum(s[:, 0] * d[:, 0] + s[:, 1] * d[:, 1]) / denom
    b = np.sum(s[:, 0] * d[:, 1] - s[:, 1] * d[:, 0]) / denom
    tx = mu_d[0] - (a * mu_s[0] - b * mu_s[1])
    ty = mu_d[1] - (b * mu_s[0] + a * mu_s[1])
    return np.array([[a, -b, tx], [b, a, ty]])


def apply_transform(matrix: np.ndarray, points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return points @ matrix[:, :2].T + matrix[:, 2]


def invert_transform(matrix: np.ndarray) -> np.ndarray:
    lin = matrix[:, :2]
    inv = np.linalg.inv(lin)
    return np.hstack([inv, -(inv @ matrix[:, 2])[:, None]])


def bilinear_sample(
    image: np.ndarray,
    xs: np.ndarray,
    ys: np.ndarray,
    mode: str = "edge",
    cval: float = 0.0,
) -> np.ndarray:
    """Sample ``image`` (H x W or H x W x C) at float coordinates.

    Interpolation uses the lerp form ``a + t * (b - a)`` so constant regions
    and integer coordinates are reproduced exactly.
    ``mode="constant"`` treats everything outside the image as ``cval``.
    """
    img = np.asarray(image, dtype=np.float64)
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    if mode == "constant":
        pad = [(1, 1), (1, 1)] + [(0, 0)] * (img.ndim - 2)
        img = np.pad(img, pad, mode="constant", constant_values=cval)
        xs = xs + 1.0
        ys = ys + 1.0
    elif mode != "edge":
        raise ValueError(f"unknown mode {mode!r}")
    h, w = img.shape[:2]
    xs = np.clip(xs, 0.0, w - 1.0)
    ys = np.clip(ys, 0.0, h - 1.0)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    fx = xs - x0
    fy = ys - y0
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    v00 = img[y0, x0]
    v01 = img[y0, x1]
    v10 = img[y1, x0]
    v11 = img[y1, x1]
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    return top + fy * (bot - top)


def warp_image(
    image: np.ndarray,
    matrix: np.ndarray,
    out_shape: tuple[int, int],
    mode: str = "constant",
    cval: float = 0.0,
) -> np.ndarray:
    """Warp ``image`` by the forward transform ``matrix`` (source -> output pixels)."""
    h, w = out_shape
    inv = invert_transform(matrix)
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    sx = inv[0, 0] * gx + inv[0, 1] * gy + inv[0, 2]
    sy = inv[1, 0] * gx + inv[1, 1] * gy + inv[1, 2]
    return bilinear_sample(image, sx, sy, mode=mode, cval=cval)


def _check_landmarks(landmarks: np.ndarray) -> np.ndarray:
    pts = np.asarray(landmarks, dtype=np.float64)
    if pts.shape != (5, 2):
        raise AlignmentError(f"expected 5 (x, y) landmarks, got shape {pts.shape}")
    if not np.all(np.isfinite(pts)):
        raise AlignmentError("landmarks must be finite")
    le, re, nose = pts[0], pts[1], pts[2]
    iod2 = float(np.sum((re - le) ** 2))
    if iod2 < 1.0:
        raise AlignmentError("eye landmarks coincide")
    v1, v2 = re - le, nose - le
    area = 0.5 * abs(v1[0] * v2[1] - v1[1] * v2[0])
    if area / iod2 < DEGENERATE_AREA:
        raise AlignmentError("eyes and nose are (nearly) collinear")
    return pts


def align_face(image: np.ndarray, landmarks: np.ndarray, size: int = 256) -> np.ndarray:
    """Warp ``image`` so its five landmarks land on the canonical template.

    Raises AlignmentError for malformed, out-of-image or degenerate landmarks.
    """
    pts = _check_landmarks(landmarks)
    h, w = np.asarray(image).shape[:2]
    if np.any(pts < -0.5) or np.any(pts[:, 0] > w - 0.5) or np.any(pts[:, 1] > h - 0.5):
        raise AlignmentError("landmarks fall outside the image")
    matrix = fit_similarity(pts, canonical_landmarks(size))
    return warp_image(image, matrix, (size, size), mode="constant", cval=0.0)


def classify_pose(landmarks: np.ndarray, tolerance: float = POSE_TOLERANCE) -> FacePose:
    """Frontal when the nose sits within ``tolerance`` inter-ocular distances of the
    eye midpoint horizontally (inclusive), otherwise by the side the nose is on."""
    pts = np.asarray(landmarks, dtype=np.float64)
    le, re, nose = pts[0], pts[1], pts[2]
    iod = float(np.hypot(*(re - le)))
    offset = nose[0] - 0.5 * (le[0] + re[0])
    if abs(offset) <= tolerance * iod:
        return FacePose.FRONTAL
    return FacePose.LEFT_FRONT if offset < 0 else FacePose.RIGHT_FRONT
