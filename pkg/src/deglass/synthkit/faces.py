"""Procedural cartoon faces and eyewear templates for hermetic, desk-scale runs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import FacePose, canonical_landmarks, classify_pose
from .types import GlassesTemplate


@dataclass
class ToyFace:
    image: np.ndarray  # H x W x 3 float in [0, 1]
    landmarks: np.ndarray  # 5 x 2 (x, y)
    face_shape_mask: np.ndarray  # H x W bool
    identity_id: int
    pose: FacePose


def _rng(*keys: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(k) for k in keys]))


def _ellipse_sd(gx, gy, cx, cy, rx, ry):
    """Approximate signed distance (pixels, negative inside) to an axis-aligned ellipse."""
    r = np.sqrt(((gx - cx) / rx) ** 2 + ((gy - cy) / ry) ** 2)
    return (r - 1.0) * min(rx, ry)


def _roundrect_sd(gx, gy, cx, cy, hw, hh, radius):
    qx = np.abs(gx - cx) - (hw - radius)
    qy = np.abs(gy - cy) - (hh - radius)
    outside = np.hypot(np.maximum(qx, 0), np.maximum(qy, 0))
    inside = np.minimum(np.maximum(qx, qy), 0)
    return outside + inside - radius


def _paint(canvas, sd, color):
    cover = np.clip(0.5 - sd, 0.0, 1.0)[..., None]
    canvas += cover * (np.asarray(color) - canvas)


def _identity_params(seed: int, identity: int, size: int) -> dict:
    rng = _rng(seed, identity, 0)
    skin_base = rng.choice(
        [[0.96, 0.80, 0.69], [0.89, 0.69, 0.55], [0.76, 0.57, 0.42], [0.55, 0.38, 0.26], [0.98, 0.87, 0.77]]
    )
    return dict(
        skin=np.clip(skin_base + rng.normal(0, 0.03, 3), 0, 1),
        hair=rng.uniform(0.02, 0.6, 3) * rng.uniform(0.3, 1.0),
        background=rng.uniform(0.2, 0.9, 3),
        iris=rng.uniform(0.05, 0.7, 3),
        lips=np.clip(np.array([0.7, 0.3, 0.3]) + rng.normal(0, 0.08, 3), 0, 1),
        head_rx=rng.uniform(0.30, 0.35) * size,
        head_ry=rng.uniform(0.39, 0.44) * size,
        hairline=rng.uniform(0.18, 0.28),  # fraction of head height covered by hair
        eye_scale=rng.uniform(0.9, 1.15),
        eye_dy=rng.uniform(-0.02, 0.02) * size,
        mouth_dy=rng.uniform(-0.03, 0.02) * size,
        mouth_scale=rng.uniform(0.8, 1.2),
        brow=rng.uniform(0.6, 1.6),
    )


def render_toy_face(params: dict, size: int, yaw: float, shift: tuple[float, float], scale: float) -> ToyFace:
    """Draw one face. ``yaw`` moves nose and mouth sideways in inter-ocular units."""
    gy, gx = np.mgrid[0:size, 0:size].astype(np.float64)
    canon = canonical_landmarks(size)
    centre = np.array([(size - 1) / 2.0, (size - 1) / 2.0])
    pts = (canon - centre) * scale + centre + np.asarray(shift)
    pts[0:2, 1] += params["eye_dy"]
    pts[3:5, 1] += params["mouth_dy"]
    mid = 0.5 * (pts[3] + pts[4])
    half_mouth = 0.5 * (pts[4, 0] - pts[3, 0]) * params["mouth_scale"]
    pts[3, 0] = mid[0] - half_mouth
    pts[4, 0] = mid[0] + half_mouth
    iod = pts[1, 0] - pts[0, 0]
    pts[2:5, 0] += yaw * iod

    img = np.empty((size, size, 3))
    img[:] = params["background"]
    hcx = centre[0] + shift[0] + 0.35 * yaw * iod
    hcy = centre[1] + shift[1] + 0.06 * size
    rx, ry = params["head_rx"] * scale, params["head_ry"] * scale
    head_sd = _ellipse_sd(gx, gy, hcx, hcy, rx, ry)
    hair_sd = _ellipse_sd(gx, gy, hcx, hcy - 0.05 * size, rx * 1.08, ry * 1.02)
    _paint(img, hair_sd, params["hair"])
    shade = 1.0 - 0.12 * ((gy - hcy) / ry) ** 2
    skin = np.clip(params["skin"] * shade[..., None], 0, 1)
    cover = np.clip(0.5 - head_sd, 0.0, 1.0)[..., None]
    img += cover * (skin - img)
    hairline_y = hcy - ry + 2 * ry * params["hairline"]
    hair_cap = np.maximum(head_sd, gy - hairline_y)
    _paint(img, hair_cap, params["hair"])
    face_mask = (head_sd <= 0) & (gy - hairline_y > 0)

    eye_r = 0.045 * size * params["eye_scale"] * scale
    for ex, ey in pts[0:2]:
        brow = _roundrect_sd(gx, gy, ex, ey - 1.9 * eye_r, 1.4 * eye_r, 0.25 * eye_r * params["brow"], 0.2 * eye_r)
        _paint(img, brow, params["hair"] * 0.8)
        _paint(img, _ellipse_sd(gx, gy, ex, ey, 1.5 * eye_r, eye_r), [0.97, 0.97, 0.95])
        _paint(img, _ellipse_sd(gx, gy, ex, ey, 0.8 * eye_r, 0.8 * eye_r), params["iris"])
        _paint(img, _ellipse_sd(gx, gy, ex, ey, 0.35 * eye_r, 0.35 * eye_r), [0.02, 0.02, 0.02])
    nx, ny = pts[2]
    _paint(img, _ellipse_sd(gx, gy, nx, ny, 0.6 * eye_r, 0.45 * eye_r), params["skin"] * 0.7)
    mx = 0.5 * (pts[3, 0] + pts[4, 0])
    my = 0.5 * (pts[3, 1] + pts[4, 1])
    _paint(img, _ellipse_sd(gx, gy, mx, my, 0.5 * (pts[4, 0] - pts[3, 0]), 0.5 * eye_r), params["lips"])
    return ToyFace(np.clip(img, 0.0, 1.0), pts, face_mask, -1, classify_pose(pts))


def procedural_toy_faces(n: int, rng_seed: int, size: int = 64, images_per_identity: int = 1) -> list[ToyFace]:
    """Deterministic cartoon faces. Consecutive blocks of ``images_per_identity``
    faces share an identity: same base geometry and colours, jittered pose."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if images_per_identity < 1:
        raise ValueError("images_per_identity must be >= 1")
    faces = []
    for i in range(n):
        identity, k = divmod(i, images_per_identity)
        params = _identity_params(rng_seed, identity, size)
        jitter = _rng(rng_seed, identity, k + 1)
        yaw = float(jitter.uniform(-0.2, 0.2))
        shift = tuple(jitter.uniform(-0.02, 0.02, 2) * size)
        scale = float(jitter.uniform(0.97, 1.03))
        face = render_toy_face(params, size, yaw, shift, scale)
        face.identity_id = identity
        faces.append(face)
    return faces


def procedural_glasses_template(
    index: int,
    rng_seed: int,
    size: int = 64,
    pose: FacePose = FacePose.FRONTAL,
    frame_alpha: float | None = None,
) -> GlassesTemplate:
    """One eyewear template drawn around the canonical eye positions.

    Lens interiors carry a faint clear-glass alpha so the template mask covers the
    whole eyewear region. Non-frontal poses foreshorten the far lens.
    """
    rng = _rng(rng_seed, index, 7)
    pose = FacePose(pose)
    gy, gx = np.mgrid[0:size, 0:size].astype(np.float64)
    canon = canonical_landmarks(size)
    eyes = canon[0:2]
    iod = eyes[1, 0] - eyes[0, 0]
    hw = rng.uniform(0.30, 0.42) * iod
    hh = rng.uniform(0.20, 0.30) * iod
    roundness = rng.uniform(0.2, 1.0)
    thickness = max(1.0, rng.uniform(0.02, 0.045) * size)
    squeeze = {FacePose.FRONTAL: (1.0, 1.0), FacePose.LEFT_FRONT: (0.85, 1.0), FacePose.RIGHT_FRONT: (1.0, 0.85)}[pose]
    if frame_alpha is None:
        frame_alpha = 1.0 if rng.random() < 0.8 else float(rng.uniform(0.6, 0.9))
    frame_color = rng.uniform(0.0, 0.35, 3) if rng.random() < 0.7 else rng.uniform(0.0, 1.0, 3)
    lens_color = np.array([0.92, 0.95, 1.0])
    lens_alpha = 0.06

    frame = np.zeros((size, size), bool)
    lens = np.zeros((size, size), bool)
    for (ex, ey), sq in zip(eyes, squeeze):
        w_ = hw * sq
        r = roundness * min(w_, hh)
        inner = _roundrect_sd(gx, gy, ex, ey, w_, hh, r)
        outer = _roundrect_sd(gx, gy, ex, ey, w_ + thickness, hh + thickness, r + thickness)
        lens |= inner <= 0
        frame |= (outer <= 0) & (inner > 0)
    by = eyes[0, 1] - 0.25 * hh
    left_inner = eyes[0, 0] + hw * squeeze[0]
    right_inner = eyes[1, 0] - hw * squeeze[1]
    bridge = (gx >= left_inner) & (gx <= right_inner) & (np.abs(gy - by) <= max(0.5, 0.5 * thickness))
    frame |= bridge & ~lens
    temple_len = 0.06 * size
    for side, (ex, ey), sq in ((-1, eyes[0], squeeze[0]), (1, eyes[1], squeeze[1])):
        edge = ex + side * (hw * sq + thickness)
        lo, hi = sorted((edge, edge + side * temple_len))
        temple = (gx >= lo) & (gx <= hi) & (np.abs(gy - (ey - 0.4 * hh)) <= max(0.5, 0.4 * thickness))
        frame |= temple & ~lens

    layer = np.zeros((size, size, 4))
    layer[lens, :3] = lens_color
    layer[lens, 3] = lens_alpha
    layer[frame, :3] = frame_color
    layer[frame, 3] = frame_alpha
    template = GlassesTemplate(
        color_layer=layer,
        mask=layer[..., 3] > 0,
        pose=pose,
        anchor_points=eyes.copy(),
        lens_mask=lens & ~frame,
        template_id=f"toy{index:05d}",
    )
    template.check()
    return template


def procedural_glasses_pool(n_per_pose: int, rng_seed: int, size: int = 64, frame_alpha: float | None = None):
    pool = []
    for p, pose in enumerate(FacePose):
        for k in range(n_per_pose):
            pool.append(procedural_glasses_template(p * n_per_pose + k, rng_seed, size, pose, frame_alpha))
    return pool
