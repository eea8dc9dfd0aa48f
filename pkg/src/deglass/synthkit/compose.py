"""Placing eyewear templates on faces and lifting them back off."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .augment import apply_glare, apply_refraction, random_tint
from .geometry import FacePose, apply_transform, canonical_landmarks, classify_pose, fit_similarity, warp_image
from .types import GlassesTemplate, PairedSample, SynthesisConfig, SynthesisError


@dataclass
class PlacedTemplate:
    rgb: np.ndarray  # H x W x 3
    alpha: np.ndarray  # H x W, zero outside dilate(mask, 1)
    mask: np.ndarray  # H x W bool, binarised warped template mask
    lens_mask: np.ndarray  # H x W bool
    matrix: np.ndarray  # 2 x 3, template -> face pixels


def binarize(values: np.ndarray) -> np.ndarray:
    """Threshold at 0.5; an exact 0.5 counts as inside."""
    return np.asarray(values) >= 0.5


def dilate(mask: np.ndarray, radius: int) -> np.ndarray:
    """Binary dilation by a (2r+1) square footprint."""
    mask = np.asarray(mask, dtype=bool)
    if radius <= 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=np.ones((2 * radius + 1, 2 * radius + 1), bool))


def place_template(template: GlassesTemplate, eye_points: np.ndarray, size: int) -> PlacedTemplate:
    """Warp ``template`` so its anchor points land on ``eye_points`` (left, right).

    Raises SynthesisError if any template mask pixel would leave the image.
    """
    matrix = fit_similarity(template.anchor_points, np.asarray(eye_points, dtype=np.float64)[:2])
    rows, cols = np.nonzero(template.mask)
    if rows.size == 0:
        raise SynthesisError("template mask is empty")
    dst = apply_transform(matrix, np.stack([cols, rows], axis=1).astype(np.float64))
    if np.any(dst < 0) or np.any(dst > size - 1):
        raise SynthesisError(f"template {template.template_id or '?'} leaves the image after warping")

    layer = template.color_layer
    alpha_src = layer[..., 3]
    premult = layer[..., :3] * alpha_src[..., None]
    stacked = np.concatenate(
        [premult, alpha_src[..., None], template.mask[..., None], template.lens_mask[..., None]], axis=2
    ).astype(np.float64)
    warped = warp_image(stacked, matrix, (size, size), mode="constant", cval=0.0)
    mask = binarize(warped[..., 4])
    lens = binarize(warped[..., 5]) & mask
    alpha = np.where(dilate(mask, 1), np.clip(warped[..., 3], 0.0, 1.0), 0.0)
    safe = np.where(warped[..., 3] > 0, warped[..., 3], 1.0)
    rgb = np.clip(warped[..., :3] / safe[..., None], 0.0, 1.0)
    return PlacedTemplate(rgb=rgb, alpha=alpha, mask=mask, lens_mask=lens, matrix=matrix)


def _to_unit(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image.astype(np.float64) / 255.0
    return image.astype(np.float64)


def augment_template(template: GlassesTemplate, rng: np.random.Generator, cfg: SynthesisConfig) -> GlassesTemplate:
    """Tint, then glare."""
    return apply_glare(random_tint(template, rng, cfg), rng, cfg)


def composite_glasses(
    face: np.ndarray,
    template: GlassesTemplate,
    face_shape_mask: np.ndarray,
    cfg: SynthesisConfig,
    rng: np.random.Generator,
    landmarks: np.ndarray,
    identity_id: int = 0,
) -> PairedSample:
    """Put ``template`` on an aligned glasses-free ``face`` (H x W x 3 in [0, 1] or uint8).

    The face is refracted inside the lenses, then the augmented template is
    alpha-composited over it. Pixels outside ``dilate(m_g, 1)`` are copied
    unchanged, which keeps the pair local to the eyewear.
    """
    face01 = _to_unit(face)
    size = cfg.image_size
    if face01.shape != (size, size, 3):
        raise SynthesisError(f"face must be {size}x{size}x3, got {face01.shape}")
    pose = classify_pose(landmarks, cfg.pose_tolerance)
    if template.pose != pose:
        raise SynthesisError(f"template pose {template.pose.value} does not match face pose {pose.value}")

    augmented = augment_template(template, rng, cfg)
    strength = float(rng.uniform(*cfg.refraction_strength_range))
    placed = place_template(augmented, np.asarray(landmarks)[:2], size)
    refracted = apply_refraction(face01, placed.lens_mask, strength)
    a = placed.alpha[..., None]
    x01 = a * placed.rgb + (1.0 - a) * refracted

    m = np.stack([placed.mask, np.asarray(face_shape_mask, dtype=bool)]).astype(np.uint8)
    return PairedSample(x=x01 * 2.0 - 1.0, y=face01 * 2.0 - 1.0, m=m, pose=pose, identity_id=int(identity_id))


def extract_glasses_template(
    x: np.ndarray,
    y_hat: np.ndarray,
    m_hat_g: np.ndarray,
    threshold: float,
    pose: FacePose = FacePose.FRONTAL,
    anchor_points: np.ndarray | None = None,
    template_id: str = "extracted",
) -> GlassesTemplate | None:
    """Cut the eyewear out of ``x`` where the removal edited it.

    ``x`` and ``y_hat`` are H x W x 3 in [-1, 1]; differences are measured on the
    [0, 1] scale. Returns None when nothing survives the thresholds.
    Anchors default to the canonical eye positions, since inputs are aligned.
    """
    x = np.asarray(x, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if x.shape != y_hat.shape:
        raise ValueError(f"x and y_hat shapes differ: {x.shape} vs {y_hat.shape}")
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    diff = np.max(np.abs(x - y_hat), axis=-1) / 2.0
    mask = (np.asarray(m_hat_g) > 0.5) & (diff > threshold)
    if not mask.any():
        return None
    h, w = mask.shape
    layer = np.zeros((h, w, 4))
    layer[mask, :3] = np.clip((x[mask] + 1.0) / 2.0, 0.0, 1.0)
    layer[mask, 3] = 1.0
    if anchor_points is None:
        anchor_points = canonical_landmarks(h)[:2]
    return GlassesTemplate(layer, mask, pose, anchor_points, None, template_id)
