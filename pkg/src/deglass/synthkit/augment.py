"""Photorealism augmentations: lens refraction, lens tint and glare spots."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .geometry import bilinear_sample
from .types import GlassesTemplate, SynthesisConfig

REFRACTION_BAND_FRACTION = 0.25
GLARE_SIGMA_FRACTION = 0.15
GLARE_CUTOFF_SIGMAS = 3.0


def smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def refraction_field(lens_mask: np.ndarray, strength: float, band_fraction: float = REFRACTION_BAND_FRACTION):
    """Per-pixel sampling offsets (dx, dy) simulating a minus lens.

    Inside each lens, a pixel at distance ``dist`` from the lens rim samples the
    face ``strength * (1 - smoothstep(dist / band))`` pixels further out along the
    ray from the lens centroid, so content appears pulled inward. ``band`` is
    ``band_fraction`` of the lens width; deeper pixels and everything outside
    the lenses get a zero offset.
    """
    lens_mask = np.asarray(lens_mask, dtype=bool)
    dx = np.zeros(lens_mask.shape)
    dy = np.zeros(lens_mask.shape)
    if strength == 0 or not lens_mask.any():
        return dx, dy
    labels, n = ndimage.label(lens_mask)
    for k in range(1, n + 1):
        comp = labels == k
        rows, cols = np.nonzero(comp)
        band = band_fraction * (cols.max() - cols.min() + 1)
        dist = ndimage.distance_transform_edt(np.pad(comp, 1))[1:-1, 1:-1]
        weight = np.where(comp, 1.0 - smoothstep(dist / band), 0.0)
        cy, cx = rows.mean(), cols.mean()
        gy, gx = np.mgrid[0 : comp.shape[0], 0 : comp.shape[1]].astype(np.float64)
        vx, vy = gx - cx, gy - cy
        norm = np.hypot(vx, vy)
        safe = np.where(norm > 0, norm, 1.0)
        mag = strength * weight
        dx = np.where(comp & (norm > 0), mag * vx / safe, dx)
        dy = np.where(comp & (norm > 0), mag * vy / safe, dy)
    return dx, dy


def apply_refraction(face: np.ndarray, lens_mask: np.ndarray, strength: float, rng=None) -> np.ndarray:
    """Deform the face around the lens rims. ``rng`` is accepted for interface
    symmetry with the other augmentations; the deformation itself is deterministic."""
    face = np.asarray(face, dtype=np.float64)
    if strength < 0:
        raise ValueError("refraction strength must be >= 0")
    dx, dy = refraction_field(lens_mask, strength)
    moved = (dx != 0) | (dy != 0)
    if not moved.any():
        return face.copy()
    h, w = lens_mask.shape
    gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = face.copy()
    out[moved] = bilinear_sample(face, gx[moved] + dx[moved], gy[moved] + dy[moved], mode="edge")
    return out


def apply_tint(template: GlassesTemplate, color, alpha: float) -> GlassesTemplate:
    """Lay a semi-transparent colour over the lens interiors (over operator)."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("tint alpha must lie in [0, 1]")
    out = template.copy()
    lens = out.lens_mask
    color = np.asarray(color, dtype=np.float64).reshape(3)
    layer = out.color_layer
    layer[lens, :3] = alpha * color + (1.0 - alpha) * layer[lens, :3]
    layer[lens, 3] = alpha + (1.0 - alpha) * layer[lens, 3]
    return out


@dataclass(frozen=True)
class GlareSpot:
    center: tuple[float, float]
    radii: tuple[float, float]
    angle: float = 0.0
    peak_alpha: float = 0.6
    sides: int = 0  # 0 = ellipse, otherwise a regular polygon with this many sides

    def alpha_map(self, shape: tuple[int, int]) -> np.ndarray:
        if not 0.0 <= self.peak_alpha < 1.0:
            raise ValueError("glare peak alpha must lie in [0, 1)")
        h, w = shape
        gy, gx = np.mgrid[0:h, 0:w].astype(np.float64)
        c, s = np.cos(self.angle), np.sin(self.angle)
        u = c * (gx - self.center[0]) + s * (gy - self.center[1])
        v = -s * (gx - self.center[0]) + c * (gy - self.center[1])
        a, b = self.radii
        if self.sides == 0:
            sd = (np.sqrt((u / a) ** 2 + (v / b) ** 2) - 1.0) * min(a, b)
            radius = 0.5 * (a + b)
        else:
            # convex polygon: signed distance is the max over edge half-planes
            apothem = a * np.cos(np.pi / self.sides)
            theta = 2 * np.pi * np.arange(self.sides) / self.sides
            sd = np.max(
                [np.cos(t) * u + np.sin(t) * v - apothem for t in theta], axis=0
            )
            radius = a
        sigma = GLARE_SIGMA_FRACTION * radius
        falloff = np.exp(-0.5 * (np.maximum(sd, 0.0) / sigma) ** 2)
        falloff = np.where(sd <= 0, 1.0, falloff)
        falloff = np.where(sd >= GLARE_CUTOFF_SIGMAS * sigma, 0.0, falloff)
        return self.peak_alpha * falloff


def add_glare(template: GlassesTemplate, spots) -> GlassesTemplate:
    """Screen-blend white spots onto the lenses: ``v + s * (1 - v)``."""
    out = template.copy()
    if not spots:
        return out
    keep = np.ones(out.shape)
    for spot in spots:
        keep *= 1.0 - spot.alpha_map(out.shape)
    s = np.where(out.lens_mask, 1.0 - keep, 0.0)
    if not np.any(s > 0):
        return out
    layer = out.color_layer
    layer[..., :3] = layer[..., :3] + s[..., None] * (1.0 - layer[..., :3])
    layer[..., 3] = layer[..., 3] + s * (1.0 - layer[..., 3])
    return out


def random_glare_spots(lens_mask: np.ndarray, rng: np.random.Generator, cfg: SynthesisConfig):
    rows, cols = np.nonzero(lens_mask)
    if rows.size == 0:
        return []
    lo, hi = cfg.glare_count_range
    k = int(rng.integers(lo, hi + 1))
    width = cols.max() - cols.min() + 1
    spots = []
    for _ in range(k):
        i = int(rng.integers(rows.size))
        r = float(rng.uniform(0.05, 0.15)) * width
        aspect = float(rng.uniform(0.3, 1.0))
        sides = int(rng.choice([0, 0, 3, 4, 5, 6]))
        spots.append(
            GlareSpot(
                center=(float(cols[i]), float(rows[i])),
                radii=(max(r, 1.0), max(r * aspect, 1.0)),
                angle=float(rng.uniform(0, np.pi)),
                peak_alpha=float(rng.uniform(*cfg.glare_peak_alpha_range)),
                sides=sides,
            )
        )
    return spots


def apply_glare(template: GlassesTemplate, rng: np.random.Generator, cfg: SynthesisConfig) -> GlassesTemplate:
    if rng.random() >= cfg.glare_probability:
        return template.copy()
    return add_glare(template, random_glare_spots(template.lens_mask, rng, cfg))


def random_tint(template: GlassesTemplate, rng: np.random.Generator, cfg: SynthesisConfig) -> GlassesTemplate:
    if rng.random() >= cfg.tint_probability:
        return template.copy()
    color = rng.uniform(0.0, 1.0, size=3)
    alpha = float(rng.uniform(*cfg.tint_alpha_range))
    return apply_tint(template, color, alpha)
