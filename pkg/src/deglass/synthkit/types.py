from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import POSE_TOLERANCE, FacePose


class SynthesisError(ValueError):
    """Raised when a glasses template cannot be placed on a face."""


@dataclass(frozen=True)
class SynthesisConfig:
    image_size: int = 256
    tint_alpha_range: tuple[float, float] = (0.15, 0.7)
    tint_probability: float = 0.5
    refraction_strength_range: tuple[float, float] = (0.0, 3.0)
    glare_probability: float = 0.5
    glare_count_range: tuple[int, int] = (1, 3)
    glare_peak_alpha_range: tuple[float, float] = (0.3, 0.8)
    r_dilate: int = 2
    pose_tolerance: float = POSE_TOLERANCE
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tint_alpha_range", tuple(self.tint_alpha_range))
        object.__setattr__(self, "refraction_strength_range", tuple(self.refraction_strength_range))
        object.__setattr__(self, "glare_count_range", tuple(int(v) for v in self.glare_count_range))
        object.__setattr__(self, "glare_peak_alpha_range", tuple(self.glare_peak_alpha_range))
        self.validate()

    def validate(self) -> None:
        if self.image_size < 8:
            raise ValueError("image_size must be at least 8")
        lo, hi = self.tint_alpha_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValueError("tint_alpha_range must be a non-empty sub-interval of [0, 1]")
        lo, hi = self.glare_peak_alpha_range
        if not 0.0 <= lo <= hi < 1.0:
            raise ValueError("glare_peak_alpha_range must be a non-empty sub-interval of [0, 1)")
        for name in ("tint_probability", "glare_probability"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        lo, hi = self.refraction_strength_range
        if not 0.0 <= lo <= hi:
            raise ValueError("refraction_strength_range must be a non-empty interval of pixels >= 0")
        lo, hi = self.glare_count_range
        if not 0 <= lo <= hi:
            raise ValueError("glare_count_range must be a non-empty interval of counts >= 0")
        if self.r_dilate < 0:
            raise ValueError("r_dilate must be >= 0")
        if self.pose_tolerance < 0:
            raise ValueError("pose_tolerance must be >= 0")
        if not 0 <= self.rng_seed < 2**64:
            raise ValueError("rng_seed must be a 64-bit unsigned integer")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}


@dataclass
class GlassesTemplate:
    """RGBA eyewear layer (straight alpha, [0, 1]) with its binary masks.

    ``lens_mask`` marks lens interiors; tint, glare and refraction act there only.
    ``anchor_points`` are the (x, y) lens centres, left then right.
    """

    color_layer: np.ndarray
    mask: np.ndarray
    pose: FacePose
    anchor_points: np.ndarray
    lens_mask: np.ndarray | None = None
    template_id: str = ""

    def __post_init__(self):
        self.color_layer = np.asarray(self.color_layer, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        self.anchor_points = np.asarray(self.anchor_points, dtype=np.float64).reshape(2, 2)
        self.pose = FacePose(self.pose)
        if self.lens_mask is None:
            self.lens_mask = np.zeros_like(self.mask)
        self.lens_mask = np.asarray(self.lens_mask, dtype=bool)
        h, w = self.mask.shape
        if self.color_layer.shape != (h, w, 4):
            raise ValueError(f"color_layer must be {h}x{w}x4, got {self.color_layer.shape}")
        if self.lens_mask.shape != (h, w):
            raise ValueError("lens_mask shape must match mask")

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape

    def check(self) -> None:
        """Assert the template invariants (mask == alpha > 0, anchors inside mask bbox)."""
        alpha = self.color_layer[..., 3]
        if np.any(self.color_layer < 0) or np.any(self.color_layer > 1):
            raise ValueError("color_layer values must lie in [0, 1]")
        if not np.array_equal(self.mask, alpha > 0):
            raise ValueError("mask must equal the set of pixels with alpha > 0")
        if np.any(self.lens_mask & ~self.mask):
            raise ValueError("lens_mask must lie inside mask")
        if not self.mask.any():
            raise ValueError("template mask is empty")
        rows, cols = np.nonzero(self.mask)
        for x, y in self.anchor_points:
            if not (cols.min() <= x <= cols.max() and rows.min() <= y <= rows.max()):
                raise ValueError("anchor points must lie inside the mask bounding box")

    def copy(self) -> "GlassesTemplate":
        return GlassesTemplate(
            self.color_layer.copy(),
            self.mask.copy(),
            self.pose,
            self.anchor_points.copy(),
            self.lens_mask.copy(),
            self.template_id,
        )


@dataclass
class PairedSample:
    """Aligned training pair. ``x``/``y`` are H x W x 3 in [-1, 1]; ``m`` is 2 x H x W
    with channel 0 the glasses mask and channel 1 the face-shape mask."""

    x: np.ndarray
    y: np.ndarray
    m: np.ndarray
    pose: FacePose
    identity_id: int

    @property
    def glasses_mask(self) -> np.ndarray:
        return self.m[0]

    @property
    def face_mask(self) -> np.ndarray:
        return self.m[1]


@dataclass
class ManifestRecord:
    x_path: str
    y_path: str
    mask_path: str
    identity_id: int
    pose: str
    template_id: str
    seed: int
    index: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DatasetManifest:
    root: str
    records: list[ManifestRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)
