"""Paired training data: faces without glasses, eyewear composited on top."""
from .augment import GlareSpot, add_glare, apply_glare, apply_refraction, apply_tint, refraction_field
from .compose import (
    PlacedTemplate,
    binarize,
    composite_glasses,
    dilate,
    extract_glasses_template,
    place_template,
)
from .dataset import (
    DatasetWriteError,
    emit_dataset,
    load_faces,
    load_manifest,
    load_pool,
    load_sample,
    load_template,
    record_seed,
    save_faces,
    save_template,
    synthesize_record,
)
from .faces import ToyFace, procedural_glasses_pool, procedural_glasses_template, procedural_toy_faces
from .geometry import (
    AlignmentError,
    FacePose,
    align_face,
    canonical_landmarks,
    classify_pose,
    fit_similarity,
    mirror_landmarks,
)
from .types import DatasetManifest, GlassesTemplate, ManifestRecord, PairedSample, SynthesisConfig, SynthesisError

__all__ = [name for name in dir() if not name.startswith("_")]
