"""Dataset emission and the on-disk formats for pairs, faces and template pools."""
from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
from PIL import Image

from .compose import composite_glasses
from .faces import ToyFace
from .geometry import FacePose, classify_pose
from .types import DatasetManifest, GlassesTemplate, ManifestRecord, PairedSample, SynthesisConfig, SynthesisError

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.jsonl"


class DatasetWriteError(RuntimeError):
    def __init__(self, message: str, written: list[ManifestRecord]):
        super().__init__(message)
        self.written = written


def to_uint8(image01: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(image01) * 255.0), 0, 255).astype(np.uint8)


def save_rgb(path: Path, image01: np.ndarray) -> None:
    Image.fromarray(to_uint8(image01), mode="RGB").save(path)


def load_rgb(path) -> np.ndarray:
    """H x W x 3 float64 in [0, 1]."""
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def save_mask2(path: Path, m: np.ndarray) -> None:
    """Two-channel 0/255 PNG (channel 0 = glasses, channel 1 = face shape)."""
    arr = (np.moveaxis(np.asarray(m, dtype=bool), 0, -1).astype(np.uint8)) * 255
    Image.fromarray(arr, mode="LA").save(path)


def load_mask2(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("LA"))
    return (np.moveaxis(arr, -1, 0) >= 128).astype(np.uint8)


def save_gray_mask(path: Path, mask: np.ndarray) -> None:
    Image.fromarray(np.asarray(mask, dtype=bool).astype(np.uint8) * 255, mode="L").save(path)


def load_gray_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) >= 128


def record_seed(base_seed: int, index: int) -> int:
    """Per-record seed; any record can be regenerated from (base_seed, index)."""
    return int(np.random.SeedSequence([int(base_seed), int(index)]).generate_state(1, dtype=np.uint64)[0])


def synthesize_record(
    face: ToyFace,
    pool: list[GlassesTemplate],
    cfg: SynthesisConfig,
    seed: int,
    face_shape_mask: np.ndarray | None = None,
) -> tuple[PairedSample, GlassesTemplate]:
    """Composite one face with a same-pose template chosen by ``seed``.

    Templates that do not fit inside the image are skipped in seeded order.
    """
    rng = np.random.default_rng(seed)
    pose = classify_pose(face.landmarks, cfg.pose_tolerance)
    candidates = [t for t in pool if t.pose == pose]
    if not candidates:
        raise SynthesisError(f"no template with pose {pose.value} in the pool")
    mask = face.face_shape_mask if face_shape_mask is None else face_shape_mask
    last_error = None
    for k in rng.permutation(len(candidates)):
        template = candidates[int(k)]
        try:
            sample = composite_glasses(face.image, template, mask, cfg, rng, face.landmarks, face.identity_id)
            return sample, template
        except SynthesisError as exc:
            last_error = exc
    raise SynthesisError(f"no same-pose template fits the face: {last_error}")


def emit_dataset(
    faces: list[ToyFace],
    pool: list[GlassesTemplate],
    face_shape_masks: list[np.ndarray] | None,
    cfg: SynthesisConfig,
    out_dir,
) -> DatasetManifest:
    """Write one pair per face under ``out_dir`` (x/, y/, m/ and manifest.jsonl)."""
    out = Path(out_dir)
    missing = {classify_pose(f.landmarks, cfg.pose_tolerance) for f in faces} - {t.pose for t in pool}
    if missing:
        raise SynthesisError(f"pool lacks templates for poses: {sorted(p.value for p in missing)}")
    if face_shape_masks is not None and len(face_shape_masks) != len(faces):
        raise ValueError("face_shape_masks must align with faces")

    written: list[ManifestRecord] = []
    try:
        for sub in ("x", "y", "m"):
            (out / sub).mkdir(parents=True, exist_ok=True)
        for i, face in enumerate(faces):
            seed = record_seed(cfg.rng_seed, i)
            fmask = None if face_shape_masks is None else face_shape_masks[i]
            sample, template = synthesize_record(face, pool, cfg, seed, fmask)
            name = f"{i:06d}.png"
            rec = ManifestRecord(
                x_path=f"x/{name}",
                y_path=f"y/{name}",
                mask_path=f"m/{name}",
                identity_id=int(face.identity_id),
                pose=sample.pose.value,
                template_id=template.template_id,
                seed=seed,
                index=i,
            )
            save_rgb(out / rec.x_path, (sample.x + 1.0) / 2.0)
            save_rgb(out / rec.y_path, (sample.y + 1.0) / 2.0)
            save_mask2(out / rec.mask_path, sample.m)
            written.append(rec)
        write_manifest(out / MANIFEST_NAME, written)
    except OSError as exc:
        try:
            write_manifest(out / "manifest.partial.jsonl", written)
        except OSError:
            pass
        raise DatasetWriteError(
            f"I/O failure after {len(written)} of {len(faces)} records under {out}: {exc}", written
        ) from exc
    log.info("wrote %d pairs to %s", len(written), out)
    return DatasetManifest(str(out), written)


def write_manifest(path: Path, records: list[ManifestRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def load_manifest(root) -> DatasetManifest:
    root = Path(root)
    path = root / MANIFEST_NAME if root.is_dir() else root
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(ManifestRecord(**json.loads(line)))
    return DatasetManifest(str(path.parent), records)


def load_sample(manifest: DatasetManifest, rec: ManifestRecord) -> PairedSample:
    root = Path(manifest.root)
    x = load_rgb(root / rec.x_path) * 2.0 - 1.0
    y = load_rgb(root / rec.y_path) * 2.0 - 1.0
    m = load_mask2(root / rec.mask_path)
    return PairedSample(x=x, y=y, m=m, pose=FacePose(rec.pose), identity_id=rec.identity_id)


# -- template pools -------------------------------------------------------------


def _rle(mask: np.ndarray) -> list[int]:
    flat = np.asarray(mask, dtype=np.uint8).ravel()
    change = np.flatnonzero(np.diff(np.concatenate([[0], flat, [0]])))
    return change.tolist()  # alternating start/stop offsets of True runs


def _unrle(runs: list[int], shape) -> np.ndarray:
    flat = np.zeros(int(np.prod(shape)), bool)
    for start, stop in zip(runs[0::2], runs[1::2]):
        flat[start:stop] = True
    return flat.reshape(shape)


def save_template(template: GlassesTemplate, directory) -> Path:
    """``<id>.png`` (RGBA) plus ``<id>.json`` with pose, anchors and lens runs."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tid = template.template_id or "template"
    rgba = to_uint8(template.color_layer)
    rgba[..., 3] = np.where(template.mask & (rgba[..., 3] == 0), 1, rgba[..., 3])
    Image.fromarray(rgba, mode="RGBA").save(directory / f"{tid}.png")
    meta = {
        "template_id": tid,
        "pose": template.pose.value,
        "anchor_points": template.anchor_points.tolist(),
        "lens_runs": _rle(template.lens_mask),
    }
    (directory / f"{tid}.json").write_text(json.dumps(meta, sort_keys=True), encoding="utf-8")
    return directory / f"{tid}.png"


def load_template(png_path) -> GlassesTemplate:
    png_path = Path(png_path)
    meta = json.loads(png_path.with_suffix(".json").read_text(encoding="utf-8"))
    with Image.open(png_path) as im:
        layer = np.asarray(im.convert("RGBA"), dtype=np.float64) / 255.0
    shape = layer.shape[:2]
    return GlassesTemplate(
        color_layer=layer,
        mask=layer[..., 3] > 0,
        pose=FacePose(meta["pose"]),
        anchor_points=np.asarray(meta["anchor_points"]),
        lens_mask=_unrle(meta.get("lens_runs", []), shape),
        template_id=meta.get("template_id", png_path.stem),
    )


def load_pool(directory) -> list[GlassesTemplate]:
    return [load_template(p) for p in sorted(Path(directory).glob("*.png")) if p.with_suffix(".json").exists()]


# -- face sets ------------------------------------------------------------------

FACES_INDEX = "faces.jsonl"


def save_faces(faces: list[ToyFace], directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / FACES_INDEX, "w", encoding="utf-8") as fh:
        for i, face in enumerate(faces):
            name = f"{i:06d}"
            save_rgb(directory / f"{name}.png", face.image)
            save_gray_mask(directory / f"{name}_shape.png", face.face_shape_mask)
            row = {
                "image": f"{name}.png",
                "face_shape_mask": f"{name}_shape.png",
                "landmarks": np.asarray(face.landmarks).tolist(),
                "identity_id": int(face.identity_id),
                "pose": face.pose.value,
            }
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_faces(directory) -> list[ToyFace]:
    directory = Path(directory)
    faces = []
    with open(directory / FACES_INDEX, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            faces.append(
                ToyFace(
                    image=load_rgb(directory / row["image"]),
                    landmarks=np.asarray(row["landmarks"], dtype=np.float64),
                    face_shape_mask=load_gray_mask(directory / row["face_shape_mask"]),
                    identity_id=int(row["identity_id"]),
                    pose=FacePose(row["pose"]),
                )
            )
    return faces
