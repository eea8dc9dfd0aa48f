"""Fréchet distance between embedding distributions and face-recognition protocols."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

log = logging.getLogger(__name__)

PAPER_FAR_TARGETS = (1e-3, 1e-4, 1e-5)
COARSE_FAR_TARGETS = (0.5, 0.25, 0.1, 1e-2)
SYMMETRY_TOL = 1e-8
NEG_EIG_TOL = 1e-8


class NotPSDError(ValueError):
    pass


# -- FID ------------------------------------------------------------------------


@dataclass
class GaussianStats:
    mean: np.ndarray
    covariance: np.ndarray
    n: int

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        d = self.mean.shape[0]
        if self.covariance.shape != (d, d):
            raise ValueError(f"covariance must be {d}x{d}, got {self.covariance.shape}")
        if self.n < 2:
            raise ValueError("need at least two samples")
        if np.max(np.abs(self.covariance - self.covariance.T), initial=0.0) > SYMMETRY_TOL:
            raise ValueError("covariance is not symmetric")

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "covariance": self.covariance.tolist(), "n": self.n}


def gaussian_stats(embeddings: np.ndarray) -> GaussianStats:
    """Sample mean and unbiased covariance of an n x d embedding matrix."""
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] < 2:
        raise ValueError("embeddings must be n x d with n >= 2")
    cov = np.cov(e, rowvar=False, ddof=1).reshape(e.shape[1], e.shape[1])
    return GaussianStats(e.mean(axis=0), 0.5 * (cov + cov.T), e.shape[0])


def _psd_eigh(matrix: np.ndarray, what: str):
    sym = 0.5 * (matrix + matrix.T)
    vals, vecs = np.linalg.eigh(sym)
    tol = NEG_EIG_TOL * max(1.0, float(np.max(np.abs(vals), initial=0.0)))
    if np.any(vals < -tol):
        raise NotPSDError(f"{what} has eigenvalue {vals.min():.3e} below tolerance")
    return np.clip(vals, 0.0, None), vecs


def sqrtm_psd(matrix: np.ndarray) -> np.ndarray:
    vals, vecs = _psd_eigh(matrix, "matrix")
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(a: GaussianStats, b: GaussianStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    Tr (S_a S_b)^(1/2) is the sum of singular values of S_a^(1/2) S_b^(1/2): their
    squares are the eigenvalues of S_a^(1/2) S_b S_a^(1/2). Swapping a and b only
    transposes that matrix, so the result is symmetric to rounding.
    """
    if a.mean.shape != b.mean.shape:
        raise ValueError("statistics have different dimensions")
    cross = sqrtm_psd(a.covariance) @ sqrtm_psd(b.covariance)
    tr_cross = float(np.sum(np.linalg.svd(cross, compute_uv=False)))
    diff = a.mean - b.mean
    value = float(diff @ diff) + float(np.trace(a.covariance) + np.trace(b.covariance)) - 2.0 * tr_cross
    return max(value, 0.0)


class RandomProjectionEmbedder:
    """Fixed seeded random projection of pixels followed by tanh."""

    def __init__(self, input_shape, dim: int = 64, seed: int = 0):
        self.input_shape = tuple(input_shape)
        d_in = int(np.prod(self.input_shape))
        rng = np.random.default_rng(seed)
        self.weight = rng.normal(0.0, 1.0 / math.sqrt(d_in), size=(d_in, dim))
        self.dim = dim

    def __call__(self, images: np.ndarray) -> np.ndarray:
        images = np.asarray(images, dtype=np.float64)
        if images.shape[1:] != self.input_shape:
            raise ValueError(f"expected images of shape {self.input_shape}, got {images.shape[1:]}")
        return np.tanh(images.reshape(len(images), -1) @ self.weight)


class TorchEmbedder:
    """Adapts a torch module (N x 3 x H x W in [-1, 1]) to N x H x W x 3 numpy input."""

    def __init__(self, module: torch.nn.Module):
        self.module = module

    def __call__(self, images: np.ndarray) -> np.ndarray:
        dtype = next(self.module.parameters()).dtype
        x = torch.from_numpy(np.asarray(images, dtype=np.float64).transpose(0, 3, 1, 2).copy()).to(dtype)
        self.module.eval()
        with torch.no_grad():
            return self.module(x).double().numpy()


def embed_images(images, embedder, batch_size: int = 64) -> np.ndarray:
    images = np.asarray(images)
    parts = [embedder(images[i : i + batch_size]) for i in range(0, len(images), batch_size)]
    return np.concatenate(parts, axis=0)


# -- verification / identification metrics --------------------------------------


@dataclass
class TarPoint:
    far: float
    tar: float | None  # None when the impostor set is too small for this FAR
    threshold: float | None

    @property
    def computable(self) -> bool:
        return self.tar is not None


def score_matrix(gallery_embeddings: np.ndarray, probe_embeddings: np.ndarray) -> np.ndarray:
    """P x G cosine similarities."""
    g = np.asarray(gallery_embeddings, dtype=np.float64)
    p = np.asarray(probe_embeddings, dtype=np.float64)
    gn = np.linalg.norm(g, axis=1, keepdims=True)
    pn = np.linalg.norm(p, axis=1, keepdims=True)
    if np.any(gn == 0) or np.any(pn == 0):
        raise ValueError("zero-norm embedding")
    return np.clip((p / pn) @ (g / gn).T, -1.0, 1.0)


def tar_at_far(genuine, impostor, far_targets=PAPER_FAR_TARGETS) -> dict[float, TarPoint]:
    """TAR at the smallest threshold whose FAR is within each target.

    Acceptance is ``score >= t``. Allowing k = floor(f * n_impostor) false
    accepts, t sits just above the (k+1)-th largest impostor score. Targets with
    fewer than 1/f impostors are reported as not computable.
    """
    gen = np.asarray(genuine, dtype=np.float64).ravel()
    imp = np.sort(np.asarray(impostor, dtype=np.float64).ravel())[::-1]
    if gen.size == 0 or imp.size == 0:
        raise ValueError("genuine and impostor scores must be non-empty")
    out = {}
    for f in far_targets:
        k = math.floor(f * imp.size + 1e-9)
        if k < 1:
            out[f] = TarPoint(f, None, None)
            continue
        if k >= imp.size:
            t = float(min(gen.min(), imp.min()))
        else:
            t = float(np.nextafter(imp[k], np.inf))
        out[f] = TarPoint(f, float(np.count_nonzero(gen >= t)) / gen.size, t)
    return out


def rank1(scores: np.ndarray, gallery_ids, probe_ids) -> float:
    """Fraction of probes whose best gallery entry shares their identity.
    Ties go to the lowest gallery index."""
    scores = np.asarray(scores)
    best = np.argmax(scores, axis=1)
    g = np.asarray(gallery_ids)
    p = np.asarray(probe_ids)
    return float(np.mean(g[best] == p))


def cosine_distance(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("zero-norm embedding")
    return 1.0 - float(a @ b) / (na * nb)


def cosine_improvement_count(pairs) -> tuple[int, int]:
    """How many (with-glasses, removed, true) triples move strictly closer to the truth."""
    improved = 0
    total = 0
    for emb_x, emb_removed, emb_true in pairs:
        total += 1
        if cosine_distance(emb_removed, emb_true) < cosine_distance(emb_x, emb_true):
            improved += 1
    return improved, total


# -- protocols ------------------------------------------------------------------


@dataclass(frozen=True)
class ProtocolEntry:
    identity_id: int
    record_index: int
    image_ref: str
    glasses: bool
    removal: bool = False


@dataclass
class ProtocolSpec:
    name: str
    gallery: list[ProtocolEntry]
    probe: list[ProtocolEntry]
    removal_applied_to: str  # none | probe | both
    composite: bool = False
    excluded: list[int] = field(default_factory=list)


# name -> (removal_applied_to, probe view, composite)
PROTOCOLS = {
    "no_glasses": ("none", "y", False),
    "with_glasses": ("none", "x", False),
    "with_glasses_removed": ("probe", "x", False),
    "with_glasses_removed_composite": ("probe", "x", True),
    "no_glasses_removed": ("probe", "y", False),
    "mixed_no_removal": ("none", None, False),
    "mixed_with_removal": ("both", None, False),
}


def _entry(rec, view: str, removal: bool) -> ProtocolEntry:
    path = rec.x_path if view == "x" else rec.y_path
    return ProtocolEntry(rec.identity_id, rec.index, path, view == "x", removal)


def build_protocol(manifest, kind: str) -> ProtocolSpec:
    """Assign manifest records to gallery and probe.

    Base protocols use two records per identity: the first one's glasses-free
    image enrols, the second supplies the probe. Mixed protocols use four: the
    gallery holds record 0 without and record 1 with glasses, the probe record 2
    without and record 3 with glasses. Identities short of records are excluded.
    """
    if kind not in PROTOCOLS:
        raise ValueError(f"unknown protocol {kind!r}; choose from {sorted(PROTOCOLS)}")
    removal, probe_view, composite = PROTOCOLS[kind]
    by_id: dict[int, list] = {}
    for rec in sorted(manifest.records, key=lambda r: r.index):
        by_id.setdefault(rec.identity_id, []).append(rec)
    need = 4 if probe_view is None else 2
    gallery, probe, excluded = [], [], []
    rm_g = removal == "both"
    rm_p = removal in ("probe", "both")
    for ident in sorted(by_id):
        recs = by_id[ident]
        if len(recs) < need:
            excluded.append(ident)
            continue
        if probe_view is None:
            gallery += [_entry(recs[0], "y", rm_g), _entry(recs[1], "x", rm_g)]
            probe += [_entry(recs[2], "y", rm_p), _entry(recs[3], "x", rm_p)]
        else:
            gallery.append(_entry(recs[0], "y", rm_g))
            probe.append(_entry(recs[1], probe_view, rm_p))
    if excluded:
        log.warning("protocol %s: %d identities lack %d records and were excluded: %s", kind, len(excluded), need, excluded)
    return ProtocolSpec(kind, gallery, probe, removal, composite, excluded)


@dataclass
class ProtocolRun:
    spec: ProtocolSpec
    scores: np.ndarray
    genuine: np.ndarray
    impostor: np.ndarray
    tar: dict[float, TarPoint]
    rank1: float

    def row(self) -> dict:
        row = {
            "protocol": self.spec.name,
            "removal_applied_to": self.spec.removal_applied_to,
            "n_gallery": len(self.spec.gallery),
            "n_probe": len(self.spec.probe),
            "n_genuine": int(self.genuine.size),
            "n_impostor": int(self.impostor.size),
        }
        for f in PAPER_FAR_TARGETS:
            row[f"TAR@FAR={f:.0e}"] = self.tar[f].tar
        row["Rank-1"] = self.rank1
        row["far_points"] = [
            {"far": p.far, "tar": p.tar, "threshold": p.threshold} for p in sorted(self.tar.values(), key=lambda p: -p.far)
        ]
        return row

    def largest_computable(self) -> TarPoint | None:
        points = [p for p in self.tar.values() if p.computable]
        return max(points, key=lambda p: p.far) if points else None


def split_scores(scores: np.ndarray, gallery_ids, probe_ids):
    same = np.asarray(probe_ids)[:, None] == np.asarray(gallery_ids)[None, :]
    return scores[same], scores[~same]


def run_protocol(spec: ProtocolSpec, load_image, embed, remove=None, far_targets=None) -> ProtocolRun:
    """Score a protocol.

    ``load_image(entry)`` gives H x W x 3 in [-1, 1]; ``embed`` maps N x H x W x 3
    to embeddings; ``remove(images, composite)`` applies glasses removal.
    """
    far_targets = tuple(far_targets or (COARSE_FAR_TARGETS + PAPER_FAR_TARGETS))

    def prepare(entries):
        imgs = np.stack([load_image(e) for e in entries])
        flags = np.array([e.removal for e in entries])
        if flags.any():
            if remove is None:
                raise ValueError(f"protocol {spec.name} needs a removal model")
            imgs[flags] = remove(imgs[flags], spec.composite)
        return embed_images(imgs, embed)

    if not spec.gallery or not spec.probe:
        raise ValueError(f"protocol {spec.name} has an empty gallery or probe set")
    g_ids = [e.identity_id for e in spec.gallery]
    p_ids = [e.identity_id for e in spec.probe]
    scores = score_matrix(prepare(spec.gallery), prepare(spec.probe))
    genuine, impostor = split_scores(scores, g_ids, p_ids)
    if impostor.size == 0:
        raise ValueError(f"protocol {spec.name} has a single identity; no impostor pairs")
    return ProtocolRun(spec, scores, genuine, impostor, tar_at_far(genuine, impostor, far_targets), rank1(scores, g_ids, p_ids))


def recognition_report(runs: list[ProtocolRun]) -> dict:
    return {
        "columns": [f"TAR@FAR={f:.0e}" for f in PAPER_FAR_TARGETS] + ["Rank-1"],
        "rows": [r.row() for r in runs],
        "excluded": {r.spec.name: r.spec.excluded for r in runs if r.spec.excluded},
    }
