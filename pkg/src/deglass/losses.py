"""Generator and discriminator objectives.

Every term is mean-reduced over batch, channels and pixels.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import torch

BCE_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    gan_global: float = 1.0
    gan_local: float = 1.0
    l1_global: float = 100.0
    l1_local: float = 200.0
    seg: float = 3.0
    id: float = 5.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


TERM_NAMES = ("g_gan_global", "g_gan_local", "l1_global", "l1_local", "seg", "id")


@dataclass
class LossReport:
    g_gan_global: float = 0.0
    g_gan_local: float = 0.0
    l1_global: float = 0.0
    l1_local: float = 0.0
    seg: float = 0.0
    id: float = 0.0
    total: float = 0.0
    d_global: float = 0.0
    d_local: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


def _require_finite(*tensors):
    for t in tensors:
        if not torch.isfinite(t).all():
            raise ValueError("non-finite values in loss input")


def lsgan_d_loss(real_scores: torch.Tensor, fake_scores: torch.Tensor) -> torch.Tensor:
    """mean((real - 1)^2) + mean(fake^2)."""
    _require_finite(real_scores, fake_scores)
    return ((real_scores - 1.0) ** 2).mean() + (fake_scores**2).mean()


def lsgan_g_loss(fake_scores: torch.Tensor) -> torch.Tensor:
    _require_finite(fake_scores)
    return ((fake_scores - 1.0) ** 2).mean()


def masked(image: torch.Tensor, m_g: torch.Tensor) -> torch.Tensor:
    """Element-wise product with a mask broadcast over channels.

    ``m_g`` may be H x W, N x H x W or N x 1 x H x W.
    """
    if m_g.dim() == image.dim() - 1:
        m_g = m_g.unsqueeze(-3)
    return image * m_g.to(image.dtype)


def l1_loss(y_hat: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return (y_hat - y).abs().mean()


def l1_local_loss(y_hat: torch.Tensor, y: torch.Tensor, m_g: torch.Tensor) -> torch.Tensor:
    return l1_loss(masked(y_hat, m_g), masked(y, m_g))


def seg_bce(m_hat: torch.Tensor, m: torch.Tensor, eps: float = BCE_EPS) -> torch.Tensor:
    p = m_hat.clamp(eps, 1.0 - eps)
    m = m.to(p.dtype)
    return -(m * torch.log(p) + (1.0 - m) * torch.log(1.0 - p)).mean()


def id_mse(emb_hat: torch.Tensor, emb_true: torch.Tensor) -> torch.Tensor:
    """Mean squared difference over embedding dimensions (and batch)."""
    return ((emb_hat - emb_true) ** 2).mean()


def id_norm(emb_hat: torch.Tensor, emb_true: torch.Tensor) -> torch.Tensor:
    """Unsquared variant: batch mean of the per-sample Euclidean distance."""
    diff = (emb_hat - emb_true).reshape(emb_hat.shape[0], -1) if emb_hat.dim() > 1 else (emb_hat - emb_true)[None]
    return diff.norm(dim=1).mean()


def weighted_total(terms: dict, w: LossWeights):
    return (
        w.gan_global * terms["g_gan_global"]
        + w.gan_local * terms["g_gan_local"]
        + w.l1_global * terms["l1_global"]
        + w.l1_local * terms["l1_local"]
        + w.seg * terms["seg"]
        + w.id * terms["id"]
    )


def total_g_loss(terms: dict, w: LossWeights = LossWeights()) -> LossReport:
    """Weighted generator objective as a report of plain floats.

    Use ``weighted_total`` for the differentiable tensor.
    """
    values = {k: float(terms.get(k, 0.0)) for k in TERM_NAMES}
    report = LossReport(**values)
    report.total = float(weighted_total(values, w))
    for k in ("d_global", "d_local"):
        if k in terms:
            setattr(report, k, float(terms[k]))
    return report
