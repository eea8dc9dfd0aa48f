"""Generator (encoder + face decoder + segmentation decoder), PatchGAN
discriminators and the identity embedder."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import torch
import torch.nn.functional as F
from torch import nn

EMBED_DIM = 512
MAX_CHANNELS = 512


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class GeneratorConfig:
    depth: int = 5
    base_channels: int = 64
    input_size: int = 256
    norm: bool = True
    sd_fd_skips: bool = True
    seg_channels: int = 2  # 1 = glasses mask only
    # gradient scale on SD features fed to FD; small values stop the heavily
    # weighted L1 terms from repurposing SD away from segmentation
    sd_guidance_grad: float = 0.03

    def __post_init__(self):
        if self.depth < 2:
            raise ShapeError("depth must be >= 2")
        if self.input_size % (2**self.depth):
            raise ShapeError(f"input_size {self.input_size} is not divisible by 2^{self.depth}")
        if self.base_channels < 1:
            raise ShapeError("base_channels must be >= 1")
        if self.seg_channels not in (1, 2):
            raise ShapeError("seg_channels must be 1 or 2")
        if not 0.0 <= self.sd_guidance_grad <= 1.0:
            raise ValueError("sd_guidance_grad must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def channels(self, level: int) -> int:
        """Width of encoder level ``level`` (1-based)."""
        return min(self.base_channels * 2 ** (level - 1), MAX_CHANNELS)


class GeneratorOutput(NamedTuple):
    y_hat: torch.Tensor  # N x 3 x H x W in [-1, 1]
    m_hat: torch.Tensor  # N x C x H x W in [0, 1]


class DownBlock(nn.Sequential):
    def __init__(self, cin, cout, norm=True):
        layers = [nn.Conv2d(cin, cout, 4, 2, 1, bias=not norm)]
        if norm:
            layers.append(nn.InstanceNorm2d(cout))
        layers.append(nn.LeakyReLU(0.2))
        super().__init__(*layers)


class UpBlock(nn.Sequential):
    def __init__(self, cin, cout, norm=True):
        layers = [nn.ConvTranspose2d(cin, cout, 4, 2, 1, bias=not norm)]
        if norm:
            layers.append(nn.InstanceNorm2d(cout))
        layers.append(nn.ReLU())
        super().__init__(*layers)
        self.in_channels = cin


class Decoder(nn.Module):
    """``depth`` upsampling blocks and a stride-1 output block.

    ``extra`` lists, per block, the channels of a side input concatenated in
    addition to the encoder skip (the segmentation features for the face decoder).
    """

    def __init__(self, cfg: GeneratorConfig, out_channels: int, activation, extra: list[int]):
        super().__init__()
        d = cfg.depth
        self.blocks = nn.ModuleList()
        self.block_inputs = []
        for j in range(1, d + 1):
            if j == 1:
                cin = cfg.channels(d)
            else:
                cin = self._out_ch(cfg, j - 1) + cfg.channels(d - j + 1) + extra[j - 1]
            self.block_inputs.append(cin)
            self.blocks.append(UpBlock(cin, self._out_ch(cfg, j), cfg.norm))
        out_in = self._out_ch(cfg, d) + extra[d]
        self.block_inputs.append(out_in)
        self.out = nn.ConvTranspose2d(out_in, out_channels, 3, 1, 1)
        self.activation = activation

    @staticmethod
    def _out_ch(cfg, j):
        return cfg.channels(max(cfg.depth - j, 1))

    def forward(self, skips, side=None):
        d = len(self.blocks)
        feats = []
        h = skips[-1]
        for j, block in enumerate(self.blocks, start=1):
            if j > 1:
                parts = [h, skips[d - j]]
                if side is not None:
                    parts.append(side[j - 2])
                h = torch.cat(parts, dim=1)
            h = block(h)
            feats.append(h)
        if side is not None:
            h = torch.cat([h, side[d - 1]], dim=1)
        return self.activation(self.out(h)), feats


def _scale_grad(t: torch.Tensor, k: float) -> torch.Tensor:
    """Identity forward; backward multiplies the gradient by ``k``."""
    if k == 1.0:
        return t
    if k == 0.0:
        return t.detach()
    return t * k + t.detach() * (1.0 - k)


class Generator(nn.Module):
    """x -> (y_hat = FD(E(x)), m_hat = SD(E(x))).

    Skips run E->FD and E->SD at matching resolutions; with ``sd_fd_skips`` each
    SD block output is also concatenated into the same-resolution FD input.
    """

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = nn.ModuleList()
        cin = 3
        size = cfg.input_size
        for level in range(1, cfg.depth + 1):
            size //= 2
            # instance norm is undefined on a 1x1 map
            self.encoder.append(DownBlock(cin, cfg.channels(level), cfg.norm and size > 1))
            cin = cfg.channels(level)
        d = cfg.depth
        no_extra = [0] * (d + 1)
        self.seg_decoder = Decoder(cfg, cfg.seg_channels, torch.sigmoid, no_extra)
        if cfg.sd_fd_skips:
            extra = [0] + [Decoder._out_ch(cfg, j) for j in range(1, d + 1)]
        else:
            extra = no_extra
        self.face_decoder = Decoder(cfg, 3, torch.tanh, extra)
        self._check_wiring()

    def _check_wiring(self):
        cfg, d = self.cfg, self.cfg.depth
        for j in range(2, d + 1):
            up = Decoder._out_ch(cfg, j - 1)
            skip = cfg.channels(d - j + 1)
            sd = up if cfg.sd_fd_skips else 0
            if self.face_decoder.block_inputs[j - 1] != up + skip + sd:
                raise AssertionError(f"face decoder block {j} wiring mismatch")

    def encode(self, x):
        skips = []
        h = x
        for block in self.encoder:
            h = block(h)
            skips.append(h)
        return skips

    def forward(self, x) -> GeneratorOutput:
        s = self.cfg.input_size
        if x.dim() != 4 or x.shape[1] != 3 or x.shape[2] != s or x.shape[3] != s:
            raise ShapeError(f"expected N x 3 x {s} x {s} input, got {tuple(x.shape)}")
        skips = self.encode(x)
        m_hat, seg_feats = self.seg_decoder(skips)
        side = None
        if self.cfg.sd_fd_skips:
            side = [_scale_grad(f, self.cfg.sd_guidance_grad) for f in seg_feats]
        y_hat, _ = self.face_decoder(skips, side)
        return GeneratorOutput(y_hat, m_hat)


def build_generator(cfg: GeneratorConfig) -> Generator:
    return Generator(cfg)


def generator_forward(gen: Generator, x: torch.Tensor) -> GeneratorOutput:
    """Inference-mode forward; accepts a single 3 x H x W image or a batch."""
    single = x.dim() == 3
    if single:
        x = x.unsqueeze(0)
    was_training = gen.training
    gen.eval()
    try:
        with torch.no_grad():
            out = gen(x)
    finally:
        gen.train(was_training)
    if single:
        return GeneratorOutput(out.y_hat[0], out.m_hat[0])
    return out


@dataclass(frozen=True)
class DiscriminatorConfig:
    n_layers: int = 3
    base_channels: int = 64
    norm: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


class PatchDiscriminator(nn.Module):
    """pix2pix PatchGAN; three strided layers give a 70x70 receptive field.
    Scores are raw (no sigmoid) for the least-squares objective."""

    def __init__(self, cfg: DiscriminatorConfig = DiscriminatorConfig()):
        super().__init__()
        self.cfg = cfg
        c = cfg.base_channels
        layers = [nn.Conv2d(3, c, 4, 2, 1), nn.LeakyReLU(0.2)]
        mult = 1
        for n in range(1, cfg.n_layers + 1):
            prev, mult = mult, min(2**n, 8)
            stride = 2 if n < cfg.n_layers else 1
            layers.append(nn.Conv2d(c * prev, c * mult, 4, stride, 1, bias=not cfg.norm))
            if cfg.norm:
                layers.append(nn.InstanceNorm2d(c * mult))
            layers.append(nn.LeakyReLU(0.2))
        layers.append(nn.Conv2d(c * mult, 1, 4, 1, 1))
        self.model = nn.Sequential(*layers)

    def forward(self, image):
        if image.dim() != 4 or image.shape[1] != 3:
            raise ShapeError(f"expected N x 3 x H x W image, got {tuple(image.shape)}")
        return self.model(image)

    @property
    def final_layer(self) -> nn.Conv2d:
        return self.model[-1]


def patch_output_size(size: int, n_layers: int = 3) -> int:
    """Score-map side length, from conv arithmetic floor((s + 2p - k) / stride) + 1."""
    s = size
    for n in range(n_layers + 1):
        stride = 2 if n < n_layers else 1
        s = (s + 2 - 4) // stride + 1
    return (s + 2 - 4) // 1 + 1


def discriminator_forward(d: PatchDiscriminator, image: torch.Tensor) -> torch.Tensor:
    single = image.dim() == 3
    scores = d(image.unsqueeze(0) if single else image)
    return scores[0, 0] if single else scores


# -- identity extractor ---------------------------------------------------------


class ResidualBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.norm1 = nn.GroupNorm(min(8, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.norm2 = nn.GroupNorm(min(8, cout), cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.GroupNorm(min(8, cout), cout))

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        return F.relu(h + self.shortcut(x))


@dataclass(frozen=True)
class EmbedderConfig:
    input_size: int = 64
    widths: tuple[int, ...] = (32, 64, 128, 256)
    embed_dim: int = EMBED_DIM

    def to_dict(self) -> dict:
        d = asdict(self)
        d["widths"] = list(self.widths)
        return d


class IdentityEmbedder(nn.Module):
    """Four-stage residual network mapping a face to a 512-d identity vector."""

    def __init__(self, cfg: EmbedderConfig = EmbedderConfig()):
        super().__init__()
        self.cfg = cfg
        w = cfg.widths
        self.stem = nn.Sequential(nn.Conv2d(3, w[0], 3, 2, 1, bias=False), nn.GroupNorm(min(8, w[0]), w[0]), nn.ReLU())
        stages = []
        cin = w[0]
        for i, cout in enumerate(w):
            stages.append(ResidualBlock(cin, cout, 1 if i == 0 else 2))
            cin = cout
        self.stages = nn.Sequential(*stages)
        self.fc = nn.Linear(cin, cfg.embed_dim)

    def forward(self, image):
        s = self.cfg.input_size
        if image.dim() != 4 or image.shape[1] != 3 or image.shape[2] != s or image.shape[3] != s:
            raise ShapeError(f"expected N x 3 x {s} x {s} input, got {tuple(image.shape)}")
        h = self.stages(self.stem(image))
        return self.fc(h.mean(dim=(2, 3)))

    def freeze(self) -> "IdentityEmbedder":
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self


def identity_embed(ie: IdentityEmbedder, image: torch.Tensor) -> torch.Tensor:
    single = image.dim() == 3
    emb = ie(image.unsqueeze(0) if single else image)
    return emb[0] if single else emb


def arcface_logits(
    embedding: torch.Tensor,
    class_weights: torch.Tensor,
    target: torch.Tensor | int | None = None,
    margin: float = 0.5,
    scale: float = 32.0,
) -> torch.Tensor:
    """``scale * cos(theta_i + margin * [i == target])`` on L2-normalised inputs.

    ``embedding`` is N x D (or D), ``class_weights`` is C x D. With no target the
    margin is not applied anywhere.
    """
    single = embedding.dim() == 1
    emb = embedding.unsqueeze(0) if single else embedding
    e_norm = emb.norm(dim=1, keepdim=True)
    w_norm = class_weights.norm(dim=1, keepdim=True)
    if torch.any(e_norm == 0):
        raise ValueError("embedding has zero norm")
    if torch.any(w_norm == 0):
        raise ValueError("class weight row has zero norm")
    cos = ((emb / e_norm) @ (class_weights / w_norm).t()).clamp(-1.0, 1.0)
    if target is None or margin == 0:
        logits = cos
    else:
        target = torch.as_tensor(target, device=cos.device).reshape(-1)
        if target.numel() == 1 and cos.shape[0] > 1:
            target = target.expand(cos.shape[0])
        sin = torch.sqrt((1.0 - cos * cos).clamp_min(1e-30))
        cos_m = cos * math.cos(margin) - sin * math.sin(margin)
        onehot = F.one_hot(target.long(), cos.shape[1]).to(torch.bool)
        logits = torch.where(onehot, cos_m, cos)
    logits = scale * logits
    return logits[0] if single else logits


class ArcFaceHead(nn.Module):
    def __init__(self, n_classes: int, embed_dim: int = EMBED_DIM, margin: float = 0.5, scale: float = 32.0):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(n_classes, embed_dim) * 0.01)
        self.margin = margin
        self.scale = scale

    def forward(self, embedding, target=None):
        return arcface_logits(embedding, self.weight, target, self.margin, self.scale)
