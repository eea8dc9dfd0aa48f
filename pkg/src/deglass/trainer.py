"""Alternating discriminator/generator optimisation, checkpoints and inference."""
from __future__ import annotations

import json
import logging
import pickle
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from . import losses as L
from .netarch import (
    ArcFaceHead,
    DiscriminatorConfig,
    EmbedderConfig,
    Generator,
    GeneratorConfig,
    IdentityEmbedder,
    PatchDiscriminator,
)
from .synthkit.compose import dilate
from .synthkit.dataset import load_manifest, load_sample

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "deglass-checkpoint"
CHECKPOINT_VERSION = 1


class TrainingDivergedError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    image_size: int = 64
    depth: int = 4
    base_channels: int = 32
    disc_channels: int = 32
    disc_layers: int = 3
    learning_rate: float = 2e-4
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999
    batch_size: int = 4
    steps: int = 2000
    loss_weights: L.LossWeights = field(default_factory=L.LossWeights)
    disable_sd_fd_skips: bool = False
    glasses_mask_only: bool = False
    disable_id_loss: bool = False
    sd_guidance_grad: float = 0.03
    id_loss: str = "mse"  # or "norm" for the unsquared distance
    ie_pretrain_steps: int = 300
    ie_batch_size: int = 16
    ie_learning_rate: float = 1e-3
    checkpoint_every: int = 500
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            object.__setattr__(self, "loss_weights", L.LossWeights(**self.loss_weights))
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.id_loss not in ("mse", "norm"):
            raise ValueError("id_loss must be 'mse' or 'norm'")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        self.generator_config()  # validates size/depth

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss_weights"] = self.loss_weights.to_dict()
        return d

    @property
    def effective_weights(self) -> L.LossWeights:
        if self.disable_id_loss:
            return replace(self.loss_weights, id=0.0)
        return self.loss_weights

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            depth=self.depth,
            base_channels=self.base_channels,
            input_size=self.image_size,
            sd_fd_skips=not self.disable_sd_fd_skips,
            seg_channels=1 if self.glasses_mask_only else 2,
            sd_guidance_grad=self.sd_guidance_grad,
        )

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(n_layers=self.disc_layers, base_channels=self.disc_channels)

    def embedder_config(self) -> EmbedderConfig:
        return EmbedderConfig(input_size=self.image_size)


@dataclass
class TrainState:
    config: TrainConfig
    generator: Generator
    d_global: PatchDiscriminator
    d_local: PatchDiscriminator
    ie: IdentityEmbedder
    opt_g: torch.optim.Optimizer
    opt_dg: torch.optim.Optimizer
    opt_dl: torch.optim.Optimizer
    step: int = 0
    dump_dir: Path | None = None

    def parameters_snapshot(self) -> dict[str, dict[str, torch.Tensor]]:
        return {
            name: {k: v.detach().clone() for k, v in getattr(self, name).state_dict().items()}
            for name in ("generator", "d_global", "d_local", "ie")
        }


def _adam(params, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2))


def init_state(cfg: TrainConfig, ie: IdentityEmbedder | None = None) -> TrainState:
    torch.manual_seed(cfg.seed)
    dtype = cfg.torch_dtype
    gen = Generator(cfg.generator_config()).to(dtype)
    d_global = PatchDiscriminator(cfg.discriminator_config()).to(dtype)
    d_local = PatchDiscriminator(cfg.discriminator_config()).to(dtype)
    if ie is None:
        ie = IdentityEmbedder(cfg.embedder_config())
    ie = ie.to(dtype).freeze()
    return TrainState(
        config=cfg,
        generator=gen,
        d_global=d_global,
        d_local=d_local,
        ie=ie,
        opt_g=_adam(gen.parameters(), cfg),
        opt_dg=_adam(d_global.parameters(), cfg),
        opt_dl=_adam(d_local.parameters(), cfg),
    )


def _set_requires_grad(module, flag: bool):
    for p in module.parameters():
        p.requires_grad_(flag)


def _dump_batch(state: TrainState, batch: dict, batch_id) -> Path | None:
    if state.dump_dir is None:
        return None
    state.dump_dir.mkdir(parents=True, exist_ok=True)
    path = state.dump_dir / f"diverged_step{state.step:06d}.npz"
    np.savez(path, **{k: v.detach().cpu().numpy() for k, v in batch.items() if torch.is_tensor(v)}, batch_id=str(batch_id))
    return path


def _diverged(state: TrainState, batch: dict, what: str) -> TrainingDivergedError:
    path = _dump_batch(state, batch, batch.get("batch_id"))
    return TrainingDivergedError(
        f"non-finite {what} at step {state.step} (batch {batch.get('batch_id')}); dump: {path}"
    )


def train_step(state: TrainState, batch: dict) -> tuple[TrainState, L.LossReport]:
    """One optimisation step on ``batch`` = {"x", "y", "m"} (N x C x H x W tensors).

    Order: D_global on (y, y_hat), D_local on the glasses-masked pair, then G on
    the weighted objective scored by the freshly updated discriminators.
    """
    cfg = state.config
    w = cfg.effective_weights
    x, y, m = batch["x"], batch["y"], batch["m"]
    if x.shape[0] == 0:
        raise ValueError("empty batch")
    m_g = m[:, 0:1]
    seg_target = m[:, : state.generator.cfg.seg_channels]
    g, dg, dl = state.generator, state.d_global, state.d_local
    g.train()
    dg.train()
    dl.train()

    out = g(x)
    fake = out.y_hat.detach()

    _set_requires_grad(dg, True)
    _set_requires_grad(dl, True)
    state.opt_dg.zero_grad(set_to_none=True)
    try:
        d_global = L.lsgan_d_loss(dg(y), dg(fake))
    except ValueError:
        raise _diverged(state, batch, "global discriminator loss") from None
    d_global.backward()
    state.opt_dg.step()

    state.opt_dl.zero_grad(set_to_none=True)
    try:
        d_local = L.lsgan_d_loss(dl(L.masked(y, m_g)), dl(L.masked(fake, m_g)))
    except ValueError:
        raise _diverged(state, batch, "local discriminator loss") from None
    d_local.backward()
    state.opt_dl.step()

    _set_requires_grad(dg, False)
    _set_requires_grad(dl, False)
    try:
        gan_terms = (L.lsgan_g_loss(dg(out.y_hat)), L.lsgan_g_loss(dl(L.masked(out.y_hat, m_g))))
    except ValueError:
        raise _diverged(state, batch, "generator adversarial loss") from None
    terms = {
        "g_gan_global": gan_terms[0],
        "g_gan_local": gan_terms[1],
        "l1_global": L.l1_loss(out.y_hat, y),
        "l1_local": L.l1_local_loss(out.y_hat, y, m_g),
        "seg": L.seg_bce(out.m_hat, seg_target),
    }
    if w.id > 0:
        with torch.no_grad():
            emb_true = state.ie(y)
        id_fn = L.id_mse if cfg.id_loss == "mse" else L.id_norm
        terms["id"] = id_fn(state.ie(out.y_hat), emb_true)
    else:
        terms["id"] = torch.zeros((), dtype=x.dtype)
    total = L.weighted_total(terms, w)
    if not torch.isfinite(total):
        raise _diverged(state, batch, "generator loss")
    state.opt_g.zero_grad(set_to_none=True)
    total.backward()
    state.opt_g.step()
    _set_requires_grad(dg, True)
    _set_requires_grad(dl, True)

    state.step += 1
    terms["d_global"] = d_global.detach()
    terms["d_local"] = d_local.detach()
    report = L.total_g_loss({k: v.detach() for k, v in terms.items()}, w)
    return state, report


# -- data -----------------------------------------------------------------------


@dataclass
class PairTensors:
    x: torch.Tensor  # N x 3 x H x W in [-1, 1]
    y: torch.Tensor
    m: torch.Tensor  # N x 2 x H x W in {0, 1}
    identity: torch.Tensor  # N

    def __len__(self):
        return self.x.shape[0]

    def to(self, dtype):
        return PairTensors(self.x.to(dtype), self.y.to(dtype), self.m.to(dtype), self.identity)


def samples_to_tensors(samples, dtype=torch.float32) -> PairTensors:
    x = torch.from_numpy(np.stack([s.x for s in samples]).transpose(0, 3, 1, 2).copy())
    y = torch.from_numpy(np.stack([s.y for s in samples]).transpose(0, 3, 1, 2).copy())
    m = torch.from_numpy(np.stack([s.m for s in samples]).astype(np.float64))
    ids = torch.tensor([s.identity_id for s in samples], dtype=torch.long)
    return PairTensors(x.to(dtype), y.to(dtype), m.to(dtype), ids)


def load_pairs(manifest, dtype=torch.float32) -> PairTensors:
    if not hasattr(manifest, "records"):
        manifest = load_manifest(manifest)
    return samples_to_tensors([load_sample(manifest, r) for r in manifest.records], dtype)


def batch_indices(n: int, batch_size: int, step: int, seed: int) -> np.ndarray:
    """Indices for ``step``: a seeded permutation per epoch, read as one stream."""
    perms = {}
    out = []
    for pos in range(step * batch_size, (step + 1) * batch_size):
        epoch, offset = divmod(pos, n)
        if epoch not in perms:
            perms[epoch] = np.random.default_rng([seed, epoch]).permutation(n)
        out.append(perms[epoch][offset])
    return np.asarray(out)


def get_batch(data: PairTensors, step: int, cfg: TrainConfig) -> dict:
    idx = batch_indices(len(data), cfg.batch_size, step, cfg.seed)
    t = torch.from_numpy(idx)
    return {"x": data.x[t], "y": data.y[t], "m": data.m[t], "batch_id": f"step{step}:" + ",".join(map(str, idx))}


# -- identity extractor pretraining ---------------------------------------------


def pretrain_identity_extractor(
    images: torch.Tensor,
    labels: torch.Tensor,
    cfg: TrainConfig,
    steps: int | None = None,
    margin: float = 0.5,
    scale: float = 32.0,
) -> IdentityEmbedder:
    """Fit the embedder as an identity classifier with an additive angular margin head.
    Returns the embedder frozen."""
    steps = cfg.ie_pretrain_steps if steps is None else steps
    torch.manual_seed(cfg.seed + 1)
    dtype = cfg.torch_dtype
    ie = IdentityEmbedder(cfg.embedder_config()).to(dtype)
    classes, targets = torch.unique(labels, return_inverse=True)
    head = ArcFaceHead(len(classes), margin=margin, scale=scale).to(dtype)
    opt = torch.optim.Adam(list(ie.parameters()) + list(head.parameters()), lr=cfg.ie_learning_rate)
    rng = np.random.default_rng([cfg.seed, 1])
    images = images.to(dtype)
    n = images.shape[0]
    ie.train()
    for _ in range(steps):
        idx = torch.from_numpy(rng.choice(n, size=min(cfg.ie_batch_size, n), replace=False))
        batch = images[idx]
        flip = torch.from_numpy(rng.random(len(idx)) < 0.5)
        batch = torch.where(flip[:, None, None, None], batch.flip(-1), batch)
        loss = F.cross_entropy(head(ie(batch), targets[idx]), targets[idx])
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    return ie.freeze()


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(state: TrainState, path, final: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": state.config.to_dict(),
        "step": state.step,
        "final": final,
        "params": {
            "generator": state.generator.state_dict(),
            "d_global": state.d_global.state_dict(),
            "d_local": state.d_local.state_dict(),
            "ie": state.ie.state_dict(),
        },
        "optim": {
            "generator": state.opt_g.state_dict(),
            "d_global": state.opt_dg.state_dict(),
            "d_local": state.opt_dl.state_dict(),
        },
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path, expect: TrainConfig | None = None) -> TrainState:
    """Rebuild a TrainState. With ``expect``, architecture fields must match."""
    try:
        payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, pickle.UnpicklingError, EOFError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path} is not a {CHECKPOINT_FORMAT} archive")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {payload.get('version')}")
    cfg = TrainConfig.from_dict(payload["config"])
    if expect is not None:
        arch = ("image_size", "depth", "base_channels", "disc_channels", "disc_layers",
                "disable_sd_fd_skips", "glasses_mask_only", "dtype")
        diff = [k for k in arch if getattr(cfg, k) != getattr(expect, k)]
        if diff:
            raise CheckpointError(f"checkpoint config differs in {diff}")
    state = init_state(cfg)
    state.generator.load_state_dict(payload["params"]["generator"])
    state.d_global.load_state_dict(payload["params"]["d_global"])
    state.d_local.load_state_dict(payload["params"]["d_local"])
    state.ie.load_state_dict(payload["params"]["ie"])
    state.ie.freeze()
    state.opt_g.load_state_dict(payload["optim"]["generator"])
    state.opt_dg.load_state_dict(payload["optim"]["d_global"])
    state.opt_dl.load_state_dict(payload["optim"]["d_local"])
    state.step = int(payload["step"])
    return state


# -- orchestration --------------------------------------------------------------


def fit(
    config: TrainConfig,
    manifest,
    out_dir,
    ie: IdentityEmbedder | None = None,
    callback: Callable[[TrainState, L.LossReport], bool] | None = None,
    data: PairTensors | None = None,
    resume: TrainState | None = None,
) -> list[Path]:
    """Train for ``config.steps`` steps, writing checkpoints and ``metrics.jsonl``.

    ``callback(state, report)`` returning True stops early; the last checkpoint
    written is always marked final.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if data is None:
        data = load_pairs(manifest, config.torch_dtype)
    data = data.to(config.torch_dtype)
    if resume is not None:
        state = resume
    else:
        if ie is None and config.effective_weights.id > 0:
            images = torch.cat([data.y, data.x])
            labels = torch.cat([data.identity, data.identity])
            ie = pretrain_identity_extractor(images, labels, config)
        state = init_state(config, ie)
    state.dump_dir = out / "diagnostics"
    (out / "effective_config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True))
    ckpt_dir = out / "checkpoints"
    written = []
    with open(out / "metrics.jsonl", "a" if resume is not None else "w", encoding="utf-8") as logf:
        while state.step < config.steps:
            batch = get_batch(data, state.step, config)
            state, report = train_step(state, batch)
            logf.write(json.dumps({"step": state.step, **report.to_dict()}, sort_keys=True) + "\n")
            stop = callback(state, report) if callback else False
            if config.checkpoint_every and state.step % config.checkpoint_every == 0 and state.step < config.steps:
                written.append(save_checkpoint(state, ckpt_dir / f"step_{state.step:06d}.pt"))
            if stop:
                break
    written.append(save_checkpoint(state, ckpt_dir / "final.pt", final=True))
    log.info("training finished at step %d", state.step)
    return written


def _as_state(checkpoint) -> TrainState:
    return checkpoint if isinstance(checkpoint, TrainState) else load_checkpoint(checkpoint)


def remove_glasses(
    checkpoint,
    image: np.ndarray,
    composite: bool = False,
    radius: int = 2,
) -> tuple[np.ndarray, np.ndarray]:
    """Run the generator on aligned image(s) (H x W x 3 or N x H x W x 3, in [-1, 1]).

    Returns (y_hat in [-1, 1], m_hat in [0, 1] with shape C x H x W per image).
    With ``composite`` the output keeps the input outside dilate(m_hat_g > 0.5, radius).
    """
    state = _as_state(checkpoint)
    gen = state.generator
    size = gen.cfg.input_size
    arr = np.asarray(image, dtype=np.float64)
    single = arr.ndim == 3
    batch = arr[None] if single else arr
    if batch.shape[1:] != (size, size, 3):
        raise CheckpointError(
            f"image is {batch.shape[1]}x{batch.shape[2]} but the checkpoint expects {size}x{size}; "
            "align/resize the input first"
        )
    dtype = next(gen.parameters()).dtype
    x = torch.from_numpy(batch.transpose(0, 3, 1, 2).copy()).to(dtype)
    gen.eval()
    with torch.no_grad():
        out = gen(x)
    y_hat = out.y_hat.numpy().transpose(0, 2, 3, 1).astype(np.float64)
    m_hat = out.m_hat.numpy().astype(np.float64)
    if composite:
        for i in range(len(y_hat)):
            region = dilate(m_hat[i, 0] > 0.5, radius)
            y_hat[i] = np.where(region[..., None], y_hat[i], batch[i])
    return (y_hat[0], m_hat[0]) if single else (y_hat, m_hat)
