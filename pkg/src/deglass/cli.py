"""Command-line entry point.

Every subcommand resolves its options as built-in defaults, then a JSON
``--config`` file, then explicit flags, and writes the result to
``effective_config.json`` in its output directory. Feeding that file back via
``--config`` reproduces the run.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import evalkit
from .losses import LossWeights
from .synthkit import (
    FacePose,
    SynthesisConfig,
    emit_dataset,
    extract_glasses_template,
    load_faces,
    load_manifest,
    load_pool,
    procedural_glasses_pool,
    procedural_toy_faces,
    save_faces,
    save_template,
)
from .synthkit.dataset import load_rgb, save_gray_mask, save_mask2, save_rgb
from .trainer import TrainConfig, fit, load_checkpoint, remove_glasses

log = logging.getLogger("deglass")

OUTPUT_ROOT_ENV = "DEGLASS_OUTPUT_ROOT"
EFFECTIVE_CONFIG = "effective_config.json"


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# -- option resolution ----------------------------------------------------------

TOY_DEFAULTS = {"n": 16, "seed": 0, "size": 64, "images_per_identity": 1, "pool_per_pose": 4, "frame_alpha": None}
SYNTH_DEFAULTS = {"faces": None, "pool": None, **SynthesisConfig().to_dict(), "image_size": None}
TRAIN_DEFAULTS = {"data": None, "resume": None, **TrainConfig().to_dict()}
REMOVE_DEFAULTS = {"checkpoint": None, "input": None, "composite": False, "radius": 2}
FID_DEFAULTS = {"real": None, "fake": None, "embedder": "random", "checkpoint": None, "dim": 64, "seed": 0}
RECOG_DEFAULTS = {"data": None, "checkpoint": None, "protocol": "all", "embedder": "ie", "seed": 0, "dim": 64}
EXTRACT_DEFAULTS = {"checkpoint": None, "input": None, "threshold": 0.1, "pose": FacePose.FRONTAL.value}


def default_out(command: str) -> Path:
    root = os.environ.get(OUTPUT_ROOT_ENV)
    return Path(root if root else "deglass_runs") / command


def resolve(args: argparse.Namespace, defaults: dict) -> dict:
    opts = dict(defaults)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file {path} does not exist")
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from exc
        loaded.pop("command", None)
        loaded.pop("out", None)
        unknown = set(loaded) - set(defaults)
        if unknown:
            raise UsageError(f"unknown keys in {path}: {sorted(unknown)}")
        opts.update(loaded)
    for key, value in vars(args).items():
        if key in defaults:
            opts[key] = value
    if "loss_weight" in vars(args):
        weights = dict(opts["loss_weights"])
        for item in args.loss_weight:
            name, _, value = item.partition("=")
            if name not in weights or not value:
                raise UsageError(f"--loss-weight expects NAME=VALUE with NAME in {sorted(weights)}")
            weights[name] = float(value)
        opts["loss_weights"] = weights
    return opts


def write_effective(out: Path, command: str, opts: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, **opts}
    (out / EFFECTIVE_CONFIG).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def require(opts: dict, *keys: str) -> None:
    missing = [k for k in keys if opts.get(k) in (None, "")]
    if missing:
        raise UsageError("missing required option(s): " + ", ".join("--" + k.replace("_", "-") for k in missing))


def existing(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {p} does not exist")
    return p


def image_paths(path) -> list[Path]:
    p = existing(path, "input")
    paths = sorted(p.glob("*.png")) if p.is_dir() else [p]
    if not paths:
        raise UsageError(f"no PNG images under {p}")
    return paths


def load_images(paths) -> np.ndarray:
    imgs = [load_rgb(p) * 2.0 - 1.0 for p in paths]
    if len({im.shape for im in imgs}) != 1:
        raise UsageError("input images differ in size")
    return np.stack(imgs)


# -- subcommands ----------------------------------------------------------------


def cmd_toy_faces(opts: dict, out: Path) -> dict:
    if opts["n"] < 1:
        raise UsageError("--n must be >= 1")
    faces = procedural_toy_faces(opts["n"], opts["seed"], opts["size"], opts["images_per_identity"])
    save_faces(faces, out / "faces")
    pool = procedural_glasses_pool(opts["pool_per_pose"], opts["seed"], opts["size"], opts["frame_alpha"])
    for template in pool:
        save_template(template, out / "pool")
    return {"faces": len(faces), "templates": len(pool)}


def cmd_synth_data(opts: dict, out: Path) -> dict:
    require(opts, "faces", "pool")
    faces = load_faces(existing(opts["faces"], "faces directory"))
    pool = load_pool(existing(opts["pool"], "pool directory"))
    if not pool:
        raise UsageError(f"no templates under {opts['pool']}")
    if opts["image_size"] is None:
        opts["image_size"] = int(faces[0].image.shape[0])
    cfg = SynthesisConfig(**{f.name: opts[f.name] for f in fields(SynthesisConfig)})
    manifest = emit_dataset(faces, pool, None, cfg, out)
    return {"records": len(manifest.records)}


def cmd_train(opts: dict, out: Path) -> dict:
    require(opts, "data")
    manifest = load_manifest(existing(opts["data"], "dataset"))
    cfg = TrainConfig.from_dict({f.name: opts[f.name] for f in fields(TrainConfig)})
    resume = load_checkpoint(existing(opts["resume"], "checkpoint"), expect=cfg) if opts["resume"] else None
    if resume is not None:
        resume.config = cfg
    written = fit(cfg, manifest, out, resume=resume)
    return {"checkpoints": [str(p) for p in written]}


def cmd_remove(opts: dict, out: Path) -> dict:
    require(opts, "checkpoint", "input")
    state = load_checkpoint(existing(opts["checkpoint"], "checkpoint"))
    paths = image_paths(opts["input"])
    y_hat, m_hat = remove_glasses(state, load_images(paths), opts["composite"], opts["radius"])
    (out / "y_hat").mkdir(parents=True, exist_ok=True)
    (out / "m_hat").mkdir(parents=True, exist_ok=True)
    for p, y, m in zip(paths, y_hat, m_hat):
        save_rgb(out / "y_hat" / p.name, (y + 1.0) / 2.0)
        if m.shape[0] == 2:
            save_mask2(out / "m_hat" / p.name, m > 0.5)
        else:
            save_gray_mask(out / "m_hat" / p.name, m[0] > 0.5)
    return {"images": len(paths)}


def _embedder(opts: dict, shape):
    if opts["embedder"] == "random":
        return evalkit.RandomProjectionEmbedder(shape, opts["dim"], opts["seed"])
    if opts["embedder"] == "ie":
        require(opts, "checkpoint")
        return evalkit.TorchEmbedder(load_checkpoint(existing(opts["checkpoint"], "checkpoint")).ie)
    raise UsageError("--embedder must be 'random' or 'ie'")


def cmd_eval_fid(opts: dict, out: Path) -> dict:
    require(opts, "real", "fake")
    real = load_images(image_paths(opts["real"]))
    fake = load_images(image_paths(opts["fake"]))
    if real.shape[1:] != fake.shape[1:]:
        raise UsageError("real and fake images differ in size")
    embed = _embedder(opts, real.shape[1:])
    a = evalkit.gaussian_stats(evalkit.embed_images(real, embed))
    b = evalkit.gaussian_stats(evalkit.embed_images(fake, embed))
    value = evalkit.fid(a, b)
    report = {"fid": value, "real": a.to_dict(), "fake": b.to_dict()}
    (out / "fid.json").write_text(json.dumps(report, sort_keys=True) + "\n", encoding="utf-8")
    return {"fid": value}


def cmd_eval_recog(opts: dict, out: Path) -> dict:
    require(opts, "data")
    manifest = load_manifest(existing(opts["data"], "dataset"))
    root = Path(manifest.root)
    kinds = list(evalkit.PROTOCOLS) if opts["protocol"] == "all" else [opts["protocol"]]
    for kind in kinds:
        if kind not in evalkit.PROTOCOLS:
            raise UsageError(f"unknown protocol {kind!r}; choose from {sorted(evalkit.PROTOCOLS)} or 'all'")
    state = load_checkpoint(existing(opts["checkpoint"], "checkpoint")) if opts["checkpoint"] else None
    if state is None and any(evalkit.PROTOCOLS[k][0] != "none" for k in kinds):
        raise UsageError("protocols with glasses removal need --checkpoint")
    if not manifest.records:
        raise UsageError("dataset manifest is empty")
    size = load_rgb(root / manifest.records[0].y_path).shape
    embed = _embedder(opts, size)

    def load_image(entry):
        return load_rgb(root / entry.image_ref) * 2.0 - 1.0

    def remove(images, composite):
        return remove_glasses(state, images, composite)[0]

    runs = [evalkit.run_protocol(evalkit.build_protocol(manifest, k), load_image, embed, remove) for k in kinds]
    report = evalkit.recognition_report(runs)
    if state is not None:
        xs = np.stack([load_rgb(root / r.x_path) * 2.0 - 1.0 for r in manifest.records])
        ys = np.stack([load_rgb(root / r.y_path) * 2.0 - 1.0 for r in manifest.records])
        e_x = evalkit.embed_images(xs, embed)
        e_r = evalkit.embed_images(remove(xs, False), embed)
        e_y = evalkit.embed_images(ys, embed)
        improved, total = evalkit.cosine_improvement_count(zip(e_x, e_r, e_y))
        report["cosine_improvement"] = {"improved": improved, "total": total}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"protocols": kinds}


def cmd_extract_glasses(opts: dict, out: Path) -> dict:
    require(opts, "checkpoint", "input")
    try:
        pose = FacePose(opts["pose"])
    except ValueError as exc:
        raise UsageError(f"--pose must be one of {[p.value for p in FacePose]}") from exc
    state = load_checkpoint(existing(opts["checkpoint"], "checkpoint"))
    paths = image_paths(opts["input"])
    xs = load_images(paths)
    y_hat, m_hat = remove_glasses(state, xs)
    kept, empty = [], []
    for p, x, y, m in zip(paths, xs, y_hat, m_hat):
        template = extract_glasses_template(x, y, m[0], opts["threshold"], pose, template_id=f"extracted_{p.stem}")
        if template is None:
            empty.append(p.name)
            continue
        save_template(template, out / "pool")
        kept.append(template.template_id)
    summary = {"templates": kept, "empty": empty}
    (out / "extracted.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"templates": len(kept), "empty": len(empty)}


# -- parser ---------------------------------------------------------------------


def _bool(parser, name: str, help: str) -> None:
    parser.add_argument(f"--{name}", action=argparse.BooleanOptionalAction, help=help)


def _pair(kind):
    def parse(text: str):
        parts = text.split(",")
        if len(parts) != 2:
            raise argparse.ArgumentTypeError("expected LO,HI")
        return [kind(v) for v in parts]

    return parse


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="JSON file of options; explicit flags take precedence")
    common.add_argument("--out", help=f"output directory (default: ${OUTPUT_ROOT_ENV}/<command> or ./deglass_runs/<command>)")
    common.add_argument("--seed", type=int, help="seed for all randomness in this command")

    parser = _Parser(prog="deglass", description="Mask-guided eyeglasses removal toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, help):
        return sub.add_parser(name, parents=[common], help=help, argument_default=argparse.SUPPRESS)

    p = add("toy-faces", "render procedural faces and a procedural glasses pool")
    p.add_argument("--n", type=int, help="number of faces")
    p.add_argument("--size", type=int, help="image side in pixels")
    p.add_argument("--images-per-identity", type=int)
    p.add_argument("--pool-per-pose", type=int, help="templates per pose")
    p.add_argument("--frame-alpha", type=float, help="fixed frame opacity for every template")

    p = add("synth-data", "composite glasses onto faces and write paired data")
    p.add_argument("--faces", help="directory written by toy-faces (faces/)")
    p.add_argument("--pool", help="template pool directory")
    p.add_argument("--image-size", type=int)
    p.add_argument("--tint-alpha-range", type=_pair(float))
    p.add_argument("--tint-probability", type=float)
    p.add_argument("--refraction-strength-range", type=_pair(float))
    p.add_argument("--glare-probability", type=float)
    p.add_argument("--glare-count-range", type=_pair(int))
    p.add_argument("--glare-peak-alpha-range", type=_pair(float))
    p.add_argument("--r-dilate", type=int)
    p.add_argument("--pose-tolerance", type=float)

    p = add("train", "train the generator and discriminators on paired data")
    p.add_argument("--data", help="dataset directory containing manifest.jsonl")
    p.add_argument("--resume", help="checkpoint to continue from")
    for name in ("image_size", "depth", "base_channels", "disc_channels", "disc_layers", "batch_size", "steps",
                 "ie_pretrain_steps", "ie_batch_size", "checkpoint_every"):
        p.add_argument("--" + name.replace("_", "-"), type=int)
    for name in ("learning_rate", "adam_beta1", "adam_beta2", "sd_guidance_grad", "ie_learning_rate"):
        p.add_argument("--" + name.replace("_", "-"), type=float)
    _bool(p, "disable-sd-fd-skips", "drop the segmentation-to-face decoder skips")
    _bool(p, "glasses-mask-only", "predict only the glasses mask")
    _bool(p, "disable-id-loss", "zero the identity loss weight")
    p.add_argument("--id-loss", choices=("mse", "norm"))
    p.add_argument("--dtype", choices=("float32", "float64"))
    p.add_argument("--loss-weight", action="append", metavar="NAME=VALUE",
                   help=f"override one loss weight ({', '.join(f.name for f in fields(LossWeights))})")

    p = add("remove", "remove glasses from aligned images")
    p.add_argument("--checkpoint")
    p.add_argument("--input", help="PNG file or directory of PNGs")
    _bool(p, "composite", "keep the input outside the dilated predicted glasses mask")
    p.add_argument("--radius", type=int, help="dilation radius for --composite")

    p = add("eval-fid", "Frechet distance between two image sets")
    p.add_argument("--real")
    p.add_argument("--fake")
    p.add_argument("--embedder", choices=("random", "ie"))
    p.add_argument("--checkpoint", help="checkpoint providing the identity embedder")
    p.add_argument("--dim", type=int, help="random-projection embedding size")

    p = add("eval-recog", "face-recognition protocols with and without glasses removal")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--protocol", help=f"one of {', '.join(evalkit.PROTOCOLS)} or 'all'")
    p.add_argument("--embedder", choices=("random", "ie"))
    p.add_argument("--dim", type=int)

    p = add("extract-glasses", "harvest glasses templates from images via removal")
    p.add_argument("--checkpoint")
    p.add_argument("--input", help="PNG file or directory of aligned images with glasses")
    p.add_argument("--threshold", type=float)
    p.add_argument("--pose", choices=[pose.value for pose in FacePose])
    return parser


COMMANDS = {
    "toy-faces": (cmd_toy_faces, TOY_DEFAULTS),
    "synth-data": (cmd_synth_data, SYNTH_DEFAULTS),
    "train": (cmd_train, TRAIN_DEFAULTS),
    "remove": (cmd_remove, REMOVE_DEFAULTS),
    "eval-fid": (cmd_eval_fid, FID_DEFAULTS),
    "eval-recog": (cmd_eval_recog, RECOG_DEFAULTS),
    "extract-glasses": (cmd_extract_glasses, EXTRACT_DEFAULTS),
}

SEED_KEY = {"synth-data": "rng_seed"}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func, defaults = COMMANDS[args.command]
    seed_key = SEED_KEY.get(args.command, "seed")
    if "seed" in vars(args) and seed_key != "seed":
        setattr(args, seed_key, args.seed)
        del args.seed
    out = Path(getattr(args, "out", None) or default_out(args.command))
    try:
        opts = resolve(args, defaults)
        out.mkdir(parents=True, exist_ok=True)
        result = func(opts, out)
        write_effective(out, args.command, opts)
    except ValueError as exc:  # includes UsageError, CheckpointError, SynthesisError
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    print(json.dumps({"command": args.command, "out": str(out), **result}, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
