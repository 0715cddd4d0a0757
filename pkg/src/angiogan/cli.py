"""Command-line entry point: synth, train, generate, evaluate, distort.

Every setting has one row in ``DEFAULTS``; ``--help`` output, config-file
validation and the resolved configuration all come from that table.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np

from . import __version__
from .data import (DEFAULT_STRENGTHS, DISTORTION_KINDS, DatasetManifest, DistortionSpec, ManifestRecord,
                   default_distortions, distort, evaluation_set, load_image, read_manifest, save_image,
                   synth_pair, training_set, write_manifest)

log = logging.getLogger("angiogan")


def parse_bool(text) -> bool:
    if isinstance(text, bool):
        return text
    v = str(text).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass(frozen=True)
class Setting:
    default: Any
    type: Callable
    help: str
    commands: tuple[str, ...]


_TRAIN = ("train",)
DEFAULTS: dict[str, Setting] = {
    "seed": Setting(0, int, "random seed", ("synth", "train", "distort")),
    "count": Setting(20, int, "number of synthetic pairs", ("synth",)),
    "test_count": Setting(4, int, "how many of the synthetic pairs are tagged test", ("synth",)),
    "size": Setting(64, int, "synthetic image side length", ("synth",)),
    "out_dir": Setting("out", str, "output directory", ("synth", "train", "generate", "evaluate", "distort")),
    "manifest": Setting("", str, "dataset manifest path", ("train", "evaluate")),
    "scale": Setting(64, int, "fine-generator input size S", _TRAIN),
    "base_channels": Setting(8, int, "base channel width", _TRAIN),
    "n_coarse": Setting(6, int, "residual blocks in the coarse generator", _TRAIN),
    "n_fine": Setting(3, int, "residual blocks in the fine generator", _TRAIN),
    "feat_channels": Setting(64, int, "coarse feature channels passed to the fine generator", _TRAIN),
    "lambda_adv": Setting(10.0, float, "adversarial loss weight", _TRAIN),
    "lambda_rec": Setting(10.0, float, "reconstruction loss weight", _TRAIN),
    "lambda_perc": Setting(10.0, float, "perceptual loss weight", _TRAIN),
    "lambda_fm": Setting(1.0, float, "feature-matching loss weight", _TRAIN),
    "lr_g": Setting(0.0002, float, "generator Adam learning rate", _TRAIN),
    "beta1_g": Setting(0.5, float, "generator Adam beta1", _TRAIN),
    "beta2_g": Setting(0.999, float, "generator Adam beta2", _TRAIN),
    "lr_d": Setting(0.0002, float, "discriminator Adam learning rate", _TRAIN),
    "beta1_d": Setting(0.5, float, "discriminator Adam beta1", _TRAIN),
    "beta2_d": Setting(0.999, float, "discriminator Adam beta2", _TRAIN),
    "epochs": Setting(200, int, "number of epochs", _TRAIN),
    "batch_size": Setting(2, int, "batch size", _TRAIN),
    "max_d_iter": Setting(1, int, "discriminator updates per step", _TRAIN),
    "max_steps": Setting(0, int, "stop after this many steps (0 = no limit)", _TRAIN),
    "checkpoint_every": Setting(0, int, "full checkpoint cadence in steps (0 = final only)", _TRAIN),
    "fm_updates_discriminators": Setting(False, parse_bool, "apply the feature-matching update to the "
                                         "discriminators instead of the generators", _TRAIN),
    "resume": Setting("", str, "checkpoint to resume from, or 'last' for the newest in out_dir", _TRAIN),
    "log_every": Setting(10, int, "print losses every N steps (0 = quiet)", _TRAIN),
    "checkpoint": Setting("", str, "trained checkpoint or snapshot archive", ("generate", "evaluate")),
    "real": Setting("", str, "comma-separated real angiograms for side-by-side panels", ("generate",)),
    "panels": Setting(False, parse_bool, "also write fundus|real|predicted panels", ("generate",)),
    "distortions": Setting("default", str, "'default', 'none', or kind[:strength],...", ("evaluate",)),
    "quadrant_crop": Setting(0, int, "evaluate on four corner crops of this size (0 = whole images)",
                             ("evaluate",)),
    "kid_subsets": Setting(0, int, "average KID over this many random subsets (0 = full sets)", ("evaluate",)),
    "model_name": Setting("model", str, "row label in the score table", ("evaluate",)),
    "kind": Setting("noise", str, f"distortion kind: {', '.join(DISTORTION_KINDS)}", ("distort",)),
    "strength": Setting(-1.0, float, "distortion strength (negative = evaluation default for the kind)",
                        ("distort",)),
}

EXIT_CODES = {"usage": 2, "io": 3, "value": 4, "diverged": 5, "internal": 70}


class CliError(Exception):
    def __init__(self, category: str, message: str):
        super().__init__(message)
        self.category = category


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # single-line usage errors instead of argparse's usage dump
        raise CliError("usage", f"{self.prog}: {message}")


def settings_for(command: str) -> dict[str, Setting]:
    return {k: s for k, s in DEFAULTS.items() if command in s.commands}


def read_config_file(path, command: str) -> dict[str, Any]:
    """Flat ``key = value`` lines; ``#`` starts a comment. Unknown keys are rejected."""
    allowed = settings_for(command)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError("io", f"cannot read config {path}: {exc}") from exc
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError("usage", f"{path}:{lineno}: expected key = value")
        key, value = (t.strip() for t in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in allowed:
            raise CliError("usage", f"{path}:{lineno}: unknown config key {key!r} for {command}")
        try:
            out[key] = allowed[key].type(value)
        except ValueError as exc:
            raise CliError("usage", f"{path}:{lineno}: bad value for {key}: {exc}") from exc
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="angiogan", description="Fundus-to-angiogram GAN pipeline at desk scale.")
    parser.add_argument("--version", action="version", version=f"angiogan {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    descriptions = {
        "synth": "write synthetic fundus/angiogram pairs and a manifest",
        "train": "train the generators and discriminators",
        "generate": "predict angiograms for fundus images",
        "evaluate": "FID/KID table over clean and distorted inputs",
        "distort": "apply one distortion to images",
    }
    for cmd, desc in descriptions.items():
        p = sub.add_parser(cmd, help=desc, description=desc,
                           formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        p.add_argument("--config", default=None, help="key = value settings file; flags override it")
        if cmd in ("generate", "distort"):
            p.add_argument("inputs", nargs="+", help="input images")
        for key, s in settings_for(cmd).items():
            flag = "--" + key.replace("_", "-")
            if s.type is parse_bool:
                p.add_argument(flag, dest=key, type=parse_bool, nargs="?", const=True,
                               default=argparse.SUPPRESS, help=f"{s.help} (default: {s.default})")
            else:
                p.add_argument(flag, dest=key, type=s.type, default=argparse.SUPPRESS,
                               help=f"{s.help} (default: {s.default})")
    return parser


def resolve(command: str, ns: argparse.Namespace) -> dict[str, Any]:
    cfg = {k: s.default for k, s in settings_for(command).items()}
    if getattr(ns, "config", None):
        cfg.update(read_config_file(ns.config, command))
    for key in settings_for(command):
        if hasattr(ns, key):
            cfg[key] = getattr(ns, key)
    cfg["inputs"] = getattr(ns, "inputs", [])
    return cfg


def _echo(cfg: dict, keys: Sequence[str]) -> None:
    print(" ".join(f"{k}={cfg[k]}" for k in keys))


# ---------------------------------------------------------------- commands

def cmd_synth(cfg: dict) -> int:
    count, test_count = cfg["count"], cfg["test_count"]
    if count < 1 or not 0 <= test_count <= count:
        raise CliError("usage", f"need count >= 1 and 0 <= test_count <= count, got {count}, {test_count}")
    out = Path(cfg["out_dir"])
    records = []
    for i in range(count):
        pair = synth_pair([cfg["seed"], i], cfg["size"])
        f = out / "fundus" / f"pair_{i:03d}.png"
        a = out / "angio" / f"pair_{i:03d}.png"
        save_image(f, pair.fundus)
        save_image(a, pair.angio)
        records.append(ManifestRecord(f, a, "test" if i >= count - test_count else "train"))
    path = out / "manifest.tsv"
    write_manifest(path, DatasetManifest(records))
    print(f"wrote {count} pairs ({count - test_count} train, {test_count} test) and {path}")
    return 0


def _trainer_config(cfg: dict):
    from .trainer import TrainerConfig
    return TrainerConfig(
        max_epoch=cfg["epochs"], batch_size=cfg["batch_size"], max_d_iter=cfg["max_d_iter"],
        lambda_adv=cfg["lambda_adv"], lambda_rec=cfg["lambda_rec"], lambda_perc=cfg["lambda_perc"],
        lambda_fm=cfg["lambda_fm"], lr_g=cfg["lr_g"], beta1_g=cfg["beta1_g"], beta2_g=cfg["beta2_g"],
        lr_d=cfg["lr_d"], beta1_d=cfg["beta1_d"], beta2_d=cfg["beta2_d"], scale=cfg["scale"],
        base_channels=cfg["base_channels"], n_coarse=cfg["n_coarse"], n_fine=cfg["n_fine"],
        feat_channels=cfg["feat_channels"], seed=cfg["seed"], checkpoint_every=cfg["checkpoint_every"],
        max_steps=cfg["max_steps"], fm_updates_discriminators=cfg["fm_updates_discriminators"])


def _latest_checkpoint(out: Path) -> Optional[Path]:
    found = sorted(out.glob("checkpoint_*.ckpt"))
    return found[-1] if found else None


def cmd_train(cfg: dict) -> int:
    from .trainer import run_training
    if not cfg["manifest"]:
        raise CliError("usage", "train needs --manifest")
    tcfg = _trainer_config(cfg)
    out = Path(cfg["out_dir"])
    resume = cfg["resume"] or None
    if resume == "last":
        resume = _latest_checkpoint(out)
        if resume is None:
            raise CliError("io", f"no checkpoint_*.ckpt to resume from in {out}")
    _echo({**cfg, "alpha": tcfg.lr_g}, ["alpha", "beta1_g", "beta2_g", "batch_size", "epochs", "scale",
                                         "lambda_adv", "lambda_rec", "lambda_perc", "lambda_fm", "seed"])
    data = training_set(read_manifest(cfg["manifest"]))
    every = cfg["log_every"]

    def on_step(step, report):
        if every and step % every == 0:
            print(f"step {step} " + " ".join(f"{k}={report.losses[k]:.5g}" for k in
                                              ("L_adv_D", "L_adv_G", "L_rec", "L_perc", "L_fm", "total")))

    result = run_training(data, tcfg, out_dir=out, resume=resume, on_step=on_step)
    print(f"trained {result.state.step} steps; checkpoint {result.checkpoint}; loss curve {result.curve}")
    return 0


def _load_generator(path: str):
    from .trainer import load_generators
    if not path:
        raise CliError("usage", "--checkpoint is required")
    return load_generators(path)


def _fit(img: np.ndarray, size: int, name: str) -> np.ndarray:
    from .resize import resize_to
    if img.shape[:2] == (size, size):
        return img
    log.warning("resizing %s from %dx%d to %dx%d", name, img.shape[0], img.shape[1], size, size)
    chw = img.astype(np.float32).transpose(2, 0, 1)
    return np.clip(np.rint(resize_to(chw, size, size)), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def cmd_generate(cfg: dict) -> int:
    from .metrics import predict_with
    gen, tcfg = _load_generator(cfg["checkpoint"])
    paths = [Path(p) for p in cfg["inputs"]]
    reals = [Path(p) for p in cfg["real"].split(",") if p] if cfg["real"] else []
    if reals and len(reals) != len(paths):
        raise CliError("usage", f"{len(reals)} real angiograms for {len(paths)} inputs")
    fundus = [_fit(load_image(p, "RGB"), tcfg.scale, str(p)) for p in paths]
    preds = predict_with(gen)(fundus)
    out = Path(cfg["out_dir"])
    for i, (p, f, a) in enumerate(zip(paths, fundus, preds)):
        save_image(out / f"{p.stem}_angio.png", a)
        if cfg["panels"]:
            tiles = [f]
            if reals:
                tiles.append(np.repeat(_fit(load_image(reals[i], "L"), tcfg.scale, str(reals[i])), 3, axis=2))
            tiles.append(np.repeat(a, 3, axis=2))
            save_image(out / f"{p.stem}_panel.png", np.concatenate(tiles, axis=1))
    print(f"wrote {len(preds)} angiograms to {out}")
    return 0


def parse_distortions(text: str, seed: int = 0) -> list[DistortionSpec]:
    text = text.strip()
    if text == "default":
        return default_distortions(seed)
    if text in ("none", ""):
        return []
    specs = []
    for tok in text.split(","):
        kind, _, strength = tok.strip().partition(":")
        if kind not in DISTORTION_KINDS:
            raise CliError("usage", f"unknown distortion kind {kind!r}; expected one of {DISTORTION_KINDS}")
        try:
            value = float(strength) if strength else DEFAULT_STRENGTHS[kind]
        except ValueError as exc:
            raise CliError("usage", f"bad strength in {tok!r}") from exc
        specs.append(DistortionSpec(kind, value, seed))
    kinds = [s.kind for s in specs]
    if len(set(kinds)) != len(kinds):
        raise CliError("usage", f"duplicate distortion kinds in {text!r}")
    return specs


def cmd_evaluate(cfg: dict) -> int:
    from .metrics import evaluate_protocol
    if not cfg["manifest"]:
        raise CliError("usage", "evaluate needs --manifest")
    gen, tcfg = _load_generator(cfg["checkpoint"])
    specs = parse_distortions(cfg["distortions"])
    pairs = evaluation_set(read_manifest(cfg["manifest"]), cfg["quadrant_crop"] or None)
    if not pairs:
        raise CliError("value", "the manifest has no test pairs")
    for p in pairs:
        if p.size != (tcfg.scale, tcfg.scale):
            raise CliError("value", f"test image {p.pair_id} is {p.size}, checkpoint expects "
                                    f"{tcfg.scale}x{tcfg.scale}; use --quadrant-crop")
    table = evaluate_protocol(gen, pairs, specs, model=cfg["model_name"], kid_subsets=cfg["kid_subsets"])
    out = Path(cfg["out_dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
        (out / "scores.tsv").write_text(table.to_dsv())
        (out / "scores.txt").write_text(table.to_text())
    except OSError as exc:
        raise CliError("io", f"cannot write score table in {out}: {exc}") from exc
    print(table.to_text(), end="")
    return 0


def cmd_distort(cfg: dict) -> int:
    kind = cfg["kind"]
    if kind not in DISTORTION_KINDS:
        raise CliError("usage", f"unknown distortion kind {kind!r}; expected one of {DISTORTION_KINDS}")
    strength = cfg["strength"] if cfg["strength"] >= 0 else DEFAULT_STRENGTHS[kind]
    spec = DistortionSpec(kind, strength, cfg["seed"])
    out = Path(cfg["out_dir"])
    for p in map(Path, cfg["inputs"]):
        with_mode = "L" if _is_gray(p) else "RGB"
        save_image(out / f"{p.stem}_{kind}.png", distort(load_image(p, with_mode), spec))
    print(f"wrote {len(cfg['inputs'])} {kind} images (strength {strength}) to {out}")
    return 0


def _is_gray(path: Path) -> bool:
    from PIL import Image
    try:
        with Image.open(path) as im:
            return im.mode in ("L", "I", "1", "I;16")
    except OSError as exc:
        raise OSError(f"cannot read image {path}: {exc}") from exc


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "generate": cmd_generate,
            "evaluate": cmd_evaluate, "distort": cmd_distort}


def main(argv: Optional[Sequence[str]] = None) -> int:
    from .trainer import TrainingDivergedError
    try:
        ns = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if ns.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = resolve(ns.command, ns)
        return COMMANDS[ns.command](cfg)
    except CliError as exc:
        category, message = exc.category, str(exc)
    except TrainingDivergedError as exc:
        category, message = "diverged", str(exc)
    except (FileNotFoundError, OSError) as exc:
        category, message = "io", str(exc)
    except (ValueError, KeyError) as exc:
        category, message = "value", str(exc)
    print(f"angiogan: error[{category}]: {' '.join(message.split())}", file=sys.stderr)
    return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
