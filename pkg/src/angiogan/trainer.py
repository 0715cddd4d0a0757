"""Phased adversarial training loop, freezing, checkpoints and loss curves."""
from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from . import tensor as T
from .checkpoint import load_archive, load_module_arrays, module_arrays, save_archive
from .data import ImagePair, to_batch
from .discriminators import BANK_ORDER, DiscriminatorBank, bank_forward
from .generators import GeneratorConfig, GeneratorPair, generate
from .losses import (LossWeights, PerceptualExtractor, adv_total, feature_matching_loss, hinge_d_loss,
                     hinge_g_loss, perceptual_loss, reconstruction_loss)
from .nn import Module
from .optim import Adam
from .resize import lanczos_resize
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

CURVE_COLUMNS = ("step", "epoch", "L_adv_D", "L_adv_G", "L_rec", "L_perc", "L_fm", "total")
GEN_NAMES = ("g_f", "g_c")


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainerConfig:
    max_epoch: int = 200
    batch_size: int = 2
    max_d_iter: int = 1
    lambda_adv: float = 10.0
    lambda_rec: float = 10.0
    lambda_perc: float = 10.0
    lambda_fm: float = 1.0
    lr_g: float = 0.0002
    beta1_g: float = 0.5
    beta2_g: float = 0.999
    lr_d: float = 0.0002
    beta1_d: float = 0.5
    beta2_d: float = 0.999
    scale: int = 64
    base_channels: int = 8
    n_coarse: int = 6
    n_fine: int = 3
    feat_channels: int = 64
    seed: int = 0
    checkpoint_every: int = 0
    max_steps: int = 0
    fm_updates_discriminators: bool = False
    debug: bool = False

    def __post_init__(self):
        for name in ("max_epoch", "batch_size", "max_d_iter", "scale", "base_channels", "feat_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("n_coarse", "n_fine", "checkpoint_every", "max_steps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.scale % 16 or self.scale < 64:
            # the pooled coarse discriminator sees S/4 and needs three halvings above 1x1
            raise ValueError(f"scale must be a multiple of 16 and at least 64, got {self.scale}")
        self.weights  # validates the lambdas

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_adv, self.lambda_rec, self.lambda_perc, self.lambda_fm)

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(self.scale, self.base_channels, self.n_coarse, self.n_fine,
                               self.feat_channels, self.seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainerConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class Networks:
    gen: GeneratorPair
    disc: DiscriminatorBank
    extractor: PerceptualExtractor

    @classmethod
    def build(cls, cfg: TrainerConfig, extractor: Optional[PerceptualExtractor] = None) -> "Networks":
        return cls(GeneratorPair(cfg.generator_config()), DiscriminatorBank(cfg.base_channels, cfg.seed),
                   extractor or PerceptualExtractor())

    def named_networks(self) -> dict[str, Module]:
        nets = {"g_f": self.gen.fine, "g_c": self.gen.coarse}
        nets.update({name: d for name, d in self.disc.members()})
        return nets


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    opt: dict = field(default_factory=dict)
    frozen: dict = field(default_factory=dict)
    history: list = field(default_factory=list)

    @classmethod
    def fresh(cls, nets: Networks, cfg: TrainerConfig) -> "TrainState":
        opt = {}
        for name, net in nets.named_networks().items():
            if name in GEN_NAMES:
                opt[name] = Adam(net.parameters(), cfg.lr_g, cfg.beta1_g, cfg.beta2_g)
            else:
                opt[name] = Adam(net.parameters(), cfg.lr_d, cfg.beta1_d, cfg.beta2_d)
        return cls(opt=opt, frozen={name: False for name in opt})


@dataclass
class StepReport:
    losses: dict
    trace: list


# ---------------------------------------------------------------- freezing

def freeze(nets: Networks, state: TrainState, names: Iterable[str]) -> None:
    """Frozen networks are skipped by the optimizer; gradients still flow through them."""
    table = nets.named_networks()
    for name in names:
        table[name].set_frozen(True)
        state.frozen[name] = True


def unfreeze(nets: Networks, state: TrainState, names: Iterable[str]) -> None:
    table = nets.named_networks()
    for name in names:
        table[name].set_frozen(False)
        state.frozen[name] = False


def update(nets: Networks, state: TrainState, names: Iterable[str]) -> None:
    for name in names:
        if not state.frozen.get(name, False):
            state.opt[name].step()


def parameter_hash(module: Module) -> str:
    h = hashlib.sha256()
    for name, p in module.named_parameters():
        h.update(name.encode())
        h.update(p.data.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- objectives

@dataclass
class Batch:
    x_f: Tensor
    y_f: Tensor
    x_c: Tensor
    y_c: Tensor

    @classmethod
    def from_pairs(cls, pairs: Sequence[ImagePair]) -> "Batch":
        if not pairs:
            raise ValueError("empty batch")
        x_f, y_f = to_batch(pairs)
        return cls(x_f, y_f, lanczos_resize(x_f, 0.5), lanczos_resize(y_f, 0.5))


def _scores(outs):
    return [o.score_map for o in outs]


def discriminator_objective(nets: Networks, b: Batch, fake_f: Tensor, fake_c: Tensor) -> Tensor:
    real = bank_forward(nets.disc, b.x_f, b.y_f, b.x_c, b.y_c)
    fake = bank_forward(nets.disc, b.x_f, fake_f.detach(), b.x_c, fake_c.detach())
    return hinge_d_loss(_scores(real), _scores(fake))


def generator_objective(nets: Networks, b: Batch, w: LossWeights):
    """lambda_rec*L_rec + lambda_perc*L_perc + lambda_adv*L_adv(G), summed over both generators."""
    fake_f, fake_c = generate(nets.gen, b.x_f, b.x_c)
    rec = reconstruction_loss(fake_f, b.y_f) + reconstruction_loss(fake_c, b.y_c)
    perc = perceptual_loss(fake_f, b.y_f, nets.extractor) + perceptual_loss(fake_c, b.y_c, nets.extractor)
    adv_g = hinge_g_loss(_scores(bank_forward(nets.disc, b.x_f, fake_f, b.x_c, fake_c)))
    total = rec * w.lambda_rec + perc * w.lambda_perc + adv_g * w.lambda_adv
    return total, {"rec": rec, "perc": perc, "adv_g": adv_g}


def joint_objective(nets: Networks, b: Batch, fake_f: Tensor, fake_c: Tensor, real, fake, adv_g: Tensor,
                    w: LossWeights) -> Tensor:
    """Every generator-side term together: adversarial, reconstruction, feature matching, perceptual."""
    obj = adv_g * w.lambda_adv
    if w.lambda_rec:
        obj = obj + (reconstruction_loss(fake_f, b.y_f) + reconstruction_loss(fake_c, b.y_c)) * w.lambda_rec
    if w.lambda_fm:
        obj = obj + feature_matching_loss(real, fake) * w.lambda_fm
    if w.lambda_perc:
        perc = perceptual_loss(fake_f, b.y_f, nets.extractor) + perceptual_loss(fake_c, b.y_c, nets.extractor)
        obj = obj + perc * w.lambda_perc
    return obj


def _check(value: Tensor, phase: str) -> float:
    v = value.item()
    if not math.isfinite(v):
        raise TrainingDivergedError(f"non-finite loss ({v}) in phase {phase}")
    return v


def train_step(batch: Sequence[ImagePair] | Batch, state: TrainState, nets: Networks,
               cfg: TrainerConfig) -> StepReport:
    """One pass of the four phases: D updates, frozen-D generator update, FM update, joint update."""
    b = batch if isinstance(batch, Batch) else Batch.from_pairs(batch)
    w = cfg.weights
    trace: list[str] = []
    d_names = list(BANK_ORDER)
    gens = list(GEN_NAMES)
    prev_debug = T.debug_enabled()
    T.set_debug(cfg.debug or prev_debug)
    try:
        # phase 1: discriminators on real and detached fake pairs
        loss_d = None
        for _ in range(cfg.max_d_iter):
            fake_f, fake_c = generate(nets.gen, b.x_f, b.x_c)
            with Tape() as tape:
                loss_d = discriminator_objective(nets, b, fake_f, fake_c)
            _check(loss_d, "d_update")
            nets.disc.zero_grad()
            tape.backward(loss_d)
            update(nets, state, d_names)
            trace.append("d_update")

        # phase 2: generators with discriminators frozen
        freeze(nets, state, d_names)
        trace.append("freeze_d")
        with Tape() as tape:
            g_total, parts = generator_objective(nets, b, w)
        _check(g_total, "g_update")
        nets.gen.zero_grad()
        tape.backward(g_total)
        update(nets, state, gens)
        trace.append("g_update")
        rec, perc = parts["rec"].item(), parts["perc"].item()

        # phase 3: feature matching
        unfreeze(nets, state, d_names)
        trace.append("unfreeze_d")
        if cfg.fm_updates_discriminators:
            fake_f, fake_c = generate(nets.gen, b.x_f, b.x_c)
            with Tape() as tape:
                real = bank_forward(nets.disc, b.x_f, b.y_f, b.x_c, b.y_c)
                fake = bank_forward(nets.disc, b.x_f, fake_f.detach(), b.x_c, fake_c.detach())
                fm = feature_matching_loss(real, fake, detach_real=False)
                fm_obj = fm * w.lambda_fm
            _check(fm, "fm_update")
            nets.disc.zero_grad()
            tape.backward(fm_obj)
            update(nets, state, d_names)
        else:
            # discriminator weights held fixed: gradient goes to the generators only
            freeze(nets, state, d_names)
            real = bank_forward(nets.disc, b.x_f, b.y_f, b.x_c, b.y_c)
            with Tape() as tape:
                fake_f, fake_c = generate(nets.gen, b.x_f, b.x_c)
                fake = bank_forward(nets.disc, b.x_f, fake_f, b.x_c, fake_c)
                fm = feature_matching_loss(real, fake)
                fm_obj = fm * w.lambda_fm
            _check(fm, "fm_update")
            nets.gen.zero_grad()
            tape.backward(fm_obj)
            update(nets, state, gens)
            unfreeze(nets, state, d_names)
        trace.append("fm_update")
        fm_value = fm.item()

        # phase 4: joint fine-tune of the generators on all terms, discriminators frozen
        freeze(nets, state, d_names)
        trace.append("freeze_d")
        real = bank_forward(nets.disc, b.x_f, b.y_f, b.x_c, b.y_c)
        with Tape() as tape:
            fake_f, fake_c = generate(nets.gen, b.x_f, b.x_c)
            fake = bank_forward(nets.disc, b.x_f, fake_f, b.x_c, fake_c)
            adv_g = hinge_g_loss(_scores(fake))
            g_obj = joint_objective(nets, b, fake_f, fake_c, real, fake, adv_g, w)
        _check(g_obj, "joint_update")
        nets.gen.zero_grad()
        tape.backward(g_obj)
        update(nets, state, gens)
        trace.append("joint_update")
        unfreeze(nets, state, d_names)
        trace.append("unfreeze_d")
        adv_d_joint = hinge_d_loss(_scores(real), [s.detach() for s in _scores(fake)])
    finally:
        T.set_debug(prev_debug)

    l_d, l_g = loss_d.item(), adv_g.item()
    adv = adv_total(l_d, l_g, w).item()
    total = adv + w.lambda_rec * rec + w.lambda_fm * fm_value + w.lambda_perc * perc
    losses = {"L_adv_D": l_d, "L_adv_G": l_g, "L_rec": rec, "L_perc": perc, "L_fm": fm_value,
              "L_adv_D_joint": adv_d_joint.item(), "total": total}
    state.step += 1
    return StepReport(losses, trace)


# ---------------------------------------------------------------- checkpoints

def save_checkpoint(path, nets: Networks, state: TrainState, cfg: TrainerConfig) -> Path:
    arrays = {}
    arrays.update(module_arrays(nets.gen.coarse, "generator.coarse"))
    arrays.update(module_arrays(nets.gen.fine, "generator.fine"))
    for name, d in nets.disc.members():
        arrays.update(module_arrays(d, f"discriminator.{name}"))
    steps = {}
    for name, opt in state.opt.items():
        pnames = [n for n, _ in nets.named_networks()[name].named_parameters()]
        for pname, m, v in zip(pnames, opt.state.m, opt.state.v):
            arrays[f"optim.{name}.m.{pname}"] = m
            arrays[f"optim.{name}.v.{pname}"] = v
        steps[name] = opt.state.t
    arrays.update({f"perceptual.{k}": v for k, v in nets.extractor.to_arrays().items()})
    manifest = {
        "format": "angiogan-checkpoint/1",
        "scale": cfg.scale,
        "channels": {"base": cfg.base_channels, "feat": cfg.feat_channels},
        "blocks": {"n_coarse": cfg.n_coarse, "n_fine": cfg.n_fine},
        "seed": cfg.seed,
        "step": state.step,
        "epoch": state.epoch,
        "optimizer_steps": steps,
        "config": cfg.to_dict(),
        "history": state.history,
    }
    return save_archive(path, arrays, manifest)


def save_snapshot(path, nets: Networks, cfg: TrainerConfig, step: int) -> Path:
    """Generator-only archive, enough for inference."""
    arrays = {}
    arrays.update(module_arrays(nets.gen.coarse, "generator.coarse"))
    arrays.update(module_arrays(nets.gen.fine, "generator.fine"))
    manifest = {"format": "angiogan-snapshot/1", "scale": cfg.scale, "step": step, "config": cfg.to_dict(),
                "channels": {"base": cfg.base_channels, "feat": cfg.feat_channels},
                "blocks": {"n_coarse": cfg.n_coarse, "n_fine": cfg.n_fine}, "seed": cfg.seed}
    return save_archive(path, arrays, manifest)


def load_generators(path) -> tuple[GeneratorPair, TrainerConfig]:
    arrays, manifest = load_archive(path)
    cfg = TrainerConfig.from_dict(manifest.get("config", {}))
    gen = GeneratorPair(cfg.generator_config())
    load_module_arrays(gen.coarse, arrays, "generator.coarse")
    load_module_arrays(gen.fine, arrays, "generator.fine")
    return gen, cfg


def load_checkpoint(path) -> tuple[Networks, TrainState, TrainerConfig]:
    arrays, manifest = load_archive(path)
    if "config" not in manifest or "step" not in manifest:
        raise ValueError(f"{path} is not a training checkpoint")
    cfg = TrainerConfig.from_dict(manifest["config"])
    perc = sorted(k for k in arrays if k.startswith("perceptual.stage"))
    extractor = PerceptualExtractor(weights=[arrays[f"perceptual.stage{i}.weight"] for i in range(len(perc))]) \
        if perc else None
    nets = Networks.build(cfg, extractor)
    load_module_arrays(nets.gen.coarse, arrays, "generator.coarse")
    load_module_arrays(nets.gen.fine, arrays, "generator.fine")
    for name, d in nets.disc.members():
        load_module_arrays(d, arrays, f"discriminator.{name}")
    state = TrainState.fresh(nets, cfg)
    for name, opt in state.opt.items():
        pnames = [n for n, _ in nets.named_networks()[name].named_parameters()]
        opt.state.m = [arrays[f"optim.{name}.m.{p}"].astype(np.float32) for p in pnames]
        opt.state.v = [arrays[f"optim.{name}.v.{p}"].astype(np.float32) for p in pnames]
        opt.state.t = int(manifest["optimizer_steps"][name])
    state.step = int(manifest["step"])
    state.epoch = int(manifest["epoch"])
    state.history = list(manifest.get("history", []))
    return nets, state, cfg


# ---------------------------------------------------------------- outer loop

@dataclass
class TrainResult:
    nets: Networks
    state: TrainState
    cfg: TrainerConfig
    checkpoint: Optional[Path] = None
    curve: Optional[Path] = None


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, 7, epoch]).permutation(n)


def write_curve(path, rows: Sequence[dict]) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(CURVE_COLUMNS)
            for r in rows:
                wr.writerow([r["step"], r["epoch"]] + [repr(float(r[c])) for c in CURVE_COLUMNS[2:]])
    except OSError as exc:
        raise OSError(f"cannot write loss curve {path}: {exc}") from exc
    return path


def read_curve(path) -> list[dict]:
    with Path(path).open() as fh:
        return [{k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def run_training(dataset: Sequence[ImagePair], cfg: TrainerConfig, out_dir=None, resume=None,
                 on_step: Optional[Callable[[int, StepReport], None]] = None) -> TrainResult:
    """Seeded-shuffle epochs of ``train_step``; drops incomplete final batches.

    ``max_steps`` (when nonzero) stops after that many total steps.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    for p in dataset:
        if p.size != (cfg.scale, cfg.scale):
            raise ValueError(f"pair {p.pair_id} is {p.size}, expected {cfg.scale}x{cfg.scale}")
    if len(dataset) < cfg.batch_size:
        raise ValueError(f"dataset of {len(dataset)} pairs is smaller than batch size {cfg.batch_size}")
    if resume is not None:
        nets, state, saved = load_checkpoint(resume)
        cfg = TrainerConfig.from_dict({**saved.to_dict(), "max_epoch": cfg.max_epoch, "max_steps": cfg.max_steps,
                                       "checkpoint_every": cfg.checkpoint_every})
    else:
        nets = Networks.build(cfg)
        state = TrainState.fresh(nets, cfg)
    out = Path(out_dir) if out_dir is not None else None
    per_epoch = len(dataset) // cfg.batch_size
    limit = cfg.max_epoch * per_epoch
    if cfg.max_steps:
        limit = min(limit, cfg.max_steps)
    nets.gen.train()
    nets.disc.train()
    while state.step < limit:
        epoch, pos = divmod(state.step, per_epoch)
        state.epoch = epoch
        order = epoch_order(len(dataset), cfg.seed, epoch)
        idx = order[pos * cfg.batch_size:(pos + 1) * cfg.batch_size]
        report = train_step([dataset[i] for i in idx], state, nets, cfg)
        row = {"step": state.step, "epoch": epoch, **{k: report.losses[k] for k in CURVE_COLUMNS[2:]}}
        state.history.append(row)
        if on_step is not None:
            on_step(state.step, report)
        log.debug("step %d epoch %d %s", state.step, epoch, report.losses)
        if out is not None:
            if state.step % per_epoch == 0 or state.step == limit:
                save_snapshot(out / "snapshot.ckpt", nets, cfg, state.step)
            if cfg.checkpoint_every and state.step % cfg.checkpoint_every == 0:
                save_checkpoint(out / f"checkpoint_{state.step:06d}.ckpt", nets, state, cfg)
    result = TrainResult(nets, state, cfg)
    if out is not None:
        result.checkpoint = save_checkpoint(out / "final.ckpt", nets, state, cfg)
        result.curve = write_curve(out / "loss_curve.csv", state.history)
    return result
