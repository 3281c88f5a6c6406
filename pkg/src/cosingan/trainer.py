"""Coarse-to-fine, two-step training of the generator pyramid."""

from __future__ import annotations

import csv
import logging
import math
import re
import shutil
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import augment as aug
from .core import (DivergenceError, SamplePair, ScaleSchedule, StateError, build_scale_schedule,
                   encode_mask, save_grid_png, to_array, to_tensor)
from .losses import LossReport, ReconstructionLoss, adv_d_objective, adv_g_objective
from .nets import (CONCAT, DiscriminatorSpec, GeneratorSpec, TwoStageGenerator, UNetGenerator,
                   build_discriminator, freeze, generator_in_channels, load_checkpoint, save_checkpoint,
                   stage1_forward, stage2_forward, transfer_weights)

log = logging.getLogger(__name__)

SUPER, RESTORE = "super", "restore"
STAGES = (SUPER, RESTORE)
LOSS_COLUMNS = ("scale", "stage", "epoch", "wppl", "ms_ssim", "ms_fvl", "ms_ful", "mixed", "adv_g", "adv_d")


@dataclass(frozen=True)
class StageTrainConfig:
    epochs: int = 4000
    batch_size: int = 4
    lr_init: float = 2e-4
    lr_decay_start_epoch: int = 2000
    lr_decay_per_epoch_frac: float = 0.0005
    adam_beta1: float = 0.5
    adam_beta2: float = 0.999

    @classmethod
    def paper_super(cls):
        return cls(4000, 4, 2e-4, 2000, 0.0005)

    @classmethod
    def paper_restore(cls):
        return cls(2000, 4, 1e-4, 1000, 0.001)

    @classmethod
    def desk(cls, epochs=50, lr_init=2e-3, batch_size=4):
        # same shape as the paper: constant for half the run, then linear to zero
        half = epochs // 2
        return cls(epochs, batch_size, lr_init, half, 1.0 / max(epochs - half, 1))


def lr_schedule(cfg: StageTrainConfig, epoch: int) -> float:
    if epoch <= cfg.lr_decay_start_epoch:
        return cfg.lr_init
    return max(0.0, cfg.lr_init * (1.0 - cfg.lr_decay_per_epoch_frac * (epoch - cfg.lr_decay_start_epoch)))


@dataclass
class TrainerConfig:
    schedule: ScaleSchedule = field(default_factory=lambda: build_scale_schedule(32, 3, "desk"))
    super_cfg: StageTrainConfig = field(default_factory=StageTrainConfig.desk)
    restore_cfg: StageTrainConfig = field(default_factory=lambda: StageTrainConfig.desk(lr_init=1e-3))
    final_batch_size: int | None = None
    gen_base_width: int = 32
    disc_base_width: int = 32
    dropout_rate: float = 0.5
    combine: str = CONCAT
    sa_policy: aug.AugmentPolicy = field(default_factory=aug.AugmentPolicy.strong)
    wa_policy: aug.AugmentPolicy = field(default_factory=aug.AugmentPolicy.weak)
    seed: int = 0
    preview_every: int = 0

    @classmethod
    def paper(cls, **kw):
        return cls(schedule=build_scale_schedule(512, 9, "paper"), super_cfg=StageTrainConfig.paper_super(),
                   restore_cfg=StageTrainConfig.paper_restore(), final_batch_size=2, gen_base_width=64,
                   disc_base_width=64, **kw)

    def stage_cfg(self, stage, i):
        cfg = self.super_cfg if stage == SUPER else self.restore_cfg
        if self.final_batch_size is not None and i == len(self.schedule) - 1:
            cfg = StageTrainConfig(**{**asdict(cfg), "batch_size": self.final_batch_size})
        return cfg

    def generator_spec(self, i):
        return GeneratorSpec(self.schedule.gen_depths[i], generator_in_channels(i, self.combine),
                             self.gen_base_width, self.dropout_rate)

    def discriminator_spec(self, i):
        return DiscriminatorSpec(self.schedule.disc_depths[i], 2, self.disc_base_width)


class GeneratorStack:
    """Trained two-stage generators for scales ``0..len-1`` of a schedule."""

    def __init__(self, schedule: ScaleSchedule, combine: str = CONCAT):
        self.schedule = schedule
        self.combine = combine
        self.gens: list[TwoStageGenerator] = []

    def __len__(self):
        return len(self.gens)

    def __getitem__(self, i):
        return self.gens[i]

    @property
    def scale_count(self):
        return len(self.gens)

    @property
    def is_complete(self):
        return len(self.gens) == len(self.schedule) and all(g.g_restore is not None for g in self.gens)

    def freeze(self):
        for g in self.gens:
            freeze(g)
        return self

    @classmethod
    def load(cls, ckpt_dir, upto=None):
        """Rebuild from ``scale{i}_{stage}.bin`` archives (optionally only the first ``upto`` stages)."""
        ckpt_dir = Path(ckpt_dir)
        stack = None
        done = 0
        for i in range(10_000):
            sp = ckpt_dir / f"scale{i}_{SUPER}.bin"
            if not sp.exists() or (upto is not None and done >= upto):
                break
            g_super, man, _ = load_checkpoint(sp)
            if stack is None:
                stack = cls(ScaleSchedule.from_dict(man["schedule"]), man["combine"])
            two = TwoStageGenerator(g_super, i, man["combine"])
            done += 1
            rp = ckpt_dir / f"scale{i}_{RESTORE}.bin"
            if rp.exists() and (upto is None or done < upto):
                two.g_restore, _, _ = load_checkpoint(rp)
                done += 1
            stack.gens.append(two)
            if two.g_restore is None:
                break
        if stack is None:
            raise StateError(f"no checkpoints found in {ckpt_dir}")
        return stack.freeze()


def completed_stages(ckpt_dir):
    """Ordered (scale, stage) pairs with a checkpoint on disk."""
    done = []
    ckpt_dir = Path(ckpt_dir)
    i = 0
    while True:
        for st in STAGES:
            if not (ckpt_dir / f"scale{i}_{st}.bin").exists():
                return done
            done.append((i, st))
        i += 1


class LossLog:
    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not self.path.exists():
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(LOSS_COLUMNS)

    def append(self, scale, stage, epoch, rep: LossReport):
        row = [scale, stage, epoch] + [repr(float(getattr(rep, c))) for c in LOSS_COLUMNS[3:]]
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow(row)

    def rows(self):
        with open(self.path, newline="") as f:
            return list(csv.DictReader(f))

    def truncate_to(self, stages):
        """Keep only rows belonging to the given (scale, stage) pairs."""
        keep = {(int(s), st) for s, st in stages}
        rows = [r for r in self.rows() if (int(r["scale"]), r["stage"]) in keep]
        with open(self.path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(LOSS_COLUMNS)
            for r in rows:
                w.writerow([r[c] for c in LOSS_COLUMNS])


def stage_seed(seed, i, stage):
    ss = np.random.SeedSequence([int(seed), int(i), STAGES.index(stage)])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def set_lr(opt, lr):
    for g in opt.param_groups:
        g["lr"] = lr


def d_step(disc, opt_d, cond, fake, real):
    """One discriminator update; ``fake`` is detached inside the objective."""
    opt_d.zero_grad(set_to_none=True)
    loss = adv_d_objective(disc, cond, fake, real)
    loss.backward()
    opt_d.step()
    return loss


def g_step(gen_params, opt_g, disc, cond_enc, cond_labels, fake, real, recon: ReconstructionLoss):
    opt_g.zero_grad(set_to_none=True)
    adv = adv_g_objective(disc, cond_enc, fake)
    mixed, terms = recon(cond_labels, fake, real)
    (adv + mixed).backward()
    for p in disc.parameters():
        p.grad = None
    opt_g.step()
    return adv, mixed, terms


class Trainer:
    """Owns all mutable networks for one single-image run."""

    def __init__(self, cfg: TrainerConfig, sample: SamplePair, recon: ReconstructionLoss, out_dir=None):
        if sample.image.shape != tuple(cfg.schedule.final_scale):
            sample = sample.at_scale(cfg.schedule.final_scale)
        self.cfg = cfg
        self.sample = sample
        self.recon = recon
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.stack = GeneratorStack(cfg.schedule, cfg.combine)
        self.loss_log = LossLog(self.out_dir / "logs" / "losses.csv") if self.out_dir else None
        self.history: list[tuple] = []

    @property
    def ckpt_dir(self):
        return self.out_dir / "ckpt" if self.out_dir else None

    def _ckpt_path(self, i, stage, prefix=""):
        return self.ckpt_dir / f"{prefix}scale{i}_{stage}.bin"

    def _draws(self, policy, n, rng):
        shape = self.sample.image.shape
        return [aug.sample_draw(policy, shape, rng) for _ in range(n)]

    def _batch(self, i, stage, rng, batch_size):
        policy = aug.policy_for_scale(self.cfg.sa_policy if stage == SUPER else self.cfg.wa_policy,
                                      self.cfg.schedule, i)
        draws = self._draws(policy, batch_size, rng)
        prev, labels = aug.augmented_cascade_batch(self.stack, self.sample.mask, draws, self.cfg.schedule, i)
        real = to_tensor(aug.augmented_targets(self.sample.image, draws, self.cfg.schedule, i))
        return prev, labels[i], encode_mask(labels[i]), real

    def train_stage(self, i, stage):
        """Train one stage at scale ``i``; returns the stage generator."""
        cfg = self.cfg.stage_cfg(stage, i)
        if len(self.stack) < i or (i > 0 and self.stack[i - 1].g_restore is None):
            raise StateError(f"scales < {i} must be fully trained before scale {i}")
        seed = stage_seed(self.cfg.seed, i, stage)
        rng = np.random.default_rng(seed)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            if stage == SUPER:
                gen = UNetGenerator(self.cfg.generator_spec(i))
                if i > 0:
                    transfer_weights(self.stack[i - 1].g_restore, gen)
                two = TwoStageGenerator(gen, i, self.cfg.combine)
                if len(self.stack) == i:
                    self.stack.gens.append(two)
                else:
                    self.stack.gens[i] = two
            else:
                if len(self.stack) <= i:
                    raise StateError(f"stage {SUPER} at scale {i} must be trained first")
                two = self.stack[i]
                freeze(two.g_super)
                gen = two.init_restore()
            disc = build_discriminator(self.cfg.discriminator_spec(i))
            self._fit(i, stage, gen, disc, cfg, rng)
        freeze(gen)
        if self.ckpt_dir is not None:
            save_checkpoint(self._ckpt_path(i, stage), gen, i, stage, cfg.epochs, self.cfg.combine,
                            self.cfg.schedule.to_dict(), {"seed": self.cfg.seed})
        return gen

    def _fit(self, i, stage, gen, disc, cfg, rng):
        gen.train()
        disc.train()
        for p in gen.parameters():
            p.requires_grad_(True)
        betas = (cfg.adam_beta1, cfg.adam_beta2)
        opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.lr_init, betas=betas)
        opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr_init, betas=betas)
        g_super = self.stack[i].g_super
        for epoch in range(cfg.epochs):
            lr = lr_schedule(cfg, epoch)
            set_lr(opt_g, lr)
            set_lr(opt_d, lr)
            prev, labels, cond, real = self._batch(i, stage, rng, cfg.batch_size)
            if stage == SUPER:
                fake = stage1_forward(gen, prev, cond, self.cfg.combine)
            else:
                with torch.no_grad():
                    o_is = stage1_forward(g_super, prev, cond, self.cfg.combine)
                fake = stage2_forward(gen, o_is)
            adv_d = d_step(disc, opt_d, cond, fake, real)
            adv_g, mixed, terms = g_step(gen.parameters(), opt_g, disc, cond, labels, fake, real, self.recon)
            rep = LossReport(**{k: float(v.detach()) for k, v in terms.items()}, mixed=float(mixed.detach()),
                             adv_g=adv_g.item(), adv_d=adv_d.item())
            self.history.append((i, stage, epoch, rep))
            if self.loss_log is not None:
                self.loss_log.append(i, stage, epoch, rep)
            if not (math.isfinite(rep.adv_d) and math.isfinite(rep.mixed)):
                if self.ckpt_dir is not None:
                    save_checkpoint(self._ckpt_path(i, stage, "diverged_"), gen, i, stage, epoch,
                                    self.cfg.combine, self.cfg.schedule.to_dict(), {"report": rep.as_dict()})
                raise DivergenceError(f"non-finite loss at scale {i} stage {stage} epoch {epoch}: {rep}")
            last = epoch == cfg.epochs - 1
            if self.out_dir is not None and (last or (self.cfg.preview_every and epoch % self.cfg.preview_every == 0)):
                self._preview(i, stage, epoch, real, fake)

    def _preview(self, i, stage, epoch, real, fake):
        imgs = list(np.atleast_3d(to_array(real)).reshape(-1, *real.shape[-2:]))
        imgs += list(np.atleast_3d(to_array(fake)).reshape(-1, *fake.shape[-2:]))
        save_grid_png(self.out_dir / "samples" / f"scale{i}_{stage}" / f"epoch{epoch}.png", imgs,
                      ncols=real.shape[0])

    def resume(self, ckpt=None):
        """Load completed stages (up to and including ``ckpt`` when given)."""
        if ckpt is None:
            src_dir = self.ckpt_dir
            done = completed_stages(src_dir) if src_dir and src_dir.exists() else []
        else:
            ckpt = Path(ckpt)
            m = re.fullmatch(r"scale(\d+)_(super|restore)\.bin", ckpt.name)
            if not m:
                raise StateError(f"not a stage checkpoint: {ckpt}")
            src_dir = ckpt.parent
            target = (int(m.group(1)), m.group(2))
            done = completed_stages(src_dir)
            if target not in done:
                raise StateError(f"{ckpt} is missing or its predecessors are incomplete")
            done = done[:done.index(target) + 1]
        if not done:
            return []
        loaded = GeneratorStack.load(src_dir, upto=len(done))
        for g in loaded.gens:
            for p in g.parameters():
                p.requires_grad_(False)
        self.stack = loaded
        if self.ckpt_dir is not None and src_dir.resolve() != self.ckpt_dir.resolve():
            self.ckpt_dir.mkdir(parents=True, exist_ok=True)
            for i, st in done:
                shutil.copyfile(src_dir / f"scale{i}_{st}.bin", self._ckpt_path(i, st))
            src_log = src_dir.parent / "logs" / "losses.csv"
            if src_log.exists() and self.loss_log is not None:
                shutil.copyfile(src_log, self.loss_log.path)
        if self.loss_log is not None:
            self.loss_log.truncate_to(done)
        return done

    def train_full(self, resume=False, resume_from=None):
        done = []
        if resume or resume_from is not None:
            done = self.resume(resume_from)
        for i in range(len(self.cfg.schedule)):
            for st in STAGES:
                if (i, st) in done:
                    continue
                log.info("training scale %d (%s) stage %s", i, self.cfg.schedule.scales[i], st)
                self.train_stage(i, st)
        self.stack.freeze()
        return self.stack


def train_full(sample: SamplePair, cfg: TrainerConfig, recon: ReconstructionLoss, out_dir=None,
               resume_from=None) -> GeneratorStack:
    return Trainer(cfg, sample, recon, out_dir).train_full(resume_from=resume_from)
