"""Alternating optimisation of the discriminator, generator and retrieval branch."""
from __future__ import annotations

import json
import logging
import os
import random
from pathlib import Path

import numpy as np
import torch

from . import config as config_io
from .config import TrainConfig
from .discriminator import PatchDiscriminator
from .generator import Generator
from .losses import (cgan_loss_discriminator, cgan_loss_generator, composite_loss,
                     l1_loss, ranking_loss)
from .retrieval import RetrievalBranch

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class NumericError(RuntimeError):
    pass


def build_models(cfg: TrainConfig):
    torch.manual_seed(cfg.seed)
    m = cfg.model
    generator = Generator(m.gen_base, m.n_bottleneck)
    discriminator = PatchDiscriminator(m.disc_base)
    retrieval = RetrievalBranch(cfg.feature_shape, m.gen_base, m.resnet_blocks, m.k_masks,
                                m.normalize_descriptor)
    return generator, discriminator, retrieval


def _set_grad(params, flag):
    for p in params:
        p.requires_grad_(flag)


class Trainer:
    """Holds the three networks, their optimisers and the step counter.

    One :meth:`train_step` performs, in order, a discriminator update, a
    generator update and a retrieval-branch update. The satellite-side
    aggregation module belongs to the retrieval optimiser; during the
    generator update retrieval gradients pass through it to the encoder.
    """

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.generator, self.discriminator, self.retrieval = build_models(cfg)
        adam = dict(lr=cfg.learning_rate, betas=(cfg.adam_beta1, cfg.adam_beta2))
        if cfg.model.mode == "retrieval_only":
            gen_params = list(self.generator.encoder_parameters())
        else:
            gen_params = list(self.generator.parameters())
        self.opt_g = torch.optim.Adam(gen_params, **adam)
        self.opt_d = torch.optim.Adam(self.discriminator.parameters(), **adam)
        self.opt_r = torch.optim.Adam(self.retrieval.parameters(), **adam)
        self.step = 0
        self.mining_active = False
        self.ret_history = []
        self._street_desc = None

    @property
    def uses_discriminator(self):
        return self.cfg.model.mode == "full"

    @property
    def uses_decoder(self):
        return self.cfg.model.mode != "retrieval_only"

    def train(self, mode=True):
        for net in (self.generator, self.discriminator, self.retrieval):
            net.train(mode)

    def eval(self):
        self.train(False)

    # -- the three sub-updates -------------------------------------------

    def update_discriminator(self, polar, street, fake):
        if not self.uses_discriminator:
            return 0.0
        _set_grad(self.discriminator.parameters(), True)
        real_logits = self.discriminator(polar, street)
        fake_logits = self.discriminator(polar, fake.detach())
        loss = cgan_loss_discriminator(real_logits, fake_logits)
        self._check(loss, "loss_d")
        self.opt_d.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_d.step()
        return loss.item()

    def update_generator(self, polar, street, fake, bottleneck):
        cfg = self.cfg
        w = cfg.loss
        _set_grad(self.discriminator.parameters(), False)
        _set_grad(self.retrieval.parameters(), False)
        zero = polar.new_zeros(())
        if self.uses_discriminator:
            adv = cgan_loss_generator(self.discriminator(polar, fake), cfg.model.non_saturating)
        else:
            adv = zero
        l1 = l1_loss(fake, street) if self.uses_decoder else zero

        # street descriptors keep their graph for the retrieval update
        _set_grad(self.retrieval.parameters(), True)
        self._street_desc = self.retrieval.street_descriptor(street)
        _set_grad(self.retrieval.parameters(), False)
        sat_desc = self.retrieval.satellite_descriptor(bottleneck)
        ret, n_kept = ranking_loss(self._street_desc.detach(), sat_desc, w.alpha, self._keep_fraction())

        total, breakdown = composite_loss(adv if self.uses_discriminator else zero, l1, ret, w)
        if not self.uses_decoder:
            total = w.lambda_ret * ret
        self._check(total, "generator loss")
        self.opt_g.zero_grad(set_to_none=True)
        total.backward()
        self.opt_g.step()
        _set_grad(self.retrieval.parameters(), True)
        _set_grad(self.discriminator.parameters(), True)
        return breakdown, n_kept

    def update_retrieval(self, polar):
        with torch.no_grad():
            bottleneck, _ = self.generator.encode(polar)
        street_desc = self._street_desc
        self._street_desc = None
        sat_desc = self.retrieval.satellite_descriptor(bottleneck)
        ret, n_kept = ranking_loss(street_desc, sat_desc, self.cfg.loss.alpha, self._keep_fraction())
        loss = self.cfg.loss.lambda_ret * ret
        self._check(loss, "retrieval loss")
        self.opt_r.zero_grad(set_to_none=True)
        loss.backward()
        self.opt_r.step()
        return ret.item(), n_kept

    # -- public step ---------------------------------------------------------

    def train_step(self, polar, street):
        """One D, G, R cycle on a batch of (B, 3, H, W) tensors in [-1, 1]."""
        if len(polar) < 2:
            raise ValueError(f"batch needs at least 2 pairs, got {len(polar)}")
        self.train()
        if self.uses_decoder:
            fake, bottleneck = self.generator(polar)
        else:
            bottleneck, _ = self.generator.encode(polar)
            fake = None
        self._check(bottleneck, "bottleneck")
        if fake is not None:
            self._check(fake, "generated image")
        loss_d = self.update_discriminator(polar, street, fake) if fake is not None else 0.0
        breakdown, _ = self.update_generator(polar, street, fake, bottleneck)
        loss_ret, n_kept = self.update_retrieval(polar)
        self.step += 1
        self._update_mining(loss_ret)
        return {
            "step": self.step,
            "loss_d": loss_d,
            "loss_g_adv": breakdown["cgan"],
            "loss_l1": breakdown["l1"],
            "loss_ret": loss_ret,
            "triplets_kept": n_kept,
        }

    def _check(self, value, name):
        if not torch.isfinite(value).all():
            raise NumericError(f"non-finite {name} at step {self.step + 1}")

    def _keep_fraction(self):
        return self.cfg.mining.keep_fraction if self.mining_active else 1.0

    def _update_mining(self, loss_ret):
        m = self.cfg.mining
        if self.mining_active:
            return
        if 0 <= m.start_step <= self.step:
            self.mining_active = True
        elif m.plateau_threshold > 0:
            self.ret_history.append(loss_ret)
            window = m.plateau_window
            if len(self.ret_history) >= 2 * window:
                prev = np.mean(self.ret_history[-2 * window:-window])
                curr = np.mean(self.ret_history[-window:])
                if prev > 0 and (prev - curr) / prev < m.plateau_threshold:
                    self.mining_active = True
                self.ret_history = self.ret_history[-2 * window:]
        if self.mining_active:
            log.info("hard-negative mining enabled at step %d", self.step)

    # -- inference helpers ---------------------------------------------------

    @torch.no_grad()
    def descriptors(self, polar, street, batch_size=64):
        """(satellite, street) descriptor arrays for a prepared split, in eval mode."""
        was_training = self.generator.training
        self.eval()
        sat, grd = [], []
        for i in range(0, len(polar), batch_size):
            p = torch.as_tensor(polar[i:i + batch_size])
            s = torch.as_tensor(street[i:i + batch_size])
            bottleneck, _ = self.generator.encode(p)
            sat.append(self.retrieval.satellite_descriptor(bottleneck))
            grd.append(self.retrieval.street_descriptor(s))
        self.train(was_training)
        return torch.cat(sat).double().numpy(), torch.cat(grd).double().numpy()

    @torch.no_grad()
    def synthesize(self, polar, batch_size=32):
        if not self.uses_decoder:
            raise RuntimeError("this model was trained without a decoder")
        was_training = self.generator.training
        self.eval()
        out = [self.generator(torch.as_tensor(polar[i:i + batch_size]))[0]
               for i in range(0, len(polar), batch_size)]
        self.train(was_training)
        return torch.cat(out).numpy()

    # -- checkpoints ---------------------------------------------------------

    def state_dict(self):
        return {
            "format_version": CHECKPOINT_VERSION,
            "config": config_io.dumps(self.cfg),
            "config_hash": config_io.config_hash(self.cfg),
            "step": self.step,
            "mining_active": self.mining_active,
            "ret_history": list(self.ret_history),
            "generator": self.generator.state_dict(),
            "discriminator": self.discriminator.state_dict(),
            "retrieval": self.retrieval.state_dict(),
            "opt_g": self.opt_g.state_dict(),
            "opt_d": self.opt_d.state_dict(),
            "opt_r": self.opt_r.state_dict(),
            "rng": {
                "torch": torch.get_rng_state(),
                "numpy": np.random.get_state(),
                "python": random.getstate(),
            },
        }

    def load_state_dict(self, state):
        if state.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint format {state.get('format_version')!r}")
        self.step = state["step"]
        self.mining_active = state["mining_active"]
        self.ret_history = list(state["ret_history"])
        self.generator.load_state_dict(state["generator"])
        self.discriminator.load_state_dict(state["discriminator"])
        self.retrieval.load_state_dict(state["retrieval"])
        self.opt_g.load_state_dict(state["opt_g"])
        self.opt_d.load_state_dict(state["opt_d"])
        self.opt_r.load_state_dict(state["opt_r"])
        torch.set_rng_state(state["rng"]["torch"])
        np.random.set_state(state["rng"]["numpy"])
        random.setstate(state["rng"]["python"])

    def save(self, path):
        """Atomically write a single-file checkpoint."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_name(path.name + ".tmp")
        torch.save(self.state_dict(), tmp)
        os.replace(tmp, path)

    @classmethod
    def from_checkpoint(cls, path):
        state = torch.load(path, map_location="cpu", weights_only=False)
        trainer = cls(config_io.loads(state["config"]))
        trainer.load_state_dict(state)
        return trainer


def checkpoint_config(path) -> TrainConfig:
    """The configuration a checkpoint was trained with."""
    return config_io.loads(torch.load(path, map_location="cpu", weights_only=False)["config"])


def batch_order(n, batch_size, seed, epoch):
    """Shuffled full batches for one epoch; the trailing partial batch is dropped."""
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n - batch_size + 1, batch_size)]


def make_batch(split, rows, seed, step, augment):
    polar = split.polar[rows]
    street = split.street[rows]
    if augment:
        flips = np.random.default_rng([seed, 1, step]).random(len(rows)) < 0.5
        polar = np.where(flips[:, None, None, None], polar[..., ::-1], polar)
        street = np.where(flips[:, None, None, None], street[..., ::-1], street)
    return torch.from_numpy(np.ascontiguousarray(polar)), torch.from_numpy(np.ascontiguousarray(street))


def train(cfg: TrainConfig, split, out_dir=None, resume=None, trainer=None, callback=None):
    """Run ``cfg.total_steps`` cycles over a :class:`~sat2street.data.PreparedSplit`.

    Writes ``metrics.jsonl`` and checkpoints into ``out_dir`` when given and
    returns the trainer. ``resume`` is a checkpoint path to continue from.
    """
    if len(split) < cfg.batch_size:
        raise ValueError(f"dataset has {len(split)} pairs, fewer than batch_size {cfg.batch_size}")
    if trainer is None:
        trainer = Trainer.from_checkpoint(resume) if resume else Trainer(cfg)
        if resume:
            trainer.cfg = cfg
    out = Path(out_dir) if out_dir else None
    metrics_fh = None
    if out:
        out.mkdir(parents=True, exist_ok=True)
        metrics_path = out / "metrics.jsonl"
        kept = []
        if resume and metrics_path.exists():
            # drop records past the checkpoint; those steps are about to be replayed
            kept = [line for line in metrics_path.read_text().splitlines()
                    if line and json.loads(line)["step"] <= trainer.step]
        metrics_fh = open(metrics_path, "w")
        metrics_fh.writelines(line + "\n" for line in kept)
    per_epoch = len(split) // cfg.batch_size
    try:
        while trainer.step < cfg.total_steps:
            epoch, pos = divmod(trainer.step, per_epoch)
            rows = batch_order(len(split), cfg.batch_size, cfg.seed, epoch)[pos]
            polar, street = make_batch(split, rows, cfg.seed, trainer.step, cfg.augment)
            try:
                metrics = trainer.train_step(polar, street)
            except NumericError as exc:
                if out:
                    dump = {"error": str(exc), "step": trainer.step + 1, "rows": rows.tolist()}
                    with open(out / "failure.json", "w") as fh:
                        json.dump(dump, fh, indent=2)
                raise
            if metrics_fh:
                metrics_fh.write(json.dumps(metrics) + "\n")
                metrics_fh.flush()
            if callback:
                callback(trainer, metrics)
            if out and cfg.checkpoint_every and trainer.step % cfg.checkpoint_every == 0:
                trainer.save(out / f"checkpoint_{trainer.step:06d}.pt")
        if out:
            trainer.save(out / "checkpoint_final.pt")
    finally:
        if metrics_fh:
            metrics_fh.close()
    return trainer
