"""Two-stage training loop.

Coarse stage: adversarial + cycle + feature consistency + FCL triplet.
Fine stage adds the Grad-SAM loss and its triplet.  Each iteration samples an
ordered domain pair (i, j), updates the discriminators once and then the
encoders/decoders once on the losses of both translation directions.

Negatives are built without labels: within each anchor/negative pair exactly
one image is mirrored, so the two never show the same scene.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import losses, samcore
from .datamodel import Manifest, read_image
from .errors import EmptyPool, InvalidConfig, NanLoss, TooFewDomains, ValidationError
from .losses import LossReport, LossWeights
from .network import (
    ModelBundle,
    NetworkConfig,
    init_bundle,
    read_checkpoint,
    save_checkpoint,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainSchedule:
    total_epochs: int = 200
    lr_initial: float = 2e-4
    lr_decay: str = "linear_to_zero"
    ramp_epochs: int = 50
    hard_negative_start_epoch: int = 100
    pool_size: int = 10
    batch_size: int = 8
    optimizer: str = "adam"
    adam_betas: tuple = (0.5, 0.999)
    seed: int = 0
    checkpoint_every: int = 10
    margin: str = "adaptive"  # or "constant": alpha forced to 0
    negatives: str = "auto"  # random | hard | auto (random, then hard from the start epoch)

    def __post_init__(self):
        if self.total_epochs < 1:
            raise InvalidConfig("total_epochs must be >= 1")
        if not 0 <= self.hard_negative_start_epoch <= self.total_epochs:
            raise InvalidConfig("hard_negative_start_epoch must lie in [0, total_epochs]")
        if not 0 <= self.ramp_epochs <= self.total_epochs:
            raise InvalidConfig("ramp_epochs must lie in [0, total_epochs]")
        if self.pool_size < 1 or self.batch_size < 1:
            raise InvalidConfig("pool_size and batch_size must be >= 1")
        if self.lr_decay != "linear_to_zero" or self.optimizer != "adam":
            raise InvalidConfig("only linear_to_zero decay with adam is supported")
        if self.margin not in ("adaptive", "constant"):
            raise InvalidConfig(f"unknown margin mode {self.margin!r}")
        if self.negatives not in ("random", "hard", "auto"):
            raise InvalidConfig(f"unknown negatives mode {self.negatives!r}")
        object.__setattr__(self, "adam_betas", tuple(float(b) for b in self.adam_betas))


def current_lr(schedule: TrainSchedule, epoch) -> float:
    return schedule.lr_initial * (1.0 - epoch / schedule.total_epochs)


def current_ramp(schedule: TrainSchedule, epoch) -> float:
    if schedule.ramp_epochs == 0:
        return 1.0
    return min(1.0, epoch / schedule.ramp_epochs)


def sample_domain_pair(n_domains, rng):
    """Uniform ordered pair of distinct domains."""
    if n_domains < 2:
        raise TooFewDomains(f"need at least 2 domains, got {n_domains}")
    i = int(rng.integers(n_domains))
    j = int(rng.integers(n_domains - 1))
    return i, j + (j >= i)


def use_hard_negatives(schedule: TrainSchedule, epoch):
    if schedule.negatives == "auto":
        return epoch >= schedule.hard_negative_start_epoch
    return schedule.negatives == "hard"


@dataclass
class NegativeChoice:
    """Negatives chosen for one anchor batch.

    ``feature_index``/``map_index`` index the pool; the map choice only exists
    in the fine stage.  ``pool_flipped[b]`` tells whether anchor ``b``'s
    negative is mirrored; the anchor itself is mirrored exactly when it is not.
    """

    feature_index: np.ndarray
    map_index: Optional[np.ndarray]
    pool_flipped: np.ndarray


def flip(x):
    return torch.flip(x, dims=(-1,))


def make_negative(pool, epoch, schedule, encode_fn: Callable, anchor_features, pool_flipped,
                  rng, anchor_maps=None):
    """Pick one negative per anchor from ``pool`` (K, 3, H, W) of the target domain.

    Before hard negatives are enabled the pick is uniform over the pool.
    Afterwards the pool is encoded (mirrored where ``pool_flipped`` says so)
    and the candidate closest to each translated anchor feature wins; with
    ``anchor_maps`` the activation-map negative is chosen the same way.
    """
    k = len(pool)
    if k == 0:
        raise EmptyPool("negative pool is empty")
    b = len(anchor_features)
    if not use_hard_negatives(schedule, epoch):
        idx = rng.integers(k, size=b)
        return NegativeChoice(idx, idx.copy() if anchor_maps is not None else None, pool_flipped)
    feat_idx = np.empty(b, dtype=np.int64)
    map_idx = np.empty(b, dtype=np.int64) if anchor_maps is not None else None
    with torch.no_grad():
        encoded = {}
        for f in sorted(set(bool(v) for v in pool_flipped)):
            encoded[f] = encode_fn(flip(pool) if f else pool)
        for n in range(b):
            cand = encoded[bool(pool_flipped[n])]
            _, feat_idx[n] = losses.hard_negative_select(anchor_features[n], list(cand))
            if anchor_maps is not None:
                ref = anchor_features[n].expand_as(cand)
                maps = samcore.activation_map_torch(cand, ref)
                _, map_idx[n] = losses.hard_negative_select(anchor_maps[n], list(maps))
    return NegativeChoice(feat_idx, map_idx, pool_flipped)


def _adam_state_tensors(prefix, optimizer):
    out = {}
    for idx, state in optimizer.state_dict()["state"].items():
        for key, value in state.items():
            out[f"{prefix}/{idx}/{key}"] = torch.as_tensor(value, dtype=torch.float32)
    return out


def _restore_adam(optimizer, prefix, tensors):
    sd = optimizer.state_dict()
    state = {}
    for name, value in tensors.items():
        p, idx, key = name.split("/")
        if p != prefix:
            continue
        state.setdefault(int(idx), {})[key] = value.clone()
    sd["state"] = state
    optimizer.load_state_dict(sd)


def _rng_to_json(rng):
    return rng.bit_generator.state


def _rng_from_json(state):
    rng = np.random.default_rng()
    rng.bit_generator.state = state
    return rng


class Trainer:
    """Owns a bundle, its two Adam optimizers and the run's random stream."""

    def __init__(self, bundle: ModelBundle, weights: LossWeights, schedule: TrainSchedule,
                 stage: str = "coarse"):
        if stage not in ("coarse", "fine"):
            raise InvalidConfig(f"unknown stage {stage!r}")
        self.bundle = bundle
        self.weights = weights
        self.schedule = schedule
        self.stage = stage
        bundle.stage = stage
        self.rng = np.random.default_rng(schedule.seed)
        betas = schedule.adam_betas
        self.opt_g = torch.optim.Adam(bundle.generator_parameters(), lr=schedule.lr_initial, betas=betas)
        self.opt_d = torch.optim.Adam(bundle.discriminator_parameters(), lr=schedule.lr_initial, betas=betas)

    # -- optimisation ------------------------------------------------------

    def set_lr(self, epoch):
        lr = current_lr(self.schedule, epoch)
        for opt in (self.opt_g, self.opt_d):
            for group in opt.param_groups:
                group["lr"] = lr

    def _alpha(self, alpha):
        return 0.0 if self.schedule.margin == "constant" else alpha

    def _direction(self, src, dst, x, pool, epoch, terms, suffix):
        """Forward pass and losses for translating batch ``x`` from src to dst."""
        b = self.bundle
        bs = len(x)
        # exactly one of anchor / negative is mirrored
        anchor_flipped = self.rng.random(bs) < 0.5
        x = torch.where(torch.as_tensor(anchor_flipped)[:, None, None, None], flip(x), x)
        z = b.encoders[src](x)
        x_t = b.decoders[dst](z)
        z_t = b.encoders[dst](x_t)
        x_rec = b.decoders[src](z_t)
        terms["cyc" + suffix] = losses.cycle_loss(x, x_rec)
        terms["fcl" + suffix] = losses.fcl_loss(z, z_t, self.stage)

        fine = self.stage == "fine"
        if fine:
            L_self = samcore.activation_map_torch(z, z_t)
            L_cross = samcore.activation_map_torch(z_t, z)
            terms["sam" + suffix] = losses.sam_loss(L_self, L_cross)

        choice = make_negative(
            pool, epoch, self.schedule, b.encoders[dst], z_t.detach(), ~anchor_flipped,
            self.rng, anchor_maps=L_cross.detach() if fine else None,
        )

        def negatives(index):
            imgs = pool[torch.as_tensor(index)]
            mask = torch.as_tensor(choice.pool_flipped)[:, None, None, None]
            return b.encoders[dst](torch.where(mask, flip(imgs), imgs))

        z_neg = negatives(choice.feature_index)
        d_pos = losses.l2_distance(z, z_t, batched=True)
        d_neg = losses.l2_distance(z_t, z_neg, batched=True)
        w = self.weights
        terms["trip_fcl" + suffix] = losses.adaptive_triplet(
            d_pos, d_neg, w.m_f, self._alpha(w.alpha_f)).mean()
        if fine:
            if np.array_equal(choice.map_index, choice.feature_index):
                z_neg_s = z_neg
            else:
                z_neg_s = negatives(choice.map_index)
            L_neg = samcore.activation_map_torch(z_neg_s, z_t)
            s_pos = losses.l2_distance(L_self, L_cross, batched=True)
            s_neg = losses.l2_distance(L_cross, L_neg, batched=True)
            terms["trip_sam" + suffix] = losses.adaptive_triplet(
                s_pos, s_neg, w.m_s, self._alpha(w.alpha_s)).mean()
        return x, x_t

    def training_step(self, i, j, batch_i, batch_j, epoch, pool_i=None, pool_j=None) -> LossReport:
        """One discriminator update, then one encoder/decoder update.

        ``pool_i``/``pool_j`` are the negative candidate pools for anchors of
        domain j and i respectively; they default to the other batch.
        """
        b = self.bundle
        batch_i = torch.as_tensor(batch_i, dtype=torch.float32)
        batch_j = torch.as_tensor(batch_j, dtype=torch.float32)
        pool_j = batch_j if pool_j is None else torch.as_tensor(pool_j, dtype=torch.float32)
        pool_i = batch_i if pool_i is None else torch.as_tensor(pool_i, dtype=torch.float32)
        self.set_lr(epoch)
        weights = dataclasses.replace(self.weights, ramp_fraction=current_ramp(self.schedule, epoch))

        terms = {}
        x_i, x_ij = self._direction(i, j, batch_i, pool_j, epoch, terms, "_i")
        x_j, x_ji = self._direction(j, i, batch_j, pool_i, epoch, terms, "_j")

        # discriminators: real vs translated, both target domains
        self.opt_d.zero_grad(set_to_none=True)
        d_loss = (
            losses.gan_loss_discriminator(b.discriminators[j](x_j), b.discriminators[j](x_ij.detach()))
            + losses.gan_loss_discriminator(b.discriminators[i](x_i), b.discriminators[i](x_ji.detach()))
        )
        _check_finite("disc", d_loss)
        d_loss.backward()
        self.opt_d.step()

        terms["gan_i"] = losses.gan_loss_generator(b.discriminators[j](x_ij))
        terms["gan_j"] = losses.gan_loss_generator(b.discriminators[i](x_ji))
        for name, value in terms.items():
            _check_finite(name, value)
        total = losses.fine_total if self.stage == "fine" else losses.coarse_total
        report = total(dict(sorted(terms.items())), weights)
        self.opt_g.zero_grad(set_to_none=True)
        report.total_tensor.backward()
        self.opt_g.step()
        self.opt_d.zero_grad(set_to_none=True)
        for name, p in b.named_parameters():
            if not torch.isfinite(p).all():
                raise NanLoss(f"parameter {name}", "non-finite")
        report.extras = {"disc": float(d_loss.detach())}
        return report

    # -- state ---------------------------------------------------------------

    def save(self, path, epoch):
        self.bundle.epoch = epoch
        tensors = {**_adam_state_tensors("opt_g", self.opt_g), **_adam_state_tensors("opt_d", self.opt_d)}
        state = {
            "rng": _rng_to_json(self.rng),
            "weights": dataclasses.asdict(self.weights),
            "schedule": dataclasses.asdict(self.schedule),
        }
        save_checkpoint(self.bundle, path, extra_tensors=tensors, extra_state=state)

    @classmethod
    def resume(cls, path, weights, schedule, stage, config=None):
        bundle, tensors, state = read_checkpoint(path, config)
        trainer = cls(bundle, weights, schedule, stage)
        _restore_adam(trainer.opt_g, "opt_g", tensors)
        _restore_adam(trainer.opt_d, "opt_d", tensors)
        if "rng" in state:
            trainer.rng = _rng_from_json(state["rng"])
        return trainer


def _check_finite(name, value):
    v = float(value.detach()) if torch.is_tensor(value) else float(value)
    if not math.isfinite(v):
        raise NanLoss(name, v)


# -- full runs -----------------------------------------------------------------

def training_images(manifest: Manifest):
    """Pixels per domain from the train split (all records if there is none).

    Labels are never used, so falling back to every record keeps training
    unsupervised.
    """
    records = manifest.by_split("train") or list(manifest.records)
    per_domain = {}
    for r in records:
        per_domain.setdefault(r.domain, []).append(read_image(manifest.resolve(r)))
    per_domain = {d: torch.from_numpy(np.stack(v)) for d, v in sorted(per_domain.items())}
    if len(per_domain) < 2:
        raise TooFewDomains("training needs images from at least 2 domains")
    return per_domain


class _DomainStream:
    """Endless reshuffled pass over one domain's images."""

    def __init__(self, images, rng):
        self.images = images
        self.rng = rng
        self.order = []

    def take(self, n):
        out = []
        while len(out) < n:
            if not self.order:
                self.order = list(self.rng.permutation(len(self.images)))
            out.append(self.order.pop())
        return self.images[torch.as_tensor(out)]

    def pool(self, k):
        idx = self.rng.choice(len(self.images), size=min(k, len(self.images)), replace=False)
        return self.images[torch.as_tensor(np.sort(idx))]


def iterations_per_epoch(per_domain, batch_size):
    total = sum(len(v) for v in per_domain.values())
    return max(1, math.ceil(total / (2 * batch_size)))


def run_training(manifest: Manifest, config: NetworkConfig, weights: LossWeights,
                 schedule: TrainSchedule, stage: str, out_dir, resume=None, warm_start=None,
                 epochs: Optional[int] = None, images=None) -> ModelBundle:
    """Train for ``schedule.total_epochs`` (or until ``epochs`` when given).

    Writes ``metrics.log`` (one line per step), ``epochs.log`` (one summary
    per epoch) and checkpoints ``epoch_XXXX.ckpt`` / ``latest.ckpt`` into
    ``out_dir``.  ``resume`` continues a run from its checkpoint including
    optimizer and RNG state; ``warm_start`` only takes the network weights
    (e.g. a coarse model starting the fine stage) and resets the schedule.
    """
    if resume and warm_start:
        raise ValidationError("resume and warm_start are mutually exclusive")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    per_domain = images if images is not None else training_images(manifest)
    if config.n_domains < max(per_domain) + 1:
        raise InvalidConfig("manifest has more domains than the network config")

    start_epoch = 0
    if resume:
        trainer = Trainer.resume(resume, weights, schedule, stage, config)
        start_epoch = trainer.bundle.epoch
    else:
        if warm_start:
            bundle = read_checkpoint(warm_start, config)[0]
            bundle.epoch = 0
        else:
            bundle = init_bundle(config)
        trainer = Trainer(bundle, weights, schedule, stage)

    metrics_path = out_dir / "metrics.log"
    summary_path = out_dir / "epochs.log"
    mode = "a" if resume else "w"
    end_epoch = schedule.total_epochs if epochs is None else min(epochs, schedule.total_epochs)
    n_iter = iterations_per_epoch(per_domain, schedule.batch_size)
    domains = sorted(per_domain)
    with open(metrics_path, mode) as mlog, open(summary_path, mode) as slog:
        for epoch in range(start_epoch, end_epoch):
            t0 = time.perf_counter()
            # fresh streams per epoch: batch order is a pure function of the RNG state
            streams = {d: _DomainStream(per_domain[d], trainer.rng) for d in domains}
            totals = []
            for step in range(n_iter):
                a, c = sample_domain_pair(len(domains), trainer.rng)
                i, j = domains[a], domains[c]
                bi = streams[i].take(schedule.batch_size)
                bj = streams[j].take(schedule.batch_size)
                pool_i = streams[i].pool(schedule.pool_size)
                pool_j = streams[j].pool(schedule.pool_size)
                report = trainer.training_step(i, j, bi, bj, epoch, pool_i=pool_i, pool_j=pool_j)
                mlog.write(report.line(epoch, step) + "\n")
                totals.append(report.total)
            slog.write(
                f"epoch={epoch} mean_total={np.mean(totals):.9g} lr={current_lr(schedule, epoch):.6g} "
                f"ramp={current_ramp(schedule, epoch):.6g} seconds={time.perf_counter() - t0:.2f}\n"
            )
            mlog.flush()
            slog.flush()
            log.info("epoch %d/%d mean total %.4f", epoch + 1, end_epoch, np.mean(totals))
            done = epoch + 1
            if done % schedule.checkpoint_every == 0 or done == end_epoch:
                trainer.save(out_dir / f"epoch_{done:04d}.ckpt", done)
                trainer.save(out_dir / "latest.ckpt", done)
    trainer.bundle.epoch = max(start_epoch, end_epoch)
    (out_dir / "run.json").write_text(json.dumps({
        "stage": stage,
        "config": dataclasses.asdict(config),
        "weights": dataclasses.asdict(weights),
        "schedule": dataclasses.asdict(schedule),
    }, indent=2))
    return trainer.bundle
