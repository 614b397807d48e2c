import dataclasses
import math

import numpy as np
import pytest
import torch

from disam import losses, trainer
from disam.datamodel import load_manifest
from disam.errors import EmptyPool, InvalidConfig, NanLoss, TooFewDomains, ValidationError
from disam.losses import LossWeights
from disam.network import NetworkConfig, init_bundle, load_checkpoint
from disam.trainer import TrainSchedule, Trainer, current_lr, current_ramp, make_negative

from conftest import TINY, make_image_manifest

ZERO = LossWeights(lambda_cyc=0, lambda_fcl=0, lambda_sam=0, lambda_trip_fcl=0, lambda_trip_sam=0,
                   lambda_gan=0)


def short(**kw):
    return TrainSchedule(**{"total_epochs": 4, "ramp_epochs": 2, "hard_negative_start_epoch": 2, **kw})


def batch(n=2, seed=0, size=16):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, size, size, generator=g) * 2 - 1


def params(module):
    return [p.detach().clone() for p in module.parameters()]


class TestSchedule:
    def test_endpoints(self):
        s = TrainSchedule(total_epochs=200, ramp_epochs=50)
        assert current_lr(s, 0) == 2e-4 and current_ramp(s, 0) == 0.0
        assert current_lr(s, 200) == 0.0 and current_ramp(s, 200) == 1.0

    def test_midpoint(self):
        s = TrainSchedule(total_epochs=100, ramp_epochs=100, hard_negative_start_epoch=50)
        assert current_ramp(s, 50) == 0.5

    def test_monotone(self):
        s = TrainSchedule()
        lrs = [current_lr(s, e) for e in range(201)]
        ramps = [current_ramp(s, e) for e in range(201)]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))
        assert all(b >= a for a, b in zip(ramps, ramps[1:]))

    def test_zero_ramp_epochs(self):
        assert current_ramp(TrainSchedule(ramp_epochs=0), 0) == 1.0

    @pytest.mark.parametrize("kw", [dict(hard_negative_start_epoch=300), dict(ramp_epochs=201),
                                    dict(pool_size=0), dict(margin="fixed"), dict(negatives="mixed"),
                                    dict(optimizer="sgd")])
    def test_invalid(self, kw):
        with pytest.raises(InvalidConfig):
            TrainSchedule(**kw)


class TestDomainPairs:
    def test_two_domains(self):
        rng = np.random.default_rng(0)
        assert {trainer.sample_domain_pair(2, rng) for _ in range(100)} == {(0, 1), (1, 0)}

    def test_uniform_ordered_pairs(self):
        rng = np.random.default_rng(1)
        n = 30000
        counts = {}
        for _ in range(n):
            pair = trainer.sample_domain_pair(3, rng)
            counts[pair] = counts.get(pair, 0) + 1
        assert len(counts) == 6 and all(i != j for i, j in counts)
        sigma = math.sqrt(n * (1 / 6) * (5 / 6))
        assert all(abs(c - n / 6) <= 3 * sigma for c in counts.values())

    def test_too_few(self):
        with pytest.raises(TooFewDomains):
            trainer.sample_domain_pair(1, np.random.default_rng(0))


class TestNegatives:
    def test_uniform_before_start(self):
        s = short(total_epochs=10, hard_negative_start_epoch=5)
        rng = np.random.default_rng(2)
        pool = torch.zeros(10, 1)
        anchors = torch.zeros(100, 1)
        counts = np.zeros(10)
        for _ in range(100):
            choice = make_negative(pool, 0, s, None, anchors, np.zeros(100, bool), rng)
            counts += np.bincount(choice.feature_index, minlength=10)
        expected = counts.sum() / 10
        chi2 = ((counts - expected) ** 2 / expected).sum()
        assert chi2 < 27.88  # 99.9% quantile, 9 degrees of freedom

    def test_near_duplicate_selected(self, tiny_bundle):
        s = short(total_epochs=10, hard_negative_start_epoch=0)
        pool = batch(6, seed=3)
        enc = tiny_bundle.encoders[0]
        with torch.no_grad():
            anchor = enc(pool[4:5] + 0.001)
        choice = make_negative(pool, 0, s, enc, anchor, np.zeros(1, bool), np.random.default_rng(0))
        assert choice.feature_index[0] == 4

    def test_flipped_pool_is_encoded_flipped(self, tiny_bundle):
        s = short(total_epochs=10, hard_negative_start_epoch=0)
        pool = batch(6, seed=4)
        enc = tiny_bundle.encoders[0]
        with torch.no_grad():
            anchor = enc(torch.flip(pool[2:3], dims=(-1,)))
        choice = make_negative(pool, 0, s, enc, anchor, np.ones(1, bool), np.random.default_rng(0))
        assert choice.feature_index[0] == 2

    def test_map_choice_in_fine_stage(self, tiny_bundle):
        s = short(total_epochs=10, hard_negative_start_epoch=0)
        pool = batch(4, seed=5)
        enc = tiny_bundle.encoders[0]
        with torch.no_grad():
            z = enc(batch(2, seed=6))
        maps = torch.rand(2, 4, 4, dtype=z.dtype)
        choice = make_negative(pool, 0, s, enc, z, np.zeros(2, bool), np.random.default_rng(0), maps)
        assert choice.map_index.shape == (2,) and choice.map_index.max() < 4

    def test_empty_pool(self):
        with pytest.raises(EmptyPool):
            make_negative(torch.zeros(0, 3, 4, 4), 0, short(), None, torch.zeros(1, 2),
                          np.zeros(1, bool), np.random.default_rng(0))

    def test_exactly_one_flipped_member(self, tiny_bundle, monkeypatch):
        seen = []
        original = trainer.make_negative

        def spy(pool, epoch, schedule, encode_fn, anchor_features, pool_flipped, rng, anchor_maps=None):
            choice = original(pool, epoch, schedule, encode_fn, anchor_features, pool_flipped, rng, anchor_maps)
            seen.append(np.asarray(choice.pool_flipped).copy())
            return choice

        monkeypatch.setattr(trainer, "make_negative", spy)
        t = Trainer(tiny_bundle, LossWeights(), short(total_epochs=4, hard_negative_start_epoch=2,
                                                               batch_size=4), "coarse")
        anchor_flags = []

        class RecordingRng:
            def __init__(self, rng):
                self._rng = rng

            def __getattr__(self, name):
                return getattr(self._rng, name)

            def random(self, size):
                out = self._rng.random(size)
                anchor_flags.append(out < 0.5)
                return out

        t.rng = RecordingRng(t.rng)
        t.training_step(0, 1, batch(4, 7), batch(4, 8), epoch=0, pool_i=batch(5, 9), pool_j=batch(5, 10))
        assert len(seen) == 2
        for anchor_flipped, negative_flipped in zip(anchor_flags, seen):
            assert np.array_equal(anchor_flipped ^ negative_flipped, np.ones(4, bool))


class TestTrainingStep:
    def test_zero_weights_leave_generator_unchanged(self, tiny_bundle):
        t = Trainer(tiny_bundle, ZERO, short(total_epochs=4, hard_negative_start_epoch=2), "fine")
        before = params(tiny_bundle.encoders) + params(tiny_bundle.decoders)
        t.training_step(0, 1, batch(2, 1), batch(2, 2), epoch=1)
        after = params(tiny_bundle.encoders) + params(tiny_bundle.decoders)
        assert all(torch.equal(a, b) for a, b in zip(before, after))

    def test_discriminator_loss_decreases(self, tiny_bundle):
        s = short(total_epochs=4, hard_negative_start_epoch=2, lr_initial=1e-4)
        t = Trainer(tiny_bundle, LossWeights(), s, "coarse")
        bi, bj = batch(2, 3), batch(2, 4)

        def disc_loss():
            with torch.no_grad():
                x_ij = tiny_bundle.decoders[1](tiny_bundle.encoders[0](bi))
                x_ji = tiny_bundle.decoders[0](tiny_bundle.encoders[1](bj))
                return float(
                    losses.gan_loss_discriminator(tiny_bundle.discriminators[1](bj), tiny_bundle.discriminators[1](x_ij))
                    + losses.gan_loss_discriminator(tiny_bundle.discriminators[0](bi), tiny_bundle.discriminators[0](x_ji)))

        before = disc_loss()
        gen_before = params(tiny_bundle.encoders) + params(tiny_bundle.decoders)
        report = t.training_step(0, 1, bi, bj, epoch=0)
        # re-evaluate with the generators as they were during the update
        for p, v in zip(list(tiny_bundle.encoders.parameters()) + list(tiny_bundle.decoders.parameters()), gen_before):
            p.data.copy_(v)
        assert disc_loss() < before + 1e-3
        assert math.isfinite(report.extras["disc"])

    def test_coarse_never_evaluates_sam(self, tiny_bundle, monkeypatch):
        calls = []
        for name in ("sam_loss", "activation_map_torch"):
            target = losses if name == "sam_loss" else trainer.samcore
            original = getattr(target, name)
            monkeypatch.setattr(target, name, lambda *a, _o=original, _n=name, **k: (calls.append(_n), _o(*a, **k))[1])
        s = short(total_epochs=4, hard_negative_start_epoch=0)
        report = Trainer(tiny_bundle, LossWeights(), s, "coarse").training_step(0, 1, batch(2, 5), batch(2, 6), 1)
        assert calls == []
        assert not any(k.startswith(("sam", "trip_sam")) for k in report.values)
        report = Trainer(tiny_bundle, LossWeights(), s, "fine").training_step(0, 1, batch(2, 5), batch(2, 6), 1)
        assert "sam_loss" in calls
        assert {"sam_i", "sam_j", "trip_sam_i", "trip_sam_j", "trip_fcl_i", "trip_fcl_j"} <= set(report.values)

    def test_report_total_is_weighted_sum(self, tiny_bundle):
        s = short(total_epochs=4, ramp_epochs=2, hard_negative_start_epoch=2)
        report = Trainer(tiny_bundle, LossWeights(), s, "fine").training_step(1, 0, batch(2, 7), batch(2, 8), 1)
        expected = sum(report.weights[k] * v for k, v in report.values.items())
        assert report.total == pytest.approx(expected, abs=1e-6)
        assert report.weights["cyc_i"] == 5.0 and report.weights["gan_i"] == 1.0
        assert all(math.isfinite(v) for v in report.values.values())

    def test_nan_aborts(self, tiny_bundle):
        t = Trainer(tiny_bundle, LossWeights(), short(total_epochs=4, hard_negative_start_epoch=2), "coarse")
        bad = batch(2, 9)
        bad[0, 0, 0, 0] = float("nan")
        with pytest.raises(NanLoss):
            t.training_step(0, 1, bad, batch(2, 10), 1)

    def test_unknown_stage(self, tiny_bundle):
        with pytest.raises(InvalidConfig):
            Trainer(tiny_bundle, LossWeights(), short(), "medium")


class TestRuns:
    SCHEDULE = TrainSchedule(total_epochs=3, ramp_epochs=1, hard_negative_start_epoch=1, batch_size=2,
                             pool_size=3, checkpoint_every=1)

    @pytest.fixture
    def manifest(self, tmp_path):
        make_image_manifest(tmp_path / "data", n_db=4, n_query=4)
        return load_manifest(tmp_path / "data" / "manifest.tsv")

    def run(self, manifest, out, **kw):
        return trainer.run_training(manifest, NetworkConfig(**TINY), LossWeights(), self.SCHEDULE,
                                    "coarse", out, **kw)

    def test_two_epoch_run(self, manifest, tmp_path):
        bundle = self.run(manifest, tmp_path / "run", epochs=2)
        assert bundle.epoch == 2
        summaries = (tmp_path / "run" / "epochs.log").read_text().splitlines()
        assert len(summaries) == 2
        assert (tmp_path / "run" / "epoch_0002.ckpt").exists()
        assert load_checkpoint(tmp_path / "run" / "latest.ckpt").fingerprint() == bundle.fingerprint()

    def test_same_seed_same_log(self, manifest, tmp_path):
        a = self.run(manifest, tmp_path / "a")
        b = self.run(manifest, tmp_path / "b")
        assert (tmp_path / "a" / "metrics.log").read_text() == (tmp_path / "b" / "metrics.log").read_text()
        assert a.fingerprint() == b.fingerprint()

    def test_resume_reproduces(self, manifest, tmp_path):
        full = self.run(manifest, tmp_path / "full")
        self.run(manifest, tmp_path / "part", epochs=1)
        resumed = self.run(manifest, tmp_path / "part", resume=tmp_path / "part" / "epoch_0001.ckpt")
        assert (tmp_path / "full" / "metrics.log").read_text() == (tmp_path / "part" / "metrics.log").read_text()
        assert resumed.fingerprint() == full.fingerprint()

    def test_warm_start(self, manifest, tmp_path):
        coarse = self.run(manifest, tmp_path / "coarse", epochs=1)
        fine = trainer.run_training(manifest, NetworkConfig(**TINY), LossWeights(), self.SCHEDULE, "fine",
                                    tmp_path / "fine", warm_start=tmp_path / "coarse" / "latest.ckpt", epochs=1)
        assert fine.stage == "fine" and fine.epoch == 1
        first = (tmp_path / "fine" / "metrics.log").read_text().splitlines()[0]
        assert first.startswith("0 0 ") and "sam_i=" in first
        assert fine.fingerprint() != coarse.fingerprint()

    def test_resume_and_warm_start_exclusive(self, manifest, tmp_path):
        with pytest.raises(ValidationError):
            self.run(manifest, tmp_path / "x", resume="a", warm_start="b")

    def test_too_few_domains_in_config(self, manifest, tmp_path):
        images = trainer.training_images(manifest)
        images[2] = images[0]
        with pytest.raises(InvalidConfig):
            self.run(manifest, tmp_path / "x", images=images)

    def test_training_images_fallback(self, manifest):
        images = trainer.training_images(manifest)
        assert sorted(images) == [0, 1] and images[0].shape == (4, 3, 16, 16)
