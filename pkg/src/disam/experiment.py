"""Desk-scale end-to-end experiment on the synthetic dataset.

Generates the dataset, trains a coarse model (and optionally a fine model
warm-started from it), then measures cross-domain recall@N of coarse,
fine-only and coarse-to-fine retrieval.  Used by the acceptance suite and the
demo scripts.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import evaluation, retrieval
from .datamodel import Manifest, read_image
from .losses import LossWeights
from .network import ModelBundle, NetworkConfig, init_bundle
from .synthgen import SynthConfig, generate
from .trainer import TrainSchedule, run_training


@dataclass(frozen=True)
class DeskExperiment:
    synth: SynthConfig = field(default_factory=SynthConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    coarse_epochs: int = 20
    fine_epochs: int = 0
    batch_size: int = 8
    top_n: int = 3
    recall_n: int = 5

    def schedule(self, epochs):
        return TrainSchedule(
            total_epochs=epochs,
            ramp_epochs=max(1, epochs // 4),
            hard_negative_start_epoch=epochs // 2,
            batch_size=self.batch_size,
            seed=self.network.seed,
            checkpoint_every=max(1, epochs),
        )


@dataclass
class StageRecall:
    recall: list  # recall@1..N
    per_domain_r1: dict

    @property
    def r1(self):
        return self.recall[0]

    @property
    def r5(self):
        return self.recall[min(4, len(self.recall) - 1)]


@dataclass
class ExperimentResult:
    untrained: StageRecall
    coarse: StageRecall
    fine: StageRecall | None = None
    coarse_to_fine: StageRecall | None = None
    seconds: dict = field(default_factory=dict)


def _recall(results, manifest: Manifest, n_max):
    by_id = manifest.by_id()
    ranked = {r.query_id: r.ids for r in results}
    q_places = {q: by_id[q].place for q in ranked}
    db_places = {r.id: r.place for r in manifest.by_split("database")}
    curve = evaluation.recall_at_n(ranked, q_places, db_places, n_max)
    per_domain = {}
    for d in sorted({by_id[q].domain for q in ranked}):
        sub = {q: ids for q, ids in ranked.items() if by_id[q].domain == d}
        per_domain[d] = evaluation.recall_at_n(sub, q_places, db_places, 1)[0]
    return StageRecall(curve, per_domain)


def evaluate_bundle(bundle: ModelBundle, manifest: Manifest, mode="coarse", n_max=5):
    """Recall of single-stage retrieval: database through encoder 0, queries through their own."""
    db = retrieval.build_feature_db(bundle, manifest, domain=0)
    search = retrieval.coarse_retrieve if mode == "coarse" else retrieval.fine_retrieve
    results = []
    for r in manifest.by_split("query"):
        q = retrieval.encode_image(bundle, r.domain, read_image(manifest.resolve(r)))
        results.append(search(db, q, len(db), query_id=r.id))
    return _recall(results, manifest, n_max)


def evaluate_coarse_to_fine(coarse: ModelBundle, fine: ModelBundle, manifest: Manifest, top_n=3, n_max=5):
    coarse_db = retrieval.build_feature_db(coarse, manifest, domain=0)
    fine_db = retrieval.build_feature_db(fine, manifest, domain=0)
    results = []
    for r in manifest.by_split("query"):
        res = retrieval.coarse_to_fine(coarse_db, fine, coarse, read_image(manifest.resolve(r)), r.domain,
                                       top_n, fine_db=fine_db, query_id=r.id)
        # the shortlist re-ranking only orders N entries; append the rest in coarse order
        rest = [c for c in retrieval.coarse_retrieve(
            coarse_db, retrieval.encode_image(coarse, r.domain, read_image(manifest.resolve(r))),
            len(coarse_db)).ids if c not in res.ids]
        results.append(dataclasses.replace(res, ranked=res.ranked + tuple((c, float("nan")) for c in rest)))
    return _recall(results, manifest, n_max)


def run_experiment(exp: DeskExperiment, out_dir) -> ExperimentResult:
    out_dir = Path(out_dir)
    seconds = {}
    t = time.perf_counter()
    manifest = generate(exp.synth, out_dir / "data")
    seconds["synth"] = time.perf_counter() - t

    network = dataclasses.replace(exp.network, n_domains=exp.synth.n_domains,
                                  image_size=exp.synth.image_size)
    untrained = evaluate_bundle(init_bundle(network), manifest, "coarse", exp.recall_n)

    t = time.perf_counter()
    coarse = run_training(manifest, network, exp.weights, exp.schedule(exp.coarse_epochs), "coarse",
                          out_dir / "coarse")
    seconds["coarse_training"] = time.perf_counter() - t
    result = ExperimentResult(untrained, evaluate_bundle(coarse, manifest, "coarse", exp.recall_n),
                              seconds=seconds)
    if exp.fine_epochs:
        t = time.perf_counter()
        fine = run_training(manifest, network, exp.weights, exp.schedule(exp.fine_epochs), "fine",
                            out_dir / "fine", warm_start=out_dir / "coarse" / "latest.ckpt")
        seconds["fine_training"] = time.perf_counter() - t
        result.fine = evaluate_bundle(fine, manifest, "fine", exp.recall_n)
        result.coarse_to_fine = evaluate_coarse_to_fine(coarse, fine, manifest, exp.top_n, exp.recall_n)
    return result


def format_recall(name, stage: StageRecall):
    doms = " ".join(f"d{d}={v:.3f}" for d, v in stage.per_domain_r1.items())
    return f"{name}: R@1={stage.r1:.3f} R@5={stage.r5:.3f} ({doms})"


def random_baseline(n_places):
    return 1.0 / n_places

