import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from disam import retrieval
from disam.datamodel import Pose, read_image
from disam.errors import (
    CorruptDatabase,
    EmptyDatabase,
    FingerprintMismatch,
    FingerprintMismatchError,
    MissingPose,
    ShapeMismatch,
)
from disam.network import NetworkConfig, init_bundle
from disam.retrieval import DatabaseEntry, FeatureDatabase

from conftest import TINY


def oracle_coarse(a, b):
    n, h, w = a.shape
    total = 0.0
    for k in range(n):
        dot = na = nb = 0.0
        for p in range(h):
            for q in range(w):
                dot += float(a[k, p, q]) * float(b[k, p, q])
                na += float(a[k, p, q]) ** 2
                nb += float(b[k, p, q]) ** 2
        total += dot / max(math.sqrt(na) * math.sqrt(nb), 1e-8)
    return total / n


def oracle_fine(a, b):
    dot = na = nb = 0.0
    for x, y in zip(np.ravel(a), np.ravel(b)):
        dot += float(x) * float(y)
        na += float(x) ** 2
        nb += float(y) ** 2
    return dot / max(math.sqrt(na) * math.sqrt(nb), 1e-8)


def oracle_ranking(feats, q, score):
    scores = [score(f, q) for f in feats]
    return [k for _, k in sorted((-s, k) for k, s in enumerate(scores))]


def random_db(rng, size, shape=(3, 2, 2), duplicates=True):
    feats = [rng.normal(size=shape).astype(np.float32) for _ in range(size)]
    if duplicates and size > 3:
        # exact duplicates create score ties that must resolve by index
        for _ in range(size // 4):
            a, b = rng.choice(size, 2, replace=False)
            feats[max(a, b)] = feats[min(a, b)].copy()
    entries = [DatabaseEntry(f"e{k}", f, Pose.from_yaw((float(k), 0, 0), 0.0)) for k, f in enumerate(feats)]
    return FeatureDatabase(entries, "test")


class TestScoring:
    def test_self_retrieval(self):
        rng = np.random.default_rng(0)
        db = random_db(rng, 10, duplicates=False)
        res = retrieval.coarse_retrieve(db, db.entries[4].feature, top_n=3, query_id="q")
        assert res.ids[0] == "e4" and res.ranked[0][1] == pytest.approx(1.0, abs=1e-6)
        assert res.predicted_pose == db.entries[4].pose and res.stage == "coarse"

    def test_top_n_clamped(self):
        db = random_db(np.random.default_rng(1), 5)
        assert len(retrieval.fine_retrieve(db, db.entries[0].feature, top_n=50).ranked) == 5

    def test_flattened_cosine(self):
        a = np.random.default_rng(2).normal(size=(2, 3, 3))
        assert retrieval.flattened_cosine(a, a) == pytest.approx(1.0, abs=1e-12)
        b = np.zeros((1, 1, 2))
        c = np.zeros((1, 1, 2))
        b[0, 0, 0] = c[0, 0, 1] = 1.0
        assert retrieval.flattened_cosine(b, c) == 0.0
        x, y = np.random.default_rng(3).normal(size=(2, 4, 3, 3))
        assert retrieval.flattened_cosine(x, y) == pytest.approx(oracle_fine(x, y), abs=1e-9)
        with pytest.raises(ShapeMismatch):
            retrieval.flattened_cosine(x, y[:2])

    def test_shape_mismatch(self):
        db = random_db(np.random.default_rng(4), 3)
        with pytest.raises(ShapeMismatch):
            retrieval.coarse_retrieve(db, np.zeros((3, 2, 3)))

    def test_empty(self):
        with pytest.raises(EmptyDatabase):
            retrieval.coarse_retrieve(FeatureDatabase([], "x"), np.zeros((1, 1, 1)))

    def test_rank_ties_by_index(self):
        assert list(retrieval.rank_scores([0.5, 0.9, 0.5, 0.9])) == [1, 3, 0, 2]

    @pytest.mark.parametrize("seed", range(20))
    def test_oracle_equivalence(self, seed):
        rng = np.random.default_rng(100 + seed)
        db = random_db(rng, int(rng.integers(1, 51)))
        q = db.entries[int(rng.integers(len(db)))].feature * 0.5 if seed % 2 else rng.normal(size=(3, 2, 2))
        feats = [e.feature for e in db.entries]
        for fn, score in ((retrieval.coarse_retrieve, oracle_coarse), (retrieval.fine_retrieve, oracle_fine)):
            got = fn(db, q, top_n=len(db)).ids
            assert got == [f"e{k}" for k in oracle_ranking(feats, q, score)]

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 31), st.floats(1e-3, 1e3))
    def test_query_scale_invariance(self, seed, c):
        rng = np.random.default_rng(seed)
        db = random_db(rng, 12, duplicates=False)
        q = rng.normal(size=(3, 2, 2))
        assert retrieval.coarse_retrieve(db, q, 12).ids == retrieval.coarse_retrieve(db, c * q, 12).ids

    def test_scores_nonincreasing(self):
        db = random_db(np.random.default_rng(5), 30)
        res = retrieval.fine_retrieve(db, np.random.default_rng(6).normal(size=(3, 2, 2)), 30)
        scores = [s for _, s in res.ranked]
        assert all(b <= a for a, b in zip(scores, scores[1:]))
        assert len(set(res.ids)) == 30


class TestDatabaseFile:
    def test_round_trip_bit_exact(self, tmp_path):
        db = random_db(np.random.default_rng(7), 9)
        retrieval.write_feature_db(db, tmp_path / "f.db")
        back = retrieval.read_feature_db(tmp_path / "f.db")
        assert back.fingerprint == db.fingerprint and back.ids == db.ids
        for a, b in zip(db.entries, back.entries):
            assert a.feature.tobytes() == b.feature.tobytes()
            assert a.pose == b.pose

    def test_truncated(self, tmp_path):
        db = random_db(np.random.default_rng(8), 3)
        retrieval.write_feature_db(db, tmp_path / "f.db")
        data = (tmp_path / "f.db").read_bytes()
        (tmp_path / "f.db").write_bytes(data[:-5])
        with pytest.raises(CorruptDatabase):
            retrieval.read_feature_db(tmp_path / "f.db")
        (tmp_path / "g.db").write_bytes(b"NOTADB" + data)
        with pytest.raises(CorruptDatabase):
            retrieval.read_feature_db(tmp_path / "g.db")

    def test_empty_refused(self, tmp_path):
        with pytest.raises(EmptyDatabase):
            retrieval.write_feature_db(FeatureDatabase([], "x"), tmp_path / "f.db")


class TestBuild:
    def test_order_and_count(self, image_manifest, tiny_bundle, tmp_path):
        db = retrieval.build_feature_db(tiny_bundle, image_manifest, domain=0, out_path=tmp_path / "f.db")
        assert db.ids == [r.id for r in image_manifest.by_split("database")]
        assert db.shape == tiny_bundle.config.latent_shape
        assert retrieval.read_feature_db(tmp_path / "f.db").ids == db.ids

    def test_missing_pose(self, image_manifest, tiny_bundle):
        records = image_manifest.by_split("query")
        records = [r.__class__(r.id, r.path, r.domain, r.place, None, "database") for r in records]
        with pytest.raises(MissingPose):
            retrieval.build_feature_db(tiny_bundle, image_manifest, records=records)

    def test_empty(self, image_manifest, tiny_bundle):
        with pytest.raises(EmptyDatabase):
            retrieval.build_feature_db(tiny_bundle, image_manifest, records=[])

    def test_fingerprint_warning(self, image_manifest, tiny_bundle):
        db = retrieval.build_feature_db(tiny_bundle, image_manifest)
        other = init_bundle(NetworkConfig(**{**TINY, "seed": 1}))
        with pytest.warns(FingerprintMismatch):
            assert not retrieval.check_fingerprint(db, other)
        with pytest.raises(FingerprintMismatchError):
            retrieval.check_fingerprint(db, other, strict=True)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            assert retrieval.check_fingerprint(db, tiny_bundle)


class TestCoarseToFine:
    @pytest.fixture
    def setup(self, image_manifest):
        coarse = init_bundle(NetworkConfig(**TINY))
        fine = init_bundle(NetworkConfig(**{**TINY, "seed": 5}))
        db = retrieval.build_feature_db(coarse, image_manifest, domain=0)
        queries = [read_image(image_manifest.resolve(r)) for r in image_manifest.by_split("query")]
        return image_manifest, coarse, fine, db, queries

    def test_containment(self, setup):
        m, coarse, fine, db, queries = setup
        for q in queries:
            res = retrieval.coarse_to_fine(db, fine, coarse, q, 1, top_n=3, manifest=m, db_domain=0)
            short = retrieval.coarse_retrieve(db, retrieval.encode_image(coarse, 1, q), 3)
            assert res.ids[0] in short.ids and set(res.candidates) == set(short.ids)
            assert res.predicted_pose == db.entries[db.index_of(res.ids[0])].pose

    def test_full_shortlist_equals_fine_only(self, setup):
        m, coarse, fine, db, queries = setup
        fine_db = retrieval.build_feature_db(fine, m, domain=0)
        for q in queries:
            res = retrieval.coarse_to_fine(db, fine, coarse, q, 1, top_n=len(db), manifest=m, db_domain=0)
            ref = retrieval.fine_retrieve(fine_db, retrieval.encode_image(fine, 1, q), len(db))
            assert res.ids == ref.ids

    def test_single_candidate_is_coarse_rank_one(self, setup):
        m, coarse, fine, db, queries = setup
        for q in queries:
            res = retrieval.coarse_to_fine(db, fine, coarse, q, 1, top_n=1, manifest=m, db_domain=0)
            assert res.ids == retrieval.coarse_retrieve(db, retrieval.encode_image(coarse, 1, q)).ids

    def test_fine_cache_equivalent(self, setup):
        m, coarse, fine, db, queries = setup
        fine_db = retrieval.build_feature_db(fine, m, domain=0)
        for q in queries:
            a = retrieval.coarse_to_fine(db, fine, coarse, q, 1, top_n=3, manifest=m, db_domain=0)
            b = retrieval.coarse_to_fine(db, fine, coarse, q, 1, top_n=3, fine_db=fine_db)
            assert a == b


class TestResultFiles:
    def test_round_trip(self):
        db = random_db(np.random.default_rng(9), 6)
        results = [retrieval.coarse_retrieve(db, e.feature, 3, query_id=f"q{k}") for k, e in enumerate(db.entries)]
        parsed = retrieval.parse_results(retrieval.format_results(results))
        assert parsed == {r.query_id: list(r.ranked) for r in results}
