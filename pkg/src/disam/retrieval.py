"""Feature database and coarse-to-fine retrieval.

Coarse ranking uses the mean channel cosine; fine ranking uses the cosine of
the flattened feature maps.  Rankings are stable: equal scores keep database
order.  The predicted pose of a query is the pose of its rank-1 entry.
"""

from __future__ import annotations

import os
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .datamodel import Manifest, Pose, read_image
from .errors import (
    CorruptDatabase,
    EmptyDatabase,
    FingerprintMismatch,
    FingerprintMismatchError,
    MissingPose,
    ShapeMismatch,
    ValidationError,
)
from .network import ModelBundle, encode
from .samcore import EPS

FDB_MAGIC = b"DISAMFDB"
FDB_VERSION = 1
MODES = ("coarse", "fine", "coarse_to_fine")


@dataclass(frozen=True)
class DatabaseEntry:
    id: str
    feature: np.ndarray  # (n, h, w) float32
    pose: Pose


@dataclass
class FeatureDatabase:
    entries: list
    fingerprint: str
    _stack: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.fingerprint:
            raise ValidationError("feature database needs a model fingerprint")
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValidationError("feature database ids must be unique")
        shapes = {e.feature.shape for e in self.entries}
        if len(shapes) > 1:
            raise ShapeMismatch(f"mixed feature shapes in database: {sorted(shapes)}")

    def __len__(self):
        return len(self.entries)

    @property
    def shape(self):
        return self.entries[0].feature.shape if self.entries else None

    @property
    def ids(self):
        return [e.id for e in self.entries]

    def features(self):
        """All features as one float64 array (|db|, n, h, w)."""
        if self._stack is None:
            self._stack = np.stack([e.feature for e in self.entries]).astype(np.float64)
        return self._stack

    def index_of(self, entry_id):
        return self.ids.index(entry_id)


@dataclass(frozen=True)
class RetrievalResult:
    query_id: str
    ranked: tuple  # ((db_id, score), ...), best first
    stage: str
    predicted_pose: Optional[Pose]
    candidates: tuple = ()  # coarse shortlist for coarse_to_fine

    @property
    def ids(self):
        return [r[0] for r in self.ranked]


def encode_image(bundle: ModelBundle, domain, pixels):
    """Inference-mode feature map of a single image as float32 numpy."""
    with torch.no_grad():
        return encode(bundle, domain, np.asarray(pixels, dtype=np.float32)).float().numpy()


def build_feature_db(bundle: ModelBundle, manifest: Manifest, domain=None, out_path=None,
                     records=None) -> FeatureDatabase:
    """Encode every database record (manifest order) and optionally persist.

    ``domain`` selects the encoder; by default each record's own domain.
    """
    records = manifest.by_split("database") if records is None else list(records)
    if not records:
        raise EmptyDatabase("manifest has no database records")
    entries = []
    for r in records:
        if r.pose is None:
            raise MissingPose(f"database record {r.id!r} has no pose")
        d = r.domain if domain is None else domain
        entries.append(DatabaseEntry(r.id, encode_image(bundle, d, read_image(manifest.resolve(r))), r.pose))
    db = FeatureDatabase(entries, bundle.fingerprint())
    if out_path is not None:
        write_feature_db(db, out_path)
    return db


def write_feature_db(db: FeatureDatabase, path):
    if not db.entries:
        raise EmptyDatabase("refusing to write an empty feature database")
    n, h, w = db.shape
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(FDB_MAGIC)
        fh.write(struct.pack("<I", FDB_VERSION))
        fp = db.fingerprint.encode("utf-8")
        fh.write(struct.pack("<H", len(fp)))
        fh.write(fp)
        fh.write(struct.pack("<IIII", len(db.entries), n, h, w))
        for e in db.entries:
            rid = e.id.encode("utf-8")
            fh.write(struct.pack("<H", len(rid)))
            fh.write(rid)
            fh.write(np.asarray(e.pose.position + e.pose.orientation, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(e.feature, dtype="<f4").tobytes())
    os.replace(tmp, path)


def read_feature_db(path) -> FeatureDatabase:
    data = Path(path).read_bytes()
    pos = 0

    def take(k):
        nonlocal pos
        if pos + k > len(data):
            raise CorruptDatabase(f"{path}: truncated feature database")
        chunk = data[pos:pos + k]
        pos += k
        return chunk

    if take(len(FDB_MAGIC)) != FDB_MAGIC:
        raise CorruptDatabase(f"{path}: not a feature database")
    (version,) = struct.unpack("<I", take(4))
    if version != FDB_VERSION:
        raise CorruptDatabase(f"{path}: unsupported version {version}")
    (flen,) = struct.unpack("<H", take(2))
    fingerprint = take(flen).decode("utf-8")
    count, n, h, w = struct.unpack("<IIII", take(16))
    entries = []
    for _ in range(count):
        (ilen,) = struct.unpack("<H", take(2))
        rid = take(ilen).decode("utf-8")
        pose = np.frombuffer(take(56), dtype="<f8")
        feat = np.frombuffer(take(4 * n * h * w), dtype="<f4").reshape(n, h, w).astype(np.float32)
        entries.append(DatabaseEntry(rid, feat, Pose(pose[:3], pose[3:])))
    if pos != len(data):
        raise CorruptDatabase(f"{path}: trailing bytes")
    return FeatureDatabase(entries, fingerprint)


def check_fingerprint(db: FeatureDatabase, bundle: ModelBundle, strict=False):
    fp = bundle.fingerprint()
    if fp != db.fingerprint:
        msg = f"feature database built by model {db.fingerprint}, querying with {fp}"
        if strict:
            raise FingerprintMismatchError(msg)
        warnings.warn(msg, FingerprintMismatch, stacklevel=2)
        return False
    return True


# -- scoring ------------------------------------------------------------------

def coarse_scores(features, q):
    """Mean channel cosine of query ``q`` (n, h, w) against every row of ``features``."""
    q = np.asarray(q, dtype=np.float64)
    if features.shape[1:] != q.shape:
        raise ShapeMismatch(f"query shape {q.shape} != database shape {features.shape[1:]}")
    f = features.reshape(len(features), q.shape[0], -1)
    qf = q.reshape(q.shape[0], -1)
    dots = np.einsum("bkp,kp->bk", f, qf)
    norms = np.sqrt(np.einsum("bkp,bkp->bk", f, f)) * np.sqrt(np.einsum("kp,kp->k", qf, qf))
    return (dots / np.maximum(norms, EPS)).mean(axis=1)


def fine_scores(features, q):
    """Cosine similarity of flattened maps against every row of ``features``."""
    q = np.asarray(q, dtype=np.float64)
    if features.shape[1:] != q.shape:
        raise ShapeMismatch(f"query shape {q.shape} != database shape {features.shape[1:]}")
    f = features.reshape(len(features), -1)
    qf = q.ravel()
    return (f @ qf) / np.maximum(np.sqrt(np.einsum("bp,bp->b", f, f)) * np.sqrt(qf @ qf), EPS)


def flattened_cosine(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes {a.shape} and {b.shape} differ")
    return float(fine_scores(a[None], b)[0])


def rank_scores(scores):
    """Indices by descending score; equal scores keep ascending index."""
    scores = np.asarray(scores)
    return np.lexsort((np.arange(len(scores)), -scores))


def _result(db, query_id, scores, top_n, stage, candidates=()):
    if top_n < 1:
        raise ValidationError("top_n must be >= 1")
    order = rank_scores(scores)[:top_n]
    ranked = tuple((db.entries[k].id, float(scores[k])) for k in order)
    return RetrievalResult(query_id, ranked, stage, db.entries[order[0]].pose, tuple(candidates))


def coarse_retrieve(db: FeatureDatabase, q, top_n=1, query_id="") -> RetrievalResult:
    if not len(db):
        raise EmptyDatabase("feature database is empty")
    return _result(db, query_id, coarse_scores(db.features(), q), top_n, "coarse")


def fine_retrieve(db: FeatureDatabase, q, top_n=1, query_id="") -> RetrievalResult:
    if not len(db):
        raise EmptyDatabase("feature database is empty")
    return _result(db, query_id, fine_scores(db.features(), q), top_n, "fine")


def coarse_to_fine(coarse_db: FeatureDatabase, fine_bundle: ModelBundle, coarse_bundle: ModelBundle,
                   query, domain, top_n=3, manifest: Optional[Manifest] = None,
                   fine_db: Optional[FeatureDatabase] = None, db_domain=None,
                   query_id="", strict=False) -> RetrievalResult:
    """Shortlist ``top_n`` entries with the coarse model, re-rank them with the fine model.

    ``query`` is a (3, H, W) raster in domain ``domain``.  Candidate features
    for the fine stage come from ``fine_db`` when given, otherwise the raw
    database images are re-encoded from ``manifest`` (encoder ``db_domain``
    or each record's own domain).  Both routes give identical results.
    """
    if not len(coarse_db):
        raise EmptyDatabase("feature database is empty")
    check_fingerprint(coarse_db, coarse_bundle, strict)
    shortlist = coarse_retrieve(coarse_db, encode_image(coarse_bundle, domain, query), top_n, query_id)
    cand_ids = shortlist.ids
    cand_idx = [coarse_db.index_of(i) for i in cand_ids]

    if fine_db is not None:
        check_fingerprint(fine_db, fine_bundle, strict)
        feats = [fine_db.entries[fine_db.index_of(i)].feature for i in cand_ids]
    else:
        if manifest is None:
            raise ValidationError("need a manifest to re-encode candidates, or a fine feature db")
        by_id = manifest.by_id()
        feats = []
        for i in cand_ids:
            r = by_id[i]
            d = r.domain if db_domain is None else db_domain
            feats.append(encode_image(fine_bundle, d, read_image(manifest.resolve(r))))
    q_fine = encode_image(fine_bundle, domain, query)
    scores = fine_scores(np.stack(feats).astype(np.float64), q_fine)
    # re-rank by fine score, ties by database position
    order = np.lexsort((np.asarray(cand_idx), -scores))
    ranked = tuple((cand_ids[k], float(scores[k])) for k in order)
    best = coarse_db.entries[cand_idx[order[0]]]
    return RetrievalResult(query_id, ranked, "coarse_to_fine", best.pose, tuple(cand_ids))


# -- result files -------------------------------------------------------------

def format_results(results):
    lines = []
    for res in results:
        for rank, (db_id, score) in enumerate(res.ranked, start=1):
            lines.append(f"{res.query_id} {rank} {db_id} {score!r}")
    return "\n".join(lines) + ("\n" if lines else "")


def parse_results(text):
    """Inverse of ``format_results``: ``{query_id: [(db_id, score), ...]}`` in rank order."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise ValidationError(f"results line {lineno}: expected 'query rank db score'")
        qid, rank, db_id, score = parts
        out.setdefault(qid, []).append((int(rank), db_id, float(score)))
    return {q: [(d, s) for _, d, s in sorted(v)] for q, v in out.items()}
