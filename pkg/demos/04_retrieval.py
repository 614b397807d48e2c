"""Coarse-to-fine retrieval with a feature database on disk.

Database images are encoded once with the reference-domain encoder and
stored in a feature-database file.  A query is encoded with its own domain's
encoder; the coarse model shortlists the top N entries and the fine model
re-ranks only those.  Needs the checkpoints written by ``03_training.py``.

    python demos/04_retrieval.py /tmp/disam_demo
"""

import sys
from pathlib import Path

from disam import retrieval
from disam.datamodel import load_manifest, read_image
from disam.network import load_checkpoint

root = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "training"
manifest = load_manifest(root / "data" / "manifest.tsv")
coarse = load_checkpoint(root / "coarse" / "latest.ckpt")
fine = load_checkpoint(root / "fine" / "latest.ckpt")

retrieval.build_feature_db(coarse, manifest, domain=0, out_path=root / "coarse.db")
db = retrieval.read_feature_db(root / "coarse.db")
fine_db = retrieval.build_feature_db(fine, manifest, domain=0)
print(f"feature database: {len(db)} entries, fingerprint {db.fingerprint[:12]}...")

by_id = manifest.by_id()
hits = 0
queries = manifest.by_split("query")
for r in queries:
    pixels = read_image(manifest.resolve(r))
    res = retrieval.coarse_to_fine(db, fine, coarse, pixels, r.domain, top_n=3, fine_db=fine_db, query_id=r.id)
    best = by_id[res.ids[0]]
    hits += best.place == r.place
    shortlist = ", ".join(f"{i}(place {by_id[i].place})" for i in res.candidates)
    print(f"{r.id:>14s} place {r.place:2d} domain {r.domain}: shortlist [{shortlist}] -> {res.ids[0]}"
          f"{'' if best.place == r.place else '  (wrong place)'}")
print(f"\ncoarse-to-fine top-1 place accuracy: {hits}/{len(queries)}")
