"""Synthetic multi-domain places.

Every place is a procedural scene of coloured shapes; each domain re-renders
it with its own photometric transform (hue rotation, gain, gamma, a smooth
tint field).  Views of one place are horizontal shifts of the same canvas.
This script writes a small dataset and prints how different the domains are
on average, so you can see what the encoders have to become invariant to.

    python demos/01_synthetic_domains.py /tmp/disam_demo
"""

import sys
from pathlib import Path

import numpy as np

from disam.datamodel import read_image
from disam.synthgen import SynthConfig, generate

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "data"
config = SynthConfig(n_places=6, n_domains=3, views_per_place=2, image_size=64, seed=0)
manifest = generate(config, out)
print(f"wrote {len(manifest.records)} images to {out}")
for split in ("database", "query"):
    print(f"  {split:8s}: {len(manifest.by_split(split))} records")

# photometric gap between domains for the same place and view (same pose)
pixels = {r.id: read_image(manifest.resolve(r)) for r in manifest.records}
first_place = [r for r in manifest.records if r.place == 0]
for r in first_place:
    print(f"  place 0 / {manifest.domain_names[r.domain]:10s} ({r.split}): mean pixel {pixels[r.id].mean():+.3f}")

ref = [r for r in manifest.records if r.domain == 0]
for d in range(1, config.n_domains):
    other = [r for r in manifest.records if r.domain == d]
    gaps = [np.abs(pixels[a.id] - pixels[b.id]).mean()
            for a in ref for b in other if a.place == b.place and a.pose == b.pose]
    print(f"  domain 0 vs {d}: mean |pixel difference| {np.mean(gaps):.3f} over {len(gaps)} pairs")
