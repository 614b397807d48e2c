"""Coarse then fine training on a small synthetic set.

The coarse stage trains per-domain encoders/decoders with adversarial, cycle,
feature-consistency and adaptive-triplet losses.  The fine stage warm-starts
from it and adds the activation-map losses.  Each step is logged to
``metrics.log``; this script prints the per-epoch summaries and the recall of
the resulting models.

    python demos/03_training.py /tmp/disam_demo [coarse_epochs] [fine_epochs]
"""

import sys
from pathlib import Path

from disam.experiment import DeskExperiment, format_recall, random_baseline, run_experiment
from disam.network import NetworkConfig
from disam.synthgen import SynthConfig

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out") / "training"
coarse_epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 4
fine_epochs = int(sys.argv[3]) if len(sys.argv) > 3 else 2

exp = DeskExperiment(
    synth=SynthConfig(n_places=8, n_domains=3, views_per_place=2, image_size=32, seed=0),
    network=NetworkConfig(image_size=32, base_channels=8, latent_channels=32),
    coarse_epochs=coarse_epochs, fine_epochs=fine_epochs, batch_size=4,
)
result = run_experiment(exp, out)

for stage in ("coarse", "fine"):
    log = out / stage / "epochs.log"
    if log.exists():
        print(f"--- {stage} epoch summaries ({log})")
        print(log.read_text().rstrip())

print(f"\nrandom baseline R@1 = {random_baseline(exp.synth.n_places):.3f}")
print(format_recall("untrained", result.untrained))
print(format_recall("coarse", result.coarse))
if result.fine is not None:
    print(format_recall("fine", result.fine))
    print(format_recall("coarse-to-fine", result.coarse_to_fine))
print("timings: " + ", ".join(f"{k} {v:.1f}s" for k, v in result.seconds.items()))
