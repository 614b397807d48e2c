"""Pose-error evaluation and recall@N.

A retrieved database entry's pose is the localization estimate.  Accuracy is
the percentage of queries within each (meters, degrees) threshold; recall@N
asks whether a correct place appears among the first N results.  This script
walks through a hand-sized example, then checks recall@N of a random ranking
against its expected value N / (number of places).

    python demos/05_evaluation.py
"""

import math

import numpy as np

from disam.datamodel import Pose
from disam.evaluation import DEFAULT_THRESHOLDS, localize_percentages, pose_error, recall_at_n

origin = Pose((0, 0, 0), (1, 0, 0, 0))


def shifted(dx, yaw_deg):
    return Pose.from_yaw((dx, 0.0, 0.0), math.radians(yaw_deg))


predictions = [("q1", shifted(0.1, 1)), ("q2", shifted(0.4, 3)), ("q3", shifted(6, 20))]
for qid, pose in predictions:
    d, a = pose_error(pose, origin)
    print(f"{qid}: {d:.2f} m, {a:.1f} deg")

report = localize_percentages(predictions, {q: origin for q, _ in predictions}, DEFAULT_THRESHOLDS,
                              conditions={"q1": "day", "q2": "day", "q3": "night"})
print()
print(report.table())

# recall@N for a random ranking of 24 places: expected N / 24
rng = np.random.default_rng(0)
n_places, n_queries = 24, 2000
ranked = {f"q{k}": [f"d{j}" for j in rng.permutation(n_places)] for k in range(n_queries)}
recall = recall_at_n(ranked, {f"q{k}": k % n_places for k in range(n_queries)},
                     {f"d{j}": j for j in range(n_places)}, 5)
print("\nrandom ranking recall@1..5:", " ".join(f"{r:.3f}" for r in recall),
      "(expected", " ".join(f"{n / n_places:.3f}" for n in range(1, 6)) + ")")
