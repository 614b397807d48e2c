"""Localization accuracy and recall@N.

A query counts as localized at threshold (t, a) when the predicted pose is
within t meters and a degrees of the ground truth.  Rotation error is the
geodesic angle between unit quaternions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np

from .datamodel import Pose
from .errors import MissingGroundTruth, MissingPlaceLabel, NonUnitQuaternion, ValidationError

RADIUS_RULE_METERS = 5.0


@dataclass(frozen=True)
class ErrorThreshold:
    max_position: float  # meters
    max_angle: float  # degrees

    def __post_init__(self):
        if self.max_position <= 0 or self.max_angle <= 0:
            raise ValidationError("thresholds must be positive")

    def label(self):
        return f"{self.max_position:g}m/{self.max_angle:g}deg"


DEFAULT_THRESHOLDS = (ErrorThreshold(0.25, 2), ErrorThreshold(0.5, 5), ErrorThreshold(5, 10))


def parse_thresholds(text):
    """``"0.25,2;0.5,5"`` -> list of ErrorThreshold."""
    out = []
    for part in text.split(";"):
        if not part.strip():
            continue
        try:
            t, a = (float(v) for v in part.split(","))
        except ValueError:
            raise ValidationError(f"bad threshold {part!r}; expected 'meters,degrees'") from None
        out.append(ErrorThreshold(t, a))
    if not out:
        raise ValidationError("no thresholds given")
    return out


def _components(pose):
    if isinstance(pose, Pose):
        return np.array(pose.position), np.array(pose.orientation)
    arr = np.asarray(pose, dtype=np.float64)
    if arr.shape != (7,):
        raise ValidationError("pose arrays must be (tx, ty, tz, qw, qx, qy, qz)")
    return arr[:3], arr[3:]


def pose_error(a, b):
    """``(position error in meters, rotation error in degrees)``."""
    pa, qa = _components(a)
    pb, qb = _components(b)
    for q in (qa, qb):
        if abs(np.linalg.norm(q) - 1.0) > 1e-3:
            raise NonUnitQuaternion(f"quaternion norm {np.linalg.norm(q):.6f} is not 1")
    dot = min(1.0, abs(float(np.dot(qa, qb))))
    return float(np.linalg.norm(pa - pb)), math.degrees(2.0 * math.acos(dot))


@dataclass
class EvalReport:
    thresholds: list
    percentages: list  # one per threshold, in [0, 100]
    n_queries: int
    per_condition: dict = field(default_factory=dict)  # condition -> (percentages, count)
    recall: list = field(default_factory=list)  # recall@1..N in [0, 1]

    def check_monotone(self):
        """Looser thresholds never score lower; recall never drops with N."""
        groups = [(self.percentages, self.thresholds)]
        groups += [(p, self.thresholds) for p, _ in self.per_condition.values()]
        for pct, th in groups:
            for a in range(len(th)):
                for b in range(len(th)):
                    looser = (th[b].max_position >= th[a].max_position
                              and th[b].max_angle >= th[a].max_angle)
                    if looser and pct[b] < pct[a]:
                        return False
        return all(y >= x for x, y in zip(self.recall, self.recall[1:]))

    def table(self):
        head = ["condition", "n"] + [t.label() for t in self.thresholds]
        rows = [["all", str(self.n_queries)] + [f"{p:.2f}" for p in self.percentages]]
        for cond, (pct, n) in sorted(self.per_condition.items()):
            rows.append([str(cond), str(n)] + [f"{p:.2f}" for p in pct])
        widths = [max(len(r[c]) for r in [head] + rows) for c in range(len(head))]
        fmt = "  ".join("{:>%d}" % w for w in widths)
        lines = [fmt.format(*head)] + [fmt.format(*r) for r in rows]
        if self.recall:
            lines.append("recall@N: " + " ".join(f"{n}:{r:.4f}" for n, r in enumerate(self.recall, 1)))
        return "\n".join(lines)

    def lines(self):
        """Machine-readable report, one ``key=value`` record per line."""
        out = []
        for t, p in zip(self.thresholds, self.percentages):
            out.append(f"accuracy condition=all position={t.max_position:g} angle={t.max_angle:g} "
                       f"percent={p!r} n={self.n_queries}")
        for cond, (pct, n) in sorted(self.per_condition.items()):
            for t, p in zip(self.thresholds, pct):
                out.append(f"accuracy condition={cond} position={t.max_position:g} "
                           f"angle={t.max_angle:g} percent={p!r} n={n}")
        for n, r in enumerate(self.recall, 1):
            out.append(f"recall n={n} value={r!r}")
        return out


def _percentages(errors, thresholds):
    if not errors:
        return [0.0] * len(thresholds)
    return [
        100.0 * sum(1 for d, a in errors if d <= t.max_position and a <= t.max_angle) / len(errors)
        for t in thresholds
    ]


def localize_percentages(predictions, ground_truth: Mapping, thresholds=DEFAULT_THRESHOLDS,
                         conditions: Optional[Mapping] = None) -> EvalReport:
    """Percentage of queries localized within each threshold.

    ``predictions`` is an iterable of ``(query_id, predicted_pose)``;
    ``conditions`` optionally maps query ids to a condition name for the
    per-condition breakdown.
    """
    thresholds = list(thresholds)
    errors = {}
    for qid, pose in predictions:
        if qid not in ground_truth or ground_truth[qid] is None:
            raise MissingGroundTruth(f"no ground-truth pose for query {qid!r}")
        errors[qid] = pose_error(pose, ground_truth[qid])
    report = EvalReport(thresholds, _percentages(list(errors.values()), thresholds), len(errors))
    if conditions is not None:
        groups = {}
        for qid, err in errors.items():
            groups.setdefault(conditions[qid], []).append(err)
        report.per_condition = {c: (_percentages(e, thresholds), len(e)) for c, e in groups.items()}
    return report


def recall_at_n(ranked_ids: Mapping, query_places: Mapping, db_places: Mapping, n_max,
                query_poses: Optional[Mapping] = None, db_poses: Optional[Mapping] = None,
                radius=None):
    """Fraction of queries with a correct database entry among their top N, N = 1..n_max.

    ``ranked_ids`` maps query id to its ranked database ids.  An entry is
    correct when it shares the query's place label, or, with ``radius`` and
    poses given, when it lies within ``radius`` meters of the query.
    """
    if n_max < 1:
        raise ValidationError("n_max must be >= 1")
    if not ranked_ids:
        return [0.0] * n_max
    hits = np.zeros(n_max)
    for qid, ids in ranked_ids.items():
        if radius is not None:
            if query_poses is None or db_poses is None:
                raise ValidationError("radius rule needs query and database poses")
            qpos = np.array(query_poses[qid].position)
            correct = [np.linalg.norm(np.array(db_poses[d].position) - qpos) <= radius for d in ids]
        else:
            if qid not in query_places:
                raise MissingPlaceLabel(f"no place label for query {qid!r}")
            missing = [d for d in ids[:n_max] if d not in db_places]
            if missing:
                raise MissingPlaceLabel(f"no place label for database entry {missing[0]!r}")
            correct = [db_places[d] == query_places[qid] for d in ids[:n_max]]
        first = next((k for k, c in enumerate(correct[:n_max]) if c), None)
        if first is not None:
            hits[first:] += 1
    return [float(v) for v in hits / len(ranked_ids)]
