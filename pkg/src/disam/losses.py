"""Training objectives.

Reductions: reconstruction-style terms are element-mean reduced so the loss
weights do not depend on resolution: the cycle term is the mean absolute
error, feature consistency and SAM terms are the root-mean-square difference
(the L2 norm divided by the square root of the element count).  Distances
fed to the adaptive triplet loss are true L2 norms of the flattened tensors,
which keeps the margins on their intended scale.

All functions take tensors or array-likes and return torch scalars; batched
inputs carry the batch in dimension 0.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import torch

from . import samcore
from .errors import EmptyCandidates, NonpositiveMargin, ShapeMismatch, ValidationError


@dataclass(frozen=True)
class LossWeights:
    lambda_cyc: float = 10.0
    lambda_fcl: float = 0.1
    lambda_sam: float = 1000.0
    lambda_trip_fcl: float = 1.0
    lambda_trip_sam: float = 1.0
    m_f: float = 5.0
    alpha_f: float = 2.0
    m_s: float = 0.1
    alpha_s: float = 1000.0
    ramp_fraction: float = 1.0  # current warm-up multiplier, set by the trainer
    lambda_gan: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValidationError(f"{f.name} must be nonnegative")
        if self.m_f <= 0 or self.m_s <= 0:
            raise NonpositiveMargin("margins m_f and m_s must be positive")
        if self.ramp_fraction > 1:
            raise ValidationError("ramp_fraction must lie in [0, 1]")


def _t(x):
    return x if torch.is_tensor(x) else torch.as_tensor(x, dtype=torch.float64)


def _same_shape(a, b, what):
    if a.shape != b.shape:
        raise ShapeMismatch(f"{what}: shapes {tuple(a.shape)} and {tuple(b.shape)} differ")


def _safe_sqrt(x):
    # exact 0 at 0, with a zero (not NaN) gradient there
    return torch.where(x > 0, x.clamp_min(1e-30).sqrt(), torch.zeros_like(x))


def l2_distance(a, b, batched=False):
    """Root-sum-square distance; per entry of dimension 0 when ``batched``."""
    a, b = _t(a), _t(b)
    _same_shape(a, b, "l2_distance")
    diff = (a - b).reshape(a.shape[0], -1) if batched else (a - b).reshape(1, -1)
    d = _safe_sqrt(diff.pow(2).sum(dim=1))
    return d if batched else d[0]


def rms_distance(a, b):
    """``||a - b||_2 / sqrt(numel)`` over the whole (possibly batched) tensor."""
    a, b = _t(a), _t(b)
    return _safe_sqrt((a - b).pow(2).mean())


def cycle_loss(x, x_rec):
    """Mean absolute reconstruction error."""
    x, x_rec = _t(x), _t(x_rec)
    _same_shape(x, x_rec, "cycle_loss")
    return (x_rec - x).abs().mean()


def gan_loss_discriminator(real_scores, fake_scores):
    real_scores, fake_scores = _t(real_scores), _t(fake_scores)
    return (real_scores - 1).pow(2).mean() + fake_scores.pow(2).mean()


def gan_loss_generator(fake_scores):
    return (_t(fake_scores) - 1).pow(2).mean()


def fcl_loss(z, z_cross, stage="coarse"):
    """Feature consistency between an original and a re-encoded translated feature.

    Coarse stage: root-mean-square difference.  Fine stage adds ``1 - Y`` with
    Y the mean channel cosine (averaged over the batch).
    """
    z, z_cross = _t(z), _t(z_cross)
    _same_shape(z, z_cross, "fcl_loss")
    loss = rms_distance(z, z_cross)
    if stage == "fine":
        loss = loss + (1 - samcore.mean_channel_cosine_torch(z, z_cross).mean())
    elif stage != "coarse":
        raise ValidationError(f"unknown stage {stage!r}")
    return loss


def sam_loss(L_self, L_cross):
    """Root-mean-square difference between two activation maps."""
    L_self, L_cross = _t(L_self), _t(L_cross)
    _same_shape(L_self, L_cross, "sam_loss")
    return rms_distance(L_self, L_cross)


def hard_negative_select(anchor, candidates):
    """Candidate closest to ``anchor`` in L2; ties go to the lowest index.

    Returns ``(selected, index)``.
    """
    if len(candidates) == 0:
        raise EmptyCandidates("no negative candidates")
    anchor = _t(anchor)
    stack = torch.stack([_t(c) for c in candidates])
    if stack.shape[1:] != anchor.shape:
        raise ShapeMismatch(f"candidate shape {tuple(stack.shape[1:])} != anchor {tuple(anchor.shape)}")
    d = (stack - anchor).flatten(start_dim=1).pow(2).sum(dim=1)
    index = int(torch.argmin(d))  # first minimum on ties
    return candidates[index], index


def adaptive_triplet(d_pos, d_neg, m, alpha):
    """``max(0, 1 - d_neg / (d_pos + m * exp(-alpha * d_pos)))``.

    The margin shrinks from ``m`` toward 0 as the positive distance grows;
    ``alpha = 0`` gives a constant margin.
    """
    if m <= 0:
        raise NonpositiveMargin(f"margin must be positive, got {m}")
    if alpha < 0:
        raise ValidationError("alpha must be nonnegative")
    d_pos, d_neg = _t(d_pos), _t(d_neg)
    return torch.clamp(1 - d_neg / (d_pos + m * torch.exp(-alpha * d_pos)), min=0)


def _scalar(x):
    return float(x.detach()) if torch.is_tensor(x) else float(x)


@dataclass
class LossReport:
    """Per-term values, the weight each was multiplied by, and the total."""

    values: dict
    weights: dict
    total: float
    total_tensor: object = field(default=None, repr=False)
    extras: dict = field(default_factory=dict)

    def line(self, epoch, step):
        parts = [str(epoch), str(step)]
        parts += [f"{k}={v:.9g}" for k, v in self.values.items()]
        parts += [f"{k}={v:.9g}" for k, v in self.extras.items()]
        parts.append(f"total={self.total:.9g}")
        return " ".join(parts)


COARSE_TERMS = ("gan", "cyc", "fcl", "trip_fcl")
FINE_TERMS = COARSE_TERMS + ("sam", "trip_sam")


def term_weights(weights: LossWeights, ramp=1.0, stage="coarse"):
    """Multiplier for each loss family; adversarial terms are not ramped."""
    w = {
        "gan": weights.lambda_gan,
        "cyc": weights.lambda_cyc * ramp,
        "fcl": weights.lambda_fcl * ramp,
        "trip_fcl": weights.lambda_trip_fcl * ramp,
    }
    if stage == "fine":
        w["sam"] = weights.lambda_sam * ramp
        w["trip_sam"] = weights.lambda_trip_sam * ramp
    return w


def _weighted_total(terms, weights, ramp, stage):
    if ramp is None:
        ramp = weights.ramp_fraction
    family_w = term_weights(weights, ramp, stage)
    families = tuple(family_w)
    values, applied = {}, {}
    total = 0.0
    for name, value in terms.items():
        family = name.rsplit("_", 1)[0] if name.endswith(("_i", "_j")) else name
        if family not in families:
            raise ValidationError(f"term {name!r} does not belong to the {stage} objective")
        w = family_w[family]
        values[name] = _scalar(value)
        applied[name] = w
        total = total + w * value
    # the reported total is recomputed in float64 from the logged values
    total_f = float(sum(applied[k] * values[k] for k in values))
    return LossReport(values, applied, total_f, total if torch.is_tensor(total) else None)


def coarse_total(terms, weights: LossWeights, ramp=None) -> LossReport:
    """GAN + cycle + feature consistency + FCL triplet, for both directions.

    ``terms`` maps names such as ``cyc_i``/``cyc_j`` to scalar values; the
    family is the name without its ``_i``/``_j`` direction suffix.  Non
    adversarial families are scaled by ``ramp`` (default: ``weights.ramp_fraction``).
    """
    return _weighted_total(terms, weights, ramp, "coarse")


def fine_total(terms, weights: LossWeights, ramp=None) -> LossReport:
    """Coarse objective plus the SAM loss and the SAM triplet loss."""
    return _weighted_total(terms, weights, ramp, "fine")
