"""Finite-difference check of the closed-form similarity gradient."""

from dataclasses import dataclass

import numpy as np

from . import samcore


def central_difference(f, x, step=1e-4):
    """Gradient of scalar ``f`` at ``x`` by central differences, same shape as ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        fp = f(x)
        flat[k] = orig - step
        fm = f(x)
        flat[k] = orig
        g[k] = (fp - fm) / (2 * step)
    return grad


def relative_error(analytic, numeric, floor=1e-8):
    """Max of |a - n| / max(|a|, |n|) over entries where |a| exceeds ``floor``."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    mask = np.abs(analytic) > floor
    if not mask.any():
        return 0.0
    scale = np.maximum(np.abs(analytic[mask]), np.abs(numeric[mask]))
    return float(np.max(np.abs(analytic[mask] - numeric[mask]) / scale))


@dataclass
class GradcheckResult:
    max_rel_error: float
    n_pairs: int
    tolerance: float

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def check_similarity_gradient(n_pairs=50, shape=(8, 5, 5), seed=0, step=1e-4, tolerance=1e-4):
    """Compare ``samcore.similarity_gradient`` with central differences on random pairs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_pairs):
        z_i = rng.normal(size=shape)
        z_j = rng.normal(size=shape)
        analytic = samcore.similarity_gradient(z_i, z_j)
        numeric = central_difference(lambda z: samcore.mean_channel_cosine(z, z_j), z_i, step)
        worst = max(worst, relative_error(analytic, numeric))
    return GradcheckResult(worst, n_pairs, tolerance)
