"""Gradient-weighted similarity activation maps (Grad-SAM).

For two feature maps ``z_i, z_j`` of shape (n, h, w) the similarity score is
the mean over channels of the spatial cosine similarity.  Its gradient with
respect to ``z_i``, summed over space, weights the channels of ``z_i``; the
rectified weighted sum is the activation map.

The gradient is written out in closed form.  The numpy functions work in
float64 and are the reference; the ``*_torch`` variants take batched tensors,
stay differentiable (the training losses backpropagate through the weights)
and are checked against the numpy path and against autograd.
"""

import numpy as np
import torch

from .errors import ShapeMismatch

EPS = 1e-8


def _pair(z_i, z_j):
    a = np.asarray(z_i, dtype=np.float64)
    b = np.asarray(z_j, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3:
        raise ShapeMismatch(f"feature maps must share an (n, h, w) shape, got {a.shape} and {b.shape}")
    return a, b


def _channel_terms(a, b):
    na2 = np.einsum("kpq,kpq->k", a, a)
    nb2 = np.einsum("kpq,kpq->k", b, b)
    prod = np.sqrt(na2) * np.sqrt(nb2)
    # norm product floored at EPS: dead channels score 0 with a finite gradient
    denom = np.maximum(prod, EPS)
    cos = np.einsum("kpq,kpq->k", a, b) / denom
    return na2, prod, denom, cos


def channel_cosines(z_i, z_j):
    a, b = _pair(z_i, z_j)
    return _channel_terms(a, b)[3]


def mean_channel_cosine(z_i, z_j) -> float:
    """Similarity score in [-1, 1]: mean per-channel cosine over the spatial grid."""
    return float(np.mean(channel_cosines(z_i, z_j)))


def similarity_gradient(z_i, z_j):
    """dY/dz_i for Y = mean_channel_cosine(z_i, z_j), shape (n, h, w)."""
    a, b = _pair(z_i, z_j)
    na2, prod, denom, cos = _channel_terms(a, b)
    free = prod > EPS  # where the floor is active the score is linear in z_i
    scale = np.where(free, cos / np.where(free, na2, 1.0), 0.0)
    g = b / denom[:, None, None] - scale[:, None, None] * a
    return g / a.shape[0]


def sam_weights(z_i, z_j):
    """Per-channel weights: spatial sums of dY/dz_i.  Swap arguments for the reverse direction."""
    return similarity_gradient(z_i, z_j).sum(axis=(1, 2))


def activation_map(z_i, z_j):
    """ReLU of the weight-summed channels of ``z_i`` given reference ``z_j``; shape (h, w)."""
    a, _ = _pair(z_i, z_j)
    w = sam_weights(z_i, z_j)
    return np.maximum(np.einsum("k,kpq->pq", w, a), 0.0)


# -- batched torch versions --------------------------------------------------

def _check_torch(z_i, z_j):
    if z_i.shape != z_j.shape or z_i.dim() not in (3, 4):
        raise ShapeMismatch(f"feature maps must share a shape, got {tuple(z_i.shape)} and {tuple(z_j.shape)}")


def _channel_terms_torch(z_i, z_j):
    na2 = z_i.pow(2).sum(dim=(-2, -1))
    nb2 = z_j.pow(2).sum(dim=(-2, -1))
    # the tiny offset keeps d sqrt / dx finite at exactly zero
    prod = (na2 + 1e-30).sqrt() * (nb2 + 1e-30).sqrt()
    denom = prod.clamp(min=EPS)
    cos = (z_i * z_j).sum(dim=(-2, -1)) / denom
    return na2, prod, denom, cos


def channel_cosines_torch(z_i, z_j):
    _check_torch(z_i, z_j)
    return _channel_terms_torch(z_i, z_j)[3]


def mean_channel_cosine_torch(z_i, z_j):
    """Score per leading batch index (or a scalar for unbatched input)."""
    return channel_cosines_torch(z_i, z_j).mean(dim=-1)


def sam_weights_torch(z_i, z_j):
    _check_torch(z_i, z_j)
    n = z_i.shape[-3]
    na2, prod, denom, cos = _channel_terms_torch(z_i, z_j)
    free = prod > EPS
    scale = torch.where(free, cos / torch.where(free, na2, torch.ones_like(na2)), torch.zeros_like(cos))
    # spatial sums of the closed-form gradient, without materialising it
    return (z_j.sum(dim=(-2, -1)) / denom - scale * z_i.sum(dim=(-2, -1))) / n


def activation_map_torch(z_i, z_j):
    w = sam_weights_torch(z_i, z_j)
    return torch.relu((w[..., :, None, None] * z_i).sum(dim=-3))
