"""Loss terms and the inverse-error denoiser weighting.

The differentiable terms take torch tensors with arbitrary leading batch
dimensions (a representation is ``(..., C, r)``) and return one value per
batch element. Passing numpy arrays or lists instead gives float64 results
as numpy scalars/arrays, which is what the reports and oracle tests use.
"""

from __future__ import annotations

import csv
import functools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ShapeMismatchError

WEIGHT_FLOOR = 1e-12


@dataclass
class LossConfig:
    tau: float = 0.2
    alpha: float = 0.5
    gamma: float = 0.1
    k_fraction: float = 0.3
    aug_noise_std: float = 0.3
    beta: float = 2.0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not 0 < self.k_fraction < 1:
            raise ValueError("k_fraction must lie in (0, 1)")
        if not self.aug_noise_std > 0 or not self.beta > 0:
            raise ValueError("aug_noise_std and beta must be positive")


def _tensor_api(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        if any(isinstance(a, torch.Tensor) for a in args):
            return fn(*args, **kwargs)
        out = fn(*(torch.as_tensor(np.asarray(a, dtype=np.float64)) for a in args), **kwargs)
        return out.numpy()[()] if out.ndim == 0 else out.numpy()

    return wrapper


def _same_shape(*tensors):
    shapes = {tuple(t.shape) for t in tensors}
    if len(shapes) != 1:
        raise ShapeMismatchError(f"shape mismatch: {sorted(shapes)}")


@_tensor_api
def reconstruction_error(z_future, z_hat):
    """Mean over steps of the per-step squared error averaged over channels."""
    _same_shape(z_future, z_hat)
    if z_future.ndim < 2 or z_future.shape[-2] < 1:
        raise ShapeMismatchError("need at least one (k, r) step matrix")
    return (z_future - z_hat).pow(2).mean(dim=(-2, -1))


def _pooled_cosine(a, b):
    # cosine of time-averaged vectors; defined as 0 when either vector is zero
    pa, pb = a.mean(dim=-2), b.mean(dim=-2)
    na, nb = pa.norm(dim=-1), pb.norm(dim=-1)
    ok = (na > 0) & (nb > 0)
    denom = torch.where(ok, na * nb, torch.ones_like(na))
    return torch.where(ok, (pa * pb).sum(dim=-1) / denom, torch.zeros_like(na))


@_tensor_api
def cosine_similarity(a, b):
    _same_shape(a, b)
    return _pooled_cosine(a, b)


@_tensor_api
def direction_regularizer(negative, anchor, positive):
    """Alignment of (anchor - negative) with (positive - negative)."""
    _same_shape(negative, anchor, positive)
    return _pooled_cosine(anchor - negative, positive - negative)


def contrastive_terms(negative, anchor, positive, tau):
    """Per-triplet ``(first_term, regularizer)`` as tensors."""
    s_pos = _pooled_cosine(anchor, positive) / tau
    s_neg = _pooled_cosine(anchor, negative) / tau
    # -log(e^p / (e^p + e^n)) == softplus(n - p)
    first = F.softplus(s_neg - s_pos)
    reg = _pooled_cosine(anchor - negative, positive - negative)
    return first, reg


@_tensor_api
def contrastive_loss(negative, anchor, positive, tau=0.2, alpha=0.5):
    """Triplet loss: two-way softmax toward the positive, minus ``alpha`` times the direction term."""
    _same_shape(negative, anchor, positive)
    first, reg = contrastive_terms(negative, anchor, positive, tau)
    return first - alpha * reg


def ar_loss(errors_raw, errors_aug=None):
    """Mean of ``e_i + e_i^(n)``; with ``errors_aug=None`` the plain mean of ``e_i``."""
    if errors_aug is None:
        if isinstance(errors_raw, torch.Tensor):
            return errors_raw.mean()
        return float(np.mean(np.asarray(errors_raw, dtype=np.float64)))
    if len(errors_raw) != len(errors_aug):
        raise ShapeMismatchError(f"{len(errors_raw)} raw errors vs {len(errors_aug)} augmented")
    if len(errors_raw) < 1:
        raise ValueError("need at least one sample")
    if isinstance(errors_raw, torch.Tensor):
        return (errors_raw + errors_aug).mean()
    a = np.asarray(errors_raw, dtype=np.float64)
    b = np.asarray(errors_aug, dtype=np.float64)
    return float(np.mean(a + b))


@dataclass
class WeightTable:
    """Per-sample denoiser weights; each row sums to one over its valid entries."""

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ShapeMismatchError("weights must be an (N, m) matrix")

    @classmethod
    def uniform(cls, n, m, mask=None):
        w = np.ones((n, m)) if mask is None else np.asarray(mask, dtype=np.float64)
        return cls(w / w.sum(axis=1, keepdims=True))

    def to_csv(self, path, names, sample_index=None):
        path = Path(path)
        idx = range(len(self.weights)) if sample_index is None else sample_index
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_index", "denoiser_name", "weight"])
            for i, row in zip(idx, self.weights):
                for name, value in zip(names, row):
                    w.writerow([int(i), name, repr(float(value))])
        return path

    def column_means(self):
        return self.weights.mean(axis=0)


def denoiser_weights(errors, mask=None) -> WeightTable:
    """Row-normalised inverse reconstruction errors.

    Errors are clamped below at ``WEIGHT_FLOOR``. Entries where ``mask`` is
    False (denoisers that failed on that sample) get weight 0 and the rest of
    the row is renormalised.
    """
    e = np.asarray(errors, dtype=np.float64)
    if e.ndim == 1:
        e = e[None]
    if np.isnan(e).any():
        raise ValueError("reconstruction errors contain NaN")
    inv = 1.0 / np.maximum(e, WEIGHT_FLOOR)
    if mask is not None:
        inv = np.where(np.asarray(mask, dtype=bool), inv, 0.0)
        if (inv.sum(axis=1) == 0).any():
            raise ValueError("a sample has no valid denoiser left")
    return WeightTable(inv / inv.sum(axis=1, keepdims=True))


def weighted_contrastive_loss(losses, weights):
    """Weighted double sum over samples and denoisers, divided by the number of samples."""
    w = weights.weights if isinstance(weights, WeightTable) else weights
    if isinstance(losses, torch.Tensor):
        w = torch.as_tensor(np.asarray(w), dtype=losses.dtype)
        _same_shape(losses, w)
        return (w * losses).sum() / losses.shape[0]
    losses = np.asarray(losses, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    _same_shape(losses, w)
    return float((w * losses).sum() / losses.shape[0])


def joint_loss(l_ar, l_cl, cfg_or_gamma=0.1):
    gamma = getattr(cfg_or_gamma, "gamma", cfg_or_gamma)
    return gamma * l_ar + l_cl
