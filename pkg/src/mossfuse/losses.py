"""Training objectives.

L1 terms are mean-reduced over all elements. Degradation operators are passed
as callables mapping an (N, C, H, W) tensor to its degraded version, so the
same functions serve ground-truth and estimated operators.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Callable

import torch
import torch.nn.functional as F

from .degradation import spatial_degrade_t, spectral_degrade_t


class DegenerateFeatureError(ValueError):
    pass


@dataclass
class LossWeights:
    alpha1: float = 0.1
    alpha2: float = 1.0
    alpha3: float = 1.0

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "alpha3"):
            v = float(getattr(self, name))
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"{name} must be a finite non-negative number, got {v}")
            setattr(self, name, v)


@dataclass
class LossReport:
    l_ma: object
    l_sc: object
    l_sct: object
    l_de: object
    total: object

    def as_floats(self):
        def scalar(v):
            return float(v.detach()) if hasattr(v, "detach") else float(v)
        return {f.name: scalar(getattr(self, f.name)) for f in fields(self)}


def operators(kernel, scale, srf):
    """Wrap tensors into ``(spatial, spectral)`` callables."""
    return (lambda t: spatial_degrade_t(t, kernel, scale),
            lambda t: spectral_degrade_t(t, srf))


def _cos(a, b):
    a, b = a.flatten(1), b.flatten(1)
    na, nb = a.norm(dim=1), b.norm(dim=1)
    if bool((na == 0).any() or (nb == 0).any()):
        raise DegenerateFeatureError("zero-norm feature map")
    return ((a * b).sum(dim=1) / (na * nb)).mean()


def similarity(a, b):
    """exp(cos(a, b)) over flattened maps, cosine averaged over the batch."""
    return torch.exp(_cos(a, b))


def subspace_clustering_loss(feats):
    sYx = similarity(feats.shared_Y, feats.shared_x)
    denom = (similarity(feats.shared_Y, feats.comp_Y) + similarity(feats.shared_x, feats.comp_x)
             + sYx + similarity(feats.comp_Y, feats.comp_x))
    return -torch.log(sYx / denom)


def subspace_clustering_loss_variant(feats, which):
    """``no_aggregate`` keeps only the repulsion terms, ``no_repel`` only the attraction."""
    if which == "no_aggregate":
        return torch.log(similarity(feats.comp_Y, feats.comp_x)
                         + similarity(feats.shared_Y, feats.comp_Y)
                         + similarity(feats.shared_x, feats.comp_x))
    if which == "no_repel":
        return -torch.log(similarity(feats.shared_Y, feats.shared_x))
    raise ValueError(f"unknown variant {which!r}")


def _l1(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return F.l1_loss(a, b)


def sct_loss(Y, x, recon, spatial: Callable, spectral: Callable, include_lrmsi=True):
    """Self-reconstruction of both inputs plus agreement of the decoded LR-MSI
    with both degradation routes. ``recon`` is ``(Y_hat, x_hat, y_hat)``."""
    y_hat_Y, x_hat, lrmsi_hat = recon
    loss = _l1(Y, y_hat_Y) + _l1(x, x_hat)
    if include_lrmsi:
        loss = loss + _l1(spatial(Y), lrmsi_hat) + _l1(spectral(x), lrmsi_hat)
    return loss


def degradation_loss(Y, x, spatial: Callable, spectral: Callable):
    return _l1(spatial(Y), spectral(x))


def aggregation_loss(X_hat, Y, x, spatial: Callable, spectral: Callable):
    return _l1(Y, spectral(X_hat)) + _l1(x, spatial(X_hat))


def total_loss(l_ma, l_sc, l_sct, l_de, weights: LossWeights = None) -> LossReport:
    w = weights or LossWeights()
    total = l_ma + w.alpha1 * l_sc + w.alpha2 * l_sct + w.alpha3 * l_de
    return LossReport(l_ma, l_sc, l_sct, l_de, total)
