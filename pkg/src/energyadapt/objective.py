"""Training losses, with and without the categorical latent code.

Gradient routing, term by term:

    classification on positives      -> trunk, classifier, posterior head
    KL(q(z|d) || p(z|x)) positives   -> trunk, both latent heads
    energy of positives              -> trunk, energy net, posterior head (via z)
    energy of adapted negatives      -> energy net only
    adapted-sample bracket           -> adapted features only

The bracket evaluates the energy net, classifier and latent heads with frozen
weights, so its gradient lands on the adapted features and, through the
chain's identity path, on whatever produced the chain starts.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nets import kl_diag_gauss, reparam_sample


class ClassAbsent(KeyError):
    """The requested class has no sample in the batch."""


def class_center(features, labels, cls):
    """Mean feature of the rows labelled ``cls``."""
    labels = np.asarray(labels)
    rows = np.flatnonzero(labels == cls)
    if rows.size == 0:
        raise ClassAbsent(cls)
    return np.asarray(features)[rows].mean(axis=0)


def center_matrix(labels, ref_labels=None):
    """Row-stochastic matrix M with ``M @ X_ref`` = same-class mean of ``X_ref`` per row.

    Rows whose class is absent from ``ref_labels`` are all zero; the returned
    mask marks which rows were covered.
    """
    labels = np.asarray(labels)
    ref = labels if ref_labels is None else np.asarray(ref_labels)
    same = (labels[:, None] == ref[None, :]).astype(np.float64)
    counts = same.sum(axis=1)
    covered = counts > 0
    same[covered] /= counts[covered, None]
    return same, covered


def negative_centers(neg_labels, neg_features, pos_labels, pos_features):
    """Class center for every negative, from the positive batch when the class is there.

    Classes missing from the positive batch fall back to the negatives' own
    batch.
    """
    m_pos, covered = center_matrix(neg_labels, pos_labels)
    out = m_pos @ np.asarray(pos_features)
    if not covered.all():
        m_neg, _ = center_matrix(neg_labels, neg_labels)
        out[~covered] = (m_neg @ np.asarray(neg_features))[~covered]
    return out


@dataclass
class LossWeights:
    classification: float = 1.0
    kl: float = 1.0
    pos_energy: float = 1.0
    neg_energy: float = 1.0
    adapted: float = 1.0
    # sign of the KL term inside the adapted-sample bracket; -1 reproduces the
    # printed objective, which is unbounded below in the adapted features
    adapted_kl_sign: float = 1.0


@dataclass
class LossBreakdown:
    """Loss components as graph nodes; ``total`` is what gets differentiated.

    ``neg_energy`` is stored with a positive sign and enters the total
    negated.
    """

    classification: Tensor
    kl: Tensor
    pos_energy: Tensor
    neg_energy: Tensor
    adapted: Tensor
    total: Tensor
    weights: LossWeights

    def values(self):
        return {
            "classification": float(self.classification.value),
            "kl": float(self.kl.value),
            "pos_energy": float(self.pos_energy.value),
            "neg_energy": float(self.neg_energy.value),
            "adapted": float(self.adapted.value),
            "total": float(self.total.value),
        }

    def signed_sum(self):
        w = self.weights
        return (w.classification * float(self.classification.value) + w.kl * float(self.kl.value)
                + w.pos_energy * float(self.pos_energy.value) - w.neg_energy * float(self.neg_energy.value)
                + w.adapted * float(self.adapted.value))


def _combine(cls_t, kl_t, pos_t, neg_t, adapted_t, weights):
    total = ad.add(ad.mul(weights.classification, cls_t), ad.mul(weights.kl, kl_t))
    total = ad.add(total, ad.mul(weights.pos_energy, pos_t))
    total = ad.sub(total, ad.mul(weights.neg_energy, neg_t))
    total = ad.add(total, ad.mul(weights.adapted, adapted_t))
    return LossBreakdown(cls_t, kl_t, pos_t, neg_t, adapted_t, total, weights)


def _require_tensor(neg_adapted):
    if not isinstance(neg_adapted, Tensor):
        raise TypeError("neg_adapted must be a Tensor carrying the chain's graph, not a raw array")


def loss_no_latent(pos_x, pos_y, neg_adapted, neg_y, model, weights=None, rng=None, train=False):
    """Objective without the latent code; the z slot of every network is zero."""
    _require_tensor(neg_adapted)
    weights = weights or LossWeights()
    pos_x = ad.as_tensor(pos_x)
    zp = ad.constant(np.zeros(pos_x.shape))
    zn = ad.constant(np.zeros(neg_adapted.shape))

    cls_t = ad.mean(ad.softmax_cross_entropy(model.classifier.logits(pos_x, zp), pos_y))
    pos_t = ad.mean(model.energy.energy(pos_x, zp, train=train, rng=rng))
    neg_t = ad.mean(model.energy.energy(ad.stop_grad(neg_adapted), zn, train=train, rng=rng))
    bracket = ad.add(
        model.energy.energy(neg_adapted, zn, frozen=True),
        ad.softmax_cross_entropy(model.classifier.logits(neg_adapted, zn, frozen=True), neg_y),
    )
    adapted_t = ad.mean(bracket)
    return _combine(cls_t, ad.constant(0.0), pos_t, neg_t, adapted_t, weights)


def loss_with_latent(pos_x, pos_y, neg_adapted, neg_y, neg_centers, neg_z, model,
                     rng, weights=None, train=False, pos_noise=None):
    """Objective with the categorical latent code.

    ``neg_z`` is the fixed code the negatives' chains were run with (drawn
    from the posterior with frozen weights); ``neg_centers`` are their class
    centers. Positives get one reparameterized code each from the posterior
    at their batch class centers.
    """
    _require_tensor(neg_adapted)
    weights = weights or LossWeights()
    pos_x = ad.as_tensor(pos_x)
    m_pos, _ = center_matrix(pos_y)
    d_pos = ad.matmul(ad.constant(m_pos), pos_x)

    q_pos = model.posterior(d_pos)
    p_pos = model.prior(pos_x)
    if pos_noise is None:
        pos_noise = rng.standard_normal(pos_x.shape)
    z_pos = reparam_sample(q_pos, pos_noise)

    cls_t = ad.mean(ad.softmax_cross_entropy(model.classifier.logits(pos_x, z_pos), pos_y))
    kl_t = ad.mean(kl_diag_gauss(q_pos, p_pos))
    pos_t = ad.mean(model.energy.energy(pos_x, z_pos, train=train, rng=rng))

    zn = ad.constant(neg_z)
    neg_t = ad.mean(model.energy.energy(ad.stop_grad(neg_adapted), zn, train=train, rng=rng))

    q_neg = model.posterior(ad.constant(neg_centers), frozen=True)
    p_neg = model.prior(neg_adapted, frozen=True)
    bracket = ad.add(
        model.energy.energy(neg_adapted, zn, frozen=True),
        ad.softmax_cross_entropy(model.classifier.logits(neg_adapted, zn, frozen=True), neg_y),
    )
    bracket = ad.add(bracket, ad.mul(weights.adapted_kl_sign, kl_diag_gauss(q_neg, p_neg)))
    adapted_t = ad.mean(bracket)
    return _combine(cls_t, kl_t, pos_t, neg_t, adapted_t, weights)
