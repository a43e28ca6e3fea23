"""Conditional VAE over sample features, with unseen-category synthesis.

The encoder maps a sample feature through two Lorentz linear layers into a
diagonal Gaussian latent; the decoder reconstructs the feature from the
latent concatenated with an entity-derived condition vector. At training
time the decoder doubles as a generator: unseen-category prototypes plus
standard-normal noise produce synthetic features, which feed a cross-entropy
loss over unseen categories and a score-distribution alignment loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .bottleneck import _draw_or_take, gaussian_kl
from .errors import NumericsError, ValidationError
from .fusion import PrototypeSet, Task
from .lorentz import lorentz_linear_layer


@dataclass
class VaeLatent:
    """Diagonal Gaussian latent of one sample feature with its draw."""

    mu: object
    sigma: object
    z: object
    eps: np.ndarray


class DecoderParams:
    """Two affine layers with a tanh between: (cond + latent) -> hidden -> feature."""

    __slots__ = ("hidden", "out")

    def __init__(self, hidden: nm.Affine, out: nm.Affine):
        self.hidden = hidden
        self.out = out


@dataclass
class SyntheticBatch:
    """Decoded unseen-category features, k rows per category, category-major."""

    features: object
    labels: np.ndarray
    eps: np.ndarray


def encode_vae(feature, lorentz_mu, lorentz_sigma, noise, c: float = -1.0) -> VaeLatent:
    """Gaussian latent of one sample feature via two Lorentz linear layers."""
    if not np.all(np.isfinite(nm.value_of(feature))):
        raise NumericsError("non-finite feature input")
    mu = lorentz_linear_layer(feature, lorentz_mu, c)
    sigma = nm.add(nm.softplus(lorentz_linear_layer(feature, lorentz_sigma, c)), nm.SIGMA_FLOOR)
    eps = _draw_or_take(noise, nm.value_of(mu).shape)
    z = nm.add(mu, nm.mul(sigma, eps))
    return VaeLatent(mu, sigma, z, eps)


def conditional_prototype(sample, task: Task) -> np.ndarray:
    """Entity-derived condition vector: E1's row, or the E1/E2 mean for relations."""
    tokens = np.asarray(sample.token_matrix, dtype=np.float64)
    n_tokens = tokens.shape[0]
    if not 0 <= sample.marker_e1 < n_tokens:
        raise ValidationError(f"E1 marker out of range in sample {sample.sample_id!r}")
    if task.needs_second_entity:
        if sample.marker_e2 is None:
            raise ValidationError(f"sample {sample.sample_id!r} lacks an E2 marker for MRE")
        if not 0 <= sample.marker_e2 < n_tokens:
            raise ValidationError(f"E2 marker out of range in sample {sample.sample_id!r}")
        return 0.5 * (tokens[sample.marker_e1] + tokens[sample.marker_e2])
    return tokens[sample.marker_e1]


def decode(condition, latent, decoder: DecoderParams):
    """Reconstruct a sample feature from [condition (+) latent].

    Accepts a single vector pair or row-matrices for batched decoding.
    """
    joined = nm.concat([condition, latent], axis=-1)
    expected = nm.value_of(decoder.hidden.w).shape[1]
    if nm.value_of(joined).shape[-1] != expected:
        raise ValidationError(
            f"decoder input width {nm.value_of(joined).shape[-1]} != expected {expected}"
        )
    return nm.affine(nm.tanh(nm.affine(joined, decoder.hidden)), decoder.out)


def vae_loss(feature, reconstruction, latent: VaeLatent):
    """KL(N(mu, sigma^2) || N(0,I)) plus squared reconstruction error."""
    if nm.value_of(feature).shape != nm.value_of(reconstruction).shape:
        raise ValidationError("feature and reconstruction widths differ")
    diff = nm.add(feature, nm.mul(reconstruction, -1.0))
    return nm.add(gaussian_kl(latent.mu, latent.sigma), nm.sum_(nm.mul(diff, diff)))


def synthesize_unseen(
    prototypes_unseen: PrototypeSet, k: int, noise, decoder: DecoderParams
) -> SyntheticBatch:
    """Decode k standard-normal draws per unseen category, conditioned on its prototype."""
    n_cat = len(prototypes_unseen)
    if n_cat == 0:
        raise ValidationError("cannot synthesize from an empty unseen prototype set")
    if k < 1:
        raise ValidationError("k must be >= 1")
    latent_dim = nm.value_of(decoder.hidden.w).shape[1] - prototypes_unseen.width
    eps = _draw_or_take(noise, (n_cat * k, latent_dim))
    conditions = np.repeat(prototypes_unseen.matrix64(), k, axis=0)
    features = decode(conditions, eps, decoder)
    labels = np.repeat(np.arange(n_cat), k)
    return SyntheticBatch(features, labels, eps)


def _picked_log_terms(scores, labels):
    labels = np.asarray(labels)
    rows, n_cat = nm.value_of(scores).shape
    if labels.shape != (rows,):
        raise ValidationError("one label per score row required")
    if labels.min() < 0 or labels.max() >= n_cat:
        raise ValidationError("label out of range for score matrix")
    log_probs = nm.add(scores, nm.mul(nm.logsumexp(scores, axis=1, keepdims=True), -1.0))
    return log_probs[np.arange(rows), labels]


def unseen_ce_loss(scores, labels):
    """Cross entropy of synthetic rows against their categories, summed over rows.

    The softmax normalizes over unseen categories only; with one draw per
    category the labels are the diagonal.
    """
    return nm.mul(nm.sum_(_picked_log_terms(scores, labels)), -1.0)


def alignment_loss(scores, labels=None):
    """KL between the matched-score softmax and the uniform distribution.

    With one synthetic row per category, `scores` is square and its diagonal
    holds each category's own-prototype score; with k > 1, `labels` groups
    rows by category and per-category mean matched scores are used. Zero iff
    all matched scores are equal; invariant under a common additive shift.
    """
    values = nm.value_of(scores)
    if labels is None:
        if values.ndim != 2 or values.shape[0] != values.shape[1]:
            raise ValidationError("alignment_loss without labels requires a square matrix")
        n_cat = values.shape[0]
        idx = np.arange(n_cat)
        diag = scores[idx, idx]
    else:
        labels = np.asarray(labels)
        n_cat = values.shape[1]
        if labels.shape[0] != values.shape[0] or values.shape[0] % n_cat != 0:
            raise ValidationError("labels must cover k rows per category")
        k = values.shape[0] // n_cat
        picked = scores[np.arange(values.shape[0]), labels]
        diag = nm.mean(nm.reshape(picked, (n_cat, k)), axis=1)
    log_p = nm.add(diag, nm.mul(nm.logsumexp(diag), -1.0))
    return nm.add(nm.sum_(nm.mul(nm.exp(log_p), log_p)), np.log(n_cat))
