"""Variational information-bottleneck alignment of the two modalities.

Each modality's embedding rows are pushed through a Lorentz linear layer and
two feed-forward heads into a diagonal Gaussian latent; both modalities share
one set of encoder weights. Training regularizes the latents toward N(0, I)
and pulls paired text/image latents together with a symmetric contrastive
loss over pooled latents (dot-product scores, no temperature).

The bottleneck trade-off weight (`ib_beta` in the training config, default 1)
scales the KL regularizer; it never reweights the contrastive term.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nm
from .errors import NumericsError, ValidationError
from .lorentz import lorentz_linear_layer


@dataclass
class LatentGaussian:
    """Diagonal Gaussian (mu, sigma) with its reparameterized draw z = mu + sigma*eps."""

    mu: object
    sigma: object
    z: object
    eps: np.ndarray


def _draw_or_take(noise, shape) -> np.ndarray:
    if isinstance(noise, nm.SeededRng):
        return noise.standard_normal(shape)
    eps = np.asarray(noise, dtype=np.float64)
    if eps.shape != shape:
        raise ValidationError(f"noise shape {eps.shape} does not match latent shape {shape}")
    return eps


def encode_modality(
    X,
    lorentz_mu,
    lorentz_sigma,
    head_mu: nm.Affine,
    head_sigma: nm.Affine,
    noise,
    c: float = -1.0,
) -> LatentGaussian:
    """Per-row Gaussian latent for one modality's embedding matrix.

    mu rows come from a Lorentz linear layer plus an affine head; sigma rows
    go through softplus with a 1e-6 floor so the KL term stays defined.
    `noise` is either a SeededRng (fresh eps per row) or a frozen eps array.
    """
    if not np.all(np.isfinite(nm.value_of(X))):
        raise NumericsError("non-finite modality input")
    mu = nm.affine(lorentz_linear_layer(X, lorentz_mu, c), head_mu)
    raw = nm.affine(lorentz_linear_layer(X, lorentz_sigma, c), head_sigma)
    sigma = nm.add(nm.softplus(raw), nm.SIGMA_FLOOR)
    eps = _draw_or_take(noise, nm.value_of(mu).shape)
    z = nm.add(mu, nm.mul(sigma, eps))
    return LatentGaussian(mu, sigma, z, eps)


def gaussian_kl(mu, sigma):
    """KL(N(mu, sigma^2) || N(0, I)): 0.5 * sum(mu^2 + sigma^2 - 1 - ln sigma^2).

    Summed over latent coordinates and averaged over rows when the input is
    a matrix of row Gaussians.
    """
    sigma_v = nm.value_of(sigma)
    if np.any(sigma_v <= 0.0):
        raise ValidationError("gaussian_kl requires sigma > 0")
    terms = nm.mul(mu, mu) + nm.mul(sigma, sigma) - 1.0 - nm.mul(nm.log(sigma), 2.0)
    rows = sigma_v.shape[0] if sigma_v.ndim == 2 else 1
    return nm.div(nm.sum_(terms), 2.0 * rows)


def regularization_loss(g_tv: LatentGaussian, g_vt: LatentGaussian):
    """Half the sum of the two directions' KL terms."""
    return nm.mul(
        nm.add(gaussian_kl(g_tv.mu, g_tv.sigma), gaussian_kl(g_vt.mu, g_vt.sigma)), 0.5
    )


def pooled_latent(Z):
    """Arithmetic mean over latent rows."""
    if nm.value_of(Z).shape[0] == 0:
        raise ValidationError("cannot pool an empty latent matrix")
    return nm.mean(Z, axis=0)


def contrastive_loss(pooled_tv, pooled_vt):
    """Symmetric InfoNCE over a batch of pooled latent pairs.

    Scores are plain dot products; each direction's softmax is computed via
    log-sum-exp. Matched pairs sit on the diagonal of the N x N score matrix.
    """
    a, b = pooled_tv, pooled_vt
    av, bv = nm.value_of(a), nm.value_of(b)
    if av.ndim != 2 or bv.ndim != 2 or av.shape != bv.shape:
        raise ValidationError("contrastive_loss expects two equal-shape N x h matrices")
    n = av.shape[0]
    if n == 0:
        raise ValidationError("contrastive_loss requires a non-empty batch")
    scores = nm.matmul(a, nm.transpose(b))
    idx = np.arange(n)
    diag = scores[idx, idx]
    row_lse = nm.logsumexp(scores, axis=1)
    col_lse = nm.logsumexp(scores, axis=0)
    per_pair = nm.mul(nm.add(nm.add(diag, diag) - row_lse, nm.mul(col_lse, -1.0)), -0.5)
    return nm.sum_(per_pair)
