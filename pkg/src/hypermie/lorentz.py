"""Lorentz-model hyperbolic geometry kernel.

Points live on the hyperboloid { x : <x,x>_L = 1/c, x0 > 0 } for negative
curvature c, where <x,y>_L = -x0*y0 + sum_i xi*yi. All maps here are taken at
the origin o = [1/sqrt(-c), 0, ..., 0]; tangent vectors at the origin carry a
leading zero coordinate.

Every function accepts either plain float64 arrays or autodiff `Var` nodes,
and treats a 2-D input as a batch of row vectors.
"""

from __future__ import annotations

import numpy as np

from . import numerics as nm
from .errors import ValidationError


def _check_curvature(c: float) -> float:
    c = float(c)
    if not c < 0:
        raise ValidationError(f"curvature must be negative, got {c}")
    return c


def lorentz_inner(x, y):
    """Lorentz scalar product -x0*y0 + sum_{i>=1} xi*yi along the last axis."""
    xs, ys = nm.value_of(x).shape, nm.value_of(y).shape
    if xs[-1] != ys[-1]:
        raise ValidationError(f"dimension mismatch in lorentz_inner: {xs} vs {ys}")
    if xs[-1] < 2:
        raise ValidationError("lorentz_inner needs vectors of dimension >= 2")
    prod = nm.mul(x, y)
    signed = nm.concat([nm.mul(prod[..., :1], -1.0), prod[..., 1:]], axis=-1)
    return nm.sum_(signed, axis=-1)


def origin(c: float, n: int) -> np.ndarray:
    """Base point [1/sqrt(-c), 0, ..., 0] of the n-dimensional hyperboloid."""
    c = _check_curvature(c)
    if n < 1:
        raise ValidationError("manifold dimension must be >= 1")
    o = np.zeros(n + 1)
    o[0] = 1.0 / np.sqrt(-c)
    return o


def lift_to_tangent(x):
    """Prefix a zero coordinate: Euclidean v_s -> tangent [0, v_s] at the origin."""
    v = nm.value_of(x)
    zeros = np.zeros(v.shape[:-1] + (1,))
    return nm.concat([zeros, x], axis=-1)


def _split_time_spatial(z):
    return z[..., :1], z[..., 1:]


def exp_at_origin(z, c: float = -1.0):
    """Geodesic map from the origin's tangent space onto the hyperboloid.

    exp_0(z) = cosh(a) * o + sinh(a) * z / a with a = sqrt(-c) * ||z||_L;
    for a tangent vector [0, z_s] the Lorentz norm equals the Euclidean norm
    of z_s, and sinh(a)/a is evaluated by series near a = 0.
    """
    c = _check_curvature(c)
    z0, zs = _split_time_spatial(z)
    if not np.all(nm.value_of(z0) == 0.0):
        raise ValidationError("tangent vector must have zero first coordinate")
    sqc = np.sqrt(-c)
    alpha = nm.mul(nm.sqrt(nm.sum_(nm.mul(zs, zs), axis=-1, keepdims=True)), sqc)
    time = nm.div(nm.cosh(alpha), sqc)
    spatial = nm.mul(nm.sinhc(alpha), zs)
    return nm.concat([time, spatial], axis=-1)


def log_at_origin(p, c: float = -1.0):
    """Inverse of exp_at_origin: hyperboloid point -> origin tangent vector.

    log_0(p) = acosh(b)/sqrt(b^2-1) * (p - b*o) with b = c * <o,p>_L. Since
    o is spatially zero, b = sqrt(-c) * p0 and the first coordinate of
    p - b*o vanishes identically, so only the spatial block is scaled.
    """
    c = _check_curvature(c)
    p0, ps = _split_time_spatial(p)
    sqc = np.sqrt(-c)
    beta = nm.mul(p0, sqc)  # equals c * <o, p>_L
    bval = nm.value_of(beta)
    if np.any(bval < 1.0 - 1e-6):
        raise ValidationError("point is off the manifold (c<o,p>_L < 1)")
    coef = nm.acoshc(nm.clip_min(beta, 1.0))
    spatial = nm.mul(coef, ps)
    zeros = np.zeros(nm.value_of(p0).shape)
    return nm.concat([zeros, spatial], axis=-1)


def lorentz_linear_transform(p, weight, c: float = -1.0):
    """exp_0(M^(log_0(p))) where M^ maps tangent [v0, v_s] to [0, M @ v_s]."""
    weight_v = nm.value_of(weight)
    n = nm.value_of(p).shape[-1] - 1
    if weight_v.shape[1] != n:
        raise ValidationError(
            f"weight has {weight_v.shape[1]} columns for a {n}-dimensional manifold"
        )
    v = log_at_origin(p, c)
    _, vs = _split_time_spatial(v)
    mapped = nm.matmul(vs, nm.transpose(weight))
    return exp_at_origin(lift_to_tangent(mapped), c)


def lorentz_linear_layer(x, weight, c: float = -1.0):
    """Euclidean-in, Euclidean-out hyperbolic linear map.

    Lifts x into the origin tangent space, pushes it through the Lorentz
    linear transformation, and reads back the spatial tangent coordinates.
    Collapses to `x @ weight.T` in exact arithmetic, but the full hyperbolic
    composition is computed so rounding and gradients follow that path.
    """
    p = exp_at_origin(lift_to_tangent(x), c)
    q = lorentz_linear_transform(p, weight, c)
    back = log_at_origin(q, c)
    _, out = _split_time_spatial(back)
    return out
