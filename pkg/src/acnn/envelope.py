"""Learnable 2D Gaussian envelope on an odd ``n x n`` base grid.

Grid coordinates are ``g = (a, b)`` with ``a, b`` in ``1..n``; ``a`` indexes
rows (axis 0) and is the "x" component paired with ``sigma_xx``. The
envelope is

    U(g) = exp(-1/2 (g - mu)^T Sigma^-1 (g - mu))

with ``mu`` pinned to the grid centre and no normalisation, so ``U`` peaks
at exactly 1.

The covariance of a filter bank is stored as an ``[F, 3]`` array with
columns ``(sigma_xx, sigma_yy, sigma_xy)``. The ``*_bank`` functions are
the vectorised workhorses; the per-filter functions wrap them.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

DEFAULT_PD_EPS = 1e-2


@dataclass(frozen=True)
class GridSpec:
    n: int

    def __post_init__(self):
        if self.n < 3 or self.n % 2 == 0:
            raise ValueError(f"grid side must be odd and >= 3, got {self.n}")

    @property
    def center(self):
        c = (self.n + 1) / 2
        return (c, c)

    @property
    def coordinates(self):
        """All ``n*n`` grid points ``(a, b)``, row-major."""
        axis = range(1, self.n + 1)
        return [(a, b) for a in axis for b in axis]

    def displacements(self):
        """``(dx, dy)`` arrays of shape ``[n, n]`` measured from the centre."""
        offs = np.arange(1, self.n + 1, dtype=np.float64) - self.center[0]
        dx, dy = np.meshgrid(offs, offs, indexing="ij")
        return dx, dy


@dataclass
class EnvelopeParams:
    sigma_xx: float = 1.0
    sigma_yy: float = 1.0
    sigma_xy: float = 0.0
    n: int = 11
    a_norm: float = field(default=1.0, repr=False)

    @property
    def mu(self):
        return GridSpec(self.n).center

    def as_array(self):
        return np.array([self.sigma_xx, self.sigma_yy, self.sigma_xy], dtype=np.float64)

    def matrix(self):
        return np.array([[self.sigma_xx, self.sigma_xy], [self.sigma_xy, self.sigma_yy]])

    def is_positive_definite(self):
        return is_positive_definite(self.as_array())

    @classmethod
    def from_array(cls, sigma, n):
        sxx, syy, sxy = (float(v) for v in sigma)
        return cls(sxx, syy, sxy, n)


@dataclass(frozen=True)
class CovarianceSummary:
    lambda_max: float
    lambda_min: float
    orientation_deg: float
    determinant: float


def is_positive_definite(sigma):
    """Row-wise PD test for ``[..., 3]`` covariance triples."""
    s = np.asarray(sigma, dtype=np.float64)
    sxx, syy, sxy = s[..., 0], s[..., 1], s[..., 2]
    # |sxy| < sqrt(sxx) sqrt(syy) is det > 0 without overflowing the products
    with np.errstate(invalid="ignore"):
        return np.isfinite(s).all(axis=-1) & (sxx > 0) & (syy > 0) & (np.abs(sxy) < np.sqrt(sxx) * np.sqrt(syy))


def _check_pd(sigma):
    ok = is_positive_definite(sigma)
    if not np.all(ok):
        bad = np.asarray(sigma).reshape(-1, 3)[~np.atleast_1d(ok)][0]
        raise ValueError(f"covariance (sxx, syy, sxy)={tuple(bad)} is not positive definite")


def _quadratic_terms(n, sigma):
    """Shared pieces of the exponent for a bank ``[F, 3]``.

    Returns ``(dx, dy, num, det)`` where the Mahalanobis form is
    ``num / det`` with ``num = syy dx^2 - 2 sxy dx dy + sxx dy^2``.
    """
    dx, dy = GridSpec(n).displacements()
    s = np.asarray(sigma, dtype=np.float64)
    sxx = s[:, 0, None, None]
    syy = s[:, 1, None, None]
    sxy = s[:, 2, None, None]
    det = sxx * syy - sxy * sxy
    num = syy * dx * dx - 2.0 * sxy * dx * dy + sxx * dy * dy
    return dx, dy, num, det


# far tails of near-degenerate envelopes underflow exp(); keep every cell strictly positive
_U_FLOOR = np.finfo(np.float64).tiny


def _gaussian(num, det, a_norm):
    return np.maximum(np.exp(-0.5 * num / det), _U_FLOOR) / a_norm


def envelope_bank(n, sigma, a_norm=1.0):
    """Envelopes for every filter: ``[F, 3] -> [F, n, n]`` (float64)."""
    sigma = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
    _check_pd(sigma)
    _, _, num, det = _quadratic_terms(n, sigma)
    return _gaussian(num, det, a_norm)


def envelope_grad_bank(n, sigma, upstream, a_norm=1.0):
    """Chain ``dE/dU`` (``[F, n, n]``) through to ``dE/dsigma`` (``[F, 3]``).

    ``sigma_xy`` fills both off-diagonal slots, so its derivative already
    includes both.
    """
    sigma = np.atleast_2d(np.asarray(sigma, dtype=np.float64))
    _check_pd(sigma)
    dx, dy, num, det = _quadratic_terms(n, sigma)
    u = _gaussian(num, det, a_norm)
    sxx = sigma[:, 0, None, None]
    syy = sigma[:, 1, None, None]
    sxy = sigma[:, 2, None, None]
    det2 = det * det
    # derivatives of the Mahalanobis form q = num / det
    dq_xx = (dy * dy * det - num * syy) / det2
    dq_yy = (dx * dx * det - num * sxx) / det2
    dq_xy = (-2.0 * dx * dy * det + 2.0 * sxy * num) / det2
    g = np.asarray(upstream, dtype=np.float64) * (-0.5 * u)
    return np.stack(
        [(g * dq_xx).sum(axis=(1, 2)), (g * dq_yy).sum(axis=(1, 2)), (g * dq_xy).sum(axis=(1, 2))],
        axis=1,
    )


def envelope_eval(grid, params):
    return envelope_bank(grid.n, params.as_array()[None], params.a_norm)[0]


def envelope_grad_sigma(grid, params, upstream):
    """``(d_sigma_xx, d_sigma_yy, d_sigma_xy)`` for one envelope."""
    upstream = np.asarray(upstream)
    if upstream.shape != (grid.n, grid.n):
        raise ValueError(f"upstream must be {grid.n}x{grid.n}, got {upstream.shape}")
    g = envelope_grad_bank(grid.n, params.as_array()[None], upstream[None], params.a_norm)[0]
    return tuple(float(v) for v in g)


def project_bank(sigma, eps=DEFAULT_PD_EPS):
    """Clamp covariance triples back into the PD cone, in place.

    Diagonals are floored at ``eps`` and ``|sigma_xy|`` is capped at
    ``(1 - eps) * sqrt(sigma_xx * sigma_yy)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    np.maximum(sigma[:, 0], eps, out=sigma[:, 0])
    np.maximum(sigma[:, 1], eps, out=sigma[:, 1])
    cap = (1.0 - eps) * (np.sqrt(sigma[:, 0]) * np.sqrt(sigma[:, 1]))
    np.clip(sigma[:, 2], -cap, cap, out=sigma[:, 2])
    return sigma


def project_positive_definite(params, eps=DEFAULT_PD_EPS):
    s = project_bank(params.as_array()[None], eps)[0]
    return EnvelopeParams(float(s[0]), float(s[1]), float(s[2]), params.n, params.a_norm)


def eigen_summary_array(sigma):
    """Closed-form eigen-analysis of symmetric 2x2 matrices.

    ``sigma`` is ``[..., 3]``; returns ``(lambda_max, lambda_min, theta_deg)``
    arrays. ``theta`` is the angle of the major axis in ``(-90, 90]``, with
    0 for isotropic matrices.
    """
    s = np.asarray(sigma, dtype=np.float64)
    sxx, syy, sxy = s[..., 0], s[..., 1], s[..., 2]
    m = 0.5 * (sxx + syy)
    d = 0.5 * (sxx - syy)
    r = np.hypot(d, sxy)
    theta = np.degrees(0.5 * np.arctan2(2.0 * sxy, sxx - syy))
    # atan2(0, -x) = +pi, so theta lands in (-90, 90]; fold -90 just in case
    theta = np.where(theta <= -90.0, theta + 180.0, theta)
    return m + r, m - r, theta


def eigen_summary(params):
    lmax, lmin, theta = eigen_summary_array(params.as_array())
    sxx, syy, sxy = params.sigma_xx, params.sigma_yy, params.sigma_xy
    return CovarianceSummary(
        lambda_max=float(lmax),
        lambda_min=float(lmin),
        orientation_deg=float(theta),
        determinant=sxx * syy - sxy * sxy,
    )


def principal_axis(summary):
    """Unit eigenvector paired with ``lambda_max``."""
    t = math.radians(summary.orientation_deg)
    return np.array([math.cos(t), math.sin(t)])
