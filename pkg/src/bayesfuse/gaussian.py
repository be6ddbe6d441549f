"""Gaussian belief algebra in precision form.

Beliefs carry a mean and a precision matrix. The precision is either a dense
``(d, d)`` array or a ``(d,)`` vector holding the diagonal. Every determinant,
trace and solve goes through a Cholesky factor so that values spanning many
orders of magnitude stay accurate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy import linalg

DENSE = "dense"
DIAGONAL = "diagonal"

LOG_2PI = math.log(2.0 * math.pi)


class DimensionMismatch(ValueError):
    pass


class IndefinitePrecision(ValueError):
    """A precision matrix failed its symmetric positive-definite factorization.

    ``min_eigenvalue`` is the smallest eigenvalue of the offending matrix, i.e.
    the magnitude of the most negative direction.
    """

    def __init__(self, message: str, min_eigenvalue: float = float("nan")):
        super().__init__(f"{message} (min eigenvalue {min_eigenvalue:.3e})")
        self.min_eigenvalue = min_eigenvalue


def _min_eigenvalue(precision: np.ndarray) -> float:
    if precision.ndim == 1:
        return float(np.min(precision))
    return float(np.linalg.eigvalsh(precision)[0])


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GaussianBelief:
    """Multivariate normal ``N(mean, precision^-1)``.

    A 1-D ``precision`` selects the diagonal storage kind. Construction
    validates symmetry and positive definiteness; there is no jitter.
    """

    mean: np.ndarray
    precision: np.ndarray

    def __post_init__(self):
        mean = _frozen(self.mean).reshape(-1)
        precision = _frozen(self.precision)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "precision", precision)
        d = mean.shape[0]
        if d == 0:
            raise DimensionMismatch("belief must have at least one dimension")
        if precision.ndim == 1:
            if precision.shape != (d,):
                raise DimensionMismatch(f"diagonal precision of length {precision.shape[0]} for mean of length {d}")
            if not np.all(np.isfinite(precision)) or np.any(precision <= 0):
                raise IndefinitePrecision("diagonal precision has non-positive entries", _min_eigenvalue(precision))
        elif precision.ndim == 2:
            if precision.shape != (d, d):
                raise DimensionMismatch(f"precision of shape {precision.shape} for mean of length {d}")
            scale = max(float(np.max(np.abs(precision))), np.finfo(float).tiny)
            if np.max(np.abs(precision - precision.T)) > 1e-12 * scale:
                raise ValueError("precision matrix is not symmetric")
            _ = self.cholesky
        else:
            raise DimensionMismatch("precision must be a vector or a square matrix")
        if not np.all(np.isfinite(mean)):
            raise ValueError("mean has non-finite entries")

    # construction helpers

    @classmethod
    def from_covariance(cls, mean, covariance) -> "GaussianBelief":
        cov = np.asarray(covariance, dtype=float)
        if cov.ndim == 1:
            return cls(mean, 1.0 / cov)
        try:
            c = linalg.cholesky(cov, lower=True)
        except linalg.LinAlgError:
            raise IndefinitePrecision("covariance is not positive definite", _min_eigenvalue(cov)) from None
        inv_c = linalg.solve_triangular(c, np.eye(cov.shape[0]), lower=True)
        prec = inv_c.T @ inv_c
        return cls(mean, 0.5 * (prec + prec.T))

    @classmethod
    def isotropic(cls, mean, variance: float) -> "GaussianBelief":
        """``N(mean, variance * I)`` stored diagonally."""
        mean = np.asarray(mean, dtype=float).reshape(-1)
        return cls(mean, np.full(mean.shape[0], 1.0 / variance))

    # properties

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def kind(self) -> str:
        return DIAGONAL if self.precision.ndim == 1 else DENSE

    @cached_property
    def cholesky(self) -> np.ndarray:
        """Lower Cholesky factor of the precision (dense kind only)."""
        if self.precision.ndim == 1:
            return np.diag(np.sqrt(self.precision))
        try:
            return linalg.cholesky(self.precision, lower=True)
        except linalg.LinAlgError:
            raise IndefinitePrecision("precision is not positive definite", _min_eigenvalue(self.precision)) from None

    @cached_property
    def logdet_precision(self) -> float:
        if self.kind == DIAGONAL:
            return float(np.sum(np.log(self.precision)))
        return 2.0 * float(np.sum(np.log(np.diag(self.cholesky))))

    def dense_precision(self) -> np.ndarray:
        if self.kind == DIAGONAL:
            return np.diag(self.precision)
        return np.array(self.precision)

    def covariance(self) -> np.ndarray:
        if self.kind == DIAGONAL:
            return np.diag(1.0 / self.precision)
        return linalg.cho_solve((self.cholesky, True), np.eye(self.dim))

    def variances(self) -> np.ndarray:
        """Marginal variances (diagonal of the covariance)."""
        if self.kind == DIAGONAL:
            return 1.0 / self.precision
        inv_l = linalg.solve_triangular(self.cholesky, np.eye(self.dim), lower=True)
        return np.sum(inv_l**2, axis=0)

    def information(self) -> np.ndarray:
        """Information vector ``precision @ mean``."""
        return _matvec(self.precision, self.mean)

    def solve(self, b: np.ndarray) -> np.ndarray:
        """``precision^-1 @ b``."""
        if self.kind == DIAGONAL:
            return b / self.precision if b.ndim == 1 else b / self.precision[:, None]
        return linalg.cho_solve((self.cholesky, True), b)

    def to_dense(self) -> "GaussianBelief":
        if self.kind == DENSE:
            return self
        return GaussianBelief(self.mean, np.diag(self.precision))

    def __repr__(self):
        return f"GaussianBelief(dim={self.dim}, kind={self.kind})"


@dataclass(frozen=True)
class UnnormalizedGaussian:
    """``exp(log_scale) * N(theta; belief)``."""

    belief: GaussianBelief
    log_scale: float

    def __post_init__(self):
        if not math.isfinite(self.log_scale):
            raise ValueError("log_scale must be finite")


def _matvec(precision: np.ndarray, v: np.ndarray) -> np.ndarray:
    return precision * v if precision.ndim == 1 else precision @ v


def _check_dims(beliefs: Sequence[GaussianBelief]) -> int:
    dims = {b.dim for b in beliefs}
    if len(dims) != 1:
        raise DimensionMismatch(f"beliefs have differing dimensions {sorted(dims)}")
    return dims.pop()


def common_kind(beliefs: Sequence[GaussianBelief]) -> str:
    """Diagonal only when every input is diagonal; otherwise dense."""
    return DIAGONAL if all(b.kind == DIAGONAL for b in beliefs) else DENSE


def as_kind(precision: np.ndarray, kind: str) -> np.ndarray:
    if kind == DENSE and precision.ndim == 1:
        return np.diag(precision)
    return precision


def from_information(precision: np.ndarray, information: np.ndarray, what: str = "precision") -> GaussianBelief:
    """Build a belief from natural parameters, raising IndefinitePrecision on failure."""
    if precision.ndim == 2:
        precision = 0.5 * (precision + precision.T)
        try:
            chol = linalg.cholesky(precision, lower=True)
        except linalg.LinAlgError:
            raise IndefinitePrecision(f"{what} is not positive definite", _min_eigenvalue(precision)) from None
        mean = linalg.cho_solve((chol, True), information)
    else:
        if np.any(precision <= 0) or not np.all(np.isfinite(precision)):
            raise IndefinitePrecision(f"{what} is not positive definite", _min_eigenvalue(precision))
        mean = information / precision
    return GaussianBelief(mean, precision)


def log_density(belief: GaussianBelief, x) -> float:
    """Exact log-density of ``belief`` at ``x``."""
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape[0] != belief.dim:
        raise DimensionMismatch(f"point of length {x.shape[0]} for belief of dim {belief.dim}")
    diff = x - belief.mean
    if belief.kind == DIAGONAL:
        maha = float(np.sum(belief.precision * diff**2))
    else:
        z = belief.cholesky.T @ diff
        maha = float(z @ z)
    return 0.5 * (belief.logdet_precision - belief.dim * LOG_2PI - maha)


def product(beliefs: Sequence[GaussianBelief]) -> UnnormalizedGaussian:
    """Product of Gaussian densities as a scaled Gaussian.

    Precisions add; the mean is the precision-weighted mean. ``log_scale`` is
    the log of the product's integral over theta.
    """
    beliefs = list(beliefs)
    if not beliefs:
        raise ValueError("product of an empty list")
    _check_dims(beliefs)
    if len(beliefs) == 1:
        return UnnormalizedGaussian(beliefs[0], 0.0)
    kind = common_kind(beliefs)
    precision = sum(as_kind(b.precision, kind) for b in beliefs)
    information = sum(b.information() for b in beliefs)
    fused = from_information(precision, information)
    # the identity holds pointwise; evaluate it at the fused mean
    log_scale = sum(log_density(b, fused.mean) for b in beliefs) - log_density(fused, fused.mean)
    return UnnormalizedGaussian(fused, float(log_scale))


def power(belief: GaussianBelief, k: float) -> UnnormalizedGaussian:
    """``N(theta; m, P^-1)^k = exp(log_scale) * N(theta; m, (kP)^-1)``."""
    if not k > 0:
        raise ValueError(f"power exponent must be positive, got {k}")
    if k == 1:
        return UnnormalizedGaussian(belief, 0.0)
    d = belief.dim
    scaled = GaussianBelief(belief.mean, k * belief.precision)
    log_scale = 0.5 * (1.0 - k) * d * LOG_2PI + 0.5 * (k - 1.0) * belief.logdet_precision - 0.5 * d * math.log(k)
    return UnnormalizedGaussian(scaled, log_scale)


def divide(numerator: GaussianBelief, denominator: UnnormalizedGaussian | GaussianBelief) -> GaussianBelief:
    """Normalized quotient of two Gaussians.

    Raises IndefinitePrecision when the precision difference is not positive
    definite, which signals inconsistent inputs.
    """
    den = denominator.belief if isinstance(denominator, UnnormalizedGaussian) else denominator
    _check_dims([numerator, den])
    kind = common_kind([numerator, den])
    precision = as_kind(numerator.precision, kind) - as_kind(den.precision, kind)
    information = numerator.information() - den.information()
    return from_information(precision, information, what="quotient precision")


def kl_divergence(p: GaussianBelief, q: GaussianBelief) -> float:
    """KL(p || q) in closed form.

    Small negative round-off is clamped to zero.
    """
    d = _check_dims([p, q])
    if p is q:
        return 0.0
    diff = p.mean - q.mean
    if p.kind == DIAGONAL and q.kind == DIAGONAL:
        trace = float(np.sum(q.precision / p.precision))
        maha = float(np.sum(q.precision * diff**2))
    else:
        # Tr(Q P^-1) = ||L_p^-1 L_q||_F^2
        lp = p.cholesky if p.kind == DENSE else np.diag(np.sqrt(p.precision))
        lq = q.cholesky if q.kind == DENSE else np.diag(np.sqrt(q.precision))
        trace = float(np.sum(linalg.solve_triangular(lp, lq, lower=True) ** 2))
        z = lq.T @ diff
        maha = float(z @ z)
    kl = 0.5 * (p.logdet_precision - q.logdet_precision - d + maha + trace)
    if kl < 0.0:
        if kl < -1e-10 * max(1.0, trace):
            raise FloatingPointError(f"KL divergence evaluated to {kl:.3e}")
        return 0.0
    return kl


def sample(belief: GaussianBelief, rng_seed: int, n: int) -> np.ndarray:
    """Draw ``n`` samples as an ``(n, d)`` array, deterministic in ``rng_seed``."""
    if n < 1:
        raise ValueError("sample count must be at least 1")
    rng = np.random.default_rng(rng_seed)
    z = rng.standard_normal((n, belief.dim))
    if belief.kind == DIAGONAL:
        return belief.mean + z / np.sqrt(belief.precision)
    # x = mean + L^-T z has covariance (L L^T)^-1
    return belief.mean + linalg.solve_triangular(belief.cholesky, z.T, lower=True, trans="T").T
