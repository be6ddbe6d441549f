"""Closed-form divergence between the CIL and CIP fused posteriors.

``S_M = integral p(theta | D) p(theta)^M dtheta`` for a Gaussian prior and
posterior, its derivatives in ``M``, and the decomposition

    KL_M = log S_{M-1} + (M - 1) H(posterior, prior)

where ``log S_{M-1} = log(p_M(D) / p(D))``.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg

from .fusion import fuse_cil, fuse_cip
from .gaussian import LOG_2PI, GaussianBelief, IndefinitePrecision, _check_dims, kl_divergence

log = logging.getLogger(__name__)

AXES = ("M", "q0", "P1", "round")


def kl_cil_cip(prior: GaussianBelief, locals_: Sequence[GaussianBelief]) -> float:
    """KL(CIL || CIP) for one set of local posteriors."""
    locals_ = list(locals_)
    if len(locals_) == 1:
        return 0.0
    cil = fuse_cil(prior, locals_, with_weights=False).fused
    cip = fuse_cip(locals_).fused
    return kl_divergence(cil, cip)


def _cov_pair(prior: GaussianBelief, posterior: GaussianBelief):
    _check_dims([prior, posterior])
    return prior.covariance(), posterior.covariance()


def _chol(a: np.ndarray, what: str) -> np.ndarray:
    try:
        return linalg.cholesky(0.5 * (a + a.T), lower=True)
    except linalg.LinAlgError:
        raise IndefinitePrecision(f"{what} is not positive definite", float(np.linalg.eigvalsh(a)[0])) from None


def log_s(m: float, prior: GaussianBelief, posterior: GaussianBelief) -> float:
    """``log S_M`` with the exact normalizing constants, so ``log S_0 = 0``.

    ``M`` may be any nonnegative real.
    """
    if m < 0:
        raise ValueError("M must be nonnegative")
    c0, sigma = _cov_pair(prior, posterior)
    d = prior.dim
    a = c0 + m * sigma
    chol_a = _chol(a, "C0 + M * posterior covariance")
    logdet_a = 2.0 * np.sum(np.log(np.diag(chol_a)))
    logdet_c0 = -prior.logdet_precision
    delta = prior.mean - posterior.mean
    # (C0/M + Sigma)^-1 = M (C0 + M Sigma)^-1, finite at M = 0
    z = linalg.solve_triangular(chol_a, delta, lower=True)
    quad = m * float(z @ z)
    return float(-0.5 * (m - 1.0) * (d * LOG_2PI + logdet_c0) - 0.5 * d * LOG_2PI - 0.5 * logdet_a - 0.5 * quad)


def log_s_derivatives(m: float, prior: GaussianBelief, posterior: GaussianBelief) -> tuple[float, float]:
    """First and second derivatives of ``log S_M`` with respect to ``M``.

    With ``A = C0 + M Sigma`` and ``delta = theta0 - mu``:

        first  = -1/2 log|2 pi C0| - 1/2 Tr(A^-1 Sigma) - 1/2 delta' A^-1 C0 A^-1 delta
        second = 1/2 Tr((A^-1 Sigma)^2) + delta' A^-1 Sigma A^-1 C0 A^-1 delta
    """
    if m < 0:
        raise ValueError("M must be nonnegative")
    c0, sigma = _cov_pair(prior, posterior)
    d = prior.dim
    a = c0 + m * sigma
    chol_a = _chol(a, "C0 + M * posterior covariance")
    a_inv_sigma = linalg.cho_solve((chol_a, True), sigma)
    delta = prior.mean - posterior.mean
    u = linalg.cho_solve((chol_a, True), delta)
    logdet_c0 = -prior.logdet_precision
    first = -0.5 * (d * LOG_2PI + logdet_c0) - 0.5 * np.trace(a_inv_sigma) - 0.5 * float(u @ c0 @ u)
    v = linalg.cho_solve((chol_a, True), c0 @ u)
    second = 0.5 * float(np.sum(a_inv_sigma * a_inv_sigma.T)) + float(u @ sigma @ v)
    return float(first), float(second)


def cross_entropy_posterior_prior(posterior: GaussianBelief, prior: GaussianBelief) -> float:
    """``H = -E_posterior[log prior]`` in closed form.

    This is a differential cross-entropy and can be negative for very
    concentrated priors.
    """
    _check_dims([posterior, prior])
    d = prior.dim
    delta = posterior.mean - prior.mean
    if prior.kind == "diagonal" and posterior.kind == "diagonal":
        trace = float(np.sum(prior.precision / posterior.precision))
        quad = float(np.sum(prior.precision * delta**2))
    else:
        trace = float(np.sum(prior.dense_precision() * posterior.covariance()))
        quad = float(delta @ prior.dense_precision() @ delta)
    return 0.5 * (d * LOG_2PI - prior.logdet_precision + trace + quad)


def kl_decomposition(prior: GaussianBelief, locals_: Sequence[GaussianBelief]) -> tuple[float, float]:
    """``(log(p_M(D) / p(D)), (M - 1) H)`` whose sum is KL(CIL || CIP)."""
    locals_ = list(locals_)
    m = len(locals_)
    if m == 1:
        return 0.0, 0.0
    posterior = fuse_cil(prior, locals_, with_weights=False).fused
    return log_s(m - 1, prior, posterior), (m - 1) * cross_entropy_posterior_prior(posterior, prior)


# sweeps


@dataclass
class KlSweep:
    axis: str
    grid: list[float]
    values: list[float]
    config_fingerprint: str
    stderr: list[float] = field(default_factory=list)
    failures: dict[float, str] = field(default_factory=dict)

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"unknown sweep axis {self.axis!r}")
        if len(self.grid) != len(self.values):
            raise ValueError("grid and values differ in length")
        if any(b <= a for a, b in zip(self.grid, self.grid[1:])):
            raise ValueError("sweep grid must be strictly increasing")


def fingerprint(config) -> str:
    """Stable hash of a JSON-serializable view of a configuration."""
    payload = config.to_dict() if hasattr(config, "to_dict") else config
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def sweep(axis: str, grid: Sequence[float], experiment_config) -> KlSweep:
    """Average KL(CIL || CIP) over Monte Carlo repetitions at each grid point.

    Failed grid points are recorded in ``failures`` with a NaN value.
    """
    from .experiments import kl_per_repetition

    if axis not in AXES:
        raise ValueError(f"unknown sweep axis {axis!r}")
    grid = list(grid)
    values, errs, failures = [], [], {}
    for i, g in enumerate(grid):
        try:
            reps = np.asarray(kl_per_repetition(axis, g, experiment_config, point_index=i))
            values.append(float(np.mean(reps)))
            errs.append(float(np.std(reps, ddof=1) / np.sqrt(len(reps))) if len(reps) > 1 else 0.0)
        except (IndefinitePrecision, FloatingPointError, ValueError, RuntimeError) as exc:
            log.warning("sweep point %s=%s failed: %s", axis, g, exc)
            failures[g] = str(exc)
            values.append(float("nan"))
            errs.append(float("nan"))
    return KlSweep(axis, grid, values, fingerprint(experiment_config), errs, failures)
