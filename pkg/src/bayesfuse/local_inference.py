"""Local posteriors computed by each agent from the shared prior and its shard."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import linalg

from . import mlp
from .fusion import DiscreteBelief
from .gaussian import DIAGONAL, DimensionMismatch, GaussianBelief, IndefinitePrecision, from_information
from .mlp import MlpSpec

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class LabeledShard:
    """One agent's data.

    ``targets`` is either an ``(N, d_y)`` float array (regression) or an
    ``(N,)`` integer array of class labels in ``0..L-1``.
    """

    features: np.ndarray
    targets: np.ndarray
    agent_id: int = 0

    def __post_init__(self):
        x = np.asarray(self.features, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1)
        t = np.asarray(self.targets)
        if np.issubdtype(t.dtype, np.integer):
            t = t.reshape(-1).astype(np.int64)
            if t.size and t.min() < 0:
                raise ValueError("class labels must be nonnegative")
        else:
            t = t.astype(float)
            if t.ndim == 1:
                t = t.reshape(-1, 1)
        if x.shape[0] != t.shape[0]:
            raise ValueError(f"{x.shape[0]} feature rows but {t.shape[0]} targets")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "targets", t)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def is_classification(self) -> bool:
        return np.issubdtype(self.targets.dtype, np.integer)

    def subset(self, idx, agent_id: int | None = None) -> "LabeledShard":
        return LabeledShard(self.features[idx], self.targets[idx], self.agent_id if agent_id is None else agent_id)

    @staticmethod
    def concat(shards) -> "LabeledShard":
        shards = list(shards)
        return LabeledShard(
            np.concatenate([s.features for s in shards]),
            np.concatenate([s.targets for s in shards]),
            shards[0].agent_id if shards else 0,
        )


@dataclass(frozen=True)
class ObservationNoise:
    covariance: np.ndarray

    def __post_init__(self):
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        try:
            linalg.cholesky(cov, lower=True)
        except linalg.LinAlgError:
            raise IndefinitePrecision("observation covariance is not positive definite") from None
        object.__setattr__(self, "covariance", cov)

    @classmethod
    def isotropic(cls, variance: float, d_y: int = 1) -> "ObservationNoise":
        return cls(variance * np.eye(d_y))

    @property
    def precision(self) -> np.ndarray:
        return linalg.inv(self.covariance)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 0.05
    rng_seed: int = 0
    fisher_jitter: float = 1e-6

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be at least 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.fisher_jitter < 0:
            raise ValueError("fisher_jitter must be nonnegative")


class TrainingDivergence(RuntimeError):
    pass


# linear-Gaussian models


def _jacobians(shard: LabeledShard, feature_map: Callable | None) -> np.ndarray:
    """Stack per-sample Jacobians into ``(N, d_y, d)``."""
    if feature_map is None:
        return shard.features[:, None, :]
    rows = [np.atleast_2d(np.asarray(feature_map(x), dtype=float)) for x in shard.features]
    if not rows:
        return np.zeros((0, shard.targets.shape[1], 0))
    return np.stack(rows)


def linear_posterior(
    prior: GaussianBelief,
    shard: LabeledShard,
    noise: ObservationNoise,
    feature_map: Callable | None = None,
) -> GaussianBelief:
    """Conjugate update for ``y = F(x) theta + r``, ``r ~ N(0, R)``.

    ``feature_map`` returns the ``(d_y, d)`` Jacobian (a length-``d`` row for
    scalar targets); the default is the identity feature map.
    """
    if shard.is_classification:
        raise ValueError("linear_posterior needs real-valued targets")
    if shard.n == 0:
        return prior
    jac = _jacobians(shard, feature_map)
    if jac.shape[2] != prior.dim:
        raise DimensionMismatch(f"feature dimension {jac.shape[2]} does not match prior dimension {prior.dim}")
    if jac.shape[1] != noise.covariance.shape[0] or shard.targets.shape[1] != jac.shape[1]:
        raise DimensionMismatch("observation dimension mismatch between targets, features and noise")
    r_inv = noise.precision
    # sum_n F^T R^-1 F and sum_n F^T R^-1 y
    weighted = np.einsum("jk,nkd->njd", r_inv, jac)
    data_precision = np.einsum("nji,njk->ik", jac, weighted)
    data_info = np.einsum("nji,nj->i", weighted, shard.targets)
    precision = prior.dense_precision() + data_precision
    return from_information(precision, prior.information() + data_info, what="local posterior precision")


# LDA class posteriors


def lda_fit_means(
    class_means: np.ndarray,
    shard: LabeledShard,
    prior_strength: float = 1.0,
) -> np.ndarray:
    """Class-mean estimates shrunk toward ``class_means``.

    ``mean_c = (k * prior_c + sum_{y=c} x) / (k + n_c)``; an empty class keeps
    its prior mean.
    """
    prior_means = np.atleast_2d(np.asarray(class_means, dtype=float))
    n_classes = prior_means.shape[0]
    if shard.n and shard.targets.max() >= n_classes:
        raise ValueError("shard contains labels outside the class range")
    onehot = np.zeros((shard.n, n_classes))
    onehot[np.arange(shard.n), shard.targets] = 1.0
    sums = onehot.T @ shard.features
    counts = onehot.sum(axis=0)
    denom = prior_strength + counts
    with np.errstate(invalid="ignore", divide="ignore"):
        means = (prior_strength * prior_means + sums) / denom[:, None]
    return np.where(denom[:, None] > 0, means, prior_means)


def lda_log_posteriors(means: np.ndarray, shared_cov: np.ndarray, log_prior: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Normalized class log-posteriors for each query row, shape ``(N, L)``."""
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    chol = linalg.cholesky(np.atleast_2d(shared_cov), lower=True)
    # whiten so the Mahalanobis distance becomes Euclidean
    wq = linalg.solve_triangular(chol, queries.T, lower=True).T
    wm = linalg.solve_triangular(chol, means.T, lower=True).T
    loglik = -0.5 * ((wq[:, None, :] - wm[None, :, :]) ** 2).sum(axis=2)
    acc = loglik + log_prior
    return acc - np.logaddexp.reduce(acc, axis=1, keepdims=True)


def lda_class_posterior(
    class_means: np.ndarray,
    shared_cov: np.ndarray,
    prior_probs: DiscreteBelief,
    shard: LabeledShard,
    query,
    prior_strength: float = 1.0,
) -> DiscreteBelief:
    """``P(C=c | D_m, x)`` for a single query."""
    query = np.asarray(query, dtype=float).reshape(-1)
    means = lda_fit_means(class_means, shard, prior_strength)
    if means.shape[0] != prior_probs.n_classes:
        raise ValueError("class means and prior disagree on the number of classes")
    if query.shape[0] != means.shape[1]:
        raise DimensionMismatch(f"query of length {query.shape[0]} for {means.shape[1]}-dimensional classes")
    return DiscreteBelief.from_log_weights(lda_log_posteriors(means, shared_cov, prior_probs.log_probs, query)[0])


# Laplace-approximated neural networks


def empirical_fisher(spec: MlpSpec, params: np.ndarray, shard: LabeledShard) -> np.ndarray:
    """Diagonal of the averaged outer product of per-sample log-likelihood gradients."""
    params = np.asarray(params, dtype=float)
    if params.shape != (spec.parameter_count,):
        raise DimensionMismatch(f"expected {spec.parameter_count} parameters, got {params.shape[0]}")
    return mlp.fisher_diagonal(spec, params, shard.features, shard.targets)


def mlp_predict(spec: MlpSpec, params: np.ndarray, query) -> DiscreteBelief:
    return DiscreteBelief.from_log_weights(mlp.predict_log_proba(spec, params, query)[0])


def map_objective(prior: GaussianBelief, spec: MlpSpec, shard: LabeledShard, params: np.ndarray):
    """Negative log-posterior (up to a constant) and its gradient."""
    ll, g_ll = mlp.log_likelihood_and_grad(spec, params, shard.features, shard.targets)
    diff = params - prior.mean
    p_diff = prior.precision * diff if prior.kind == DIAGONAL else prior.precision @ diff
    return -ll + 0.5 * float(diff @ p_diff), -g_ll + p_diff


def laplace_fit(
    prior: GaussianBelief,
    shard: LabeledShard,
    spec: MlpSpec,
    cfg: TrainConfig,
    *,
    init: np.ndarray | None = None,
    context: str = "",
) -> GaussianBelief:
    """MAP fit by full-batch proximal gradient descent plus a diagonal Fisher curvature.

    The objective is averaged over the shard so that ``learning_rate`` has the
    usual per-sample scale. Training starts from the prior mean unless
    ``init`` is given. The returned precision is the prior precision plus
    ``N * fisher(mean) + fisher_jitter``.
    """
    if prior.dim != spec.parameter_count:
        raise DimensionMismatch(f"prior has dim {prior.dim}, network has {spec.parameter_count} parameters")
    if not shard.is_classification:
        raise ValueError("laplace_fit needs class labels")
    if shard.n == 0:
        return prior
    n = shard.n
    step = cfg.learning_rate / n
    theta = np.array(prior.mean if init is None else init, dtype=float)
    # The quadratic prior term is applied as an exact proximal step, so the
    # iteration stays stable however concentrated the prior becomes.
    if prior.kind == DIAGONAL:
        shrink = 1.0 + step * prior.precision
        anchor = step * prior.precision * prior.mean

        def prox(v):
            return (v + anchor) / shrink
    else:
        factor = linalg.cho_factor(np.eye(prior.dim) + step * prior.precision, lower=True)
        anchor = step * (prior.precision @ prior.mean)

        def prox(v):
            return linalg.cho_solve(factor, v + anchor)

    for epoch in range(cfg.epochs):
        ll, g_ll = mlp.log_likelihood_and_grad(spec, theta, shard.features, shard.targets)
        if not np.isfinite(ll) or not np.all(np.isfinite(g_ll)):
            raise TrainingDivergence(f"non-finite loss at epoch {epoch}{' ' + context if context else ''}")
        theta = prox(theta + step * g_ll)
    fisher = n * empirical_fisher(spec, theta, shard) + cfg.fisher_jitter
    if prior.kind == DIAGONAL:
        return GaussianBelief(theta, prior.precision + fisher)
    return GaussianBelief(theta, prior.precision + np.diag(fisher))
