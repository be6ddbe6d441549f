"""CIL and CIP fusion rules for Gaussian and discrete beliefs.

CIL (conditionally independent likelihoods) divides the product of local
posteriors by the shared prior raised to ``M - 1`` and recovers the
centralized posterior exactly. CIP (conditionally independent posteriors) is
the plain product of experts and counts the prior ``M`` times.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .gaussian import (
    DIAGONAL,
    GaussianBelief,
    _check_dims,
    as_kind,
    common_kind,
    from_information,
    kl_divergence,
)


class Rule(str, Enum):
    CIL = "CIL"
    CIP = "CIP"


@dataclass(frozen=True, eq=False)
class DiscreteBelief:
    """Probability vector over ``L`` classes kept in log space."""

    log_probs: np.ndarray

    def __post_init__(self):
        lp = np.array(self.log_probs, dtype=float).reshape(-1)
        if lp.size == 0:
            raise ValueError("discrete belief needs at least one class")
        if np.any(np.isnan(lp)) or np.any(lp == np.inf):
            raise ValueError("log-probabilities must be finite or -inf")
        total = logsumexp(lp)
        if abs(total) > 1e-12:
            raise ValueError(f"probabilities sum to exp({total:.3e}), not 1")
        lp.setflags(write=False)
        object.__setattr__(self, "log_probs", lp)

    @classmethod
    def from_probs(cls, probs) -> "DiscreteBelief":
        p = np.asarray(probs, dtype=float)
        if np.any(p < 0):
            raise ValueError("probabilities must be nonnegative")
        with np.errstate(divide="ignore"):
            return cls.from_log_weights(np.log(p))

    @classmethod
    def from_log_weights(cls, log_weights) -> "DiscreteBelief":
        """Normalize unnormalized log-weights."""
        lw = np.asarray(log_weights, dtype=float)
        return cls(lw - logsumexp(lw))

    @classmethod
    def uniform(cls, n_classes: int) -> "DiscreteBelief":
        return cls(np.full(n_classes, -np.log(n_classes)))

    @property
    def n_classes(self) -> int:
        return self.log_probs.shape[0]

    @property
    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)


@dataclass(frozen=True, eq=False)
class FusionReport:
    """Fused belief plus the CIL fusion weights.

    ``weights[0]`` multiplies the prior mean and ``weights[m]`` the m-th local
    mean. Each weight is a ``(d, d)`` matrix, or a ``(d,)`` diagonal when all
    inputs are diagonal.
    """

    fused: GaussianBelief
    rule: Rule
    weights: list[np.ndarray] = field(default_factory=list)
    kl_to_alternative: float | None = None


def _local_sums(locals_: Sequence[GaussianBelief], kind: str):
    precision = sum(as_kind(b.precision, kind) for b in locals_)
    information = sum(b.information() for b in locals_)
    return precision, information


def fuse_cip(locals_: Sequence[GaussianBelief]) -> FusionReport:
    """Product of experts: precisions add, means are precision-weighted."""
    locals_ = list(locals_)
    if not locals_:
        raise ValueError("need at least one local belief")
    _check_dims(locals_)
    if len(locals_) == 1:
        return FusionReport(locals_[0], Rule.CIP)
    precision, information = _local_sums(locals_, common_kind(locals_))
    return FusionReport(from_information(precision, information), Rule.CIP)


def _cil_weights(fused: GaussianBelief, prior: GaussianBelief, locals_: Sequence[GaussianBelief]):
    m = len(locals_)
    if fused.kind == DIAGONAL:
        w0 = (1 - m) * prior.precision / fused.precision
        return [w0] + [b.precision / fused.precision for b in locals_]
    kind = fused.kind
    w0 = (1 - m) * fused.solve(as_kind(prior.precision, kind))
    return [w0] + [fused.solve(as_kind(b.precision, kind)) for b in locals_]


def fuse_cil(prior: GaussianBelief, locals_: Sequence[GaussianBelief], *, with_weights: bool = True) -> FusionReport:
    """Optimal fusion under a shared prior.

    ``Lambda = sum_m P_m - (M - 1) P_0`` and
    ``mu = Lambda^-1 (sum_m P_m theta_m - (M - 1) P_0 theta_0)``.
    Raises IndefinitePrecision if ``Lambda`` is not positive definite.
    """
    locals_ = list(locals_)
    if not locals_:
        raise ValueError("need at least one local belief")
    _check_dims([prior, *locals_])
    m = len(locals_)
    if m == 1:
        fused = locals_[0]
    else:
        kind = common_kind([prior, *locals_])
        precision, information = _local_sums(locals_, kind)
        precision = precision - (m - 1) * as_kind(prior.precision, kind)
        information = information - (m - 1) * prior.information()
        fused = from_information(precision, information, what="CIL fused precision")
    weights = _cil_weights(fused, prior, locals_) if with_weights else []
    return FusionReport(fused, Rule.CIL, weights)


def fuse_cil_heterogeneous(
    global_prior: GaussianBelief,
    local_priors: Sequence[GaussianBelief],
    locals_: Sequence[GaussianBelief],
) -> FusionReport:
    """CIL when each agent used its own prior: global prior times likelihood ratios."""
    local_priors, locals_ = list(local_priors), list(locals_)
    if len(local_priors) != len(locals_):
        raise ValueError("need one local prior per local posterior")
    if not locals_:
        raise ValueError("need at least one local belief")
    _check_dims([global_prior, *local_priors, *locals_])
    kind = common_kind([global_prior, *local_priors, *locals_])
    precision = as_kind(global_prior.precision, kind).copy()
    information = global_prior.information().copy()
    for post, pri in zip(locals_, local_priors):
        precision = precision + as_kind(post.precision, kind) - as_kind(pri.precision, kind)
        information = information + post.information() - pri.information()
    fused = from_information(precision, information, what="CIL fused precision")
    return FusionReport(fused, Rule.CIL)


def fuse(rule: Rule | str, prior: GaussianBelief, locals_: Sequence[GaussianBelief]) -> FusionReport:
    rule = Rule(rule)
    if rule is Rule.CIL:
        return fuse_cil(prior, locals_, with_weights=False)
    return fuse_cip(locals_)


def fuse_both(prior: GaussianBelief, locals_: Sequence[GaussianBelief]) -> tuple[FusionReport, FusionReport]:
    """CIL and CIP reports, each annotated with KL(CIL || CIP)."""
    cil = fuse_cil(prior, locals_)
    cip = fuse_cip(locals_)
    kl = kl_divergence(cil.fused, cip.fused)
    return (
        FusionReport(cil.fused, cil.rule, cil.weights, kl),
        FusionReport(cip.fused, cip.rule, cip.weights, kl),
    )


# discrete beliefs


def fuse_log_probs_cil(log_prior: np.ndarray, local_log_probs: np.ndarray) -> np.ndarray:
    """Vectorized discrete CIL.

    ``local_log_probs`` has shape ``(M, ..., L)``; the result has shape
    ``(..., L)`` and is normalized along the last axis.
    """
    log_prior = np.asarray(log_prior, dtype=float)
    if np.any(np.isneginf(log_prior)):
        raise ValueError("prior assigns zero probability to a class")
    m = local_log_probs.shape[0]
    acc = np.sum(local_log_probs, axis=0) - (m - 1) * log_prior
    return acc - logsumexp(acc, axis=-1, keepdims=True)


def fuse_log_probs_cip(local_log_probs: np.ndarray) -> np.ndarray:
    """Vectorized discrete CIP over the leading agent axis."""
    acc = np.sum(local_log_probs, axis=0)
    return acc - logsumexp(acc, axis=-1, keepdims=True)


def _stack(locals_: Sequence[DiscreteBelief]) -> np.ndarray:
    locals_ = list(locals_)
    if not locals_:
        raise ValueError("need at least one local belief")
    sizes = {b.n_classes for b in locals_}
    if len(sizes) != 1:
        raise ValueError(f"local beliefs disagree on the number of classes {sorted(sizes)}")
    return np.stack([b.log_probs for b in locals_])


def fuse_discrete_cil(prior: DiscreteBelief, locals_: Sequence[DiscreteBelief]) -> DiscreteBelief:
    stacked = _stack(locals_)
    if stacked.shape[1] != prior.n_classes:
        raise ValueError("prior and local beliefs disagree on the number of classes")
    if stacked.shape[0] == 1:
        return locals_[0]
    return DiscreteBelief(fuse_log_probs_cil(prior.log_probs, stacked))


def fuse_discrete_cip(locals_: Sequence[DiscreteBelief]) -> DiscreteBelief:
    stacked = _stack(locals_)
    if stacked.shape[0] == 1:
        return locals_[0]
    return DiscreteBelief(fuse_log_probs_cip(stacked))


def discrete_kl(p_log: np.ndarray, q_log: np.ndarray) -> np.ndarray:
    """KL between discrete distributions given as log-probabilities (last axis)."""
    p = np.exp(p_log)
    with np.errstate(invalid="ignore"):
        terms = np.where(p > 0, p * (p_log - q_log), 0.0)
    return np.maximum(np.sum(terms, axis=-1), 0.0)
