"""Quick built-in checks of the fusion identities and closed forms.

Runs in a few seconds without the test suite installed; each check prints
one PASS/FAIL line.
"""

from __future__ import annotations

import numpy as np
from scipy import integrate, stats

from . import datagen, mlp
from .divergence import kl_cil_cip, kl_decomposition, log_s, log_s_derivatives
from .experiments import centralized_posterior, regression_locals
from .federated import shard_dataset
from .fusion import fuse_cil, fuse_cip
from .gaussian import GaussianBelief, divide, kl_divergence, product
from .local_inference import ObservationNoise, linear_posterior
from .mlp import MlpSpec


def _cil_matches_centralized():
    train, _, _ = datagen.gen_linear(datagen.linear_spec(seed=3))
    worst = 0.0
    for m in (1, 2, 6, 26, 50):
        prior, locals_ = regression_locals(train, m, 1.0, 4.0, seed=3)
        fused = fuse_cil(prior, locals_, with_weights=False).fused
        central = centralized_posterior(prior, [train], 4.0)
        worst = max(worst, float(np.max(np.abs(fused.mean - central.mean))))
    return worst < 1e-8, f"max |CIL - centralized| = {worst:.2e}"


def _cip_partition_invariant():
    train, _, _ = datagen.gen_linear(datagen.linear_spec(seed=4))
    noise = ObservationNoise.isotropic(4.0)
    prior = GaussianBelief.isotropic(np.zeros(train.features.shape[1]), 1.0)
    means = []
    for seed in (1, 2):
        shards = shard_dataset(train, 10, seed)
        means.append(fuse_cip([linear_posterior(prior, s, noise) for s in shards]).fused.mean)
    gap = float(np.max(np.abs(means[0] - means[1])))
    return gap < 1e-10, f"partition gap {gap:.2e}"


def _kl_quadrature():
    p, q = stats.norm(0.0, 1.0), stats.norm(0.0, np.sqrt(2.0))
    ref, _ = integrate.quad(lambda x: p.pdf(x) * (p.logpdf(x) - q.logpdf(x)), -30, 30, epsabs=1e-13)
    got = kl_divergence(GaussianBelief([0.0], [1.0]), GaussianBelief([0.0], [0.5]))
    return abs(got - ref) < 1e-6, f"closed form {got:.8f} vs quadrature {ref:.8f}"


def _kl_monotone():
    train, _, _ = datagen.gen_linear(datagen.linear_spec(seed=5))
    in_m = [kl_cil_cip(*regression_locals(train, m, 1.0, 4.0, seed=5)) for m in range(2, 12)]
    in_q = [kl_cil_cip(*regression_locals(train, 6, q, 4.0, seed=5)) for q in (1, 4, 16, 81)]
    ok = all(b > a for a, b in zip(in_m, in_m[1:])) and all(b < a for a, b in zip(in_q, in_q[1:]))
    return ok, f"KL over M {in_m[0]:.3g}..{in_m[-1]:.3g}, over q0 {in_q[0]:.3g}..{in_q[-1]:.3g}"


def _log_s_derivative():
    rng = np.random.default_rng(0)
    prior = GaussianBelief.from_covariance(rng.normal(size=3), np.eye(3) * 2.0)
    a = rng.normal(size=(3, 3))
    post = GaussianBelief.from_covariance(rng.normal(size=3), a @ a.T * 0.1 + 0.05 * np.eye(3))
    h = 1e-4
    fd = (log_s(2.0 + h, prior, post) - log_s(2.0 - h, prior, post)) / (2 * h)
    first, second = log_s_derivatives(2.0, prior, post)
    rel = abs(first - fd) / max(1.0, abs(fd))
    return rel < 1e-5 and second >= -1e-12 and abs(log_s(0.0, prior, post)) < 1e-12, f"rel. error {rel:.1e}, second {second:.3g}"


def _kl_decomposition():
    train, _, _ = datagen.gen_linear(datagen.linear_spec(seed=6))
    prior, locals_ = regression_locals(train, 6, 1.0, 4.0, seed=6)
    direct = kl_cil_cip(prior, locals_)
    a, b = kl_decomposition(prior, locals_)
    gap = abs(direct - (a + b))
    return gap < 1e-8 * max(1.0, direct), f"|direct - decomposed| = {gap:.2e}"


def _product_divide_roundtrip():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(4, 4))
    p = GaussianBelief.from_covariance(rng.normal(size=4), a @ a.T + np.eye(4))
    q = GaussianBelief(rng.normal(size=4), rng.uniform(0.5, 2.0, 4))
    back = divide(product([p, q]).belief, q)
    gap = max(float(np.max(np.abs(back.mean - p.mean))), float(np.max(np.abs(back.dense_precision() - p.precision))))
    return gap < 1e-10, f"round-trip gap {gap:.2e}"


def _mlp_gradient():
    spec = MlpSpec((3, 5, 3))
    rng = np.random.default_rng(2)
    params = rng.normal(size=spec.parameter_count) * 0.5
    x, y = rng.normal(size=(8, 3)), rng.integers(0, 3, 8)
    _, grad = mlp.log_likelihood_and_grad(spec, params, x, y)
    h = 1e-5
    fd = np.array(
        [
            (mlp.log_likelihood_and_grad(spec, params + h * e, x, y)[0] - mlp.log_likelihood_and_grad(spec, params - h * e, x, y)[0]) / (2 * h)
            for e in np.eye(spec.parameter_count)
        ]
    )
    rel = float(np.max(np.abs(grad - fd)) / max(1.0, float(np.max(np.abs(fd)))))
    return rel < 1e-4, f"max rel. gradient error {rel:.1e}"


CHECKS = [
    ("CIL equals the centralized posterior", _cil_matches_centralized),
    ("CIP is partition invariant", _cip_partition_invariant),
    ("Gaussian KL matches quadrature", _kl_quadrature),
    ("KL grows with M and shrinks with q0", _kl_monotone),
    ("log S_M derivative and convexity", _log_s_derivative),
    ("KL decomposition agrees with direct KL", _kl_decomposition),
    ("product/divide round trip", _product_divide_roundtrip),
    ("MLP gradient matches finite differences", _mlp_gradient),
]


def run_selftest(echo=print) -> bool:
    ok_all = True
    for name, check in CHECKS:
        try:
            ok, detail = check()
        except Exception as exc:  # a crash is a failed check, not a crashed run
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        ok_all &= ok
        echo(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return ok_all
