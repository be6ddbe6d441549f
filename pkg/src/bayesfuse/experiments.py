"""Experiment configurations and one-shot runners for the fusion experiments."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import datagen, mlp
from .divergence import kl_cil_cip
from .federated import fuse_with_fallback, initial_state, run_rounds, seeded_init, shard_dataset
from .fusion import FusionReport, Rule, discrete_kl, fuse_both, fuse_log_probs_cil, fuse_log_probs_cip
from .gaussian import GaussianBelief
from .local_inference import (
    LabeledShard,
    ObservationNoise,
    TrainConfig,
    laplace_fit,
    lda_fit_means,
    lda_log_posteriors,
    linear_posterior,
)
from .mlp import MlpSpec

log = logging.getLogger(__name__)

EXPERIMENTS = ("regression", "lda", "bnn_oneshot", "federated", "kl_sweep")


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything needed to reproduce one experiment.

    Grids, when non-empty, override the matching scalar. ``q0`` is the prior
    variance; for the federated experiment it is the round-1 prior variance.
    """

    experiment: str = "regression"
    generator: datagen.GeneratorSpec = field(default_factory=datagen.linear_spec)
    M: int = 6
    M_grid: tuple[int, ...] = ()
    q0: float = 1.0
    q0_grid: tuple[float, ...] = ()
    P1: float = 0.6
    P1_grid: tuple[float, ...] = ()
    rounds: int = 18
    rules: tuple[str, ...] = ("CIL", "CIP")
    repetitions: int = 50
    base_seed: int = 0
    output_dir: str = "results"
    axis: str = "M"
    # regression
    model_noise_var: float = 4.0
    # lda
    lda_prior_strength: float = 1.0
    # neural networks
    hidden: tuple[int, ...] = (64,)
    activation: str = "tanh"
    epochs: int = 100
    learning_rate: float = 0.05
    fisher_jitter: float = 1e-6

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ValueError(f"unknown experiment {self.experiment!r}")
        if self.repetitions < 1:
            raise ValueError("repetitions must be at least 1")
        for name in ("M_grid", "q0_grid", "P1_grid"):
            grid = tuple(getattr(self, name))
            object.__setattr__(self, name, grid)
            if any(b <= a for a, b in zip(grid, grid[1:])):
                raise ValueError(f"{name} must be strictly increasing")
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        rules = tuple(Rule(str(r).upper()).value for r in self.rules)
        if not rules:
            raise ValueError("at least one fusion rule is required")
        object.__setattr__(self, "rules", rules)
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.M < 1 or any(m < 1 for m in self.M_grid):
            raise ValueError("agent counts must be at least 1")
        if self.q0 <= 0 or any(q <= 0 for q in self.q0_grid):
            raise ValueError("prior variances must be positive")
        if not 0 < self.P1 < 1 or any(not 0 < p < 1 for p in self.P1_grid):
            raise ValueError("class-1 prior probabilities must lie in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return replace(self, **changes)

    def mlp_spec(self) -> MlpSpec:
        g = self.generator
        return MlpSpec((g.d_x, *self.hidden, g.n_classes), self.activation)

    def train_config(self, seed: int = 0) -> TrainConfig:
        return TrainConfig(self.epochs, self.learning_rate, seed, self.fisher_jitter)


def regression_config(**kw) -> ExperimentConfig:
    return ExperimentConfig(experiment="regression", generator=datagen.linear_spec(), **kw)


def lda_config(**kw) -> ExperimentConfig:
    kw.setdefault("repetitions", 20)
    return ExperimentConfig(experiment="lda", generator=datagen.two_class_spec(), **kw)


def bnn_config(**kw) -> ExperimentConfig:
    kw.setdefault("repetitions", 10)
    return ExperimentConfig(experiment="bnn_oneshot", generator=datagen.multiclass_spec(), **kw)


def federated_config(**kw) -> ExperimentConfig:
    kw.setdefault("repetitions", 5)
    kw.setdefault("q0", 100.0)
    kw.setdefault("hidden", (32, 8))
    kw.setdefault("learning_rate", 0.01)
    kw.setdefault("epochs", 20)
    return ExperimentConfig(experiment="federated", generator=datagen.mixture_spec(), **kw)


def repetition_seed(base_seed: int, rep: int) -> int:
    """Data seed for one Monte Carlo repetition; independent of grid position."""
    return int(np.random.SeedSequence([base_seed, rep]).generate_state(1)[0])


def shard_seed(data_seed: int, m: int) -> int:
    return int(np.random.SeedSequence([data_seed, m, 0x5EED]).generate_state(1)[0])


@dataclass
class OneShotResult:
    """Fused reports (Gaussian experiments only) plus scalar metrics keyed by rule."""

    reports: dict[str, FusionReport]
    metrics: dict[str, dict[str, float]]
    kl_cil_cip: float


# linear regression


def regression_locals(train: LabeledShard, m: int, q0: float, noise_var: float, seed: int):
    prior = GaussianBelief.isotropic(np.zeros(train.features.shape[1]), q0)
    noise = ObservationNoise.isotropic(noise_var)
    shards = shard_dataset(train, m, shard_seed(seed, m))
    return prior, [linear_posterior(prior, s, noise) for s in shards]


def prediction_mse(belief: GaussianBelief, test: LabeledShard) -> float:
    resid = test.features @ belief.mean - test.targets[:, 0]
    return float(np.mean(resid**2))


def run_regression(cfg: ExperimentConfig, m: int, q0: float, seed: int) -> OneShotResult:
    train, test, _ = datagen.gen_linear(cfg.generator.replace(seed=seed))
    prior, locals_ = regression_locals(train, m, q0, cfg.model_noise_var, seed)
    cil, cip = fuse_both(prior, locals_)
    return OneShotResult(
        {"CIL": cil, "CIP": cip},
        {"CIL": {"test_mse": prediction_mse(cil.fused, test)}, "CIP": {"test_mse": prediction_mse(cip.fused, test)}},
        cil.kl_to_alternative,
    )


# LDA class posteriors


def lda_local_log_posteriors(train, test, m, p1, cfg: ExperimentConfig, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """``(M, N_test, L)`` local class log-posteriors and the shared log prior."""
    g = cfg.generator
    log_prior = np.log(np.array([p1, 1.0 - p1]))
    prior_means = np.zeros((g.n_classes, g.d_x))
    cov = np.eye(g.d_x)
    shards = shard_dataset(train, m, shard_seed(seed, m))
    stacked = np.stack(
        [lda_log_posteriors(lda_fit_means(prior_means, s, cfg.lda_prior_strength), cov, log_prior, test.features) for s in shards]
    )
    return stacked, log_prior


def run_lda(cfg: ExperimentConfig, m: int, p1: float, seed: int) -> OneShotResult:
    train, test = datagen.gen_two_class(cfg.generator.replace(seed=seed))
    stacked, log_prior = lda_local_log_posteriors(train, test, m, p1, cfg, seed)
    cil = fuse_log_probs_cil(log_prior, stacked)
    cip = fuse_log_probs_cip(stacked)
    acc = {r: float(np.mean(np.argmax(lp, axis=1) == test.targets)) for r, lp in (("CIL", cil), ("CIP", cip))}
    kl = float(np.mean(discrete_kl(cil, cip)))
    return OneShotResult({}, {r: {"test_accuracy": a} for r, a in acc.items()}, kl)


# one-shot Bayesian neural networks


def bnn_prior(spec: MlpSpec, q0: float, seed: int) -> GaussianBelief:
    return initial_state(spec, q0, seed).global_belief


def run_bnn(cfg: ExperimentConfig, m: int, q0: float, seed: int) -> OneShotResult:
    """Local Laplace fits fused once; accuracies are also reported relative to a
    model trained the same way on the pooled data."""
    train, test = datagen.gen_multiclass(cfg.generator.replace(seed=seed))
    spec = cfg.mlp_spec()
    tcfg = cfg.train_config(seed)
    prior = bnn_prior(spec, q0, seed)
    shards = shard_dataset(train, m, shard_seed(seed, m))
    init = seeded_init(spec, seed)
    locals_ = [laplace_fit(prior, s, spec, tcfg, init=init, context=f"(agent {s.agent_id})") for s in shards]
    global_post = laplace_fit(prior, train, spec, tcfg, init=init, context="(pooled)")
    global_acc = mlp.accuracy(spec, global_post.mean, test.features, test.targets)
    cil, cip = fuse_both(prior, locals_)
    metrics = {}
    for rule, rep in (("CIL", cil), ("CIP", cip)):
        acc = mlp.accuracy(spec, rep.fused.mean, test.features, test.targets)
        metrics[rule] = {"test_accuracy": acc, "accuracy_ratio": acc / global_acc}
    metrics["global"] = {"test_accuracy": global_acc}
    return OneShotResult({"CIL": cil, "CIP": cip}, metrics, cil.kl_to_alternative)


def run_one_shot(cfg: ExperimentConfig, m: int | None = None, q0: float | None = None, p1: float | None = None, seed: int | None = None) -> OneShotResult:
    """Generate data, shard it, fit locals, fuse with both rules and evaluate."""
    m = cfg.M if m is None else m
    q0 = cfg.q0 if q0 is None else q0
    p1 = cfg.P1 if p1 is None else p1
    seed = repetition_seed(cfg.base_seed, 0) if seed is None else seed
    if cfg.experiment in ("regression", "kl_sweep"):
        return run_regression(cfg, m, q0, seed)
    if cfg.experiment == "lda":
        return run_lda(cfg, m, p1, seed)
    if cfg.experiment == "bnn_oneshot":
        return run_bnn(cfg, m, q0, seed)
    raise ValueError(f"{cfg.experiment!r} is not a one-shot experiment")


# federated rounds


def run_federated(cfg: ExperimentConfig, m: int, rule: str, seed: int):
    train, test = datagen.gen_mixture(cfg.generator.replace(seed=seed))
    shards = shard_dataset(train, m, shard_seed(seed, m))
    return run_rounds(shards, cfg.mlp_spec(), cfg.train_config(seed), rule, cfg.rounds, cfg.q0, seed, test)


def federated_round_kl(cfg: ExperimentConfig, m: int, seed: int) -> list[float]:
    """KL(CIL || CIP) between the two fusions of each round's CIL-trajectory locals."""
    states = run_federated(cfg, m, "CIL", seed)
    spec = cfg.mlp_spec()
    priors = [initial_state(spec, cfg.q0, seed).global_belief] + [s.global_belief for s in states[:-1]]
    return [kl_cil_cip(p, s.agent_posteriors) for p, s in zip(priors, states)]


# sweep support


def kl_per_repetition(axis: str, value: float, cfg: ExperimentConfig, point_index: int = 0) -> list[float]:
    """KL(CIL || CIP) for each repetition at one sweep point."""
    seeds = [repetition_seed(cfg.base_seed, r) for r in range(cfg.repetitions)]
    if axis == "round":
        t = int(value)
        return [federated_round_kl(cfg.replace(rounds=max(t, 1)), cfg.M, s)[t - 1] for s in seeds]
    m = int(value) if axis == "M" else cfg.M
    q0 = float(value) if axis == "q0" else cfg.q0
    p1 = float(value) if axis == "P1" else cfg.P1
    if axis == "P1":
        return [run_lda(cfg, m, p1, s).kl_cil_cip for s in seeds]
    if cfg.experiment == "bnn_oneshot":
        return [run_bnn(cfg, m, q0, s).kl_cil_cip for s in seeds]
    out = []
    for s in seeds:
        train, _, _ = datagen.gen_linear(cfg.generator.replace(seed=s))
        prior, locals_ = regression_locals(train, m, q0, cfg.model_noise_var, s)
        out.append(kl_cil_cip(prior, locals_))
    return out


# metric tables

KL_RULE = "both"


def repetition_metrics(cfg: ExperimentConfig, axis: str, value: float, seed: int) -> dict[tuple[str, str], float]:
    """``(rule, metric) -> value`` for one repetition of a one-shot experiment."""
    m = int(value) if axis == "M" else cfg.M
    q0 = float(value) if axis == "q0" else cfg.q0
    p1 = float(value) if axis == "P1" else cfg.P1
    res = run_one_shot(cfg, m, q0, p1, seed)
    out = {(rule, name): v for rule, metrics in res.metrics.items() for name, v in metrics.items() if rule in cfg.rules or rule not in ("CIL", "CIP")}
    out[(KL_RULE, "kl_cil_cip")] = res.kl_cil_cip
    return out


def federated_metrics(cfg: ExperimentConfig, seed: int) -> dict[tuple[int, str, str], float]:
    """``(round, rule, metric) -> value`` for one repetition of the recursive experiment."""
    out = {}
    for rule in cfg.rules:
        for state in run_federated(cfg, cfg.M, rule, seed):
            out[(state.t, rule, "fell_back")] = float(state.fell_back)
            for name, v in state.metrics.items():
                out[(state.t, rule, name)] = v
    return out


def _one_shot_task(args):
    cfg, axis, value, seed = args
    return repetition_metrics(cfg, axis, value, seed)


def _federated_task(args):
    cfg, seed = args
    return federated_metrics(cfg, seed)


@dataclass
class MetricRow:
    axis_value: float
    rule: str
    metric_name: str
    mean: float
    stderr: float
    repetitions: int


def summarize(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation over sqrt(n); zero stderr for one value."""
    v = np.asarray(values, dtype=float)
    if v.size < 2:
        return float(v.mean()), 0.0
    return float(v.mean()), float(v.std(ddof=1) / np.sqrt(v.size))


def _map(fn, tasks, jobs: int):
    if jobs <= 1:
        return [_guard(fn, t) for t in tasks]
    from concurrent.futures import ProcessPoolExecutor

    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(_guard, [fn] * len(tasks), tasks))


_RECOVERABLE = (ArithmeticError, ValueError, RuntimeError, np.linalg.LinAlgError)


def _guard(fn, task):
    try:
        return fn(task)
    except _RECOVERABLE as exc:
        return exc


def metric_table(cfg: ExperimentConfig, axis: str, grid: Sequence[float], jobs: int = 1) -> tuple[list[MetricRow], dict[float, str]]:
    """Rows of per-point means and standard errors plus the failed grid points.

    A grid point fails as a whole when any of its repetitions raises; for
    the ``round`` axis a failed repetition fails every round.
    """
    seeds = [repetition_seed(cfg.base_seed, r) for r in range(cfg.repetitions)]
    rows, failures = [], {}
    if axis == "round":
        results = _map(_federated_task, [(cfg, s) for s in seeds], jobs)
        errors = [r for r in results if isinstance(r, Exception)]
        if errors:
            return [], {float(t): str(errors[0]) for t in grid}
        keys = sorted({(k[1], k[2]) for k in results[0]})
        for t in grid:
            for rule, name in keys:
                mean, err = summarize([r[(int(t), rule, name)] for r in results])
                rows.append(MetricRow(float(t), rule, name, mean, err, len(seeds)))
        return rows, failures
    tasks = [(cfg, axis, g, s) for g in grid for s in seeds]
    results = _map(_one_shot_task, tasks, jobs)
    n = len(seeds)
    for i, g in enumerate(grid):
        chunk = results[i * n : (i + 1) * n]
        errors = [r for r in chunk if isinstance(r, Exception)]
        if errors:
            log.warning("grid point %s=%s failed: %s", axis, g, errors[0])
            failures[float(g)] = f"{type(errors[0]).__name__}: {errors[0]}"
            continue
        for rule, name in sorted(chunk[0]):
            mean, err = summarize([r[(rule, name)] for r in chunk])
            rows.append(MetricRow(float(g), rule, name, mean, err, n))
    return rows, failures


def centralized_posterior(prior: GaussianBelief, shards: Sequence[LabeledShard], noise_var: float) -> GaussianBelief:
    return linear_posterior(prior, LabeledShard.concat(shards), ObservationNoise.isotropic(noise_var))


__all__ = [
    "ExperimentConfig",
    "MetricRow",
    "OneShotResult",
    "bnn_config",
    "federated_config",
    "fuse_with_fallback",
    "kl_per_repetition",
    "lda_config",
    "metric_table",
    "regression_config",
    "repetition_seed",
    "run_bnn",
    "run_federated",
    "run_lda",
    "run_one_shot",
    "run_regression",
]
