"""Seeded synthetic datasets for the four fusion experiments.

Every generator is a pure function of its ``GeneratorSpec``. Train and test
sets are independent draws from the same distribution.
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .local_inference import LabeledShard

KINDS = ("linear", "two_class", "multiclass", "mixture")


@dataclass(frozen=True)
class GeneratorSpec:
    """Parameters of a synthetic dataset.

    ``class_mean_style`` picks the class-conditional means: ``"scaled"`` puts
    class ``i`` (1-based) at ``i * ones(d)``; ``"one_hot"`` puts it at the
    i-th unit vector. ``feature_range`` is the half-width of the uniform
    regression inputs, ``component_spread`` the half-width of the cube the
    mixture component means are drawn from and ``component_std`` their
    isotropic standard deviation.
    """

    kind: str = "linear"
    n_train: int = 700
    n_test: int = 300
    d_x: int = 6
    d_y: int = 1
    n_classes: int = 2
    noise_std: float = 4.0
    class_priors: tuple[float, ...] | None = None
    mixture_components: int = 4
    seed: int = 0
    class_mean_style: str = "scaled"
    feature_range: float = 5.0
    component_spread: float = 2.0
    component_std: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if self.n_train < 1 or self.n_test < 1:
            raise ValueError("n_train and n_test must be at least 1")
        if not self.noise_std > 0:
            raise ValueError("noise_std must be positive")
        if self.class_priors is not None:
            priors = tuple(float(p) for p in self.class_priors)
            object.__setattr__(self, "class_priors", priors)
            if len(priors) != self.n_classes:
                raise ValueError("class_priors length differs from n_classes")
            if abs(sum(priors) - 1.0) > 1e-9 or min(priors) < 0:
                raise ValueError("class_priors must be a probability vector")
        if not 1 <= self.mixture_components <= 4:
            raise ValueError("mixture_components must be between 1 and 4")
        if self.class_mean_style not in ("scaled", "one_hot"):
            raise ValueError(f"unknown class_mean_style {self.class_mean_style!r}")

    def replace(self, **changes) -> "GeneratorSpec":
        return GeneratorSpec(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)


def _preset(kind: str, seed: int, defaults: dict, overrides: dict) -> GeneratorSpec:
    return GeneratorSpec(kind=kind, seed=seed, **{**defaults, **overrides})


def linear_spec(seed: int = 0, **kw) -> GeneratorSpec:
    return _preset("linear", seed, {"n_train": 700, "n_test": 300, "d_x": 6}, kw)


def two_class_spec(seed: int = 0, **kw) -> GeneratorSpec:
    return _preset("two_class", seed, {"n_train": 1000, "n_test": 1000, "d_x": 10, "n_classes": 2, "class_priors": (0.6, 0.4)}, kw)


def multiclass_spec(seed: int = 0, **kw) -> GeneratorSpec:
    return _preset("multiclass", seed, {"n_train": 1000, "n_test": 1000, "d_x": 10, "n_classes": 10}, kw)


def mixture_spec(seed: int = 0, **kw) -> GeneratorSpec:
    return _preset("mixture", seed, {"n_train": 600, "n_test": 300, "d_x": 10, "n_classes": 3}, kw)


def _rngs(seed: int):
    """Independent streams for model parameters, train and test draws."""
    ss = np.random.SeedSequence(seed)
    return [np.random.default_rng(s) for s in ss.spawn(3)]


def _require(spec: GeneratorSpec, kind: str):
    if spec.kind != kind:
        raise ValueError(f"generator expects kind {kind!r}, got {spec.kind!r}")


def gen_linear(spec: GeneratorSpec) -> tuple[LabeledShard, LabeledShard, np.ndarray]:
    """``y = theta' x + noise`` with integer ``theta`` uniform on [-10, 20]."""
    _require(spec, "linear")
    r_model, r_train, r_test = _rngs(spec.seed)
    theta = r_model.integers(-10, 20, size=spec.d_x, endpoint=True).astype(float)

    def draw(rng, n):
        x = rng.uniform(-spec.feature_range, spec.feature_range, (n, spec.d_x))
        y = x @ theta + spec.noise_std * rng.standard_normal(n)
        return LabeledShard(x, y[:, None])

    return draw(r_train, spec.n_train), draw(r_test, spec.n_test), theta


def class_means(spec: GeneratorSpec) -> np.ndarray:
    """``(L, d)`` class-conditional means for the two-class and multiclass families."""
    idx = np.arange(1, spec.n_classes + 1, dtype=float)
    if spec.class_mean_style == "scaled":
        return idx[:, None] * np.ones((spec.n_classes, spec.d_x))
    if spec.n_classes > spec.d_x:
        raise ValueError("one-hot class means need d_x >= n_classes")
    return np.eye(spec.n_classes, spec.d_x)


def _gaussian_classes(spec: GeneratorSpec):
    priors = np.asarray(spec.class_priors or np.full(spec.n_classes, 1.0 / spec.n_classes))
    means = class_means(spec)
    _, r_train, r_test = _rngs(spec.seed)

    def draw(rng, n):
        labels = rng.choice(spec.n_classes, size=n, p=priors)
        x = means[labels] + rng.standard_normal((n, spec.d_x))
        return LabeledShard(x, labels)

    return draw(r_train, spec.n_train), draw(r_test, spec.n_test)


def gen_two_class(spec: GeneratorSpec) -> tuple[LabeledShard, LabeledShard]:
    _require(spec, "two_class")
    if spec.n_classes != 2:
        raise ValueError("two_class needs n_classes == 2")
    return _gaussian_classes(spec)


def gen_multiclass(spec: GeneratorSpec) -> tuple[LabeledShard, LabeledShard]:
    _require(spec, "multiclass")
    return _gaussian_classes(spec)


@dataclass(frozen=True)
class MixtureModel:
    class_priors: np.ndarray
    component_means: list[np.ndarray]
    component_std: float


def mixture_model(spec: GeneratorSpec) -> MixtureModel:
    """Per-class component means, equal weights within a class."""
    _require(spec, "mixture")
    r_model, _, _ = _rngs(spec.seed)
    counts = r_model.integers(1, spec.mixture_components, size=spec.n_classes, endpoint=True)
    means = [r_model.uniform(-spec.component_spread, spec.component_spread, (k, spec.d_x)) for k in counts]
    priors = np.asarray(spec.class_priors or np.full(spec.n_classes, 1.0 / spec.n_classes))
    return MixtureModel(priors, means, spec.component_std)


def gen_mixture(spec: GeneratorSpec) -> tuple[LabeledShard, LabeledShard]:
    model = mixture_model(spec)
    _, r_train, r_test = _rngs(spec.seed)

    def draw(rng, n):
        labels = rng.choice(spec.n_classes, size=n, p=model.class_priors)
        comps = np.array([rng.integers(len(model.component_means[c])) for c in labels], dtype=int)
        centers = np.stack([model.component_means[c][k] for c, k in zip(labels, comps)]) if n else np.zeros((0, spec.d_x))
        x = centers + model.component_std * rng.standard_normal((n, spec.d_x))
        return LabeledShard(x, labels)

    return draw(r_train, spec.n_train), draw(r_test, spec.n_test)


def generate(spec: GeneratorSpec):
    """Dispatch on ``spec.kind``; returns ``(train, test)`` for every kind."""
    if spec.kind == "linear":
        train, test, _ = gen_linear(spec)
        return train, test
    return {"two_class": gen_two_class, "multiclass": gen_multiclass, "mixture": gen_mixture}[spec.kind](spec)


def write_csv(shard: LabeledShard, path: str | Path) -> None:
    """One sample per line, features first, targets or label in the last columns."""
    path = Path(path)
    d_x = shard.features.shape[1]
    if shard.is_classification:
        header = [f"x{i}" for i in range(d_x)] + ["label"]
        rows = np.column_stack([shard.features, shard.targets])
    else:
        header = [f"x{i}" for i in range(d_x)] + [f"y{j}" for j in range(shard.targets.shape[1])]
        rows = np.column_stack([shard.features, shard.targets])
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            if shard.is_classification:
                w.writerow([repr(float(v)) for v in row[:-1]] + [int(row[-1])])
            else:
                w.writerow([repr(float(v)) for v in row])


def read_csv(path: str | Path) -> LabeledShard:
    path = Path(path)
    with path.open() as fh:
        header = next(csv.reader(fh))
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if header[-1] == "label":
        return LabeledShard(data[:, :-1], data[:, -1].astype(np.int64))
    n_y = sum(1 for h in header if h.startswith("y"))
    return LabeledShard(data[:, :-n_y], data[:, -n_y:])
