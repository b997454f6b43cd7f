"""Loss-landscape probes: risks, random-direction flatness, robust risk.

A risk is anything callable on a flat parameter array.  ``RiskSpec`` is the
detector risk over a frozen evaluation set (fixed scenes, fixed weak views),
so two probes of the same ``RiskSpec`` differ only through the parameters.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import nnet
from .nnet import CellTargets, ModelConfig, NumericError, ParamVec
from .synthgen import Scene, replay_weak_aug, AugRecord

RiskFn = Callable[[np.ndarray], float]


class UsageError(ValueError):
    pass


@dataclass
class FrozenSet:
    name: str
    images: np.ndarray
    targets: CellTargets


@dataclass
class RiskSpec:
    """Sum of mean supervised losses over one or more frozen scene sets."""
    which: str
    groups: list[FrozenSet]
    config: ModelConfig = field(default_factory=ModelConfig)
    reg_lambda: float = 1.0

    def __call__(self, values: np.ndarray) -> float:
        params = ParamVec(np.asarray(values, dtype=np.float64), self.config.config_hash())
        total = 0.0
        for g in self.groups:
            loss, _ = nnet.sup_loss(params, g.images, g.targets, self.config,
                                    self.reg_lambda, need_grad=False)
            total += loss
        return total


def freeze_scenes(name: str, scenes: Sequence[Scene], seed: int,
                  config: ModelConfig = ModelConfig(), sigma: float = 0.02) -> FrozenSet:
    """Fix one weak view per scene from ``seed`` and precompute its targets."""
    rng = np.random.default_rng([seed, 3])
    views = []
    for s in scenes:
        rec = AugRecord(bool(rng.random() < 0.5), int(rng.integers(0, 2**31 - 1)))
        views.append(replay_weak_aug(s, rec, sigma))
    return FrozenSet(name, np.stack([v.image for v in views]), nnet.scene_targets(views, config))


def empirical_risk(domains: dict[str, Sequence[Scene]], seed: int = 0,
                   config: ModelConfig = ModelConfig()) -> RiskSpec:
    """Sum over training domains of the supervised loss, using generator ground truth."""
    return RiskSpec("empirical", [freeze_scenes(k, v, seed, config) for k, v in domains.items()],
                    config)


def target_risk(scenes: Sequence[Scene], seed: int = 0,
                config: ModelConfig = ModelConfig()) -> RiskSpec:
    return RiskSpec("target", [freeze_scenes("t", scenes, seed, config)], config)


def domain_risk(name: str, scenes: Sequence[Scene], seed: int = 0,
                config: ModelConfig = ModelConfig()) -> RiskSpec:
    return RiskSpec(f"domain:{name}", [freeze_scenes(name, scenes, seed, config)], config)


def _values(params) -> np.ndarray:
    return params.values if isinstance(params, ParamVec) else np.asarray(params, dtype=np.float64)


def _risk_value(risk: RiskFn, values: np.ndarray) -> float:
    try:
        return float(risk(values))
    except NumericError:
        return float("nan")


def sample_unit_direction(rng: np.random.Generator, dim: int) -> np.ndarray:
    if dim < 1:
        raise ValueError("dim must be >= 1")
    d = rng.standard_normal(dim)
    norm = np.linalg.norm(d)
    while norm == 0.0:
        d = rng.standard_normal(dim)
        norm = np.linalg.norm(d)
    return d / norm


@dataclass
class FlatnessReport:
    surface: str
    gamma_values: list[float]
    means: list[float]
    samples: list[np.ndarray]
    base_risk: float
    flagged: list[int]

    @property
    def n_samples(self) -> int:
        return len(self.samples[0]) if self.samples else 0

    def mean_at(self, gamma: float) -> float:
        return self.means[self.gamma_values.index(gamma)]


def flatness(params, risk: RiskFn, gammas: Sequence[float], n_samples: int = 10,
             rng: np.random.Generator | None = None, surface: str | None = None) -> FlatnessReport:
    """Mean absolute risk change under random radius-``gamma`` perturbations.

    Non-finite perturbed risks are stored as ``nan`` in ``samples``, left out
    of the mean, and counted in ``flagged``.
    """
    if any(g < 0 for g in gammas):
        raise ValueError("gammas must be non-negative")
    rng = rng if rng is not None else np.random.default_rng(0)
    theta = _values(params)
    base = _risk_value(risk, theta)
    if not np.isfinite(base):
        raise NumericError("base risk is not finite")
    means, samples, flagged = [], [], []
    for gamma in gammas:
        deltas = np.empty(n_samples)
        for j in range(n_samples):
            d = sample_unit_direction(rng, theta.size)
            deltas[j] = abs(_risk_value(risk, theta + gamma * d) - base)
        ok = np.isfinite(deltas)
        flagged.append(int((~ok).sum()))
        if flagged[-1]:
            warnings.warn(f"{flagged[-1]} non-finite samples at gamma={gamma}", RuntimeWarning,
                          stacklevel=2)
        means.append(float(deltas[ok].mean()) if ok.any() else float("nan"))
        samples.append(deltas)
    name = surface or getattr(risk, "which", "custom")
    return FlatnessReport(name, [float(g) for g in gammas], means, samples, base, flagged)


def robust_risk(params, risk: RiskFn, gamma: float, n_samples: int = 50,
                rng: np.random.Generator | None = None) -> float:
    """Sampled lower bound of ``max_{|delta| <= gamma} E(theta + delta)``.

    The max runs over ``n_samples`` points of the radius-``gamma`` sphere and
    the centre, so the estimate never falls below the base risk.
    """
    if gamma < 0:
        raise ValueError("gamma must be non-negative")
    rng = rng if rng is not None else np.random.default_rng(0)
    theta = _values(params)
    best = _risk_value(risk, theta)
    for _ in range(n_samples):
        v = _risk_value(risk, theta + gamma * sample_unit_direction(rng, theta.size))
        if np.isfinite(v) and v > best:
            best = v
    return best


def rrm_erm_gap(teacher, trajectory_min_risk: float, risk: RiskFn, gamma: float,
                n_samples: int = 50, rng: np.random.Generator | None = None) -> float:
    """Robust risk of ``teacher`` minus the lowest empirical risk seen on the trajectory."""
    return robust_risk(teacher, risk, gamma, n_samples, rng) - trajectory_min_risk


def trajectory_min_risk(snapshots, risk: RiskFn) -> float:
    return min(_risk_value(risk, _values(p)) for p in snapshots)


def _as_function(f) -> Callable[[np.ndarray], np.ndarray]:
    if callable(f):
        return lambda x: np.asarray(f(np.asarray(x, dtype=np.float64)), dtype=np.float64)
    xs, ys = (np.asarray(a, dtype=np.float64) for a in f)
    if np.any(np.diff(xs) <= 0):
        raise UsageError("table abscissae must be strictly increasing")
    return lambda x: np.interp(x, xs, ys)


def proposition_check(f, p1: float, p2: float, p3: float, n_probe: int = 65) -> bool:
    """Check ``|f(p3) - f(p2)| < |f(p3) - f(p1)|`` for a monotone ``f``.

    ``f`` is a vectorised callable or an ``(xs, ys)`` table (linear
    interpolation).  Monotonicity is verified on ``n_probe`` points of
    ``[p1, p3]``; a non-monotone ``f`` raises ``UsageError``.
    """
    if not p1 < p2 < p3:
        raise UsageError("need p1 < p2 < p3")
    fn = _as_function(f)
    probe = np.concatenate([np.linspace(p1, p3, n_probe), [p2]])
    probe.sort()
    steps = np.diff(fn(probe))
    if not (np.all(steps >= 0) or np.all(steps <= 0)):
        raise UsageError("function is not monotone on [p1, p3]")
    f1, f2, f3 = (float(v) for v in fn(np.array([p1, p2, p3])))
    return abs(f3 - f2) < abs(f3 - f1)
