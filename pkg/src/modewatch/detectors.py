"""Sequential change detectors for streams of prediction error.

:class:`ModeAwareCusum` keeps one CUSUM statistic and one threshold per latent
error mode. At each step it

1. estimates the active mode (MAP under the mixture prior by default),
2. computes the log-likelihood ratio of the post-change density against the
   active mode's density,
3. re-targets that mode's threshold from the spread of the errors recently
   attributed to it, with exponential smoothing,
4. updates the active mode's statistic with a drift penalty, and
5. alarms when the statistic reaches its threshold.

:class:`GlobalCusum` is the classical single-threshold CUSUM against the whole
mixture, and :func:`lgmm_score` / :func:`nll_score` are per-step likelihood
scores used as non-sequential baselines.
"""

from __future__ import annotations

import math
import warnings
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Sequence

from .errors import ConfigError, DetectorAlarmedError, DomainError
from .mixture import (
    GaussianComponent,
    MixtureModel,
    log_density,
    log_mode_density,
    map_mode,
)

D_FLOOR = 1e-6

ModeEstimator = Callable[[MixtureModel, float], int]


def _per_mode(name: str, values, k: int) -> tuple[float, ...]:
    vals = tuple(float(v) for v in values)
    if len(vals) != k:
        raise ConfigError(name, f"expected {k} per-mode values, got {len(vals)}")
    return vals


@dataclass(frozen=True)
class DetectorConfig:
    """Tuning parameters of the mode-aware detector.

    ``b`` are the initial thresholds, ``r`` scale the windowed error spread
    into the drift ``d``, ``alpha``/``beta`` set the per-mode log boundary
    ``ln((1 - beta) / alpha)``, ``window`` is the sliding window length and
    ``lam`` the smoothing weight given to the new threshold target.
    ``threshold`` is only used by the global CUSUM baseline.
    """

    b: tuple[float, ...]
    r: tuple[float, ...]
    alpha: tuple[float, ...]
    beta: tuple[float, ...]
    window: int
    lam: float
    pre_change: MixtureModel
    post_change: MixtureModel
    threshold: float | None = None
    log_boundary: tuple[float, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if isinstance(self.post_change, GaussianComponent):
            object.__setattr__(
                self,
                "post_change",
                MixtureModel((1.0,), (self.post_change,), self.pre_change.transform),
            )
        k = self.pre_change.k
        for name in ("b", "r", "alpha", "beta"):
            object.__setattr__(self, name, _per_mode(name, getattr(self, name), k))
        for m in range(k):
            b, r, a, be = self.b[m], self.r[m], self.alpha[m], self.beta[m]
            if not (math.isfinite(b) and b > 0):
                raise ConfigError(f"b{m}", f"must be > 0, got {b!r}")
            if not (math.isfinite(r) and r > 0):
                raise ConfigError(f"r{m}", f"must be > 0, got {r!r}")
            if not 0.0 < a < 1.0:
                raise ConfigError(f"alpha{m}", f"must lie in (0, 1), got {a!r}")
            if not 0.0 < be < 1.0:
                raise ConfigError(f"beta{m}", f"must lie in (0, 1), got {be!r}")
            if not (1.0 - be) / a > 1.0:
                raise ConfigError(f"alpha{m}", "need (1 - beta) / alpha > 1")
        if isinstance(self.window, bool) or int(self.window) != self.window or self.window < 2:
            raise ConfigError("window", f"must be an integer >= 2, got {self.window!r}")
        object.__setattr__(self, "window", int(self.window))
        if not 0.0 < self.lam <= 1.0:
            raise ConfigError("lambda", f"must lie in (0, 1], got {self.lam!r}")
        if self.threshold is not None and not (self.threshold > 0):
            raise ConfigError("threshold", f"must be > 0, got {self.threshold!r}")
        if k >= 2 and self.r[0] < self.r[-1]:
            warnings.warn(
                "r0 < r1: the low-error mode gets the less conservative threshold",
                stacklevel=3,
            )
        object.__setattr__(
            self,
            "log_boundary",
            tuple(math.log((1.0 - be) / a) for a, be in zip(self.alpha, self.beta)),
        )

    @property
    def k(self) -> int:
        return self.pre_change.k

    def scaled(self, c: float) -> "DetectorConfig":
        """Config whose thresholds are ``c`` times larger.

        Multiplies ``b`` and the global ``threshold`` by ``c`` and moves each
        ``alpha`` so that ``ln((1 - beta) / alpha)`` is multiplied by ``c``.
        """
        if not c > 0:
            raise ConfigError("threshold_scale", f"must be > 0, got {c!r}")
        alpha = tuple((1.0 - be) * math.exp(-c * lb) for be, lb in zip(self.beta, self.log_boundary))
        return replace(
            self,
            b=tuple(c * b for b in self.b),
            alpha=alpha,
            threshold=None if self.threshold is None else c * self.threshold,
        )


@dataclass
class DetectorState:
    W: list[float]
    theta: list[float]
    buffers: list[deque]
    t: int = 0
    alarm: int | None = None

    @classmethod
    def initial(cls, config: DetectorConfig) -> "DetectorState":
        return cls(
            W=[0.0] * config.k,
            theta=list(config.b),
            buffers=[deque(maxlen=config.window) for _ in range(config.k)],
        )


@dataclass(frozen=True)
class StepOutcome:
    t: int
    estimated_mode: int | None
    llr: float
    statistic: float
    threshold: float
    alarmed: bool


def variance_estimate(buffer: Sequence[float]) -> float:
    """Sample standard deviation (n - 1 denominator) of the window contents."""
    n = len(buffer)
    if n < 2:
        raise ValueError(f"need at least 2 values, got {n}")
    mean = math.fsum(buffer) / n
    return math.sqrt(math.fsum((v - mean) ** 2 for v in buffer) / (n - 1))


def drift_and_target(sigma: float, r: float, log_boundary: float) -> tuple[float, float]:
    """Drift penalty ``k = d/2`` and threshold target ``h = 2 ln(.) / d^2`` for
    ``d = r * sigma`` (floored at ``D_FLOOR``)."""
    d = max(r * sigma, D_FLOOR)
    return d / 2.0, 2.0 / (d * d) * log_boundary


def mode_aware_step(
    state: DetectorState,
    config: DetectorConfig,
    epsilon: float,
    estimator: ModeEstimator = map_mode,
) -> StepOutcome:
    """Advance the mode-aware detector by one observation, in place."""
    if state.alarm is not None:
        raise DetectorAlarmedError(f"detector already alarmed at t={state.alarm}")
    pre = config.pre_change
    x = pre.to_domain(epsilon)
    m = estimator(pre, epsilon)
    llr = log_density(config.post_change, epsilon) - log_mode_density(pre, m, epsilon)

    buf = state.buffers[m]
    buf.append(x)
    sigma = variance_estimate(buf) if len(buf) >= 2 else pre.components[m].std
    drift, target = drift_and_target(sigma, config.r[m], config.log_boundary[m])
    theta = config.lam * target + (1.0 - config.lam) * state.theta[m]
    w = max(state.W[m] + (llr - drift), 0.0)

    state.theta[m] = theta
    state.W[m] = w
    state.t += 1
    alarmed = w >= theta
    if alarmed:
        state.alarm = state.t
    return StepOutcome(state.t, m, llr, w, theta, alarmed)


class ModeAwareCusum:
    def __init__(self, config: DetectorConfig, estimator: ModeEstimator = map_mode):
        self.config = config
        self.estimator = estimator
        self.state = DetectorState.initial(config)

    def reset(self) -> None:
        self.state = DetectorState.initial(self.config)

    def step(self, epsilon: float) -> StepOutcome:
        return mode_aware_step(self.state, self.config, epsilon, self.estimator)

    def run(self, stream: Iterable[float]) -> list[StepOutcome]:
        """Feed ``stream`` until it ends or the detector alarms."""
        out = []
        for eps in stream:
            out.append(self.step(eps))
            if out[-1].alarmed:
                break
        return out


@dataclass
class CusumState:
    W: float = 0.0
    t: int = 0
    alarm: int | None = None


def global_cusum_step(
    state: CusumState,
    pre: MixtureModel,
    post: MixtureModel,
    threshold: float,
    epsilon: float,
) -> StepOutcome:
    """Classical CUSUM step ``W <- max(W + ln g/f, 0)`` against the full mixture."""
    if state.alarm is not None:
        raise DetectorAlarmedError(f"detector already alarmed at t={state.alarm}")
    pre.to_domain(epsilon)
    llr = log_density(post, epsilon) - log_density(pre, epsilon)
    state.W = max(state.W + llr, 0.0)
    state.t += 1
    alarmed = state.W >= threshold
    if alarmed:
        state.alarm = state.t
    return StepOutcome(state.t, None, llr, state.W, threshold, alarmed)


class GlobalCusum:
    def __init__(self, pre: MixtureModel, post: MixtureModel | GaussianComponent, threshold: float):
        if isinstance(post, GaussianComponent):
            post = MixtureModel((1.0,), (post,), pre.transform)
        if not threshold > 0:
            raise ConfigError("threshold", f"must be > 0, got {threshold!r}")
        self.pre = pre
        self.post = post
        self.threshold = float(threshold)
        self.state = CusumState()

    @classmethod
    def from_config(cls, config: DetectorConfig) -> "GlobalCusum":
        if config.threshold is None:
            raise ConfigError("threshold", "required for the global detector")
        return cls(config.pre_change, config.post_change, config.threshold)

    def reset(self) -> None:
        self.state = CusumState()

    def step(self, epsilon: float) -> StepOutcome:
        return global_cusum_step(self.state, self.pre, self.post, self.threshold, epsilon)

    def run(self, stream: Iterable[float]) -> list[StepOutcome]:
        out = []
        for eps in stream:
            out.append(self.step(eps))
            if out[-1].alarmed:
                break
        return out


def lgmm_score(model: MixtureModel, epsilon: float) -> float:
    """Negative log-density under the fitted mixture; larger is more anomalous."""
    return -log_density(model, epsilon)


def nll_score(component: GaussianComponent, epsilon: float) -> float:
    eps = float(epsilon)
    if not math.isfinite(eps):
        raise DomainError(f"epsilon must be finite, got {epsilon!r}")
    return -component.logpdf(eps)
