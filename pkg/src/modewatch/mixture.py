"""Gaussian mixture model of in-distribution prediction error.

A :class:`MixtureModel` holds K Gaussian components defined either on the
raw error (``Transform.IDENTITY``) or on its natural log (``Transform.LOG``).
Densities are always returned with respect to the raw error, so under the log
transform every density carries the Jacobian ``1/eps``. Components are kept
sorted by ascending mean: index 0 is the low-error mode.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .errors import (
    ConfigError,
    DegenerateFitError,
    DomainError,
    InsufficientDataError,
    InvariantError,
)
from .rng import make_rng

_LOG_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)
WEIGHT_TOL = 1e-12
STOCHASTIC_TOL = 1e-9
STD_FLOOR_RATIO = 1e-6


class Transform(str, Enum):
    IDENTITY = "identity"
    LOG = "log"


@dataclass(frozen=True)
class GaussianComponent:
    mean: float
    std: float

    def __post_init__(self):
        mean, std = float(self.mean), float(self.std)
        if not math.isfinite(mean):
            raise ConfigError("mean", f"must be finite, got {self.mean!r}")
        if not math.isfinite(std) or std <= 0.0:
            raise ConfigError("std", f"must be finite and > 0, got {self.std!r}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    def logpdf(self, x: float) -> float:
        z = (x - self.mean) / self.std
        return -0.5 * z * z - math.log(self.std) - _LOG_SQRT_2PI

    def pdf(self, x: float) -> float:
        return math.exp(self.logpdf(x))

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std}


@dataclass(frozen=True)
class MixtureModel:
    weights: tuple[float, ...]
    components: tuple[GaussianComponent, ...]
    transform: Transform = Transform.LOG
    _log_weights: tuple[float, ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        weights = tuple(float(w) for w in self.weights)
        comps = tuple(
            c if isinstance(c, GaussianComponent) else GaussianComponent(**c)
            for c in self.components
        )
        if len(weights) < 1 or len(weights) != len(comps):
            raise ConfigError(
                "weights", f"need one weight per component, got {len(weights)} and {len(comps)}"
            )
        if any(not math.isfinite(w) or w < 0.0 for w in weights):
            raise ConfigError("weights", f"must be finite and nonnegative, got {weights}")
        if abs(math.fsum(weights) - 1.0) > WEIGHT_TOL:
            raise ConfigError("weights", f"must sum to 1, got {math.fsum(weights)!r}")
        order = sorted(range(len(comps)), key=lambda i: comps[i].mean)
        object.__setattr__(self, "weights", tuple(weights[i] for i in order))
        object.__setattr__(self, "components", tuple(comps[i] for i in order))
        object.__setattr__(self, "transform", Transform(self.transform))
        object.__setattr__(
            self, "_log_weights", tuple(math.log(w) if w > 0 else -math.inf for w in self.weights)
        )

    @property
    def k(self) -> int:
        return len(self.components)

    @property
    def means(self) -> np.ndarray:
        return np.array([c.mean for c in self.components])

    @property
    def stds(self) -> np.ndarray:
        return np.array([c.std for c in self.components])

    # -- domain handling ---------------------------------------------------

    def to_domain(self, eps: float) -> float:
        """Map a raw error into the space the components live in."""
        eps = float(eps)
        if math.isnan(eps) or math.isinf(eps):
            raise DomainError(f"error value must be finite, got {eps!r}")
        if self.transform is Transform.LOG:
            if eps <= 0.0:
                raise DomainError(f"log transform requires eps > 0, got {eps!r}")
            return math.log(eps)
        return eps

    def to_domain_array(self, eps) -> np.ndarray:
        eps = np.asarray(eps, dtype=float)
        if not np.all(np.isfinite(eps)):
            raise DomainError("error values must be finite")
        if self.transform is Transform.LOG:
            if np.any(eps <= 0.0):
                raise DomainError("log transform requires eps > 0")
            return np.log(eps)
        return eps

    def from_domain_array(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.exp(x) if self.transform is Transform.LOG else x

    def log_jacobian(self, eps: float, x: float) -> float:
        return -x if self.transform is Transform.LOG else 0.0

    # -- serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "transform": self.transform.value,
            "weights": list(self.weights),
            "components": [c.to_dict() for c in self.components],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MixtureModel":
        if not isinstance(doc, dict):
            raise ConfigError("model", "expected an object")
        if "components" not in doc:
            # bare {"mean", "std"} means a single-component model
            if "mean" in doc and "std" in doc:
                return cls(
                    (1.0,),
                    (GaussianComponent(doc["mean"], doc["std"]),),
                    Transform(doc.get("transform", "log")),
                )
            raise ConfigError("components", "missing")
        try:
            transform = Transform(doc.get("transform", "log"))
        except ValueError:
            raise ConfigError("transform", f"unknown transform {doc.get('transform')!r}") from None
        comps = []
        for c in doc["components"]:
            try:
                comps.append(GaussianComponent(c["mean"], c["std"]))
            except (KeyError, TypeError):
                raise ConfigError("components", f"bad component {c!r}") from None
        weights = doc.get("weights", [1.0 / len(comps)] * len(comps))
        return cls(tuple(weights), tuple(comps), transform)


@dataclass(frozen=True)
class FitReport:
    iterations: int
    final_log_likelihood: float
    converged: bool
    history: tuple[float, ...] = ()

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "final_log_likelihood": self.final_log_likelihood,
            "converged": self.converged,
        }


# -- densities ---------------------------------------------------------------


def log_mode_density(model: MixtureModel, m: int, eps: float) -> float:
    if not 0 <= m < model.k:
        raise IndexError(f"mode index {m} out of range for {model.k} components")
    x = model.to_domain(eps)
    return model.components[m].logpdf(x) + model.log_jacobian(eps, x)


def mode_density(model: MixtureModel, m: int, eps: float) -> float:
    """Density of component ``m`` alone, without its mixture weight."""
    return math.exp(log_mode_density(model, m, eps))


def weighted_log_densities(model: MixtureModel, eps: float) -> list[float]:
    """``log(pi_m) + log f_m(eps)`` for every mode, in the transformed domain.

    The Jacobian is omitted; it is common to all modes.
    """
    x = model.to_domain(eps)
    return [lw + c.logpdf(x) for lw, c in zip(model._log_weights, model.components)]


def log_density(model: MixtureModel, eps: float) -> float:
    x = model.to_domain(eps)
    terms = [lw + c.logpdf(x) for lw, c in zip(model._log_weights, model.components)]
    top = max(terms)
    if top == -math.inf:
        return -math.inf
    s = math.fsum(math.exp(t - top) for t in terms)
    return top + math.log(s) + model.log_jacobian(eps, x)


def density(model: MixtureModel, eps: float) -> float:
    return math.exp(log_density(model, eps))


def component_logpdf_matrix(model: MixtureModel, eps) -> np.ndarray:
    """(n, K) array of ``log f_m(eps_i)`` including the Jacobian."""
    x = model.to_domain_array(eps)
    z = (x[:, None] - model.means[None, :]) / model.stds[None, :]
    out = -0.5 * z * z - np.log(model.stds)[None, :] - _LOG_SQRT_2PI
    if model.transform is Transform.LOG:
        out -= x[:, None]
    return out


def log_density_array(model: MixtureModel, eps) -> np.ndarray:
    with np.errstate(divide="ignore"):
        logw = np.log(np.array(model.weights))
    return logsumexp(component_logpdf_matrix(model, eps) + logw[None, :], axis=1)


def map_mode(model: MixtureModel, eps: float) -> int:
    """MAP estimate of the latent mode; ties go to the lower index."""
    scores = weighted_log_densities(model, eps)
    best = 0
    for m in range(1, len(scores)):
        if scores[m] > scores[best]:
            best = m
    return best


def sample(model: MixtureModel, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` raw errors and the component labels they came from."""
    labels = np.searchsorted(np.cumsum(model.weights), rng.random(n), side="right")
    labels = np.minimum(labels, model.k - 1)
    x = model.means[labels] + model.stds[labels] * rng.standard_normal(n)
    return model.from_domain_array(x), labels


# -- fitting -----------------------------------------------------------------


def _kmeanspp_centers(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min((x[:, None] - np.array(centers)[None, :]) ** 2, axis=1)
        total = d2.sum()
        if total <= 0.0:
            raise DegenerateFitError("fewer distinct values than components")
        centers.append(x[rng.choice(len(x), p=d2 / total)])
    return np.sort(np.array(centers))


def fit_em(
    samples: Sequence[float],
    k: int = 2,
    seed: int = 0,
    tol: float = 1e-8,
    max_iter: int = 500,
    transform: Transform | str = Transform.LOG,
) -> tuple[MixtureModel, FitReport]:
    """Fit a K-component Gaussian mixture by expectation-maximization.

    Args:
        samples: Raw error values (strictly positive under the log transform).
        k: Number of components.
        seed: Seed for the k-means++ initialization.
        tol: Convergence threshold on the relative change in log-likelihood.
        max_iter: Maximum number of EM iterations.
        transform: Domain the components are fit in.

    Returns:
        The fitted model (components sorted by mean) and a :class:`FitReport`.
        Log-likelihoods in the report are those of the transformed samples.

    Raises:
        InsufficientDataError: fewer than ``10 * k`` samples.
        DegenerateFitError: a component's std falls below ``1e-6`` times the
            sample std, or the sample has zero spread.
    """
    if k < 1:
        raise ConfigError("k", f"must be >= 1, got {k}")
    transform = Transform(transform)
    probe = MixtureModel((1.0,), (GaussianComponent(0.0, 1.0),), transform)
    x = probe.to_domain_array(samples)
    n = x.size
    if n < 10 * k:
        raise InsufficientDataError(f"need at least {10 * k} samples for k={k}, got {n}")
    spread = float(x.std())
    if not spread > 0.0:
        raise DegenerateFitError("samples have zero variance")
    floor = STD_FLOOR_RATIO * spread

    rng = make_rng(seed)
    centers = _kmeanspp_centers(x, k, rng)
    assign = np.argmin(np.abs(x[:, None] - centers[None, :]), axis=1)
    means = np.empty(k)
    stds = np.empty(k)
    weights = np.empty(k)
    for j in range(k):
        members = x[assign == j]
        weights[j] = max(members.size, 1) / n
        means[j] = members.mean() if members.size else centers[j]
        stds[j] = members.std() if members.size >= 2 and members.std() > floor else spread
    weights /= weights.sum()

    history: list[float] = []
    converged = False
    iterations = 0
    while True:
        with np.errstate(divide="ignore"):
            z = (x[:, None] - means[None, :]) / stds[None, :]
            log_p = -0.5 * z * z - np.log(stds)[None, :] - _LOG_SQRT_2PI + np.log(weights)[None, :]
        lse = logsumexp(log_p, axis=1)
        ll = float(lse.sum())
        if history:
            prev = history[-1]
            if ll < prev - 1e-9 * abs(prev):
                raise InvariantError(f"EM log-likelihood decreased: {prev!r} -> {ll!r}")
            if abs(ll - prev) <= tol * abs(prev):
                history.append(ll)
                converged = True
                break
        history.append(ll)
        if iterations >= max_iter:
            break
        resp = np.exp(log_p - lse[:, None])
        nk = resp.sum(axis=0)
        if np.any(nk <= 0.0):
            raise DegenerateFitError("a component lost all responsibility")
        weights = nk / n
        means = (resp * x[:, None]).sum(axis=0) / nk
        stds = np.sqrt((resp * (x[:, None] - means[None, :]) ** 2).sum(axis=0) / nk)
        iterations += 1
        if np.any(stds < floor):
            raise DegenerateFitError(
                f"component std collapsed below floor {floor:.3g}: {stds.tolist()}"
            )

    weights = weights / weights.sum()
    model = MixtureModel(
        tuple(weights.tolist()),
        tuple(GaussianComponent(m, s) for m, s in zip(means.tolist(), stds.tolist())),
        transform,
    )
    return model, FitReport(iterations, history[-1], converged, tuple(history))


# -- hidden Markov decoding ----------------------------------------------------


def check_stochastic(transition, k: int | None = None, key: str = "transition") -> np.ndarray:
    p = np.asarray(transition, dtype=float)
    if p.ndim != 2 or p.shape[0] != p.shape[1]:
        raise ConfigError(key, f"must be a square matrix, got shape {p.shape}")
    if k is not None and p.shape[0] != k:
        raise ConfigError(key, f"must be {k}x{k}, got {p.shape[0]}x{p.shape[1]}")
    if not np.all(np.isfinite(p)) or np.any(p < 0.0):
        raise ConfigError(key, "entries must be finite and nonnegative")
    if np.any(np.abs(p.sum(axis=1) - 1.0) > STOCHASTIC_TOL):
        raise ConfigError(key, f"rows must sum to 1, got {p.sum(axis=1).tolist()}")
    return p


def viterbi_modes(model: MixtureModel, transition, observations: Sequence[float]) -> list[int]:
    """Most probable joint mode path under an HMM with the mixture's components
    as emissions and its weights as the initial distribution."""
    p = check_stochastic(transition, model.k)
    obs = np.asarray(observations, dtype=float)
    if obs.size == 0:
        raise ValueError("observations must be nonempty")
    with np.errstate(divide="ignore"):
        log_p = np.log(p)
        log_init = np.log(np.array(model.weights))
    emit = component_logpdf_matrix(model, obs)
    n, k = emit.shape
    back = np.zeros((n, k), dtype=np.int64)
    score = log_init + emit[0]
    for t in range(1, n):
        cand = score[:, None] + log_p  # cand[i, j]: from i to j
        back[t] = np.argmax(cand, axis=0)
        score = cand[back[t], np.arange(k)] + emit[t]
    path = [int(np.argmax(score))]
    for t in range(n - 1, 0, -1):
        path.append(int(back[t, path[-1]]))
    return path[::-1]
