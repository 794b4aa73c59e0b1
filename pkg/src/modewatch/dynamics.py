"""Latent error-mode processes used to drive simulation.

Four regimes are supported:

* ``static``: one mode drawn at t=1 from ``pi`` and held forever.
* ``iid``: an independent draw from ``pi`` at every step.
* ``markov``: a chain started from ``pi`` with a given transition matrix whose
  stationary law must equal ``pi``.
* ``arbitrary``: deterministic two-mode toggling at given 1-based switch
  times. The sequence starts in mode 0 unless the first switch time is 1.

Sequences are 0-indexed arrays; ``modes[t - 1]`` is the mode at time ``t``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, NoStationaryDistributionError
from .mixture import WEIGHT_TOL, check_stochastic
from .rng import make_rng

STATIONARY_TOL = 1e-6


class Variant(str, Enum):
    STATIC = "static"
    IID = "iid"
    MARKOV = "markov"
    ARBITRARY = "arbitrary"


@dataclass(frozen=True)
class ModeSequenceSpec:
    variant: Variant
    pi: tuple[float, ...]
    transition: tuple[tuple[float, ...], ...] | None = None
    switch_times: tuple[int, ...] | None = None

    def __post_init__(self):
        try:
            variant = Variant(self.variant)
        except ValueError:
            raise ConfigError("variant", f"unknown variant {self.variant!r}") from None
        object.__setattr__(self, "variant", variant)
        pi = tuple(float(p) for p in self.pi)
        if len(pi) < 1 or any(not math.isfinite(p) or p < 0 for p in pi):
            raise ConfigError("pi", f"must be a nonempty nonnegative vector, got {self.pi}")
        if abs(math.fsum(pi) - 1.0) > WEIGHT_TOL:
            raise ConfigError("pi", f"must sum to 1, got {math.fsum(pi)!r}")
        object.__setattr__(self, "pi", pi)

        if variant is Variant.MARKOV:
            if self.transition is None:
                raise ConfigError("transition", "required for the markov variant")
            p = check_stochastic(self.transition, len(pi))
            # pi must be invariant under p; this also admits reducible chains
            # such as the identity, for which pi is one of many fixed points
            drift = np.abs(np.asarray(pi) @ p - np.asarray(pi)).max()
            if drift > STATIONARY_TOL:
                raise ConfigError(
                    "transition", f"stationary law does not match pi (|pi P - pi| = {drift:.3g})"
                )
            object.__setattr__(self, "transition", tuple(tuple(row) for row in p.tolist()))
        if variant is Variant.ARBITRARY:
            if self.switch_times is None:
                raise ConfigError("switch_times", "required for the arbitrary variant")
            if len(pi) != 2:
                raise ConfigError("pi", "the arbitrary variant toggles between exactly two modes")
            times = tuple(int(t) for t in self.switch_times)
            if any(t != s for t, s in zip(times, self.switch_times)):
                raise ConfigError("switch_times", "must be integers")
            if times and times[0] < 1:
                raise ConfigError("switch_times", "first entry must be >= 1")
            if any(b <= a for a, b in zip(times, times[1:])):
                raise ConfigError("switch_times", "must be strictly increasing")
            object.__setattr__(self, "switch_times", times)

    @property
    def k(self) -> int:
        return len(self.pi)

    def to_dict(self) -> dict:
        doc: dict = {"variant": self.variant.value, "pi": list(self.pi)}
        if self.transition is not None:
            doc["transition"] = [list(r) for r in self.transition]
        if self.switch_times is not None:
            doc["switch_times"] = list(self.switch_times)
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "ModeSequenceSpec":
        if not isinstance(doc, dict):
            raise ConfigError("dynamics", "expected an object")
        for key in ("variant", "pi"):
            if key not in doc:
                raise ConfigError(key, "missing")
        return cls(
            doc["variant"],
            tuple(doc["pi"]),
            doc.get("transition"),
            tuple(doc["switch_times"]) if doc.get("switch_times") is not None else None,
        )


@dataclass(frozen=True)
class ModeSequence:
    modes: np.ndarray
    spec: ModeSequenceSpec
    seed: int | None

    def __len__(self) -> int:
        return len(self.modes)


def _categorical(u: np.ndarray, probs) -> np.ndarray:
    idx = np.searchsorted(np.cumsum(probs), u, side="right")
    return np.minimum(idx, len(probs) - 1)


def generate(spec: ModeSequenceSpec, length: int, seed: int) -> ModeSequence:
    if length < 1:
        raise ConfigError("length", f"must be >= 1, got {length}")
    v = spec.variant
    if v is Variant.ARBITRARY:
        times = np.asarray(spec.switch_times, dtype=np.int64)
        t = np.arange(1, length + 1)
        modes = (np.searchsorted(times, t, side="right") % 2).astype(np.int8)
        return ModeSequence(modes, spec, seed)

    rng = make_rng(seed)
    if v is Variant.STATIC:
        m0 = _categorical(rng.random(1), spec.pi)[0]
        modes = np.full(length, m0, dtype=np.int8)
    elif v is Variant.IID:
        modes = _categorical(rng.random(length), spec.pi).astype(np.int8)
    else:
        u = rng.random(length)
        cum = np.cumsum(np.asarray(spec.transition), axis=1)
        rows = [r.tolist() for r in cum]
        k = spec.k
        out = np.empty(length, dtype=np.int8)
        m = int(_categorical(u[:1], spec.pi)[0])
        out[0] = m
        for i, ui in enumerate(u[1:].tolist(), start=1):
            row = rows[m]
            m = 0
            while m < k - 1 and ui >= row[m]:
                m += 1
            out[i] = m
        modes = out
    return ModeSequence(modes, spec, seed)


def validate_long_run(seq: ModeSequence, tol: float = 0.01) -> bool:
    """True iff every mode's empirical frequency is within ``tol`` of ``pi``."""
    counts = np.bincount(np.asarray(seq.modes, dtype=np.int64), minlength=seq.spec.k)
    freq = counts / len(seq.modes)
    return bool(np.all(np.abs(freq - np.asarray(seq.spec.pi)) <= tol))


def empirical_transitions(modes, k: int) -> np.ndarray:
    m = np.asarray(modes, dtype=np.int64)
    counts = np.zeros((k, k))
    np.add.at(counts, (m[:-1], m[1:]), 1.0)
    with np.errstate(invalid="ignore"):
        return counts / counts.sum(axis=1, keepdims=True)


def stationary_distribution(transition) -> np.ndarray:
    """Unique stationary law of an irreducible aperiodic chain.

    Raises:
        NoStationaryDistributionError: the chain is reducible or periodic.
    """
    p = check_stochastic(transition)
    k = p.shape[0]
    # primitive iff P^((k-1)^2 + 1) is strictly positive
    reach = np.linalg.matrix_power((p > 0).astype(float), (k - 1) ** 2 + 1)
    if not np.all(reach > 0):
        raise NoStationaryDistributionError("chain is reducible or periodic")
    a = np.vstack([p.T - np.eye(k), np.ones((1, k))])
    b = np.zeros(k + 1)
    b[-1] = 1.0
    v, *_ = np.linalg.lstsq(a, b, rcond=None)
    v = np.clip(v, 0.0, None)
    return v / v.sum()


def rescale_to_stationary(transition, pi) -> np.ndarray:
    """Adjust a two-state chain's switch probabilities so its stationary law is
    ``pi`` while keeping the total switching rate ``p01 + p10``."""
    p = check_stochastic(transition, 2)
    rate = p[0, 1] + p[1, 0]
    p01 = rate * pi[1]
    p10 = rate * pi[0]
    if p01 > 1 or p10 > 1:
        raise ConfigError("transition", "switching rate too high to match pi")
    return np.array([[1 - p01, p01], [p10, 1 - p10]])
