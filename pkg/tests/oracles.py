"""Independent reference computations used by the tests.

Nothing here imports from ``modewatch``: densities are coded from the normal
formula, CUSUM statistics from the scan identity, Viterbi paths by
enumeration, and the mode-aware detector straight from its pseudocode.
"""

from __future__ import annotations

import itertools
import math
import statistics

import numpy as np


def normal_pdf(x, mu, sigma):
    return math.exp(-((x - mu) ** 2) / (2 * sigma**2)) / (sigma * math.sqrt(2 * math.pi))


def comp_pdf(x, mu, sigma, log_domain):
    """Density of a raw error under one component, Jacobian included."""
    if log_domain:
        return normal_pdf(math.log(x), mu, sigma) / x
    return normal_pdf(x, mu, sigma)


def mixture_pdf(x, weights, comps, log_domain):
    return sum(w * comp_pdf(x, m, s, log_domain) for w, (m, s) in zip(weights, comps))


def scan_cusum(increments):
    """``max(0, max_k sum_{i=k}^{t} inc_i)`` for every t, by brute force."""
    inc = np.asarray(increments, dtype=float)
    n = inc.size
    out = np.empty(n)
    csum = np.concatenate([[0.0], np.cumsum(inc)])
    # window sums S[t+1] - S[k] for every k <= t
    for t in range(n):
        out[t] = max(0.0, float(np.max(csum[t + 1] - csum[: t + 1])))
    return out


def scan_cusum_loops(increments):
    """Same identity with explicit double loops (for small inputs)."""
    out = []
    for t in range(len(increments)):
        best = 0.0
        for k in range(t + 1):
            best = max(best, math.fsum(increments[k : t + 1]))
        out.append(best)
    return out


def brute_viterbi(weights, comps, transition, obs, log_domain=False):
    k = len(weights)
    best, best_path = -math.inf, None
    for path in itertools.product(range(k), repeat=len(obs)):
        lp = math.log(weights[path[0]]) if weights[path[0]] > 0 else -math.inf
        for t, m in enumerate(path):
            if t > 0:
                p = transition[path[t - 1]][m]
                lp += math.log(p) if p > 0 else -math.inf
            lp += math.log(comp_pdf(obs[t], *comps[m], log_domain))
        # strict '>' keeps the lexicographically smallest path among ties
        if lp > best:
            best, best_path = lp, list(path)
    return best_path


def pair_count_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = 0.0
    for p in pos:
        for q in neg:
            total += 1.0 if p > q else 0.5 if p == q else 0.0
    return total / (len(pos) * len(neg))


def brute_average_precision(scores, labels):
    """AP from the definition: sum over distinct thresholds of dRecall * precision."""
    n_pos = sum(labels)
    ap, prev_recall = 0.0, 0.0
    for thr in sorted(set(scores), reverse=True):
        sel = [y for s, y in zip(scores, labels) if s >= thr]
        tp = sum(sel)
        recall = tp / n_pos
        ap += (recall - prev_recall) * (tp / len(sel))
        prev_recall = recall
    return ap


class Alg1Oracle:
    """Mode-aware CUSUM transcribed step by step from its pseudocode.

    Inputs are plain tuples: ``weights``, ``comps`` as (mean, std) pairs of
    the pre-change mixture, ``post`` as (weights, comps) of g, and the tuning
    values. Domain is log when ``log_domain``.
    """

    def __init__(self, weights, comps, post, b, r, alpha, beta, S, lam, log_domain=True, d_floor=1e-6):
        self.weights, self.comps = list(weights), list(comps)
        self.post_w, self.post_c = post
        self.b, self.r, self.alpha, self.beta = list(b), list(r), list(alpha), list(beta)
        self.S, self.lam, self.log_domain, self.d_floor = S, lam, log_domain, d_floor
        K = len(weights)
        # Initialize W_0^(m) <- 0 and theta^(m) <- b_m
        self.W = [0.0] * K
        self.theta = list(b)
        self.windows = [[] for _ in range(K)]
        self.t = 0
        self.alarm = None

    def step(self, eps, mode=None):
        assert self.alarm is None
        self.t += 1
        # Step 1: MAP mode, ties to the lower index (or a caller-fixed mode)
        scores = []
        for m, (w, (mu, s)) in enumerate(zip(self.weights, self.comps)):
            f = comp_pdf(eps, mu, s, self.log_domain)
            scores.append(math.log(w) + math.log(f) if w > 0 and f > 0 else -math.inf)
        m = 0
        for j in range(1, len(scores)):
            if scores[j] > scores[m]:
                m = j
        if mode is not None:
            m = mode
        # Step 2: log-likelihood ratio against the active component
        g = mixture_pdf(eps, self.post_w, self.post_c, self.log_domain)
        f_m = comp_pdf(eps, *self.comps[m], self.log_domain)
        ell = math.log(g) - math.log(f_m)
        # Step 3: threshold adaptation from the active mode's window
        x = math.log(eps) if self.log_domain else eps
        win = self.windows[m]
        win.append(x)
        if len(win) > self.S:
            win.pop(0)
        sigma = statistics.stdev(win) if len(win) >= 2 else self.comps[m][1]
        d = max(self.r[m] * sigma, self.d_floor)
        k = d / 2
        h = (2 / d**2) * math.log((1 - self.beta[m]) / self.alpha[m])
        self.theta[m] = self.lam * h + (1 - self.lam) * self.theta[m]
        # Step 4: CUSUM update for the active mode only
        self.W[m] = max(self.W[m] + ell - k, 0.0)
        # Step 5: detection
        alarmed = self.W[m] >= self.theta[m]
        if alarmed:
            self.alarm = self.t
        return {
            "mode": m,
            "llr": ell,
            "drift": k,
            "W": list(self.W),
            "theta": list(self.theta),
            "alarmed": alarmed,
        }


def cusum_markov_arl(step_probs, threshold):
    """Mean run length of ``W <- max(W + X, 0)`` to ``W >= threshold``.

    ``X`` is i.i.d. integer-valued with ``P(X = v) = step_probs[v]``. Solves
    the absorbing-chain equations on states ``0 .. threshold - 1``.
    """
    n = int(threshold)
    A = np.eye(n)
    for s in range(n):
        for v, p in step_probs.items():
            nxt = max(s + v, 0)
            if nxt < n:
                A[s, nxt] -= p
    return float(np.linalg.solve(A, np.ones(n))[0])


def enumerate_alarm_cdf(values_probs, threshold, horizon):
    """P(alarm by step t), t = 1..horizon, by enumerating every sequence."""
    vals = list(values_probs)
    cdf = np.zeros(horizon)
    for seq in itertools.product(vals, repeat=horizon):
        p = 1.0
        for v in seq:
            p *= values_probs[v]
        w, tau = 0, None
        for t, v in enumerate(seq, start=1):
            w = max(w + v, 0)
            if w >= threshold:
                tau = t
                break
        if tau is not None:
            cdf[tau - 1 :] += p
    return cdf
