"""Two-component Beta-Binomial mixture fitted by EM.

Scores only take the k+1 values 0..k, so every pass over the data is done on
the score histogram rather than item by item. The M-step maximizes each
component's responsibility-weighted log-likelihood over (ln alpha, ln beta)
with a box-constrained Newton method (L-BFGS-B is selectable). For integer s
the Beta-Binomial log-pmf is a finite sum

    ln BB(s) = ln C(k,s) + sum_{i<s} ln(a+i) + sum_{i<k-s} ln(b+i) - sum_{i<k} ln(a+b+i)

which gives exact derivatives without digamma and is what the EM loop uses.
"""

from __future__ import annotations

import functools
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize

from .errors import (
    ContractError,
    DegenerateModelError,
    DomainError,
    FitError,
    InsufficientDataError,
)
from .numerics import BetaParams

logger = logging.getLogger(__name__)

MIN_ITEMS = 4
DEGENERATE_WEIGHT = 0.999


@dataclass(frozen=True)
class RoundScores:
    """Correct-judge counts for one round, one entry per evaluated item."""

    k: int
    scores: tuple

    def __post_init__(self):
        if int(self.k) != self.k or self.k < 1:
            raise DomainError(f"k must be an integer >= 1, got {self.k!r}")
        scores = tuple(int(s) for s in self.scores)
        if not scores:
            raise DomainError("RoundScores must be nonempty")
        if any(s < 0 or s > self.k for s in scores):
            raise DomainError(f"every score must lie in [0, {self.k}]")
        object.__setattr__(self, "scores", scores)

    @property
    def n(self) -> int:
        return len(self.scores)

    def counts(self) -> np.ndarray:
        return np.bincount(np.asarray(self.scores), minlength=self.k + 1).astype(np.float64)


@functools.lru_cache(maxsize=64)
def _log_binom_row(k: int) -> np.ndarray:
    out = np.array([math.lgamma(k + 1) - math.lgamma(s + 1) - math.lgamma(k - s + 1) for s in range(k + 1)])
    out.flags.writeable = False
    return out


def _bb_log_pmf_table(k: int, a: float, b: float) -> np.ndarray:
    """ln BB(s; k, a, b) for s = 0..k via rising-factorial sums."""
    i = np.arange(k, dtype=np.float64)
    cum_a = np.concatenate(([0.0], np.cumsum(np.log(a + i))))
    cum_b = np.concatenate(([0.0], np.cumsum(np.log(b + i))))
    return _log_binom_row(k) + cum_a + cum_b[::-1] - np.log(a + b + i).sum()


@dataclass(frozen=True)
class BetaBinomMixture:
    weight: float
    comp1: BetaParams
    comp2: BetaParams
    trials: int

    def __post_init__(self):
        if not 0.0 <= self.weight <= 1.0:
            raise DomainError(f"weight must lie in [0, 1], got {self.weight!r}")
        if int(self.trials) != self.trials or self.trials < 1:
            raise DomainError(f"trials must be an integer >= 1, got {self.trials!r}")

    def component_log_pmfs(self) -> tuple[np.ndarray, np.ndarray]:
        return (
            _bb_log_pmf_table(self.trials, self.comp1.alpha, self.comp1.beta),
            _bb_log_pmf_table(self.trials, self.comp2.alpha, self.comp2.beta),
        )

    def log_pmf(self) -> np.ndarray:
        """Mixture log-pmf at s = 0..k."""
        l1, l2 = self.component_log_pmfs()
        with np.errstate(divide="ignore"):
            return np.logaddexp(np.log(self.weight) + l1, np.log1p(-self.weight) + l2)

    def swapped(self) -> "BetaBinomMixture":
        return BetaBinomMixture(1.0 - self.weight, self.comp2, self.comp1, self.trials)

    def canonical(self) -> "BetaBinomMixture":
        """Higher-mean component first."""
        if self.comp1.mean >= self.comp2.mean:
            return self
        return self.swapped()

    def as_dict(self) -> dict:
        return {
            "w": self.weight,
            "alpha1": self.comp1.alpha,
            "beta1": self.comp1.beta,
            "alpha2": self.comp2.alpha,
            "beta2": self.comp2.beta,
            "k": self.trials,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BetaBinomMixture":
        return cls(
            float(d["w"]),
            BetaParams(float(d["alpha1"]), float(d["beta1"])),
            BetaParams(float(d["alpha2"]), float(d["beta2"])),
            int(d["k"]),
        )


@dataclass(frozen=True)
class ShapeBounds:
    lower: float = 0.01
    upper: float = 1000.0

    def clamp(self, x: float) -> float:
        return float(min(max(x, self.lower), self.upper))


@dataclass(frozen=True)
class EmConfig:
    tol: float = 1e-6
    max_iter: int = 100
    bounds: ShapeBounds = field(default_factory=ShapeBounds)
    inner_gtol: float = 1e-8
    inner_maxiter: int = 200
    optimizer: str = "newton"  # or "lbfgsb"
    # restarts of a failed inner optimization, jittered from the incoming point
    retries: int = 2
    seed: int = 0


@dataclass
class EmTrace:
    iterations: int
    log_likelihood_history: list
    converged: bool
    final: BetaBinomMixture
    degenerate: bool = False


def _check_k(data: RoundScores, mix: BetaBinomMixture):
    if data.k != mix.trials:
        raise ContractError(f"data k={data.k} does not match mixture k={mix.trials}")


def _log_terms(mix: BetaBinomMixture):
    l1, l2 = mix.component_log_pmfs()
    with np.errstate(divide="ignore"):
        return np.log(mix.weight) + l1, np.log1p(-mix.weight) + l2


def log_likelihood(data: RoundScores, mix: BetaBinomMixture) -> float:
    """sum_j ln[w BB1(s_j) + (1-w) BB2(s_j)]."""
    _check_k(data, mix)
    a, b = _log_terms(mix)
    per_value = np.logaddexp(a, b)
    counts = data.counts()
    present = counts > 0
    return float(np.sum(counts[present] * per_value[present]))


def _responsibilities_by_value(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """r1 per score value. The smaller posterior is computed by exp and the
    larger as its complement, so r1 + r2 == 1 exactly and swapping the
    component labels swaps the results bit for bit."""
    lse = np.logaddexp(a, b)
    if not np.all(np.isfinite(lse)):
        raise DegenerateModelError("both component probabilities vanish at some score")
    r1 = np.empty_like(a)
    first_small = a < b
    second_small = b < a
    tie = ~(first_small | second_small)
    r1[first_small] = np.exp(a[first_small] - lse[first_small])
    r1[second_small] = 1.0 - np.exp(b[second_small] - lse[second_small])
    r1[tie] = 0.5
    return r1


def e_step(data: RoundScores, mix: BetaBinomMixture) -> np.ndarray:
    """Responsibilities r_{j,1} for every item (r_{j,2} = 1 - r_{j,1})."""
    _check_k(data, mix)
    a, b = _log_terms(mix)
    r1 = _responsibilities_by_value(a, b)
    return r1[np.asarray(data.scores)]


class _ComponentObjective:
    """Negative weighted BB log-likelihood over x = (ln alpha, ln beta).

    Only the weighted sums over s survive, so evaluation is O(k) in plain
    floats; k is small and numpy call overhead would dominate.
    """

    def __init__(self, k: int, weights: np.ndarray):
        self.k = k
        w = np.asarray(weights, dtype=np.float64)
        self.total = float(w.sum())
        # wa[i] = sum_{s > i} w[s] ; wb[i] = sum_{s < k - i} w[s]
        tail = np.cumsum(w[::-1])[::-1]
        head = np.cumsum(w)
        self.wa = [float(tail[i + 1]) for i in range(k)]
        self.wb = [float(head[k - i - 1]) for i in range(k)]
        self.const = float(w @ _log_binom_row(k))

    def value(self, x) -> float:
        a, b = math.exp(x[0]), math.exp(x[1])
        ll = self.const
        log = math.log
        for i in range(self.k):
            ll += self.wa[i] * log(a + i) + self.wb[i] * log(b + i) - self.total * log(a + b + i)
        return -ll

    def __call__(self, x):
        """Value and gradient, for scipy."""
        f, g, _ = self.derivatives(x)
        return f, np.array(g)

    def derivatives(self, x):
        """(f, grad, hess) as floats / tuples in log-parameter space."""
        a, b = math.exp(x[0]), math.exp(x[1])
        log = math.log
        ll = self.const
        fa = fb = faa = fbb = s_ab = s_ab2 = 0.0
        for i in range(self.k):
            ia, ib, iab = 1.0 / (a + i), 1.0 / (b + i), 1.0 / (a + b + i)
            wa, wb = self.wa[i], self.wb[i]
            ll += wa * log(a + i) + wb * log(b + i) - self.total * log(a + b + i)
            fa += wa * ia
            fb += wb * ib
            faa -= wa * ia * ia
            fbb -= wb * ib * ib
            s_ab += iab
            s_ab2 += iab * iab
        s_ab *= self.total
        s_ab2 *= self.total
        fa -= s_ab
        fb -= s_ab
        faa += s_ab2
        fbb += s_ab2
        g = (-a * fa, -b * fb)
        h = (-(a * fa + a * a * faa), -(a * b * s_ab2), -(b * fb + b * b * fbb))
        return -ll, g, h


def _projected_newton(obj: _ComponentObjective, x0, lo, hi, gtol, maxiter):
    """Box-constrained Newton with Armijo backtracking on two variables.

    Variables sitting on a bound with the gradient pushing outward are frozen
    for the step; a non positive-definite (reduced) Hessian falls back to
    steepest descent or a spectrum-shifted Newton step. Returns
    (x, f, converged).
    """

    def clip(v):
        return min(max(v, lo), hi)

    x0_, x1_ = clip(float(x0[0])), clip(float(x0[1]))
    f, g, h = obj.derivatives((x0_, x1_))
    for _ in range(maxiter):
        free0 = not ((x0_ <= lo and g[0] > 0) or (x0_ >= hi and g[0] < 0))
        free1 = not ((x1_ <= lo and g[1] > 0) or (x1_ >= hi and g[1] < 0))
        pg0 = g[0] if free0 else 0.0
        pg1 = g[1] if free1 else 0.0
        if max(abs(pg0), abs(pg1)) < gtol:
            return (x0_, x1_), f, True
        h00, h01, h11 = h
        scale = max(1.0, abs(h00), abs(h11))
        if free0 and free1:
            # shift the spectrum when the Hessian is not safely positive
            # definite (the likelihood has a flat ridge along alpha/beta = const)
            tr = h00 + h11
            disc = math.sqrt(max((h00 - h11) ** 2 + 4.0 * h01 * h01, 0.0))
            eig_min = 0.5 * (tr - disc)
            shift = max(0.0, 1e-6 * scale - eig_min)
            a00, a11 = h00 + shift, h11 + shift
            det = a00 * a11 - h01 * h01
            d0 = -(a11 * g[0] - h01 * g[1]) / det
            d1 = -(a00 * g[1] - h01 * g[0]) / det
        elif free0:
            d0, d1 = (-g[0] / h00 if h00 > 1e-12 * scale else -g[0]), 0.0
        elif free1:
            d0, d1 = 0.0, (-g[1] / h11 if h11 > 1e-12 * scale else -g[1])
        else:
            return (x0_, x1_), f, True
        if g[0] * d0 + g[1] * d1 >= 0:
            d0, d1 = -pg0, -pg1
        t = 1.0
        while True:
            n0, n1 = clip(x0_ + t * d0), clip(x1_ + t * d1)
            fn = obj.value((n0, n1))
            if fn <= f + 1e-4 * (g[0] * (n0 - x0_) + g[1] * (n1 - x1_)) or t < 1e-10:
                break
            t *= 0.5
        if not fn < f - 1e-15 * (1.0 + abs(f)):
            # no decrease above rounding level along a descent direction:
            # the point is stationary to working precision
            return (x0_, x1_), min(f, fn), math.isfinite(f)
        moved = max(abs(n0 - x0_), abs(n1 - x1_))
        x0_, x1_ = n0, n1
        f, g, h = obj.derivatives((x0_, x1_))
        if moved < 1e-14:
            return (x0_, x1_), f, True
    return (x0_, x1_), f, False


def _from_log(x: float, lo: float, hi: float, bounds: ShapeBounds) -> float:
    # exp(log(1000)) is 999.9999999999998; report an active bound exactly
    if x >= hi:
        return bounds.upper
    if x <= lo:
        return bounds.lower
    return bounds.clamp(math.exp(x))


def _optimize_component(
    k: int, weights: np.ndarray, start: BetaParams, config: EmConfig, rng: np.random.Generator
) -> BetaParams:
    bounds = config.bounds
    lo, hi = math.log(bounds.lower), math.log(bounds.upper)
    x0 = np.clip([math.log(start.alpha), math.log(start.beta)], lo, hi)
    if weights.sum() <= 0.0:
        return BetaParams(_from_log(x0[0], lo, hi, bounds), _from_log(x0[1], lo, hi, bounds))
    obj = _ComponentObjective(k, weights)
    f0 = obj.value(x0)
    if not math.isfinite(f0):
        raise FitError("component objective is not finite at the incoming parameters", start)

    best_x, best_f = x0, f0
    for attempt in range(config.retries + 1):
        xs = x0 if attempt == 0 else np.clip(x0 + rng.normal(scale=0.5, size=2), lo, hi)
        if config.optimizer == "newton":
            x, f, ok = _projected_newton(obj, xs, lo, hi, config.inner_gtol, config.inner_maxiter)
            x = np.asarray(x)
            f = obj.value(x)
        else:
            res = minimize(
                obj,
                xs,
                jac=True,
                method="L-BFGS-B",
                bounds=[(lo, hi), (lo, hi)],
                options={"gtol": config.inner_gtol, "maxiter": config.inner_maxiter},
            )
            x, f, ok = np.clip(res.x, lo, hi), float(res.fun), bool(res.success)
        if np.all(np.isfinite(x)) and math.isfinite(f) and f < best_f:
            best_x, best_f = x, f
        if ok:
            break
        logger.debug("inner optimizer did not converge on attempt %d", attempt)
    # ascent guarantee: best_f <= f0 by construction, so the incoming point is
    # kept whenever no attempt improved on it
    return BetaParams(_from_log(best_x[0], lo, hi, bounds), _from_log(best_x[1], lo, hi, bounds))


def m_step(
    data: RoundScores,
    responsibilities: Sequence[float],
    bounds: ShapeBounds | None = None,
    start: Optional[BetaBinomMixture] = None,
    config: Optional[EmConfig] = None,
) -> BetaBinomMixture:
    """Weighted MLE update of (w, alpha1, beta1, alpha2, beta2).

    ``start`` supplies the incoming shapes used as the optimizer's starting
    point (and the fallback if no improvement is found); uniform Beta(1, 1)
    components are used when it is absent.
    """
    config = config or EmConfig()
    if bounds is not None:
        config = replace(config, bounds=bounds)
    r1 = np.asarray(responsibilities, dtype=np.float64)
    if r1.shape != (data.n,):
        raise ContractError("responsibilities must align with data")
    scores = np.asarray(data.scores)
    k = data.k
    w1 = np.bincount(scores, weights=r1, minlength=k + 1)
    w2 = np.bincount(scores, weights=1.0 - r1, minlength=k + 1)
    weight = float(np.clip(r1.mean(), 0.0, 1.0))
    if start is None:
        uniform = BetaParams(1.0, 1.0)
        start = BetaBinomMixture(0.5, uniform, uniform, k)
    rng = np.random.default_rng(config.seed)
    c1 = _optimize_component(k, w1, start.comp1, config, rng)
    c2 = _optimize_component(k, w2, start.comp2, config, rng)
    return BetaBinomMixture(weight, c1, c2, k)


def moment_match(values: np.ndarray, k: int, bounds: ShapeBounds) -> BetaParams:
    """Method-of-moments Beta-Binomial shapes, clamped to ``bounds``."""
    values = np.asarray(values, dtype=np.float64)
    p = float(values.mean()) / k
    var = float(values.var())
    binvar = k * p * (1.0 - p)
    if k == 1 or binvar <= 0.0 or var <= binvar:
        conc = bounds.upper
    else:
        ratio = var / binvar
        conc = (k - ratio) / (ratio - 1.0) if ratio < k else 2.0 * bounds.lower
    conc = max(conc, 2.0 * bounds.lower)
    return BetaParams(bounds.clamp(p * conc), bounds.clamp((1.0 - p) * conc))


def initial_mixture(data: RoundScores, bounds: ShapeBounds) -> BetaBinomMixture:
    """Median split (scores tied with the median go to the upper half),
    moment-matched halves, weight = upper-half share clamped to [0.1, 0.9]."""
    scores = np.asarray(data.scores)
    med = float(np.median(scores))
    upper = scores >= med
    if upper.all():
        upper = scores > med
    if not upper.any():
        raise DegenerateModelError("median split needs at least two distinct scores")
    w = float(np.clip(upper.mean(), 0.1, 0.9))
    return BetaBinomMixture(
        w,
        moment_match(scores[upper], data.k, bounds),
        moment_match(scores[~upper], data.k, bounds),
        data.k,
    ).canonical()


def _degenerate_fit(data: RoundScores, config: EmConfig) -> EmTrace:
    shape = moment_match(np.asarray(data.scores), data.k, config.bounds)
    mix = BetaBinomMixture(DEGENERATE_WEIGHT, shape, shape, data.k)
    ll = log_likelihood(data, mix)
    return EmTrace(0, [ll], True, mix, degenerate=True)


def fit(
    data: RoundScores,
    config: Optional[EmConfig] = None,
    init: Optional[BetaBinomMixture] = None,
) -> EmTrace:
    """Fit the two-component mixture by EM.

    Stops when the log-likelihood gain of one iteration drops below
    ``config.tol`` or after ``config.max_iter`` iterations. The returned
    mixture is canonicalized (higher-mean component first).
    """
    config = config or EmConfig()
    if data.n < MIN_ITEMS:
        raise InsufficientDataError(
            f"need at least {MIN_ITEMS} items for a two-component fit, got {data.n}"
        )
    if len(set(data.scores)) == 1:
        return _degenerate_fit(data, config)

    mix = init if init is not None else initial_mixture(data, config.bounds)
    _check_k(data, mix)
    ll = log_likelihood(data, mix)
    history = [ll]
    converged = False
    iterations = 0
    for iterations in range(1, config.max_iter + 1):
        r1 = e_step(data, mix)
        try:
            new_mix = m_step(data, r1, start=mix, config=config)
        except FitError as exc:
            exc.last_valid = mix.canonical()
            raise
        new_ll = log_likelihood(data, new_mix)
        history.append(new_ll)
        mix = new_mix
        if new_ll - ll < config.tol:
            converged = True
            break
        ll = new_ll
    return EmTrace(iterations, history, converged, mix.canonical())
