"""Small, dependency-free statistics used by the run-jump test.

Student's t distribution is evaluated through the regularized incomplete
beta function, which is computed with a modified Lentz continued fraction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

_CF_MAX_ITER = 300
_CF_EPS = 1e-14
_TINY = 1e-300


@dataclass(frozen=True)
class SampleStats:
    """Welford accumulator: count, mean and sum of squared deviations."""

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0

    def push(self, x: float) -> SampleStats:
        count = self.count + 1
        delta = x - self.mean
        mean = self.mean + delta / count
        return SampleStats(count, mean, self.m2 + delta * (x - mean))

    def merge(self, other: SampleStats) -> SampleStats:
        if self.count == 0:
            return other
        if other.count == 0:
            return self
        count = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * other.count / count
        m2 = self.m2 + other.m2 + delta * delta * self.count * other.count / count
        return SampleStats(count, mean, m2)

    @property
    def variance(self) -> float:
        if self.count < 2:
            raise ValueError("variance needs at least two observations")
        return self.m2 / (self.count - 1)

    @property
    def sd(self) -> float:
        return math.sqrt(self.variance)

    @classmethod
    def from_iterable(cls, xs: Iterable[float]) -> SampleStats:
        acc = cls()
        for x in xs:
            acc = acc.push(x)
        return acc


def mean_sd(xs: Sequence[float]) -> tuple[float, float]:
    """Return ``(mean, sample sd)`` using two passes over ``xs``.

    Raises ``ValueError`` when fewer than two values are given; use
    :func:`mean` for singletons.
    """
    if len(xs) < 2:
        raise ValueError(f"sample sd needs at least 2 values, got {len(xs)}")
    mu = mean(xs)
    ss = math.fsum((x - mu) ** 2 for x in xs)
    return mu, math.sqrt(ss / (len(xs) - 1))


def mean(xs: Sequence[float]) -> float:
    if len(xs) == 0:
        raise ValueError("mean of an empty sample")
    return math.fsum(xs) / len(xs)


def _betacf(a: float, b: float, x: float) -> float:
    # modified Lentz evaluation of the incomplete beta continued fraction
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta did not converge (a={a}, b={b}, x={x})")


def regularized_incomplete_beta(x: float, a: float, b: float, y: Optional[float] = None) -> float:
    """I_x(a, b) for ``0 <= x <= 1`` and positive shape parameters.

    ``y`` may carry ``1 - x`` computed without cancellation when ``x`` is
    close to 1.
    """
    if a <= 0 or b <= 0:
        raise ValueError("shape parameters must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"x must lie in [0, 1], got {x}")
    if y is None:
        y = 1.0 - x
    if x == 0.0 or y == 0.0:
        return 0.0 if x == 0.0 else 1.0
    log_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log(y)
    )
    front = math.exp(log_front)
    # the fraction converges fast only on one side of the mean
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, y) / b


def _t_tail(t: float, df: float) -> float:
    """P(T > |t|) for finite nonzero ``t``."""
    t2 = t * t
    return 0.5 * regularized_incomplete_beta(df / (df + t2), 0.5 * df, 0.5, t2 / (df + t2))


def _check_df(df: float) -> None:
    if not df > 0:
        raise ValueError(f"degrees of freedom must be positive, got {df}")


def student_t_sf(t: float, df: float) -> float:
    """Upper tail P(T > t); accurate in the far right tail."""
    _check_df(df)
    if math.isnan(t):
        raise ValueError("t is NaN")
    if t == 0.0:
        return 0.5
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    tail = _t_tail(t, df)
    return tail if t > 0 else 1.0 - tail


def student_t_cdf(t: float, df: float) -> float:
    """P(T <= t) for Student's t with ``df`` degrees of freedom."""
    _check_df(df)
    if math.isnan(t):
        raise ValueError("t is NaN")
    if t == 0.0:
        return 0.5
    if math.isinf(t):
        return 1.0 if t > 0 else 0.0
    tail = _t_tail(t, df)
    return 1.0 - tail if t > 0 else tail


def student_t_isf(p: float, df: float, tol: float = 1e-13) -> float:
    """Critical value ``t`` with ``student_t_sf(t, df) == p`` for ``0 < p < 1``.

    Bisection on the survival function; used to vectorize the significance
    check as ``t > critical``.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"p must lie in (0, 1), got {p}")
    _check_df(df)
    lo, hi = -1.0, 1.0
    while student_t_sf(lo, df) < p:
        lo *= 2.0
    while student_t_sf(hi, df) > p:
        hi *= 2.0
    while hi - lo > tol * max(1.0, abs(lo)):
        mid = 0.5 * (lo + hi)
        if student_t_sf(mid, df) > p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def normal_cdf(x: float) -> float:
    return 0.5 * math.erfc(-x / math.sqrt(2.0))
