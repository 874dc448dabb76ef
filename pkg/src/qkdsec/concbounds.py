"""Concentration inequalities used by the finite-key assembly.

Three families:

* Bernstein deviation for sums of independent bounded RVs,
* Serfling deviation for sampling without replacement,
* Kato martingale bounds relating a sum of RVs to its sum of conditional
  expectations, with closed-form parameter choices that are optimal for a
  given prediction of the sum, plus the lifting from [0, 1]-valued RVs to
  arbitrary bounded ranges.

Every deviation here is one-sided and valid for *any* admissible parameter
pair; the closed forms only pick the tightest one for the supplied guess.
"""

from __future__ import annotations

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class RvRange:
    """Attainable range [x_min, x_max] of a bounded random variable."""

    x_min: float
    x_max: float

    def __post_init__(self):
        if not (self.x_min <= self.x_max) or not math.isfinite(self.x_min) or not math.isfinite(self.x_max):
            raise ValueError(f"invalid range [{self.x_min}, {self.x_max}]")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def degenerate(self) -> bool:
        return self.width == 0.0


@dataclass(frozen=True)
class KatoParams:
    """Tuned (a, b) pair for one side of Kato's inequality.

    ``side`` is "upper" for the bound E_N <= S_N + Delta and "lower" for
    E_N >= S_N - Delta; the tilde variants (inverted bounds on S_N itself)
    reuse the same container.
    """

    a: float
    b: float
    side: str
    n: int
    guess: float
    epsilon: float

    def __post_init__(self):
        if self.side not in ("upper", "lower"):
            raise ValueError("side must be 'upper' or 'lower'")
        if self.b < abs(self.a) - 1e-9:
            raise ValueError(f"need b >= |a|, got a={self.a}, b={self.b}")


def bernstein_delta(n: int, v: float, c: float, epsilon: float) -> float:
    """One-sided Bernstein deviation on the mean of n independent RVs.

    Delta = c*ln(1/eps)/(3n) + sqrt((c*ln(1/eps)/(3n))^2 + 2*v*ln(1/eps)/n)
    where v is the average variance and |X - E X| <= c almost surely.
    """
    if n < 1:
        raise ValueError("n >= 1 required")
    if v < 0 or c <= 0:
        raise ValueError("need v >= 0 and c > 0")
    if not (0 < epsilon <= 1):
        raise ValueError("epsilon in (0, 1] required")
    ln = math.log(1.0 / epsilon)
    first = c * ln / (3.0 * n)
    return first + math.sqrt(first * first + 2.0 * v * ln / n)


def serfling_delta(r: int, s: int, epsilon: float) -> float:
    """Serfling deviation for the unsampled mean vs the sampled mean.

    Delta = sqrt((r+s)(s+1) ln(1/eps^2) / (r s^2)) for a uniformly random
    sample of s positions out of r+s bit-valued RVs.
    """
    if r < 1 or s < 1:
        raise ValueError("r, s >= 1 required")
    if not (0 < epsilon <= 1):
        raise ValueError("epsilon in (0, 1] required")
    ln = math.log(1.0 / (epsilon * epsilon))
    return math.sqrt((r + s) * (s + 1) * ln / (r * s * s))


def _b_from_a(a: float, n: float, log_eps: float, sign: float) -> float:
    # b satisfying exp(-2(b^2-a^2)/(1 + sign*4a/(3 sqrt n))^2) = eps, i.e.
    # b^2 = a^2 - (ln eps / 2)(1 + sign*4a/(3 sqrt n))^2.
    rad = 18.0 * a * a * n - (16.0 * a * a + sign * 24.0 * a * math.sqrt(n) + 9.0 * n) * log_eps
    return math.sqrt(max(rad, 0.0)) / (3.0 * math.sqrt(2.0 * n))


def kato_ab(n: int, guess: float, epsilon: float, side: str,
            enforce_monotone: bool = False) -> KatoParams:
    """Closed-form (a, b) minimizing the Kato deviation for a sum guess.

    ``guess`` predicts the normalized sum S_N in [0, N].  The returned pair
    satisfies the defining failure-probability equality

        exp(-2(b^2 - a^2) / (1 +/- 4a/(3 sqrt N))^2) = epsilon

    with '+' for the upper side and '-' for the lower side.  Any (a, b) on
    that curve is admissible; optimality only affects tightness.

    ``enforce_monotone`` substitutes a <- max(-sqrt(N)/2, a) (recomputing b)
    so that the resulting upper deviation is nondecreasing in the observed
    sum, which is required when the bound is evaluated at an a-priori upper
    bound of the sum instead of the sum itself.
    """
    if n < 1:
        raise ValueError("n >= 1 required")
    if not (0 < epsilon < 1):
        raise ValueError("epsilon in (0, 1) required")
    guess = min(max(guess, 0.0), float(n))
    le = math.log(epsilon)
    nn = float(n)
    sq_n = math.sqrt(nn)
    prod = guess * (nn - guess)
    disc = -((nn - 2.0 * guess) ** 2) * le * (9.0 * prod - 2.0 * nn * le)
    root = math.sqrt(max(disc, 0.0))
    denom = 4.0 * (9.0 * nn - 8.0 * le) * (9.0 * prod - 2.0 * nn * le)
    if side == "upper":
        a = 3.0 * (72.0 * sq_n * prod * le - 16.0 * nn ** 1.5 * le * le + 9.0 * math.sqrt(2.0) * nn * root) / denom
        sign = 1.0
    elif side == "lower":
        a = 3.0 * (-72.0 * sq_n * prod * le + 16.0 * nn ** 1.5 * le * le + 9.0 * math.sqrt(2.0) * nn * root) / denom
        sign = -1.0
    else:
        raise ValueError("side must be 'upper' or 'lower'")
    # for degenerate guesses (0 or N) the unconstrained optimum touches the
    # singular point of the failure-probability expression at |a| = 3 sqrt(N)/4;
    # stay strictly inside (any point on the curve is admissible)
    cap = 0.75 * sq_n * (1.0 - 1e-9)
    a = min(max(a, -cap), cap)
    if enforce_monotone:
        a = max(-sq_n / 2.0, a)
    b = _b_from_a(a, nn, le, sign)
    return KatoParams(a=a, b=b, side=side, n=n, guess=guess, epsilon=epsilon)


def kato_tilde_ab(n: int, guess: float, epsilon: float, side: str) -> KatoParams:
    """Closed-form (a~, b~) for the inverted Kato bounds on the sum S_N.

    ``guess`` predicts the sum of conditional expectations E_N in [0, N].
    The upper side bounds S_N <= N/(sqrt N - 2a~) * (E_N/sqrt N + b~ - a~)
    and requires a~ < sqrt(N)/2 (enforced by clamping); the lower side is
    symmetric with a~ > -sqrt(N)/2.  The pair satisfies the lower-form
    (upper side) or upper-form (lower side) failure-probability equality.
    """
    if n < 1:
        raise ValueError("n >= 1 required")
    if not (0 < epsilon < 1):
        raise ValueError("epsilon in (0, 1) required")
    guess = min(max(guess, 0.0), float(n))
    le = math.log(epsilon)
    nn = float(n)
    sq_n = math.sqrt(nn)
    disc = (nn - 2.0 * guess) ** 2 * nn * le * (nn * le + 18.0 * guess * (guess - nn))
    root = math.sqrt(max(disc, 0.0))
    denom = (36.0 * le * (nn * nn - 2.0 * nn * guess + 2.0 * guess * guess)
             + 4.0 * nn * le * le + 81.0 * nn * guess * (nn - guess))
    if side == "upper":
        num = 9.0 * root + 4.0 * nn * le * le + 9.0 * le * (3.0 * nn * nn - 8.0 * nn * guess + 8.0 * guess * guess)
        a = (3.0 * sq_n / 4.0) * num / denom
        a = min(a, 0.5 * sq_n * (1.0 - 1e-9))    # admissibility a~ < sqrt(N)/2
        sign = -1.0
    elif side == "lower":
        num = 9.0 * root - 4.0 * nn * le * le - 9.0 * le * (3.0 * nn * nn - 8.0 * nn * guess + 8.0 * guess * guess)
        a = (3.0 * sq_n / 4.0) * num / denom
        a = max(a, -0.5 * sq_n * (1.0 - 1e-9))   # admissibility a~ > -sqrt(N)/2
        sign = 1.0
    else:
        raise ValueError("side must be 'upper' or 'lower'")
    b = _b_from_a(a, nn, le, sign)
    return KatoParams(a=a, b=b, side=side, n=n, guess=guess, epsilon=epsilon)


def kato_residual(p: KatoParams, tilde: bool = False) -> float:
    """Residual of the defining failure-probability equality (should be ~0).

    Evaluated in extended precision: near the boundary of the admissible
    region, b^2 - a^2 sits many orders of magnitude below a^2 and a float64
    evaluation would only measure representation noise.  The b implied by
    the stored a is recomputed at high precision, confirming both the
    closed-form algebra and that the stored b is its correct rounding.
    """
    from decimal import Decimal, getcontext
    ctx = getcontext()
    old_prec = ctx.prec
    ctx.prec = 60
    try:
        upper_form = (p.side == "upper") ^ tilde
        sign = Decimal(1) if upper_form else Decimal(-1)
        a = Decimal(p.a)
        n = Decimal(p.n)
        le = Decimal(p.epsilon).ln()
        factor = 1 + sign * 4 * a / (3 * n.sqrt())
        b2 = a * a - le / 2 * factor * factor
        b_hp = b2.sqrt()
        if abs(Decimal(p.b) - b_hp) > Decimal(4) * abs(Decimal(p.b)) * Decimal(2) ** -52:
            return float((Decimal(p.b) - b_hp) / b_hp)
        log_fail = -2 * (b_hp * b_hp - a * a) / (factor * factor)
        return float((log_fail - le).exp() - 1)
    finally:
        ctx.prec = old_prec


def kato_delta(p: KatoParams, s_observed: float) -> float:
    """Deviation [b + a(2 S/N - 1)] sqrt(N) at a normalized observed sum."""
    return (p.b + p.a * (2.0 * s_observed / p.n - 1.0)) * math.sqrt(p.n)


def k_bound(sum_observed: float, rng: RvRange, n: int, guess_sum: float,
            epsilon: float, sign: int, enforce_monotone: bool = False) -> float:
    """K^{+1} / K^{-1}: bound on the sum of conditional expectations.

    For RVs confined to ``rng``, normalizes n[S] = (S - N x_min)/(x_max-x_min)
    and returns

        K^{+1}(S) = S + (x_max - x_min) * Delta_K^U(N, n[S], n[S_gs], eps)
        K^{-1}(S) = S - (x_max - x_min) * Delta_K^L(N, n[S], n[S_gs], eps)

    ``guess_sum`` is the (unnormalized) prediction of the sum.  A degenerate
    range means the RV is constant and the sum equals its expectation sum.
    """
    if sign not in (1, -1):
        raise ValueError("sign must be +1 or -1")
    if rng.degenerate:
        return sum_observed
    lo, hi = n * rng.x_min, n * rng.x_max
    if sum_observed < lo - 1e-6 * max(1.0, abs(lo)) or sum_observed > hi + 1e-6 * max(1.0, abs(hi)):
        raise ValueError(f"observed sum {sum_observed} outside [{lo}, {hi}]")
    w = rng.width
    s_norm = (min(max(sum_observed, lo), hi) - lo) / w
    g_norm = (min(max(guess_sum, lo), hi) - lo) / w
    side = "upper" if sign == 1 else "lower"
    params = kato_ab(n, g_norm, epsilon, side, enforce_monotone=enforce_monotone)
    return sum_observed + sign * w * kato_delta(params, s_norm)


def gamma_bin(m: int, delta: float, epsilon: float) -> float:
    """Exact binomial finite-size deviation.

    gamma = min{x >= 0 : sum_{i=floor(M(delta+x))}^{M} C(M,i) delta^i
    (1-delta)^{M-i} <= epsilon^2}.  The tail only changes at multiples of
    1/M, so the minimum is k*/M - delta for the smallest k* with
    tail(k*) <= epsilon^2.  Tails are evaluated exactly in log space.
    """
    if m < 1:
        raise ValueError("M >= 1 required")
    if not (0 <= delta < 1):
        raise ValueError("delta in [0, 1) required")
    if not (0 < epsilon < 1):
        raise ValueError("epsilon in (0, 1) required")
    target = epsilon * epsilon
    k_min = max(0, math.floor(m * delta))
    # bisect on k over [k_min, m+1]; the tail is nonincreasing in k
    lo, hi = k_min, m + 1
    while lo < hi:
        mid = (lo + hi) // 2
        if _binom_tail(m, delta, mid) <= target:
            hi = mid
        else:
            lo = mid + 1
    return max(0.0, lo / m - delta)


def _binom_tail(m: int, delta: float, k: int) -> float:
    """P[Bin(m, delta) >= k], exact to double precision."""
    if k <= 0:
        return 1.0
    if k > m:
        return 0.0
    if delta == 0.0:
        return 0.0
    if m <= 1000:
        # math.comb stays within float range up to m = 1000
        return float(sum(math.comb(m, i) * delta ** i * (1.0 - delta) ** (m - i)
                         for i in range(k, m + 1)))
    # summation upward from k relative to the first term; k >= floor(m*delta)
    # in every call here, so the terms decay and the loop stays short
    log_d, log_q = math.log(delta), math.log1p(-delta)
    log_t0 = (math.lgamma(m + 1) - math.lgamma(k + 1) - math.lgamma(m - k + 1)
              + k * log_d + (m - k) * log_q)
    ratio_base = delta / (1.0 - delta)
    total, term = 0.0, 1.0
    for i in range(k, m + 1):
        total += term
        if term < total * 1e-18:
            break
        term *= (m - i) / (i + 1.0) * ratio_base
    return float(total * math.exp(log_t0))
