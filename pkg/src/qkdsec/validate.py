"""Empirical validation harness.

Monte Carlo coverage checks for the concentration bounds (IID regimes
only; the martingale-general coverage has no samplable adversary), an
exact hypergeometric check for the sampling bound, a randomized
side-channel check of the worst-case expectation bound, and certificate
round-trip re-verification.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import channelsim as cs
from . import corrbound as cb
from . import protocolkit as pk
from . import sdpcore
from .concbounds import RvRange, bernstein_delta, k_bound, serfling_delta
from .linops import HermitianOperator


@dataclass
class ValidationReport:
    ok: bool = True
    lines: list = field(default_factory=list)

    def add(self, name: str, passed: bool, detail: str = ""):
        tag = "PASS" if passed else "FAIL"
        self.lines.append(f"[{tag}] {name}" + (f": {detail}" if detail else ""))
        self.ok = self.ok and passed

    def skip(self, name: str, reason: str):
        self.lines.append(f"[SKIP] {name}: {reason}")


def _powered(trials: int, epsilon: float) -> bool:
    """A coverage suite needs enough trials to resolve the failure rate."""
    return trials * epsilon >= 10.0


def bernstein_coverage(n: int = 10_000, trials: int = 10_000,
                       epsilon: float = 0.01, seed: int = 1):
    """Bernoulli(1/2) sums against the one-sided Bernstein deviation."""
    rng = np.random.default_rng(seed)
    delta = bernstein_delta(n, 0.25, 1.0, epsilon)
    means = rng.binomial(n, 0.5, size=trials) / n
    violations = int(np.sum(means >= 0.5 + delta))
    return violations, trials


def kato_coverage(n: int = 10_000, trials: int = 10_000, epsilon: float = 0.01,
                  seed: int = 2):
    """IID three-valued RV: the expectation sum must stay inside
    [K^-1(S), K^+1(S)] except with probability epsilon per side."""
    rng = np.random.default_rng(seed)
    values = np.array([-0.5, 0.0, 1.2])
    probs = np.array([0.2, 0.5, 0.3])
    mu = float(values @ probs)
    rng_range = RvRange(float(values.min()), float(values.max()))
    counts = rng.multinomial(n, probs, size=trials)
    sums = counts @ values
    upper_viol = lower_viol = 0
    guess = n * mu
    for s in sums:
        if n * mu > k_bound(float(s), rng_range, n, guess, epsilon, +1):
            upper_viol += 1
        if n * mu < k_bound(float(s), rng_range, n, guess, epsilon, -1):
            lower_viol += 1
    return upper_viol, lower_viol, trials


def serfling_exact_check(total: int = 30, sample: int = 15,
                         epsilon: float = 0.01) -> float:
    """Exact hypergeometric failure probability of the Serfling bound,
    maximized over the population composition; must be <= epsilon."""
    r = total - sample
    delta = serfling_delta(r, sample, epsilon)
    worst = 0.0
    for ones in range(total + 1):
        fail = 0.0
        for k in range(max(0, ones - r), min(sample, ones) + 1):
            p = (math.comb(ones, k) * math.comb(total - ones, sample - k)
                 / math.comb(total, sample))
            if (ones - k) / r >= k / sample + delta:
                fail += p
        worst = max(worst, fail)
    return worst


def side_channel_worst_case_mc(trials: int = 1000, n_pulses: int = 100_000,
                             eps_pb: float = 1e-3, epsilon: float = 1e-2,
                             alpha: float = 0.3, seed: int = 3):
    """Randomized orthogonal side channels at L=0: the observed sums of
    local test-measurement outcomes must stay below the worst-case bound."""
    rng = np.random.default_rng(seed)
    model = pk.bb84_model(delta_theta=0.063, epsilon=epsilon, corr_length=0, p_z=0.7)
    wm = rng.standard_normal((4, 4))
    w = HermitianOperator((wm + wm.T) / 2)
    g_phi = pk.reference_gram(model)
    mwb = cb.mw_upper_single(model, g_phi, w, alpha, n_pulses, eps_pb)
    vals, vecs = np.linalg.eigh(np.real(w.mat))
    p = model.setting_probs
    amps = np.array([k.amplitudes.real for k in model.reference_states])
    violations = 0
    for _ in range(trials):
        side = rng.standard_normal((4, 6))
        side /= np.linalg.norm(side, axis=1, keepdims=True)
        psi = np.concatenate([math.sqrt(1 - epsilon) * amps,
                              math.sqrt(epsilon) * side], axis=1)
        rho = np.sqrt(np.outer(p, p)) * (psi @ psi.T)
        pw = np.maximum(np.einsum("ia,ab,ib->i", vecs.T, rho, vecs.T), 0.0)
        pw = pw / pw.sum() * alpha
        outcome_probs = np.concatenate([pw, [1.0 - alpha]])
        counts = rng.multinomial(n_pulses, outcome_probs)
        m_w = float(counts[:-1] @ vals)
        if m_w > mwb.m_w_upper:
            violations += 1
    return violations, trials, mwb.m_w_upper


def certificate_roundtrip(seed: int = 4):
    """Export/load/re-verify a BB84 certificate; tampering must be caught."""
    model = pk.bb84_model(delta_theta=0.05, epsilon=1e-5, corr_length=1, p_z=0.8)
    channel = cs.ChannelParams(distance_km=40.0, eta_det=0.73, p_dark=1e-6)
    table = cs.bb84_expected_stats(channel, model)
    q = cs.q_values(model, table, pk.coefficient_sets(model))
    problem = sdpcore.build_dual(model, gamma_w=25.0, q_guesses=q)
    cert = sdpcore.solve_dual(problem)
    text = sdpcore.export_certificate(cert, problem)
    rec = sdpcore.load_certificate(text)
    margin, _ = sdpcore.reverify_certificate(rec, problem)
    tampered = rec["x"].copy()
    lam = problem.lam_slice()
    tampered[lam.start:lam.stop] -= 0.3
    bad_margin, _ = sdpcore.verify_certificate(problem, tampered)
    return margin, bad_margin


def run_validation(config=None, seed: int = 0, quick: bool = False) -> ValidationReport:
    """Full harness: coverage suites plus certificate round trip."""
    rep = ValidationReport()
    trials = 1000 if quick else 10_000
    n = 10_000
    eps = 0.01
    if not _powered(trials, eps):
        rep.skip("bernstein-coverage", f"underpowered: {trials} trials at eps={eps}")
    else:
        viol, tr = bernstein_coverage(n, trials, eps, seed + 1)
        rep.add("bernstein-coverage", viol <= eps * tr, f"{viol}/{tr} violations")
    if not _powered(trials, eps):
        rep.skip("kato-coverage", f"underpowered: {trials} trials at eps={eps}")
    else:
        up, lo, tr = kato_coverage(n, trials, eps, seed + 2)
        rep.add("kato-coverage", up <= eps * tr and lo <= eps * tr,
                f"upper {up}/{tr}, lower {lo}/{tr}")
    worst = serfling_exact_check(30, 15, eps)
    rep.add("serfling-exact", worst <= eps, f"worst tail {worst:.3e} <= {eps}")
    mc_trials = 200 if quick else 1000
    viol, tr, bound = side_channel_worst_case_mc(trials=mc_trials, seed=seed + 3)
    rep.add("local-sum-bound-mc", viol == 0, f"{viol}/{tr} exceed {bound:.4g}")
    margin, bad = certificate_roundtrip(seed + 4)
    rep.add("certificate-roundtrip", margin >= -sdpcore.FEAS_TOL and bad < -sdpcore.FEAS_TOL,
            f"margin {margin:.2e}, tampered {bad:.2e}")
    return rep
