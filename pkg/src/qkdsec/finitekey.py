"""End-to-end finite-key bounds and secret-key lengths.

Chains the certified dual multipliers, the worst-case bound on the local
W-measurement sum, and the Kato/Bernstein/Serfling concentration layer
into the phase-error and single-photon-detection bounds, then evaluates
the secret-key length with a fully accounted failure-probability budget.

All "observed" quantities here are deterministic channel-model
expectations (the tagging sequence is never sampled); they double as the
concentration guesses, which affects tightness only, never validity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import channelsim as cs
from . import corrbound as cb
from . import protocolkit as pk
from . import sdpcore
from .concbounds import RvRange, k_bound, kato_tilde_ab, gamma_bin, serfling_delta

F_EC_DEFAULT = 1.16


class InvalidRegime(ValueError):
    """A concentration bound left its admissible parameter region."""


def h2(x: float) -> float:
    """Binary entropy, clamped to its [0, 1] domain."""
    x = min(max(x, 0.0), 1.0)
    if x == 0.0 or x == 1.0:
        return 0.0
    return -x * math.log2(x) - (1 - x) * math.log2(1 - x)


# ---------------------------------------------------------------------------
# failure-probability budget


@dataclass(frozen=True)
class EpsilonBudget:
    """Complete failure-probability decomposition.

    eps_sec = 2 sqrt(eps_pro) + eps_PA must hold; the assembled failure of
    the emitted bounds (protocol dependent) must never exceed eps_pro.
    """

    eps_sec: float
    eps_pa: float
    eps_ev: float
    eps_pro: float
    eps_pk: float
    eps_pb: float
    eps_ps: float
    eps_dep1: float = 0.0
    eps_dep2: float = 0.0

    def __post_init__(self):
        for name in ("eps_sec", "eps_pa", "eps_ev", "eps_pro", "eps_pk", "eps_pb", "eps_ps"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise ValueError(f"{name}={v} outside (0, 1)")
        lhs = 2.0 * math.sqrt(self.eps_pro) + self.eps_pa
        if abs(lhs - self.eps_sec) > 1e-9 * self.eps_sec:
            raise ValueError("eps_sec != 2 sqrt(eps_pro) + eps_PA")

    def assembled(self, kind: str, mismatch: bool) -> float:
        dep = self.eps_dep1 ** 2 + self.eps_dep2 ** 2 if mismatch else 0.0
        if kind == "decoy":
            return 2.0 * (3.0 * self.eps_pk + self.eps_pb) + dep
        return 3.0 * self.eps_pk + self.eps_pb + self.eps_ps + dep

    def check_assembly(self, kind: str, mismatch: bool) -> None:
        total = self.assembled(kind, mismatch)
        if total > self.eps_pro * (1.0 + 1e-12):
            raise ValueError(f"assembled failure {total} exceeds eps_pro {self.eps_pro}")


def budget_preset(kind: str, eps_sec: float = 1e-10, eps_ev: float = 1e-10) -> EpsilonBudget:
    """Preset splits: eps_PA = eps_sec/2, eps_pro = (eps_sec/4)^2, and the
    protocol components at eps_pro/6 (+ dep^2 = eps_pro/12) for BB84,
    eps_pro/5 for MDI, eps_pro/10 throughout for decoy."""
    eps_pa = eps_sec / 2.0
    eps_pro = (eps_sec / 4.0) ** 2
    if kind == "bb84":
        part, dep2 = eps_pro / 6.0, eps_pro / 12.0
    elif kind == "mdi":
        part, dep2 = eps_pro / 5.0, 0.0
    elif kind == "decoy":
        part, dep2 = eps_pro / 10.0, eps_pro / 10.0
    else:
        raise ValueError(kind)
    dep = math.sqrt(dep2)
    return EpsilonBudget(eps_sec=eps_sec, eps_pa=eps_pa, eps_ev=eps_ev,
                         eps_pro=eps_pro, eps_pk=part, eps_pb=part, eps_ps=part,
                         eps_dep1=dep, eps_dep2=dep)


# ---------------------------------------------------------------------------
# detector tolerances


@dataclass(frozen=True)
class DetectorTolerances:
    """Canonical threshold-detector model with per-detector efficiency and
    dark-count rates known only within relative tolerances."""

    eta_det: float
    d_det: float
    delta_eta: float = 0.0
    delta_dc: float = 0.0

    def __post_init__(self):
        if not (0.0 <= self.eta_det <= 1.0) or not (0.0 <= self.d_det <= 1.0):
            raise ValueError("eta, d in [0, 1] required")
        if not (0.0 <= self.delta_eta < 1.0) or not (0.0 <= self.delta_dc < 1.0):
            raise ValueError("tolerances in [0, 1) required")

    @property
    def mismatch_enabled(self) -> bool:
        return self.delta_eta > 0.0 or self.delta_dc > 0.0


def detector_deltas(t: DetectorTolerances) -> tuple:
    """Mismatch parameters (delta_1, delta_2) for the canonical model.

    With d_max/min = d (1 +/- Delta_dc) and r_eta = (1-Delta_eta)/(1+Delta_eta):
    delta_1 <= max{(1 - ratio) d_max (2-d_min) / (1-(1-d_min)^2),
                   4 |1 - sqrt(1 - (1-d_min)^2 (1-r_eta))|}
    delta_2 <= max{1 - ratio, (1-d_min)^2 (1-r_eta)}
    where ratio = (1-(1-d_min)^2)/(1-(1-d_max)^2); equal dark-count bounds
    make ratio exactly 1 and the dark-count terms vanish.
    """
    d_max = t.d_det * (1.0 + t.delta_dc)
    d_min = t.d_det * (1.0 - t.delta_dc)
    r_eta = (1.0 - t.delta_eta) / (1.0 + t.delta_eta)
    if d_max == d_min:
        ratio = 1.0
    else:
        den = 1.0 - (1.0 - d_max) ** 2
        ratio = (1.0 - (1.0 - d_min) ** 2) / den if den > 0 else 1.0
    if 1.0 - ratio > 0.0:
        den1 = 1.0 - (1.0 - d_min) ** 2
        dc_term1 = ((1.0 - ratio) * d_max * (2.0 - d_min) / den1) if den1 > 0 else math.inf
    else:
        dc_term1 = 0.0
    eta_term1 = 4.0 * abs(1.0 - math.sqrt(max(1.0 - (1.0 - d_min) ** 2 * (1.0 - r_eta), 0.0)))
    delta1 = max(dc_term1, eta_term1)
    delta2 = max(1.0 - ratio, (1.0 - d_min) ** 2 * (1.0 - r_eta))
    return min(delta1, 1.0) if math.isfinite(delta1) else 1.0, min(delta2, 1.0)


# ---------------------------------------------------------------------------
# bound assembly pieces


def mph_upper(eta: np.ndarray, k_q_terms: np.ndarray, k_w_term: float,
              alpha: float, n_pulses: float, eps_pk: float,
              guess_ph_sum: float) -> float:
    """Upper bound on the estimation-protocol phase-error count.

    Combines the per-statistic Kato bounds (already evaluated, signed by
    the multipliers) and the W-term through the inverted Kato form with
    (a~, b~) tuned to the predicted phase-error sum.
    """
    n = float(n_pulses)
    pt = kato_tilde_ab(int(n), guess_ph_sum, eps_pk, "upper")
    sq_n = math.sqrt(n)
    if pt.a >= sq_n / 2.0:
        raise InvalidRegime("inverted Kato upper bound needs a~ < sqrt(N)/2")
    inner = float(eta @ k_q_terms) + (1.0 - alpha) / alpha * k_w_term
    return n / (sq_n - 2.0 * pt.a) * (inner / sq_n + pt.b - pt.a)


def mkey1_lower(eta_dot: np.ndarray, k_q_terms: np.ndarray, k_w_term: float,
                alpha: float, n_pulses: float, eps_pk: float,
                guess_key_sum: float) -> float:
    """Lower bound on single-photon sifted-key detections (decoy)."""
    n = float(n_pulses)
    pt = kato_tilde_ab(int(n), guess_key_sum, eps_pk, "lower")
    sq_n = math.sqrt(n)
    if pt.a <= -sq_n / 2.0:
        raise InvalidRegime("inverted Kato lower bound needs a~ > -sqrt(N)/2")
    inner = float(eta_dot @ k_q_terms) + (1.0 - alpha) / alpha * k_w_term
    return n / (sq_n + 2.0 * pt.a) * (-inner / sq_n - pt.b + pt.a)


def _dev_costs(csets, m_q: np.ndarray, n_pulses: float, alpha: float,
               eps_pk: float) -> np.ndarray:
    """Per-round finite-key price of one unit of |eta_l|: the one-sided
    Kato deviation of its statistic, normalized per signal.  Feeding these
    into the dual objective steers it toward multipliers that stay cheap
    after concentration, mirroring the role of the eigenvalue cap for the
    characterization multipliers."""
    eps_l = eps_pk / len(csets)
    out = np.zeros(len(csets))
    for l, cset in enumerate(csets):
        rng = RvRange(cset.x_min, cset.x_max)
        if rng.degenerate:
            continue
        dev = k_bound(float(m_q[l]), rng, int(n_pulses), float(m_q[l]),
                      eps_l, +1) - float(m_q[l])
        out[l] = max(dev, 0.0) / ((1.0 - alpha) * n_pulses)
    return out


def _k_q_terms(cert, problem, csets, m_q: np.ndarray, n_pulses: float,
               eps_pk: float) -> np.ndarray:
    """Kato bound K^{sign(eta_l)} on each test-statistic expectation sum,
    with the per-statistic failure eps_pk / n_Q."""
    eta = cert.eta(problem)
    eps_l = eps_pk / len(csets)
    out = np.zeros(len(csets))
    for l, cset in enumerate(csets):
        rng = RvRange(cset.x_min, cset.x_max)
        sign = 1 if eta[l] >= 0 else -1
        out[l] = k_bound(float(m_q[l]), rng, int(n_pulses), float(m_q[l]),
                         eps_l, sign)
    return out


def _k_w_term(w_obs, m_w_upper: float, guess_w_sum: float, n_pulses: float,
              eps_pk: float) -> float:
    """K^{+1} applied to the a-priori bound on the W sum; monotonicity of
    the bound in its argument is enforced so that plugging the upper bound
    M_W_upper >= M_W is valid."""
    rng = RvRange(w_obs.omega_min, w_obs.omega_max)
    if rng.degenerate:
        return m_w_upper
    lo, hi = n_pulses * rng.x_min, n_pulses * rng.x_max
    arg = min(max(m_w_upper, lo), hi)
    guess = min(max(guess_w_sum, lo), hi)
    return k_bound(arg, rng, int(n_pulses), guess, eps_pk, +1,
                   enforce_monotone=True)


def mph_mismatch(m_ph_upper: float, m_key: float, delta1: float, delta2: float,
                 eps_dep1: float, eps_dep2: float) -> float:
    """Detector-mismatch lift of the phase-error bound.

    M_key [ (M_ph^U/M_key + d1 + gamma_bin(M_key, d1))
            / (1 - d2 - gamma_bin(M_key, d2)) ];
    a nonpositive denominator signals that no key can be claimed.
    """
    if m_key < 1.0:
        return math.inf
    m_int = int(math.floor(m_key))
    g1 = gamma_bin(m_int, min(delta1, 1.0 - 1e-15), eps_dep1)
    g2 = gamma_bin(m_int, min(delta2, 1.0 - 1e-15), eps_dep2)
    den = 1.0 - delta2 - g2
    if den <= 0.0:
        return math.inf
    return m_key * ((m_ph_upper / m_key + delta1 + g1) / den)


def nph_upper(m_ph_delta_upper: float, m_key: float, s_key: float,
              eps_ps: float) -> float:
    """Serfling lift from the estimation protocol to the full virtual
    protocol: N_ph <= M_ph^U (1 + S_key/M_key) + S_key Delta_S."""
    if s_key <= 0.0:
        return m_ph_delta_upper
    if m_key < 1.0:
        return math.inf
    delta_s = serfling_delta(max(int(s_key), 1), max(int(m_key), 1), eps_ps)
    return m_ph_delta_upper * (1.0 + s_key / m_key) + s_key * delta_s


def key_length_bb84(n_key: float, e_ph_upper: float, lambda_ec: float,
                    budget: EpsilonBudget) -> float:
    """l = N_key [1 - h(e_ph)] - lambda_EC - 2 log2(1/(2 eps_PA))
    - log2(2/eps_EV), clamped at zero."""
    ent = h2(min(max(e_ph_upper, 0.0), 0.5))
    l = (n_key * (1.0 - ent) - lambda_ec
         - 2.0 * math.log2(1.0 / (2.0 * budget.eps_pa))
         - math.log2(2.0 / budget.eps_ev))
    return max(l, 0.0)


def key_length_decoy(m_key1_lower: float, e_ph1_upper: float, lambda_ec: float,
                     budget: EpsilonBudget) -> float:
    ent = h2(min(max(e_ph1_upper, 0.0), 0.5))
    l = (m_key1_lower * (1.0 - ent) - lambda_ec
         - 2.0 * math.log2(1.0 / (2.0 * budget.eps_pa))
         - math.log2(2.0 / budget.eps_ev))
    return max(l, 0.0)


# ---------------------------------------------------------------------------
# results


@dataclass(frozen=True)
class KeyRateResult:
    protocol: str
    l_key: float
    rate: float
    e_ph_upper: float
    m_w_upper: float
    lambda_ec: float
    n_pulses: float
    params: dict
    budget: EpsilonBudget
    m_ph_upper: float = math.nan
    m_key1_lower: float = math.nan
    diagnostics: dict = field(default_factory=dict)

    @property
    def zero_key(self) -> bool:
        return self.l_key <= 0.0


# ---------------------------------------------------------------------------
# protocol pipelines


@dataclass
class PipelineOptions:
    gamma_w: float | None = 20.0
    alpha: float = 1e-3
    f_ec: float = F_EC_DEFAULT
    renormalize: bool = False
    gap_tol: float = 1e-10
    gram_gap_tol: float = 1e-9
    context_mode: str = "reduced"
    dual_strategy: str = "auto"     # "auto" tries plain and deviation-aware
    warm_state: dict = field(default_factory=dict)


def _solve_candidates(problem, dev, opt, model=None):
    """Candidate certificates per the dual strategy.

    Neither objective dominates: the plain dual is asymptotically tightest,
    the deviation-aware dual prices the concentration cost of the test
    multipliers but not of the observable; under "auto" the pipeline
    assembles the full bound for both and keeps the better key rate (both
    are valid)."""
    certs = []
    if opt.dual_strategy in ("auto", "plain"):
        if opt.renormalize:
            certs.append(sdpcore.solve_dual_renormalized(model, problem,
                                                         gap_tol=opt.gap_tol))
        else:
            certs.append(sdpcore.solve_dual(problem, gap_tol=opt.gap_tol))
    if opt.dual_strategy in ("auto", "devaware"):
        if opt.renormalize:
            certs.append(sdpcore.solve_dual_renormalized(model, problem,
                                                         gap_tol=opt.gap_tol,
                                                         dev_costs=dev))
        else:
            certs.append(sdpcore.solve_dual_devaware(problem, dev,
                                                     gap_tol=opt.gap_tol))
    return certs


def bb84_keyrate(model: pk.ProtocolModel, channel: cs.ChannelParams,
                 n_pulses: float, budget: EpsilonBudget,
                 tolerances: DetectorTolerances | None = None,
                 options: PipelineOptions | None = None) -> KeyRateResult:
    opt = options or PipelineOptions()
    alpha = opt.alpha
    tol = tolerances or DetectorTolerances(eta_det=channel.eta_det, d_det=channel.p_dark)
    mismatch = tol.mismatch_enabled
    budget.check_assembly("bb84", mismatch)

    table = cs.bb84_expected_stats(channel, model)
    csets = pk.coefficient_sets(model)
    q = cs.q_values(model, table, csets)
    stats = cs.expected_observables(model, table, csets, n_pulses, alpha)
    dev = _dev_costs(csets, stats.m_q, n_pulses, alpha, budget.eps_pk)
    problem = sdpcore.build_dual(model, gamma_w=opt.gamma_w, q_guesses=q)
    g_phi = pk.reference_gram(model)
    if mismatch:
        d1, d2 = detector_deltas(tol)
    else:
        d1 = d2 = 0.0

    best = None
    for cert in _solve_candidates(problem, dev, opt, model):
        w_obs = sdpcore.observable_w(cert, problem)
        mwb = cb.mw_upper_single(model, g_phi, w_obs.single, alpha, n_pulses,
                                 budget.eps_pb, gap_tol=opt.gram_gap_tol)
        k_q = _k_q_terms(cert, problem, csets, stats.m_q, n_pulses, budget.eps_pk)
        t_guesses = problem.c[problem.n_q:] @ cert.x[problem.n_q:]
        w_guess = n_pulses * alpha * float(t_guesses)
        k_w = _k_w_term(w_obs, mwb.m_w_upper, w_guess, n_pulses, budget.eps_pk)
        ph_guess = n_pulses * (1.0 - alpha) * min(max(cert.objective, 0.0), 1.0)
        m_ph = mph_upper(cert.eta(problem), k_q, k_w, alpha, n_pulses,
                         budget.eps_pk, ph_guess)
        m_ph_d = mph_mismatch(m_ph, stats.m_key, d1, d2, budget.eps_dep1,
                              budget.eps_dep2) if mismatch else m_ph
        n_ph = nph_upper(m_ph_d, stats.m_key, stats.s_key, budget.eps_ps)
        e_ph = n_ph / stats.n_key if stats.n_key > 0 else math.inf
        lam_ec = opt.f_ec * stats.n_key * h2(stats.qber_z)
        l_key = key_length_bb84(stats.n_key, e_ph, lam_ec, budget) \
            if math.isfinite(e_ph) else 0.0
        cand = KeyRateResult(
            protocol="bb84", l_key=l_key, rate=l_key / n_pulses,
            e_ph_upper=min(max(e_ph, 0.0), 0.5) if math.isfinite(e_ph) else 0.5,
            m_w_upper=mwb.m_w_upper, m_ph_upper=m_ph_d, lambda_ec=lam_ec,
            n_pulses=n_pulses, budget=budget,
            params={"p_z": float(model.basis_probs["Z"]), "alpha": alpha,
                    "gamma_w": opt.gamma_w, "distance_km": channel.distance_km},
            diagnostics={"objective": cert.objective,
                         "margin": cert.feasibility_margin,
                         "dev_aware": cert.meta.get("dev_aware", False),
                         "n_key": stats.n_key, "qber_z": stats.qber_z,
                         "delta1": d1, "delta2": d2,
                         "guesses_from": "channel-model expectations"})
        if best is None or cand.l_key > best.l_key:
            best = cand
    return best


def mdi_keyrate(model: pk.ProtocolModel, channel: cs.ChannelParams,
                n_pulses: float, budget: EpsilonBudget,
                options: PipelineOptions | None = None) -> KeyRateResult:
    opt = options or PipelineOptions()
    alpha = opt.alpha
    budget.check_assembly("mdi", False)

    table = cs.mdi_expected_stats(channel, model)
    csets = pk.coefficient_sets(model)
    q = cs.q_values(model, table, csets)
    stats = cs.expected_observables(model, table, csets, n_pulses, alpha)
    dev = _dev_costs(csets, stats.m_q, n_pulses, alpha, budget.eps_pk)
    problem = sdpcore.build_dual(model, gamma_w=opt.gamma_w, q_guesses=q)
    g_phi = pk.reference_gram(model)

    best = None
    for cert in _solve_candidates(problem, dev, opt):
        w_obs = sdpcore.observable_w(cert, problem)
        mwb = cb.mw_upper_single(model, g_phi, w_obs.single, alpha, n_pulses,
                                 budget.eps_pb, gap_tol=opt.gram_gap_tol)
        k_q = _k_q_terms(cert, problem, csets, stats.m_q, n_pulses, budget.eps_pk)
        t_guesses = problem.c[problem.n_q:] @ cert.x[problem.n_q:]
        w_guess = n_pulses * alpha * float(t_guesses)
        k_w = _k_w_term(w_obs, mwb.m_w_upper, w_guess, n_pulses, budget.eps_pk)
        ph_guess = n_pulses * (1.0 - alpha) * min(max(cert.objective, 0.0), 1.0)
        m_ph = mph_upper(cert.eta(problem), k_q, k_w, alpha, n_pulses,
                         budget.eps_pk, ph_guess)
        n_ph = nph_upper(m_ph, stats.m_key, stats.s_key, budget.eps_ps)
        e_ph = n_ph / stats.n_key if stats.n_key > 0 else math.inf
        lam_ec = opt.f_ec * stats.n_key * h2(stats.qber_z)
        l_key = key_length_bb84(stats.n_key, e_ph, lam_ec, budget) \
            if math.isfinite(e_ph) else 0.0
        cand = KeyRateResult(
            protocol="mdi", l_key=l_key, rate=l_key / n_pulses,
            e_ph_upper=min(max(e_ph, 0.0), 0.5) if math.isfinite(e_ph) else 0.5,
            m_w_upper=mwb.m_w_upper, m_ph_upper=m_ph, lambda_ec=lam_ec,
            n_pulses=n_pulses, budget=budget,
            params={"p_z": 2.0 * math.sqrt(float(model.setting_probs[0])),
                    "alpha": alpha, "gamma_w": opt.gamma_w,
                    "mu": model.mu, "p_key_given_z": model.p_key_given_z,
                    "distance_km": channel.distance_km},
            diagnostics={"objective": cert.objective,
                         "margin": cert.feasibility_margin,
                         "dev_aware": cert.meta.get("dev_aware", False),
                         "n_key": stats.n_key, "qber_z": stats.qber_z})
        if best is None or cand.l_key > best.l_key:
            best = cand
    return best


def decoy_keyrate(model: pk.ProtocolModel, icm: cb.IntensityCorrelationModel,
                  channel: cs.ChannelParams, n_pulses: float,
                  budget: EpsilonBudget,
                  tolerances: DetectorTolerances | None = None,
                  options: PipelineOptions | None = None) -> KeyRateResult:
    opt = options or PipelineOptions()
    alpha = opt.alpha
    tol = tolerances or DetectorTolerances(eta_det=channel.eta_det, d_det=channel.p_dark)
    mismatch = tol.mismatch_enabled
    budget.check_assembly("decoy", mismatch)
    table = cs.decoy_expected_stats(channel, model)
    strategies = {"auto": ("plain", "devaware"), "plain": ("plain",),
                  "devaware": ("devaware",)}[opt.dual_strategy]

    prepared = {}
    for target in ("phase", "detection"):
        csets = pk.coefficient_sets(model, target)
        q = cs.q_values(model, table, csets)
        stats = cs.expected_observables(model, table, csets, n_pulses, alpha)
        dev = _dev_costs(csets, stats.m_q, n_pulses, alpha, budget.eps_pk)
        problem = sdpcore.build_dual(model, target=target, gamma_w=opt.gamma_w,
                                     q_guesses=q)
        prepared[target] = (csets, stats, dev, problem)

    best = None
    for strategy in strategies:
        pieces = {}
        for target in ("phase", "detection"):
            csets, stats, dev, problem = prepared[target]
            if strategy == "plain":
                cert = sdpcore.solve_dual(problem, gap_tol=opt.gap_tol)
            else:
                cert = sdpcore.solve_dual_devaware(problem, dev, gap_tol=opt.gap_tol)
            w_obs = sdpcore.observable_w(cert, problem)
            cache = opt.warm_state.setdefault(f"gram_{target}_{strategy}", {})
            mwb = cb.mw_upper_decoy(model, icm, w_obs, alpha, n_pulses,
                                    budget.eps_pb, context_mode=opt.context_mode,
                                    gap_tol=opt.gram_gap_tol, warm_cache=cache)
            k_q = _k_q_terms(cert, problem, csets, stats.m_q, n_pulses, budget.eps_pk)
            t_part = problem.c[problem.n_q:] @ cert.x[problem.n_q:]
            w_guess = n_pulses * alpha * float(t_part)
            k_w = _k_w_term(w_obs, mwb.m_w_upper, w_guess, n_pulses, budget.eps_pk)
            pieces[target] = (cert, problem, mwb, stats, k_q, k_w)

        cert_ph, prob_ph, mwb_ph, stats_ph, k_q_ph, k_w_ph = pieces["phase"]
        cert_d, prob_d, mwb_d, stats_d, k_q_d, k_w_d = pieces["detection"]
        ph_guess = n_pulses * (1.0 - alpha) * min(max(cert_ph.objective, 0.0), 1.0)
        m_ph = mph_upper(cert_ph.eta(prob_ph), k_q_ph, k_w_ph, alpha, n_pulses,
                         budget.eps_pk, ph_guess)
        key_guess = n_pulses * (1.0 - alpha) * min(max(-cert_d.objective, 0.0), 1.0)
        m_key1 = mkey1_lower(cert_d.eta(prob_d), k_q_d, k_w_d, alpha, n_pulses,
                             budget.eps_pk, key_guess)

        lam_ec = opt.f_ec * stats_d.m_key * h2(stats_d.qber_z)
        params = {"p_z": float(model.basis_probs["Z"]), "alpha": alpha,
                  "gamma_w": opt.gamma_w,
                  "intensities": tuple(model.intensities),
                  "intensity_probs": tuple(model.intensity_probs),
                  "distance_km": channel.distance_km}
        diagnostics = {"objective_phase": cert_ph.objective,
                       "objective_detection": cert_d.objective,
                       "margin_phase": cert_ph.feasibility_margin,
                       "margin_detection": cert_d.feasibility_margin,
                       "m_w_upper_detection": mwb_d.m_w_upper,
                       "worst_context_phase": mwb_ph.context,
                       "dev_aware": strategy == "devaware",
                       "m_key": stats_d.m_key, "qber_z": stats_d.qber_z}
        if m_key1 <= 0.0 or m_ph < 0.0:
            cand = KeyRateResult(protocol="decoy", l_key=0.0, rate=0.0, e_ph_upper=0.5,
                                 m_w_upper=mwb_ph.m_w_upper, m_ph_upper=m_ph,
                                 m_key1_lower=m_key1, lambda_ec=lam_ec,
                                 n_pulses=n_pulses, budget=budget, params=params,
                                 diagnostics=diagnostics)
        else:
            if mismatch:
                d1, d2 = detector_deltas(tol)
                m_int = int(math.floor(m_key1))
                g1 = gamma_bin(m_int, min(d1, 1.0 - 1e-15), budget.eps_dep1)
                g2 = gamma_bin(m_int, min(d2, 1.0 - 1e-15), budget.eps_dep2)
                den = 1.0 - d2 - g2
                e_ph1 = math.inf if den <= 0 else (m_ph / m_key1 + d1 + g1) / den
                diagnostics.update(delta1=d1, delta2=d2)
            else:
                e_ph1 = m_ph / m_key1
            l_key = 0.0 if not math.isfinite(e_ph1) else key_length_decoy(
                m_key1, e_ph1, lam_ec, budget)
            cand = KeyRateResult(
                protocol="decoy", l_key=l_key, rate=l_key / n_pulses,
                e_ph_upper=min(max(e_ph1, 0.0), 0.5) if math.isfinite(e_ph1) else 0.5,
                m_w_upper=mwb_ph.m_w_upper, m_ph_upper=m_ph, m_key1_lower=m_key1,
                lambda_ec=lam_ec, n_pulses=n_pulses, budget=budget, params=params,
                diagnostics=diagnostics)
        if best is None or cand.l_key > best.l_key:
            best = cand
    return best
