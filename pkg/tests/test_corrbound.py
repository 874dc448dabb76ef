import math

import numpy as np
import pytest

from qkdsec import corrbound as cb
from qkdsec import protocolkit as pk
from qkdsec.linops import HermitianOperator


def test_epsilon_prime():
    assert cb.epsilon_prime(0.0, 5) == 0.0
    assert cb.epsilon_prime(1e-4, 0) == pytest.approx(1e-4)
    assert cb.epsilon_prime(1e-5, 2) == pytest.approx(2.99997e-5, rel=1e-4)


# ---------------------------------------------------------------------------
# gram extrema


def test_gram_eps0_degenerate(rng):
    model = pk.bb84_model(delta_theta=0.063, p_z=0.7)
    g = pk.reference_gram(model)
    p = model.setting_probs
    m = rng.standard_normal((4, 4))
    w = HermitianOperator((m + m.T) / 2)
    rho0 = np.sqrt(np.outer(p, p)) * g.T
    direct = 0.3 * float(np.real(np.sum(w.mat * rho0.T)))
    lo, _ = cb.gram_extrema(g, p, w, 0.0, 0.3, "min")
    hi, _ = cb.gram_extrema(g, p, w, 0.0, 0.3, "max")
    assert lo == pytest.approx(direct, abs=1e-8)
    assert hi == pytest.approx(direct, abs=1e-8)


def test_gram_identity_observable():
    model = pk.bb84_model(delta_theta=0.05, p_z=0.6)
    g = pk.reference_gram(model)
    w = HermitianOperator(np.eye(4))
    for sense in ("min", "max"):
        val, _ = cb.gram_extrema(g, model.setting_probs, w, 0.01, 0.3, sense)
        assert val == pytest.approx(0.3, abs=1e-7)


def test_gram_dominates_randomized_completions(rng):
    eps_p = 0.01
    phi = [np.array([1.0, 0.0]), np.array([math.cos(0.6), math.sin(0.6)])]
    g = np.array([[1.0, phi[0] @ phi[1]], [phi[0] @ phi[1], 1.0]])
    probs = np.array([0.5, 0.5])
    wm = np.array([[1.0, 0.7], [0.7, -1.0]])
    w = HermitianOperator(wm)
    lo, lo_cert = cb.gram_extrema(g, probs, w, eps_p, 1.0, "min")
    hi, hi_cert = cb.gram_extrema(g, probs, w, eps_p, 1.0, "max")
    sq, _ = cb.gram_extrema(g, probs, w, eps_p, 1.0, "max", moment=2)
    assert lo_cert.margin >= -1e-9 and hi_cert.margin >= -1e-9
    assert hi >= lo
    for _ in range(10_000):
        e = rng.standard_normal((2, 6))
        e /= np.linalg.norm(e, axis=1, keepdims=True)
        psi = [np.concatenate([math.sqrt(1 - eps_p) * phi[i],
                               math.sqrt(eps_p) * e[i]]) for i in range(2)]
        rho = np.array([[math.sqrt(probs[i] * probs[j]) * (psi[j] @ psi[i])
                         for j in range(2)] for i in range(2)])
        v1 = float(np.sum(wm * rho.T))
        v2 = float(np.sum((wm @ wm) * rho.T))
        assert lo - 1e-9 <= v1 <= hi + 1e-9
        assert v2 <= sq + 1e-9


def test_gram_monotone_in_eps(rng):
    model = pk.bb84_model(delta_theta=0.063, p_z=0.7)
    g = pk.reference_gram(model)
    m = rng.standard_normal((4, 4))
    w = HermitianOperator((m + m.T) / 2)
    prev_width = -1.0
    for eps_p in (0.0, 1e-6, 1e-5, 1e-4):
        lo, _ = cb.gram_extrema(g, model.setting_probs, w, eps_p, 0.3, "min")
        hi, _ = cb.gram_extrema(g, model.setting_probs, w, eps_p, 0.3, "max")
        width = hi - lo
        assert width >= prev_width - 1e-9
        prev_width = width


# ---------------------------------------------------------------------------
# worst-case moment assembly


def test_mw_upper_variance_bracket():
    out = cb.mw_upper(0.0, 0.0, 0.04, -1.0, 1.0, 1e6, 0, 1e-6)
    assert out.variance_hi == pytest.approx(0.04)


def test_mw_upper_l0_formula():
    e_lo, e_hi, e2 = 0.01, 0.02, 0.03
    n = 1e6
    out = cb.mw_upper(e_lo, e_hi, e2, -1.0, 1.0, n, 0, 1e-6)
    from qkdsec.concbounds import bernstein_delta
    v = e2 - (max(0.0, e_lo) + min(0.0, e_hi)) ** 2
    c = max(1.0 - e_lo, e_hi + 1.0)
    want = n * (e_hi + bernstein_delta(int(n), v, c, 1e-6))
    assert out.m_w_upper == pytest.approx(want, rel=1e-12)


def test_mw_upper_single_dominates_guess(bb84_full_model):
    w = HermitianOperator(np.diag([0.5, -0.2, 0.1, 0.3]))
    g = pk.reference_gram(bb84_full_model)
    alpha, n = 0.2, 1e8
    out = cb.mw_upper_single(bb84_full_model, g, w, alpha, n, 1e-10)
    rho, _ = pk.marginal_guess(bb84_full_model,
                               cb.epsilon_prime(1e-5, 2))
    guess = alpha * n * w.expect(rho)
    assert out.m_w_upper >= guess
    assert math.isfinite(out.m_w_upper)


# ---------------------------------------------------------------------------
# intensity correlations


def make_icm(eps1=0.03, zeta=6.0, lag=2, p_high=0.5):
    return cb.IntensityCorrelationModel(avg_intensities=(0.5, 0.1, 1e-5),
                                        eps_ic1=eps1, zeta=zeta,
                                        corr_length=lag, p_high=p_high)


def test_actual_intensity_uncorrelated():
    icm = make_icm(eps1=0.0)
    assert cb.actual_intensity(icm, 0, (1, 2)) == pytest.approx(0.5)


def test_actual_intensity_zero_mean():
    icm = make_icm(eps1=0.03, lag=1, p_high=0.5)
    # expectation over the previous setting's distribution recovers the average
    avg = 0.5 * cb.actual_intensity(icm, 0, (0,)) + 0.5 * cb.actual_intensity(icm, 0, (1,))
    assert avg == pytest.approx(0.5, rel=1e-12)


def test_actual_intensity_closed_form():
    icm = make_icm(eps1=0.03, zeta=6.0, lag=2, p_high=0.5)
    # history (mu=0, mu=0): delta = eps1 * z(0) + eps1 e^-zeta * z(0)
    z0 = 1 - 0.5
    want = 0.5 * (1 + 0.03 * z0 + 0.03 * math.exp(-6.0) * z0)
    assert cb.actual_intensity(icm, 0, (0, 0)) == pytest.approx(want, rel=1e-12)


def test_invalid_correlation_model_rejected():
    with pytest.raises(ValueError):
        cb.IntensityCorrelationModel(avg_intensities=(0.5, 0.1), eps_ic1=2.5,
                                     zeta=0.1, corr_length=3, p_high=0.9)


def test_xi_trivial_cases():
    icm = make_icm(eps1=0.0)
    ctx = cb.enumerate_contexts(icm)[0]
    xi = cb.xi_intensity_matrix(icm, ctx)
    assert np.allclose(xi, 1.0)
    icm2 = make_icm(eps1=0.03)
    for ctx in cb.enumerate_contexts(icm2)[:5]:
        xi = cb.xi_intensity_matrix(icm2, ctx)
        assert np.allclose(np.diag(xi), 1.0)
        assert (xi <= 1.0 + 1e-15).all()


def test_xi_adjacent_lag_hand_eval():
    icm = cb.IntensityCorrelationModel(avg_intensities=(0.5, 0.1, 1e-5),
                                       eps_ic1=0.03, zeta=6.0, corr_length=1,
                                       p_high=0.5)
    ctx = cb.Context(future=(0,), past_z=())
    # lag 1: intensities Ibar_0 (1 + eps1 z(mu_i)) under the two current settings
    i0 = 0.5 * (1 + 0.03 * icm.z(0))
    i1 = 0.5 * (1 + 0.03 * icm.z(1))
    want = math.exp(-0.5 * (math.sqrt(i0) - math.sqrt(i1)) ** 2)
    assert cb.xi_coefficients(icm, ctx, 0, 1) == pytest.approx(want, rel=1e-12)


def test_context_enumeration_counts():
    assert len(cb.enumerate_contexts(make_icm(lag=0))) == 1
    icm1 = cb.IntensityCorrelationModel(avg_intensities=(0.5, 0.1, 1e-5),
                                        eps_ic1=0.03, zeta=6.0, corr_length=1,
                                        p_high=0.5)
    # exact reduction: 3 future intensities x 2 past z classes
    assert len(cb.enumerate_contexts(icm1)) == 6
    assert len(cb.enumerate_contexts(icm1, mode="full")) == 9
    assert len(cb.enumerate_contexts(make_icm(lag=2))) == 36


def test_context_overflow_guard():
    icm = cb.IntensityCorrelationModel(avg_intensities=(0.5, 0.1, 1e-5),
                                       eps_ic1=1e-3, zeta=6.0, corr_length=7,
                                       p_high=0.5)
    with pytest.raises(cb.ContextOverflow):
        cb.enumerate_contexts(icm)


# ---------------------------------------------------------------------------
# bound consistency


def test_decoy_bound_reduces_to_single_block():
    """With n_cut = 0, setting-independent photon statistics and no
    intensity correlations, the decoy bound equals the flat bound built on
    the same observable."""
    model = pk.decoy_model(delta_theta=0.05, epsilon=1e-4, corr_length=0,
                           p_z=0.6, intensities=(0.5, 0.25, 0.125),
                           intensity_probs=(0.5, 0.3, 0.2), n_cut=0,
                           vacuum_convention=False)
    icm = cb.IntensityCorrelationModel(avg_intensities=model.intensities,
                                       eps_ic1=0.0, zeta=6.0, corr_length=0,
                                       p_high=0.5)
    rng = np.random.default_rng(5)
    m = rng.standard_normal((12, 12))
    w0 = HermitianOperator((m + m.T) / 2)

    class FakeW:
        blocks = [w0]
        inf_values = np.zeros(12)
        omega_min = min(0.0, float(np.linalg.eigvalsh(w0.mat)[0]))
        omega_max = max(0.0, float(np.linalg.eigvalsh(w0.mat)[-1]))

    alpha, n = 0.3, 1e8
    out = cb.mw_upper_decoy(model, icm, FakeW(), alpha, n, 1e-10)
    # flat equivalent: weights p_i * p_{0|i}; the tail carries the rest at
    # lambda_inf = 0
    photon = pk.pair_photon_probs(model)
    weights = model.setting_probs * photon[0]
    g = pk.reference_gram(model, n_photon=0)
    eps_p = cb.epsilon_prime(model.epsilon, 0)
    lo, _ = cb.gram_extrema(g, weights, w0, eps_p, alpha, "min")
    hi, _ = cb.gram_extrema(g, weights, w0, eps_p, alpha, "max")
    sq, _ = cb.gram_extrema(g, weights, w0, eps_p, alpha, "max", moment=2)
    ref = cb.mw_upper(lo, hi, sq, FakeW.omega_min, FakeW.omega_max, n, 0, 1e-10)
    assert out.m_w_upper == pytest.approx(ref.m_w_upper, rel=1e-6)
