import math

import numpy as np
import pytest

from qkdsec import channelsim as cs
from qkdsec import corrbound as cb
from qkdsec import finitekey as fk
from qkdsec import protocolkit as pk
from qkdsec.concbounds import gamma_bin, kato_tilde_ab


# ---------------------------------------------------------------------------
# budgets


def test_budget_identity_exact():
    for kind in ("bb84", "mdi", "decoy"):
        b = fk.budget_preset(kind)
        assert 2 * math.sqrt(b.eps_pro) + b.eps_pa == pytest.approx(b.eps_sec, rel=1e-12)


def test_budget_assembly_accounting():
    b = fk.budget_preset("bb84")
    # 3/6 + 1/6 + 1/6 + 1/12 + 1/12 = 1
    assert b.assembled("bb84", mismatch=True) == pytest.approx(b.eps_pro, rel=1e-12)
    m = fk.budget_preset("mdi")
    assert m.assembled("mdi", mismatch=False) == pytest.approx(m.eps_pro, rel=1e-12)
    d = fk.budget_preset("decoy")
    # two estimation protocols at (3+1)/10 each plus the two mismatch terms
    assert d.assembled("decoy", mismatch=True) == pytest.approx(d.eps_pro, rel=1e-12)
    for kind, mis in (("bb84", True), ("mdi", False), ("decoy", True)):
        fk.budget_preset(kind).check_assembly(kind, mis)


def test_budget_invalid_identity_rejected():
    with pytest.raises(ValueError):
        fk.EpsilonBudget(eps_sec=1e-10, eps_pa=1e-11, eps_ev=1e-10,
                         eps_pro=1e-22, eps_pk=1e-23, eps_pb=1e-23, eps_ps=1e-23)


# ---------------------------------------------------------------------------
# detector mismatch


def test_detector_deltas_zero_tolerances():
    t = fk.DetectorTolerances(eta_det=0.7, d_det=1e-6)
    assert fk.detector_deltas(t) == (0.0, 0.0)
    assert not t.mismatch_enabled


def test_detector_deltas_eta_only_reduction():
    t = fk.DetectorTolerances(eta_det=0.7, d_det=0.0, delta_eta=0.05, delta_dc=0.0)
    r = (1 - 0.05) / (1 + 0.05)
    d1, d2 = fk.detector_deltas(t)
    assert d1 == pytest.approx(4 * (1 - math.sqrt(r)))
    assert d2 == pytest.approx(1 - r)


def test_detector_deltas_paper_point():
    t = fk.DetectorTolerances(eta_det=0.73, d_det=1e-6, delta_eta=0.05, delta_dc=0.05)
    d1, d2 = fk.detector_deltas(t)
    assert 0 < d1 < 0.25 and 0 < d2 < 0.12
    assert math.isfinite(d1) and math.isfinite(d2)


# ---------------------------------------------------------------------------
# bound pieces


def test_mph_upper_zero_multipliers_reduction():
    n, eps_pk = 1e8, 1e-20
    # all eta = 0 and W = 0: the bound is the pure inverted-Kato prefactor form
    got = fk.mph_upper(np.zeros(3), np.zeros(3), 0.0, 0.5, n, eps_pk, 0.0)
    pt = kato_tilde_ab(int(n), 0.0, eps_pk, "upper")
    want = n / (math.sqrt(n) - 2 * pt.a) * (pt.b - pt.a)
    assert got == pytest.approx(want, rel=1e-12)


def test_mph_upper_alpha_to_one_kills_w_term():
    n, eps_pk = 1e8, 1e-20
    with_w = fk.mph_upper(np.zeros(1), np.zeros(1), 1e6, 1.0 - 1e-12, n, eps_pk, 0.0)
    without = fk.mph_upper(np.zeros(1), np.zeros(1), 0.0, 1.0 - 1e-12, n, eps_pk, 0.0)
    # the W term is suppressed by (1-alpha)/alpha ~ 1e-12
    assert with_w == pytest.approx(without, rel=1e-6)
    far = fk.mph_upper(np.zeros(1), np.zeros(1), 1e6, 0.5, n, eps_pk, 0.0)
    assert far > without * 1.5


def test_mph_mismatch_gamma_inflation():
    m_key = 1000.0
    # deltas zero: only the two gamma_bin(M, 0) = 1/M corrections act
    out = fk.mph_mismatch(100.0, m_key, 0.0, 0.0, 1e-5, 1e-5)
    g = gamma_bin(1000, 0.0, 1e-5)
    want = m_key * ((100.0 / m_key + g) / (1 - g))
    assert out == pytest.approx(want, rel=1e-12)
    assert out > 100.0


def test_mph_mismatch_denominator_clamp():
    out = fk.mph_mismatch(10.0, 1000.0, 0.1, 0.999, 1e-5, 1e-5)
    assert out == math.inf


def test_nph_upper_reductions():
    assert fk.nph_upper(123.0, 1000.0, 0.0, 1e-5) == 123.0
    # eps_pS = 1 makes the sampling correction vanish
    out = fk.nph_upper(100.0, 1000.0, 500.0, 1.0)
    assert out == pytest.approx(100.0 * 1.5)


def test_key_length_clamps():
    budget = fk.budget_preset("bb84")
    assert fk.key_length_bb84(1e6, 0.6, 0.0, budget) == 0.0
    l = fk.key_length_bb84(1e6, 0.0, 0.0, budget)
    want = 1e6 - 2 * math.log2(1 / (2 * budget.eps_pa)) - math.log2(2 / budget.eps_ev)
    assert l == pytest.approx(want)


# ---------------------------------------------------------------------------
# pipelines


@pytest.fixture(scope="module")
def bb84_point():
    budget = fk.budget_preset("bb84")
    model = pk.bb84_model(delta_theta=0.063, epsilon=1e-5, corr_length=2, p_z=0.9)
    ch = cs.ChannelParams(distance_km=50.0, eta_det=0.73, p_dark=1e-6)
    tol = fk.DetectorTolerances(eta_det=0.73, d_det=1e-6, delta_eta=0.05, delta_dc=0.05)
    opt = fk.PipelineOptions(gamma_w=30.0, alpha=0.3)
    return fk.bb84_keyrate(model, ch, 1e10, budget, tol, opt)


def test_bb84_pipeline_positive(bb84_point):
    assert bb84_point.rate > 1e-3
    assert 0.0 < bb84_point.e_ph_upper < 0.5
    assert bb84_point.lambda_ec > 0.0


def test_bb84_monotone_in_epsilon():
    budget = fk.budget_preset("bb84")
    ch = cs.ChannelParams(distance_km=50.0, eta_det=0.73, p_dark=1e-6)
    opt = fk.PipelineOptions(gamma_w=30.0, alpha=0.3)
    rates = []
    for eps in (0.0, 1e-6, 1e-5):
        model = pk.bb84_model(delta_theta=0.063, epsilon=eps, corr_length=2, p_z=0.9)
        rates.append(fk.bb84_keyrate(model, ch, 1e10, budget, None, opt).rate)
    assert rates[0] >= rates[1] >= rates[2]


def test_bb84_monotone_in_mismatch():
    budget = fk.budget_preset("bb84")
    model = pk.bb84_model(delta_theta=0.063, epsilon=1e-5, corr_length=2, p_z=0.9)
    ch = cs.ChannelParams(distance_km=50.0, eta_det=0.73, p_dark=1e-6)
    opt = fk.PipelineOptions(gamma_w=30.0, alpha=0.3)
    rates = []
    for dd in (0.0, 0.02, 0.05):
        tol = fk.DetectorTolerances(eta_det=0.73, d_det=1e-6, delta_eta=dd, delta_dc=dd)
        rates.append(fk.bb84_keyrate(model, ch, 1e10, budget, tol, opt).rate)
    assert rates[0] > rates[1] > rates[2]


def test_lambda_ec_zero_at_zero_qber():
    budget = fk.budget_preset("bb84")
    model = pk.bb84_model(delta_theta=0.0, epsilon=0.0, corr_length=0, p_z=0.7)
    ch = cs.ChannelParams(distance_km=20.0, eta_det=0.73, p_dark=0.0)
    res = fk.bb84_keyrate(model, ch, 1e10, budget, None,
                          fk.PipelineOptions(gamma_w=5.0, alpha=0.3))
    assert res.lambda_ec < 1e-12    # QBER is zero up to float noise
    assert res.rate > 0


def test_mdi_pipeline_runs():
    budget = fk.budget_preset("mdi")
    model = pk.mdi_model(mu=0.05, epsilon=1e-7, corr_length=0, p_z=0.8,
                         p_key_given_z=0.7)
    ch = cs.ChannelParams(distance_km=10.0, eta_det=0.73, p_dark=1e-8)
    res = fk.mdi_keyrate(model, ch, 1e10, budget,
                         fk.PipelineOptions(gamma_w=30.0, alpha=0.3))
    assert res.rate > 0
    assert res.protocol == "mdi"


def test_decoy_pipeline_runs(decoy_full_model):
    budget = fk.budget_preset("decoy")
    icm = cb.IntensityCorrelationModel(avg_intensities=decoy_full_model.intensities,
                                       eps_ic1=0.03, zeta=6.0, corr_length=2,
                                       p_high=0.7)
    ch = cs.ChannelParams(distance_km=30.0, eta_det=0.73, p_dark=1e-6)
    tol = fk.DetectorTolerances(eta_det=0.73, d_det=1e-6, delta_eta=0.05, delta_dc=0.05)
    res = fk.decoy_keyrate(decoy_full_model, icm, ch, 1e11, budget, tol,
                           fk.PipelineOptions(gamma_w=30.0, alpha=0.3))
    assert res.rate > 0
    assert res.m_key1_lower > 0
    assert res.m_ph_upper > 0
    assert res.m_key1_lower < res.diagnostics["m_key"]
