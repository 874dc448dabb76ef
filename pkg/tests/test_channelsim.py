import math

import numpy as np
import pytest

from qkdsec import channelsim as cs
from qkdsec import protocolkit as pk


def table_rows_normalized(table, keys_fn):
    for key_head in keys_fn:
        total = sum(table[key_head + (b,)] for b in ("0", "1", "perp"))
        assert total == pytest.approx(1.0, abs=1e-12)


def test_bb84_rows_normalize(bb84_full_model, channel_50km):
    table = cs.bb84_expected_stats(channel_50km, bb84_full_model)
    table_rows_normalized(table, [(i, basis) for i in range(4) for basis in "ZX"])


def test_bb84_perfect_channel():
    model = pk.bb84_model(delta_theta=0.0, p_z=0.5)
    ch = cs.ChannelParams(distance_km=0.0, eta_det=1.0, p_dark=0.0)
    t = cs.bb84_expected_stats(ch, model)
    assert t[(0, "Z", "0")] == pytest.approx(1.0)
    assert t[(0, "Z", "1")] == pytest.approx(0.0)
    assert t[(1, "Z", "0")] == pytest.approx(0.0)


def test_bb84_total_loss():
    model = pk.bb84_model(delta_theta=0.0, p_z=0.5)
    ch = cs.ChannelParams(distance_km=5000.0, eta_det=0.5, p_dark=0.0)
    t = cs.bb84_expected_stats(ch, model)
    assert t[(2, "X", "perp")] == pytest.approx(1.0, abs=1e-20)


def test_bb84_x_error_geometry():
    dt = 0.063
    model = pk.bb84_model(delta_theta=dt, p_z=0.5)
    ch = cs.ChannelParams(distance_km=0.0, eta_det=0.5, p_dark=1e-6)
    t = cs.bb84_expected_stats(ch, model)
    kappa = 1 + dt / math.pi
    # X error on the i=2 state follows the shifted-angle geometry
    want = 0.5 * math.sin(kappa * math.pi / 4 - math.pi / 4) ** 2
    got = t[(2, "X", "1")]
    assert got == pytest.approx(want, rel=1e-2, abs=2e-6)


def test_decoy_dark_only_limit(decoy_full_model):
    ch = cs.ChannelParams(distance_km=0.0, eta_det=1.0, p_dark=0.0)
    model = pk.decoy_model(delta_theta=0.0, p_z=0.5, intensities=(1e-9, 1e-10, 1e-11),
                           intensity_probs=(0.5, 0.3, 0.2), n_cut=2)
    t = cs.decoy_expected_stats(ch, model)
    assert t[(0, 0, "Z", "perp")] == pytest.approx(1.0, abs=1e-6)
    assert t[(0, 0, "Z", "0")] == pytest.approx(0.0, abs=1e-6)


def test_decoy_paper_point_formulas():
    dt, ibar, eta_det, p_d = 0.063, 0.5, 0.73, 1e-6
    model = pk.decoy_model(delta_theta=dt, p_z=0.5, intensities=(ibar, 0.1, 1e-5),
                           intensity_probs=(0.6, 0.3, 0.1), n_cut=2)
    ch = cs.ChannelParams(distance_km=30.0, eta_det=eta_det, p_dark=p_d)
    t = cs.decoy_expected_stats(ch, model)
    eta = eta_det * 10 ** (-0.2 * 30 / 10)
    kappa = 1 + dt / math.pi
    for a in range(4):
        c2 = math.cos(kappa * pk.THETA_IDEAL[a]) ** 2
        a_term = (1 - p_d) * math.exp(-eta * ibar * c2)
        b_term = (1 - p_d) * math.exp(-eta * ibar * (1 - c2))
        assert t[(a, 0, "Z", "perp")] == pytest.approx(a_term * b_term, rel=1e-12)
        assert t[(a, 0, "Z", "0")] == pytest.approx((1 - a_term) * (1 + b_term) / 2, rel=1e-12)
        assert t[(a, 0, "Z", "1")] == pytest.approx((1 - b_term) * (1 + a_term) / 2, rel=1e-12)


def test_decoy_rows_normalize(decoy_full_model, channel_50km):
    t = cs.decoy_expected_stats(channel_50km, decoy_full_model)
    table_rows_normalized(t, [(a, mu, basis) for a, mu in decoy_full_model.pairs
                              for basis in "ZX"])


def test_single_photon_postselected_limit():
    # decoy table at tiny intensity, conditioned on detection, approaches the
    # single-photon table (documented approximation)
    dt = 0.063
    bb = pk.bb84_model(delta_theta=dt, p_z=0.5)
    dm = pk.decoy_model(delta_theta=dt, p_z=0.5, intensities=(1e-3, 1e-4, 1e-5),
                        intensity_probs=(0.5, 0.3, 0.2), n_cut=2)
    ch = cs.ChannelParams(distance_km=0.0, eta_det=0.9, p_dark=0.0)
    tb = cs.bb84_expected_stats(ch, bb)
    td = cs.decoy_expected_stats(ch, dm)
    for a in range(4):
        det_b = tb[(a, "X", "0")] + tb[(a, "X", "1")]
        det_d = td[(a, 0, "X", "0")] + td[(a, 0, "X", "1")]
        r_b = tb[(a, "X", "1")] / det_b
        r_d = td[(a, 0, "X", "1")] / det_d
        assert r_b == pytest.approx(r_d, abs=1e-3)


def test_mdi_interference_null():
    model = pk.mdi_model(mu=0.05, p_z=0.6, p_key_given_z=0.5)
    ch = cs.ChannelParams(distance_km=20.0, eta_det=0.73, p_dark=0.0)
    t = cs.mdi_expected_stats(ch, model)
    assert t[(0, 0, "d")] == pytest.approx(0.0, abs=1e-15)
    assert t[(1, 1, "d")] == pytest.approx(0.0, abs=1e-15)
    assert t[(0, 1, "c")] == pytest.approx(0.0, abs=1e-15)


def test_mdi_vacuum_row():
    model = pk.mdi_model(mu=0.05, p_z=0.6, p_key_given_z=0.5)
    ch = cs.ChannelParams(distance_km=20.0, eta_det=0.73, p_dark=0.0)
    t = cs.mdi_expected_stats(ch, model)
    assert t[(2, 2, "none")] == pytest.approx(1.0)


def test_mdi_gain_closed_form():
    mu, d = 0.05, 20.0
    model = pk.mdi_model(mu=mu, p_z=0.6, p_key_given_z=0.5)
    ch = cs.ChannelParams(distance_km=d, eta_det=0.73, p_dark=0.0)
    t = cs.mdi_expected_stats(ch, model)
    eta_half = 10 ** (-0.2 * (d / 2) / 10)
    n_plus = (2 * math.sqrt(mu * eta_half)) ** 2 / 2
    want = 1 - math.exp(-0.73 * n_plus)
    assert t[(0, 0, "c")] == pytest.approx(want, rel=1e-12)


def test_expected_observables_zero_coeffs(bb84_full_model, channel_50km):
    table = cs.bb84_expected_stats(channel_50km, bb84_full_model)
    empty = pk.TestCoefficientSet(label="none", coeffs={}, x_min=0.0, x_max=1.0)
    q = cs.q_values(bb84_full_model, table, [empty])
    assert q[0] == 0.0


def test_expected_observables_alpha_zero(bb84_full_model, channel_50km):
    table = cs.bb84_expected_stats(channel_50km, bb84_full_model)
    csets = pk.coefficient_sets(bb84_full_model)
    st0 = cs.expected_observables(bb84_full_model, table, csets, 1e8, 0.0)
    assert st0.m_key == pytest.approx(st0.n_key)
    assert st0.s_key == 0.0
    assert np.allclose(st0.m_q, 1e8 * st0.q)


def test_expected_nkey_product(bb84_full_model, channel_50km):
    table = cs.bb84_expected_stats(channel_50km, bb84_full_model)
    csets = pk.coefficient_sets(bb84_full_model)
    st = cs.expected_observables(bb84_full_model, table, csets, 1e10, 0.1)
    p_det = sum(0.5 * (table[(i, "Z", "0")] + table[(i, "Z", "1")]) for i in (0, 1))
    want = 1e10 * 0.9 * 0.9 * p_det
    assert st.n_key == pytest.approx(want, rel=1e-12)


def test_decoy_dark_count_continuity():
    p_d = 1e-3
    model = pk.decoy_model(delta_theta=0.0, p_z=0.5, intensities=(1e-9, 1e-10, 1e-11),
                           intensity_probs=(0.5, 0.3, 0.2), n_cut=2)
    ch = cs.ChannelParams(distance_km=0.0, eta_det=1.0, p_dark=p_d)
    t = cs.decoy_expected_stats(ch, model)
    assert t[(0, 0, "Z", "perp")] == pytest.approx((1 - p_d) ** 2, abs=1e-6)
    assert t[(0, 0, "Z", "0")] == pytest.approx(p_d * (2 - p_d) / 2, abs=1e-6)
