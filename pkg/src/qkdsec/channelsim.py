"""Deterministic expected statistics over a lossy, noiseless fiber.

These tables play two roles: they supply the unconfirmed guesses entering
the dual objectives, and (in the deterministic evaluation mode) they stand
in for the observed counts of a protocol run.  Guesses never affect
soundness, only tightness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .protocolkit import THETA_IDEAL, ProtocolModel, TestCoefficientSet


@dataclass(frozen=True)
class ChannelParams:
    """Fiber channel with threshold detectors."""

    distance_km: float
    alpha_db_per_km: float = 0.2
    eta_det: float = 1.0
    p_dark: float = 0.0
    mdi_node_fraction: float = 0.5   # position of the untrusted node

    def __post_init__(self):
        if self.distance_km < 0 or not (0 < self.eta_det <= 1) or not (0 <= self.p_dark < 1):
            raise ValueError("invalid channel parameters")

    @property
    def transmittance(self) -> float:
        return self.eta_det * 10.0 ** (-self.alpha_db_per_km * self.distance_km / 10.0)

    def half_transmittance(self, side: str) -> float:
        frac = self.mdi_node_fraction if side == "alice" else 1.0 - self.mdi_node_fraction
        return 10.0 ** (-self.alpha_db_per_km * self.distance_km * frac / 10.0)


def _single_photon_clicks(eta: float, p_d: float, cos2: float):
    """Outcome probabilities for one photon routed cos^2/sin^2 between two
    threshold detectors; double clicks are split half/half."""
    sin2 = 1.0 - cos2
    only0 = eta * cos2 * (1 - p_d) + (1 - eta) * p_d * (1 - p_d)
    only1 = eta * sin2 * (1 - p_d) + (1 - eta) * p_d * (1 - p_d)
    both = eta * p_d + (1 - eta) * p_d * p_d
    none = (1 - eta) * (1 - p_d) ** 2
    return only0 + both / 2, only1 + both / 2, none


def bb84_expected_stats(params: ChannelParams, model: ProtocolModel) -> dict:
    """p_{b|i,beta} for the single-photon protocol; keys (i, basis, b)."""
    eta, p_d = params.transmittance, params.p_dark
    kappa = 1.0 + model.delta_theta / math.pi
    table = {}
    for i, theta in enumerate(THETA_IDEAL):
        for basis, shift in (("Z", 0.0), ("X", math.pi / 4)):
            c2 = math.cos(kappa * theta - shift) ** 2
            p0, p1, pp = _single_photon_clicks(eta, p_d, c2)
            table[(i, basis, "0")] = p0
            table[(i, basis, "1")] = p1
            table[(i, basis, "perp")] = pp
    return table


def decoy_expected_stats(params: ChannelParams, model: ProtocolModel) -> dict:
    """p_{b|a,mu,beta} for phase-randomized coherent pulses.

    Threshold-detector click pattern for a pulse of average intensity I:
    p_perp = (1-p_d)^2 e^{-eta I}, and with A = (1-p_d) e^{-eta I cos^2},
    B = (1-p_d) e^{-eta I sin^2}, the double-click-split outcome rates are
    p_0 = (1-A)(1+B)/2 and p_1 = (1-B)(1+A)/2.  X-basis statistics follow
    by shifting the encoding angle by pi/4.
    """
    eta, p_d = params.transmittance, params.p_dark
    kappa = 1.0 + model.delta_theta / math.pi
    table = {}
    for a, mu in model.pairs:
        intensity = model.intensities[mu]
        theta = THETA_IDEAL[a]
        for basis, shift in (("Z", 0.0), ("X", math.pi / 4)):
            c2 = math.cos(kappa * theta - shift) ** 2
            a_term = (1 - p_d) * math.exp(-eta * intensity * c2)
            b_term = (1 - p_d) * math.exp(-eta * intensity * (1.0 - c2))
            table[(a, mu, basis, "perp")] = a_term * b_term
            table[(a, mu, basis, "0")] = (1 - a_term) * (1 + b_term) / 2
            table[(a, mu, basis, "1")] = (1 - b_term) * (1 + a_term) / 2
    return table


def mdi_expected_stats(params: ChannelParams, model: ProtocolModel,
                       mu: float | None = None) -> dict:
    """p_{Omega|a,b} for coherent pulses interfering on a 50:50 splitter.

    Signed amplitudes (+, -, 0 for vacuum) from each side reach the node
    through their half channels; the output-port intensities are
    (alpha_A +/- alpha_B)^2 / 2 and the announcements are exclusive clicks
    of the two threshold detectors.
    """
    mu = model.mu if mu is None else mu
    p_d = params.p_dark
    eta_det = params.eta_det
    ha = params.half_transmittance("alice")
    hb = params.half_transmittance("bob")
    sign = {0: 1.0, 1: -1.0, 2: 0.0}
    table = {}
    for a in range(3):
        for b in range(3):
            amp_a = sign[a] * math.sqrt(mu * ha)
            amp_b = sign[b] * math.sqrt(mu * hb)
            n_plus = (amp_a + amp_b) ** 2 / 2.0
            n_minus = (amp_a - amp_b) ** 2 / 2.0
            p_plus = 1 - (1 - p_d) * math.exp(-eta_det * n_plus)
            p_minus = 1 - (1 - p_d) * math.exp(-eta_det * n_minus)
            table[(a, b, "c")] = p_plus * (1 - p_minus)
            table[(a, b, "d")] = p_minus * (1 - p_plus)
            table[(a, b, "none")] = 1 - table[(a, b, "c")] - table[(a, b, "d")]
    return table


@dataclass(frozen=True)
class ExpectedStats:
    """Channel-model expectations used as guesses and as the deterministic
    stand-ins for observed counts."""

    q: np.ndarray            # q_l = sum_c c p_i^A p_{b|...}
    m_q: np.ndarray          # expected M_{Q,l} = N (1-alpha) q_l
    n_key: float
    m_key: float
    s_key: float
    qber_z: float


def q_values(model: ProtocolModel, table: dict, csets: list) -> np.ndarray:
    """q_l = sum over the set's support of c * p_setting * p_outcome."""
    out = np.zeros(len(csets))
    if model.kind == "mdi":
        for l, cs in enumerate(csets):
            for (a, b, om), c in cs.coeffs.items():
                p_ab = model.setting_probs[a + 3 * b]
                out[l] += c * p_ab * table[(a, b, om)]
        return out
    if model.kind == "bb84":
        for l, cs in enumerate(csets):
            for (i, basis, b), c in cs.coeffs.items():
                out[l] += c * model.setting_probs[i] * table[(i, basis, b)]
        return out
    idx = {pair: k for k, pair in enumerate(model.pairs)}
    for l, cs in enumerate(csets):
        for (a, mu, basis, b), c in cs.coeffs.items():
            out[l] += c * model.setting_probs[idx[(a, mu)]] * table[(a, mu, basis, b)]
    return out


def expected_observables(model: ProtocolModel, table: dict, csets: list,
                         n_pulses: float, alpha: float) -> ExpectedStats:
    q = q_values(model, table, csets)
    m_q = n_pulses * (1.0 - alpha) * q
    if model.kind == "bb84":
        p_zb = model.basis_probs["Z"]
        det = sum(model.setting_probs[i] * (table[(i, "Z", "0")] + table[(i, "Z", "1")])
                  for i in (0, 1))
        err = (model.setting_probs[0] * table[(0, "Z", "1")]
               + model.setting_probs[1] * table[(1, "Z", "0")])
        n_key = n_pulses * p_zb * det
        qber = err / det if det > 0 else 0.0
    elif model.kind == "decoy":
        p_zb = model.basis_probs["Z"]
        idx = {pair: k for k, pair in enumerate(model.pairs)}
        det = err = 0.0
        for a in (0, 1):
            if (a, 0) not in idx:
                continue
            p_i = model.setting_probs[idx[(a, 0)]]
            det += p_i * (table[(a, 0, "Z", "0")] + table[(a, 0, "Z", "1")])
            err += p_i * table[(a, 0, "Z", str(1 - a))]
        n_key = n_pulses * p_zb * det
        qber = err / det if det > 0 else 0.0
    elif model.kind == "mdi":
        det = err = 0.0
        for a in (0, 1):
            for b in (0, 1):
                p_ab = model.setting_probs[a + 3 * b]
                p_c, p_dd = table[(a, b, "c")], table[(a, b, "d")]
                det += p_ab * (p_c + p_dd)
                err += p_ab * (p_c if a != b else p_dd)
        n_key = n_pulses * model.p_key_given_z * det
        qber = err / det if det > 0 else 0.0
    else:
        raise ValueError(model.kind)
    m_key = (1.0 - alpha) * n_key
    return ExpectedStats(q=q, m_q=m_q, n_key=n_key, m_key=m_key,
                         s_key=alpha * n_key, qber_z=qber)
