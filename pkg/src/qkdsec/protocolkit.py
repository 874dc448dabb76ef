"""Protocol instantiations: reference states, POVMs, test operators.

Builds the three supported protocols (single-photon BB84, coherent-state
MDI, decoy-state BB84) as concrete operator families:

* reference states encoding the characterized state-preparation flaw
  (encoding angles theta_i -> (1 + dtheta/pi) theta_i),
* Bob's basis-independent-detection POVM on the {perp, 0, 1} carrier,
* the T-operator family spanning Hermitian space on the setting register,
* phase-error / detection target operators,
* test-statistic coefficient sets and the marginal-state guesses.

All builders are pure; a ProtocolModel is immutable after construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .linops import HermitianOperator, Ket, tensor, identity

THETA_IDEAL = (0.0, math.pi / 2, math.pi / 4, 3 * math.pi / 4)

MDI_FOCK_DIM_CAP = 20
MDI_FOCK_TAIL = 1e-12


class TruncationError(ValueError):
    """Fock-space truncation leaves too much tail mass."""


@dataclass(frozen=True)
class TestCoefficientSet:
    """One linear combination of test statistics.

    ``coeffs`` maps an outcome tuple to its real coefficient:
    (i, basis, b) for BB84, (a, mu, basis, b) for decoy, (a, b, omega) for
    MDI.  ``x_min``/``x_max`` bracket every attainable value of the
    associated estimation-protocol random variable (0 is always attainable:
    the selecting outcome may simply not occur).
    """

    label: str
    coeffs: dict
    x_min: float
    x_max: float

    def __post_init__(self):
        if not (self.x_min <= 0.0 <= self.x_max):
            raise ValueError("RV range must contain 0")


@dataclass(frozen=True)
class GuessSet:
    """Unconfirmed guesses entering the dual objective."""

    q_gs: np.ndarray                      # one entry per coefficient set
    t_gs: np.ndarray                      # flat (bb84/mdi) or (n_cut+1, n_T) (decoy)
    t_inf_gs: np.ndarray | None = None    # decoy tail block, per setting


@dataclass(frozen=True)
class ProtocolModel:
    kind: str                       # "bb84" | "mdi" | "decoy"
    epsilon: float
    corr_length: int
    delta_theta: float
    setting_probs: np.ndarray       # p_i^A over the (joint) setting register
    basis_probs: dict               # Bob's basis selection; {} for MDI
    reference_states: tuple         # protocol dependent, see builders
    bob_povm: dict | None = None    # {(basis, outcome): HermitianOperator}
    # MDI
    p_key_given_z: float = 0.0
    mu: float = 0.0
    # decoy
    intensities: tuple = ()         # average intensities, strictly descending
    intensity_probs: tuple = ()
    n_cut: int = 0
    pairs: tuple = ()               # (a, mu) in setting-index order
    drop_cross_terms: bool = False  # optionally thin the decoy T family

    def __post_init__(self):
        p = np.asarray(self.setting_probs, dtype=float)
        if abs(p.sum() - 1.0) > 1e-12 or (p < 0).any():
            raise ValueError("setting probabilities must be nonnegative and sum to 1")
        p.setflags(write=False)
        object.__setattr__(self, "setting_probs", p)
        if not (0.0 <= self.epsilon <= 1.0):
            raise ValueError("epsilon in [0, 1] required")
        if self.corr_length < 0:
            raise ValueError("correlation length must be >= 0")
        if self.basis_probs:
            if abs(sum(self.basis_probs.values()) - 1.0) > 1e-12:
                raise ValueError("basis probabilities must sum to 1")
        if self.intensities:
            ints = np.asarray(self.intensities, dtype=float)
            if (ints <= 0).any() or (np.diff(ints) >= 0).any():
                raise ValueError("intensities must be positive and strictly descending")
        if self.bob_povm is not None:
            _check_povm(self.bob_povm)

    @property
    def n_settings(self) -> int:
        return self.setting_probs.size


def _check_povm(povm: dict) -> None:
    bases = sorted({basis for basis, _ in povm})
    for basis in bases:
        elems = [op for (b, _), op in povm.items() if b == basis]
        total = elems[0]
        for op in elems[1:]:
            total = total + op
        if np.abs(total.mat - np.eye(total.dim)).max() > 1e-10:
            raise ValueError(f"POVM for basis {basis} does not sum to identity")


# ---------------------------------------------------------------------------
# states


def bb84_states(delta_theta: float) -> list[Ket]:
    """Reference qubits cos(k_i t_i)|0> + sin(k_i t_i)|1>, k_i = 1 + dtheta/pi."""
    if abs(delta_theta) >= math.pi:
        raise ValueError("need |delta_theta| < pi")
    kappa = 1.0 + delta_theta / math.pi
    return [Ket(np.array([math.cos(kappa * t), math.sin(kappa * t)])) for t in THETA_IDEAL]


def bb84_povm() -> dict:
    """Bob's POVM on the {perp, 0, 1} carrier; the perp element is shared
    between bases (basis-independent detection efficiency)."""
    perp = HermitianOperator(np.diag([1.0, 0.0, 0.0]))
    z0 = HermitianOperator(np.diag([0.0, 1.0, 0.0]))
    z1 = HermitianOperator(np.diag([0.0, 0.0, 1.0]))
    h = np.zeros((3, 3))
    h[1:, 1:] = 0.5
    x0 = HermitianOperator(h)
    hm = np.zeros((3, 3))
    hm[1:, 1:] = [[0.5, -0.5], [-0.5, 0.5]]
    x1 = HermitianOperator(hm)
    return {("Z", "perp"): perp, ("Z", "0"): z0, ("Z", "1"): z1,
            ("X", "perp"): perp, ("X", "0"): x0, ("X", "1"): x1}


def mdi_states(mu: float) -> list[Ket]:
    """|sqrt(mu)>, |-sqrt(mu)>, |vac> in a truncated Fock space.

    The truncation dimension is the smallest with coherent-state tail mass
    below 1e-12, capped at 20 (mean photon numbers of interest are <= 1).
    """
    if mu < 0:
        raise ValueError("mu >= 0 required")
    amp = math.sqrt(mu)
    for dim in range(2, MDI_FOCK_DIM_CAP + 1):
        logs = np.array([-mu / 2 + n * math.log(amp) - 0.5 * math.lgamma(n + 1)
                         if amp > 0 else (0.0 if n == 0 else -np.inf)
                         for n in range(dim)])
        coeff = np.exp(logs)
        tail = 1.0 - float(np.sum(coeff ** 2))
        if tail < MDI_FOCK_TAIL:
            break
    else:
        raise TruncationError(f"tail mass {tail:.2e} at dim {MDI_FOCK_DIM_CAP} for mu={mu}")
    plus = coeff / np.linalg.norm(coeff)
    minus = plus * np.array([(-1.0) ** n for n in range(plus.size)])
    vac = np.zeros(plus.size)
    vac[0] = 1.0
    return [Ket(plus), Ket(minus), Ket(vac)]


def decoy_fock_states(delta_theta: float, n_cut: int) -> dict:
    """Photon-number reference states |phi_{n,a}> for n <= n_cut.

    Two-mode (H, V) expansion with binomial amplitudes
    sqrt(C(n,k)) cos(k_a t_a)^k sin(k_a t_a)^(n-k); the n = 0 state is the
    vacuum for every encoding a.
    """
    if n_cut < 0:
        raise ValueError("n_cut >= 0 required")
    kappa = 1.0 + delta_theta / math.pi
    states = {}
    for n in range(n_cut + 1):
        for a, t in enumerate(THETA_IDEAL):
            c, s = math.cos(kappa * t), math.sin(kappa * t)
            amp = np.array([math.sqrt(math.comb(n, k)) * c ** k * s ** (n - k)
                            for k in range(n + 1)])
            states[(n, a)] = Ket(amp) if n > 0 else Ket(np.array([1.0]))
    return states


# ---------------------------------------------------------------------------
# operator families


def t_family(n_settings: int) -> list[HermitianOperator]:
    """Characterization operators spanning Hermitian space on the register.

    Ordered by pairs (i, j):  i >= j gives (|i><j| + |j><i|)/2, i < j gives
    (|i><j| - |j><i|)/(2i).  The diagonal members sum to the identity, which
    downstream feasibility restoration relies on.
    """
    if n_settings < 2:
        raise ValueError("need at least two settings")
    ops = []
    for i in range(n_settings):
        for j in range(n_settings):
            m = np.zeros((n_settings, n_settings), dtype=complex)
            if i >= j:
                m[i, j] += 0.5
                m[j, i] += 0.5
            else:
                m[i, j] += 1.0 / 2j
                m[j, i] -= 1.0 / 2j
            ops.append(HermitianOperator(m))
    return ops


def t_family_pairs(n_settings: int) -> list[tuple]:
    return [(i, j) for i in range(n_settings) for j in range(n_settings)]


def t_family_diag_indices(n_settings: int) -> list[int]:
    """Positions of the |i><i| members inside t_family ordering."""
    return [i * n_settings + i for i in range(n_settings)]


def _basis_ket(dim: int, idx: int) -> np.ndarray:
    v = np.zeros(dim)
    v[idx] = 1.0
    return v


def _proj(vec: np.ndarray) -> HermitianOperator:
    return HermitianOperator(np.outer(vec, vec.conj()))


def phase_error_operator(model: ProtocolModel) -> HermitianOperator:
    """Target operator whose expectation is the per-round phase-error
    probability (single-photon sector operator for decoy)."""
    if model.kind == "bb84":
        p_zb = model.basis_probs["Z"]
        na = model.n_settings
        x0 = (_basis_ket(na, 0) + _basis_ket(na, 1)) / math.sqrt(2)
        x1 = (_basis_ket(na, 0) - _basis_ket(na, 1)) / math.sqrt(2)
        g0, g1 = model.bob_povm[("X", "0")], model.bob_povm[("X", "1")]
        return p_zb * (tensor(_proj(x0), g1) + tensor(_proj(x1), g0))
    if model.kind == "mdi":
        pk = model.p_key_given_z
        e9 = np.zeros((9, 9))
        for sa, sb in ((1, 1), (-1, -1)):  # |0_X 0_X| and |1_X 1_X| patterns
            vec = np.zeros(9)
            for a in (0, 1):
                for b in (0, 1):
                    vec[a + 3 * b] = (sa ** a) * (sb ** b) / 2.0
            e9 += pk * np.outer(vec, vec)
        # announcement register is the fast index: {constructive, destructive, none}
        return HermitianOperator(np.kron(e9, np.diag([1.0, 1.0, 0.0])))
    if model.kind == "decoy":
        p_zb = model.basis_probs["Z"]
        np_ = model.n_settings
        idx = {pair: k for k, pair in enumerate(model.pairs)}
        i00, i10 = idx[(0, 0)], idx[(1, 0)]
        x0 = (_basis_ket(np_, i00) + _basis_ket(np_, i10)) / math.sqrt(2)
        x1 = (_basis_ket(np_, i00) - _basis_ket(np_, i10)) / math.sqrt(2)
        g0, g1 = model.bob_povm[("X", "0")], model.bob_povm[("X", "1")]
        return p_zb * (tensor(_proj(x0), g1) + tensor(_proj(x1), g0))
    raise ValueError(f"unknown protocol kind {model.kind}")


def detection_operator(model: ProtocolModel) -> HermitianOperator:
    """Decoy single-photon sifted-key detection operator D^(1)."""
    if model.kind != "decoy":
        raise ValueError("detection operator is decoy-specific")
    p_zb = model.basis_probs["Z"]
    idx = {pair: k for k, pair in enumerate(model.pairs)}
    det = model.bob_povm[("Z", "0")] + model.bob_povm[("Z", "1")]
    out = None
    for a in (0, 1):
        term = p_zb * tensor(_proj(_basis_ket(model.n_settings, idx[(a, 0)])), det)
        out = term if out is None else out + term
    return out


# ---------------------------------------------------------------------------
# coefficient sets


def coefficient_sets(model: ProtocolModel, target: str = "phase") -> list[TestCoefficientSet]:
    """Indicator coefficient sets for the requested dual target.

    BB84: one set per detected X-basis event (i', b'), eight in total.
    MDI: one per (a, b, omega) with omega in {constructive, destructive}.
    Decoy phase target: one per (a', mu', b') X-basis detection over the
    existing setting pairs; decoy detection target: one basis-Z gain set
    per intensity.
    """
    if model.kind == "bb84":
        p_x = model.basis_probs["X"]
        sets = []
        for bp in (0, 1):
            for ip in range(4):
                sets.append(TestCoefficientSet(
                    label=f"x_i{ip}_b{bp}",
                    coeffs={(ip, "X", str(bp)): 1.0},
                    x_min=0.0, x_max=1.0 / p_x))
        return sets
    if model.kind == "mdi":
        p_test_key = 1.0 - model.p_key_given_z
        sets = []
        for om in ("c", "d"):
            for a in range(3):
                for b in range(3):
                    p_test = p_test_key if (a < 2 and b < 2) else 1.0
                    sets.append(TestCoefficientSet(
                        label=f"mdi_a{a}_b{b}_{om}",
                        coeffs={(a, b, om): 1.0},
                        x_min=0.0, x_max=1.0 / p_test))
        return sets
    if model.kind == "decoy":
        if target == "phase":
            p_x = model.basis_probs["X"]
            sets = []
            existing = set(model.pairs)
            for bp in (0, 1):
                for mu in range(len(model.intensities)):
                    for a in range(4):
                        if (a, mu) not in existing:
                            continue
                        sets.append(TestCoefficientSet(
                            label=f"x_a{a}_mu{mu}_b{bp}",
                            coeffs={(a, mu, "X", str(bp)): 1.0},
                            x_min=0.0, x_max=1.0 / p_x))
            return sets
        if target == "detection":
            p_z = model.basis_probs["Z"]
            sets = []
            for mu in range(len(model.intensities)):
                coeffs = {(a, mu, "Z", str(b)): 1.0
                          for a in (0, 1) for b in (0, 1) if (a, mu) in set(model.pairs)}
                sets.append(TestCoefficientSet(
                    label=f"zgain_mu{mu}", coeffs=coeffs,
                    x_min=0.0, x_max=1.0 / p_z))
            return sets
    raise ValueError(f"no coefficient sets for kind={model.kind}, target={target}")


def q_operator(model: ProtocolModel, cset: TestCoefficientSet) -> HermitianOperator:
    """Assemble Q^l = sum_c c * |setting><setting| (x) Gamma^{b|beta}."""
    if model.kind == "mdi":
        m = np.zeros((27, 27))
        omega_idx = {"c": 0, "d": 1, "none": 2}
        for (a, b, om), c in cset.coeffs.items():
            i = a + 3 * b
            m[3 * i + omega_idx[om], 3 * i + omega_idx[om]] += c
        return HermitianOperator(m)
    na = model.n_settings
    dim_b = 3
    m = np.zeros((na * dim_b, na * dim_b))
    if model.kind == "bb84":
        for (i, basis, b), c in cset.coeffs.items():
            gam = model.bob_povm[(basis, b)].mat
            m[i * dim_b:(i + 1) * dim_b, i * dim_b:(i + 1) * dim_b] += c * gam.real
    else:  # decoy: key on pairs
        idx = {pair: k for k, pair in enumerate(model.pairs)}
        for (a, mu, basis, b), c in cset.coeffs.items():
            i = idx[(a, mu)]
            gam = model.bob_povm[(basis, b)].mat
            m[i * dim_b:(i + 1) * dim_b, i * dim_b:(i + 1) * dim_b] += c * gam.real
    return HermitianOperator(m)


def validate_key_consistency(model: ProtocolModel, cset: TestCoefficientSet) -> bool:
    """Coefficients on sifted-key tuples must coincide (bit values of key
    rounds are never revealed)."""
    if model.kind == "bb84":
        vals = {cset.coeffs.get((i, "Z", str(b)), 0.0) for i in (0, 1) for b in (0, 1)}
        return len(vals) == 1
    if model.kind == "decoy":
        vals = {cset.coeffs.get((a, 0, "Z", str(b)), 0.0) for a in (0, 1) for b in (0, 1)}
        return len(vals) == 1
    return True  # MDI sets never reference key-tagged outcomes


# ---------------------------------------------------------------------------
# reference grams and guesses


def poisson_pmf(n: int, intensity: float) -> float:
    if intensity <= 0:
        return 1.0 if n == 0 else 0.0
    return math.exp(-intensity + n * math.log(intensity) - math.lgamma(n + 1))


def reference_gram(model: ProtocolModel, n_photon: int | None = None) -> np.ndarray:
    """Gram matrix <phi_i|phi_j> on the (joint) setting register."""
    if model.kind == "bb84":
        amps = np.array([k.amplitudes for k in model.reference_states])
        return (amps.conj() @ amps.T).real
    if model.kind == "mdi":
        amps = np.array([k.amplitudes for k in model.reference_states])
        g1 = (amps.conj() @ amps.T).real
        g = np.zeros((9, 9))
        for a in range(3):
            for b in range(3):
                for ap in range(3):
                    for bp in range(3):
                        g[a + 3 * b, ap + 3 * bp] = g1[a, ap] * g1[b, bp]
        return g
    if model.kind == "decoy":
        if n_photon is None:
            raise ValueError("decoy gram needs the photon number")
        n_p = model.n_settings
        g = np.zeros((n_p, n_p))
        for i, (a, _) in enumerate(model.pairs):
            for j, (ap, _) in enumerate(model.pairs):
                ki = model.reference_states[(n_photon, a)]
                kj = model.reference_states[(n_photon, ap)]
                g[i, j] = ki.inner(kj).real
        return g
    raise ValueError(model.kind)


def pair_photon_probs(model: ProtocolModel) -> np.ndarray:
    """p_{n|i} table, shape (n_cut+1, n_settings), Poissonian in the
    average intensity of the pair's mu setting."""
    out = np.zeros((model.n_cut + 1, model.n_settings))
    for i, (_, mu) in enumerate(model.pairs):
        for n in range(model.n_cut + 1):
            out[n, i] = poisson_pmf(n, model.intensities[mu])
    return out


def marginal_guess(model: ProtocolModel, eps_prime: float):
    """Pessimistic marginal-state guess and the derived t guesses.

    Entry (i, j) of the guessed marginal is sqrt(p_i p_j) [(1 - eps') G_ji
    + eps' delta_ij] under the convention that unknown side-channel states
    are mutually orthogonal and orthogonal to every reference state.  That
    convention only shapes the (unconfirmed) guesses, never any bound.

    Returns (rho, t_gs) for bb84/mdi and (rho_per_n, (t_gs_per_n, t_inf))
    for decoy, where the decoy per-photon blocks carry weights
    p_i * p_{n|i} (their traces sum to the <= n_cut mass).
    """
    if not (0.0 <= eps_prime <= 1.0):
        raise ValueError("eps_prime in [0, 1] required")
    p = model.setting_probs
    if model.kind in ("bb84", "mdi"):
        g = reference_gram(model)
        rho = np.sqrt(np.outer(p, p)) * ((1.0 - eps_prime) * g.T + eps_prime * np.eye(p.size))
        t_ops = t_family(p.size)
        t_gs = np.array([op.expect(HermitianOperator(rho)) for op in t_ops])
        return HermitianOperator(rho), t_gs
    # decoy: one block per photon number plus the tail occupation
    photon = pair_photon_probs(model)
    t_ops = t_family(model.n_settings)
    rhos, t_blocks = [], []
    for n in range(model.n_cut + 1):
        g = reference_gram(model, n_photon=n)
        w = p * photon[n]
        rho = np.sqrt(np.outer(w, w)) * ((1.0 - eps_prime) * g.T + eps_prime * np.eye(p.size))
        rhos.append(HermitianOperator(rho))
        t_blocks.append([op.expect(rhos[-1]) for op in t_ops])
    t_inf = p * (1.0 - photon.sum(axis=0))
    return rhos, (np.array(t_blocks), t_inf)


# ---------------------------------------------------------------------------
# model builders


def bb84_model(delta_theta: float = 0.0, epsilon: float = 0.0, corr_length: int = 0,
               p_z: float = 0.5, p_z_bob: float | None = None) -> ProtocolModel:
    if not (0.0 < p_z < 1.0):
        raise ValueError("p_z in (0, 1) required")
    p_zb = p_z if p_z_bob is None else p_z_bob
    probs = np.array([p_z / 2, p_z / 2, (1 - p_z) / 2, (1 - p_z) / 2])
    return ProtocolModel(
        kind="bb84", epsilon=epsilon, corr_length=corr_length, delta_theta=delta_theta,
        setting_probs=probs, basis_probs={"Z": p_zb, "X": 1.0 - p_zb},
        reference_states=tuple(bb84_states(delta_theta)), bob_povm=bb84_povm())


def mdi_model(mu: float, epsilon: float = 0.0, corr_length: int = 0,
              p_z: float = 0.5, p_key_given_z: float = 0.5) -> ProtocolModel:
    if not (0.0 < p_z < 1.0) or not (0.0 <= p_key_given_z <= 1.0):
        raise ValueError("p_z in (0,1) and p_key_given_z in [0,1] required")
    single = np.array([p_z / 2, p_z / 2, 1.0 - p_z])
    joint = np.array([single[a] * single[b] for b in range(3) for a in range(3)])
    # joint index i = a + 3b matches the enumeration order above
    return ProtocolModel(
        kind="mdi", epsilon=epsilon, corr_length=corr_length, delta_theta=0.0,
        setting_probs=joint, basis_probs={},
        reference_states=tuple(mdi_states(mu)),
        p_key_given_z=p_key_given_z, mu=mu)


def decoy_pairs(n_intensities: int, vacuum_convention: bool) -> tuple:
    """Setting pairs (a, mu).  Under the vacuum convention the weakest
    intensity is always sent with a = 0, shrinking the grid."""
    pairs = []
    for mu in range(n_intensities):
        a_range = (0,) if (vacuum_convention and mu == n_intensities - 1) else (0, 1, 2, 3)
        for a in a_range:
            pairs.append((a, mu))
    return tuple(pairs)


def decoy_model(delta_theta: float = 0.0, epsilon: float = 0.0, corr_length: int = 0,
                p_z: float = 0.5, intensities: tuple = (0.5, 0.1, 1e-5),
                intensity_probs: tuple = (0.6, 0.3, 0.1), n_cut: int = 3,
                vacuum_convention: bool = False,
                drop_cross_terms: bool = False) -> ProtocolModel:
    if len(intensities) != len(intensity_probs):
        raise ValueError("one probability per intensity required")
    if abs(sum(intensity_probs) - 1.0) > 1e-12:
        raise ValueError("intensity probabilities must sum to 1")
    pairs = decoy_pairs(len(intensities), vacuum_convention)
    p_a = {0: p_z / 2, 1: p_z / 2, 2: (1 - p_z) / 2, 3: (1 - p_z) / 2}
    probs = []
    n_int = len(intensities)
    for a, mu in pairs:
        if vacuum_convention and mu == n_int - 1:
            probs.append(intensity_probs[mu])
        else:
            probs.append(p_a[a] * intensity_probs[mu])
    return ProtocolModel(
        kind="decoy", epsilon=epsilon, corr_length=corr_length, delta_theta=delta_theta,
        setting_probs=np.array(probs), basis_probs={"Z": p_z, "X": 1.0 - p_z},
        reference_states=decoy_fock_states(delta_theta, n_cut), bob_povm=bb84_povm(),
        intensities=tuple(intensities), intensity_probs=tuple(intensity_probs),
        n_cut=n_cut, pairs=pairs, drop_cross_terms=drop_cross_terms)
