"""Probabilistic upper bounds on the tagged local-measurement sum M_W.

For a correlated, partially characterized source the per-round expectation
of the fictitious W outcome is not known, but it is confined by a Gram-
matrix SDP: the inner products of the reference states are pinned while
the side-channel completions (cross and orthogonal blocks) are free inside
a PSD constraint.  Worst-case first and second moments feed a Bernstein
deviation over the (L+1)-decimated round sets, giving the a-priori bound
Pr[M_W >= M_W_upper] <= eps_pB.

The decoy variant additionally conditions on the intensity-setting context
around the round, with the reference Gram entries damped by the photon-
number overlap factors xi of the correlated intensities, and takes the
worst context.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .concbounds import bernstein_delta
from .linops import HermitianOperator
from .protocolkit import ProtocolModel, poisson_pmf
from .sdpcore import LmiBlock, solve_lmi

MAX_CONTEXTS = 4096


class ContextOverflow(ValueError):
    """Context enumeration exceeds the configured cap."""


def epsilon_prime(epsilon: float, corr_length: int) -> float:
    """Effective side-channel weight 1 - (1-eps)^(L+1): the L rounds whose
    emission may depend on the current setting are absorbed into the
    fidelity budget."""
    if not (0.0 <= epsilon <= 1.0) or corr_length < 0:
        raise ValueError("need epsilon in [0,1] and L >= 0")
    return 1.0 - (1.0 - epsilon) ** (corr_length + 1)


# ---------------------------------------------------------------------------
# Gram-matrix extremum SDP


@dataclass(frozen=True)
class GramVariable:
    """Structure of the Gram optimization variable: fixed reference block,
    free cross block with zero diagonal, free orthogonal block with unit
    diagonal; the assembled 2n x 2n matrix must be PSD."""

    g_phi: np.ndarray

    @property
    def n_settings(self) -> int:
        return self.g_phi.shape[0]


@dataclass(frozen=True)
class GramCertificate:
    """Dual-feasible point certifying a one-sided Gram extremum."""

    y: np.ndarray
    bound: float          # includes the alpha factor
    margin: float         # min eigenvalue of the dual slack
    gap: float            # recorded duality-gap inflation


def _gram_pin_index(n: int):
    """Pinned positions of the 2n x 2n symmetric Gram variable: the full
    reference block, the cross-block diagonal, the orthogonal diagonal."""
    pos = [(i, j) for i in range(n) for j in range(i, n)]
    pos += [(i, n + i) for i in range(n)]
    pos += [(n + i, n + i) for i in range(n)]
    return pos


def _gram_pin_ops(n: int):
    pos = _gram_pin_index(n)
    dim = 2 * n
    ops = np.zeros((len(pos), dim, dim))
    diag_mask = np.zeros(len(pos), dtype=bool)
    for p_idx, (i, j) in enumerate(pos):
        ops[p_idx, i, j] += 1.0
        ops[p_idx, j, i] += 1.0
        if i == j:
            ops[p_idx, i, j] -= 1.0
            diag_mask[p_idx] = True
    return pos, ops, diag_mask


def gram_pin_values(n: int, g_phi: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Pin right-hand sides in the weight-absorbed frame G' = D G D with
    D = diag(sqrt(w)): reference entries sqrt(w_i w_j) g_phi[i,j], zero
    cross diagonal, orthogonal diagonal w_i.  Off-diagonal pins count twice
    (both symmetric positions)."""
    root = np.sqrt(np.asarray(weights, dtype=float))
    b = []
    for i in range(n):
        for j in range(i, n):
            v = root[i] * root[j] * float(np.real(g_phi[i, j]))
            b.append(v if i == j else 2.0 * v)
    b += [0.0] * n
    b += list(np.asarray(weights, dtype=float))
    return np.array(b)


def _gram_cost(w_mat: np.ndarray, eps_prime: float) -> np.ndarray:
    """Symmetric C with Tr{W rho} = <C, G'> for the weight-absorbed map
    rho_ij = (1-e) G'_phi[j,i] + e G'_perp[j,i]
             + sqrt(e(1-e)) (G'_c[i,j] + G'_c[j,i])."""
    n = w_mat.shape[0]
    v = np.real(w_mat)
    c = np.zeros((2 * n, 2 * n))
    c[:n, :n] = (1.0 - eps_prime) * v
    c[n:, n:] = eps_prime * v
    cross = math.sqrt(max(eps_prime * (1.0 - eps_prime), 0.0)) * v
    c[:n, n:] = cross
    c[n:, :n] = cross.T
    return c


RANK_TOL = 1e-12    # relative eigenvalue cutoff when factoring the reference Gram


def _face_factor(g_phi: np.ndarray):
    """Factor the reference Gram as A A^T (A: n x s, full column rank).

    Any PSD completion of a fixed block A A^T has its cross block of the
    form A M with [[I_s, M], [M^T, G_perp]] >= 0, which is the face the
    optimization actually lives on; working there restores a strictly
    feasible interior point (the identity) that the raw entry-pinned
    formulation lacks whenever the reference states are linearly dependent.
    Returns (A, residual) where residual bounds the truncation error.
    """
    g = (np.asarray(g_phi, dtype=float) + np.asarray(g_phi, dtype=float).T) / 2.0
    vals, vecs = np.linalg.eigh(g)
    top = float(vals.max())
    keep = vals > RANK_TOL * max(top, 1e-300)
    a = vecs[:, keep] * np.sqrt(np.maximum(vals[keep], 0.0))
    residual = float(np.abs(g - a @ a.T).max())
    return a, residual


def _face_pins(a_fac: np.ndarray):
    """Pin operators of the face variable [[X, M], [M^T, G_perp]]:
    X = I_s, (A M)_ii = 0, diag(G_perp) = 1.  Returns (ops, b, ident)
    where ident indexes the pins whose operators sum to the identity."""
    n, s_rank = a_fac.shape
    dim = s_rank + n
    ops, b, ident = [], [], []
    for i in range(s_rank):
        for j in range(i, s_rank):
            op = np.zeros((dim, dim))
            op[i, j] += 1.0
            op[j, i] += 1.0
            if i == j:
                op[i, j] -= 1.0
                ident.append(len(ops))
            ops.append(op)
            b.append(1.0 if i == j else 0.0)
    for i in range(n):
        op = np.zeros((dim, dim))
        op[:s_rank, s_rank + i] += a_fac[i, :]
        op[s_rank + i, :s_rank] += a_fac[i, :]
        ops.append(op)
        b.append(0.0)
    for i in range(n):
        op = np.zeros((dim, dim))
        op[s_rank + i, s_rank + i] = 1.0
        ident.append(len(ops))
        ops.append(op)
        b.append(1.0)
    return np.array(ops), np.array(b), np.array(ident)


def _face_cost(a_fac: np.ndarray, v: np.ndarray, eps_prime: float) -> np.ndarray:
    """Cost of the side-channel part:  eps' <V, G_perp>
    + 2 sqrt(eps'(1-eps')) <A^T V, M>."""
    n, s_rank = a_fac.shape
    dim = s_rank + n
    cross = math.sqrt(eps_prime * (1.0 - eps_prime))
    p_mat = a_fac.T @ v
    cost = np.zeros((dim, dim))
    cost[:s_rank, s_rank:] = cross * p_mat
    cost[s_rank:, :s_rank] = cross * p_mat.T
    cost[s_rank:, s_rank:] = eps_prime * v
    return cost


def _resid_pad(n: int, v: np.ndarray, eps_prime: float, resid: float) -> float:
    """Generous allowance for the rank-truncation residual of A A^T."""
    if resid <= 0.0:
        return 0.0
    vmax = float(np.abs(v).max())
    return 3.0 * n * vmax * (math.sqrt(eps_prime * resid) + resid)


def _face_solve(cost, ops, b, ident, sign, gap_tol, warm=None):
    """Dual-feasible multipliers for  min b.y  s.t.  sum y F - sign*cost >= 0."""
    m = b.size
    block = LmiBlock(a0=sign * cost, ops=ops, var_idx=np.arange(m),
                     tag="ineq", label="gramface")
    tau = float(np.abs(np.linalg.eigvalsh(cost)).max()) + 1.0
    y0 = np.zeros(m)
    y0[ident] = tau
    t0 = None
    if warm is not None and warm.size == m:
        yw = warm.copy()
        mval = block.min_slack_eig(yw)
        if mval < 1e-11:
            yw[ident] += (1e-11 - mval)
            mval = block.min_slack_eig(yw)
        if mval > 0:
            y0 = yw
            t0 = float(block.dim) / max(gap_tol * 256.0, 1e-14)
    y, info = solve_lmi(b, [block], y0, gap_tol=gap_tol, t0=t0)
    margin = block.min_slack_eig(y)
    if margin < 0.0:
        y = y.copy()
        y[ident] += (-margin + 1e-12)
        margin = block.min_slack_eig(y)
    return y, margin, info["gap"]


def _face_revalidate(y, cost, ops, ident, sign):
    """Reuse a multiplier vector on a perturbed face problem.

    The pin values (identity / zero / one) do not depend on the context,
    so a feasible y transfers with its objective value unchanged except
    for the identity shift needed to re-verify PSD-ness.
    """
    slack = np.tensordot(y, ops, axes=(0, 0)) - sign * cost
    mval = float(np.linalg.eigvalsh((slack + slack.T) / 2.0)[0])
    if mval >= 0.0:
        return 0.0, mval
    return -mval + 1e-12, 0.0


@dataclass(frozen=True)
class _FaceContext:
    """Assembled per-(context, photon-block) face problem pieces."""

    ops: np.ndarray
    b: np.ndarray
    ident: np.ndarray
    t_fix: dict        # moment -> exact pinned-part value
    costs: dict        # (sense, moment) -> cost matrix
    pads: dict         # moment -> rank-truncation allowance
    shape: tuple


class GramExtremizer:
    """One-sided bounds on alpha * opt Tr{W^moment rho(G)} over the Gram set.

    The optimization splits into the pinned reference part, evaluated
    exactly, and the side-channel part over the face variable
    [[X, M], [M^T, G_perp]] with X pinned to the identity, the cross-block
    diagonal (A M)_ii pinned to zero and the orthogonal diagonal pinned to
    one.  The bound is the exact part plus a certified dual-feasible bound
    on the side-channel part (which vanishes identically at eps' = 0).
    """

    def __init__(self, w: HermitianOperator, eps_prime: float, alpha: float,
                 sense: str, moment: int = 1, gap_tol: float = 1e-8):
        if not (0.0 < alpha <= 1.0):
            raise ValueError("alpha in (0, 1] required")
        if moment not in (1, 2):
            raise ValueError("moment must be 1 or 2")
        if sense not in ("max", "min"):
            raise ValueError("sense must be 'max' or 'min'")
        if np.abs(w.mat.imag).max() > 1e-12:
            raise NotImplementedError("gram extrema are wired for real protocol data")
        self.n = w.dim
        self.alpha = alpha
        self.eps_prime = eps_prime
        self.sense = sense
        self.sign = 1.0 if sense == "max" else -1.0
        self.gap_tol = gap_tol
        self.w_mat = np.real(w.mat) if moment == 1 else np.real(w.mat @ w.mat)
        self.cert: GramCertificate | None = None

    def solve(self, g_phi: np.ndarray, weights: np.ndarray,
              warm: np.ndarray | None = None) -> GramCertificate:
        weights = np.asarray(weights, dtype=float)
        v = self.w_mat * np.sqrt(np.outer(weights, weights))
        t_fix = float(np.sum(v * np.asarray(g_phi, dtype=float)))
        eps_p = self.eps_prime
        if eps_p == 0.0:
            bound = self.alpha * t_fix
            self.cert = GramCertificate(y=np.zeros(0), bound=bound,
                                        margin=math.inf, gap=0.0)
            return self.cert
        a_fac, resid = _face_factor(g_phi)
        ops, b, ident = _face_pins(a_fac)
        cost = _face_cost(a_fac, v, eps_p)
        y, margin, gap = _face_solve(cost, ops, b, ident, self.sign,
                                     self.gap_tol, warm=warm)
        side = float(b @ y) + _resid_pad(self.n, v, eps_p, resid)
        bound = self.alpha * ((1.0 - eps_p) * t_fix + self.sign * side)
        self.cert = GramCertificate(y=y, bound=bound, margin=margin, gap=gap)
        return self.cert


def gram_extrema(g_phi: np.ndarray, probs: np.ndarray, w: HermitianOperator,
                 eps_prime: float, alpha: float, sense: str = "max",
                 moment: int = 1, gap_tol: float = 1e-8,
                 warm: np.ndarray | None = None):
    """Rigorous one-sided bound on alpha * opt Tr{W^moment rho(G)}.

    The side-channel part of the value comes from a dual-feasible point of
    the face SDP and is certified by eigendecomposition, so it over-covers
    (max) or under-covers (min) the true optimum regardless of solver
    accuracy.  Always feasible: the zero cross block with identity
    orthogonal block satisfies every constraint.
    """
    if np.abs(np.asarray(g_phi).imag).max() > 1e-12:
        raise NotImplementedError("gram extrema are wired for real protocol data")
    ex = GramExtremizer(w, eps_prime, alpha, sense, moment, gap_tol)
    cert = ex.solve(np.asarray(g_phi, dtype=float).real,
                    np.asarray(probs, dtype=float), warm=warm)
    return cert.bound, cert


# ---------------------------------------------------------------------------
# worst-case moment assembly


@dataclass(frozen=True)
class MwBound:
    """Probabilistic upper bound on the tagged local-measurement sum."""

    e_lo: float
    e_hi: float
    e2_hi: float
    variance_hi: float
    c_hi: float
    m_w_upper: float
    eps_pb: float
    context: tuple | None = None   # worst decoy context, if applicable


def mw_upper(e_lo: float, e_hi: float, e2_hi: float, omega_min: float,
             omega_max: float, n_pulses: float, corr_length: int,
             eps_pb: float) -> MwBound:
    """Assemble M_W_upper = (L+1) ceil(N/(L+1)) [E_hi + Delta_B].

    The variance proxy is E2_hi - [max(0, E_lo) + min(0, E_hi)]^2 and the
    Bernstein range is c = max(omega_max - E_lo, E_hi - omega_min); the
    deviation uses failure eps_pB/(L+1) per decimated round set.  The final
    bound is clamped at N * omega_max, which the sum can never exceed.
    """
    if not (0.0 < eps_pb < 1.0) or n_pulses < 1:
        raise ValueError("need eps_pb in (0,1) and N >= 1")
    v_hi = max(e2_hi - (max(0.0, e_lo) + min(0.0, e_hi)) ** 2, 0.0)
    c_hi = max(omega_max - e_lo, e_hi - omega_min)
    n_bar = math.ceil(n_pulses / (corr_length + 1))
    if c_hi <= 0.0:   # W = 0: the RV is identically zero
        m_up = 0.0
        delta = 0.0
    else:
        delta = bernstein_delta(n_bar, v_hi, c_hi, eps_pb / (corr_length + 1))
        m_up = (corr_length + 1) * n_bar * (e_hi + delta)
    m_up = min(m_up, n_pulses * omega_max)
    m_up = max(m_up, n_pulses * omega_min)
    return MwBound(e_lo=e_lo, e_hi=e_hi, e2_hi=e2_hi, variance_hi=v_hi,
                   c_hi=c_hi, m_w_upper=m_up, eps_pb=eps_pb)


def mw_upper_single(model: ProtocolModel, g_phi: np.ndarray, w: HermitianOperator,
                    alpha: float, n_pulses: float, eps_pb: float,
                    gap_tol: float = 1e-9) -> MwBound:
    """Worst-case moment bound for a flat (BB84/MDI) protocol."""
    eps_p = epsilon_prime(model.epsilon, model.corr_length)
    p = model.setting_probs
    e_lo, _ = gram_extrema(g_phi, p, w, eps_p, alpha, "min", 1, gap_tol)
    e_hi, _ = gram_extrema(g_phi, p, w, eps_p, alpha, "max", 1, gap_tol)
    e2_hi, _ = gram_extrema(g_phi, p, w, eps_p, alpha, "max", 2, gap_tol)
    es = np.linalg.eigvalsh(w.mat)
    omega_min = min(0.0, float(es[0]))
    omega_max = max(0.0, float(es[-1]))
    return mw_upper(e_lo, e_hi, e2_hi, omega_min, omega_max,
                    n_pulses, model.corr_length, eps_pb)


# ---------------------------------------------------------------------------
# intensity correlations (decoy sources)


@dataclass(frozen=True)
class IntensityCorrelationModel:
    """History-dependent intensity I_u = Ibar_mu (1 + delta(history)) with
    delta = sum_l eps_ic^1 e^{-zeta(l-1)} z(mu_{u-l}); z is +(1 - P0) after
    the highest intensity and -P0 otherwise, so it has zero mean and the
    average intensity is preserved."""

    avg_intensities: tuple
    eps_ic1: float
    zeta: float
    corr_length: int
    p_high: float              # total probability of the highest intensity

    def __post_init__(self):
        if self.eps_ic1 < 0 or self.zeta <= 0 or not (0 < self.p_high < 1):
            raise ValueError("invalid correlation model")
        worst = -self.p_high * sum(self.lag_weights)
        if worst < -1.0:
            raise ValueError(f"model allows negative intensities (delta={worst:.3g})")

    @property
    def lag_weights(self) -> tuple:
        return tuple(self.eps_ic1 * math.exp(-self.zeta * (l - 1))
                     for l in range(1, self.corr_length + 1))

    def z(self, mu: int) -> float:
        return (1.0 - self.p_high) if mu == 0 else -self.p_high

    @property
    def z_values(self) -> tuple:
        return (1.0 - self.p_high, -self.p_high)


def actual_intensity(icm: IntensityCorrelationModel, mu: int, history) -> float:
    """I_u for a concrete recent-settings history (most recent first)."""
    if len(history) > icm.corr_length:
        raise ValueError("history longer than the correlation length")
    delta = sum(w * icm.z(h) for w, h in zip(icm.lag_weights, history))
    if delta < -1.0:
        raise ValueError("negative intensity under this history")
    return icm.avg_intensities[mu] * (1.0 + delta)


@dataclass(frozen=True)
class Context:
    """One intensity-setting context: the L future settings (as intensity
    indices) and the L past settings reduced to their z values.  The past
    enters the bound only through z, so this reduction is exact."""

    future: tuple
    past_z: tuple


def enumerate_contexts(icm: IntensityCorrelationModel, mode: str = "reduced"):
    """All contexts for the decoy worst-case bound.

    "reduced": exact collapse to n_int^L * 2^L members (future settings
    keep their intensity index because it multiplies the xi exponent; past
    settings collapse onto z).  "full": the raw n_int^(2L) grid, useful for
    validating the reduction.
    """
    lag = icm.corr_length
    n_int = len(icm.avg_intensities)
    if lag == 0:
        return [Context(future=(), past_z=())]
    if mode == "reduced":
        count = (n_int * 2) ** lag
        if count > MAX_CONTEXTS:
            raise ContextOverflow(f"{count} contexts exceed cap {MAX_CONTEXTS}")
        return [Context(future=f, past_z=z)
                for f in itertools.product(range(n_int), repeat=lag)
                for z in itertools.product(icm.z_values, repeat=lag)]
    if mode == "full":
        count = n_int ** (2 * lag)
        if count > MAX_CONTEXTS:
            raise ContextOverflow(f"{count} contexts exceed cap {MAX_CONTEXTS}")
        return [Context(future=f, past_z=tuple(icm.z(m) for m in past))
                for f in itertools.product(range(n_int), repeat=lag)
                for past in itertools.product(range(n_int), repeat=lag)]
    raise ValueError(mode)


def context_intensity(icm: IntensityCorrelationModel, ctx: Context, mu: int) -> float:
    """Current-round intensity conditioned on the past part of a context."""
    delta = sum(w * z for w, z in zip(icm.lag_weights, ctx.past_z))
    return icm.avg_intensities[mu] * (1.0 + delta)


def xi_intensity_matrix(icm: IntensityCorrelationModel, ctx: Context) -> np.ndarray:
    """Pairwise overlap damping xi for counterfactual current settings.

    For Poissonian photon statistics the per-lag factor is
    exp(-(sqrt(I) - sqrt(I'))^2 / 2) with I, I' the intensities of round
    u+k under the two counterfactual settings at round u; entries are
    indexed by the two current intensity settings."""
    lag = icm.corr_length
    n_int = len(icm.avg_intensities)
    xi = np.ones((n_int, n_int))
    w = icm.lag_weights
    for k in range(1, lag + 1):
        # base delta of round u+k from every slot except the current round
        base = 0.0
        for l in range(1, lag + 1):
            if l < k:
                base += w[l - 1] * icm.z(ctx.future[k - l - 1])
            elif l > k:
                base += w[l - 1] * ctx.past_z[l - k - 1]
        ibar = icm.avg_intensities[ctx.future[k - 1]]
        for mi in range(n_int):
            for mj in range(n_int):
                if mi == mj:
                    continue
                ii = ibar * (1.0 + base + w[k - 1] * icm.z(mi))
                jj = ibar * (1.0 + base + w[k - 1] * icm.z(mj))
                xi[mi, mj] *= math.exp(-0.5 * (math.sqrt(max(ii, 0.0))
                                               - math.sqrt(max(jj, 0.0))) ** 2)
    return xi


def xi_coefficients(icm: IntensityCorrelationModel, ctx: Context,
                    mu_i: int, mu_j: int) -> float:
    return float(xi_intensity_matrix(icm, ctx)[mu_i, mu_j])


def _context_gram_inputs(model, icm, ctx, grams, mu_of):
    """Per-photon-block (damped gram, weights) plus tail occupations for
    one intensity-setting context."""
    n_p = model.n_settings
    p_a = model.setting_probs
    intens = [context_intensity(icm, ctx, mu) for mu in range(len(icm.avg_intensities))]
    p_n_i = np.array([[poisson_pmf(n, intens[mu_of[i]]) for i in range(n_p)]
                      for n in range(model.n_cut + 1)])
    xi_int = xi_intensity_matrix(icm, ctx)
    xi_pair = xi_int[np.ix_(mu_of, mu_of)]
    blocks = [(grams[n] * xi_pair, p_a * p_n_i[n]) for n in range(model.n_cut + 1)]
    t_inf = p_a * (1.0 - p_n_i.sum(axis=0))
    return blocks, t_inf


def _assemble_face_context(g_phi, weights, w1, w2, eps_p, n_p):
    """Pins, exact pinned-part values and costs for both moments."""
    v1 = w1 * np.sqrt(np.outer(weights, weights))
    v2 = w2 * np.sqrt(np.outer(weights, weights))
    a_fac, resid = _face_factor(g_phi)
    ops, b, ident = _face_pins(a_fac)
    g = np.asarray(g_phi, dtype=float)
    return _FaceContext(
        ops=ops, b=b, ident=ident,
        t_fix={1: float(np.sum(v1 * g)), 2: float(np.sum(v2 * g))},
        costs={(1.0, 1): _face_cost(a_fac, v1, eps_p),
               (-1.0, 1): _face_cost(a_fac, v1, eps_p),
               (1.0, 2): _face_cost(a_fac, v2, eps_p)},
        pads={1: _resid_pad(n_p, v1, eps_p, resid),
              2: _resid_pad(n_p, v2, eps_p, resid)},
        shape=ops.shape)


def mw_upper_decoy(model: ProtocolModel, icm: IntensityCorrelationModel,
                   w_obs, alpha: float, n_pulses: float, eps_pb: float,
                   context_mode: str = "reduced", gap_tol: float = 1e-8,
                   warm_cache: dict | None = None) -> MwBound:
    """Worst-context probabilistic bound on M_W for the decoy protocol.

    Per context and photon block the Gram extremum runs with the reference
    Gram damped by xi and the settings reweighted by the context-conditioned
    photon-number probabilities; the tail block contributes its multipliers
    exactly.  The face-pin values are context independent, so each extremum
    is solved once on a reference context and the multipliers are merely
    revalidated (one eigendecomposition plus an identity shift) on all the
    others; a full re-solve happens only if the face dimension changes.
    """
    lag = model.corr_length
    pairs = model.pairs
    n_p = model.n_settings
    mu_of = np.array([mu for _, mu in pairs])
    n_blocks = model.n_cut + 1
    grams = [np.array([[model.reference_states[(n, pairs[i][0])].inner(
        model.reference_states[(n, pairs[j][0])]).real
        for j in range(n_p)] for i in range(n_p)]) for n in range(n_blocks)]
    contexts = enumerate_contexts(icm, mode=context_mode)
    eps_p = epsilon_prime(model.epsilon, lag)
    omega_min, omega_max = w_obs.omega_min, w_obs.omega_max
    lam_inf = w_obs.inf_values
    n_bar = math.ceil(n_pulses / (lag + 1))
    cache = warm_cache if warm_cache is not None else {}
    roles = {"lo": (-1.0, 1), "hi": (1.0, 1), "sq": (1.0, 2)}
    w_sq = [HermitianOperator(np.real(w.mat @ w.mat)) for w in w_obs.blocks]

    best = None
    solved = {}
    for ci, ctx in enumerate(contexts):
        blocks, t_inf = _context_gram_inputs(model, icm, ctx, grams, mu_of)
        e_lo = alpha * float(lam_inf @ t_inf)
        e_hi = e_lo
        e2_hi = alpha * float((lam_inf ** 2) @ t_inf)
        for n in range(n_blocks):
            g_phi, weights = blocks[n]
            if eps_p == 0.0:
                v1 = np.real(w_obs.blocks[n].mat) * np.sqrt(np.outer(weights, weights))
                v2 = np.real(w_sq[n].mat) * np.sqrt(np.outer(weights, weights))
                t1 = float(np.sum(v1 * g_phi))
                e_lo += alpha * t1
                e_hi += alpha * t1
                e2_hi += alpha * float(np.sum(v2 * g_phi))
                continue
            fc = _assemble_face_context(g_phi, weights, np.real(w_obs.blocks[n].mat),
                                        np.real(w_sq[n].mat), eps_p, n_p)
            for role, (sign, mom) in roles.items():
                key = (role, n)
                entry = solved.get(key)
                if entry is not None and entry[0] == fc.shape:
                    shift, _ = _face_revalidate(entry[1], fc.costs[(sign, mom)],
                                                fc.ops, fc.ident, sign)
                    y = entry[1]
                    side = float(fc.b @ y) + shift * fc.b[fc.ident].sum()
                else:
                    y, _, _ = _face_solve(fc.costs[(sign, mom)], fc.ops, fc.b,
                                          fc.ident, sign, gap_tol,
                                          warm=cache.get(key))
                    solved[key] = (fc.shape, y)
                    cache[key] = y
                    side = float(fc.b @ y)
                side += fc.pads[mom]
                val = alpha * ((1.0 - eps_p) * fc.t_fix[mom] + sign * side)
                if role == "lo":
                    e_lo += val
                elif role == "hi":
                    e_hi += val
                else:
                    e2_hi += val
        v_hi = max(e2_hi - (max(0.0, e_lo) + min(0.0, e_hi)) ** 2, 0.0)
        c_hi = max(omega_max - e_lo, e_hi - omega_min)
        if c_hi <= 0.0:
            val = 0.0
        else:
            val = e_hi + bernstein_delta(n_bar, v_hi, c_hi, eps_pb / (lag + 1))
        if best is None or val > best[0]:
            best = (val, e_lo, e_hi, e2_hi, v_hi, c_hi, ctx)
    val, e_lo, e_hi, e2_hi, v_hi, c_hi, ctx = best
    m_up = (lag + 1) * n_bar * val
    m_up = min(m_up, n_pulses * omega_max)
    m_up = max(m_up, n_pulses * omega_min)
    return MwBound(e_lo=e_lo, e_hi=e_hi, e2_hi=e2_hi, variance_hi=v_hi,
                   c_hi=c_hi, m_w_upper=m_up, eps_pb=eps_pb,
                   context=(ctx.future, ctx.past_z))
