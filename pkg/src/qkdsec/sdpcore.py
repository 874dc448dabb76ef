"""Dual semidefinite programs with solver-independent certification.

The security argument never needs an *optimal* dual solution, only a
feasible one: any multiplier vector satisfying the operator inequality
target <= sum_l eta_l Q^l + sum_k lambda_k T^k (x) 1 yields a valid
phase-error bound.  This module therefore treats the numerical solver as
untrusted: every returned point is re-certified by an independent
eigendecomposition of the slack operators, and points that verify
negative are repaired by shifting the diagonal T multipliers (the
diagonal family sums to the identity on the setting register).

The solver itself is a damped-Newton log-det barrier method on the
multiplier variables, operating on real-symmetric blocks (complex
Hermitian data is handled through the standard [[Re, -Im], [Im, Re]]
embedding, but all shipped protocols are real).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular

from . import protocolkit as pk
from .linops import HermitianOperator, EigenSystem, eig_herm, real_embedding

FEAS_TOL = 1e-9          # verification threshold on the slack spectrum
RESTORE_PAD = 1e-10      # post-restoration target margin
DEFAULT_GAP_TOL = 1e-10  # barrier duality-gap target (absolute, objective units)
POLISH_GAP = 1e-9        # final deterministic centering level; lower sits at the
                         # float conditioning floor where routes stop agreeing
Q_GUESS_FLOOR = 1e-12    # keeps zero statistics from opening recession directions
ETA_BOX = 1e5            # box on the test-statistic multipliers


class SolverError(RuntimeError):
    """Barrier failed to produce a strictly feasible or converged point."""


class InfeasibleProblem(ValueError):
    """No strictly feasible multiplier vector exists for the given caps."""


@dataclass
class LmiBlock:
    """One PSD constraint  sum_i x[idx[i]] * ops[i] - a0 >= 0.

    ``diag=True`` marks a diagonal block (a bundle of scalar inequalities):
    then a0 has shape (d,) and ops has shape (m, d), and the solver uses
    closed-form gradient/Hessian contributions.
    """

    a0: np.ndarray
    ops: np.ndarray
    var_idx: np.ndarray
    tag: str = "ineq"               # "ineq" blocks carry soundness; "cap" blocks do not
    identity_vars: np.ndarray | None = None   # vars whose ops sum to I on this block
    label: str = ""
    diag: bool = False

    @property
    def dim(self) -> int:
        return self.a0.shape[0]

    def slack(self, x: np.ndarray) -> np.ndarray:
        if self.diag:
            return x[self.var_idx] @ self.ops - self.a0
        s = np.tensordot(x[self.var_idx], self.ops, axes=(0, 0)) - self.a0
        return (s + s.T) / 2.0

    def min_slack_eig(self, x: np.ndarray) -> float:
        s = self.slack(x)
        if self.diag:
            return float(s.min())
        return float(np.linalg.eigvalsh(s)[0])


@dataclass
class DualProblem:
    """A dual SDP in multiplier form, plus the bookkeeping needed to map
    solutions back onto protocol quantities.

    ``active`` masks the free multipliers.  For real-valued protocol data
    the purely imaginary T-family members can be fixed at zero without loss
    (conjugating any feasible point flips their sign at unchanged
    objective, so the optimum is symmetric), which keeps the solver on the
    real-symmetric path.
    """

    kind: str
    target: str                     # "phase" | "detection"
    c: np.ndarray                   # objective coefficients (the guesses)
    blocks: list
    n_q: int
    n_settings: int
    active: np.ndarray = None       # bool mask over the full multiplier vector
    n_t_blocks: int = 1             # decoy: n_cut + 1; otherwise 1
    n_inf: int = 0                  # decoy tail multipliers
    gamma_w: float | None = None
    var_names: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.active is None:
            self.active = np.ones(self.c.size, dtype=bool)

    @property
    def n_vars(self) -> int:
        return self.c.size

    @property
    def n_t(self) -> int:
        return self.n_settings * self.n_settings

    def eta_slice(self) -> slice:
        return slice(0, self.n_q)

    def lam_slice(self, t_block: int = 0) -> slice:
        start = self.n_q + t_block * self.n_t
        return slice(start, start + self.n_t)

    def inf_slice(self) -> slice:
        start = self.n_q + self.n_t_blocks * self.n_t
        return slice(start, start + self.n_inf)

    def operator_hash(self) -> str:
        h = hashlib.sha256()
        for b in self.blocks:
            h.update(np.ascontiguousarray(b.a0).tobytes())
            h.update(np.ascontiguousarray(b.ops).tobytes())
            h.update(np.ascontiguousarray(b.var_idx).tobytes())
        h.update(np.ascontiguousarray(self.c).tobytes())
        return h.hexdigest()


@dataclass
class DualCertificate:
    """Feasible multipliers plus machine-verifiable margins.

    ``feasibility_margin`` is the minimum slack eigenvalue over the
    soundness-carrying blocks, recomputed here by eigendecomposition and
    never trusted from solver internals.  ``restoration`` records the total
    identity shift that was needed to repair the point (0 for an interior
    solution).
    """

    x: np.ndarray
    objective: float
    feasibility_margin: float
    cap_margin: float | None
    gap: float
    restoration: float = 0.0
    meta: dict = field(default_factory=dict)

    def eta(self, problem: DualProblem) -> np.ndarray:
        return self.x[problem.eta_slice()]

    def lam(self, problem: DualProblem, t_block: int = 0) -> np.ndarray:
        return self.x[problem.lam_slice(t_block)]

    def lam_inf(self, problem: DualProblem) -> np.ndarray:
        return self.x[problem.inf_slice()]


# ---------------------------------------------------------------------------
# barrier solver


def _logdet_chol(s: np.ndarray):
    """Cholesky factor and log-det, or (None, inf) if not PD."""
    try:
        ll = np.linalg.cholesky(s)
    except np.linalg.LinAlgError:
        return None, math.inf
    return ll, 2.0 * float(np.sum(np.log(np.diag(ll))))


def _barrier_value(c, blocks, x, t):
    val = t * float(c @ x)
    for b in blocks:
        if b.diag:
            s = b.slack(x)
            if (s <= 0.0).any():
                return math.inf
            val -= float(np.sum(np.log(s)))
            continue
        ll, ld = _logdet_chol(b.slack(x))
        if ll is None:
            return math.inf
        val -= ld
    return val


def _newton_center(c, blocks, x, t, lam2_tol=1e-12, max_iter=60):
    """Damped Newton on  t * c.x - sum_b logdet S_b(x).

    Uses the self-concordant step rule (full step in the quadratic phase,
    1/(1+lambda) otherwise) with a feasibility backtrack, and stalls out
    when the decrement stops shrinking near machine precision.
    """
    m = c.size
    phi = _barrier_value(c, blocks, x, t)
    if not math.isfinite(phi):
        raise SolverError("infeasible start for Newton centering")
    n_iter = 0
    prev_lam2 = math.inf
    for n_iter in range(1, max_iter + 1):
        grad = t * c.copy()
        hess = np.zeros((m, m))
        lis = []
        for b in blocks:
            s = b.slack(x)
            if b.diag:
                if (s <= 0.0).any():
                    raise SolverError("lost feasibility inside centering")
                lis.append(s)
                grad[b.var_idx] -= b.ops @ (1.0 / s)
                weighted = b.ops / s[None, :]
                hess[np.ix_(b.var_idx, b.var_idx)] += weighted @ weighted.T
                continue
            ll, _ = _logdet_chol(s)
            if ll is None:
                raise SolverError("lost feasibility inside centering")
            li = solve_triangular(ll, np.eye(b.dim), lower=True)
            lis.append(li)
            w = np.matmul(np.matmul(li, b.ops), li.T)
            grad[b.var_idx] -= np.trace(w, axis1=1, axis2=2)
            gmat = w.reshape(w.shape[0], -1)
            hess[np.ix_(b.var_idx, b.var_idx)] += gmat @ gmat.T
        ridge = 0.0
        while True:
            try:
                cf = cho_factor(hess + ridge * np.eye(m), lower=True)
                break
            except np.linalg.LinAlgError:
                ridge = max(ridge * 10.0, 1e-14 * (1.0 + np.trace(hess) / m))
        dx = cho_solve(cf, -grad)
        lam2 = float(-grad @ dx)
        stalled = (lam2 > 0.7 * prev_lam2) and (lam2 < 1e-8)
        if not math.isfinite(lam2) or lam2 <= lam2_tol or stalled:
            break
        prev_lam2 = lam2
        # fraction-to-boundary long step in the scaled metric
        alpha = 1.0
        for b, li in zip(blocks, lis):
            if b.diag:
                ratio = (dx[b.var_idx] @ b.ops) / li   # li holds the diag slack
                ev_min = float(ratio.min())
            else:
                ds = np.tensordot(dx[b.var_idx], b.ops, axes=(0, 0))
                ev_min = float(np.linalg.eigvalsh(li @ ds @ li.T)[0])
            if ev_min < 0.0:
                alpha = min(alpha, -0.98 / ev_min)
        moved = False
        while alpha > 1e-13:
            cand = x + alpha * dx
            val = _barrier_value(c, blocks, cand, t)
            if math.isfinite(val) and val <= phi + 1e-9 * (1.0 + abs(phi)):
                x, phi, moved = cand, val, True
                break
            alpha *= 0.5
        if not moved:
            break
    return x, n_iter


def solve_lmi(c, blocks, x0, gap_tol=DEFAULT_GAP_TOL, lam2_tol=1e-12,
              theta=8.0, t0=None, max_stages=80):
    """Path-following barrier for  min c.x  s.t. every block slack >= 0.

    Intermediate stages center only loosely (Newton decrement ~0.2); the
    final stage centers tightly.  Returns (x, info); x is strictly feasible
    by construction, and the duality gap is at most nu/t_final with nu the
    total block dimension.
    """
    x = np.array(x0, dtype=float)
    nu = float(sum(b.dim for b in blocks))
    if not math.isfinite(_barrier_value(c, blocks, x, 0.0)):
        raise SolverError("starting point is not strictly feasible")
    obj = float(c @ x)
    t = t0 if t0 is not None else nu / max(0.1 * (1.0 + abs(obj)), 1e-12)
    newtons = 0
    for _ in range(max_stages):
        final = nu / t <= gap_tol
        x, it = _newton_center(c, blocks, x, t,
                               lam2_tol=lam2_tol if final else 0.04)
        newtons += it
        if final:
            break
        t = min(t * theta, nu / gap_tol)
    return x, {"gap": nu / t, "t_final": t, "newton_iters": newtons}


def center_at(c, blocks, x, t_fixed, lam2_tol=1e-17):
    """Tightly re-center an already feasible point at a fixed t.

    Used as a deterministic final polish so that two routes to the same
    problem (e.g. with and without renormalization) land on the same
    central point.
    """
    x, _ = _newton_center(c, blocks, np.array(x, dtype=float), t_fixed,
                          lam2_tol=lam2_tol, max_iter=100)
    return x


# ---------------------------------------------------------------------------
# dual problem assembly


def _is_complex_data(*mats) -> bool:
    return any(np.abs(np.asarray(m).imag).max() > 1e-14 for m in mats)


def _eta_box_block(n_q: int) -> LmiBlock:
    """Diagonal block enforcing |eta_l| <= ETA_BOX.

    A statistic whose guess is ~0 gives its multiplier a free PSD recession
    direction (more eta, more slack, no cost); the box keeps the central
    path bounded and the slack assembly well conditioned.  The box never
    binds for realistic statistics - multipliers sit orders of magnitude
    below it - and a bound computed at the box edge is still sound, merely
    looser.
    """
    a0 = -ETA_BOX * np.ones(2 * n_q)
    ops = np.zeros((n_q, 2 * n_q))
    for l in range(n_q):
        ops[l, l] = -1.0
        ops[l, n_q + l] = 1.0
    return LmiBlock(a0=a0, ops=ops, var_idx=np.arange(n_q), tag="cap",
                    label="etabox", diag=True)


def _t_real_mask(n_settings: int) -> np.ndarray:
    """True for T-family members with a nonzero real part (pairs i >= j)."""
    return np.array([i >= j for i, j in pk.t_family_pairs(n_settings)])


def build_dual(model: pk.ProtocolModel, target: str = "phase",
               gamma_w: float | None = None,
               q_guesses: np.ndarray | None = None,
               guesses: pk.GuessSet | None = None) -> DualProblem:
    """Assemble the dual SDP for a protocol model and target operator.

    ``q_guesses`` are the channel-model expectations of the test statistics
    (objective weights for the eta multipliers); the T guesses come from the
    pessimistic marginal-state guess at eps' = 1 - (1-eps)^(L+1).  Guesses
    shape only the objective; feasibility, and hence soundness, is
    independent of them.
    """
    if model.kind in ("bb84", "mdi"):
        return _build_dual_flat(model, gamma_w, q_guesses, guesses)
    if model.kind == "decoy":
        return _build_dual_decoy(model, target, gamma_w, q_guesses, guesses)
    raise ValueError(model.kind)


def _build_dual_flat(model, gamma_w, q_guesses, guesses):
    csets = pk.coefficient_sets(model)
    q_ops = [pk.q_operator(model, cs) for cs in csets]
    t_ops = pk.t_family(model.n_settings)
    target_op = pk.phase_error_operator(model)
    n_q, n_t, n_a = len(q_ops), len(t_ops), model.n_settings
    dim_b = target_op.dim // n_a
    eye_b = np.eye(dim_b)

    if guesses is None:
        eps_p = 1.0 - (1.0 - model.epsilon) ** (model.corr_length + 1)
        _, t_gs = pk.marginal_guess(model, eps_p)
    else:
        t_gs = guesses.t_gs
    q_gs = np.zeros(n_q) if q_guesses is None else np.asarray(q_guesses, dtype=float)
    q_gs = np.maximum(q_gs, Q_GUESS_FLOOR)

    is_complex = _is_complex_data(target_op.mat, *(op.mat for op in q_ops))
    active = np.ones(n_q + n_t, dtype=bool)
    if is_complex:
        def prep(m):
            return real_embedding(m)
    else:
        active[n_q:] = _t_real_mask(n_a)

        def prep(m):
            return np.real(m)
    main_ops = np.array([prep(op.mat) for op in q_ops]
                        + [prep(np.kron(op.mat, eye_b)) for op in t_ops])
    a0 = prep(target_op.mat)
    diag_idx = np.array(pk.t_family_diag_indices(n_a)) + n_q
    blocks = [LmiBlock(a0=a0, ops=main_ops, var_idx=np.arange(n_q + n_t),
                       tag="ineq", identity_vars=diag_idx, label="main")]
    if gamma_w is not None:
        t_stack = np.array([prep(op.mat) for op in t_ops])
        eye_a = np.eye(t_stack.shape[1])
        lam_idx = np.arange(n_q, n_q + n_t)
        blocks.append(LmiBlock(a0=-gamma_w * eye_a, ops=-t_stack,
                               var_idx=lam_idx, tag="cap", label="cap+"))
        blocks.append(LmiBlock(a0=-gamma_w * eye_a, ops=t_stack,
                               var_idx=lam_idx, tag="cap", label="cap-"))
    blocks.append(_eta_box_block(n_q))
    c = np.concatenate([q_gs, np.asarray(t_gs, dtype=float)])
    names = [cs.label for cs in csets] + [f"t_{i}_{j}" for i, j in pk.t_family_pairs(n_a)]
    return DualProblem(kind=model.kind, target="phase", c=c, blocks=blocks,
                       n_q=n_q, n_settings=n_a, active=active, gamma_w=gamma_w,
                       var_names=names, meta={"dim_b": dim_b, "complex": is_complex})


def _build_dual_decoy(model, target, gamma_w, q_guesses, guesses):
    csets = pk.coefficient_sets(model, target=target)
    q_ops = [pk.q_operator(model, cs) for cs in csets]
    t_ops = pk.t_family(model.n_settings)
    n_q, n_t, n_p = len(q_ops), len(t_ops), model.n_settings
    n_blocks = model.n_cut + 1
    dim = q_ops[0].dim
    dim_b = dim // n_p
    eye_b = np.eye(dim_b)

    if target == "phase":
        target_op = pk.phase_error_operator(model)
    elif target == "detection":
        target_op = -1.0 * pk.detection_operator(model)
    else:
        raise ValueError(target)

    if guesses is None:
        eps_p = 1.0 - (1.0 - model.epsilon) ** (model.corr_length + 1)
        _, (t_blocks_gs, t_inf_gs) = pk.marginal_guess(model, eps_p)
    else:
        t_blocks_gs, t_inf_gs = guesses.t_gs, guesses.t_inf_gs
    q_gs = np.zeros(n_q) if q_guesses is None else np.asarray(q_guesses, dtype=float)
    q_gs = np.maximum(q_gs, Q_GUESS_FLOOR)

    q_stack = np.array([np.real(op.mat) for op in q_ops])
    t_stack_lift = np.array([np.real(np.kron(op.mat, eye_b)) for op in t_ops])
    t_stack = np.array([np.real(op.mat) for op in t_ops])
    diag_local = np.array(pk.t_family_diag_indices(n_p))

    t_mask = _t_real_mask(n_p)
    if model.drop_cross_terms:
        # optionally thin pairs whose settings differ in both bit/basis and
        # intensity; their contribution to the estimation is marginal
        for k, (i, j) in enumerate(pk.t_family_pairs(n_p)):
            ai, mi = model.pairs[i]
            aj, mj = model.pairs[j]
            if ai != aj and mi != mj:
                t_mask[k] = False

    n_vars = n_q + n_blocks * n_t + n_p
    active = np.ones(n_vars, dtype=bool)
    for n in range(n_blocks):
        active[n_q + n * n_t:n_q + (n + 1) * n_t] = t_mask

    blocks = []
    for n in range(n_blocks):
        lam_idx = np.arange(n_q + n * n_t, n_q + (n + 1) * n_t)
        var_idx = np.concatenate([np.arange(n_q), lam_idx])
        a0 = np.real(target_op.mat) if n == 1 else np.zeros((dim, dim))
        blocks.append(LmiBlock(a0=a0, ops=np.concatenate([q_stack, t_stack_lift]),
                               var_idx=var_idx, tag="ineq",
                               identity_vars=lam_idx[diag_local], label=f"photon{n}"))
    inf_idx = np.arange(n_q + n_blocks * n_t, n_vars)
    inf_ops = np.array([np.kron(np.diag((np.arange(n_p) == i).astype(float)), eye_b)
                        for i in range(n_p)])
    blocks.append(LmiBlock(a0=np.zeros((dim, dim)),
                           ops=np.concatenate([q_stack, inf_ops]),
                           var_idx=np.concatenate([np.arange(n_q), inf_idx]),
                           tag="ineq", identity_vars=inf_idx, label="tail"))
    if gamma_w is not None:
        eye_a = np.eye(n_p)
        for n in range(n_blocks):
            lam_idx = np.arange(n_q + n * n_t, n_q + (n + 1) * n_t)
            blocks.append(LmiBlock(a0=-gamma_w * eye_a, ops=-t_stack, var_idx=lam_idx,
                                   tag="cap", label=f"cap+{n}"))
            blocks.append(LmiBlock(a0=-gamma_w * eye_a, ops=t_stack, var_idx=lam_idx,
                                   tag="cap", label=f"cap-{n}"))
        diag_ops = np.array([np.diag((np.arange(n_p) == i).astype(float)) for i in range(n_p)])
        blocks.append(LmiBlock(a0=-gamma_w * eye_a, ops=-diag_ops, var_idx=inf_idx,
                               tag="cap", label="cap+inf"))
        blocks.append(LmiBlock(a0=-gamma_w * eye_a, ops=diag_ops, var_idx=inf_idx,
                               tag="cap", label="cap-inf"))
    blocks.append(_eta_box_block(n_q))
    c = np.concatenate([q_gs, np.asarray(t_blocks_gs, dtype=float).reshape(-1),
                        np.asarray(t_inf_gs, dtype=float)])
    names = ([cs.label for cs in csets]
             + [f"t_{i}_{j}_n{n}" for n in range(n_blocks) for i, j in pk.t_family_pairs(n_p)]
             + [f"t_{i}_inf" for i in range(n_p)])
    return DualProblem(kind="decoy", target=target, c=c, blocks=blocks,
                       n_q=n_q, n_settings=n_p, active=active,
                       n_t_blocks=n_blocks, n_inf=n_p,
                       gamma_w=gamma_w, var_names=names,
                       meta={"dim_b": dim_b, "complex": False})


# ---------------------------------------------------------------------------
# solving, certification, restoration


def _identity_shift(x: np.ndarray, block: LmiBlock, amount: float) -> None:
    """Add ``amount * identity`` to a block's slack by bumping its identity
    multipliers, honoring any per-operator scaling (renormalized duals)."""
    lookup = {int(g): loc for loc, g in enumerate(block.var_idx)}
    for g in block.identity_vars:
        scale = float(np.max(np.diag(block.ops[lookup[int(g)]])))
        x[int(g)] += amount / scale


def _feasible_start(problem: DualProblem) -> np.ndarray:
    """Strictly feasible init: put weight tau on the diagonal T multipliers
    (and tail multipliers), which add tau * identity to every ineq block."""
    norms = [float(np.linalg.eigvalsh((b.a0 + b.a0.T) / 2).max())
             for b in problem.blocks if b.tag == "ineq" and not b.diag]
    need = max(norms) if norms else 0.0
    gamma = problem.gamma_w
    if gamma is not None and gamma <= need + 1e-12:
        raise InfeasibleProblem(f"gamma_w={gamma} is below the target norm {need:.3g}")
    hi = gamma if gamma is not None else need + 2.0
    tau = 0.5 * (max(need, 0.0) + hi) if gamma is not None else need + 1.0
    if tau <= need:
        tau = need + 0.5 * (hi - need)
    x = np.zeros(problem.n_vars)
    for b in problem.blocks:
        if b.tag == "ineq" and b.identity_vars is not None:
            _identity_shift(x, b, tau)
    return x


def verify_certificate(problem: DualProblem, x: np.ndarray):
    """Independent feasibility check: eigendecompose every slack block."""
    ineq, cap = math.inf, math.inf
    for b in problem.blocks:
        m = b.min_slack_eig(x)
        if b.tag == "ineq":
            ineq = min(ineq, m)
        else:
            cap = min(cap, m)
    return ineq, (None if cap is math.inf else cap)


def restore_feasibility(cert: DualCertificate, problem: DualProblem) -> DualCertificate:
    """Shift diagonal T multipliers until every ineq block verifies PSD.

    Adding s to each diagonal multiplier of a block adds exactly s * I to
    that block's slack, so a shift of (-margin + pad) always succeeds; the
    objective increases by s * sum(diagonal guesses) per adjusted block.
    """
    x = cert.x.copy()
    total = 0.0
    for _ in range(6):
        shifted = False
        for b in problem.blocks:
            if b.tag != "ineq":
                continue
            m = b.min_slack_eig(x)
            if m < 0.0:
                scale = float(np.abs(b.slack(x)).max())
                s = -m + max(RESTORE_PAD, 1e-13 * scale)
                _identity_shift(x, b, s)
                total += s
                shifted = True
        if not shifted:
            break
    ineq, cap = verify_certificate(problem, x)
    return replace(cert, x=x, objective=float(problem.c @ x),
                   feasibility_margin=ineq, cap_margin=cap,
                   restoration=cert.restoration + total)


def _reduced(problem: DualProblem):
    """Project the problem onto its active multipliers for the solver."""
    act = problem.active
    remap = np.full(problem.n_vars, -1)
    remap[act] = np.arange(int(act.sum()))
    blocks = []
    for b in problem.blocks:
        keep = act[b.var_idx]
        blocks.append(replace(b, ops=b.ops[keep], var_idx=remap[b.var_idx[keep]],
                              identity_vars=None if b.identity_vars is None
                              else remap[b.identity_vars]))
    return problem.c[act], blocks


def solve_dual(problem: DualProblem, gap_tol=DEFAULT_GAP_TOL,
               warm: np.ndarray | None = None, polish: bool = True) -> DualCertificate:
    """Solve the dual, certify independently, restore if needed.

    The returned certificate always satisfies feasibility_margin >= -1e-9
    (in practice > 0: the barrier stays interior).
    """
    act = problem.active
    c_red, blocks_red = _reduced(problem)
    x0 = _feasible_start(problem)
    t0 = None
    if warm is not None and warm.size == problem.n_vars:
        xw = np.array(warm, dtype=float)
        ql = problem.eta_slice()
        xw[ql] = np.clip(xw[ql], -0.99 * ETA_BOX, 0.99 * ETA_BOX)
        # repair the warm point for the current operators, then start hot
        for b in problem.blocks:
            if b.tag != "ineq":
                continue
            m = b.min_slack_eig(xw)
            if m < 1e-8:
                _identity_shift(xw, b, 1e-8 - m)
        ineq, cap = verify_certificate(problem, xw)
        if ineq > 0 and (cap is None or cap > 0):
            x0 = xw
            nu = float(sum(b.dim for b in problem.blocks))
            t0 = nu / max(gap_tol * 1e4, 1e-12)
    x_red, info = solve_lmi(c_red, blocks_red, x0[act], gap_tol=gap_tol, t0=t0)
    if polish:
        nu = float(sum(b.dim for b in blocks_red))
        t_polish = 2.0 ** math.ceil(math.log2(nu / max(gap_tol, POLISH_GAP)))
        x_red = center_at(c_red, blocks_red, x_red, t_polish)
        info["gap"] = nu / t_polish
    x = np.zeros(problem.n_vars)
    x[act] = x_red
    ineq, cap = verify_certificate(problem, x)
    cert = DualCertificate(x=x, objective=float(problem.c @ x),
                           feasibility_margin=ineq, cap_margin=cap,
                           gap=info["gap"], meta={"newton_iters": info["newton_iters"],
                                                  "op_hash": problem.operator_hash()})
    if cert.feasibility_margin < 0.0:
        cert = restore_feasibility(cert, problem)
    if cert.feasibility_margin < -FEAS_TOL:
        raise SolverError(f"certificate failed to verify after restoration "
                          f"(margin {cert.feasibility_margin:.3e})")
    return cert


# ---------------------------------------------------------------------------
# observable extraction


@dataclass(frozen=True)
class WObservable:
    """The local test observable W = sum_k lambda_k T^k (blockwise for
    decoy), with the RV range including the always-attainable value 0."""

    blocks: list                   # HermitianOperator per photon block
    inf_values: np.ndarray | None  # decoy tail eigenvalues (lambda_{i,inf})
    eigensystems: list
    omega_min: float
    omega_max: float

    @property
    def single(self) -> HermitianOperator:
        if len(self.blocks) != 1 or self.inf_values is not None:
            raise ValueError("blockwise observable; no single W")
        return self.blocks[0]


def observable_w(cert: DualCertificate, problem: DualProblem) -> WObservable:
    t_ops = pk.t_family(problem.n_settings)
    blocks, systems = [], []
    lo, hi = 0.0, 0.0   # 0 is attainable: a round may not be tagged for W
    for nb in range(problem.n_t_blocks):
        lam = cert.lam(problem, nb)
        w = np.zeros((problem.n_settings, problem.n_settings), dtype=complex)
        for val, op in zip(lam, t_ops):
            w = w + val * op.mat
        wop = HermitianOperator(w)
        es = eig_herm(wop)
        blocks.append(wop)
        systems.append(es)
        lo, hi = min(lo, es.min), max(hi, es.max)
    inf_vals = None
    if problem.n_inf:
        inf_vals = cert.lam_inf(problem).copy()
        lo, hi = min(lo, float(inf_vals.min())), max(hi, float(inf_vals.max()))
    return WObservable(blocks=blocks, inf_values=inf_vals, eigensystems=systems,
                       omega_min=lo, omega_max=hi)


# ---------------------------------------------------------------------------
# renormalization (setting-probability rescaling)


def renormalize(model: pk.ProtocolModel, problem: DualProblem):
    """Rescale the dual so its input statistics are independent of the
    setting probabilities.

    Operators pick up per-variable scales s_l = 1/p_{i(l)} (test sets) and
    s_k = 1/sqrt(p_i p_j) (T family); the target is congruence-scaled by
    kappa = p_Z/2, and the objective coefficients become the renormalized
    statistics s_j * c_j.  Every block of the transformed problem is an
    exact positive multiple of the original block at the substituted point,
    so the two problems share their central path and ``map_back``
    (x -> s * x / kappa) recovers the original-frame multipliers with the
    final phase-error bound unchanged up to solver precision.
    """
    if problem.kind == "decoy":
        raise NotImplementedError("renormalization is wired for flat duals")
    p = model.setting_probs
    if (p <= 0).any():
        raise ValueError("renormalization requires strictly positive setting probabilities")
    n_q, n_a = problem.n_q, problem.n_settings
    dim_b = problem.meta["dim_b"]
    if problem.meta.get("complex"):
        raise NotImplementedError("renormalization is wired for the real path")
    csets = pk.coefficient_sets(model)

    scales = np.ones(problem.n_vars)
    for l, cs in enumerate(csets):
        supp = {key[0] for key in cs.coeffs}
        ps = {p[i] for i in supp}
        if max(ps) - min(ps) > 1e-15:
            raise NotImplementedError("renormalization needs per-set constant setting prob")
        scales[l] = 1.0 / ps.pop()
    for k, (i, j) in enumerate(pk.t_family_pairs(n_a)):
        scales[n_q + k] = 1.0 / math.sqrt(p[i] * p[j])

    d_vec = np.repeat(np.sqrt(p), dim_b)
    main = next(b for b in problem.blocks if b.label == "main")
    a0_cong = main.a0 * np.outer(d_vec, d_vec)
    ref = float(np.abs(main.a0).max())
    kappa = float(np.abs(a0_cong).max()) / ref
    if np.abs(a0_cong - kappa * main.a0).max() > 1e-13 * ref:
        raise NotImplementedError("target is not uniformly weighted on the key settings")

    new_blocks = []
    for b in problem.blocks:
        shape = scales[b.var_idx][:, None] if b.diag else scales[b.var_idx][:, None, None]
        new_blocks.append(replace(b, a0=kappa * b.a0, ops=b.ops * shape))
    renorm = replace(problem, c=problem.c * scales, blocks=new_blocks,
                     gamma_w=None if problem.gamma_w is None else kappa * problem.gamma_w,
                     meta=dict(problem.meta, renormalized=True, kappa=kappa,
                               scales=scales))

    def map_back(x: np.ndarray) -> np.ndarray:
        return x * scales / kappa

    return renorm, map_back


def _build_split(problem: DualProblem, dev_costs: np.ndarray):
    """Split-variable image of the dual: layout [eta+, rest, eta-], with the
    objective eta_l q_l + |eta_l| d_l represented linearly."""
    n_q = problem.n_q
    d = np.asarray(dev_costs, dtype=float)
    if d.size != n_q or (d < 0).any():
        raise ValueError("need one nonnegative deviation cost per test statistic")
    act = problem.active
    remap = np.full(problem.n_vars, -1)
    remap[act] = np.arange(int(act.sum()))
    n_act = int(act.sum())
    c_split = np.concatenate([problem.c[act], np.zeros(n_q)])
    c_split[:n_q] = problem.c[:n_q] + d
    c_split[n_act:] = -(problem.c[:n_q] - d)
    blocks_split = []
    for b in problem.blocks:
        if b.label == "etabox":
            ops = np.zeros((2 * n_q, 4 * n_q))
            a0 = np.zeros(4 * n_q)
            for l in range(n_q):
                ops[l, l] = 1.0                   # eta+_l >= 0
                ops[n_q + l, n_q + l] = 1.0       # eta-_l >= 0
                ops[l, 2 * n_q + l] = -1.0        # eta+_l <= ETA_BOX
                ops[n_q + l, 3 * n_q + l] = -1.0  # eta-_l <= ETA_BOX
            a0[2 * n_q:] = -ETA_BOX
            var_idx = np.concatenate([np.arange(n_q), np.arange(n_act, n_act + n_q)])
            blocks_split.append(LmiBlock(a0=a0, ops=ops, var_idx=var_idx,
                                         tag="cap", label="etasplit", diag=True))
            continue
        keep = act[b.var_idx]
        idx = remap[b.var_idx[keep]]
        ops = b.ops[keep]
        eta_rows = np.where(idx < n_q)[0]
        if eta_rows.size:
            idx = np.concatenate([idx, idx[eta_rows] + n_act])
            ops = np.concatenate([ops, -ops[eta_rows]])
        ident = None if b.identity_vars is None else remap[b.identity_vars]
        blocks_split.append(replace(b, ops=ops, var_idx=idx, identity_vars=ident))
    return c_split, blocks_split, n_act


def _collapse_split(problem: DualProblem, x_split: np.ndarray, n_act: int):
    x = np.zeros(problem.n_vars)
    x[problem.active] = x_split[:n_act]
    x[:problem.n_q] = x_split[:problem.n_q] - x_split[n_act:]
    return x


def _certify(problem: DualProblem, x: np.ndarray, gap: float, meta: dict) -> DualCertificate:
    ineq, cap = verify_certificate(problem, x)
    cert = DualCertificate(x=x, objective=float(problem.c @ x),
                           feasibility_margin=ineq, cap_margin=cap, gap=gap,
                           meta=dict(meta, op_hash=problem.operator_hash()))
    if cert.feasibility_margin < 0.0:
        cert = restore_feasibility(cert, problem)
    if cert.feasibility_margin < -FEAS_TOL:
        raise SolverError("certificate failed to verify after restoration")
    return cert


def solve_dual_devaware(problem: DualProblem, dev_costs: np.ndarray,
                        gap_tol=DEFAULT_GAP_TOL) -> DualCertificate:
    """Solve with finite-key deviation costs on the test multipliers.

    An asymptotically optimal multiplier vector can be badly suboptimal in
    the finite-key bound, where every unit of |eta_l| additionally buys one
    concentration deviation on its statistic.  Splitting eta = eta+ - eta-
    makes the objective  sum_l [eta_l q_l + |eta_l| d_l] + lambda-part
    exactly representable; the collapsed point is then certified against
    the *original* problem, so soundness is untouched (the costs only steer
    which feasible point is returned).
    """
    n_q = problem.n_q
    c_split, blocks_split, n_act = _build_split(problem, dev_costs)
    x0_full = _feasible_start(problem)
    x0 = np.concatenate([x0_full[problem.active], np.zeros(n_q)])
    x0[:n_q] = np.maximum(x0[:n_q], 0.0) + 1e-3
    x0[n_act:] = 1e-3
    x_split, info = solve_lmi(c_split, blocks_split, x0, gap_tol=gap_tol)
    nu = float(sum(b.dim for b in blocks_split))
    t_polish = 2.0 ** math.ceil(math.log2(nu / max(gap_tol, POLISH_GAP)))
    x_split = center_at(c_split, blocks_split, x_split, t_polish)
    x = _collapse_split(problem, x_split, n_act)
    return _certify(problem, x, nu / t_polish,
                    {"newton_iters": info["newton_iters"], "dev_aware": True})


def solve_dual_renormalized(model: pk.ProtocolModel, problem: DualProblem,
                            gap_tol=DEFAULT_GAP_TOL,
                            dev_costs: np.ndarray | None = None) -> DualCertificate:
    """Solve via the renormalized coordinates and map back.

    The mapped-back point receives the same deterministic final centering
    as the direct route applies, so both routes converge to the same
    central point of the original problem.
    """
    renorm, map_back = renormalize(model, problem)
    scales = renorm.meta["scales"]
    kappa = renorm.meta["kappa"]
    n_q = problem.n_q
    if dev_costs is None:
        cert_r = solve_dual(renorm, gap_tol=gap_tol, polish=False)
        x = map_back(cert_r.x)
        act = problem.active
        c_red, blocks_red = _reduced(problem)
        nu = float(sum(b.dim for b in blocks_red))
        t_polish = 2.0 ** math.ceil(math.log2(nu / max(gap_tol, POLISH_GAP)))
        x_red = center_at(c_red, blocks_red, x[act], t_polish)
        x = np.zeros(problem.n_vars)
        x[act] = x_red
        return _certify(problem, x, nu / t_polish, {"route": "renormalized"})
    # deviation-aware: solve the renormalized split, map the split point
    # into the original split coordinates, and give it the common polish
    d_r = np.asarray(dev_costs, dtype=float) * scales[:n_q]
    c_r, blocks_r, n_act = _build_split(renorm, d_r)
    x0_full = _feasible_start(renorm)
    x0 = np.concatenate([x0_full[renorm.active], np.zeros(n_q)])
    x0[:n_q] = np.maximum(x0[:n_q], 0.0) + 1e-3
    x0[n_act:] = 1e-3
    x_split_r, info = solve_lmi(c_r, blocks_r, x0, gap_tol=gap_tol)
    scales_split = np.concatenate([scales[problem.active], scales[:n_q]]) / kappa
    x_split = x_split_r * scales_split
    c_split, blocks_split, n_act2 = _build_split(problem, dev_costs)
    nu = float(sum(b.dim for b in blocks_split))
    t_polish = 2.0 ** math.ceil(math.log2(nu / max(gap_tol, POLISH_GAP)))
    x_split = center_at(c_split, blocks_split, x_split, t_polish)
    x = _collapse_split(problem, x_split, n_act2)
    return _certify(problem, x, nu / t_polish,
                    {"route": "renormalized", "dev_aware": True})


# ---------------------------------------------------------------------------
# certificate export


CERT_HEADER = "qkdsec-dual-certificate v1"


def export_certificate(cert: DualCertificate, problem: DualProblem) -> str:
    """Self-contained text record: versioned header then key=value lines.

    A third party re-verifies by rebuilding the operators from the recorded
    protocol configuration, checking the operator hash, assembling the
    slack blocks from the multipliers, and eigendecomposing.
    """
    lines = [CERT_HEADER,
             f"kind={problem.kind}",
             f"target={problem.target}",
             f"n_vars={problem.n_vars}",
             f"n_q={problem.n_q}",
             f"n_settings={problem.n_settings}",
             f"n_t_blocks={problem.n_t_blocks}",
             f"n_inf={problem.n_inf}",
             f"gamma_w={'' if problem.gamma_w is None else repr(problem.gamma_w)}",
             f"objective={cert.objective!r}",
             f"feasibility_margin={cert.feasibility_margin!r}",
             f"gap={cert.gap!r}",
             f"restoration={cert.restoration!r}",
             f"op_hash={problem.operator_hash()}"]
    for name, val in problem.meta.items():
        if isinstance(val, (int, float, bool, str)):
            lines.append(f"meta.{name}={val!r}")
    for i, v in enumerate(cert.x):
        lines.append(f"x_{i}={float(v)!r}")
    return "\n".join(lines) + "\n"


def load_certificate(text: str) -> dict:
    lines = text.strip().splitlines()
    if not lines or lines[0] != CERT_HEADER:
        raise ValueError("not a certificate record")
    rec, xs = {}, {}
    for line in lines[1:]:
        key, _, val = line.partition("=")
        if key.startswith("x_"):
            xs[int(key[2:])] = float(val)
        else:
            rec[key] = val
    n = int(rec["n_vars"])
    x = np.array([xs[i] for i in range(n)])
    rec["x"] = x
    return rec


def reverify_certificate(rec: dict, problem: DualProblem):
    """Re-check a loaded record against a freshly built problem."""
    if rec["op_hash"] != problem.operator_hash():
        raise ValueError("operator hash mismatch: certificate does not match problem")
    return verify_certificate(problem, rec["x"])
