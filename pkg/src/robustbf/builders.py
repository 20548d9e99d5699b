"""Problem construction for robust MISO downlink beamforming.

Every design program minimizes total transmit power ``sum tr(W_k)`` under
per-user robust SINR constraints written as linear matrix inequalities in
the Gram matrices ``W_k`` and per-user multipliers.  Design programs are
compiled onto the *dual* side of an :class:`~robustbf.sdp_core.SdpProblem`
(``max b^T y  s.t.  C - A^T y >= 0``): each scalar design variable is one
equality row, each matrix inequality is one PSD block, so free variables
need no splitting and the Schur complement stays the size of the variable
count.
"""
from dataclasses import dataclass, field

import numpy as np

from . import sdp_core
from .channel import UncertaintyRegion
from .hermlin import (as_hermitian, as_vector, embed_hermitian, from_herm_coords, herm_basis,
                      herm_coords, hermitian_eig, outer)
from .sdp_core import NONNEG, PSD, SdpBuilder, Status

RANK_TOL = 1e-6

RANK_ONE = "RankOne"
HIGH_RANK = "HighRank"
INFEASIBLE = "Infeasible"
SOLVER_FAILURE = "SolverFailure"

PLAIN = "plain"
RESTRICTED1 = "restricted1"
RESTRICTED2 = "restricted2"
BASELINE = "baseline"


class RoutingError(ValueError):
    pass


class ContractError(ValueError):
    pass


def db_to_linear(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)


@dataclass(frozen=True, eq=False)
class BeamformingInstance:
    n_t: int
    sigma2: tuple
    gamma: tuple
    regions: tuple

    def __post_init__(self):
        sigma2 = tuple(float(s) for s in np.atleast_1d(self.sigma2))
        gamma = tuple(float(g) for g in np.atleast_1d(self.gamma))
        regions = tuple(self.regions)
        k = len(regions)
        if k < 1:
            raise ValueError("need at least one user")
        if len(sigma2) != k or len(gamma) != k:
            raise ValueError("per-user lists must all have k_users entries")
        if min(sigma2) < 0 or min(gamma) <= 0:
            raise ValueError("noise powers must be nonnegative and SINR targets positive")
        for r in regions:
            if not isinstance(r, UncertaintyRegion) or r.n_t != self.n_t:
                raise ValueError("every region must be an UncertaintyRegion of dimension n_t")
        object.__setattr__(self, "sigma2", sigma2)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "regions", regions)

    @classmethod
    def from_db(cls, n_t, sigma2, gamma_db, regions):
        k = len(regions)
        sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=float), (k,))
        gamma = np.broadcast_to(db_to_linear(gamma_db), (k,))
        return cls(n_t, tuple(sigma2), tuple(gamma), tuple(regions))

    @property
    def k_users(self):
        return len(self.regions)

    @property
    def betas(self):
        return np.array([r.beta for r in self.regions])

    def with_beta(self, beta):
        return BeamformingInstance(self.n_t, self.sigma2, self.gamma,
                                   tuple(r.with_beta(beta) for r in self.regions))

    def subset(self, users):
        users = list(users)
        return BeamformingInstance(self.n_t, tuple(self.sigma2[k] for k in users),
                                   tuple(self.gamma[k] for k in users),
                                   tuple(self.regions[k] for k in users))


@dataclass(frozen=True, eq=False)
class InnerQcqpData:
    """Homogenized worst-case problem over ``y = (h, e_tilde)``.

    minimize ``y^H a0 y`` subject to ``y^H a1 y >= r1``, ``y^H a2 y = r2``,
    ``y^H a3 y <= r3``.
    """

    a0: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    a3: np.ndarray
    rhs: tuple

    @property
    def n_t(self):
        return self.a0.shape[0] // 2


@dataclass
class DesignResult:
    status: str
    beamformers: list
    gram_matrices: list
    multipliers: list
    objective: float
    extracted_power: float
    eig_ratio: list
    relaxation: str = ""
    stage_objectives: dict = field(default_factory=dict)
    solver_status: str = ""

    @property
    def eig_ratio_max(self):
        return max(self.eig_ratio) if self.eig_ratio else float("nan")


# ----------------------------------------------------------------------------
# elementary constructions


def build_tilde_w(ws, k, gamma):
    """``w_k w_k^H / gamma - sum_{j != k} w_j w_j^H``."""
    ws = [as_vector(w) for w in ws]
    if not 0 <= k < len(ws):
        raise IndexError(f"user index {k} out of range for {len(ws)} beamformers")
    if len({w.size for w in ws}) != 1:
        raise ValueError("beamformers must share one dimension")
    if not gamma > 0:
        raise ValueError("gamma must be positive")
    out = outer(ws[k]) / gamma
    for j, w in enumerate(ws):
        if j != k:
            out = out - outer(w)
    return as_hermitian(out)


def sinr(ws, h, k, sigma2):
    ws = [as_vector(w) for w in ws]
    h = as_vector(h)
    sig = abs(np.vdot(h, ws[k])) ** 2
    interf = sum(abs(np.vdot(h, w)) ** 2 for j, w in enumerate(ws) if j != k)
    return sig / (interf + sigma2)


def build_inner_data(region, w_tilde):
    w_tilde = as_hermitian(w_tilde)
    n = region.n_t
    if w_tilde.shape[0] != n:
        raise ValueError(f"W~ has dimension {w_tilde.shape[0]}, region has {n}")
    z = np.zeros((n, n))
    eye = np.eye(n)
    sa = np.sqrt(region.alpha)
    a0 = np.block([[w_tilde, z], [z, z]])
    a1 = np.block([[z, z], [z, outer(region.h_q)]])
    a2 = np.block([[z, z], [z, eye]]).astype(complex)
    a3 = np.block([[eye, -sa * eye], [-sa * eye, region.alpha * eye]]).astype(complex)
    rhs = ((1.0 - region.epsilon ** 2 / 2.0) ** 2, 1.0, region.beta ** 2)
    return InnerQcqpData(a0, a1, a2, a3, rhs)


def reduced_inner_data(region, w_tilde):
    """Worst-case problem over ``e_tilde`` alone for ``beta = 0``.

    With no additive error ``h = sqrt(alpha) e_tilde``; the third constraint
    would pin ``Y`` to a face without interior, so it is substituted out.
    ``a3`` is None and the relaxation has two rows.
    """
    w_tilde = as_hermitian(w_tilde)
    n = region.n_t
    if w_tilde.shape[0] != n:
        raise ValueError(f"W~ has dimension {w_tilde.shape[0]}, region has {n}")
    rhs = ((1.0 - region.epsilon ** 2 / 2.0) ** 2, 1.0, 0.0)
    return InnerQcqpData(region.alpha * w_tilde, outer(region.h_q), np.eye(n, dtype=complex), None, rhs)


def build_inner_sdr(data):
    """Relaxation over ``Y >= 0`` of the homogenized worst-case problem.

    The multipliers of its three rows are the dual variables
    ``(x1 >= 0, x2, x3 <= 0)``; the primal optimum is the worst-case value.
    """
    r1, r2, r3 = data.rhs
    full = data.a3 is not None
    bld = SdpBuilder()
    y = bld.add_block(PSD, 2 * data.a0.shape[0], embedded=True)
    sl = bld.add_block(NONNEG, 2 if full else 1)
    bld.set_objective(y, 0.5 * embed_hermitian(data.a0))
    bld.add_row({y: 0.5 * embed_hermitian(data.a1), sl: [-1.0, 0.0] if full else [-1.0]}, r1)
    bld.add_row({y: 0.5 * embed_hermitian(data.a2)}, r2)
    if full:
        bld.add_row({y: 0.5 * embed_hermitian(data.a3), sl: [0.0, 1.0]}, r3)
    return bld.build({"kind": "inner_sdr", "value_side": "primal"})


def build_inner_dual(data):
    """The dual of :func:`build_inner_sdr` posed as a standalone program.

    Variables ``(x1, x2+, x2-, -x3) >= 0`` and a PSD slack ``Z`` tied by one
    equality row per real coordinate of
    ``Z = a0 - x1 a1 - x2 a2 - x3 a3``.  The program minimizes the negated
    dual objective, so the dual value is ``-objective_primal``.
    """
    r1, r2, r3 = data.rhs
    n2 = data.a0.shape[0]
    full = data.a3 is not None
    bld = SdpBuilder()
    z = bld.add_block(PSD, 2 * n2, embedded=True)
    xv = bld.add_block(NONNEG, 4 if full else 3)
    bld.set_objective(xv, [-r1, -r2, r2, r3][:4 if full else 3])
    basis = herm_basis(n2)
    c0, c1, c2 = (herm_coords(a) for a in (data.a0, data.a1, data.a2))
    c3 = herm_coords(data.a3) if full else np.zeros(n2 * n2)
    norms = np.array([np.sum(np.abs(bm) ** 2) for bm in basis])
    for p, bm in enumerate(basis):
        # Re tr(B_p Z) = coordinate p of Z times ||B_p||^2
        coef_x = np.array([c1[p], c2[p], -c2[p], -c3[p]][:4 if full else 3]) * norms[p]
        bld.add_row({z: 0.5 * embed_hermitian(bm), xv: coef_x}, c0[p] * norms[p])
    return bld.build({"kind": "inner_dual", "value_side": "negated_primal"})


# ----------------------------------------------------------------------------
# LMI modelling onto the dual side of an SdpProblem


class _LmiModel:
    """Collects ``F0 + sum_i y_i F_i >= 0`` constraints over real scalars ``y``."""

    def __init__(self):
        self.n_vars = 0
        self.cost = []
        self.psd = []  # (size, F0, {var: Fi}) complex Hermitian data
        self.scalar = []  # (const, {var: coef})

    def new_vars(self, count, cost=0.0):
        idx = np.arange(self.n_vars, self.n_vars + count)
        self.n_vars += count
        self.cost.extend([cost] * count if np.isscalar(cost) else list(cost))
        return idx

    def herm_var(self, n, trace_cost=0.0):
        cost = np.zeros(n * n)
        cost[:n] = trace_cost
        return self.new_vars(n * n, cost)

    def add_psd(self, size, const, terms):
        self.psd.append((size, np.asarray(const, dtype=complex), terms))

    def add_scalar(self, const, terms):
        self.scalar.append((float(const), terms))

    def compile(self, meta):
        bld = SdpBuilder()
        per_var = [dict() for _ in range(self.n_vars)]
        for size, const, terms in self.psd:
            blk = bld.add_block(PSD, 2 * size, embedded=True)
            bld.set_objective(blk, embed_hermitian(const))
            for v, mat in terms.items():
                per_var[v][blk] = -embed_hermitian(mat)
        if self.scalar:
            blk = bld.add_block(NONNEG, len(self.scalar))
            bld.set_objective(blk, [c for c, _ in self.scalar])
            for r, (_, terms) in enumerate(self.scalar):
                for v, coef in terms.items():
                    vec = per_var[v].setdefault(blk, np.zeros(len(self.scalar)))
                    vec[r] -= coef
        for v in range(self.n_vars):
            bld.add_row(per_var[v], -self.cost[v])
        meta = dict(meta)
        meta["design_side"] = "dual"
        return bld.build(meta)


def _place(basis_mats, size, rows, cols, scale=1.0):
    """Embed a stack of small matrices into ``size x size`` at (rows, cols)."""
    out = np.zeros((len(basis_mats), size, size), dtype=complex)
    out[:, rows[0]:rows[1], cols[0]:cols[1]] = scale * basis_mats
    return out


def _check_eps(instance):
    for k, r in enumerate(instance.regions):
        if not 0 < r.epsilon <= np.sqrt(2):
            raise ValueError(f"user {k}: epsilon {r.epsilon} outside (0, sqrt(2)] "
                             "required by the phase-rotation equivalence")


def _design_model(instance, restricted=None):
    """Shared design program with per-user routing on ``beta``."""
    _check_eps(instance)
    n, K = instance.n_t, instance.k_users
    basis = herm_basis(n)
    eye = np.eye(n)
    mdl = _LmiModel()
    W = [mdl.herm_var(n, trace_cost=1.0) for _ in range(K)]
    layout = {"n_t": n, "K": K, "W": W, "x1": [None] * K, "x2": [None] * K, "x3": [None] * K,
              "t": [None] * K, "w": None, "routes": []}

    if restricted != RESTRICTED2:
        # restricted2 implies W_k >= 0 through its [[W_j, w_j], [w_j^H, 1]] blocks
        for k in range(K):
            mdl.add_psd(n, np.zeros((n, n)), dict(zip(W[k], basis)))

    def what_terms(k, size):
        """Coefficients of W_hat_k placed in the top-left n x n corner."""
        terms = {}
        for j in range(K):
            coef = 1.0 / instance.gamma[k] if j == k else -1.0
            mats = _place(basis, size, (0, n), (0, n), coef)
            terms.update(zip(W[j], mats))
        return terms

    for k, reg in enumerate(instance.regions):
        hq, a, eps, beta = reg.h_q, reg.alpha, reg.epsilon, reg.beta
        s2, g = instance.sigma2[k], instance.gamma[k]
        if beta > 0:
            layout["routes"].append(PLAIN)
            x1, x2, x3 = mdl.new_vars(3)
            layout["x1"][k], layout["x2"][k], layout["x3"][k] = x1, x2, x3
            size = 2 * n
            terms = what_terms(k, size)
            sa = np.sqrt(a)
            f1 = np.zeros((size, size), dtype=complex)
            f1[n:, n:] = -outer(hq)
            f2 = np.zeros((size, size), dtype=complex)
            f2[n:, n:] = -eye
            f3 = np.block([[-eye, sa * eye], [sa * eye, -a * eye]]).astype(complex)
            terms[x1], terms[x2], terms[x3] = f1, f2, f3
            mdl.add_psd(size, np.zeros((size, size)), terms)
            r1 = (1.0 - eps ** 2 / 2.0) ** 2
            mdl.add_scalar(-s2, {x1: r1, x2: 1.0, x3: beta ** 2})
            mdl.add_scalar(0.0, {x1: 1.0})
            mdl.add_scalar(0.0, {x3: -1.0})
        else:
            layout["routes"].append(BASELINE)
            x1, x2 = mdl.new_vars(2)
            layout["x1"][k], layout["x2"][k] = x1, x2
            size = n + 1
            terms = {}
            for j in range(K):
                coef = 1.0 / g if j == k else -1.0
                for v, bm in zip(W[j], basis):
                    mat = np.zeros((size, size), dtype=complex)
                    col = bm @ hq
                    mat[:n, :n] = bm
                    mat[:n, n] = col
                    mat[n, :n] = col.conj()
                    mat[n, n] = np.vdot(hq, col).real
                    terms[v] = coef * mat
            f1 = np.zeros((size, size), dtype=complex)
            f1[:n, :n] = eye
            f1[n, n] = -eps ** 2
            f2 = np.zeros((size, size), dtype=complex)
            f2[:n, :n] = eye
            f2[:n, n] = hq
            f2[n, :n] = hq.conj()
            terms[x1], terms[x2] = f1, f2
            const = np.zeros((size, size), dtype=complex)
            const[n, n] = -s2 / a
            mdl.add_psd(size, const, terms)
            mdl.add_scalar(0.0, {x1: 1.0})

    if restricted is not None:
        _add_restricted(mdl, instance, layout, restricted, basis)
    meta = {"kind": restricted or ("baseline" if all(r == BASELINE for r in layout["routes"]) else PLAIN),
            "layout": layout}
    return mdl.compile(meta)


def _add_restricted(mdl, instance, layout, which, basis):
    n, K = instance.n_t, instance.k_users
    W = layout["W"]
    eye = np.eye(n)
    if which == RESTRICTED2:
        wv = [mdl.new_vars(2 * n) for _ in range(K)]
        layout["w"] = wv
        for j in range(K):
            size = n + 1
            terms = dict(zip(W[j], _place(basis, size, (0, n), (0, n))))
            terms.update(_vector_terms(wv[j], size, n, n))
            const = np.zeros((size, size), dtype=complex)
            const[n, n] = 1.0
            mdl.add_psd(size, const, terms)
    for k in range(K):
        if layout["routes"][k] != PLAIN:
            continue
        (t,) = mdl.new_vars(1)
        layout["t"][k] = t
        x3 = layout["x3"][k]
        trace_terms = {v: 1.0 / instance.gamma[k] for v in W[k][:n]}
        trace_terms.update({x3: -1.0, t: -1.0})
        mdl.add_scalar(0.0, trace_terms)
        others = [j for j in range(K) if j != k]
        if which == RESTRICTED1:
            terms = {t: eye.astype(complex)}
            for j in others:
                terms.update(zip(W[j], -basis))
            mdl.add_psd(n, np.zeros((n, n)), terms)
        else:
            size = n + len(others)
            terms = {}
            tmat = np.zeros((size, size), dtype=complex)
            tmat[:n, :n] = eye
            terms[t] = tmat
            const = np.zeros((size, size), dtype=complex)
            for pos, j in enumerate(others):
                const[n + pos, n + pos] = 1.0
                terms.update(_vector_terms(layout["w"][j], size, n, n + pos))
            mdl.add_psd(size, const, terms)


def _vector_terms(vars_, size, n, col):
    """Coefficients for a complex column vector variable placed at rows ``:n`` of ``col``."""
    terms = {}
    for r in range(n):
        re = np.zeros((size, size), dtype=complex)
        re[r, col] = re[col, r] = 1.0
        im = np.zeros((size, size), dtype=complex)
        im[r, col] = 1j
        im[col, r] = -1j
        terms[vars_[r]] = re
        terms[vars_[n + r]] = im
    return terms


def build_plain_lmi(instance):
    """Plain LMI relaxation (all users must have ``beta > 0``)."""
    if np.any(instance.betas <= 0):
        raise RoutingError("users with beta = 0 belong to build_baseline")
    return _design_model(instance)


def build_restricted_sdr1(instance):
    """Plain relaxation plus ``tr(W_k)/g - x3 >= t_k`` and ``t_k I >= sum_{j!=k} W_j``."""
    if np.any(instance.betas <= 0):
        raise RoutingError("users with beta = 0 belong to build_baseline")
    return _design_model(instance, RESTRICTED1)


def build_restricted_sdr2(instance):
    """Plain relaxation plus the arrow-matrix form of the eigenvalue bound."""
    if np.any(instance.betas <= 0):
        raise RoutingError("users with beta = 0 belong to build_baseline")
    return _design_model(instance, RESTRICTED2)


def build_baseline(instance):
    """Relaxation for the direction-only error model (every ``beta = 0``)."""
    if np.any(instance.betas != 0):
        raise RoutingError("build_baseline needs beta = 0 for every user")
    return _design_model(instance)


def build_design(instance, relaxation=PLAIN):
    """Design program with per-user routing: ``beta = 0`` users get the baseline LMI."""
    if relaxation in (PLAIN, BASELINE):
        return _design_model(instance)
    if relaxation in (RESTRICTED1, RESTRICTED2):
        return _design_model(instance, relaxation)
    raise ValueError(f"unknown relaxation {relaxation!r}")


# ----------------------------------------------------------------------------
# solutions


def design_value(solution):
    """Total power ``sum tr W_k`` of a solved design program."""
    return -solution.objective_dual


def extract_beamformers(solution, instance, rank_tol=RANK_TOL):
    """Read ``W_k`` from a solved design program and extract beamformers if rank one."""
    if solution.status != Status.OPTIMAL:
        raise ContractError(f"expected an Optimal solution, got {solution.status}")
    layout = solution.meta["layout"]
    n = layout["n_t"]
    y = solution.dual
    grams, ratios, ws = [], [], []
    for idx in layout["W"]:
        Wk = from_herm_coords(y[idx], n)
        lam, V = hermitian_eig(Wk)
        grams.append(Wk)
        ratios.append(float(lam[1] / lam[0]) if n > 1 and lam[0] > 0 else (0.0 if lam[0] > 0 else 1.0))
        w = np.sqrt(max(lam[0], 0.0)) * V[:, 0]
        ws.append(fix_phase(w))
    mult = []
    for k in range(layout["K"]):
        entry = {}
        for name in ("x1", "x2", "x3", "t"):
            v = layout[name][k]
            if v is not None:
                entry[name] = float(y[v])
        mult.append(entry)
    obj = design_value(solution)
    rank_one = all(r <= rank_tol for r in ratios)
    return DesignResult(
        status=RANK_ONE if rank_one else HIGH_RANK,
        beamformers=ws if rank_one else None,
        gram_matrices=grams,
        multipliers=mult,
        objective=obj,
        extracted_power=float(sum(np.vdot(w, w).real for w in ws)) if rank_one else None,
        eig_ratio=ratios,
        relaxation=solution.meta.get("kind", ""),
        solver_status=str(solution.status),
    )


def fix_phase(w):
    """Rotate ``w`` so its largest-magnitude entry is real and nonnegative."""
    w = np.asarray(w, dtype=complex)
    i = int(np.argmax(np.abs(w)))
    if abs(w[i]) == 0:
        return w.copy()
    out = w * np.exp(-1j * np.angle(w[i]))
    out[i] = abs(w[i])  # exactly real, not just up to rounding
    return out


def _failed(status, relaxation, solver_status, stages):
    return DesignResult(status, None, [], [], float("nan"), None, [], relaxation, dict(stages),
                        str(solver_status))


def solve_design(instance, relaxation="auto", settings=None, rank_tol=RANK_TOL):
    """Solve the design problem under a relaxation policy.

    ``auto`` solves the plain relaxation and falls back to the first and
    then the second restricted relaxation while the answer is high rank.
    A numerical failure also moves on to the next stage; the restricted
    programs are tightenings, so a rank-one answer there is still a valid
    robust design.  Users with ``beta = 0`` always use the baseline constraint.
    """
    if relaxation == "auto":
        order = [PLAIN, RESTRICTED1, RESTRICTED2]
        if np.all(instance.betas == 0):
            order = [BASELINE]
    else:
        order = [relaxation]
    stages = {}
    result = failure = None
    for stage in order:
        sol = sdp_core.solve(build_design(instance, stage), settings)
        name = BASELINE if np.all(instance.betas == 0) else stage
        if sol.status == Status.DUAL_INFEASIBLE:
            if result is not None:
                break  # a tighter stage ran out of room; keep the looser answer
            if failure is None:
                return _failed(INFEASIBLE, name, sol.status, stages)
            # only a tightening is infeasible, which says nothing about the instance
            return _failed(SOLVER_FAILURE, failure[0], failure[1], stages)
        if sol.status != Status.OPTIMAL:
            stages[name] = float("nan")
            failure = failure or (name, sol.status)
            continue
        result = extract_beamformers(sol, instance, rank_tol)
        result.relaxation = name
        stages[name] = result.objective
        result.stage_objectives = dict(stages)
        if result.status == RANK_ONE:
            break
    if result is None:
        return _failed(SOLVER_FAILURE, failure[0], failure[1], stages)
    return result
