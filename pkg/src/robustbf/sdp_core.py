"""Small dense block semidefinite-program solver.

Problems are stored in the standard primal form::

    minimize    sum_b <C_b, X_b>
    subject to  sum_b <A_ib, X_b> = b_i      i = 1..m
                X_b in K_b

where each ``K_b`` is either the cone of positive semidefinite real
symmetric matrices or the nonnegative orthant.  The dual is::

    maximize    b^T y
    subject to  S_b = C_b - sum_i y_i A_ib in K_b

The solver is a primal-dual path-following method with Nesterov-Todd
scaling and Mehrotra predictor-corrector steps, run on the homogeneous
self-dual embedding so that infeasibility is detected through a
certificate rather than by divergence.
"""
import enum
import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla

from .hermlin import j_average

log = logging.getLogger(__name__)

PSD = "psd"
NONNEG = "nonneg"

MAX_BLOCK_DIM = 256
MAX_ROWS = 2048
RANK_TOL = 1e-10
REFINE_STEPS = 10


class SizeError(ValueError):
    pass


class Status(str, enum.Enum):
    OPTIMAL = "Optimal"
    PRIMAL_INFEASIBLE = "PrimalInfeasible"
    DUAL_INFEASIBLE = "DualInfeasible"
    ITERATION_LIMIT = "IterationLimit"
    NUMERICAL_TROUBLE = "NumericalTrouble"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class Block:
    kind: str
    dim: int
    # data of the block is the real image of complex Hermitian data
    embedded: bool = False

    def __post_init__(self):
        if self.kind not in (PSD, NONNEG):
            raise ValueError(f"unknown block kind {self.kind!r}")
        if self.dim < 1:
            raise ValueError("block dimension must be positive")
        if self.embedded and (self.kind != PSD or self.dim % 2):
            raise ValueError("embedded blocks must be PSD with even dimension")

    @property
    def shape(self):
        return (self.dim, self.dim) if self.kind == PSD else (self.dim,)

    @property
    def barrier_degree(self):
        return self.dim


@dataclass
class Presolve:
    """Row transform applied by :func:`presolve`."""

    n_rows: int
    kept: np.ndarray
    row_norms: np.ndarray
    infeasible: bool = False
    certificate: np.ndarray = None

    def recover_dual(self, y_reduced):
        y = np.zeros(self.n_rows)
        y[self.kept] = np.asarray(y_reduced) / self.row_norms[self.kept]
        return y


@dataclass
class SdpProblem:
    """Block SDP in standard primal form.

    ``a[b]`` is a pair ``(rows, mats)``: the indices of the equality rows
    that touch block ``b`` and the stacked coefficients of those rows
    (shape ``(len(rows), n, n)`` for PSD blocks, ``(len(rows), n)`` for
    NONNEG blocks).  ``meta`` carries layout information from builders and
    is copied onto the solution.
    """

    blocks: list
    c: list
    a: list
    b: np.ndarray
    meta: dict = field(default_factory=dict)
    presolve_info: Presolve = None

    @property
    def n_rows(self):
        return len(self.b)

    def row(self, i):
        """Coefficients of row ``i`` as ``{block index: array}``."""
        out = {}
        for k, (rows, mats) in enumerate(self.a):
            hit = np.flatnonzero(rows == i)
            if hit.size:
                out[k] = mats[hit[0]]
        return out

    def validate(self):
        if not self.blocks:
            raise ValueError("problem needs at least one block")
        if len(self.c) != len(self.blocks) or len(self.a) != len(self.blocks):
            raise ValueError("per-block data length mismatch")
        if self.n_rows > MAX_ROWS:
            raise SizeError(f"{self.n_rows} rows exceeds the supported {MAX_ROWS}")
        for blk, cb, (rows, mats) in zip(self.blocks, self.c, self.a):
            if blk.kind == PSD and blk.dim > MAX_BLOCK_DIM:
                raise SizeError(f"PSD block of dimension {blk.dim} exceeds {MAX_BLOCK_DIM}")
            if cb.shape != blk.shape or mats.shape[1:] != blk.shape or len(rows) != len(mats):
                raise ValueError("block data has the wrong shape")
            if len(rows) and (len(np.unique(rows)) != len(rows) or rows.min() < 0 or rows.max() >= self.n_rows):
                raise ValueError("row indices of a block must be distinct and in range")
            if not (np.all(np.isfinite(cb)) and np.all(np.isfinite(mats))):
                raise ValueError("non-finite problem data")
            if blk.kind == PSD:
                if np.max(np.abs(cb - cb.T), initial=0.0) > 1e-12 * (1 + np.max(np.abs(cb))):
                    raise ValueError("objective block is not symmetric")
                if mats.size and np.max(np.abs(mats - mats.transpose(0, 2, 1))) > 1e-12 * (1 + np.max(np.abs(mats))):
                    raise ValueError("coefficient block is not symmetric")
        if not np.all(np.isfinite(self.b)):
            raise ValueError("non-finite right-hand side")

    def dense_rows(self):
        """Equality rows as a dense ``(m, N)`` matrix over the stacked blocks."""
        cols = [int(np.prod(blk.shape)) for blk in self.blocks]
        offsets = np.concatenate([[0], np.cumsum(cols)])
        A = np.zeros((self.n_rows, offsets[-1]))
        for k, (rows, mats) in enumerate(self.a):
            A[rows, offsets[k]:offsets[k + 1]] = mats.reshape(len(rows), -1)
        return A


class SdpBuilder:
    """Incremental assembly of an :class:`SdpProblem`."""

    def __init__(self):
        self.blocks = []
        self._c = []
        self._entries = []  # per block: list of (row, coefficient)
        self._b = []

    def add_block(self, kind, dim, embedded=False):
        blk = Block(kind, dim, embedded)
        self.blocks.append(blk)
        self._c.append(np.zeros(blk.shape))
        self._entries.append([])
        return len(self.blocks) - 1

    def set_objective(self, block, coef):
        self._c[block] = np.array(coef, dtype=float).reshape(self.blocks[block].shape)

    def add_row(self, coefs, rhs):
        """Add ``sum_b <coefs[b], X_b> = rhs``; returns the row index."""
        i = len(self._b)
        for k, coef in coefs.items():
            self._entries[k].append((i, np.asarray(coef, dtype=float).reshape(self.blocks[k].shape)))
        self._b.append(float(rhs))
        return i

    def build(self, meta=None):
        a = []
        for blk, entries in zip(self.blocks, self._entries):
            rows = np.array([i for i, _ in entries], dtype=int)
            mats = np.array([m for _, m in entries]) if entries else np.zeros((0,) + blk.shape)
            a.append((rows, mats))
        prob = SdpProblem(list(self.blocks), list(self._c), a, np.array(self._b), dict(meta or {}))
        prob.validate()
        return prob


@dataclass(frozen=True)
class SolverSettings:
    tol_gap: float = 1e-8
    tol_feas: float = 1e-8
    max_iters: int = 200
    step_fraction: float = 0.98

    def __post_init__(self):
        if min(self.tol_gap, self.tol_feas) <= 0 or self.max_iters < 1:
            raise ValueError("solver tolerances and iteration limit must be positive")
        if not 0 < self.step_fraction < 1:
            raise ValueError("step_fraction must lie in (0, 1)")


@dataclass
class SdpSolution:
    status: Status
    primal: list
    dual: np.ndarray
    dual_slack: list
    objective_primal: float
    objective_dual: float
    gap: float
    residuals: tuple
    iterations: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def optimal(self):
        return self.status == Status.OPTIMAL


# ----------------------------------------------------------------------------
# presolve


def presolve(problem):
    """Drop dependent rows and normalize the rest to unit Frobenius norm.

    The returned problem carries a :class:`Presolve` record in
    ``presolve_info``.  Inconsistent dependent rows set its ``infeasible``
    flag together with a Farkas vector ``y`` (in the original row space)
    satisfying ``A^T y = 0`` and ``b^T y = 1``.
    """
    problem.validate()
    m = problem.n_rows
    A = problem.dense_rows()
    b = problem.b.astype(float)
    norms = np.linalg.norm(A, axis=1)

    zero = norms == 0
    if np.any(zero & (b != 0)):
        i = int(np.flatnonzero(zero & (b != 0))[0])
        cert = np.zeros(m)
        cert[i] = 1.0 / b[i]
        info = Presolve(m, np.flatnonzero(~zero), np.where(zero, 1.0, norms), True, cert)
        return _reduced(problem, info)
    norms = np.where(zero, 1.0, norms)
    live = np.flatnonzero(~zero)
    As = A[live] / norms[live, None]
    bs = b[live] / norms[live]

    kept = live
    dependent = np.zeros(0, dtype=int)
    if len(live) > 1:
        gram = As @ As.T
        if np.linalg.eigvalsh(gram)[0] < 1e-8:
            _, R, piv = sla.qr(As.T, mode="economic", pivoting=True)
            diag = np.abs(np.diag(R))
            rank = int(np.sum(diag > RANK_TOL))
            kept = np.sort(live[piv[:rank]])
            dependent = np.sort(live[piv[rank:]])

    info = Presolve(m, kept, norms)
    if dependent.size:
        pos = {r: j for j, r in enumerate(live)}
        Ak = As[[pos[r] for r in kept]]
        bk = bs[[pos[r] for r in kept]]
        for d in dependent:
            ad, bd = As[pos[d]], bs[pos[d]]
            z = np.linalg.lstsq(Ak.T, ad, rcond=None)[0]
            mismatch = bd - z @ bk
            if abs(mismatch) > 1e-9 * (1 + abs(bd) + np.abs(z) @ np.abs(bk)):
                # y = (z on kept rows, -1 on d) in the scaled space
                cert = np.zeros(m)
                cert[kept] = z / norms[kept]
                cert[d] = -1.0 / norms[d]
                cert /= -mismatch
                info.infeasible = True
                info.certificate = cert
                break
    return _reduced(problem, info)


def _reduced(problem, info):
    keep_pos = -np.ones(problem.n_rows, dtype=int)
    keep_pos[info.kept] = np.arange(len(info.kept))
    a = []
    for rows, mats in problem.a:
        sel = keep_pos[rows] >= 0
        new_rows = keep_pos[rows[sel]]
        scale = info.row_norms[rows[sel]]
        new_mats = mats[sel] / scale.reshape((-1,) + (1,) * (mats.ndim - 1))
        a.append((new_rows, new_mats))
    b = problem.b[info.kept] / info.row_norms[info.kept]
    return SdpProblem(list(problem.blocks), [c.copy() for c in problem.c], a, b,
                      dict(problem.meta), info)


# ----------------------------------------------------------------------------
# cone algebra on lists of blocks


def _factor_rows(flat):
    """Write ``flat = diag(scl) @ uniq[idx]`` with distinct rows in ``uniq``.

    Design programs reuse the same coefficient matrix (up to a scalar) across
    many rows of a block, which makes A, A^T and the Schur complement cheap.
    """
    if not len(flat):
        return flat, np.zeros(0, dtype=int), np.zeros(0)
    piv = np.argmax(np.abs(flat), axis=1)
    scl = flat[np.arange(len(flat)), piv]
    scl = np.where(scl == 0, 1.0, scl)
    canon = flat / scl[:, None]
    keys = {}
    idx = np.empty(len(flat), dtype=int)
    for i, row in enumerate(np.round(canon, 12) + 0.0):  # + 0.0 folds -0.0 into 0.0
        idx[i] = keys.setdefault(row.tobytes(), len(keys))
    uniq = np.zeros((len(keys), flat.shape[1]))
    uniq[idx] = canon
    if np.max(np.abs(uniq[idx] - canon)) > 1e-14:
        # rows that only agree after rounding: keep them apart
        return flat, np.arange(len(flat)), np.ones(len(flat))
    return uniq, idx, scl


class _Cones:
    def __init__(self, problem):
        self.blocks = problem.blocks
        self.m = problem.n_rows
        self.a = []
        for blk, (rows, mats) in zip(problem.blocks, problem.a):
            flat = mats.reshape(len(rows), -1)
            uniq, idx, scl = _factor_rows(flat)
            # row-space lift: block coefficients = lift @ uniq
            lift = np.zeros((self.m, len(uniq)))
            lift[rows, idx] = scl
            span = slice(int(rows.min()), int(rows.max()) + 1) if len(rows) else slice(0, 0)
            self.a.append((rows, uniq, lift, span))
        self.nu = sum(blk.barrier_degree for blk in self.blocks)

    def identity(self):
        return [np.eye(b.dim) if b.kind == PSD else np.ones(b.dim) for b in self.blocks]

    def A(self, xs):
        out = np.zeros(self.m)
        for x, (rows, uniq, lift, _) in zip(xs, self.a):
            if len(rows):
                out += lift @ (uniq @ x.ravel())
        return out

    def AT(self, y):
        out = []
        for blk, (rows, uniq, lift, _) in zip(self.blocks, self.a):
            if len(rows):
                out.append(((y @ lift) @ uniq).reshape(blk.shape))
            else:
                out.append(np.zeros(blk.shape))
        return out

    @staticmethod
    def dot(xs, ss):
        return float(sum(np.vdot(x, s) for x, s in zip(xs, ss)))

    @staticmethod
    def norm(xs):
        return float(np.sqrt(sum(np.vdot(x, x) for x in xs)))


def _lincomb(*pairs):
    """Blockwise sum of ``coef * blocks`` for (coef, blocks) pairs."""
    out = None
    for coef, xs in pairs:
        if out is None:
            out = [coef * x for x in xs]
        else:
            out = [o + coef * x for o, x in zip(out, xs)]
    return out


class _Scaling:
    """Nesterov-Todd scaling of one iterate ``(x, s)``.

    For PSD blocks ``R`` satisfies ``R^T S R = R^{-1} X R^{-T} = diag(lam)``.
    For NONNEG blocks ``w = sqrt(x / s)`` and ``lam = sqrt(x s)``.
    """

    def __init__(self, cones, xs, ss):
        self.cones = cones
        self.parts = []
        for blk, x, s in zip(cones.blocks, xs, ss):
            if blk.kind == PSD:
                lx = np.linalg.cholesky(x)
                ls = np.linalg.cholesky(s)
                _, lam, vt = np.linalg.svd(ls.T @ lx)
                R = (lx @ vt.T) / np.sqrt(lam)
                Rinv = (R.T @ s) / lam[:, None]
                self.parts.append((lam, R, Rinv, R @ R.T))
            else:
                self.parts.append((np.sqrt(x * s), np.sqrt(x / s), None, None))

    @property
    def lam(self):
        return [p[0] for p in self.parts]

    def G(self, zs):
        """``z -> G z G`` (the map taking ds to -dx in the Newton system)."""
        out = []
        for blk, z, (lam, R, _, G) in zip(self.cones.blocks, zs, self.parts):
            out.append(G @ z @ G if blk.kind == PSD else R * R * z)
        return out

    def scale_x(self, xs):
        out = []
        for blk, x, (_, R, Rinv, _) in zip(self.cones.blocks, xs, self.parts):
            out.append(Rinv @ x @ Rinv.T if blk.kind == PSD else x / R)
        return out

    def unscale_x(self, zs):
        out = []
        for blk, z, (_, R, _, _) in zip(self.cones.blocks, zs, self.parts):
            out.append(R @ z @ R.T if blk.kind == PSD else R * z)
        return out

    def scale_s(self, ss):
        out = []
        for blk, s, (_, R, _, _) in zip(self.cones.blocks, ss, self.parts):
            out.append(R.T @ s @ R if blk.kind == PSD else R * s)
        return out

    def schur(self):
        m = self.cones.m
        M = np.zeros((m, m))
        for blk, (rows, uniq, lift, span), (lam, R, _, _) in zip(self.cones.blocks, self.cones.a, self.parts):
            if not len(rows):
                continue
            if blk.kind == PSD:
                mats = uniq.reshape(len(uniq), blk.dim, blk.dim)
                F = (R.T @ mats @ R).reshape(len(uniq), -1)
            else:
                F = uniq * R
            part = lift[span]
            M[span, span] += part @ ((F @ F.T) @ part.T)
        return M


def _jordan(blocks, us, vs):
    return [0.5 * (u @ v + v @ u) if b.kind == PSD else u * v for b, u, v in zip(blocks, us, vs)]


def _lam_div(blocks, lams, xis):
    """Solve ``lam o z = xi`` for ``z`` with ``lam`` diagonal."""
    out = []
    for b, lam, xi in zip(blocks, lams, xis):
        if b.kind == PSD:
            out.append(2.0 * xi / (lam[:, None] + lam[None, :]))
        else:
            out.append(xi / lam)
    return out


def _max_step(blocks, lams, dirs):
    alpha = np.inf
    for b, lam, d in zip(blocks, lams, dirs):
        if b.kind == PSD:
            r = 1.0 / np.sqrt(lam)
            q = d * r[:, None] * r[None, :]
            e = np.linalg.eigvalsh(0.5 * (q + q.T))[0]
        else:
            e = np.min(d / lam)
        if e < 0:
            alpha = min(alpha, -1.0 / e)
    return alpha


def _cholesky(M):
    scale = max(1.0, float(np.max(np.diag(M))))
    delta = 0.0
    for attempt in range(4):
        try:
            return sla.cho_factor(M + delta * np.eye(len(M)), lower=True, check_finite=True)
        except (np.linalg.LinAlgError, ValueError):
            delta = 1e-12 * scale * (100.0 ** attempt)
    return None


# ----------------------------------------------------------------------------
# solver


def _empty_solution(status, problem, iterations=0):
    return SdpSolution(status, None, None, None, np.nan, np.nan, np.nan, (np.nan, np.nan),
                       iterations, dict(problem.meta))


def solve(problem, settings=None):
    """Solve ``problem``; never raises on well-formed input."""
    settings = settings or SolverSettings()
    red = presolve(problem)
    info = red.presolve_info
    if info.infeasible:
        y = info.certificate
        slack = [-s for s in _Cones(problem).AT(y)]
        sol = _empty_solution(Status.PRIMAL_INFEASIBLE, problem)
        sol.dual, sol.dual_slack = y, slack
        return sol
    if red.n_rows == 0:
        return _solve_unconstrained(problem)
    return _hsde(problem, red, settings)


def _solve_unconstrained(problem):
    # min <C, X> over the cone alone: 0 if C is in the dual cone, else unbounded
    cones = _Cones(problem)
    ok = all(np.linalg.eigvalsh(c)[0] >= 0 if b.kind == PSD else np.all(c >= 0)
             for b, c in zip(problem.blocks, problem.c))
    if ok:
        xs = [np.zeros(b.shape) for b in problem.blocks]
        sol = SdpSolution(Status.OPTIMAL, xs, np.zeros(problem.n_rows), [c.copy() for c in problem.c],
                          0.0, 0.0, 0.0, (0.0, 0.0), 0, dict(problem.meta))
        return sol
    sol = _empty_solution(Status.DUAL_INFEASIBLE, problem)
    ray = []
    for b, c in zip(problem.blocks, problem.c):
        if b.kind == PSD:
            lam, V = np.linalg.eigh(c)
            ray.append(np.outer(V[:, 0], V[:, 0]) if lam[0] < 0 else np.zeros(b.shape))
        else:
            ray.append((c < 0).astype(float))
    t = -cones.dot(problem.c, ray)
    sol.primal = [r / t for r in ray]
    return sol


def _hsde(problem, red, settings):
    cones = _Cones(red)
    blocks = cones.blocks
    b, c = red.b, red.c
    nb = np.linalg.norm(b)
    nc = cones.norm(c)

    xs, ss = cones.identity(), cones.identity()
    y = np.zeros(cones.m)
    tau = kappa = 1.0
    status = Status.ITERATION_LIMIT
    it = 0
    tight = dict(tol_gap=0.5 * settings.tol_gap, tol_feas=0.5 * settings.tol_feas)
    best, best_merit = None, np.inf

    for it in range(1, settings.max_iters + 1):
        Ax = cones.A(xs)
        ATy = cones.AT(y)
        cx, by = cones.dot(c, xs), float(b @ y)
        rp = Ax - tau * b
        rd = _lincomb((1.0, ATy), (1.0, ss), (-tau, c))
        rg = cx - by + kappa
        mu = (cones.dot(xs, ss) + tau * kappa) / (cones.nu + 1)

        # termination
        pres = np.linalg.norm(rp) / tau / max(1.0, nb)
        dres = cones.norm(rd) / tau / (1 + nc)
        pobj, dobj = cx / tau, by / tau
        log.debug("it %3d pobj %+.9e dobj %+.9e pres %.1e dres %.1e mu %.1e tau %.1e kappa %.1e",
                  it, pobj, dobj, pres, dres, mu, tau, kappa)
        rgap = abs(pobj - dobj) / (1 + abs(pobj))
        merit = max(pres / settings.tol_feas, dres / settings.tol_feas, rgap / settings.tol_gap)
        if merit <= 1.0:
            sol = _finish(problem, red, xs, y, ss, tau, it, settings)
            if sol is not None:
                return sol
        if merit < best_merit:
            # kept in case the iterates stall just short of the tolerances
            best_merit = merit
            best = ([v.copy() for v in xs], y.copy(), [v.copy() for v in ss], tau, it)
        if by > 0:
            res = cones.norm(_lincomb((1.0, ATy), (1.0, ss))) / by
            if res <= tight["tol_feas"] and tau < kappa:
                return _primal_infeasible(problem, red, y, ss, by, it)
        if cx < 0:
            res = np.linalg.norm(Ax) / -cx
            if res <= tight["tol_feas"] and tau < kappa:
                return _dual_infeasible(problem, red, xs, ss, cx, it)

        try:
            W = _Scaling(cones, xs, ss)
        except np.linalg.LinAlgError:
            status = Status.NUMERICAL_TROUBLE
            break
        factor = _cholesky(W.schur())
        if factor is None:
            status = Status.NUMERICAL_TROUBLE
            break
        lam = W.lam
        Gc = W.G(c)
        p = sla.cho_solve(factor, cones.A(Gc) + b)
        GATp = W.G(cones.AT(p))
        dx1 = _lincomb((1.0, GATp), (-1.0, Gc))
        denom = -b @ p + cones.dot(c, dx1) - kappa / tau

        def newton(rhs_p, rhs_d, rhs_g, rx, r_tk):
            # A dx - b dtau = rhs_p, A^T dy + ds - c dtau = rhs_d,
            # c.dx - b.dy + dkappa = rhs_g, dx + G ds = rx, kappa dtau + tau dkappa = r_tk
            Grhs = W.G(rhs_d)
            q = sla.cho_solve(factor, rhs_p - cones.A(rx) + cones.A(Grhs))
            dx0 = _lincomb((1.0, rx), (-1.0, Grhs), (1.0, W.G(cones.AT(q))))
            num = rhs_g + b @ q - cones.dot(c, dx0) - r_tk / tau
            dtau = num / denom
            dy = q + dtau * p
            dx = _lincomb((1.0, dx0), (dtau, dx1))
            ds = _lincomb((1.0, rhs_d), (-1.0, cones.AT(dy)), (dtau, c))
            dkappa = (r_tk - kappa * dtau) / tau
            return dx, dy, ds, dtau, dkappa

        def direction(eta, xi, r_tk):
            # xi: target of lam o (dx~ + ds~) in scaled space
            rx = W.unscale_x(_lam_div(blocks, lam, xi))
            rhs_p, rhs_d, rhs_g = -eta * rp, _lincomb((-eta, rd)), -eta * rg
            d = newton(rhs_p, rhs_d, rhs_g, rx, r_tk)
            floor = 1e-14 * (max(1.0, np.linalg.norm(rhs_p)) + max(1.0, abs(rhs_g)))
            zero = [np.zeros_like(v) for v in rx]

            def defect(d):
                ep = rhs_p - (cones.A(d[0]) - b * d[3])
                eg = rhs_g - (cones.dot(c, d[0]) - b @ d[1] + d[4])
                return ep, eg, np.linalg.norm(ep) + abs(eg)

            ep, eg, err = defect(d)
            for _ in range(REFINE_STEPS):
                # iterative refinement against the unreduced equations; stops as
                # soon as a correction fails to help (ill-conditioned Schur matrix)
                if err <= floor:
                    break
                e = newton(ep, zero, eg, zero, 0.0)
                trial = (_lincomb((1.0, d[0]), (1.0, e[0])), d[1] + e[1],
                         _lincomb((1.0, d[2]), (1.0, e[2])), d[3] + e[3], d[4] + e[4])
                ep2, eg2, err2 = defect(trial)
                if not err2 < 0.5 * err:
                    if err2 < err:
                        d = trial
                    break
                d, ep, eg, err = trial, ep2, eg2, err2
            return d

        def step_to_boundary(dx, ds, dtau, dkappa):
            a = min(_max_step(blocks, lam, W.scale_x(dx)), _max_step(blocks, lam, W.scale_s(ds)))
            if dtau < 0:
                a = min(a, -tau / dtau)
            if dkappa < 0:
                a = min(a, -kappa / dkappa)
            return a

        lamsq = [np.diag(l * l) if blk.kind == PSD else l * l for blk, l in zip(blocks, lam)]
        # predictor
        aff = direction(1.0, _lincomb((-1.0, lamsq)), -tau * kappa)
        a_aff = min(1.0, step_to_boundary(aff[0], aff[2], aff[3], aff[4]))
        sigma = (1.0 - a_aff) ** 3
        # corrector
        dxs, dss = W.scale_x(aff[0]), W.scale_s(aff[2])
        corr = _jordan(blocks, dxs, dss)
        ident = cones.identity()
        xi = _lincomb((-1.0, lamsq), (sigma * mu, ident), (-1.0, corr))
        r_tk = sigma * mu - tau * kappa - aff[3] * aff[4]
        dx, dy, ds, dtau, dkappa = direction(1.0 - sigma, xi, r_tk)
        amax = step_to_boundary(dx, ds, dtau, dkappa)
        alpha = min(1.0, settings.step_fraction * amax)
        if not np.isfinite(alpha) or alpha < 1e-12:
            status = Status.NUMERICAL_TROUBLE
            break

        xs = [0.5 * (v + v.T) if blk.kind == PSD else v
              for blk, v in zip(blocks, _lincomb((1.0, xs), (alpha, dx)))]
        ss = [0.5 * (v + v.T) if blk.kind == PSD else v
              for blk, v in zip(blocks, _lincomb((1.0, ss), (alpha, ds)))]
        y = y + alpha * dy
        tau += alpha * dtau
        kappa += alpha * dkappa
        if not (np.isfinite(tau) and tau > 0 and kappa > 0):
            status = Status.NUMERICAL_TROUBLE
            break

    log.debug("solver stopped with %s after %d iterations", status, it)
    if best is not None and best_merit <= 10.0:
        sol = _finish(problem, red, *best[:4], it, settings)
        if sol is not None:
            log.debug("accepting iterate %d after the stall", best[4])
            return sol
    sol = _package(problem, red, xs, y, ss, tau, it)
    sol.status = status
    return sol


def _package(problem, red, xs, y, ss, tau, it):
    X = [x / tau for x in xs]
    S = [s / tau for s in ss]
    for k, blk in enumerate(problem.blocks):
        if blk.embedded:
            X[k] = j_average(X[k])
            S[k] = j_average(S[k])
    yo = red.presolve_info.recover_dual(y / tau)
    pobj, dobj, pres, dres = _metrics(problem, X, yo, S)
    return SdpSolution(Status.OPTIMAL, X, yo, S, pobj, dobj, pobj - dobj, (pres, dres), it,
                       dict(problem.meta))


def _finish(problem, red, xs, y, ss, tau, it, settings):
    sol = _package(problem, red, xs, y, ss, tau, it)
    pres, dres = sol.residuals
    if (pres <= settings.tol_feas and dres <= settings.tol_feas
            and abs(sol.gap) <= settings.tol_gap * (1 + abs(sol.objective_primal))):
        return sol
    return None


def _metrics(problem, X, y, S):
    cones = _Cones(problem)
    Ax = cones.A(X)
    norms = np.linalg.norm(problem.dense_rows(), axis=1)
    norms = np.where(norms == 0, 1.0, norms)
    pres = float(np.linalg.norm((Ax - problem.b) / norms) / max(1.0, np.linalg.norm(problem.b / norms)))
    rd = _lincomb((1.0, cones.AT(y)), (1.0, S), (-1.0, problem.c))
    dres = cones.norm(rd) / (1 + cones.norm(problem.c))
    return cones.dot(problem.c, X), float(problem.b @ y), pres, dres


def _primal_infeasible(problem, red, y, ss, by, it):
    # Farkas ray normalized to b^T y = 1
    sol = _empty_solution(Status.PRIMAL_INFEASIBLE, problem, it)
    sol.dual = red.presolve_info.recover_dual(y / by)
    S = [s / by for s in ss]
    for k, blk in enumerate(problem.blocks):
        if blk.embedded:
            S[k] = j_average(S[k])
    sol.dual_slack = S
    return sol


def _dual_infeasible(problem, red, xs, ss, cx, it):
    # primal ray normalized to <C, X> = -1
    sol = _empty_solution(Status.DUAL_INFEASIBLE, problem, it)
    X = [x / -cx for x in xs]
    for k, blk in enumerate(problem.blocks):
        if blk.embedded:
            X[k] = j_average(X[k])
    sol.primal = X
    return sol


def farkas_residual(problem, solution):
    """Violation of ``A^T y + S = 0, b^T y = 1, S in K`` for an infeasibility ray."""
    cones = _Cones(problem)
    y = solution.dual
    S = [-s for s in cones.AT(y)]
    worst = abs(float(problem.b @ y) - 1.0)
    for blk, s in zip(problem.blocks, S):
        low = np.linalg.eigvalsh(s)[0] if blk.kind == PSD else np.min(s)
        worst = max(worst, -low)
    return worst


def check_kkt(problem, solution):
    """Recompute ``(primal_res, dual_res, gap, complementarity)`` from scratch.

    ``primal_res`` is the 2-norm of the equality residual with each row
    divided by its coefficient norm, relative to ``max(1, ||b||)`` on the
    same row scaling; ``dual_res`` is the Frobenius norm of
    ``A^T y + S - C`` relative to ``1 + ||C||``.
    """
    if solution.primal is None or solution.dual_slack is None:
        raise ValueError("solution carries no primal-dual pair")
    if len(solution.primal) != len(problem.blocks) or len(solution.dual) != problem.n_rows:
        raise ValueError("solution does not match the problem dimensions")
    for blk, x, s in zip(problem.blocks, solution.primal, solution.dual_slack):
        if np.shape(x) != blk.shape or np.shape(s) != blk.shape:
            raise ValueError("solution block has the wrong shape")

    y = np.asarray(solution.dual)
    pres2 = 0.0
    bnorm2 = 0.0
    for i in range(problem.n_rows):
        coefs = problem.row(i)
        lhs = sum(float(np.sum(coef * solution.primal[k])) for k, coef in coefs.items())
        norm = np.sqrt(sum(float(np.sum(coef * coef)) for coef in coefs.values())) or 1.0
        pres2 += ((lhs - problem.b[i]) / norm) ** 2
        bnorm2 += (problem.b[i] / norm) ** 2
    dres2 = 0.0
    cnorm2 = 0.0
    for k in range(len(problem.blocks)):
        rows, mats = problem.a[k]
        r = solution.dual_slack[k] - problem.c[k]
        for i, mat in zip(rows, mats):
            r = r + y[i] * mat
        dres2 += float(np.sum(r * r))
        cnorm2 += float(np.sum(problem.c[k] ** 2))
    pobj = sum(float(np.sum(ck * xk)) for ck, xk in zip(problem.c, solution.primal))
    dobj = float(np.dot(problem.b, y))
    comp = sum(float(np.sum(xk * sk)) for xk, sk in zip(solution.primal, solution.dual_slack))
    return np.sqrt(pres2) / max(1.0, np.sqrt(bnorm2)), np.sqrt(dres2) / (1 + np.sqrt(cnorm2)), pobj - dobj, comp


def with_row(problem, coefs, rhs):
    """Copy of ``problem`` with one extra equality row appended."""
    i = problem.n_rows
    a = []
    for k, (rows, mats) in enumerate(problem.a):
        if k in coefs:
            coef = np.asarray(coefs[k], dtype=float).reshape((1,) + problem.blocks[k].shape)
            a.append((np.append(rows, i), np.concatenate([mats, coef])))
        else:
            a.append((rows.copy(), mats.copy()))
    out = replace(problem, a=a, b=np.append(problem.b, float(rhs)), presolve_info=None)
    out.validate()
    return out
