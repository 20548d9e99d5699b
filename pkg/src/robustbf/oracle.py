"""Independent checks of robust feasibility.

The worst case of ``h^H W~_k h`` over a user's uncertainty set is computed
twice, from the semidefinite relaxation of the homogenized problem and from
its dual, and can be cross-checked against brute-force sampling of the set.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from . import sdp_core
from .builders import (ContractError, build_inner_data, build_inner_dual, build_inner_sdr,
                       build_tilde_w, reduced_inner_data)
from .channel import sample_region_batch
from .hermlin import NumericError, as_hermitian, as_vector, deembed_hermitian, hermitian_eig
from .sdp_core import Status

log = logging.getLogger(__name__)

DUALITY_TOL = 1e-6
WITNESS_RANK_TOL = 1e-6
WITNESS_TOL = 1e-8
ROTATION_TOL = 1e-10
VERIFY_TOL = 1e-6
SAMPLE_CHUNK = 1 << 16


class OracleSolverError(RuntimeError):
    pass


@dataclass
class WorstCaseReport:
    sdp_value: list = field(default_factory=list)
    dual_value: list = field(default_factory=list)
    sampled_min: list = field(default_factory=list)
    n_samples: list = field(default_factory=list)
    margin: list = field(default_factory=list)

    @property
    def k_users(self):
        return len(self.sdp_value)

    def lines(self):
        out = ["user  sdp_value        dual_value       sampled_min      margin"]
        for k in range(self.k_users):
            out.append(f"{k:4d}  {self.sdp_value[k]:+.9e}  {self.dual_value[k]:+.9e}  "
                       f"{self.sampled_min[k]:+.9e}  {self.margin[k]:+.3e}")
        return out


def _objective(w_tilde, h):
    """Row-wise ``h^H W h`` for a stack of channels."""
    h = np.atleast_2d(h)
    return np.einsum("si,ij,sj->s", h.conj(), w_tilde, h).real


def _witness(Y, region):
    """Rank-one point of the relaxation, rotated onto the unsquared set."""
    lam, V = hermitian_eig(Y)
    if lam[0] <= 0 or (lam.size > 1 and lam[1] > WITNESS_RANK_TOL * lam[0]):
        return None
    n = region.n_t
    y = np.sqrt(lam[0]) * V[:, 0]
    if y.size == n:
        # beta = 0: the relaxation was over e_tilde alone
        y = np.concatenate([np.sqrt(region.alpha) * y, y])
    ne = np.linalg.norm(y[n:])
    if ne == 0:
        return None
    y = y / ne
    h, e = y[:n], y[n:]
    theta = -np.angle(np.vdot(region.h_q, e))
    h, e = np.exp(1j * theta) * h, np.exp(1j * theta) * e
    if max(region.violations(h, e)) > WITNESS_TOL:
        log.debug("rank-one witness misses the set by %.2e", max(region.violations(h, e)))
        return None
    return np.concatenate([h, e])


def inner_values(region, w_tilde, settings=None):
    """Worst case of ``h^H w_tilde h`` over ``region`` from the relaxation and its dual."""
    if not region.epsilon <= np.sqrt(2):
        raise ValueError("epsilon above sqrt(2) breaks the phase-rotation equivalence")
    if region.beta > 0:
        data = build_inner_data(region, w_tilde)
    else:
        data = reduced_inner_data(region, w_tilde)
    sol_p = sdp_core.solve(build_inner_sdr(data), settings)
    if sol_p.status != Status.OPTIMAL:
        raise OracleSolverError(f"inner relaxation ended with {sol_p.status}")
    sol_d = sdp_core.solve(build_inner_dual(data), settings)
    if sol_d.status != Status.OPTIMAL:
        raise OracleSolverError(f"inner dual ended with {sol_d.status}")
    value = sol_p.objective_primal
    dual = -sol_d.objective_primal
    if abs(value - dual) > DUALITY_TOL * (1 + abs(value)):
        log.warning("inner duality gap %.3e exceeds tolerance", abs(value - dual))
    Y = deembed_hermitian(sol_p.primal[0])
    return value, dual, _witness(Y, region)


def worst_case_value(ws, instance, k, settings=None):
    """``(sdp_value, dual_value, witness)`` for user ``k`` under beamformers ``ws``.

    ``witness`` is the stacked ``(h, e_tilde)`` attaining the value when the
    relaxation has a rank-one optimum, else None.
    """
    w_tilde = build_tilde_w(ws, k, instance.gamma[k])
    try:
        return inner_values(instance.regions[k], w_tilde, settings)
    except OracleSolverError as exc:
        raise OracleSolverError(f"user {k}: {exc}") from exc


def _phase_swept(region, w_tilde, e, h):
    """Minimize over ``u -> exp(j phi) u`` for each drawn pair in closed form.

    The error ball is invariant under a common phase on ``u``, so every point
    of the circle ``sqrt(alpha) e + exp(j phi) u`` is a draw of the same
    distribution.  Returns the minimal values and the minimizing channels.
    """
    a = np.sqrt(region.alpha) * e
    u = h - a
    wa, wu = a @ w_tilde.T, u @ w_tilde.T
    cross = np.einsum("si,si->s", wu, a.conj())  # a^H W u
    vals = (np.einsum("si,si->s", a.conj(), wa).real + np.einsum("si,si->s", u.conj(), wu).real
            - 2.0 * np.abs(cross))
    phase = np.where(cross != 0, -np.conj(cross) / np.where(cross != 0, np.abs(cross), 1.0), 1.0)
    return vals, a + phase[:, None] * u


def sample_min(region, w_tilde, n_samples, rng, return_point=False):
    """Minimum of ``h^H w_tilde h`` over ``n_samples`` draws from ``region``.

    Each draw is swept over the phase of its error vector in closed form.
    Draws come in fixed-size chunks, so a shorter run sees a prefix of the
    stream a longer run with the same seed sees.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    w_tilde = as_hermitian(w_tilde)
    best, best_h = np.inf, None
    left = n_samples
    while left > 0:
        h, e = sample_region_batch(region, rng, SAMPLE_CHUNK)
        vals, hs = _phase_swept(region, w_tilde, e[:left], h[:left])
        i = int(np.argmin(vals))
        if vals[i] < best:
            best, best_h = float(vals[i]), hs[i]
        left -= len(vals)
    return (best, best_h) if return_point else best


def sample_worst_case(ws, instance, k, n_samples, rng, return_point=False):
    w_tilde = build_tilde_w(ws, k, instance.gamma[k])
    return sample_min(instance.regions[k], w_tilde, n_samples, rng, return_point)


def sample_min_sinr(ws, instance, k, n_samples, rng):
    """Smallest SINR of user ``k`` over ``n_samples`` plain draws from its region."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    ws = np.array([as_vector(w) for w in ws])
    h, _ = sample_region_batch(instance.regions[k], rng, n_samples)
    gains = np.abs(h.conj() @ ws.T) ** 2  # (samples, users)
    interf = gains.sum(axis=1) - gains[:, k]
    return float(np.min(gains[:, k] / (interf + instance.sigma2[k])))


def verify_robust_feasibility(ws, instance, tol=VERIFY_TOL, n_samples=0, rng=None, settings=None):
    """Check ``min over E_k of h^H W~_k h >= sigma_k^2`` for every user.

    Returns ``(passed, report)``.  With ``n_samples > 0`` the report also
    carries the sampled minimum per user (not used for the verdict).
    """
    if ws is None:
        raise ContractError("no beamformers to verify")
    ws = [as_vector(w) for w in ws]
    if len(ws) != instance.k_users:
        raise ContractError(f"{len(ws)} beamformers for {instance.k_users} users")
    if n_samples and rng is None:
        rng = np.random.default_rng()
    report = WorstCaseReport()
    passed = True
    for k in range(instance.k_users):
        value, dual, _ = worst_case_value(ws, instance, k, settings)
        s2 = instance.sigma2[k]
        report.sdp_value.append(value)
        report.dual_value.append(dual)
        report.margin.append(value - s2)
        if n_samples:
            report.sampled_min.append(sample_worst_case(ws, instance, k, n_samples, rng))
        else:
            report.sampled_min.append(float("nan"))
        report.n_samples.append(int(n_samples))
        if value < s2 - tol * (1 + s2):
            passed = False
    return passed, report


def phase_rotation_witness(h, e_tilde, region, w_tilde=None):
    """Rotate a pair feasible for the squared direction constraint onto the original set.

    Input must satisfy ``|h_q^H e|^2 >= (1 - eps^2/2)^2``, ``||e|| = 1`` and
    ``||h - sqrt(alpha) e|| <= beta``.  The common phase ``-arg(h_q^H e)``
    makes ``h_q^H e`` real and nonnegative, which turns the squared
    constraint back into ``||e - h_q|| <= eps`` without changing ``h^H W h``.
    """
    h, e = as_vector(h), as_vector(e_tilde)
    tol = ROTATION_TOL
    r = 1.0 - region.epsilon ** 2 / 2.0
    c = np.vdot(region.h_q, e)
    bad = []
    if abs(c) ** 2 < r ** 2 - tol:
        bad.append(f"|h_q^H e|^2 = {abs(c) ** 2:.12g} below {r ** 2:.12g}")
    if abs(np.linalg.norm(e) - 1.0) > tol:
        bad.append(f"||e|| = {np.linalg.norm(e):.12g} is not 1")
    err = np.linalg.norm(h - np.sqrt(region.alpha) * e)
    if err > region.beta + tol:
        bad.append(f"||h - sqrt(alpha) e|| = {err:.12g} above beta = {region.beta:.12g}")
    if bad:
        raise ContractError("pair is infeasible: " + "; ".join(bad))

    rot = np.exp(-1j * np.angle(c)) if c != 0 else 1.0
    h2, e2 = rot * h, rot * e
    if np.vdot(region.h_q, e2).real < r - tol:
        raise NumericError("rotated direction misses the cap")
    if np.linalg.norm(h2 - np.sqrt(region.alpha) * e2) > region.beta + tol:
        raise NumericError("rotated error leaves the ball")
    if w_tilde is not None:
        w_tilde = as_hermitian(w_tilde)
        before, after = _objective(w_tilde, h)[0], _objective(w_tilde, h2)[0]
        if abs(before - after) > tol * (1 + abs(before)):
            raise NumericError("rotation changed the objective")
    return h2, e2


def dual_slack(data, x1, x2, x3):
    """``a0 - x1 a1 - x2 a2 - x3 a3`` of the inner dual."""
    return data.a0 - x1 * data.a1 - x2 * data.a2 - x3 * data.a3


def interior_relaxation_point(region, lam):
    """``lam y0 y0^H + (1 - lam) I / N_t`` with ``y0 = (sqrt(alpha) h_q, h_q)``.

    Positive definite for ``lam < 1`` with unit trace on the direction block;
    for ``lam`` near 1 it satisfies the inequality rows strictly.
    """
    n = region.n_t
    y0 = np.concatenate([np.sqrt(region.alpha) * region.h_q, region.h_q])
    return lam * np.outer(y0, y0.conj()) + (1.0 - lam) * np.eye(2 * n) / n
