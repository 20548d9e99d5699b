"""FDD downlink channel simulation.

Receivers estimate their channel, feed back the gain and a codebook index
for the direction, and the transmitter models the true channel as lying in

    E = {(h, e): ||e - h_q|| <= eps, ||e|| = 1, ||h - sqrt(alpha) e|| <= beta}
"""
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .hermlin import DimensionError, as_vector

UNIT_TOL = 1e-10
LOAD_UNIT_TOL = 1e-6
BOUNDARY_PROB = 0.5


class CodebookFormatError(ValueError):
    pass


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Codebook:
    vectors: np.ndarray  # (M, N_t), one unit-norm codeword per row

    def __post_init__(self):
        v = np.atleast_2d(np.asarray(self.vectors, dtype=complex))
        if v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError("codebook needs at least one vector of positive length")
        dev = np.abs(np.linalg.norm(v, axis=1) - 1.0)
        if np.max(dev) > UNIT_TOL:
            raise ValueError(f"codeword {int(np.argmax(dev))} is not unit norm")
        object.__setattr__(self, "vectors", v)

    @property
    def dim(self):
        return self.vectors.shape[1]

    @property
    def size(self):
        return self.vectors.shape[0]

    def min_chordal_distance(self):
        return min_chordal_distance(self.vectors)


@dataclass(frozen=True, eq=False)
class UncertaintyRegion:
    """Channel set consistent with quantized feedback ``(alpha, h_q)``."""

    alpha: float
    h_q: np.ndarray
    epsilon: float
    beta: float

    def __post_init__(self):
        h_q = as_vector(self.h_q)
        if abs(np.linalg.norm(h_q) - 1.0) > UNIT_TOL:
            raise ValueError("quantized direction h_q must be unit norm")
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if not 0 < self.epsilon <= np.sqrt(2):
            # the phase-rotation equivalence behind every reformulation needs eps <= sqrt(2)
            raise ValueError(f"epsilon must lie in (0, sqrt(2)], got {self.epsilon}")
        if not self.beta >= 0:
            raise ValueError("beta must be nonnegative")
        object.__setattr__(self, "h_q", h_q)
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "epsilon", float(self.epsilon))
        object.__setattr__(self, "beta", float(self.beta))

    @property
    def n_t(self):
        return self.h_q.size

    def with_beta(self, beta):
        return UncertaintyRegion(self.alpha, self.h_q, self.epsilon, beta)

    def violations(self, h, e_tilde):
        """Amounts by which ``(h, e_tilde)`` violates the three set constraints."""
        h, e_tilde = np.asarray(h), np.asarray(e_tilde)
        return (
            max(0.0, np.linalg.norm(e_tilde - self.h_q) - self.epsilon),
            abs(np.linalg.norm(e_tilde) - 1.0),
            max(0.0, np.linalg.norm(h - np.sqrt(self.alpha) * e_tilde) - self.beta),
        )

    def contains(self, h, e_tilde, tol=1e-12):
        return max(self.violations(h, e_tilde)) <= tol


@dataclass(frozen=True, eq=False)
class ChannelDraw:
    h_tilde: np.ndarray
    alpha: float
    h_q: np.ndarray
    index: int

    def region(self, epsilon, beta):
        return UncertaintyRegion(self.alpha, self.h_q, epsilon, beta)


def generate_estimate(rng, n_t):
    """Circular complex Gaussian vector with unit-variance entries."""
    if n_t < 1:
        raise DimensionError("n_t must be at least 1")
    return (rng.standard_normal(n_t) + 1j * rng.standard_normal(n_t)) / np.sqrt(2)


def quantize(h_tilde, codebook):
    """Pick the codeword best aligned with the estimate's direction.

    The gain is taken as exact (high-resolution scalar quantizer).  Ties go
    to the lowest codebook index.
    """
    h_tilde = as_vector(h_tilde)
    if h_tilde.size != codebook.dim:
        raise DimensionError(f"estimate has length {h_tilde.size}, codebook dim is {codebook.dim}")
    gain = np.linalg.norm(h_tilde)
    if gain == 0:
        raise DegenerateInputError("cannot quantize a zero channel estimate")
    corr = np.abs(codebook.vectors.conj() @ (h_tilde / gain)) ** 2
    idx = int(np.argmax(corr))  # first maximal index
    return ChannelDraw(h_tilde, float(gain ** 2), codebook.vectors[idx].copy(), idx)


def _unit_rows(rng, count, dim):
    g = rng.standard_normal((count, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def _cap_angles(rng, count, theta0, dim):
    # density on [0, theta0] proportional to sin(theta)^(dim - 2)
    out = np.empty(count)
    filled = 0
    top = np.sin(theta0) ** (dim - 2) if dim > 2 else 1.0
    while filled < count:
        need = count - filled
        th = rng.uniform(0.0, theta0, size=max(2 * need, 16))
        if dim > 2:
            accept = rng.uniform(0.0, top, size=th.size) <= np.sin(th) ** (dim - 2)
            th = th[accept]
        th = th[:need]
        out[filled:filled + th.size] = th
        filled += th.size
    return out


def sample_region_batch(region, rng, count, boundary_prob=BOUNDARY_PROB):
    """Draw ``count`` points ``(h, e_tilde)`` of the uncertainty set.

    ``e_tilde`` is uniform on the spherical cap around ``h_q`` and the error
    ``u = h - sqrt(alpha) e_tilde`` is uniform in the ``beta`` ball, except
    that independently a fraction ``boundary_prob`` of the directions is put
    on the cap edge and of the errors on the ball surface.  A quarter of the
    surface errors are radial, ``u = +-beta e_tilde``, the points of largest
    and smallest ``||h||`` for the drawn direction.  Worst cases of quadratic
    objectives sit on these boundaries.  Returns two ``(count, N_t)``
    complex arrays.
    """
    n = region.n_t
    d = 2 * n
    hq = np.concatenate([region.h_q.real, region.h_q.imag])
    # chord eps = 2 sin(theta0 / 2); arccos(1 - eps^2/2) loses digits for small eps
    theta0 = 2.0 * np.arcsin(min(1.0, region.epsilon / 2.0))

    theta = _cap_angles(rng, count, theta0, d)
    theta[rng.uniform(size=count) < boundary_prob] = theta0
    v = rng.standard_normal((count, d))
    v -= np.outer(v @ hq, hq)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    e = np.cos(theta)[:, None] * hq + np.sin(theta)[:, None] * v
    e /= np.linalg.norm(e, axis=1, keepdims=True)

    u = _unit_rows(rng, count, d)
    radius = region.beta * rng.uniform(size=count) ** (1.0 / d)
    mode = rng.uniform(size=count)
    on_sphere = mode < boundary_prob
    radius[on_sphere] = region.beta
    radial = mode < boundary_prob / 4
    u[radial] = np.sign(mode[radial] - boundary_prob / 8)[:, None] * e[radial]
    u *= radius[:, None]

    e_c = e[:, :n] + 1j * e[:, n:]
    u_c = u[:, :n] + 1j * u[:, n:]
    return np.sqrt(region.alpha) * e_c + u_c, e_c


def sample_region(region, rng):
    """One channel ``h`` from the uncertainty set."""
    h, _ = sample_region_batch(region, rng, 1)
    return h[0]


def min_chordal_distance(vectors):
    v = np.atleast_2d(vectors)
    if v.shape[0] < 2:
        return 1.0
    coh = np.abs(v.conj() @ v.T) ** 2
    np.fill_diagonal(coh, 0.0)
    return float(np.sqrt(max(0.0, 1.0 - coh.max())))


def generate_codebook(n_t, m, rng, sweeps=50, return_history=False):
    """Grassmannian line packing by coordinate ascent on the minimum distance.

    Each sweep visits every codeword and tries a few perturbations pushing it
    away from its closest neighbours; a move is kept only if the minimum
    chordal distance of the whole packing does not drop.
    """
    if m < 1 or n_t < 1:
        raise DimensionError("codebook needs m >= 1 and n_t >= 1")
    v = rng.standard_normal((m, n_t)) + 1j * rng.standard_normal((m, n_t))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    history = [min_chordal_distance(v)]
    if m == 1 or n_t == 1:
        cb = Codebook(v)
        return (cb, history) if return_history else cb

    step = 0.5
    for _ in range(sweeps):
        best = history[-1]
        for i in range(m):
            others = np.delete(v, i, axis=0)
            for _trial in range(3):
                inner = others.conj() @ v[i]
                weights = np.abs(inner) ** 6
                push = (weights * inner) @ others
                cand = v[i] - step * push / (np.linalg.norm(push) + 1e-300)
                cand += 0.05 * step * (rng.standard_normal(n_t) + 1j * rng.standard_normal(n_t))
                cand /= np.linalg.norm(cand)
                trial = v.copy()
                trial[i] = cand
                dist = min_chordal_distance(trial)
                if dist >= best:
                    v, best = trial, dist
                    break
        history.append(best)
        step = max(0.02, step * 0.93)
    cb = Codebook(v)
    return (cb, history) if return_history else cb


def save_codebook(codebook, path):
    lines = [f"{codebook.dim} {codebook.size}"]
    for row in codebook.vectors:
        lines.append(" ".join(f"{float(z.real)!r},{float(z.imag)!r}" for z in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_codebook(path):
    """Read the text codebook format.

    First non-comment line ``N_t M``, then ``M`` rows of ``N_t`` entries
    written ``re,im`` and separated by spaces.  Lines starting with ``#``
    are comments.
    """
    rows = []
    header = None
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if header is None:
            parts = line.split()
            try:
                header = int(parts[0]), int(parts[1])
                if len(parts) != 2:
                    raise ValueError
            except (ValueError, IndexError):
                raise CodebookFormatError(f"line {lineno}: expected header 'N_t M'") from None
            continue
        entries = line.split()
        if len(entries) != header[0]:
            raise CodebookFormatError(
                f"line {lineno} (row {len(rows) + 1}): expected {header[0]} entries, got {len(entries)}")
        vec = []
        for tok in entries:
            try:
                re_s, im_s = tok.split(",")
                vec.append(complex(float(re_s), float(im_s)))
            except ValueError:
                raise CodebookFormatError(f"line {lineno} (row {len(rows) + 1}): bad entry {tok!r}") from None
        rows.append(vec)
    if header is None:
        raise CodebookFormatError("empty codebook file")
    if len(rows) != header[1]:
        raise CodebookFormatError(f"header announces {header[1]} rows, found {len(rows)}")
    v = np.array(rows, dtype=complex)
    norms = np.linalg.norm(v, axis=1)
    bad = np.flatnonzero(np.abs(norms - 1.0) > LOAD_UNIT_TOL)
    if bad.size:
        raise ValueError(f"row {bad[0] + 1} has norm {norms[bad[0]]:.9g}, expected 1")
    return Codebook(v / norms[:, None])
