"""Deviation risk of portfolio prediction errors and phi-divergence ambiguity.

The deviation risk of a portfolio ``z`` under error samples ``eps`` (T x n)
and a PMF ``p`` is ``min_c sum_j p_j R(eps_j.z - c)``. With ``R(x) = x^2``
this is the portfolio error variance under ``p``.

``worst_case_risk_oracle`` maximizes that risk over the phi-divergence ball
around the uniform PMF directly in ``p`` (Frank-Wolfe), without going through
any dual reformulation, so it can certify the decision layers.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from enum import Enum

import numpy as np
import scipy.optimize

SIMPLEX_TOL = 1e-8
PMF_TOL = 1e-12


class OracleError(RuntimeError):
    """Frank-Wolfe did not reach the requested duality gap."""


@dataclass(frozen=True)
class ErrorWindow:
    """The ``T`` most recent prediction-error vectors, oldest first."""

    eps: np.ndarray

    def __post_init__(self):
        eps = np.array(self.eps, dtype=float)
        if eps.ndim != 2:
            raise ValueError(f"error window must be 2-d (T, n), got shape {eps.shape}")
        if eps.shape[0] < 2:
            raise ValueError("error window needs at least two samples")
        if not np.all(np.isfinite(eps)):
            raise ValueError("error window has non-finite entries")
        eps.setflags(write=False)
        object.__setattr__(self, "eps", eps)

    @property
    def T(self) -> int:
        return self.eps.shape[0]

    @property
    def n(self) -> int:
        return self.eps.shape[1]


class RiskKind(str, Enum):
    QUADRATIC = "quadratic"


@dataclass(frozen=True)
class RiskFunction:
    """Closed convex R with R(0) = 0 and R(x) = R(-x). Only x^2 ships."""

    kind: RiskKind = RiskKind.QUADRATIC

    def __call__(self, x):
        return np.square(x)


class Divergence(str, Enum):
    HELLINGER = "hellinger"
    VARIATION = "variation"


@dataclass(frozen=True)
class PhiDivergence:
    kind: Divergence = Divergence.HELLINGER

    def phi(self, w):
        w = np.asarray(w, dtype=float)
        if self.kind is Divergence.HELLINGER:
            return (np.sqrt(w) - 1.0) ** 2
        return np.abs(w - 1.0)

    def delta_max(self, T: int) -> float:
        """Largest divergence reachable from the uniform PMF on ``T`` points."""
        if T < 2:
            raise ValueError("T must be >= 2")
        if self.kind is Divergence.HELLINGER:
            return 2.0 * (1.0 - 1.0 / np.sqrt(T))
        return 2.0 * (1.0 - 1.0 / T)


def uniform_pmf(T: int) -> np.ndarray:
    return np.full(T, 1.0 / T)


def check_pmf(p, T: int | None = None) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or (T is not None and p.size != T):
        raise ValueError(f"PMF has shape {p.shape}, expected ({T},)")
    if np.any(p < 0) or abs(p.sum() - 1.0) > PMF_TOL:
        raise ValueError("PMF must be nonnegative and sum to one")
    return p


def check_simplex(z, n: int) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    if z.shape != (n,):
        raise ValueError(f"portfolio has shape {z.shape}, expected ({n},)")
    if np.any(z < -SIMPLEX_TOL) or abs(z.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError("portfolio must lie on the simplex")
    return z


def deviation_risk(w: ErrorWindow, z, p, R: RiskFunction = RiskFunction()):
    """Return ``(value, c_star)`` of ``min_c sum_j p_j R(eps_j.z - c)``."""
    z = check_simplex(z, w.n)
    p = check_pmf(p, w.T)
    e = w.eps @ z
    if R.kind is not RiskKind.QUADRATIC:
        raise NotImplementedError(R.kind)
    c_star = float(p @ e)
    value = float(p @ R(e - c_star))
    return max(value, 0.0), c_star


def error_covariance(w: ErrorWindow, p) -> np.ndarray:
    """Covariance of the error samples under ``p`` (weights sum to one)."""
    p = check_pmf(p, w.T)
    mu = p @ w.eps
    dev = w.eps - mu
    return (dev * p[:, None]).T @ dev


def variance_risk(w: ErrorWindow, z, p) -> float:
    z = check_simplex(z, w.n)
    return float(z @ error_covariance(w, p) @ z)


def phi_value(d: PhiDivergence, p, q) -> float:
    """``I_phi(p, q) = sum_j q_j phi(p_j / q_j)``."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if np.any(q <= 0):
        raise ValueError("reference PMF q must be strictly positive")
    return float(np.sum(q * d.phi(p / q)))


def phi_conjugate(d: PhiDivergence, s):
    """Convex conjugate ``phi*(s)``.

    Hellinger: ``s / (1 - s)`` on ``s < 1``. Variation: ``max(s, -1)`` on
    ``s <= 1``; both are +inf-valued outside, which we report as an error.
    """
    s = np.asarray(s, dtype=float)
    if d.kind is Divergence.HELLINGER:
        if np.any(s >= 1):
            raise ValueError("Hellinger conjugate is only finite for s < 1")
        out = s / (1.0 - s)
    else:
        if np.any(s > 1):
            raise ValueError("variation conjugate is only finite for s <= 1")
        out = np.maximum(s, -1.0)
    return float(out) if out.ndim == 0 else out


# ------------------------------------------------------------ worst case oracle

def _lmo_hellinger(g, delta):
    """argmax g.p over {p in simplex : Hellinger(p, uniform) <= delta}.

    Writing r = sqrt(p) the constraint reads r.sqrt(q) >= 1 - delta/2 on the
    unit sphere; the maximizer is r_j ~ sqrt(q_j) / (nu - g_j) with the scalar
    nu > max(g) chosen so that the constraint is tight.
    """
    T = g.size
    sq = np.full(T, 1.0 / np.sqrt(T))
    rho = 1.0 - delta / 2.0
    gap_to_max = g.max() - g
    spread = gap_to_max.max()
    if spread <= 1e-300:
        return np.full(T, 1.0 / T)

    def direction(u):
        r = sq / (np.exp(u) + gap_to_max)
        return r / np.linalg.norm(r)

    def excess(u):
        return direction(u) @ sq - rho

    lo, hi = np.log(spread) - 60.0, np.log(spread) + 60.0
    if excess(lo) >= 0:  # several outcomes tie for the max and already satisfy the ball
        r = direction(lo)
        return r * r
    u = scipy.optimize.brentq(excess, lo, hi, xtol=1e-14, rtol=1e-15, maxiter=500)
    r = direction(u)
    # stay on the feasible side of the boundary
    while r @ sq < rho:
        u += 1e-12 * max(1.0, abs(u))
        r = direction(u)
    return r * r


def _lmo_variation(g, delta):
    """argmax g.p over {p in simplex : sum |p - q| <= delta}, q uniform.

    Move up to delta/2 of mass from the lowest-scoring outcomes onto the best.
    """
    T = g.size
    p = np.full(T, 1.0 / T)
    best = int(np.argmax(g))
    budget = min(delta / 2.0, 1.0 - 1.0 / T)
    for j in np.argsort(g, kind="stable"):
        if budget <= 0:
            break
        if j == best:
            continue
        take = min(p[j], budget)
        p[j] -= take
        p[best] += take
        budget -= take
    return p


def worst_case_risk_oracle(w: ErrorWindow, z, d: PhiDivergence, delta: float,
                           tol: float = 1e-9, max_iter: int = 10_000,
                           R: RiskFunction = RiskFunction()) -> float:
    """``max_{p in P(delta)} deviation_risk(w, z, p)`` by Frank-Wolfe.

    The objective is concave in ``p`` with gradient ``R(eps_j.z - c*(p))``;
    line search along each Frank-Wolfe segment is exact (a concave quadratic).
    Iterations start from a warm point found by bisecting on the location
    ``c`` (see ``_saddle_start``); the returned value is certified by the
    Frank-Wolfe gap either way.
    On the Variation polytope pairwise steps are used, which avoid the
    zig-zagging of plain Frank-Wolfe near faces.

    Raises
    ------
    OracleError
        if the Frank-Wolfe gap is still above ``tol`` after ``max_iter`` steps.
    """
    return worst_case_pmf(w, z, d, delta, tol, max_iter, R)[0]


def worst_case_pmf(w: ErrorWindow, z, d: PhiDivergence, delta: float,
                   tol: float = 1e-9, max_iter: int = 10_000,
                   R: RiskFunction = RiskFunction()):
    """Like :func:`worst_case_risk_oracle` but also returns the maximizing PMF."""
    if delta < 0:
        raise ValueError("delta must be nonnegative")
    if w.T > 12:
        raise ValueError("the oracle is meant for desk-scale windows (T <= 12)")
    z = check_simplex(z, w.n)
    if R.kind is not RiskKind.QUADRATIC:
        raise NotImplementedError(R.kind)
    e = w.eps @ z
    T = w.T
    q = uniform_pmf(T)
    if delta == 0:
        return deviation_risk(w, z, q, R)[0], q
    delta = min(delta, d.delta_max(T))

    def value(p):
        m = p @ e
        return max(float(p @ (e - m) ** 2), 0.0)

    def grad(p):
        return (e - p @ e) ** 2

    def line_search(p, direction, amax):
        # value(p + a*direction) = value(p) + a*lin - a^2*quad
        de = direction @ e
        lin = direction @ e ** 2 - 2.0 * (p @ e) * de
        quad = de * de
        if quad <= 0:
            return amax if lin > 0 else 0.0
        return float(np.clip(lin / (2.0 * quad), 0.0, amax))

    lmo = _lmo_hellinger if d.kind is Divergence.HELLINGER else _lmo_variation
    atoms = _saddle_start(e, lambda g: lmo(g, delta))
    p = sum(u * wu for u, wu in atoms)
    if d.kind is Divergence.HELLINGER:
        for _ in range(max_iter):
            g = grad(p)
            s = lmo(g, delta)
            gap = g @ (s - p)
            if gap <= tol:
                return value(p), p
            p = p + line_search(p, s - p, 1.0) * (s - p)
        raise OracleError(f"Frank-Wolfe gap {gap:.3e} > {tol:.1e} after {max_iter} iterations")

    # pairwise Frank-Wolfe over the variation polytope: shift weight from the
    # worst active vertex to the LMO vertex; atoms are keyed by their bytes
    atoms = {u.tobytes(): (u, wu) for u, wu in atoms}
    for _ in range(max_iter):
        g = grad(p)
        s = lmo(g, delta)
        gap = g @ (s - p)
        if gap <= tol:
            return value(p), p
        away_key = min(atoms, key=lambda k: g @ atoms[k][0])
        v, wv = atoms[away_key]
        a = line_search(p, s - v, wv)
        key = s.tobytes()
        atoms[key] = (s, atoms.get(key, (s, 0.0))[1] + a)
        atoms[away_key] = (v, atoms[away_key][1] - a)
        atoms = {k: aw for k, aw in atoms.items() if aw[1] > 1e-15}
        total = sum(wu for _, wu in atoms.values())
        p = sum(u * wu for u, wu in atoms.values()) / total
    raise OracleError(f"Frank-Wolfe gap {gap:.3e} > {tol:.1e} after {max_iter} iterations")


def _saddle_start(e, lmo):
    """Warm start for Frank-Wolfe from the exchanged problem ``min_c max_p``.

    ``h(c) = max_p sum_j p_j (e_j - c)^2`` is convex with slope
    ``-2 (p(c).e - c)``, so the minimizer is where the LMO's mean crosses
    ``c``. Bisection brackets it; mixing the two bracketing LMO answers so the
    mean equals ``c`` gives a point whose Frank-Wolfe gap is (nearly) zero.
    Returns a list of ``(vertex, weight)`` pairs.
    """
    lo, hi = float(e.min()), float(e.max())
    p_lo, p_hi = lmo((e - lo) ** 2), lmo((e - hi) ** 2)
    if hi - lo <= 1e-300:
        return [(p_lo, 1.0)]
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if not lo < mid < hi:
            break
        pm = lmo((e - mid) ** 2)
        if pm @ e > mid:
            lo, p_lo = mid, pm
        else:
            hi, p_hi = mid, pm
    m_lo, m_hi = p_lo @ e, p_hi @ e
    c = 0.5 * (lo + hi)
    alpha = 1.0 if m_lo == m_hi else float(np.clip((c - m_hi) / (m_lo - m_hi), 0.0, 1.0))
    return [(p_lo, alpha), (p_hi, 1.0 - alpha)]


def project_simplex(v) -> np.ndarray:
    """Euclidean projection onto the probability simplex (sort based)."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    k = np.arange(1, v.size + 1)
    rho = np.nonzero(u - css / k > 0)[0][-1]
    return np.maximum(v - css[rho] / (rho + 1), 0.0)


def simplex_grid(n: int, steps: int) -> np.ndarray:
    """All points of the simplex whose coordinates are multiples of 1/steps."""
    pts = [c for c in itertools.product(range(steps + 1), repeat=n - 1) if sum(c) <= steps]
    return np.array([[*c, steps - sum(c)] for c in pts], dtype=float) / steps


def minimax_oracle(w: ErrorWindow, yhat, gamma: float, d: PhiDivergence, delta: float,
                   tol: float = 1e-6, grid_steps: int = 4, max_iter: int = 500):
    """``min_z max_p [deviation_risk(w, z, p) - gamma yhat.z]`` over the simplex.

    ``F(z) = worst_case_risk(z) - gamma yhat.z`` is convex; at each evaluated
    ``z`` a subgradient comes from the worst-case PMF (Danskin). Starting from
    a coarse simplex grid, cutting planes (Kelley) tighten an LP lower bound
    until it meets the best evaluated value. Returns ``(value, z, bound)``
    with ``value - bound`` a certified lower bound on the minimum.
    """
    yhat = np.asarray(yhat, dtype=float)
    n = w.n
    inner_tol = 1e-12

    def evaluate(z):
        val, p = worst_case_pmf(w, z, d, delta, tol=inner_tol)
        mu = p @ w.eps
        dev = w.eps - mu
        g = 2.0 * ((dev * p[:, None]).T @ (dev @ z)) - gamma * yhat
        return val - gamma * yhat @ z, g

    zs, fs, gs = [], [], []
    for z in simplex_grid(n, grid_steps):
        f, g = evaluate(z)
        zs.append(z), fs.append(f), gs.append(g)
    # LP over (z, t): min t  s.t.  g_k.z - t <= g_k.z_k - f_k,  sum z = 1, z >= 0
    c = np.r_[np.zeros(n), 1.0]
    A_eq = np.r_[np.ones(n), 0.0][None, :]
    bounds = [(0, None)] * n + [(None, None)]
    gap = np.inf
    for _ in range(max_iter):
        G = np.array(gs)
        A_ub = np.hstack([G, -np.ones((len(gs), 1))])
        b_ub = np.einsum("kn,kn->k", G, np.array(zs)) - np.array(fs)
        res = scipy.optimize.linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=[1.0],
                                     bounds=bounds, method="highs")
        if res.status != 0:
            raise OracleError(f"cutting-plane LP failed: {res.message}")
        lower = res.fun
        best = int(np.argmin(fs))
        gap = fs[best] - lower
        if gap <= tol:
            return fs[best], zs[best], gap + inner_tol
        z = project_simplex(res.x[:n])
        f, g = evaluate(z)
        zs.append(z), fs.append(f), gs.append(g)
    raise OracleError(f"minimax gap {gap:.3e} > {tol:.1e} after {max_iter} cuts")
