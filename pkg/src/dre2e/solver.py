"""Primal-dual interior-point solver for linear and second-order cone programs.

Canonical form::

    minimize    c^T x
    subject to  A x = b
                G x + s = h,   s in K

with K a product of nonnegative orthants and second-order cones. The dual is
``maximize -b^T y - h^T z  s.t.  A^T y + G^T z + c = 0, z in K``.

The method runs on the homogeneous self-dual embedding (so infeasibility and
unboundedness are detected from certificates), with Nesterov-Todd scaling and
a Mehrotra predictor-corrector step. Every Newton system is reduced to
``[G^T W^-2 G, A^T; A, 0]`` and factored densely.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import scipy.linalg

from .cones import (
    ConeLayout,
    NonNegative,
    NTScaling,
    SecondOrder,
    jordan_divide,
    jordan_product,
)

__all__ = [
    "ConeProgram",
    "ConeSolution",
    "KKTSystem",
    "NonNegative",
    "SecondOrder",
    "SolverSettings",
    "Status",
    "dump_program",
    "kkt_residuals",
    "load_program",
    "solve_cone_batch",
    "solve_cone_program",
]


class Status(str, Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"
    MAX_ITER = "MaxIter"


@dataclass(frozen=True)
class SolverSettings:
    feas_tol: float = 1e-8
    gap_tol: float = 1e-8
    max_iter: int = 100
    step_fraction: float = 0.99
    regularization: float = 1e-10
    refine_steps: int = 3


@dataclass
class ConeProgram:
    c: np.ndarray
    G: np.ndarray
    h: np.ndarray
    cones: list
    A: np.ndarray | None = None
    b: np.ndarray | None = None

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=float).ravel()
        nx = self.c.size
        if nx < 1:
            raise ValueError("cone program needs at least one variable")
        self.G = np.asarray(self.G, dtype=float).reshape(-1, nx)
        self.h = np.asarray(self.h, dtype=float).ravel()
        if self.A is None:
            self.A = np.zeros((0, nx))
            self.b = np.zeros(0)
        self.A = np.asarray(self.A, dtype=float).reshape(-1, nx)
        self.b = np.asarray(self.b, dtype=float).ravel()
        self.cones = list(self.cones)
        if self.A.shape[0] != self.b.size:
            raise ValueError(f"A has {self.A.shape[0]} rows but b has {self.b.size}")
        if self.G.shape[0] != self.h.size:
            raise ValueError(f"G has {self.G.shape[0]} rows but h has {self.h.size}")
        total = sum(cone.dim for cone in self.cones)
        if total != self.G.shape[0]:
            raise ValueError(f"cone dims sum to {total}, G has {self.G.shape[0]} rows")
        self.layout = ConeLayout(self.cones)

    @property
    def n_var(self) -> int:
        return self.c.size


@dataclass
class ConeSolution:
    x: np.ndarray
    y: np.ndarray
    z: np.ndarray
    s: np.ndarray
    status: Status
    objective: float
    iterations: int
    residuals: tuple[float, float, float] = field(default=(np.nan, np.nan, np.nan))

    @property
    def optimal(self) -> bool:
        return self.status is Status.OPTIMAL


def kkt_residuals(prog: ConeProgram, sol: ConeSolution) -> tuple[float, float, float]:
    """Scaled primal residual, dual residual and complementarity gap.

    These are exactly the three quantities compared against
    ``feas_tol``/``gap_tol`` when the solver declares optimality.
    """
    return _residuals(prog, sol.x, sol.y, sol.z, sol.s)


def _residuals(prog, x, y, z, s, scales=None):
    x, y, z, s = (np.asarray(v, dtype=float) for v in (x, y, z, s))
    if x.shape != (prog.n_var,) or y.shape != prog.b.shape:
        raise ValueError("solution dimensions do not match the program")
    if z.shape != prog.h.shape or s.shape != prog.h.shape:
        raise ValueError("solution dimensions do not match the program")
    sb, sh, sc = scales or _residual_scales(prog)
    pres_eq = np.sqrt(_sq(prog.A @ x - prog.b)) / sb
    pres_cone = np.sqrt(_sq(prog.G @ x + s - prog.h)) / sh
    dres = np.sqrt(_sq(prog.A.T @ y + prog.G.T @ z + prog.c)) / sc
    gap = abs(float(s @ z))
    return float(max(pres_eq, pres_cone)), float(dres), gap


def _sq(v):
    return float(v @ v)


def _residual_scales(prog):
    return tuple(max(1.0, np.sqrt(_sq(v))) for v in (prog.b, prog.h, prog.c))


class KKTSystem:
    """Factored ``K = [0 A^T G^T; A 0 0; G 0 -W^2]`` for a fixed scaling.

    Solved through the reduced matrix ``[G^T W^-2 G, A^T; A, 0]`` with static
    regularization, followed by iterative refinement against ``K`` itself.
    """

    def __init__(self, G, A, scaling: NTScaling, regularization=1e-10, refine_steps=3):
        self.G, self.A, self.scaling = G, A, scaling
        self.refine_steps = refine_steps
        nx, ny = G.shape[1], A.shape[0]
        # W^2 is never formed: squaring loses the small eigenvalues near the boundary
        self.W = scaling.matrix()
        self.Wi = Wi = scaling.matrix(inverse=True)
        WiG = Wi @ G
        self.GtWi2 = WiG.T @ Wi
        H = WiG.T @ WiG
        M = np.zeros((nx + ny, nx + ny))
        M[:nx, :nx] = H + regularization * np.eye(nx)
        M[:nx, nx:] = A.T
        M[nx:, :nx] = A
        M[nx:, nx:] = -regularization * np.eye(ny)
        self.nx, self.ny = nx, ny
        self.lu = scipy.linalg.lu_factor(M, check_finite=False)

    def _winv2(self, v):
        return self.Wi @ (self.Wi @ v)

    def _w2(self, v):
        return self.W @ (self.W @ v)

    def _solve_once(self, r1, r2, r3):
        rhs = np.concatenate([r1 + self.GtWi2 @ r3, r2])
        sol = scipy.linalg.lu_solve(self.lu, rhs, check_finite=False)
        dx, dy = sol[: self.nx], sol[self.nx :]
        dz = self._winv2(self.G @ dx - r3)
        return dx, dy, dz

    def apply(self, dx, dy, dz):
        return (
            self.A.T @ dy + self.G.T @ dz,
            self.A @ dx,
            self.G @ dx - self._w2(dz),
        )

    def solve(self, r1, r2, r3):
        dx, dy, dz = self._solve_once(r1, r2, r3)
        for _ in range(self.refine_steps):
            k1, k2, k3 = self.apply(dx, dy, dz)
            e1, e2, e3 = r1 - k1, r2 - k2, r3 - k3
            ex, ey, ez = self._solve_once(e1, e2, e3)
            dx, dy, dz = dx + ex, dy + ey, dz + ez
        return dx, dy, dz


def solve_cone_program(prog: ConeProgram, settings: SolverSettings | None = None) -> ConeSolution:
    """Solve ``prog``; never raises on infeasible or unbounded input.

    Returns a :class:`ConeSolution` whose ``status`` is Optimal only when the
    scaled residuals and the gap are all within tolerance.
    """
    st = settings or SolverSettings()
    c, A, b, G, h = prog.c, prog.A, prog.b, prog.G, prog.h
    layout = prog.layout
    e = layout.identity()
    nu = layout.degree

    # initial point: least-norm slacks / multipliers, shifted into the cone
    ident = NTScaling(layout, e.copy(), e.copy())
    kkt0 = KKTSystem(G, A, ident, st.regularization, st.refine_steps)
    x, _, zp = kkt0.solve(np.zeros_like(c), b, h)
    s = -zp
    _, y, z = kkt0.solve(-c, np.zeros_like(b), np.zeros_like(h))
    for v in (s, z):
        shift = -layout.interior_margin(v)
        if shift >= 0:
            v += (1.0 + shift) * e
    tau, kappa = 1.0, 1.0
    scales = _residual_scales(prog)

    status = Status.MAX_ITER
    it = 0
    best = None  # (merit, iterate, residuals) of the most accurate point seen
    stalled = 0
    for it in range(st.max_iter + 1):
        res = _residuals(prog, x / tau, y / tau, z / tau, s / tau, scales)
        pres, dres, gap = res
        if pres <= st.feas_tol and dres <= st.feas_tol and gap <= st.gap_tol:
            status = Status.OPTIMAL
            break
        merit = max(pres / st.feas_tol, dres / st.feas_tol, gap / st.gap_tol)
        if best is None or merit < best[0]:
            best = (merit, (x, y, z, s, tau), res)
            stalled = 0
        elif best[0] < 1e4:
            # only a near-converged run can stall; far-off iterates may be heading to a certificate
            stalled += 1
        # infeasibility certificates (scale invariant ratios)
        hz_by = h @ z + b @ y
        if hz_by < 0:
            ray = np.linalg.norm(A.T @ y + G.T @ z) / -hz_by
            if ray <= st.feas_tol:
                status = Status.INFEASIBLE
                break
        cx = c @ x
        if cx < 0:
            ray = max(np.linalg.norm(A @ x), np.linalg.norm(G @ x + s)) / -cx
            if ray <= st.feas_tol:
                status = Status.UNBOUNDED
                break
        if it == st.max_iter or stalled >= 3:
            break

        r1 = A.T @ y + G.T @ z + c * tau
        r2 = -A @ x + b * tau
        r3 = -G @ x + h * tau - s
        r4 = kappa + c @ x + b @ y + h @ z
        mu = (s @ z + tau * kappa) / (nu + 1)

        with np.errstate(all="ignore"):
            scaling = NTScaling(layout, s, z)
        lam = scaling.lam
        if not np.all(np.isfinite(lam)) or layout.interior_margin(lam) <= 0:
            break
        try:
            kkt = KKTSystem(G, A, scaling, st.regularization, st.refine_steps)
        except (np.linalg.LinAlgError, ValueError):
            break
        Wd, Wid = scaling.matrix(), scaling.matrix(inverse=True)
        u1 = kkt.solve(-c, b, h)
        qu1 = c @ u1[0] + b @ u1[1] + h @ u1[2]

        def direction(rs, rk, sigma_r):
            d1, d2, d3, d4 = (sigma_r * r for r in (r1, r2, r3, r4))
            t = jordan_divide(layout, lam, rs)
            u2 = kkt.solve(-d1, d2, d3 - Wd @ t)
            dtau = (-d4 - rk / tau - (c @ u2[0] + b @ u2[1] + h @ u2[2])) / (qu1 - kappa / tau)
            dx = u2[0] + dtau * u1[0]
            dy = u2[1] + dtau * u1[1]
            dz = u2[2] + dtau * u1[2]
            ds = Wd @ (t - Wd @ dz)
            dkappa = (rk - kappa * dtau) / tau
            return dx, dy, dz, ds, dtau, dkappa

        def max_step(d):
            _, _, dz, ds, dtau, dkappa = d
            a = min(layout.max_step(s, ds), layout.max_step(z, dz))
            if dtau < 0:
                a = min(a, -tau / dtau)
            if dkappa < 0:
                a = min(a, -kappa / dkappa)
            return a

        with np.errstate(all="ignore"):
            lamlam = jordan_product(layout, lam, lam)
            aff = direction(-lamlam, -tau * kappa, 1.0)
            alpha_aff = min(1.0, max_step(aff))
            sigma = (1.0 - alpha_aff) ** 3
            corr = jordan_product(layout, Wid @ aff[3], Wd @ aff[2])
            rs = -lamlam - corr + sigma * mu * e
            rk = -tau * kappa - aff[4] * aff[5] + sigma * mu
            dx, dy, dz, ds, dtau, dkappa = step = direction(rs, rk, 1.0 - sigma)
            alpha = min(1.0, st.step_fraction * max_step(step))
        if not np.isfinite(alpha) or alpha < 1e-14:
            break
        x = x + alpha * dx
        y = y + alpha * dy
        z = z + alpha * dz
        s = s + alpha * ds
        tau = tau + alpha * dtau
        kappa = kappa + alpha * dkappa
        if not all(np.all(np.isfinite(v)) for v in (x, y, z, s)) or not tau > 0:
            break

    if status is Status.OPTIMAL:
        xs, ys, zs, ss = x / tau, y / tau, z / tau, s / tau
        return ConeSolution(xs, ys, zs, ss, status, float(c @ xs), it, res)
    if status is Status.INFEASIBLE:
        scale = -(h @ z + b @ y)
        return ConeSolution(np.full_like(x, np.nan), y / scale, z / scale, np.full_like(s, np.nan),
                            status, np.inf, it)
    if status is Status.UNBOUNDED:
        scale = -(c @ x)
        return ConeSolution(x / scale, np.full_like(y, np.nan), np.full_like(z, np.nan), s / scale,
                            status, -np.inf, it)
    _, (x, y, z, s, tau), res = best
    xs, ys, zs, ss = x / tau, y / tau, z / tau, s / tau
    return ConeSolution(xs, ys, zs, ss, status, float(c @ xs), it, res)


# ------------------------------------------------------------------- batch

def _bmv(M, v):
    return np.matmul(M, v[..., None])[..., 0]


class _Stacked:
    """A stack of matrices equal to ``base`` except on one row/column block.

    Products with the shared part go through a single BLAS call; only the
    varying block ``vals`` (B, rows, cols) is handled per problem.
    """

    def __init__(self, G):
        nb = G.shape[0]
        varies = np.any(G != G[0], axis=0)
        self.rows = np.flatnonzero(varies.any(axis=1))
        self.cols = np.flatnonzero(varies.any(axis=0))
        self.vals = G[:, self.rows[:, None], self.cols[None, :]]
        self.base = G[0].copy()
        self.base[self.rows[:, None], self.cols[None, :]] = 0.0
        self.dense = G
        self.nb = nb

    def __getitem__(self, keep):
        out = _Stacked.__new__(_Stacked)
        out.rows, out.cols, out.base = self.rows, self.cols, self.base
        out.vals, out.dense = self.vals[keep], self.dense[keep]
        out.nb = out.vals.shape[0]
        return out

    def mv(self, x):
        out = x @ self.base.T
        out[:, self.rows] += _bmv(self.vals, x[:, self.cols])
        return out

    def rmv(self, z):
        out = z @ self.base
        out[:, self.cols] += np.matmul(z[:, None, self.rows], self.vals)[:, 0]
        return out


class _BatchKKT:
    """:class:`KKTSystem` for a stack of programs sharing ``A``.

    The reduced matrices are small, so they are inverted outright; iterative
    refinement against the full system recovers the lost accuracy.
    """

    def __init__(self, G, A, scaling: NTScaling, regularization, refine_steps):
        self.G, self.A, self.scaling = G, A, scaling
        self.refine_steps = refine_steps
        nb, nx, ny = G.nb, G.base.shape[1], A.shape[0]
        self.WiG = WiG = scaling.apply(G.dense, inverse=True, columns=True)
        M = np.zeros((nb, nx + ny, nx + ny))
        M[:, :nx, :nx] = WiG.transpose(0, 2, 1) @ WiG + regularization * np.eye(nx)
        M[:, :nx, nx:] = A.T
        M[:, nx:, :nx] = A
        M[:, nx:, nx:] = -regularization * np.eye(ny)
        self.nx = nx
        self.Minv = np.linalg.inv(M)

    def _solve_once(self, r1, r2, r3):
        w = self.scaling
        rhs = np.concatenate([r1 + _bmv(self.WiG.transpose(0, 2, 1), w.apply(r3, True)), r2],
                             axis=1)
        sol = _bmv(self.Minv, rhs)
        dx, dy = sol[:, : self.nx], sol[:, self.nx :]
        dz = w.apply(w.apply(self.G.mv(dx) - r3, True), True)
        return dx, dy, dz

    def solve(self, r1, r2, r3):
        dx, dy, dz = self._solve_once(r1, r2, r3)
        for _ in range(self.refine_steps):
            e1 = r1 - dy @ self.A - self.G.rmv(dz)
            e2 = r2 - dx @ self.A.T
            e3 = r3 - self.G.mv(dx) + self.scaling.apply(self.scaling.apply(dz))
            ex, ey, ez = self._solve_once(e1, e2, e3)
            dx, dy, dz = dx + ex, dy + ey, dz + ez
        return dx, dy, dz


def solve_cone_batch(c, G, h, cones, A=None, b=None,
                     settings: SolverSettings | None = None) -> list[ConeSolution]:
    """Solve a stack of programs that share ``A``, ``b`` and the cone list.

    ``c`` is (B, n), ``G`` (B, m, n) and ``h`` (B, m). The interior-point
    iterations run vectorized across the stack and a program drops out once
    it converges or stalls. Certificates of infeasibility are not checked,
    so this is meant for programs known to be solvable: every entry comes
    back Optimal or MaxIter (with the most accurate iterate seen), and
    MaxIter entries are best re-solved with :func:`solve_cone_program`.
    """
    st = settings or SolverSettings()
    c = np.asarray(c, dtype=float)
    nb, nx = c.shape
    G = np.asarray(G, dtype=float).reshape(nb, -1, nx)
    h = np.asarray(h, dtype=float).reshape(nb, -1)
    A = np.zeros((0, nx)) if A is None else np.asarray(A, dtype=float).reshape(-1, nx)
    b = np.zeros(0) if b is None else np.asarray(b, dtype=float).ravel()
    layout = ConeLayout(list(cones))
    if layout.dim != G.shape[1]:
        raise ValueError(f"cone dims sum to {layout.dim}, G has {G.shape[1]} rows")
    # iterate in component-major row order; results are mapped back at the end
    perm, layout = layout.component_major()
    inv_perm = np.argsort(perm)
    G, h = G[:, perm], h[:, perm]
    e = layout.identity()
    nu = layout.degree
    ny, m = A.shape[0], h.shape[1]
    bB = np.broadcast_to(b, (nb, ny))

    G = _Stacked(G)
    ident = NTScaling(layout, np.tile(e, (nb, 1)), np.tile(e, (nb, 1)))
    kkt0 = _BatchKKT(G, A, ident, st.regularization, st.refine_steps)
    x, _, zp = kkt0.solve(np.zeros((nb, nx)), bB, h)
    s = -zp
    _, y, z = kkt0.solve(-c, np.zeros((nb, ny)), np.zeros((nb, m)))
    for v in (s, z):
        shift = -layout.interior_margin(v)
        v += np.where(shift >= 0, 1.0 + shift, 0.0)[:, None] * e
    tau, kappa = np.ones(nb), np.ones(nb)
    sb = max(1.0, float(np.linalg.norm(b)))
    sh = np.maximum(1.0, np.linalg.norm(h, axis=1))
    sc = np.maximum(1.0, np.linalg.norm(c, axis=1))

    out = [None] * nb
    best = [None] * nb
    best_merit = np.full(nb, np.inf)
    stalled = np.zeros(nb, dtype=int)
    act = np.arange(nb)

    def finish(mask, it, optimal=None):
        nonlocal act, c, G, h, x, y, z, s, tau, kappa, sh, sc
        for k in np.flatnonzero(mask):
            i = act[k]
            if optimal is not None and optimal[k]:
                xs, ys, zs, ss, res = optimal[k]
                out[i] = ConeSolution(xs, ys, zs[inv_perm], ss[inv_perm], Status.OPTIMAL,
                                      float(c[k] @ xs), it, res)
            elif best[i] is None:
                nan = np.full(nx, np.nan)
                out[i] = ConeSolution(nan, np.full(ny, np.nan), np.full(m, np.nan),
                                      np.full(m, np.nan), Status.MAX_ITER, np.nan, it,
                                      (np.inf, np.inf, np.inf))
            else:
                xs, ys, zs, ss, res = best[i]
                out[i] = ConeSolution(xs, ys, zs[inv_perm], ss[inv_perm], Status.MAX_ITER,
                                      float(c[k] @ xs), it, res)
        keep = ~mask
        act, c, G, h = act[keep], c[keep], G[keep], h[keep]
        x, y, z, s, tau, kappa = x[keep], y[keep], z[keep], s[keep], tau[keep], kappa[keep]
        sh, sc = sh[keep], sc[keep]

    for it in range(st.max_iter + 1):
        if act.size == 0:
            break
        ti = tau[:, None]
        xs, ys, zs, ss = x / ti, y / ti, z / ti, s / ti
        with np.errstate(all="ignore"):
            pres = np.maximum(np.linalg.norm(xs @ A.T - b, axis=1) / sb,
                              np.linalg.norm(G.mv(xs) + ss - h, axis=1) / sh)
            dres = np.linalg.norm(ys @ A + G.rmv(zs) + c, axis=1) / sc
            gap = np.abs(np.sum(ss * zs, axis=1))
            conv = (pres <= st.feas_tol) & (dres <= st.feas_tol) & (gap <= st.gap_tol)
            merit = np.maximum(np.maximum(pres, dres) / st.feas_tol, gap / st.gap_tol)
        improved = ~conv & (merit < best_merit[act])
        for k in np.flatnonzero(improved):
            i = act[k]
            best_merit[i] = merit[k]
            best[i] = (xs[k], ys[k], zs[k], ss[k], (float(pres[k]), float(dres[k]), float(gap[k])))
            stalled[i] = 0
        near = ~conv & ~improved & (best_merit[act] < 1e4)
        stalled[act[near]] += 1
        optimal = [(xs[k], ys[k], zs[k], ss[k], (float(pres[k]), float(dres[k]), float(gap[k])))
                   if conv[k] else None for k in range(act.size)]
        done = conv | (stalled[act] >= 3) | (it == st.max_iter)
        if done.any():
            finish(done, it, optimal)
            if act.size == 0:
                break

        with np.errstate(all="ignore"):
            scaling = NTScaling(layout, s, z)
            bad = ~np.all(np.isfinite(scaling.lam), axis=1) | ~(layout.interior_margin(scaling.lam) > 0)
        if bad.any():
            finish(bad, it)
            if act.size == 0:
                break
            with np.errstate(all="ignore"):
                scaling = NTScaling(layout, s, z)
        lam = scaling.lam
        nb_a = act.size
        ba = bB[:nb_a]
        ti = tau[:, None]
        r1 = y @ A + G.rmv(z) + c * ti
        r2 = -x @ A.T + b * ti
        r3 = -G.mv(x) + h * ti - s
        r4 = kappa + np.sum(c * x, axis=1) + y @ b + np.sum(h * z, axis=1)
        mu = (np.sum(s * z, axis=1) + tau * kappa) / (nu + 1)
        try:
            with np.errstate(all="ignore"):
                kkt = _BatchKKT(G, A, scaling, st.regularization, st.refine_steps)
        except np.linalg.LinAlgError:
            finish(np.ones(nb_a, dtype=bool), it)
            break
        W = scaling.apply
        u1 = kkt.solve(-c, ba, h)
        qu1 = np.sum(c * u1[0], axis=1) + u1[1] @ b + np.sum(h * u1[2], axis=1)

        def direction(rs, rk, sigma_r):
            sr = sigma_r[:, None]
            t = jordan_divide(layout, lam, rs)
            u2 = kkt.solve(-sr * r1, sr * r2, sr * r3 - W(t))
            dtau = ((-sigma_r * r4 - rk / tau
                     - (np.sum(c * u2[0], axis=1) + u2[1] @ b + np.sum(h * u2[2], axis=1)))
                    / (qu1 - kappa / tau))
            dt = dtau[:, None]
            dz = u2[2] + dt * u1[2]
            ds = W(t - W(dz))
            return (u2[0] + dt * u1[0], u2[1] + dt * u1[1], dz, ds, dtau,
                    (rk - kappa * dtau) / tau)

        def max_step(d):
            _, _, dz, ds, dtau, dkappa = d
            a = np.minimum(layout.max_step(s, ds), layout.max_step(z, dz))
            a = np.where(dtau < 0, np.minimum(a, -tau / dtau), a)
            return np.where(dkappa < 0, np.minimum(a, -kappa / dkappa), a)

        with np.errstate(all="ignore"):
            lamlam = jordan_product(layout, lam, lam)
            aff = direction(-lamlam, -tau * kappa, np.ones(nb_a))
            alpha_aff = np.minimum(1.0, max_step(aff))
            sigma = (1.0 - alpha_aff) ** 3
            corr = jordan_product(layout, W(aff[3], True), W(aff[2]))
            rs = -lamlam - corr + (sigma * mu)[:, None] * e
            rk = -tau * kappa - aff[4] * aff[5] + sigma * mu
            dx, dy, dz, ds, dtau, dkappa = step = direction(rs, rk, 1.0 - sigma)
            alpha = np.minimum(1.0, st.step_fraction * max_step(step))
            al = alpha[:, None]
            x, y, z, s = x + al * dx, y + al * dy, z + al * dz, s + al * ds
            tau, kappa = tau + alpha * dtau, kappa + alpha * dkappa
        bad = ~(np.isfinite(alpha) & (alpha >= 1e-14) & (tau > 0))
        bad |= ~np.all(np.isfinite(np.hstack([x, y, z, s])), axis=1)
        if bad.any():
            finish(bad, it)
    return out


# ---------------------------------------------------------------- text dump

def dump_program(prog: ConeProgram, path) -> None:
    """Write ``prog`` as plain text: one header line then one block per matrix.

    Format::

        # dre2e cone program
        cones l3 q3 q3          (l<dim> orthant, q<dim> second-order cone)
        c 1 <n>                 (block name, rows, cols) then rows, row-major
        ...
        A <p> <n>
        b 1 <p>
        G <m> <n>
        h 1 <m>

    Numbers are written with 17 significant digits so a reload is exact.
    """
    lines = ["# dre2e cone program"]
    tags = [("l" if isinstance(k, NonNegative) else "q") + str(k.dim) for k in prog.cones]
    lines.append("cones " + " ".join(tags))
    blocks = [("c", prog.c[None, :]), ("A", prog.A), ("b", prog.b[None, :]),
              ("G", prog.G), ("h", prog.h[None, :])]
    for name, M in blocks:
        if M.size == 0:
            M = np.zeros((0, M.shape[1]))
        lines.append(f"{name} {M.shape[0]} {M.shape[1]}")
        for row in M:
            lines.append(" ".join(f"{v:.17g}" for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_program(path) -> ConeProgram:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln and not ln.startswith("#")]
    head = lines[0].split()
    if head[0] != "cones":
        raise ValueError("missing 'cones' line")
    cones = [NonNegative(int(t[1:])) if t[0] == "l" else SecondOrder(int(t[1:])) for t in head[1:]]
    mats = {}
    i = 1
    while i < len(lines):
        name, r, k = lines[i].split()
        r, k = int(r), int(k)
        rows = [np.array(lines[i + 1 + j].split(), dtype=float) for j in range(r)]
        mats[name] = np.array(rows).reshape(r, k) if r else np.zeros((0, k))
        i += 1 + r
    return ConeProgram(c=mats["c"].ravel(), G=mats["G"], h=mats["h"].ravel(), cones=cones,
                       A=mats["A"], b=mats["b"].ravel())
