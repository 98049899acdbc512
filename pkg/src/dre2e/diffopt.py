"""Decision layers compiled to cone programs, with adjoint sensitivities.

Four layers map predictions ``yhat`` and an error window ``eps`` (T x n) to
long-only weights ``z`` on the simplex:

* base: the argmax vertex of ``yhat``;
* nominal: ``min_z  f(z, uniform) - gamma yhat.z``;
* DR (Hellinger or Variation): ``min_z max_{p in P(delta)} f(z, p) - gamma yhat.z``
  through its convex dual in ``(c, lambda, xi, beta[, tau])``.

Here ``f(z, p) = min_c sum_j p_j (eps_j.z - c)^2``. Every quadratic term
``a >= r^2`` is written as the cone constraint ``||(2r, a - 1)|| <= a + 1``.

Backward differentiates the KKT conditions at the returned solution, using
the Jordan-product form of complementarity ``z o ds + s o dz = 0``. (Freezing
the Nesterov-Todd scaling instead is exact only for orthants; on second-order
cones it is a poor model once iterates leave the central path.) A single
adjoint solve gives gradients for every program coefficient, which are then
chained into ``(yhat, eps, gamma, delta)``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
import scipy.linalg

from .cones import NonNegative, SecondOrder, arrow_matrix, jordan_product, purify
from .risk import (
    Divergence,
    ErrorWindow,
    PhiDivergence,
    RiskFunction,
    RiskKind,
)
from .solver import (
    ConeProgram,
    ConeSolution,
    SolverSettings,
    Status,
    kkt_residuals,
    solve_cone_batch,
    solve_cone_program,
)

__all__ = [
    "DecisionLayerSpec",
    "DegenerateSolution",
    "LayerError",
    "LayerGradients",
    "LayerKind",
    "LayerSolution",
    "backward",
    "backward_batch",
    "solve_base",
    "solve_dr",
    "solve_layer",
    "solve_layer_batch",
    "solve_nominal",
]

# Tighter than the solver defaults: backward is only as good as the KKT point.
LAYER_SETTINGS = SolverSettings()
# A MaxIter exit whose residuals are below this is accepted (SOCs stall near 1e-10).
ACCEPT_RESIDUAL = 1e-7
LAMBDA_FLOOR = 1e-10
# polish stops once the KKT map is at roundoff level
POLISH_STOP = 1e-14
# relative residual a stacked adjoint solve must reach to be trusted
ADJOINT_CHECK = 1e-8


class LayerError(RuntimeError):
    """The cone solver did not return a usable solution for a layer."""


class DegenerateSolution(UserWarning):
    """Strict complementarity fails; the layer is not differentiable here."""


class LayerKind(str, Enum):
    BASE = "Base"
    NOMINAL = "Nominal"
    DR_HELLINGER = "DrHellinger"
    DR_VARIATION = "DrVariation"

    @property
    def is_dr(self) -> bool:
        return self in (LayerKind.DR_HELLINGER, LayerKind.DR_VARIATION)


@dataclass(frozen=True)
class DecisionLayerSpec:
    kind: LayerKind
    gamma: float = 0.0
    delta: float = 0.0
    R: RiskFunction = field(default_factory=RiskFunction)

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        if not np.isfinite(self.gamma) or self.gamma < 0:
            raise ValueError(f"gamma must be finite and >= 0, got {self.gamma}")
        if not np.isfinite(self.delta) or self.delta < 0:
            raise ValueError(f"delta must be finite and >= 0, got {self.delta}")
        if self.R.kind is not RiskKind.QUADRATIC:
            raise NotImplementedError(self.R.kind)

    @property
    def divergence(self) -> PhiDivergence | None:
        if self.kind is LayerKind.DR_HELLINGER:
            return PhiDivergence(Divergence.HELLINGER)
        if self.kind is LayerKind.DR_VARIATION:
            return PhiDivergence(Divergence.VARIATION)
        return None

    def check_delta(self, T: int) -> None:
        d = self.divergence
        if d is not None and not self.delta < d.delta_max(T):
            raise ValueError(
                f"delta={self.delta} outside [0, {d.delta_max(T):.6g}) for T={T}")


@dataclass(frozen=True)
class _Compiled:
    program: ConeProgram
    cols: dict
    # rows of G holding 2(eps_j.z - c), and the sample index j of each
    eps_rows: np.ndarray
    eps_index: np.ndarray
    lam_row: int | None = None
    # errors enter the program divided by `scale` (and gamma by scale^2)
    scale: float = 1.0


@dataclass(frozen=True)
class LayerSolution:
    spec: DecisionLayerSpec
    z_star: np.ndarray
    aux: dict
    objective: float
    yhat: np.ndarray
    window: ErrorWindow | None = None
    compiled: _Compiled | None = None
    solution: ConeSolution | None = None

    @property
    def program(self) -> ConeProgram | None:
        return None if self.compiled is None else self.compiled.program


@dataclass(frozen=True)
class LayerGradients:
    d_yhat: np.ndarray
    d_eps: np.ndarray
    d_gamma: float
    d_delta: float
    degenerate: bool = False


# ------------------------------------------------------------------ compile


class _Builder:
    """Accumulates ``G x + s = h`` rows cone by cone."""

    def __init__(self, nx: int):
        self.nx = nx
        self.G: list[np.ndarray] = []
        self.h: list[float] = []
        self.cones: list = []

    @property
    def rows(self) -> int:
        return len(self.h)

    def row(self, coeffs: dict, h: float = 0.0) -> int:
        g = np.zeros(self.nx)
        for col, v in coeffs.items():
            g[col] += v
        self.G.append(g)
        self.h.append(h)
        return len(self.h) - 1

    def nonneg(self, cols) -> None:
        """``x[col] >= 0`` for each column."""
        for col in np.atleast_1d(cols):
            self.row({int(col): -1.0})
        self.cones.append(NonNegative(len(np.atleast_1d(cols))))

    def linear_ge(self, coeffs: dict) -> None:
        """``sum coeffs[col] x[col] >= 0``."""
        self.row({k: -v for k, v in coeffs.items()})
        self.cones.append(NonNegative(1))

    def square_epigraph(self, a: dict, eps_j, zcols, ccol) -> int:
        """``a(x) >= (eps_j.z - c)^2`` as ``(a + 1, 2 r, a - 1)`` in the cone."""
        self.row({k: -v for k, v in a.items()}, 1.0)
        coeffs = {int(k): -2.0 * e for k, e in zip(zcols, eps_j)}
        coeffs[ccol] = 2.0
        r_row = self.row(coeffs, 0.0)
        self.row({k: -v for k, v in a.items()}, -1.0)
        self.cones.append(SecondOrder(3))
        return r_row

    def program(self, c, A, b) -> ConeProgram:
        G = np.array(self.G) if self.G else np.zeros((0, self.nx))
        return ConeProgram(c=c, G=G, h=np.array(self.h), cones=self.cones, A=A, b=b)


def _simplex_rows(B: _Builder, zcols, nx):
    B.nonneg(zcols)
    A = np.zeros((1, nx))
    A[0, zcols] = 1.0
    return A, np.ones(1)


def _compile_nominal(yhat, eps, gamma) -> _Compiled:
    T, n = eps.shape
    zc = np.arange(n)
    cc = n
    uc = np.arange(n + 1, n + 1 + T)
    nx = n + 1 + T
    c = np.zeros(nx)
    c[zc] = -gamma * yhat
    c[uc] = 1.0 / T
    B = _Builder(nx)
    A, b = _simplex_rows(B, zc, nx)
    rows = [B.square_epigraph({int(uc[j]): 1.0}, eps[j], zc, cc) for j in range(T)]
    cols = {"z": zc, "c": cc, "u": uc}
    return _Compiled(B.program(c, A, b), cols, np.array(rows), np.arange(T))


def _compile_hellinger(yhat, eps, gamma, delta) -> _Compiled:
    # xi + (delta - 1) lam + mean(beta) - gamma yhat.z with
    #   beta_j tau_j >= lam^2  and  tau_j <= xi + lam - (eps_j.z - c)^2.
    # The second constraint is exactly the domain condition of the conjugate.
    T, n = eps.shape
    zc = np.arange(n)
    cc, lc, xc = n, n + 1, n + 2
    bc = np.arange(n + 3, n + 3 + T)
    tc = np.arange(n + 3 + T, n + 3 + 2 * T)
    nx = n + 3 + 2 * T
    c = np.zeros(nx)
    c[zc] = -gamma * yhat
    c[lc] = delta - 1.0
    c[xc] = 1.0
    c[bc] = 1.0 / T
    B = _Builder(nx)
    A, b = _simplex_rows(B, zc, nx)
    lam_row = B.rows
    B.nonneg(lc)
    for j in range(T):
        B.row({int(bc[j]): -1.0, int(tc[j]): -1.0})
        B.row({lc: -2.0})
        B.row({int(bc[j]): -1.0, int(tc[j]): 1.0})
        B.cones.append(SecondOrder(3))
    rows = [B.square_epigraph({xc: 1.0, lc: 1.0, int(tc[j]): -1.0}, eps[j], zc, cc)
            for j in range(T)]
    cols = {"z": zc, "c": cc, "lambda": lc, "xi": xc, "beta": bc, "tau": tc}
    return _Compiled(B.program(c, A, b), cols, np.array(rows), np.arange(T), lam_row)


def _compile_variation(yhat, eps, gamma, delta) -> _Compiled:
    # xi + delta lam + mean(beta) - gamma yhat.z with
    #   beta_j >= -lam,  beta_j + xi >= r_j^2,  lam + xi >= r_j^2.
    T, n = eps.shape
    zc = np.arange(n)
    cc, lc, xc = n, n + 1, n + 2
    bc = np.arange(n + 3, n + 3 + T)
    nx = n + 3 + T
    c = np.zeros(nx)
    c[zc] = -gamma * yhat
    c[lc] = delta
    c[xc] = 1.0
    c[bc] = 1.0 / T
    B = _Builder(nx)
    A, b = _simplex_rows(B, zc, nx)
    lam_row = B.rows
    B.nonneg(lc)
    for j in range(T):
        B.linear_ge({int(bc[j]): 1.0, lc: 1.0})
    rows, index = [], []
    for j in range(T):
        rows.append(B.square_epigraph({int(bc[j]): 1.0, xc: 1.0}, eps[j], zc, cc))
        rows.append(B.square_epigraph({lc: 1.0, xc: 1.0}, eps[j], zc, cc))
        index += [j, j]
    cols = {"z": zc, "c": cc, "lambda": lc, "xi": xc, "beta": bc}
    return _Compiled(B.program(c, A, b), cols, np.array(rows), np.array(index), lam_row)


# -------------------------------------------------------------------- solve


def _compile(spec: DecisionLayerSpec, yhat, eps) -> _Compiled:
    """Compile on errors normalized to unit RMS.

    ``z*(eps, gamma) = z*(eps / a, gamma / a^2)`` for every ``a > 0`` (the
    objective is just multiplied by ``a^2``), so the program is built at the
    scale where the solver's absolute tolerances mean something.
    """
    rms = float(np.sqrt(np.mean(eps ** 2)))
    a = rms if rms > 0 else 1.0
    e, g = eps / a, spec.gamma / a ** 2
    if spec.kind is LayerKind.NOMINAL or spec.delta == 0:
        comp = _compile_nominal(yhat, e, g)
    elif spec.kind is LayerKind.DR_HELLINGER:
        comp = _compile_hellinger(yhat, e, g, spec.delta)
    else:
        comp = _compile_variation(yhat, e, g, spec.delta)
    return replace(comp, scale=a)


def _check_inputs(yhat, w: ErrorWindow):
    yhat = np.asarray(yhat, dtype=float)
    if yhat.shape != (w.n,):
        raise ValueError(f"yhat has shape {yhat.shape}, expected ({w.n},)")
    if not np.all(np.isfinite(yhat)):
        raise ValueError("yhat has non-finite entries")
    return yhat


def _run(compiled: _Compiled, spec, yhat, w, settings) -> LayerSolution:
    sol = solve_cone_program(compiled.program, settings or LAYER_SETTINGS)
    if sol.status is not Status.OPTIMAL:
        usable = sol.status is Status.MAX_ITER and max(sol.residuals) <= ACCEPT_RESIDUAL
        if not usable:
            raise LayerError(
                f"{spec.kind.value} layer (T={w.T}, n={w.n}, gamma={spec.gamma:.4g}, "
                f"delta={spec.delta:.4g}): solver returned {sol.status.value}, "
                f"residuals {tuple(float(f'{r:.2e}') for r in sol.residuals)}")
    return _finish(compiled, spec, yhat, w, polish(compiled.program, sol))


def _finish(compiled: _Compiled, spec, yhat, w, sol: ConeSolution) -> LayerSolution:
    x = sol.x
    z = x[compiled.cols["z"]].copy()
    a = compiled.scale
    # c carries the units of eps; every other auxiliary those of eps^2
    aux = {k: (x[v] * a ** 2 if isinstance(v, np.ndarray) else float(x[v]) * (a if k == "c" else a ** 2))
           for k, v in compiled.cols.items() if k != "z"}
    return LayerSolution(spec, z, aux, float(sol.objective) * a ** 2, yhat, w, compiled, sol)


def solve_base(yhat, spec: DecisionLayerSpec | None = None) -> LayerSolution:
    """All weight on the largest prediction; ties go to the lowest index."""
    yhat = np.asarray(yhat, dtype=float)
    if yhat.ndim != 1 or yhat.size < 1 or not np.all(np.isfinite(yhat)):
        raise ValueError("yhat must be a finite 1-d array")
    spec = spec or DecisionLayerSpec(LayerKind.BASE)
    z = np.zeros(yhat.size)
    z[int(np.argmax(yhat))] = 1.0
    return LayerSolution(spec, z, {}, float(-yhat.max()), yhat)


def solve_nominal(yhat, w: ErrorWindow, spec: DecisionLayerSpec,
                  settings: SolverSettings | None = None) -> LayerSolution:
    if spec.kind is not LayerKind.NOMINAL:
        raise ValueError(f"solve_nominal needs a Nominal spec, got {spec.kind.value}")
    yhat = _check_inputs(yhat, w)
    return _run(_compile(spec, yhat, w.eps), spec, yhat, w, settings)


def solve_dr(yhat, w: ErrorWindow, spec: DecisionLayerSpec,
             settings: SolverSettings | None = None) -> LayerSolution:
    """Dual form of the distributionally robust layer.

    At ``delta == 0`` the ambiguity set is ``{uniform}`` and the dual
    multiplier ``lambda`` is unbounded, so the nominal program is solved
    instead (same optimal value and ``z``).
    """
    if not spec.kind.is_dr:
        raise ValueError(f"solve_dr needs a DR spec, got {spec.kind.value}")
    yhat = _check_inputs(yhat, w)
    spec.check_delta(w.T)
    return _run(_compile(spec, yhat, w.eps), spec, yhat, w, settings)


def solve_layer(yhat, w: ErrorWindow | None, spec: DecisionLayerSpec,
                settings: SolverSettings | None = None) -> LayerSolution:
    """Dispatch on ``spec.kind``."""
    if spec.kind is LayerKind.BASE:
        return solve_base(yhat, spec)
    if spec.kind is LayerKind.NOMINAL:
        return solve_nominal(yhat, w, spec, settings)
    return solve_dr(yhat, w, spec, settings)


# ----------------------------------------------------------------- backward


def complementarity_margin(prog: ConeProgram, sol: ConeSolution) -> tuple[float, float]:
    """Strict-complementarity margin and the threshold it is judged against.

    The margin is the smallest, over all paired eigenvalues of ``(s, z)``, of
    the larger member of the pair. With ``s_i z_i ~ mu`` a strictly
    complementary pair keeps one member well away from zero, while a pair
    where both sit near ``sqrt(mu)`` marks an active-set boundary.
    """
    pair_max = purify(prog.layout, sol.s, sol.z)[2]
    mu = max(float(sol.s @ sol.z), 0.0) / max(prog.layout.degree, 1)
    return float(pair_max.min()), max(1e-9, 10.0 * np.sqrt(mu))


def backward(layer_sol: LayerSolution, dL_dz, warn: bool = True) -> LayerGradients:
    """Reverse-mode gradients of ``L(z*)`` with respect to the layer inputs.

    Solves ``K^T v = (dL/dz on the z columns, 0, 0, 0)`` once, ``K`` being
    the linearized KKT map in ``(dx, dy, dz, ds)``, then reads off
    ``dL/dc = -v_x``, ``dL/dG = -(z_dual v_x^T + v_z x^T)``, ``dL/dh = v_z``.
    If strict complementarity fails the gradients are still returned but
    ``degenerate`` is set (and a :class:`DegenerateSolution` warning issued).
    """
    dL_dz = np.asarray(dL_dz, dtype=float)
    spec = layer_sol.spec
    n = layer_sol.z_star.size
    if dL_dz.shape != (n,):
        raise ValueError(f"dL_dz has shape {dL_dz.shape}, expected ({n},)")
    if spec.kind is LayerKind.BASE:
        T = 0 if layer_sol.window is None else layer_sol.window.T
        return LayerGradients(np.zeros(n), np.zeros((T, n)), 0.0, 0.0)

    prog = layer_sol.compiled.program
    s, degenerate, margin, threshold = _backward_prep(layer_sol)
    if degenerate and warn:
        warnings.warn(f"{spec.kind.value} layer: complementarity margin {margin:.2e} "
                      f"< {threshold:.2e}", DegenerateSolution, stacklevel=2)

    zc = layer_sol.compiled.cols["z"]
    s_clean, z_clean, _ = purify(prog.layout, s, layer_sol.solution.z)
    vx, vz, solved = _adjoint(prog, s_clean, z_clean, zc, dL_dz)
    if not solved:
        degenerate = True
        if warn:
            warnings.warn(f"{spec.kind.value} layer: singular KKT system, "
                          "least-squares adjoint used", DegenerateSolution, stacklevel=2)
    return _assemble(layer_sol, vx, vz, z_clean, degenerate)


def _backward_prep(layer_sol: LayerSolution):
    """Floored slacks and the degeneracy verdict from the complementarity margin."""
    comp, sol, spec = layer_sol.compiled, layer_sol.solution, layer_sol.spec
    s = sol.s.copy()
    if comp.lam_row is not None:
        s[comp.lam_row] = max(s[comp.lam_row], LAMBDA_FLOOR)
    margin, threshold = complementarity_margin(comp.program, sol)
    # delta == 0 is compiled without lambda; the objective has a kink there
    degenerate = margin < threshold or (spec.kind.is_dr and spec.delta == 0)
    return s, bool(degenerate), margin, threshold


def _assemble(layer_sol: LayerSolution, vx, vz, z_clean, degenerate) -> LayerGradients:
    """Chain the adjoint solution into gradients for ``(yhat, eps, gamma, delta)``."""
    spec, comp, w = layer_sol.spec, layer_sol.compiled, layer_sol.window
    zc = comp.cols["z"]
    n = zc.size
    dc = -vx
    x, zd = layer_sol.solution.x, z_clean
    a = comp.scale
    # program coefficients: c_z = -(gamma / a^2) yhat, c_lambda = delta (+ const)
    d_yhat = -(spec.gamma / a ** 2) * dc[zc]
    d_gamma = float(-layer_sol.yhat @ dc[zc]) / a ** 2
    d_delta = 0.0
    if spec.kind.is_dr and spec.delta > 0:
        d_delta = float(dc[comp.cols["lambda"]])
    # G[row, z] = -2 eps_j / a on every row carrying r_j
    rows = comp.eps_rows
    dG_z = -(zd[rows, None] * vx[None, zc] + vz[rows, None] * x[None, zc])
    d_eps = np.zeros((w.T, n))
    np.add.at(d_eps, comp.eps_index, -2.0 * dG_z / a)
    grads = LayerGradients(d_yhat, d_eps, d_gamma, d_delta, bool(degenerate))
    if not all(np.all(np.isfinite(v)) for v in (d_yhat, d_eps, d_gamma, d_delta)):
        raise LayerError(f"{spec.kind.value} backward produced non-finite gradients")
    return grads


def _kkt_matrix(prog: ConeProgram, s, zd):
    """Jacobian of the KKT map in ``(x, y, z, s)``.

    ``[[0, A^T, G^T, 0], [A, 0, 0, 0], [G, 0, 0, I], [0, 0, Arw(s), Arw(z)]]``;
    the last block row linearizes ``s o z = 0``.
    """
    nx, ny, m = prog.n_var, prog.A.shape[0], prog.G.shape[0]
    N = nx + ny + 2 * m
    K = np.zeros((N, N))
    ix, iy, iz, i_s = (slice(0, nx), slice(nx, nx + ny),
                       slice(nx + ny, nx + ny + m), slice(nx + ny + m, N))
    K[ix, iy] = prog.A.T
    K[ix, iz] = prog.G.T
    K[iy, ix] = prog.A
    K[iz, ix] = prog.G
    K[iz, i_s] = np.eye(m)
    K[i_s, iz] = arrow_matrix(prog.layout, s)
    K[i_s, i_s] = arrow_matrix(prog.layout, zd)
    return K, (ix, iy, iz, i_s)


def _kkt_map(prog: ConeProgram, x, y, zd, s):
    return np.concatenate([
        prog.A.T @ y + prog.G.T @ zd + prog.c,
        prog.A @ x - prog.b,
        prog.G @ x + s - prog.h,
        jordan_product(prog.layout, s, zd),
    ])


def polish(prog: ConeProgram, sol: ConeSolution, steps: int = 3) -> ConeSolution:
    """Newton refinement of an interior-point solution on the KKT equations.

    The iterate is first snapped to exact complementarity (``purify``), then
    Newton steps on ``(dual feasibility, primal feasibility, s o z = 0)``
    are taken, re-snapping after each. Under strict complementarity this
    converges quadratically, removing the ``sqrt(mu)``-sized error that an
    interior point leaves in flat directions of the objective. The result is
    kept only if it does not increase the residuals.
    """
    def merit(x, y, zd, s):
        return float(np.abs(_kkt_map(prog, x, y, zd, s)).max())

    x, y = sol.x.copy(), sol.y.copy()
    s, zd, _ = purify(prog.layout, sol.s, sol.z)
    start = merit(sol.x, sol.y, sol.z, sol.s)
    for _ in range(steps):
        r = _kkt_map(prog, x, y, zd, s)
        if np.abs(r).max() <= POLISH_STOP:
            break
        K, (ix, iy, iz, i_s) = _kkt_matrix(prog, s, zd)
        with warnings.catch_warnings():
            warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
            try:
                d = scipy.linalg.solve(K, -r, check_finite=False)
            except (scipy.linalg.LinAlgError, scipy.linalg.LinAlgWarning, ValueError):
                break
        if not np.all(np.isfinite(d)):
            break
        x, y = x + d[ix], y + d[iy]
        s, zd, _ = purify(prog.layout, s + d[i_s], zd + d[iz])
    if not merit(x, y, zd, s) <= start:
        return sol
    return replace(sol, x=x, y=y, z=zd, s=s, objective=float(prog.c @ x),
                   residuals=kkt_residuals(prog, replace(sol, x=x, y=y, z=zd, s=s)))


def _adjoint(prog: ConeProgram, s, zd, zcols, dL_dz):
    """``K^T v = g`` for the linearized KKT system.

    Falls back to least squares (and reports ``solved=False``) when ``K`` is
    singular to working precision.

    ``K`` acts on ``(dx, dy, dz, ds)``; the right-hand side of a perturbation
    is ``(-dc - dG^T z - dA^T y, db - dA x, dh - dG x, 0)``.
    """
    K, (ix, iy, iz, i_s) = _kkt_matrix(prog, s, zd)
    g = np.zeros(K.shape[0])
    g[zcols] = dL_dz
    solved = True
    with warnings.catch_warnings():
        warnings.simplefilter("error", scipy.linalg.LinAlgWarning)
        try:
            v = scipy.linalg.solve(K.T, g, check_finite=False)
        except (scipy.linalg.LinAlgError, scipy.linalg.LinAlgWarning, ValueError):
            v = scipy.linalg.lstsq(K.T, g, check_finite=False)[0]
            solved = False
    return v[ix], v[iz], solved


# -------------------------------------------------------------------- batch


def _compile_batch(spec: DecisionLayerSpec, yhats, eps) -> list[_Compiled]:
    """Compile the first sample, then patch ``c`` and the error rows of ``G``.

    Only ``c`` (through ``yhat`` and the scaled ``gamma``) and the ``eps``
    coefficients of ``G`` differ between samples of one layer.
    """
    first = _compile(spec, yhats[0], eps[0])
    prog = first.program
    zc = first.cols["z"]
    rms = np.sqrt(np.mean(eps ** 2, axis=(1, 2)))
    scale = np.where(rms > 0, rms, 1.0)
    out = [first]
    for k in range(1, len(yhats)):
        a = float(scale[k])
        c = prog.c.copy()
        c[zc] = -(spec.gamma / a ** 2) * yhats[k]
        G = prog.G.copy()
        G[first.eps_rows[:, None], zc[None, :]] = -2.0 * eps[k][first.eps_index] / a
        P = ConeProgram.__new__(ConeProgram)
        P.__dict__.update(prog.__dict__, c=c, G=G)
        out.append(replace(first, program=P, scale=a))
    return out


def solve_layer_batch(yhats, windows, spec: DecisionLayerSpec,
                      settings: SolverSettings | None = None) -> list:
    """:func:`solve_layer` over many samples of one layer, vectorized.

    All windows must share ``T``. Entry ``k`` is a :class:`LayerSolution`
    or the :class:`LayerError` the single-sample path raised for it.
    """
    yhats = np.asarray(yhats, dtype=float)
    windows = list(windows)
    if len(windows) != len(yhats):
        raise ValueError("need one window per prediction")
    if not windows:
        return []
    if spec.kind is LayerKind.BASE or len(windows) == 1:
        return [_try(solve_layer, y, w, spec, settings) for y, w in zip(yhats, windows)]
    for y, w in zip(yhats, windows):
        _check_inputs(y, w)
    spec.check_delta(windows[0].T)
    eps = np.stack([w.eps for w in windows])
    comps = _compile_batch(spec, yhats, eps)
    P0 = comps[0].program
    raw = solve_cone_batch(np.stack([cp.program.c for cp in comps]),
                           np.stack([cp.program.G for cp in comps]),
                           np.tile(P0.h, (len(comps), 1)), P0.cones, P0.A, P0.b,
                           settings or LAYER_SETTINGS)
    ok = [k for k, r in enumerate(raw) if r.status is Status.OPTIMAL]
    out = [None] * len(comps)
    for k in range(len(comps)):
        if raw[k].status is not Status.OPTIMAL:
            # the single solver has stall handling the batch lacks
            out[k] = _try(_run, comps[k], spec, yhats[k], windows[k], settings)
    polished = _polish_batch([comps[k].program for k in ok], [raw[k] for k in ok])
    for k, sol in zip(ok, polished):
        out[k] = _finish(comps[k], spec, yhats[k], windows[k], sol)
    return out


def _try(fn, *args):
    try:
        return fn(*args)
    except LayerError as exc:
        return exc


def _polish_batch(progs, sols, steps: int = 3) -> list[ConeSolution]:
    """:func:`polish` for programs that share ``A``, ``b`` and the cones."""
    if not progs:
        return []
    layout = progs[0].layout
    A, b = progs[0].A, progs[0].b
    c = np.stack([p.c for p in progs])
    G = np.stack([p.G for p in progs])
    h = np.stack([p.h for p in progs])
    nx, ny, m = c.shape[1], A.shape[0], h.shape[1]

    def kkt_map(x, y, zd, s):
        return np.concatenate([
            y @ A + np.einsum("bij,bi->bj", G, zd) + c,
            x @ A.T - b,
            np.einsum("bij,bj->bi", G, x) + s - h,
            jordan_product(layout, s, zd),
        ], axis=1)

    x0 = np.stack([sl.x for sl in sols])
    y0 = np.stack([sl.y for sl in sols])
    z0 = np.stack([sl.z for sl in sols])
    s0 = np.stack([sl.s for sl in sols])
    start = np.abs(kkt_map(x0, y0, z0, s0)).max(axis=1)
    x, y = x0.copy(), y0.copy()
    s, zd, _ = purify(layout, s0, z0)
    active = np.ones(len(progs), dtype=bool)
    for _ in range(steps):
        r = kkt_map(x, y, zd, s)
        active &= np.abs(r).max(axis=1) > POLISH_STOP
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        Gi = G[idx]
        K = _reduced_kkt_batch(A, Gi, layout, s[idx], zd[idx])
        ri = r[idx]
        r1, r2 = ri[:, :nx], ri[:, nx:nx + ny]
        r3, r4 = ri[:, nx + ny:nx + ny + m], ri[:, nx + ny + m:]
        rhs = np.concatenate([-r1, -r2, -r4 + jordan_product(layout, zd[idx], r3)], axis=1)
        d = _solve_each(K, rhs)
        fin = np.all(np.isfinite(d), axis=1)
        active[idx[~fin]] = False
        idx, d, Gi, r3 = idx[fin], d[fin], Gi[fin], r3[fin]
        if idx.size == 0:
            break
        dx = d[:, :nx]
        x[idx] += dx
        y[idx] += d[:, nx:nx + ny]
        zz = zd[idx] + d[:, nx + ny:]
        ss = s[idx] - r3 - np.einsum("bij,bj->bi", Gi, dx)
        s[idx], zd[idx], _ = purify(layout, ss, zz)
    final = np.abs(kkt_map(x, y, zd, s)).max(axis=1)
    out = []
    for k, (p, sl) in enumerate(zip(progs, sols)):
        if not final[k] <= start[k]:
            out.append(sl)
            continue
        new = replace(sl, x=x[k], y=y[k], z=zd[k], s=s[k], objective=float(p.c @ x[k]))
        out.append(replace(new, residuals=kkt_residuals(p, new)))
    return out


def _solve_each(K, rhs):
    """Stacked ``K x = rhs``; a singular system yields a NaN row, not an error."""
    try:
        return np.linalg.solve(K, rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        if len(K) == 1:
            return np.full(rhs.shape, np.nan)
    # bisect so a few singular systems cost O(log B) extra solves
    h = len(K) // 2
    return np.concatenate([_solve_each(K[:h], rhs[:h]), _solve_each(K[h:], rhs[h:])])


def _reduced_kkt_batch(A, G, layout, s, zd):
    """The KKT Jacobian with ``ds = -r3 - G dx`` eliminated.

    ``[[0, A^T, G^T], [A, 0, 0], [-Arw(z) G, 0, Arw(s)]]`` in ``(dx, dy, dz)``;
    it is singular exactly when the full Jacobian is.
    """
    nb, m, nx = G.shape
    ny = A.shape[0]
    o = nx + ny
    K = np.zeros((nb, o + m, o + m))
    K[:, :nx, nx:o] = A.T
    K[:, :nx, o:] = G.transpose(0, 2, 1)
    K[:, nx:o, :nx] = A
    K[:, o:, :nx] = -(arrow_matrix(layout, zd) @ G)
    K[:, o:, o:] = arrow_matrix(layout, s)
    return K


def backward_batch(layer_sols, dL_dz) -> list[LayerGradients]:
    """:func:`backward` (without warnings) over solutions of one layer.

    ``dL_dz`` is (B, n). Adjoint systems are solved together. Samples
    already flagged degenerate, or whose stacked solve fails the residual
    check, go through the single-sample adjoint.
    """
    layer_sols = list(layer_sols)
    dL_dz = np.asarray(dL_dz, dtype=float)
    if not layer_sols:
        return []
    if layer_sols[0].spec.kind is LayerKind.BASE:
        return [backward(ls, g, warn=False) for ls, g in zip(layer_sols, dL_dz)]
    prep = [_backward_prep(ls) for ls in layer_sols]
    prog = layer_sols[0].compiled.program
    layout, A = prog.layout, prog.A
    s = np.stack([p[0] for p in prep])
    s_clean, z_clean, _ = purify(layout, s, np.stack([ls.solution.z for ls in layer_sols]))
    G = np.stack([ls.compiled.program.G for ls in layer_sols])
    # K^T v = g with v_z = -Arw(z) v_s eliminated: the reduced matrix, transposed
    Kt = _reduced_kkt_batch(A, G, layout, s_clean, z_clean).transpose(0, 2, 1)
    nx, ny = prog.n_var, A.shape[0]
    zc = layer_sols[0].compiled.cols["z"]
    g = np.zeros(Kt.shape[:2])
    g[:, zc] = dL_dz
    V = _solve_each(Kt, g)
    out = []
    for k, ls in enumerate(layer_sols):
        degenerate = prep[k][1]
        v = V[k]
        good = (not degenerate and np.all(np.isfinite(v))
                and np.abs(Kt[k] @ v - g[k]).max() <= ADJOINT_CHECK * max(np.abs(g[k]).max(), 1.0))
        if not good:
            vx, vz, solved = _adjoint(ls.compiled.program, s_clean[k], z_clean[k], zc, dL_dz[k])
            degenerate = degenerate or not solved
        else:
            vx = v[:nx]
            vz = -jordan_product(layout, z_clean[k], v[nx + ny:])
        out.append(_assemble(ls, vx, vz, z_clean[k], degenerate))
    return out


def layer_objective_check(layer_sol: LayerSolution) -> tuple[float, float, float]:
    """Residuals of the retained cone solution (for diagnostics)."""
    if layer_sol.compiled is None:
        return (0.0, 0.0, 0.0)
    return kkt_residuals(layer_sol.compiled.program, layer_sol.solution)
