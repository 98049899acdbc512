"""Oracle checks behind ``dre2e verify`` and the acceptance tests.

Each check draws its own seeded instances, compares the library against an
independent computation and returns a :class:`CheckResult`. Tolerances live
in :data:`TOLERANCES` so that a deliberately corrupted entry makes the
corresponding check fail by name.
"""

from __future__ import annotations

import itertools
import time
import warnings
from dataclasses import dataclass

import numpy as np

from .diffopt import (
    DecisionLayerSpec,
    LayerKind,
    backward,
    solve_dr,
    solve_layer,
    solve_layer_batch,
    solve_nominal,
)
from .loss import TaskLossConfig, task_loss
from .predict import forward, linear_model, mlp_model, model_backward
from .risk import (
    Divergence,
    ErrorWindow,
    PhiDivergence,
    deviation_risk,
    error_covariance,
    minimax_oracle,
)
from .solver import ConeProgram, NonNegative, SecondOrder, Status, solve_cone_program
from .train import delta_interval

TOLERANCES = {
    "duality": 1e-4,
    "delta0_collapse": 1e-5,
    "nonnegativity": 0.0,
    "shift_invariance": 1e-10,
    "symmetry": 1e-10,
    "midpoint_convexity": 1e-12,
    "covariance_form": 1e-10,
    "layer_gradients": 1e-3,
    "prediction_gradients": 1e-4,
    "loss_gradients": 1e-6,
    "delta_max": 1e-12,
    "delta_interval": 5e-5,
    "kkt_residuals": 1e-8,
    "lp_vertices": 1e-7,
}

# relative errors are taken against max(|reference|, GRAD_FLOOR)
GRAD_FLOOR = 1e-3
FD_STEP = 1e-6


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    worst: float
    tol: float
    count: int
    seconds: float = 0.0
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        s = f"{tag} {self.name}: worst {self.worst:.3e} (tol {self.tol:.1e}) over {self.count}"
        s += f" in {self.seconds:.1f}s"
        return s + (f"; {self.detail}" if self.detail else "")


def _result(name, errors, t0, detail="", tol=None):
    tol = TOLERANCES[name] if tol is None else tol
    errors = np.asarray(errors, dtype=float)
    worst = float(errors.max()) if errors.size else np.nan
    passed = bool(errors.size) and bool(np.all(errors <= tol))
    return CheckResult(name, passed, worst, tol, int(errors.size), time.time() - t0, detail)


def _window(rng, T, n, scale=0.05):
    return ErrorWindow(rng.normal(scale=scale, size=(T, n)))


# ------------------------------------------------------------- DR layers

def check_duality(count: int = 200, seed: int = 0) -> CheckResult:
    """Dual layer objective against the primal minimax value from the oracle."""
    t0 = time.time()
    rng = np.random.default_rng(seed)
    errs = []
    for k in range(count):
        kind = (LayerKind.DR_HELLINGER, LayerKind.DR_VARIATION)[k % 2]
        T, n = int(rng.integers(2, 9)), int(rng.integers(2, 5))
        w = _window(rng, T, n)
        yhat = rng.normal(scale=0.02, size=n)
        gamma = float(rng.uniform(0.0, 2.0))
        dmax = DecisionLayerSpec(kind).divergence.delta_max(T)
        # fractions sweep [0, 0.9] so both ends of the delta range are hit
        delta = 0.9 * dmax * (k // 2) / max(count // 2 - 1, 1)
        spec = DecisionLayerSpec(kind, gamma, delta)
        layer = solve_dr(yhat, w, spec)
        value, _, _ = minimax_oracle(w, yhat, gamma, spec.divergence, delta)
        errs.append(abs(layer.objective - value))
    return _result("duality", errs, t0)


def check_delta0_collapse(count: int = 100, seed: int = 1) -> CheckResult:
    t0 = time.time()
    rng = np.random.default_rng(seed)
    errs = []
    for k in range(count):
        kind = (LayerKind.DR_HELLINGER, LayerKind.DR_VARIATION)[k % 2]
        T, n = int(rng.integers(3, 13)), int(rng.integers(2, 8))
        w = _window(rng, T, n)
        yhat = rng.normal(scale=0.02, size=n)
        gamma = float(rng.uniform(0.0, 1.0))
        z_dr = solve_dr(yhat, w, DecisionLayerSpec(kind, gamma, 0.0)).z_star
        z_nom = solve_nominal(yhat, w, DecisionLayerSpec(LayerKind.NOMINAL, gamma)).z_star
        errs.append(np.abs(z_dr - z_nom).max())
    return _result("delta0_collapse", errs, t0)


# ----------------------------------------------------------- risk measure

def _random_case(rng):
    T, n = int(rng.integers(2, 11)), int(rng.integers(1, 6))
    w = _window(rng, T, n)
    z = rng.dirichlet(np.ones(n))
    p = rng.dirichlet(np.ones(T))
    return w, z, p


def check_risk_properties(count: int = 100, seed: int = 2) -> list[CheckResult]:
    """Non-negativity, shift invariance, symmetry and midpoint convexity in z."""
    t0 = time.time()
    rng = np.random.default_rng(seed)
    neg, shift, sym, conv = [], [], [], []
    for _ in range(count):
        w, z, p = _random_case(rng)
        f = deviation_risk(w, z, p)[0]
        neg.append(max(-f, 0.0))
        a = rng.normal(scale=1.0, size=w.n)
        shift.append(abs(deviation_risk(ErrorWindow(w.eps + a), z, p)[0] - f))
        sym.append(abs(deviation_risk(ErrorWindow(-w.eps), z, p)[0] - f))
        z2 = rng.dirichlet(np.ones(w.n))
        mid = deviation_risk(w, 0.5 * (z + z2), p)[0]
        conv.append(max(mid - 0.5 * (f + deviation_risk(w, z2, p)[0]), 0.0))
    return [_result("nonnegativity", neg, t0), _result("shift_invariance", shift, t0),
            _result("symmetry", sym, t0), _result("midpoint_convexity", conv, t0)]


def check_covariance_form(count: int = 100, seed: int = 3) -> CheckResult:
    """Quadratic deviation risk against ``z^T Sigma(p) z`` built explicitly."""
    t0 = time.time()
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(count):
        w, z, p = _random_case(rng)
        # the covariance is summed term by term, independently of error_covariance
        mu = sum(p[j] * w.eps[j] for j in range(w.T))
        S = sum(p[j] * np.outer(w.eps[j] - mu, w.eps[j] - mu) for j in range(w.T))
        errs.append(abs(deviation_risk(w, z, p)[0] - z @ S @ z))
        errs.append(abs(z @ error_covariance(w, p) @ z - z @ S @ z))
    return _result("covariance_form", errs, t0)


# --------------------------------------------------------------- gradients

def _rel(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), GRAD_FLOOR))


def _layer_gradient_errors(kind, rng, h=FD_STEP):
    """Relative errors for one random instance, or None if it is degenerate."""
    T, n = int(rng.integers(4, 9)), int(rng.integers(2, 5))
    eps = rng.normal(scale=0.05, size=(T, n))
    yhat = rng.normal(scale=0.02, size=n)
    gamma = float(rng.uniform(0.05, 1.0))
    spec0 = DecisionLayerSpec(kind, gamma)
    delta = 0.0
    if kind.is_dr:
        # a random fraction almost surely avoids the kinks at integer delta*T/2
        delta = float(rng.uniform(0.05, 0.5)) * spec0.divergence.delta_max(T)
    spec = DecisionLayerSpec(kind, gamma, delta)
    wv = rng.normal(size=n)
    sol = solve_layer(yhat, ErrorWindow(eps), spec)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        g = backward(sol, wv)
    if g.degenerate:
        return None
    # every perturbed input, solved as one batch per (gamma, delta)
    ys, es = [], []
    for i in range(n):
        for s in (h, -h):
            y = yhat.copy()
            y[i] += s
            ys.append(y), es.append(eps)
    for i, j in itertools.product(range(T), range(n)):
        for s in (h, -h):
            e = eps.copy()
            e[i, j] += s
            ys.append(yhat), es.append(e)
    sols = solve_layer_batch(np.array(ys), [ErrorWindow(e) for e in es], spec)
    vals = np.array([wv @ s.z_star for s in sols])
    fd = (vals[0::2] - vals[1::2]) / (2 * h)
    errs = [_rel(g.d_yhat, fd[:n]), _rel(g.d_eps, fd[n:].reshape(T, n))]

    def at(gm, dl):
        return wv @ solve_layer(yhat, ErrorWindow(eps), DecisionLayerSpec(kind, gm, dl)).z_star

    errs.append(_rel(g.d_gamma, (at(gamma + h, delta) - at(gamma - h, delta)) / (2 * h)))
    if kind.is_dr:
        errs.append(_rel(g.d_delta, (at(gamma, delta + h) - at(gamma, delta - h)) / (2 * h)))
    return max(errs)


def check_layer_gradients(per_kind: int = 50, seed: int = 4) -> CheckResult:
    """Implicit gradients of ``w.z*`` against central differences."""
    t0 = time.time()
    rng = np.random.default_rng(seed)
    errs, skipped = [], 0
    for kind in (LayerKind.NOMINAL, LayerKind.DR_HELLINGER, LayerKind.DR_VARIATION):
        got = 0
        while got < per_kind:
            e = _layer_gradient_errors(kind, rng)
            if e is None:
                skipped += 1
                continue
            errs.append(e)
            got += 1
    return _result("layer_gradients", errs, t0, f"{skipped} degenerate instances skipped")


def check_prediction_gradients(count: int = 20, seed: int = 5, h: float = 1e-6) -> CheckResult:
    t0 = time.time()
    rng = np.random.default_rng(seed)
    errs = []
    for k in range(count):
        m, n = int(rng.integers(2, 6)), int(rng.integers(2, 6))
        if k % 2:
            model = mlp_model(m, n, hidden_layers=2 + k % 4 // 2, width=8, seed=k)
        else:
            model = linear_model(m, n).with_params([rng.normal(size=(m, n)), rng.normal(size=n)])
        X = rng.normal(size=(7, m))
        Gy = rng.normal(size=(7, n))
        grads = model_backward(model, X, Gy)
        for pi, p in enumerate(model.params):
            fd = np.zeros_like(p)
            for idx in np.ndindex(p.shape):
                vals = []
                for s in (h, -h):
                    ps = [q.copy() for q in model.params]
                    ps[pi][idx] += s
                    vals.append(np.sum(Gy * forward(model.with_params(ps), X)))
                fd[idx] = (vals[0] - vals[1]) / (2 * h)
            errs.append(_rel(grads[pi], fd))
    return _result("prediction_gradients", errs, t0)


def check_loss_gradients(count: int = 50, seed: int = 6, h: float = 1e-6) -> CheckResult:
    t0 = time.time()
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(count):
        n, v = int(rng.integers(2, 8)), int(rng.integers(1, 13))
        cfg = TaskLossConfig(mse_weight=float(rng.uniform(0, 1)), v=v)
        z = rng.dirichlet(np.ones(n))
        yh = rng.normal(scale=0.02, size=n)
        Y = rng.normal(0.005, 0.02, size=(v + 1, n))
        _, dz, dy = task_loss(z, yh, Y, cfg)
        fz = np.array([(task_loss(z + h * e, yh, Y, cfg)[0] - task_loss(z - h * e, yh, Y, cfg)[0])
                       / (2 * h) for e in np.eye(n)])
        fy = np.array([(task_loss(z, yh + h * e, Y, cfg)[0] - task_loss(z, yh - h * e, Y, cfg)[0])
                       / (2 * h) for e in np.eye(n)])
        errs.append(max(_rel(dz, fz), _rel(dy, fy)))
    return _result("loss_gradients", errs, t0)


# ------------------------------------------------------------ calibration

def check_delta_calibration() -> list[CheckResult]:
    t0 = time.time()
    d = PhiDivergence(Divergence.HELLINGER)
    exact = 2.0 * (1.0 - 1.0 / np.sqrt(104.0))
    lo, hi = delta_interval(104, d)
    # four-digit endpoints, which must also round to the two-digit ones quoted
    errs = [abs(lo - 0.0902), abs(hi - 0.4510)]
    if (round(lo, 2), round(hi, 2)) != (0.09, 0.45):
        errs.append(np.inf)
    return [
        _result("delta_max", [abs(d.delta_max(104) - exact)], t0),
        _result("delta_interval", errs, t0, f"interval [{lo:.4f}, {hi:.4f}]"),
    ]


# ------------------------------------------------------------------ solver

def _random_lp(rng):
    n = int(rng.integers(1, 4))
    k = int(rng.integers(n + 1, n + 5))
    G = rng.normal(size=(k, n))
    x0 = rng.normal(size=n)
    h = G @ x0 + rng.uniform(0.1, 1.0, size=k)
    # c in the cone spanned by -G^T keeps the LP bounded below
    lam = rng.uniform(0.0, 1.0, size=k) * (rng.uniform(size=k) < 0.7)
    c = -(G.T @ lam)
    return c, G, h


def _vertex_optimum(c, G, h):
    n = c.size
    best = np.inf
    for rows in itertools.combinations(range(len(h)), n):
        Gs = G[list(rows)]
        if abs(np.linalg.det(Gs)) < 1e-12:
            continue
        x = np.linalg.solve(Gs, h[list(rows)])
        if np.all(G @ x <= h + 1e-9):
            best = min(best, float(c @ x))
    if not np.isfinite(best) and np.allclose(c, 0):
        return 0.0
    return best


def _kkt_error(prog: ConeProgram, sol) -> float:
    """Scaled KKT residuals recomputed here, plus cone violations of ``s`` and ``z``."""
    x, y, z, s = sol.x, sol.y, sol.z, sol.s
    err = [np.linalg.norm(prog.A @ x - prog.b) / max(1.0, np.linalg.norm(prog.b)),
           np.linalg.norm(prog.G @ x + s - prog.h) / max(1.0, np.linalg.norm(prog.h)),
           np.linalg.norm(prog.A.T @ y + prog.G.T @ z + prog.c) / max(1.0, np.linalg.norm(prog.c)),
           abs(s @ z)]
    off = 0
    for cone in prog.cones:
        for v in (s, z):
            b = v[off:off + cone.dim]
            viol = -b.min() if isinstance(cone, NonNegative) else np.linalg.norm(b[1:]) - b[0]
            err.append(max(viol, 0.0))
        off += cone.dim
    return float(max(err))


def check_solver(count: int = 200, seed: int = 7) -> list[CheckResult]:
    """LP optima against vertex enumeration, plus KKT residuals of every solve."""
    t0 = time.time()
    rng = np.random.default_rng(seed)
    lp_err, kkt = [], []
    for _ in range(count):
        c, G, h = _random_lp(rng)
        prog = ConeProgram(c=c, G=G, h=h, cones=[NonNegative(len(h))])
        sol = solve_cone_program(prog)
        ref = _vertex_optimum(c, G, h)
        lp_err.append(abs(sol.objective - ref) if sol.status is Status.OPTIMAL else np.inf)
        if sol.status is Status.OPTIMAL:
            kkt.append(_kkt_error(prog, sol))
    lp = _result("lp_vertices", lp_err, t0)
    for _ in range(count // 2):
        # small SOCPs: min c.x over an intersection of norm balls
        n = int(rng.integers(2, 5))
        k = int(rng.integers(1, 4))
        G = np.vstack([np.vstack([np.zeros((1, n)), -np.eye(n)]) for _ in range(k)])
        centres = rng.normal(scale=0.3, size=(k, n))
        h = np.concatenate([np.r_[1.0, -ctr] for ctr in centres])
        prog = ConeProgram(c=rng.normal(size=n), G=G, h=h, cones=[SecondOrder(n + 1)] * k)
        sol = solve_cone_program(prog)
        if sol.status is Status.OPTIMAL:
            kkt.append(_kkt_error(prog, sol))
    return [lp, _result("kkt_residuals", kkt, t0)]


# -------------------------------------------------------------------- suite

def run_all(scale: float = 1.0) -> list[CheckResult]:
    """Every check; ``scale`` shrinks the instance counts for quick runs."""
    def k(n):
        return max(1, int(round(n * scale)))

    out = [check_duality(k(200)), check_delta0_collapse(k(100))]
    out += check_risk_properties(k(100))
    out.append(check_covariance_form(k(100)))
    out.append(check_layer_gradients(k(50)))
    out.append(check_prediction_gradients(k(20)))
    out.append(check_loss_gradients(k(50)))
    out += check_delta_calibration()
    out += check_solver(k(200))
    return out
