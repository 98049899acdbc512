import itertools

import numpy as np
import pytest
import scipy.optimize
from hypothesis import given, strategies as st

from dre2e.solver import (
    ConeProgram,
    ConeSolution,
    NonNegative,
    SecondOrder,
    SolverSettings,
    Status,
    dump_program,
    kkt_residuals,
    load_program,
    solve_cone_batch,
    solve_cone_program,
)


def lp_example():
    # min -x  s.t.  x <= 1, x >= 0
    return ConeProgram(c=[-1.0], G=[[1.0], [-1.0]], h=[1.0, 0.0], cones=[NonNegative(2)])


def norm_example():
    # min t  s.t.  (t, 3, 4) in the second-order cone
    return ConeProgram(c=[1.0], G=[[-1.0], [0.0], [0.0]], h=[0.0, 3.0, 4.0],
                       cones=[SecondOrder(3)])


def random_lp(seed):
    """Feasible and bounded: h = G x0 + slack, c = -G^T lam with lam > 0."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 7))
    m = int(rng.integers(n + 1, 9))
    G = rng.normal(size=(m, n))
    x0 = rng.normal(size=n)
    h = G @ x0 + rng.uniform(0.1, 1.0, size=m)
    c = -G.T @ rng.uniform(0.1, 1.0, size=m)
    return ConeProgram(c=c, G=G, h=h, cones=[NonNegative(m)])


def vertex_enumeration(prog):
    """Best objective over all basic feasible points of G x <= h."""
    G, h, c = prog.G, prog.h, prog.c
    m, n = G.shape
    best = np.inf
    for rows in itertools.combinations(range(m), n):
        B = G[list(rows)]
        if abs(np.linalg.det(B)) < 1e-10:
            continue
        x = np.linalg.solve(B, h[list(rows)])
        if np.all(G @ x <= h + 1e-9):
            best = min(best, c @ x)
    return best


def test_lp_vertex_example():
    sol = solve_cone_program(lp_example())
    assert sol.status is Status.OPTIMAL
    assert sol.x[0] == pytest.approx(1.0, abs=1e-8)
    assert sol.objective == pytest.approx(-1.0, abs=1e-8)


def test_euclidean_norm_example():
    sol = solve_cone_program(norm_example())
    assert sol.status is Status.OPTIMAL
    assert sol.x[0] == pytest.approx(5.0, abs=1e-8)
    assert kkt_residuals(norm_example(), sol)[2] <= 1e-8


def test_residuals_of_exact_solution():
    prog = lp_example()
    exact = ConeSolution(x=np.array([1.0]), y=np.zeros(0), z=np.array([1.0, 0.0]),
                         s=np.array([0.0, 1.0]), status=Status.OPTIMAL, objective=-1.0,
                         iterations=0)
    assert max(kkt_residuals(prog, exact)) <= 1e-12
    bumped = ConeSolution(x=np.array([1.0 + 1e-3]), y=exact.y, z=exact.z, s=exact.s,
                          status=Status.OPTIMAL, objective=-1.0, iterations=0)
    pres = kkt_residuals(prog, bumped)[0]
    assert 1e-4 <= pres <= 1e-2


@pytest.mark.parametrize("seed", range(10))
def test_lp_matches_vertex_enumeration(seed):
    prog = random_lp(seed)
    sol = solve_cone_program(prog)
    assert sol.status is Status.OPTIMAL
    assert sol.objective == pytest.approx(vertex_enumeration(prog), abs=1e-7)


@given(st.integers(0, 10_000))
def test_lp_matches_highs(seed):
    prog = random_lp(seed)
    sol = solve_cone_program(prog)
    ref = scipy.optimize.linprog(prog.c, A_ub=prog.G, b_ub=prog.h,
                                 bounds=[(None, None)] * prog.n_var, method="highs")
    assert sol.status is Status.OPTIMAL
    assert sol.objective == pytest.approx(ref.fun, abs=1e-7)


@given(st.integers(0, 10_000))
def test_self_dual_gap_closes(seed):
    prog = random_lp(seed)
    sol = solve_cone_program(prog)
    assert abs(prog.c @ sol.x + prog.b @ sol.y + prog.h @ sol.z) <= 1e-7 * (1 + abs(sol.objective))
    lay = prog.layout
    assert lay.interior_margin(sol.s) >= -1e-8
    assert lay.interior_margin(sol.z) >= -1e-8


def test_equality_constrained_socp():
    # min x1 + x2  s.t.  x3 = 1, ||(x1, x2)|| <= x3  ->  x1 = x2 = -1/sqrt(2)
    prog = ConeProgram(c=[1.0, 1.0, 0.0], A=[[0.0, 0.0, 1.0]], b=[1.0],
                       G=-np.array([[0, 0, 1.0], [1.0, 0, 0], [0, 1.0, 0]]), h=np.zeros(3),
                       cones=[SecondOrder(3)])
    sol = solve_cone_program(prog)
    assert sol.status is Status.OPTIMAL
    assert sol.x[:2] == pytest.approx([-2 ** -0.5] * 2, abs=1e-7)
    assert sol.objective == pytest.approx(-np.sqrt(2.0), abs=1e-8)


def test_detects_infeasible_and_unbounded():
    infeasible = ConeProgram(c=[1.0], G=[[1.0], [-1.0]], h=[-1.0, 0.0], cones=[NonNegative(2)])
    unbounded = ConeProgram(c=[-1.0], G=[[-1.0]], h=[0.0], cones=[NonNegative(1)])
    assert solve_cone_program(infeasible).status is Status.INFEASIBLE
    assert solve_cone_program(unbounded).status is Status.UNBOUNDED


def test_max_iter_reported():
    sol = solve_cone_program(random_lp(3), SolverSettings(max_iter=1))
    assert sol.status is Status.MAX_ITER


def test_deterministic():
    prog = norm_example()
    a, b = solve_cone_program(prog), solve_cone_program(prog)
    assert a.iterations == b.iterations
    assert np.array_equal(a.x, b.x) and np.array_equal(a.z, b.z)


def test_rejects_bad_dimensions():
    with pytest.raises(ValueError):
        ConeProgram(c=[1.0], G=[[1.0], [1.0]], h=[1.0, 1.0], cones=[NonNegative(1)])
    with pytest.raises(ValueError):
        SecondOrder(1)
    with pytest.raises(ValueError):
        ConeProgram(c=[], G=np.zeros((0, 0)), h=[], cones=[])


def test_batch_matches_single(rng):
    # shared structure, varying objective and one varying row of G
    cs, Gs, hs = [], [], []
    for _ in range(6):
        G = np.array([[-1.0, 0.0], [0.0, 0.0], [0.0, 0.0], [0.0, -1.0], [1.0, 1.0]])
        G[1, 1] = rng.normal()
        cs.append(np.array([1.0, rng.uniform(0.1, 1.0)]))
        Gs.append(G)
        hs.append(np.array([0.0, 3.0, 4.0, 0.0, 10.0]))
    cones = [SecondOrder(3), NonNegative(2)]
    batch = solve_cone_batch(np.array(cs), np.array(Gs), np.array(hs), cones)
    for c, G, h, got in zip(cs, Gs, hs, batch):
        ref = solve_cone_program(ConeProgram(c=c, G=G, h=h, cones=cones))
        assert got.status is Status.OPTIMAL
        assert got.objective == pytest.approx(ref.objective, abs=1e-7)
        assert max(kkt_residuals(ConeProgram(c=c, G=G, h=h, cones=cones), got)) <= 1e-8


def test_dump_roundtrip(tmp_path):
    prog = ConeProgram(c=[1.0, 2.0], A=[[1.0, 1.0]], b=[1.0], G=-np.eye(2), h=[0.0, 0.0],
                       cones=[NonNegative(2)])
    path = tmp_path / "prog.txt"
    dump_program(prog, path)
    back = load_program(path)
    for name in ("c", "A", "b", "G", "h"):
        assert np.array_equal(getattr(prog, name), getattr(back, name))
    assert back.cones == prog.cones
