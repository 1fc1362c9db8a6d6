import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize

from gridsched.admm import (PQ_WEIGHT, AdmmConfig, ConsensusMap, InfeasibleAgentError, LocalBlock,
                            ResidualTrace, consensus_update, dual_update, init_state, local_update, project_cone,
                            project_cone_fixed_l, solve, step, trend_flag)
from gridsched.grid import bundled_feeder_path, load_feeder
from gridsched.socp import allocate_pv, distflow_residuals, problem_from_network, relative_gaps
from oracles import make_problem, sweep_power_flow, three_bus_oracle, two_bus_oracle

cp = pytest.importorskip("cvxpy")

TIGHT = AdmmConfig(eps_primal=1e-10, eps_dual=1e-10, max_iter=5000)


@pytest.fixture(scope="module")
def ieee123():
    return load_feeder(bundled_feeder_path())


def two_bus(p=0.5, q=0.2, r=0.01, x=0.02, l_max=10.0):
    return make_problem([-1, 0], [r], [x], [0, p], [0, q], l_max=l_max)


def cvx_projection(aP, aQ, aw, al, l_fix=None):
    P, Q, w = cp.Variable(), cp.Variable(), cp.Variable(nonneg=True)
    l = cp.Variable(nonneg=True) if l_fix is None else l_fix
    cost = PQ_WEIGHT * (cp.square(P - aP) + cp.square(Q - aQ)) + cp.square(w - aw)
    if l_fix is None:
        cost = cost + cp.square(l - al)
    cons = [cp.quad_over_lin(cp.hstack([P, Q]), l) <= w]
    cp.Problem(cp.Minimize(cost), cons).solve(solver="CLARABEL", tol_gap_abs=1e-10, tol_gap_rel=1e-10,
                                              tol_feas=1e-10)
    return P.value, Q.value, w.value, (l.value if l_fix is None else l_fix)


def cvx_opf(prob):
    """Centralized SOCP relaxation of the OPF."""
    m, n = prob.n_branch, prob.n_bus
    P, Q, l, v = cp.Variable(m), cp.Variable(m), cp.Variable(m, nonneg=True), cp.Variable(n)
    cons = [v[0] == prob.v0, v >= prob.v_min_sq, v <= prob.v_max_sq, l <= prob.l_max]
    kids = [[] for _ in range(n)]
    for k in range(m):
        kids[prob.parent[k + 1]].append(k)
    for k in range(m):
        j, i = k + 1, prob.parent[k + 1]
        out_p = sum((P[c] for c in kids[j]), start=0)
        out_q = sum((Q[c] for c in kids[j]), start=0)
        cons += [P[k] - prob.r[k] * l[k] - out_p == -prob.p_inj[j],
                 Q[k] - prob.x[k] * l[k] - out_q == -prob.q_inj[j],
                 v[j] == v[i] - 2 * (prob.r[k] * P[k] + prob.x[k] * Q[k])
                 + (prob.r[k] ** 2 + prob.x[k] ** 2) * l[k],
                 cp.quad_over_lin(cp.hstack([P[k], Q[k]]), l[k]) <= v[i]]
    pb = cp.Problem(cp.Minimize(prob.r @ l), cons)
    pb.solve(solver="CLARABEL")
    return pb.value


# ---------------------------------------------------------------- cone projection

def test_interior_point_unchanged():
    out = project_cone(np.array([0.1]), np.array([0.05]), np.array([1.0]), np.array([0.5]))
    assert [float(a[0]) for a in out] == [0.1, 0.05, 1.0, 0.5]


@pytest.mark.parametrize("seed", range(12))
def test_cone_projection_matches_cvxpy(seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(0, 1, 4)
    got = [float(v[0]) for v in project_cone(*(np.array([t]) for t in a))]
    ref = cvx_projection(*a)
    np.testing.assert_allclose(got, ref, atol=1e-5)


def dual_cone_gap(a, x, weights):
    """Optimality of x as the projection of a: x in K, W(x - a) in the dual cone, complementary."""
    g = np.asarray(weights) * (np.asarray(x) - np.asarray(a))
    P, Q, w, l = x
    return max(P * P + Q * Q - w * l, -w, -l,               # x in K
               -g[2], -g[3], g[0] ** 2 + g[1] ** 2 - 4 * g[2] * g[3],   # W(x - a) in K*
               abs(float(np.dot(g, x))))


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=4, max_size=4))
def test_cone_projection_optimality_conditions(a):
    x = [float(v[0]) for v in project_cone(*(np.array([t]) for t in a))]
    assert dual_cone_gap(a, x, [PQ_WEIGHT, PQ_WEIGHT, 1.0, 1.0]) <= 1e-9


@pytest.mark.parametrize("seed", range(8))
def test_fixed_l_projection_matches_cvxpy(seed):
    rng = np.random.default_rng(100 + seed)
    aP, aQ, aw = rng.normal(0, 1, 3)
    l_fix = rng.uniform(0.1, 2.0)
    got = [float(v[0]) for v in project_cone_fixed_l(np.array([aP]), np.array([aQ]), np.array([aw]),
                                                     np.array([l_fix]))]
    ref = cvx_projection(aP, aQ, aw, 0.0, l_fix=l_fix)[:3]
    np.testing.assert_allclose(got, ref, atol=1e-5)
    # stationarity on the active boundary with multiplier mu
    P, Q, w = got
    if aP * aP + aQ * aQ > aw * l_fix:
        assert P * P + Q * Q == pytest.approx(w * l_fix, abs=1e-12)
        mu = 2 * (w - aw) / l_fix
        assert PQ_WEIGHT * (P - aP) == pytest.approx(-mu * P, abs=1e-9)


# ---------------------------------------------------------------- local step

def brute_force_local(prob, target, rho):
    """Grid search over the feasible block, then constrained refinement."""
    r, lmax = prob.r[0], prob.l_max[0]
    tP, tQ, tl, tw = target.P[0], target.Q[0], target.l[0], target.w[0]

    def f(z):
        P, Q, l, w = z
        return r * l + 0.5 * rho * (PQ_WEIGHT * ((P - tP) ** 2 + (Q - tQ) ** 2) + (l - tl) ** 2 + (w - tw) ** 2)

    best, best_val = None, np.inf
    for l in np.linspace(0, lmax, 21):
        for w in np.linspace(0, 3, 21):
            rad = np.sqrt(w * l)
            for s in np.linspace(0, 1, 6):
                for th in np.linspace(0, 2 * np.pi, 24, endpoint=False):
                    z = (s * rad * np.cos(th), s * rad * np.sin(th), l, w)
                    val = f(z)
                    if val < best_val:
                        best, best_val = z, val
    cons = [{"type": "ineq", "fun": lambda z: z[3] * z[2] - z[0] ** 2 - z[1] ** 2}]
    res = minimize(f, best, method="SLSQP", constraints=cons, bounds=[(None, None)] * 2 + [(0, lmax), (0, None)],
                   options={"ftol": 1e-16, "maxiter": 1000})
    return res.x


@pytest.mark.parametrize("seed, l_max", [(0, 10.0), (1, 10.0), (2, 0.3), (3, 0.3), (4, 10.0)])
def test_local_step_matches_brute_force(seed, l_max):
    rng = np.random.default_rng(seed)
    prob = two_bus(l_max=l_max)
    rho = 0.5
    target = LocalBlock(P=np.array([rng.normal(0.5, 0.3)]), Q=np.array([rng.normal(0.2, 0.2)]),
                        l=np.array([rng.uniform(-0.2, 0.8)]), w=np.array([rng.uniform(0.8, 1.2)]),
                        v=np.array([1.0, 0.97]))
    x = local_update(prob, target, rho)
    ref = brute_force_local(prob, target, rho)
    np.testing.assert_allclose([x.P[0], x.Q[0], x.l[0], x.w[0]], ref, atol=1e-6)


def test_local_step_fixed_point_without_active_constraints():
    prob = make_problem([-1, 0], [0.0], [0.02], [0, 0.1], [0, 0.05])
    target = LocalBlock(np.array([0.1]), np.array([0.05]), np.array([0.2]), np.array([1.0]), np.array([1.0, 0.98]))
    x = local_update(prob, target, 1.0)
    for a, b in zip(x.parts(), target.parts()):
        np.testing.assert_array_equal(a, b)


def test_voltage_clipped_and_root_pinned():
    prob = two_bus()
    target = LocalBlock(np.zeros(1), np.zeros(1), np.zeros(1), np.ones(1), np.array([0.5, 2.0]))
    x = local_update(prob, target, 1.0)
    assert x.v[0] == prob.v0
    assert x.v[1] == prob.v_max_sq[1]


def test_infeasible_agent_names_bus():
    prob = make_problem([-1, 0], [0.01], [0.02], [0, 0.5], [0, 0.2])
    bad = make_problem([-1, 0], [0.01], [0.02], [0, 0.5], [0, 0.2], l_max=-1.0)
    with pytest.raises(InfeasibleAgentError, match="bus 1"):
        solve(bad)
    prob.v_min_sq[1], prob.v_max_sq[1] = 1.2, 1.1
    with pytest.raises(InfeasibleAgentError, match="bus 1"):
        solve(prob)


# ---------------------------------------------------------------- consensus and duals

def test_two_copies_average():
    prob = two_bus()
    cmap = ConsensusMap(prob)
    block = LocalBlock(np.zeros(1), np.zeros(1), np.zeros(1), np.array([1.1]), np.array([0.9, 1.0]))
    assert cmap.average(block)[cmap.iv[0]] == pytest.approx(1.0)


def test_single_copy_plus_dual():
    prob = two_bus()
    cmap = ConsensusMap(prob)
    h = LocalBlock(np.array([0.3]), np.zeros(1), np.zeros(1), np.ones(1), np.ones(2))
    u = LocalBlock(np.array([0.05]), np.zeros(1), np.zeros(1), np.zeros(1), np.zeros(2))
    assert cmap.average(h + u)[cmap.iP[0]] == pytest.approx(0.35)


def test_average_matches_direct_reaverage(ieee123):
    prob = problem_from_network(ieee123)
    cmap = ConsensusMap(prob)
    rng = np.random.default_rng(0)
    m, n = prob.n_branch, prob.n_bus
    block = LocalBlock(*(rng.normal(size=k) for k in (m, m, m, m, n)))
    t = cmap.average(block)
    for j in range(n):
        copies = [block.v[j]] + [block.w[k] for k in range(m) if prob.parent[k + 1] == j]
        assert t[cmap.iv[j]] == pytest.approx(np.mean(copies), abs=1e-12)
    np.testing.assert_array_equal(t[cmap.iP], block.P)


def test_projection_is_weighted_least_squares(ieee123):
    prob = problem_from_network(ieee123, load_scale=0.7)
    cmap = ConsensusMap(prob)
    t = np.random.default_rng(1).normal(size=cmap.size)
    z = cmap.project(t)
    E = cmap.E.toarray()
    np.testing.assert_allclose(E @ z, cmap.f, atol=1e-10)
    # optimality: W (t - z) lies in the row space of E
    lam, *_ = np.linalg.lstsq(E.T, cmap.weights * (t - z), rcond=None)
    np.testing.assert_allclose(E.T @ lam, cmap.weights * (t - z), atol=1e-9)


def test_dual_update_examples():
    zero = LocalBlock.zeros(1, 2)
    x = LocalBlock(np.array([0.4]), np.array([0.1]), np.array([0.2]), np.array([1.0]), np.array([1.0, 0.9]))
    same = dual_update(zero, x, x.copy())
    assert same.max_abs() == 0.0
    z = x.copy()
    z.P = z.P - 0.1
    bumped = dual_update(zero, x, z)
    assert bumped.P[0] == pytest.approx(0.1)
    assert bumped.Q[0] == 0.0


def test_consensus_update_satisfies_equations():
    prob = two_bus()
    cmap = ConsensusMap(prob)
    h = LocalBlock(np.array([0.6]), np.array([0.1]), np.array([0.3]), np.array([1.02]), np.array([1.0, 0.95]))
    z = consensus_update(cmap, h, LocalBlock.zeros(1, 2))
    np.testing.assert_allclose(cmap.E @ z, cmap.f, atol=1e-14)


# ---------------------------------------------------------------- solver

def test_zero_load_converges_immediately():
    prob = make_problem([-1, 0, 1], [0.01, 0.02], [0.01, 0.01], [0, 0, 0], [0, 0, 0])
    res = solve(prob)
    assert res.converged and res.iterations == 1
    assert res.solution.objective == 0.0
    assert np.abs(res.solution.P).max() < 1e-15


def test_two_bus_objective_matches_oracle():
    _, _, l_star, v1 = two_bus_oracle(0.01, 0.02, 0.5, 0.2)
    res = solve(two_bus())
    assert res.converged and res.tight
    assert res.solution.objective == pytest.approx(0.01 * l_star, abs=1e-6)
    tight = solve(two_bus(), TIGHT)
    assert tight.solution.objective == pytest.approx(0.01 * l_star, abs=1e-12)
    assert tight.solution.v[1] == pytest.approx(v1, abs=1e-9)


def test_three_bus_objective_matches_oracle():
    r, x, p, q = [0.01, 0.02], [0.02, 0.03], [0.3, 0.2], [0.1, 0.05]
    _, _, l, _ = three_bus_oracle(r, x, p, q)
    res = solve(make_problem([-1, 0, 1], r, x, [0, *p], [0, *q]), TIGHT)
    assert res.solution.objective == pytest.approx(float(np.dot(r, l)), abs=1e-12)


def test_primal_residual_goes_to_zero():
    prob = two_bus()
    res = solve(prob, AdmmConfig(eps_primal=1e-12, eps_dual=1e-12, max_iter=60, dual_start="zero"))
    assert res.trace.primal[-1] < 1e-3 * res.trace.primal[0]


def test_trace_recomputable_from_iterates():
    prob = make_problem([-1, 0, 1, 1], [0.01, 0.02, 0.015], [0.02, 0.02, 0.01], [0, 0.2, 0.1, 0.1],
                        [0, 0.1, 0.05, 0.02])
    cfg = AdmmConfig()
    cmap = ConsensusMap(prob)
    state = init_state(prob, cfg, cmap)
    for _ in range(5):
        z_old = state.z.copy()
        step(prob, cmap, state, cfg)
        assert state.trace.primal[-1] == (state.x - cmap.spread(state.z)).max_abs()
        assert state.trace.dual[-1] == cfg.rho * np.abs(state.z - z_old).max()


def test_identical_runs_identical_traces(ieee123):
    prob = problem_from_network(ieee123, load_scale=0.8)
    a, b = solve(prob), solve(prob)
    assert a.trace.to_csv() == b.trace.to_csv()


def test_zero_dual_start_reaches_same_solution(ieee123):
    prob = problem_from_network(ieee123, load_scale=0.6)
    a = solve(prob, AdmmConfig(eps_primal=1e-9, eps_dual=1e-9, max_iter=3000))
    b = solve(prob, AdmmConfig(eps_primal=1e-9, eps_dual=1e-9, max_iter=3000, dual_start="zero"))
    assert a.solution.objective == pytest.approx(b.solution.objective, rel=1e-6)


def test_adaptive_rho_converges():
    res = solve(two_bus(), AdmmConfig(adaptive_rho=True, rho=1.0))
    assert res.converged


def test_not_converged_flag():
    res = solve(two_bus(), AdmmConfig(max_iter=2, eps_primal=1e-12, eps_dual=1e-12))
    assert not res.converged
    assert "not-converged" in res.flags


def test_trend_flag():
    falling = ResidualTrace(list(np.geomspace(1, 1e-6, 30)), list(np.geomspace(1, 1e-6, 30)), [0.0] * 30)
    assert not trend_flag(falling)
    stuck = ResidualTrace([1.0] * 30, [1.0] * 30, [0.0] * 30)
    assert trend_flag(stuck)


def test_residual_csv_header():
    res = solve(two_bus())
    lines = res.trace.to_csv().splitlines()
    assert lines[0] == "iter,primal_residual,dual_residual,objective"
    assert len(lines) == res.iterations + 1


def test_config_validation():
    for bad in ({"rho": 0}, {"eps_primal": 0}, {"max_iter": 0}, {"over_relaxation": 2.0}, {"dual_start": "x"}):
        with pytest.raises(ValueError):
            AdmmConfig(**bad)


@pytest.mark.parametrize("scale, pv_kw", [(0.5, 0.0), (1.0, 1750.0), (1.05, 300.0)])
def test_123_bus_against_centralized_socp_and_power_flow(ieee123, scale, pv_kw):
    prob = problem_from_network(ieee123, load_scale=scale, pv_kw=allocate_pv(ieee123, pv_kw))
    res = solve(prob)
    assert res.converged and res.tight
    assert distflow_residuals(prob, res.solution).max_violation <= 1e-3
    ref = cvx_opf(prob)
    _, _, l, _ = sweep_power_flow(prob)
    assert ref == pytest.approx(float(np.dot(prob.r, l)), rel=1e-4)
    assert res.solution.objective == pytest.approx(ref, rel=0.01)
    tight = solve(prob, AdmmConfig(eps_primal=1e-9, eps_dual=1e-9, max_iter=5000))
    assert tight.solution.objective == pytest.approx(ref, rel=1e-5)


# ---------------------------------------------------------------- properties

@st.composite
def radial_problems(draw):
    n = draw(st.integers(2, 10))
    parent = [-1] + [draw(st.integers(0, j - 1)) for j in range(1, n)]
    r = draw(st.lists(st.floats(1e-3, 0.02), min_size=n - 1, max_size=n - 1))
    x = draw(st.lists(st.floats(1e-3, 0.02), min_size=n - 1, max_size=n - 1))
    p = [0.0] + draw(st.lists(st.floats(0, 0.1), min_size=n - 1, max_size=n - 1))
    q = [0.0] + draw(st.lists(st.floats(0, 0.05), min_size=n - 1, max_size=n - 1))
    return make_problem(parent, r, x, p, q)


@settings(max_examples=40, deadline=None)
@given(radial_problems())
def test_tight_solve_matches_power_flow(prob):
    res = solve(prob, AdmmConfig(eps_primal=1e-10, eps_dual=1e-10, max_iter=20000))
    assert res.converged
    _, _, l, _ = sweep_power_flow(prob)
    sol = res.solution
    assert sol.objective == pytest.approx(float(np.dot(prob.r, l)), abs=1e-8)
    assert np.all(relative_gaps(sol) <= 1e-4)
    assert sol.root_import[0] == pytest.approx(prob.p_load.sum() - prob.p_gen.sum() + sol.objective, abs=1e-6)
    assert sol.objective == pytest.approx(float(np.dot(prob.r, sol.l)), abs=1e-9)
