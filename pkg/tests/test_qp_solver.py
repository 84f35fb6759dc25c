import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mpopf.formulation import DemandScenario, build_qp
from mpopf.grid_model import parse_case
from mpopf.qp_solver import (
    OPTIMAL,
    ConvexProgram,
    Infeasible,
    SolveResult,
    check_kkt,
    opf_program,
    projection_program,
    solve,
)

from conftest import box_limits, diurnal_demand

RAMPED_PAIR = """
[case]
slack_bus = 0
[buses]
count = 1
[[generators]]
bus = 0
p_max = 100.0
ramp_up = 20.0
ramp_down = 20.0
cost = 10.0
[[generators]]
bus = 0
p_max = 100.0
cost = 30.0
[[loads]]
bus = 0
p_nominal = 90.0
"""


def _toy3_interior(toy3):
    """A strictly feasible toy3 schedule for constant demand 80 over 3 periods."""
    demand = DemandScenario(np.full((1, 3), 80.0))
    charge, discharge = 5.0, 5.0 * 0.81  # zero net energy change per period
    gen2 = 40.0
    gen1 = 80.0 - gen2 + charge - discharge
    x = np.tile([gen1, gen2, charge, discharge], 3)
    return build_qp(toy3, demand), x


def _vertices_2d(a_mat, b_vec):
    """All vertices of {y : a y <= b} in the plane, by pairwise line intersection."""
    out = []
    for i, j in itertools.combinations(range(len(b_vec)), 2):
        m = a_mat[[i, j]]
        if abs(np.linalg.det(m)) < 1e-12:
            continue
        y = np.linalg.solve(m, b_vec[[i, j]])
        if np.all(a_mat @ y <= b_vec + 1e-9):
            out.append(y)
    return np.array(out)


class TestProjection:
    def test_interior_point_is_fixed(self, toy3):
        qp, x = _toy3_interior(toy3)
        assert np.all(qp.g_mat @ x < qp.h_vec)
        res = solve(projection_program(qp, x))
        assert np.linalg.norm(res.x_star - x) <= 1e-8
        assert np.abs(res.mu_star).max() <= 1e-8

    def test_idempotent_on_case39(self, case39_qp, case39):
        qp, _ = case39_qp
        rng = np.random.default_rng(1)
        cap = box_limits(case39, 24)
        for _ in range(3):
            first = solve(projection_program(qp, rng.uniform(-2 * cap, 2 * cap))).x_star
            again = solve(projection_program(qp, first)).x_star
            assert np.linalg.norm(again - first) <= 1e-8

    @given(st.integers(0, 2**32 - 1))
    def test_non_expansive_toy3(self, toy3, seed):
        qp = build_qp(toy3, diurnal_demand(toy3, 3))
        rng = np.random.default_rng(seed)
        cap = box_limits(toy3, 3)
        z1, z2 = rng.uniform(-2 * cap, 2 * cap, (2, qp.n))
        p1 = solve(projection_program(qp, z1)).x_star
        p2 = solve(projection_program(qp, z2)).x_star
        assert np.linalg.norm(p1 - p2) <= np.linalg.norm(z1 - z2) + 1e-7

    @given(st.integers(0, 2**32 - 1))
    def test_kkt_and_duals(self, toy3, seed):
        qp = build_qp(toy3, diurnal_demand(toy3, 3, seed=seed % 97))
        rng = np.random.default_rng(seed)
        prog = projection_program(qp, rng.uniform(-200, 200, qp.n))
        res = solve(prog)
        assert res.status == OPTIMAL
        assert check_kkt(res, prog).max() <= 1e-8
        assert res.mu_star.min() >= -1e-10

    def test_deterministic(self, case39_qp):
        qp, _ = case39_qp
        z = np.random.default_rng(5).uniform(-100, 500, qp.n)
        a, b = solve(projection_program(qp, z)), solve(projection_program(qp, z))
        assert np.array_equal(a.x_star, b.x_star) and np.array_equal(a.mu_star, b.mu_star)


class TestExactDispatch:
    def test_single_generator(self, single_gen):
        qp = build_qp(single_gen, DemandScenario(np.array([[10.0]])))
        prog = opf_program(qp, single_gen.cost_matrix(1))
        res = solve(prog)
        assert res.x_star[0] == pytest.approx(10.0, abs=1e-7)
        # stationarity c + lambda = 0: the balance dual is minus the marginal cost
        assert -res.lambda_star[0] == pytest.approx(7.0, abs=1e-6)

    def test_hand_built_kkt_point_has_zero_residual(self, single_gen):
        qp = build_qp(single_gen, DemandScenario(np.array([[10.0]])))
        prog = ConvexProgram(np.zeros(1), np.array([7.0]), qp)
        point = SolveResult(np.array([10.0]), np.array([-7.0]), np.zeros(qp.q), OPTIMAL, 0, {})
        assert check_kkt(point, prog).max() == 0.0

    def test_perturbation_shows_in_stationarity(self, toy3):
        qp = build_qp(toy3, diurnal_demand(toy3, 3))
        prog = projection_program(qp, np.full(qp.n, 30.0))
        res = solve(prog)
        res.x_star = res.x_star.copy()
        res.x_star[0] += 1e-3
        assert check_kkt(res, prog).stationarity == pytest.approx(1e-3, rel=1e-3)

    def test_ramp_binding_pair_matches_vertex_oracle(self):
        case = parse_case(RAMPED_PAIR)
        demand = DemandScenario(np.array([[30.0, 90.0]]))
        res = solve(opf_program(build_qp(case, demand), case.cost_matrix(2)))
        # reduced variables y = (a1, a2): cheap unit output, expensive unit covers the rest
        d = demand.p_d[0]
        a_red = np.array([[1, 0], [-1, 0], [0, 1], [0, -1], [-1, 0], [1, 0], [0, -1], [0, 1],
                          [-1, 1], [1, -1]], dtype=float)
        b_red = np.array([100, 0, 100, 0, 100 - d[0], d[0], 100 - d[1], d[1], 20, 20])
        verts = _vertices_2d(a_red, b_red)
        costs = 10 * verts.sum(axis=1) + 30 * (d.sum() - verts.sum(axis=1))
        best = verts[np.argmin(costs)]
        assert costs.min() == pytest.approx(2000.0)
        np.testing.assert_allclose(res.x_star[[0, 2]], best, atol=1e-5)
        np.testing.assert_allclose(res.x_star[[1, 3]], d - best, atol=1e-5)

    def test_case39_kkt(self, case39_qp, case39):
        qp, _ = case39_qp
        prog = opf_program(qp, case39.cost_matrix(24))
        res = solve(prog)
        assert res.status == OPTIMAL
        assert check_kkt(res, prog).max() <= 1e-8
        assert res.mu_star.min() >= -1e-10

    @given(st.integers(0, 96), st.sampled_from([3, 6]))
    def test_degenerate_toy_kkt(self, toy3, seed, T):
        # constant costs leave ties between redundant active rows
        prog = opf_program(build_qp(toy3, diurnal_demand(toy3, T, seed=seed)), toy3.cost_matrix(T))
        res = solve(prog)
        assert check_kkt(res, prog).max() <= 1e-8
        assert res.mu_star.min() >= 0.0

    def test_cost_monotone_in_demand_scale(self, case39):
        base = diurnal_demand(case39, 24)
        cost = case39.cost_matrix(24)
        values = []
        for scale in (0.9, 0.95, 1.0, 1.05):
            prog = opf_program(build_qp(case39, DemandScenario(base.p_d * scale)), cost)
            res = solve(prog)
            values.append(prog.lin @ res.x_star)
        assert all(b >= a - 1e-6 for a, b in zip(values, values[1:]))

    def test_demand_above_capacity_is_infeasible(self, toy3):
        qp = build_qp(toy3, DemandScenario(np.full((1, 3), 300.0)))
        with pytest.raises(Infeasible) as info:
            solve(opf_program(qp, toy3.cost_matrix(3)))
        assert info.value.result.status == "infeasible"

    def test_rejects_negative_quadratic(self, toy3):
        qp = build_qp(toy3, diurnal_demand(toy3, 3))
        with pytest.raises(ValueError):
            ConvexProgram(-np.ones(qp.n), np.zeros(qp.n), qp)
