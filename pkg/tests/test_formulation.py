import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mpopf.formulation import (
    EQ_FAMILIES,
    INEQ_FAMILIES,
    DecisionLayout,
    DemandScenario,
    RegionBuilder,
    build_equalities,
    build_qp,
    devectorize,
    direct_residuals,
    dump_qp,
    load_qp,
    max_violation,
    selection_matrices,
    soc_trajectory,
    vectorize,
)
from mpopf.grid_model import parse_case

from conftest import TINY_ESS, box_limits, diurnal_demand


def _stack_residuals(ineq, eq):
    return (
        np.concatenate([ineq[f] for f in INEQ_FAMILIES]),
        np.concatenate([eq[f] for f in EQ_FAMILIES]),
    )


class TestLayout:
    def test_vectorize_is_period_major(self):
        x = np.array([[1.0, 4.0], [2.0, 5.0], [3.0, 6.0]])
        np.testing.assert_array_equal(vectorize(x), [1, 2, 3, 4, 5, 6])

    @given(arrays(np.float64, (5, 4), elements=st.floats(-1e6, 1e6)))
    def test_round_trip_bit_exact(self, x):
        layout = DecisionLayout(1, 2, 4)
        assert np.array_equal(devectorize(vectorize(x, layout), layout), x)

    def test_shape_mismatch(self):
        layout = DecisionLayout(1, 1, 2)
        with pytest.raises(ValueError):
            vectorize(np.zeros((2, 2)), layout)
        with pytest.raises(ValueError):
            devectorize(np.zeros(5), layout)

    def test_index_and_split(self):
        layout = DecisionLayout(2, 1, 3)
        v = np.arange(layout.size, dtype=float)
        pg, pch, pdis = layout.split(v)
        np.testing.assert_array_equal(pg[:, 1], v[layout.index("gen", 1)])
        np.testing.assert_array_equal(pch[:, 2], v[layout.index("charge", 2)])
        np.testing.assert_array_equal(pdis[:, 0], v[layout.index("discharge", 0)])

    def test_selection_matrices(self):
        sel = selection_matrices(DecisionLayout(2, 1, 4))
        block = np.array([1.0, 2.0, 3.0, 4.0])
        np.testing.assert_array_equal(sel.u_g @ block, [1, 2])
        np.testing.assert_array_equal(sel.u_ch @ block, [3])
        np.testing.assert_array_equal(sel.u_dis @ block, [4])
        np.testing.assert_array_equal(sel.d @ np.full(4, 7.0), 0.0)
        np.testing.assert_array_equal(sel.s @ np.eye(4)[0], np.ones(4))


class TestAssembly:
    def test_tiny_case_matches_hand_written_matrices(self):
        case = parse_case(TINY_ESS)
        demand = DemandScenario(np.array([[10.0, 20.0]]))
        qp = build_qp(case, demand)
        # x = [g1, c1, d1, g2, c2, d2]; eta_ch = 0.9, 1 / eta_dis = 1.25
        # line 0 -> 1 with the slack at bus 0: flow = d + c - dis
        soc1 = [0, 0.9, -1.25, 0, 0, 0]
        soc2 = [0, 0.9, -1.25, 0, 0.9, -1.25]
        g_expected = np.array(
            [
                [1, 0, 0, 0, 0, 0], [0, 0, 0, 1, 0, 0],
                [-1, 0, 0, 0, 0, 0], [0, 0, 0, -1, 0, 0],
                [0, 1, 0, 0, 0, 0], [0, 0, 0, 0, 1, 0],
                [0, -1, 0, 0, 0, 0], [0, 0, 0, 0, -1, 0],
                [0, 0, 1, 0, 0, 0], [0, 0, 0, 0, 0, 1],
                [0, 0, -1, 0, 0, 0], [0, 0, 0, 0, 0, -1],
                [-1, 0, 0, 1, 0, 0],
                [1, 0, 0, -1, 0, 0],
                soc1, soc2,
                np.negative(soc1), np.negative(soc2),
                [0, 1, -1, 0, 0, 0], [0, 0, 0, 0, 1, -1],
                [0, -1, 1, 0, 0, 0], [0, 0, 0, 0, -1, 1],
            ],
            dtype=float,
        )
        h_expected = np.array(
            [100, 100, -5, -5, 15, 15, 0, 0, 12, 12, 0, 0, 20, 30,
             25, 25, 23, 23, 50, 40, 70, 80],
            dtype=float,
        )
        np.testing.assert_allclose(qp.g_mat.toarray(), g_expected, atol=1e-15)
        np.testing.assert_allclose(qp.h_vec, h_expected, atol=1e-12)
        a_expected = np.array([[1, -1, 1, 0, 0, 0], [0, 0, 0, 1, -1, 1], soc2])
        np.testing.assert_allclose(qp.a_mat.toarray(), a_expected, atol=1e-15)
        np.testing.assert_array_equal(qp.b_vec, [10, 20, 0])

    def test_row_counts(self, toy3, case39):
        for case, T in ((toy3, 3), (case39, 24)):
            qp = build_qp(case, diurnal_demand(case, T))
            p = case.n_g + 2 * case.n_e
            expected_q = 2 * p * T + 2 * case.n_g * (T - 1) + 2 * case.n_e * T + 2 * case.n_l * T
            assert qp.q == expected_q
            assert qp.a_mat.shape == (T + case.n_e, p * T)

    def test_labels_partition_rows(self, case39_qp):
        qp, _ = case39_qp
        for labels, total in ((qp.row_labels, qp.q), (qp.eq_labels, qp.a_mat.shape[0])):
            start = 0
            for _, lo, hi in labels:
                assert lo == start and hi >= lo
                start = hi
            assert start == total
        assert np.all(np.isfinite(qp.h_vec))

    def test_no_storage_reduces_to_generators(self, triangle3):
        T = 4
        demand = diurnal_demand(triangle3, T)
        a_mat, b_vec = build_equalities(triangle3, demand)
        np.testing.assert_array_equal(a_mat.toarray(), np.kron(np.eye(T), np.ones((1, 2))))
        qp = build_qp(triangle3, demand)
        for fam in ("charge_upper", "discharge_lower", "soc_upper", "soc_lower", "terminal_soc"):
            assert qp.rows(fam).stop == qp.rows(fam).start

    def test_ramp_rows_vanish_on_constant_schedule(self, case39):
        qp = build_qp(case39, diurnal_demand(case39, 24))
        x = np.tile(np.concatenate([case39.p_max * 0.3, np.ones(2 * case39.n_e)]), 24)
        g_ramp = qp.g_mat[qp.rows("ramp_up")]
        assert np.all(g_ramp @ x == 0.0)
        assert np.all(qp.g_mat[qp.rows("ramp_down")] @ x == 0.0)

    def test_zero_decision_zero_demand(self, tiny_ess):
        qp = build_qp(tiny_ess, DemandScenario(np.zeros((1, 3))))
        slack = qp.h_vec - qp.g_mat @ np.zeros(qp.n)
        violated = np.flatnonzero(slack < 0)
        lower = qp.rows("gen_lower")
        assert set(violated) == set(range(lower.start, lower.stop))  # p_min = 5 > 0
        tight = set(np.flatnonzero(slack == 0))
        allowed = set()
        for fam in ("charge_lower", "discharge_lower"):
            allowed |= set(range(qp.rows(fam).start, qp.rows(fam).stop))
        assert tight <= allowed

    def test_demand_mismatch(self, toy3):
        with pytest.raises(ValueError, match="loads"):
            build_qp(toy3, DemandScenario(np.zeros((2, 3))))
        with pytest.raises(ValueError):
            DemandScenario(np.array([[-1.0, 2.0]]))

    def test_region_builder_matches_direct_build(self, case39):
        builder = RegionBuilder(case39, 24)
        for seed in range(3):
            demand = diurnal_demand(case39, 24, seed=seed)
            a, b = builder.qp(demand), build_qp(case39, demand)
            assert (a.g_mat != b.g_mat).nnz == 0 and (a.a_mat != b.a_mat).nnz == 0
            np.testing.assert_allclose(a.h_vec, b.h_vec, rtol=0, atol=1e-9)
            np.testing.assert_allclose(a.b_vec, b.b_vec, rtol=0, atol=1e-9)

    def test_dump_round_trip(self, tmp_path, toy3):
        qp = build_qp(toy3, diurnal_demand(toy3, 3))
        back = load_qp(dump_qp(qp, tmp_path / "qp"))
        np.testing.assert_array_equal(back.g_mat.toarray(), qp.g_mat.toarray())
        np.testing.assert_array_equal(back.h_vec, qp.h_vec)
        assert back.row_labels == qp.row_labels and back.layout == qp.layout


class TestMatrixFree:
    @pytest.mark.parametrize("line_limits", [True, False])
    @pytest.mark.parametrize("intertemporal", [True, False])
    def test_assembled_rows_match_direct_formulas(self, case39, line_limits, intertemporal):
        T = 24
        demand = diurnal_demand(case39, T)
        qp = build_qp(case39, demand, line_limits=line_limits, intertemporal=intertemporal)
        rng = np.random.default_rng(3)
        cap = box_limits(case39, T)
        worst = 0.0
        for _ in range(100):
            v = rng.uniform(-cap, 2 * cap)
            ineq, eq = direct_residuals(
                v, case39, demand, line_limits=line_limits, intertemporal=intertemporal
            )
            r_in, r_eq = _stack_residuals(ineq, eq)
            worst = max(
                worst,
                np.abs(qp.g_mat @ v - qp.h_vec - r_in).max(),
                np.abs(qp.a_mat @ v - qp.b_vec - r_eq).max(),
            )
        assert worst <= 1e-10 * max(1.0, cap.max())

    def test_max_violation_zero_inside(self, tiny_ess):
        demand = DemandScenario(np.array([[10.0, 20.0]]))
        v = np.array([10.0, 0.0, 0.0, 20.0, 0.0, 0.0])
        assert max_violation(v, tiny_ess, demand) == 0.0
        v[3] = 35.0  # ramps by 25 > 20 and breaks the balance by 15
        assert max_violation(v, tiny_ess, demand) == pytest.approx(15.0)


class TestSoc:
    def test_idle_storage_stays_at_initial_level(self, toy3):
        layout = DecisionLayout(toy3.n_g, toy3.n_e, 5)
        v = np.zeros(layout.size)
        np.testing.assert_array_equal(soc_trajectory(v, toy3, layout), np.full((1, 5), 20.0))

    def test_single_charge_step(self):
        case = parse_case(TINY_ESS.replace("e_max = 50.0", "e_max = 200.0"))
        layout = DecisionLayout(1, 1, 1)
        e = soc_trajectory(np.array([0.0, 10.0, 0.0]), case, layout)
        assert e[0, 0] == pytest.approx(109.0, abs=1e-12)

    def test_matches_cumulative_matrix(self, toy3):
        T = 6
        qp = build_qp(toy3, diurnal_demand(toy3, T))
        rng = np.random.default_rng(0)
        v = rng.uniform(0, 20, qp.n)
        e = soc_trajectory(v, toy3, qp.layout)
        np.testing.assert_allclose(qp.g_mat[qp.rows("soc_upper")] @ v + 20.0, e[0], atol=1e-12)
