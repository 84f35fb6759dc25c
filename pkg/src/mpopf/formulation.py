"""Feasible region of the multi-period DC-OPF as ``A x = b, G x <= h``.

Decision layout: for each period the block is ``[p_g (n_g), p_ch (n_e),
p_dis (n_e)]`` and the periods are stacked, so a ``p x T`` schedule ``X`` maps
to ``vec(X) = X.ravel(order="F")``.

Inequality rows, in order::

    gen_upper, gen_lower             2 n_g T
    charge_upper, charge_lower       2 n_e T
    discharge_upper, discharge_lower 2 n_e T
    ramp_up, ramp_down               2 n_g (T-1)
    soc_upper, soc_lower             2 n_e T
    line_upper, line_lower           2 n_l T

Equality rows: ``balance`` (T rows) then ``terminal_soc`` (n_e rows, stored
energy at the end of the horizon equals the initial energy).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp

from .grid_model import GridCase, GsfMatrix, IncidenceMaps, build_incidence, compute_gsf

INEQ_FAMILIES = (
    "gen_upper",
    "gen_lower",
    "charge_upper",
    "charge_lower",
    "discharge_upper",
    "discharge_lower",
    "ramp_up",
    "ramp_down",
    "soc_upper",
    "soc_lower",
    "line_upper",
    "line_lower",
)
EQ_FAMILIES = ("balance", "terminal_soc")


@dataclass(frozen=True)
class DecisionLayout:
    n_g: int
    n_e: int
    T: int

    @property
    def p(self) -> int:
        return self.n_g + 2 * self.n_e

    @property
    def size(self) -> int:
        return self.p * self.T

    def block(self, kind: str) -> slice:
        """Row slice of device class ``kind`` inside one period block."""
        if kind == "gen":
            return slice(0, self.n_g)
        if kind == "charge":
            return slice(self.n_g, self.n_g + self.n_e)
        if kind == "discharge":
            return slice(self.n_g + self.n_e, self.p)
        raise KeyError(kind)

    def index(self, kind: str, t: int) -> np.ndarray:
        """Positions in the stacked vector of device class ``kind`` at period t."""
        s = self.block(kind)
        return t * self.p + np.arange(s.start, s.stop)

    def split(self, v: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return (p_g, p_ch, p_dis) matrices, each devices x T."""
        x = devectorize(v, self)
        return x[self.block("gen")], x[self.block("charge")], x[self.block("discharge")]


def vectorize(x: np.ndarray, layout: DecisionLayout | None = None) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ValueError(f"expected a 2-D p x T matrix, got shape {x.shape}")
    if layout is not None and x.shape != (layout.p, layout.T):
        raise ValueError(f"shape {x.shape} does not match layout ({layout.p}, {layout.T})")
    return x.ravel(order="F").copy()


def devectorize(v: np.ndarray, layout: DecisionLayout) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (layout.size,):
        raise ValueError(f"expected vector of length {layout.size}, got shape {v.shape}")
    return v.reshape((layout.T, layout.p)).T.copy()


@dataclass(frozen=True)
class SelectionMatrices:
    u_g: sp.csr_matrix
    u_ch: sp.csr_matrix
    u_dis: sp.csr_matrix
    v_g: sp.csr_matrix
    v_ch: sp.csr_matrix
    v_dis: sp.csr_matrix
    d: sp.csr_matrix
    s: sp.csr_matrix


def selection_matrices(layout: DecisionLayout) -> SelectionMatrices:
    n_g, n_e, T = layout.n_g, layout.n_e, layout.T
    eye_t = sp.identity(T, format="csr")

    def pick(offset, n):
        return sp.csr_matrix(
            (np.ones(n), (np.arange(n), offset + np.arange(n))), shape=(n, layout.p)
        )

    u_g, u_ch, u_dis = pick(0, n_g), pick(n_g, n_e), pick(n_g + n_e, n_e)
    # row t: -1 at t, +1 at t+1
    d = sp.diags([-np.ones(T - 1), np.ones(T - 1)], [0, 1], shape=(T - 1, T), format="csr")
    s = sp.csr_matrix(np.tril(np.ones((T, T))))
    return SelectionMatrices(
        u_g=u_g,
        u_ch=u_ch,
        u_dis=u_dis,
        v_g=sp.kron(eye_t, u_g, format="csr"),
        v_ch=sp.kron(eye_t, u_ch, format="csr"),
        v_dis=sp.kron(eye_t, u_dis, format="csr"),
        d=d,
        s=s,
    )


@dataclass(frozen=True)
class DemandScenario:
    p_d: np.ndarray  # n_d x T, MW

    def __post_init__(self):
        p_d = np.asarray(self.p_d, dtype=float)
        if p_d.ndim != 2:
            raise ValueError("demand must be an n_d x T matrix")
        if not np.all(np.isfinite(p_d)) or np.any(p_d < 0):
            raise ValueError("demand entries must be finite and >= 0")
        object.__setattr__(self, "p_d", p_d)

    @property
    def T(self) -> int:
        return self.p_d.shape[1]

    @property
    def total(self) -> np.ndarray:
        return self.p_d.sum(axis=0)


@dataclass(frozen=True)
class QpData:
    a_mat: sp.csr_matrix
    b_vec: np.ndarray
    g_mat: sp.csr_matrix
    h_vec: np.ndarray
    row_labels: tuple[tuple[str, int, int], ...]
    eq_labels: tuple[tuple[str, int, int], ...]
    layout: DecisionLayout

    @property
    def n(self) -> int:
        return self.layout.size

    @property
    def q(self) -> int:
        return self.g_mat.shape[0]

    def rows(self, family: str) -> slice:
        for name, start, stop in self.row_labels + self.eq_labels:
            if name == family:
                return slice(start, stop)
        raise KeyError(family)


def _labels(families, sizes):
    out, start = [], 0
    for name, size in zip(families, sizes):
        out.append((name, start, start + size))
        start += size
    return tuple(out)


def _soc_coupling(case: GridCase, sel: SelectionMatrices) -> sp.csr_matrix:
    eta_ch = sp.diags(case.ess_array("eta_ch"))
    inv_eta_dis = sp.diags(1.0 / case.ess_array("eta_dis"))
    return (eta_ch @ sel.u_ch - inv_eta_dis @ sel.u_dis).tocsr()


def _check_demand(case: GridCase, demand: DemandScenario, T: int | None = None):
    if demand.p_d.shape[0] != case.n_d:
        raise ValueError(f"demand has {demand.p_d.shape[0]} loads, case has {case.n_d}")
    if T is not None and demand.T != T:
        raise ValueError(f"demand horizon {demand.T} does not match layout horizon {T}")


def build_equalities(
    case: GridCase, demand: DemandScenario, *, intertemporal: bool = True
) -> tuple[sp.csr_matrix, np.ndarray]:
    """Power balance rows plus terminal stored-energy rows."""
    _check_demand(case, demand)
    layout = DecisionLayout(case.n_g, case.n_e, demand.T)
    T = layout.T
    row = np.concatenate([np.ones(case.n_g), -np.ones(case.n_e), np.ones(case.n_e)])
    a_bal = sp.kron(sp.identity(T), sp.csr_matrix(row[None, :]), format="csr")
    blocks, rhs = [a_bal], [demand.total]
    if intertemporal and case.n_e:
        sel = selection_matrices(layout)
        coupling = _soc_coupling(case, sel)
        blocks.append(sp.kron(sp.csr_matrix(np.ones((1, T))), coupling, format="csr"))
        rhs.append(np.zeros(case.n_e))
    return sp.vstack(blocks, format="csr"), np.concatenate(rhs)


def _line_matrix(case, gsf, maps, sel):
    """Per-period map from the decision block to line flows (without demand)."""
    phi = sp.csr_matrix(gsf.phi)
    return (
        phi @ sp.csr_matrix(maps.m_g) @ sel.u_g
        + phi @ sp.csr_matrix(maps.m_e) @ (sel.u_dis - sel.u_ch)
    ).tocsr()


def build_inequalities(
    case: GridCase,
    demand: DemandScenario,
    gsf: GsfMatrix | None = None,
    maps: IncidenceMaps | None = None,
    *,
    line_limits: bool = True,
    intertemporal: bool = True,
) -> tuple[sp.csr_matrix, np.ndarray, tuple[tuple[str, int, int], ...]]:
    _check_demand(case, demand)
    gsf = gsf if gsf is not None else compute_gsf(case)
    maps = maps if maps is not None else build_incidence(case)
    layout = DecisionLayout(case.n_g, case.n_e, demand.T)
    T = layout.T
    sel = selection_matrices(layout)
    eye_t = sp.identity(T, format="csr")
    ones_t = np.ones(T)

    ramp = sp.kron(sel.d, sel.u_g, format="csr")
    soc = sp.kron(sel.s, _soc_coupling(case, sel), format="csr")
    line = sp.kron(eye_t, _line_matrix(case, gsf, maps, sel), format="csr")
    flows_d = (gsf.phi @ maps.m_d @ demand.p_d).ravel(order="F")
    if not intertemporal:
        ramp, soc = ramp[:0], soc[:0]
    if not line_limits:
        line, flows_d = line[:0], flows_d[:0]
    n_line = line.shape[0] // T if T else 0
    line_cap = np.tile(case.flow_limits, T)[: line.shape[0]] if n_line else np.zeros(0)

    e_init = case.ess_array("e_init")
    n_soc = soc.shape[0]
    blocks = [
        (sel.v_g, np.kron(ones_t, case.p_max)),
        (-sel.v_g, -np.kron(ones_t, case.p_min)),
        (sel.v_ch, np.kron(ones_t, case.ess_array("p_ch_max"))),
        (-sel.v_ch, np.zeros(case.n_e * T)),
        (sel.v_dis, np.kron(ones_t, case.ess_array("p_dis_max"))),
        (-sel.v_dis, np.zeros(case.n_e * T)),
        (ramp, np.kron(np.ones(ramp.shape[0] // max(case.n_g, 1)), case.ramp_up)),
        (-ramp, np.kron(np.ones(ramp.shape[0] // max(case.n_g, 1)), case.ramp_down)),
        # the cumulative sum tracks the energy change, so bounds are offset by e_init
        (soc, np.tile(case.ess_array("e_max") - e_init, T)[:n_soc]),
        (-soc, np.tile(e_init - case.ess_array("e_min"), T)[:n_soc]),
        (line, flows_d + line_cap),
        (-line, -flows_d + line_cap),
    ]
    g_mat = sp.vstack([b[0] for b in blocks], format="csr")
    h_vec = np.concatenate([b[1] for b in blocks])
    labels = _labels(INEQ_FAMILIES, [b[0].shape[0] for b in blocks])
    return g_mat, h_vec, labels


def build_qp(
    case: GridCase,
    demand: DemandScenario,
    gsf: GsfMatrix | None = None,
    maps: IncidenceMaps | None = None,
    *,
    line_limits: bool = True,
    intertemporal: bool = True,
) -> QpData:
    a_mat, b_vec = build_equalities(case, demand, intertemporal=intertemporal)
    g_mat, h_vec, labels = build_inequalities(
        case, demand, gsf, maps, line_limits=line_limits, intertemporal=intertemporal
    )
    T = demand.T
    n_term = a_mat.shape[0] - T
    return QpData(
        a_mat=a_mat,
        b_vec=b_vec,
        g_mat=g_mat,
        h_vec=h_vec,
        row_labels=labels,
        eq_labels=_labels(EQ_FAMILIES, [T, n_term]),
        layout=DecisionLayout(case.n_g, case.n_e, T),
    )


class RegionBuilder:
    """Reuses the scenario-independent matrices across many demand scenarios.

    Only ``b`` and the line-flow part of ``h`` depend on demand.
    """

    def __init__(self, case: GridCase, T: int, *, line_limits: bool = True, intertemporal: bool = True):
        self.case = case
        self.T = T
        self.line_limits = line_limits
        self.intertemporal = intertemporal
        self.gsf = compute_gsf(case)
        self.maps = build_incidence(case)
        zero = DemandScenario(np.zeros((case.n_d, T)))
        self._template = build_qp(
            case, zero, self.gsf, self.maps, line_limits=line_limits, intertemporal=intertemporal
        )
        self._demand_to_flow = self.gsf.phi @ self.maps.m_d

    @property
    def layout(self) -> DecisionLayout:
        return self._template.layout

    def qp(self, demand: DemandScenario) -> QpData:
        _check_demand(self.case, demand, self.T)
        tpl = self._template
        b_vec = tpl.b_vec.copy()
        b_vec[: self.T] = demand.total
        h_vec = tpl.h_vec.copy()
        if self.line_limits and self.case.n_l:
            flows = (self._demand_to_flow @ demand.p_d).ravel(order="F")
            up, lo = tpl.rows("line_upper"), tpl.rows("line_lower")
            h_vec[up] += flows
            h_vec[lo] -= flows
        return QpData(tpl.a_mat, b_vec, tpl.g_mat, h_vec, tpl.row_labels, tpl.eq_labels, tpl.layout)


def soc_trajectory(v: np.ndarray, case: GridCase, layout: DecisionLayout) -> np.ndarray:
    """Stored energy after each period, shape n_e x T (starts from e_init)."""
    _, p_ch, p_dis = layout.split(v)
    eta_ch = case.ess_array("eta_ch")[:, None]
    eta_dis = case.ess_array("eta_dis")[:, None]
    e = np.empty_like(p_ch)
    level = case.ess_array("e_init")
    for t in range(layout.T):
        level = level + eta_ch[:, 0] * p_ch[:, t] - p_dis[:, t] / eta_dis[:, 0]
        e[:, t] = level
    return e


def direct_residuals(
    v: np.ndarray,
    case: GridCase,
    demand: DemandScenario,
    gsf: GsfMatrix | None = None,
    *,
    line_limits: bool = True,
    intertemporal: bool = True,
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Constraint residuals evaluated period by period from the model equations.

    Returns ``(ineq, eq)`` dicts keyed by row family.  Inequality residuals are
    ``lhs - rhs`` (feasible when <= 0), in the same row order as the assembled
    ``G x - h``; equality residuals are ``lhs - rhs``.  No assembled matrices
    are used, so this doubles as an independent check of the builder.
    """
    layout = DecisionLayout(case.n_g, case.n_e, demand.T)
    T = layout.T
    pg, pch, pdis = layout.split(v)
    gsf = gsf if gsf is not None else compute_gsf(case)
    phi = gsf.phi

    def per_period(fn):
        return np.concatenate([fn(t) for t in range(T)]) if T else np.zeros(0)

    ineq = {
        "gen_upper": per_period(lambda t: pg[:, t] - case.p_max),
        "gen_lower": per_period(lambda t: case.p_min - pg[:, t]),
        "charge_upper": per_period(lambda t: pch[:, t] - case.ess_array("p_ch_max")),
        "charge_lower": per_period(lambda t: -pch[:, t]),
        "discharge_upper": per_period(lambda t: pdis[:, t] - case.ess_array("p_dis_max")),
        "discharge_lower": per_period(lambda t: -pdis[:, t]),
    }
    steps = range(1, T) if intertemporal else range(0)
    delta = [pg[:, t] - pg[:, t - 1] for t in steps]
    ineq["ramp_up"] = np.concatenate([d - case.ramp_up for d in delta]) if delta else np.zeros(0)
    ineq["ramp_down"] = np.concatenate([-d - case.ramp_down for d in delta]) if delta else np.zeros(0)
    if intertemporal and case.n_e:
        e = soc_trajectory(v, case, layout)
        ineq["soc_upper"] = (e - case.ess_array("e_max")[:, None]).ravel(order="F")
        ineq["soc_lower"] = (case.ess_array("e_min")[:, None] - e).ravel(order="F")
    else:
        ineq["soc_upper"] = ineq["soc_lower"] = np.zeros(0)
    if line_limits and case.n_l:
        flows = []
        for t in range(T):
            inj = np.zeros(case.n_b)
            for i, g in enumerate(case.generators):
                inj[g.bus] += pg[i, t]
            for i, d in enumerate(case.loads):
                inj[d.bus] -= demand.p_d[i, t]
            for i, s in enumerate(case.ess_units):
                inj[s.bus] += pdis[i, t] - pch[i, t]
            flows.append(phi @ inj)
        flows = np.concatenate(flows)
        cap = np.tile(case.flow_limits, T)
        ineq["line_upper"] = flows - cap
        ineq["line_lower"] = -flows - cap
    else:
        ineq["line_upper"] = ineq["line_lower"] = np.zeros(0)

    eq = {"balance": pg.sum(axis=0) - pch.sum(axis=0) + pdis.sum(axis=0) - demand.total}
    if intertemporal and case.n_e:
        eq["terminal_soc"] = soc_trajectory(v, case, layout)[:, -1] - case.ess_array("e_init")
    else:
        eq["terminal_soc"] = np.zeros(0)
    return ineq, eq


def max_violation(v, case, demand, gsf=None, **kw) -> float:
    """Largest constraint violation (MW or MWh) of a stacked decision."""
    ineq, eq = direct_residuals(v, case, demand, gsf, **kw)
    worst = 0.0
    for r in ineq.values():
        if r.size:
            worst = max(worst, float(r.max()))
    for r in eq.values():
        if r.size:
            worst = max(worst, float(np.abs(r).max()))
    return worst


def dump_qp(qp: QpData, directory) -> Path:
    """Write sparse triplets (Matrix Market) plus labelled row ranges."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    scipy.io.mmwrite(out / "A.mtx", qp.a_mat)
    scipy.io.mmwrite(out / "G.mtx", qp.g_mat)
    meta = {
        "layout": {"n_g": qp.layout.n_g, "n_e": qp.layout.n_e, "T": qp.layout.T},
        "b": qp.b_vec.tolist(),
        "h": qp.h_vec.tolist(),
        "row_labels": [list(r) for r in qp.row_labels],
        "eq_labels": [list(r) for r in qp.eq_labels],
    }
    (out / "qp.json").write_text(json.dumps(meta, indent=1))
    return out


def load_qp(directory) -> QpData:
    src = Path(directory)
    meta = json.loads((src / "qp.json").read_text())
    return QpData(
        a_mat=sp.csr_matrix(scipy.io.mmread(src / "A.mtx")),
        b_vec=np.array(meta["b"]),
        g_mat=sp.csr_matrix(scipy.io.mmread(src / "G.mtx")),
        h_vec=np.array(meta["h"]),
        row_labels=tuple(tuple(r) for r in meta["row_labels"]),
        eq_labels=tuple(tuple(r) for r in meta["eq_labels"]),
        layout=DecisionLayout(**meta["layout"]),
    )
