"""Demand datasets, exact-solver labels and evaluation metrics."""

from __future__ import annotations

import csv
import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .formulation import DecisionLayout, DemandScenario, RegionBuilder, direct_residuals
from .grid_model import GridCase, compute_gsf
from .qp_solver import Infeasible, SolverError, check_kkt, cost_vector, opf_program, solve

logger = logging.getLogger(__name__)

SYSTEM_BASE_MVA = 100.0
MAX_RESAMPLES = 10
RAMP_TOL = 1e-6

# 24-hour double-peak profile (fraction of nominal load): overnight trough,
# morning rise, midday plateau with a shallow afternoon dip, evening peak
DIURNAL_SHAPE = np.array(
    [
        0.62, 0.58, 0.56, 0.55, 0.56, 0.60, 0.68, 0.78, 0.86, 0.91, 0.93, 0.92,
        0.89, 0.87, 0.86, 0.88, 0.93, 0.99, 1.00, 0.98, 0.93, 0.85, 0.76, 0.68,
    ]
)


# Flat evening shoulder with a four-hour climb of 3.5 % of peak per hour into a
# three-hour peak, and the mirror-image descent.  Used to probe how
# single-period dispatch copes with steep ramps near peak load.
PEAK_RAMP_SHAPE = np.array(
    [
        0.86, 0.86, 0.86, 0.86, 0.86, 0.86, 0.86, 0.86, 0.86, 0.86, 0.86, 0.86,
        0.86, 0.86, 0.86, 0.895, 0.93, 0.965, 1.00, 1.00, 0.965, 0.93, 0.895, 0.86,
    ]
)

PROFILES = {"diurnal": DIURNAL_SHAPE, "peak_ramp": PEAK_RAMP_SHAPE}


class DatasetError(RuntimeError):
    pass


def base_shape(T: int, profile: str = "diurnal") -> np.ndarray:
    """A 24-hour load profile resampled to ``T`` periods (identity for T = 24)."""
    try:
        shape = PROFILES[profile]
    except KeyError:
        raise ValueError(f"unknown load profile {profile!r}; expected one of {', '.join(PROFILES)}") from None
    if T == shape.size:
        return shape.copy()
    grid = np.linspace(0.0, shape.size - 1, T)
    return np.interp(grid, np.arange(shape.size), shape)


@dataclass(frozen=True)
class DatasetSpec:
    K: int
    T: int = 24
    scale: float = 1.0
    noise: float = 0.10
    seed: int = 0
    line_limits: bool = True
    profile: str = "diurnal"

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be at least 1")
        if self.T < 1:
            raise ValueError("T must be at least 1")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if not 0 <= self.noise < 1:
            raise ValueError("noise must be in [0, 1)")
        if self.profile not in PROFILES:
            raise ValueError(f"unknown load profile {self.profile!r}; expected one of {', '.join(PROFILES)}")


@dataclass
class Dataset:
    spec: DatasetSpec
    indices: np.ndarray  # sample indices within the spec's 0..K-1 sequence
    scenarios: list[DemandScenario]
    labels: list[np.ndarray] | None = None
    resampled: int = 0

    def __len__(self) -> int:
        return len(self.scenarios)

    def subset(self, positions) -> "Dataset":
        positions = np.asarray(positions, dtype=int)
        return Dataset(
            self.spec,
            self.indices[positions],
            [self.scenarios[i] for i in positions],
            None if self.labels is None else [self.labels[i] for i in positions],
        )

    def inputs(self) -> np.ndarray:
        """Stacked network inputs, one period-major demand vector per row."""
        return np.stack([s.p_d.ravel(order="F") for s in self.scenarios])

    def digest(self) -> str:
        h = hashlib.sha256()
        for s in self.scenarios:
            h.update(np.ascontiguousarray(s.p_d).tobytes())
        return h.hexdigest()


def _sample(case: GridCase, spec: DatasetSpec, index: int, attempt: int) -> DemandScenario:
    # per-sample streams: any subset of indices regenerates identically and
    # the noise does not depend on the load scale
    rng = np.random.default_rng([spec.seed, index, attempt])
    noise = rng.uniform(1.0 - spec.noise, 1.0 + spec.noise, size=(case.n_d, spec.T))
    base = np.maximum(case.nominal_demand, 0.0)[:, None] * base_shape(spec.T, spec.profile)[None, :]
    return DemandScenario(base * noise * spec.scale)


def generate_dataset(
    spec: DatasetSpec,
    case: GridCase,
    indices=None,
    *,
    check_feasible: bool = True,
    jobs: int = 1,
) -> Dataset:
    """Draw demand scenarios; infeasible draws are resampled (labels come for free)."""
    idx = np.arange(spec.K) if indices is None else np.asarray(indices, dtype=int)
    scenarios = [_sample(case, spec, int(i), 0) for i in idx]
    if not check_feasible:
        return Dataset(spec, idx, scenarios)
    labels: list = [None] * len(idx)
    pending = list(range(len(idx)))
    resampled = 0
    for attempt in range(MAX_RESAMPLES + 1):
        if attempt:
            resampled += len(pending)
            for pos in pending:
                scenarios[pos] = _sample(case, spec, int(idx[pos]), attempt)
        results = _solve_all(case, spec.T, [scenarios[p] for p in pending], spec.line_limits, jobs)
        still = []
        for pos, res in zip(pending, results):
            if res is None:
                still.append(pos)
            else:
                labels[pos] = res
        pending = still
        if not pending:
            break
    if pending:
        raise DatasetError(
            f"{len(pending)} scenario(s) stayed infeasible after {MAX_RESAMPLES} resamples "
            f"(first index {int(idx[pending[0]])}); capacity too small for scale {spec.scale}"
        )
    if resampled:
        logger.info("resampled %d infeasible draws", resampled)
    return Dataset(spec, idx, scenarios, labels, resampled)


def _label_one(args):
    case, T, p_d, line_limits = args
    builder = _builder(case, T, line_limits)
    qp = builder.qp(DemandScenario(p_d))
    prog = opf_program(qp, case.cost_matrix(T))
    try:
        res = solve(prog)
    except Infeasible:
        return None
    rep = check_kkt(res, prog)
    if not res.polished and rep.max() > 1e-6 * (1.0 + np.max(np.abs(qp.h_vec))):
        raise SolverError(f"label failed KKT certification: {rep}", res)
    return res.x_star


_BUILDERS: dict = {}


def _builder(case: GridCase, T: int, line_limits: bool, intertemporal: bool = True) -> RegionBuilder:
    key = (case.fingerprint(), T, line_limits, intertemporal)
    if key not in _BUILDERS:
        _BUILDERS[key] = RegionBuilder(case, T, line_limits=line_limits, intertemporal=intertemporal)
    return _BUILDERS[key]


def _solve_all(case, T, scenarios, line_limits, jobs):
    tasks = [(case, T, s.p_d, line_limits) for s in scenarios]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_label_one, tasks, chunksize=max(1, len(tasks) // (4 * jobs))))
    return [_label_one(t) for t in tasks]


def label_dataset(dataset: Dataset, case: GridCase, *, jobs: int = 1) -> Dataset:
    """Attach exact-solver optima; raises on the first infeasible scenario."""
    results = _solve_all(case, dataset.spec.T, dataset.scenarios, dataset.spec.line_limits, jobs)
    for pos, res in enumerate(results):
        if res is None:
            raise DatasetError(f"scenario {int(dataset.indices[pos])} is infeasible")
    dataset.labels = results
    return dataset


def split_indices(n: int, ratios=(0.5, 0.3, 0.2), seed: int = 0) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Seeded shuffle into train/validation/test positions."""
    ratios = np.asarray(ratios, dtype=float)
    if ratios.size != 3 or np.any(ratios < 0) or not np.isclose(ratios.sum(), 1.0):
        raise ValueError("split ratios must be three nonnegative numbers summing to 1")
    perm = np.random.default_rng([seed, 7919]).permutation(n)
    n_train = int(round(ratios[0] * n))
    n_val = int(round(ratios[1] * n))
    return np.sort(perm[:n_train]), np.sort(perm[n_train : n_train + n_val]), np.sort(perm[n_train + n_val :])


# ----------------------------------------------------------------- metrics


def dispatch_cost(x: np.ndarray, case: GridCase, T: int) -> float:
    return float(cost_vector(case.cost_matrix(T), _layout(case, T)) @ x)


def hourly_costs(x: np.ndarray, case: GridCase, T: int) -> np.ndarray:
    layout = _layout(case, T)
    pg, _, _ = layout.split(x)
    return (case.cost_matrix(T) * pg).sum(axis=0)


def _layout(case, T):
    return DecisionLayout(case.n_g, case.n_e, T)


def ramp_violation(x: np.ndarray, case: GridCase, T: int, tol: float = RAMP_TOL) -> bool:
    pg, _, _ = _layout(case, T).split(x)
    if T < 2:
        return False
    delta = np.diff(pg, axis=1)
    return bool(
        np.any(delta > case.ramp_up[:, None] + tol) or np.any(-delta > case.ramp_down[:, None] + tol)
    )


@dataclass
class EvalReport:
    model: str
    scale: float
    n_samples: int
    mae_pu: float
    gap_pct: float
    ramp_violations: int
    max_residual: float
    max_residual_no_soc: float
    hourly_cost: np.ndarray = field(repr=False)  # mean over samples, length T
    hourly_cost_exact: np.ndarray = field(repr=False)
    notes: str = ""

    @property
    def violation_label(self) -> str:
        return f"{self.ramp_violations} / {self.n_samples}"

    def row(self) -> dict:
        return {
            "model": self.model,
            "scale": f"{self.scale:.3f}",
            "samples": self.n_samples,
            "mae_pu": f"{self.mae_pu:.6f}",
            "gap_pct": f"{self.gap_pct:.6f}",
            "ramp_violations": self.violation_label,
            "max_residual": f"{self.max_residual:.3e}",
            "max_residual_no_soc": f"{self.max_residual_no_soc:.3e}",
            "notes": self.notes,
        }


def evaluate(
    outputs: list[np.ndarray],
    labels: list[np.ndarray],
    scenarios: list[DemandScenario],
    case: GridCase,
    *,
    model: str = "model",
    scale: float = 1.0,
    line_limits: bool = True,
    notes: str = "",
) -> EvalReport:
    """Metrics of feasible dispatches against exact optima on aligned scenarios."""
    if not (len(outputs) == len(labels) == len(scenarios)):
        raise ValueError(
            f"misaligned sets: {len(outputs)} outputs, {len(labels)} labels, {len(scenarios)} scenarios"
        )
    if not outputs:
        raise ValueError("nothing to evaluate")
    T = scenarios[0].T
    layout = _layout(case, T)
    abs_err, gaps, viol = [], [], 0
    worst, worst_no_soc = 0.0, 0.0
    h_model = np.zeros(T)
    h_exact = np.zeros(T)
    gsf = compute_gsf(case)
    for x, x_star, demand in zip(outputs, labels, scenarios):
        pg, _, _ = layout.split(x)
        pg_star, _, _ = layout.split(x_star)
        abs_err.append(np.abs(pg - pg_star) / SYSTEM_BASE_MVA)
        c_model = dispatch_cost(x, case, T)
        c_star = dispatch_cost(x_star, case, T)
        gaps.append((c_model - c_star) / c_star * 100.0 if c_star else 0.0)
        viol += ramp_violation(x, case, T)
        ineq, eq = direct_residuals(x, case, demand, gsf, line_limits=line_limits)
        for name, r in list(ineq.items()) + [(k, np.abs(v)) for k, v in eq.items()]:
            if r.size:
                worst = max(worst, float(r.max()))
                if not name.startswith("soc") and name != "terminal_soc":
                    worst_no_soc = max(worst_no_soc, float(r.max()))
        h_model += hourly_costs(x, case, T)
        h_exact += hourly_costs(x_star, case, T)
    n = len(outputs)
    return EvalReport(
        model=model,
        scale=scale,
        n_samples=n,
        mae_pu=float(np.mean(abs_err)),
        gap_pct=float(np.mean(gaps)),
        ramp_violations=int(viol),
        max_residual=worst,
        max_residual_no_soc=worst_no_soc,
        hourly_cost=h_model / n,
        hourly_cost_exact=h_exact / n,
        notes=notes,
    )


# --------------------------------------------------------------------- IO


def write_dataset_csv(dataset: Dataset, path) -> Path:
    """One row per scenario, hour and load."""
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample", "hour", "load", "p_mw"])
        for idx, s in zip(dataset.indices, dataset.scenarios):
            for t in range(s.T):
                for d in range(s.p_d.shape[0]):
                    w.writerow([int(idx), t + 1, d, repr(float(s.p_d[d, t]))])
    return path


def read_dataset_csv(path, spec: DatasetSpec, n_d: int) -> Dataset:
    rows: dict[int, np.ndarray] = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for rec in reader:
            k = int(rec["sample"])
            arr = rows.setdefault(k, np.full((n_d, spec.T), np.nan))
            arr[int(rec["load"]), int(rec["hour"]) - 1] = float(rec["p_mw"])
    idx = np.array(sorted(rows), dtype=int)
    scenarios = []
    for k in idx:
        if np.any(np.isnan(rows[k])):
            raise DatasetError(f"sample {k} is incomplete in {path}")
        scenarios.append(DemandScenario(rows[k]))
    return Dataset(spec, idx, scenarios)


def write_labels(dataset: Dataset, path) -> Path:
    if dataset.labels is None:
        raise DatasetError("dataset has no labels")
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, indices=dataset.indices, labels=np.stack(dataset.labels))
    return path


def read_labels(dataset: Dataset, path) -> Dataset:
    with np.load(path) as data:
        by_index = dict(zip(data["indices"].tolist(), data["labels"]))
    missing = [int(i) for i in dataset.indices if int(i) not in by_index]
    if missing:
        raise DatasetError(f"labels missing for {len(missing)} scenario(s), e.g. {missing[:5]}")
    dataset.labels = [by_index[int(i)] for i in dataset.indices]
    return dataset


REPORT_FIELDS = [
    "model", "scale", "samples", "mae_pu", "gap_pct", "ramp_violations",
    "max_residual", "max_residual_no_soc", "notes",
]


def write_reports(reports: list[EvalReport], directory, hours=(15, 16, 17)) -> dict[str, Path]:
    """Generalization, ramp-violation and hourly-cost tables plus a text summary."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    paths["generalization"] = out / "generalization.csv"
    with open(paths["generalization"], "w", newline="") as fh:
        w = csv.DictWriter(fh, REPORT_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in reports:
            w.writerow(r.row())
    paths["ramp_violations"] = out / "ramp_violations.csv"
    scales = sorted({r.scale for r in reports})
    models = list(dict.fromkeys(r.model for r in reports))
    with open(paths["ramp_violations"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["model"] + [f"{s:.3f}" for s in scales])
        for m in models:
            by_scale = {r.scale: r.violation_label for r in reports if r.model == m}
            w.writerow([m] + [by_scale.get(s, "") for s in scales])
    paths["hourly_cost"] = out / "hourly_cost.csv"
    with open(paths["hourly_cost"], "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        T = min((r.hourly_cost.size for r in reports), default=0)
        sel = [h for h in hours if 1 <= h <= T]
        w.writerow(["model", "scale"] + [f"hour_{h}" for h in sel])
        written_exact = set()
        for r in reports:
            if r.scale not in written_exact:
                w.writerow(["exact", f"{r.scale:.3f}"] + [f"{r.hourly_cost_exact[h - 1]:.2f}" for h in sel])
                written_exact.add(r.scale)
            w.writerow([r.model, f"{r.scale:.3f}"] + [f"{r.hourly_cost[h - 1]:.2f}" for h in sel])
    paths["summary"] = out / "summary.txt"
    lines = [f"MAE in per-unit on a {SYSTEM_BASE_MVA:.0f} MVA system base; gap relative to exact optimum.", ""]
    for r in reports:
        lines.append(
            f"{r.model:>10s}  scale {r.scale:.3f}  MAE {r.mae_pu:.4f} p.u.  gap {r.gap_pct:.4f} %  "
            f"ramp violations {r.violation_label}  max residual {r.max_residual:.2e}"
            + (f"  ({r.notes})" if r.notes else "")
        )
    paths["summary"].write_text("\n".join(lines) + "\n")
    return paths


def spec_dict(spec: DatasetSpec) -> dict:
    return asdict(spec)
