"""Training loops for the projection-aware surrogate and its baselines.

Modes:

``mpa_unsup``
    network -> full-horizon projection -> generation cost, differentiated
    through the projection.
``mpa_sup``
    same pipeline, mean-squared error against exact optima.
``mpp_sup``
    mean-squared error of the raw network output against exact optima; the
    projection is only applied at inference.
``spa_unsup``
    one network shared by all periods, each period projected on its own
    (no ramping, no storage energy coupling), generation cost loss.

Updates are per sample (batch size 1) by default and strictly serial, so a
run is a deterministic function of its configuration and seed.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .diff_projection import build_sensitivity, vjp
from .experiments import Dataset, dispatch_cost, split_indices
from .formulation import RegionBuilder
from .grid_model import GridCase
from .neural_net import AdamState, MlpParams, adam_step, backward, forward, init_params, save_checkpoint
from .qp_solver import SolverError, cost_vector, projection_program, solve

logger = logging.getLogger(__name__)

MODES = ("mpa_unsup", "mpa_sup", "mpp_sup", "spa_unsup")
SUPERVISED = ("mpa_sup", "mpp_sup")

# Initial raw schedules sit near half of every device's capacity.  Starting far
# outside the feasible region lands projections on vertices, where the
# projection Jacobian vanishes and training stalls.
OUTPUT_GAIN = 0.1
OUTPUT_BIAS = 0.5


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "mpa_unsup"
    max_epochs: int = 50
    lr: float = 1e-4
    seed: int = 0
    split: tuple[float, float, float] = (0.5, 0.3, 0.2)
    patience: int = 10
    batch_size: int = 1
    hidden: tuple[int, ...] = (40, 40, 40)
    line_limits: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {', '.join(MODES)}")
        if self.max_epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ValueError("max_epochs, patience and batch_size must be positive")
        split = tuple(float(r) for r in self.split)
        if len(split) != 3 or min(split) < 0 or abs(sum(split) - 1.0) > 1e-9:
            raise ValueError("split ratios must be three nonnegative numbers summing to 1")
        object.__setattr__(self, "split", split)
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def intertemporal(self) -> bool:
        return self.mode != "spa_unsup"


@dataclass
class EpochRow:
    epoch: int
    train_loss: float  # mean per-sample loss (generation cost for unsupervised modes)
    val_mae: float  # nan without validation labels
    val_gap: float  # percent; nan without validation labels
    val_cost: float
    degenerate_rows: int
    skipped: int


@dataclass
class TrainRecord:
    rows: list[EpochRow] = field(default_factory=list)
    best_epoch: int = 0
    # wall-clock seconds per epoch; kept out of the CSV so records stay reproducible
    wall_clock: list[float] = field(default_factory=list, compare=False)

    FIELDS = ("epoch", "train_loss", "val_mae", "val_gap", "val_cost", "degenerate_rows", "skipped")

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(self.FIELDS)
            for r in self.rows:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.val_mae), repr(r.val_gap), repr(r.val_cost),
                            r.degenerate_rows, r.skipped])
        return path


@dataclass
class TrainedModel:
    params: MlpParams
    mode: str
    T: int
    case_fingerprint: str
    line_limits: bool = True

    @property
    def per_period(self) -> bool:
        return self.mode == "spa_unsup"

    def meta(self) -> dict:
        return {
            "mode": self.mode,
            "T": self.T,
            "case": self.case_fingerprint,
            "line_limits": self.line_limits,
        }

    def save(self, path, state: AdamState | None = None, extra: dict | None = None) -> Path:
        return save_checkpoint(path, self.params, state, {**self.meta(), **(extra or {})})


def capacity_vector(case: GridCase) -> np.ndarray:
    """Per-period device capacities in decision layout (MW)."""
    cap = np.concatenate([case.p_max, case.ess_array("p_ch_max"), case.ess_array("p_dis_max")])
    return np.where(cap > 0, cap, 1.0)


def _input_scale(case: GridCase) -> np.ndarray:
    nominal = case.nominal_demand
    return np.where(nominal > 0, nominal, 1.0)


def init_model(case: GridCase, T: int, config: TrainConfig) -> TrainedModel:
    rng = np.random.default_rng([config.seed, 1])
    if config.mode == "spa_unsup":
        n_in, n_out = case.n_d, case.n_g + 2 * case.n_e
        in_scale, out_scale = _input_scale(case), capacity_vector(case)
    else:
        n_in, n_out = case.n_d * T, (case.n_g + 2 * case.n_e) * T
        in_scale, out_scale = np.tile(_input_scale(case), T), np.tile(capacity_vector(case), T)
    params = init_params(n_in, n_out, rng, config.hidden, in_scale, out_scale, OUTPUT_GAIN, OUTPUT_BIAS)
    return TrainedModel(params, config.mode, T, case.fingerprint(), config.line_limits)


def raw_output(model: TrainedModel, p_d: np.ndarray):
    """Unprojected schedule for one demand matrix, with the forward cache."""
    if model.per_period:
        z, cache = forward(model.params, p_d.T)  # one row per period
        return z.ravel(), cache
    z, cache = forward(model.params, p_d.ravel(order="F")[None, :])
    return z[0], cache


class _Regions:
    """Per-scenario feasible regions, built lazily and reused across epochs."""

    def __init__(self, case: GridCase, T: int, intertemporal: bool, line_limits: bool):
        self.builder = RegionBuilder(case, T, line_limits=line_limits, intertemporal=intertemporal)
        self._cache: dict[int, object] = {}

    def get(self, key: int, scenario):
        qp = self._cache.get(key)
        if qp is None:
            qp = self._cache[key] = self.builder.qp(scenario)
        return qp


def project(qp, z: np.ndarray):
    return solve(projection_program(qp, z))


def predict(model: TrainedModel, case: GridCase, scenarios, *, regions: _Regions | None = None, keys=None):
    """Feasible schedules (always projected) for a list of scenarios.

    Returns ``(outputs, skipped)`` where failed projections are ``None``.
    """
    regions = regions or _Regions(case, model.T, not model.per_period, model.line_limits)
    keys = range(len(scenarios)) if keys is None else keys
    outputs, skipped = [], 0
    for key, sc in zip(keys, scenarios):
        z, _ = raw_output(model, sc.p_d)
        try:
            outputs.append(project(regions.get(key, sc), z).x_star)
        except SolverError as exc:
            logger.warning("projection failed for scenario %s: %s", key, exc)
            outputs.append(None)
            skipped += 1
    return outputs, skipped


def _validate(model, case, data: Dataset, regions, keys):
    outputs, _ = predict(model, case, data.scenarios, regions=regions, keys=keys)
    T = model.T
    costs, gaps, maes = [], [], []
    for pos, x in enumerate(outputs):
        if x is None:
            continue
        c = dispatch_cost(x, case, T)
        costs.append(c)
        if data.labels is not None:
            y = data.labels[pos]
            c_star = dispatch_cost(y, case, T)
            gaps.append((c - c_star) / c_star * 100.0)
            ng = case.n_g
            pg = x.reshape(T, -1)[:, :ng]
            pg_star = y.reshape(T, -1)[:, :ng]
            maes.append(np.mean(np.abs(pg - pg_star)) / 100.0)
    nan = float("nan")
    return (
        float(np.mean(maes)) if maes else nan,
        float(np.mean(gaps)) if gaps else nan,
        float(np.mean(costs)) if costs else nan,
    )


def train(
    case: GridCase,
    dataset: Dataset,
    config: TrainConfig,
    *,
    checkpoint_dir=None,
) -> tuple[TrainedModel, TrainRecord]:
    """Run one training job; returns the best-validation model and its record."""
    T = dataset.spec.T
    if config.intertemporal and T < 2:
        raise ValueError(f"mode {config.mode} needs a horizon of at least 2 periods, dataset has T={T}")
    if config.mode in SUPERVISED and dataset.labels is None:
        raise ValueError(f"mode {config.mode} needs exact-solver labels")
    train_pos, val_pos, _ = split_indices(len(dataset), config.split, config.seed)
    if train_pos.size == 0:
        raise ValueError("training split is empty")
    train_set, val_set = dataset.subset(train_pos), dataset.subset(val_pos)

    model = init_model(case, T, config)
    state = AdamState.for_params(model.params, lr=config.lr)
    regions = _Regions(case, T, config.intertemporal, config.line_limits)
    cost_full = cost_vector(case.cost_matrix(T), regions.builder.layout)
    rng = np.random.default_rng([config.seed, 2])

    record = TrainRecord()
    best, best_params, since_best = np.inf, model.params.copy(), 0
    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(train_pos.size)
        losses, degenerate, skipped = [], 0, 0
        acc, in_batch = None, 0
        for pos in order:
            key = int(train_pos[pos])
            sc = dataset.scenarios[key]
            z, cache = raw_output(model, sc.p_d)
            label = dataset.labels[key] if dataset.labels is not None else None
            if config.mode == "mpp_sup":
                diff = z - label
                losses.append(float(np.mean(diff**2)))
                grad_z = 2.0 * diff / diff.size
            else:
                try:
                    sol = project(regions.get(key, sc), z)
                except SolverError as exc:
                    logger.warning("epoch %d: skipping scenario %d (%s)", epoch, key, exc)
                    skipped += 1
                    continue
                ws = build_sensitivity(sol, regions.get(key, sc))
                degenerate += ws.degenerate_rows
                if config.mode == "mpa_sup":
                    diff = sol.x_star - label
                    losses.append(float(np.mean(diff**2)))
                    grad_x = 2.0 * diff / diff.size
                else:
                    losses.append(float(cost_full @ sol.x_star))
                    grad_x = cost_full
                grad_z = vjp(ws, grad_x)
            grads = backward(model.params, cache, grad_z.reshape(cache.pre[-1].shape))
            acc = grads if acc is None else [a + g for a, g in zip(acc, grads)]
            in_batch += 1
            if in_batch == config.batch_size:
                adam_step(model.params, [a / in_batch for a in acc] if in_batch > 1 else acc, state)
                acc, in_batch = None, 0
        if in_batch:
            adam_step(model.params, [a / in_batch for a in acc], state)

        val_mae, val_gap, val_cost = _validate(model, case, val_set, regions, val_pos)
        row = EpochRow(
            epoch=epoch,
            train_loss=float(np.mean(losses)) if losses else float("nan"),
            val_mae=val_mae,
            val_gap=val_gap,
            val_cost=val_cost,
            degenerate_rows=degenerate,
            skipped=skipped,
        )
        record.rows.append(row)
        record.wall_clock.append(time.perf_counter() - t0)
        logger.info(
            "epoch %3d  loss %.6g  val gap %.4f %%  val mae %.5f  degenerate %d  skipped %d",
            epoch, row.train_loss, val_gap, val_mae, degenerate, skipped,
        )
        metric = val_gap if not np.isnan(val_gap) else val_cost
        if np.isnan(metric):
            metric = row.train_loss
        if metric < best:
            best, best_params, since_best = metric, model.params.copy(), 0
            record.best_epoch = epoch
        else:
            since_best += 1
            if since_best >= config.patience:
                logger.info("early stop after epoch %d (best %d)", epoch, record.best_epoch)
                break
        if checkpoint_dir is not None:
            model.save(Path(checkpoint_dir) / "last.npz", state, {"epoch": epoch})
    final = TrainedModel(best_params, model.mode, T, model.case_fingerprint, model.line_limits)
    return final, record


def train_mpa_unsupervised(case, dataset, config: TrainConfig | None = None, **kw):
    config = config or TrainConfig()
    if config.mode != "mpa_unsup":
        config = TrainConfig(**{**asdict(config), "mode": "mpa_unsup"})
    return train(case, dataset, config, **kw)


def train_supervised(case, dataset, config: TrainConfig, **kw):
    if config.mode not in SUPERVISED:
        raise ValueError(f"supervised training needs mode in {SUPERVISED}, got {config.mode!r}")
    return train(case, dataset, config, **kw)


def train_spa(case, dataset, config: TrainConfig | None = None, **kw):
    config = config or TrainConfig(mode="spa_unsup")
    if config.mode != "spa_unsup":
        config = TrainConfig(**{**asdict(config), "mode": "spa_unsup"})
    return train(case, dataset, config, **kw)
