"""Command-line entry point: ``mpopf gen-data | solve | train | eval``.

Every subcommand writes into its own run directory (``<out>/<timestamp>-seed<seed>-<command>``
unless ``--run-dir`` is given) and leaves a ``manifest.json`` there.  Option
precedence is command line, then ``--config`` file, then built-in defaults.
A previous manifest can be passed as ``--config`` to repeat a run.

Exit codes: 0 success, 1 runtime or numerical failure, 2 usage or validation
error.
"""

from __future__ import annotations

import csv
import json
import logging
import subprocess
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import click
import numpy as np

from . import __version__
from .experiments import (
    Dataset,
    DatasetError,
    DatasetSpec,
    PROFILES,
    base_shape,
    dispatch_cost,
    evaluate,
    generate_dataset,
    label_dataset,
    read_dataset_csv,
    read_labels,
    split_indices,
    write_dataset_csv,
    write_labels,
    write_reports,
)
from .formulation import DemandScenario, RegionBuilder, soc_trajectory
from .grid_model import CaseError, GridCase, load_case
from .neural_net import load_checkpoint
from .qp_solver import Infeasible, SolverError, check_kkt, opf_program, solve
from .training import MODES, TrainConfig, TrainedModel, predict, train

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

logger = logging.getLogger("mpopf")

EXIT_RUNTIME = 1
EXIT_USAGE = 2


class RuntimeFailure(click.ClickException):
    exit_code = EXIT_RUNTIME


class ValidationFailure(click.ClickException):
    exit_code = EXIT_USAGE


@dataclass
class RunManifest:
    subcommand: str
    config: dict
    seed: int
    case_fingerprint: str
    version: str
    outputs: dict = field(default_factory=dict)
    started: str = ""
    finished: str = ""
    extra: dict = field(default_factory=dict)

    def write(self, run_dir: Path) -> Path:
        path = run_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2, sort_keys=True, default=_jsonable) + "\n")
        return path


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.ndarray, tuple)):
        return list(obj)
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _version() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            capture_output=True, text=True, timeout=5, cwd=Path(__file__).parent,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def _load_case(name: str) -> GridCase:
    try:
        return load_case(name)
    except FileNotFoundError as exc:
        raise ValidationFailure(str(exc)) from exc
    except CaseError as exc:
        raise ValidationFailure(f"invalid case {name}: {exc}") from exc


def _run_dir(ctx: click.Context, command: str, seed: int, run_dir: str | None) -> Path:
    if run_dir:
        path = Path(run_dir)
    else:
        stamp = datetime.now().strftime("%Y%m%d-%H%M%S")
        path = Path(ctx.obj["out"]) / f"{stamp}-seed{seed}-{command}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _read_config(path: str | None) -> dict:
    """Per-subcommand defaults from a TOML file or a previous run manifest."""
    if not path:
        return {}
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ValidationFailure(f"cannot read config {path}: {exc}") from exc
    if p.suffix == ".json":
        data = json.loads(text)
        if "subcommand" in data and "config" in data:
            return {data["subcommand"]: data["config"]}
        return data
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ValidationFailure(f"bad config {path}: {exc}") from exc


def _normalize_defaults(cfg: dict) -> dict:
    # config keys may use dashes or underscores
    out = {}
    for cmd, opts in cfg.items():
        if isinstance(opts, dict):
            out[cmd] = {k.replace("-", "_"): v for k, v in opts.items()}
    return out


def _finish(manifest: RunManifest, run_dir: Path) -> None:
    manifest.finished = _now()
    manifest.write(run_dir)
    click.echo(f"run directory: {run_dir}")


def _dataset_from_dir(directory: Path, case: GridCase) -> Dataset:
    man = directory / "manifest.json"
    if not man.exists():
        raise ValidationFailure(f"{directory} has no manifest.json; expected a gen-data run directory")
    meta = json.loads(man.read_text())
    spec = DatasetSpec(**meta["extra"]["dataset_spec"])
    if meta["case_fingerprint"] != case.fingerprint():
        raise ValidationFailure("dataset was generated for a different case")
    ds = read_dataset_csv(directory / "dataset.csv", spec, case.n_d)
    labels = directory / "labels.npz"
    if labels.exists():
        read_labels(ds, labels)
    return ds


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="TOML config or previous manifest.")
@click.option("--out", default="runs", show_default=True, help="Parent directory for run directories.")
@click.option("-v", "--verbose", count=True, help="Increase log verbosity.")
@click.version_option(__version__)
@click.pass_context
def main(ctx: click.Context, config_path, out, verbose):
    """Multi-period DC-OPF with a projection-aware neural surrogate."""
    logging.basicConfig(
        level=logging.WARNING - 10 * min(verbose, 2),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    ctx.ensure_object(dict)
    ctx.obj["out"] = out
    ctx.obj["config_path"] = config_path
    ctx.default_map = _normalize_defaults(_read_config(config_path))


def _common(f):
    f = click.option("--run-dir", default=None, help="Write outputs here instead of a timestamped directory.")(f)
    f = click.option("--jobs", default=1, show_default=True, type=click.IntRange(min=1), help="Worker processes.")(f)
    f = click.option("--case", "case_name", default="case39", show_default=True, help="Bundled case name or file.")(f)
    return f


# ------------------------------------------------------------------ gen-data


@main.command("gen-data")
@_common
@click.option("--k", "k", default=500, show_default=True, type=click.IntRange(min=1), help="Number of scenarios.")
@click.option("--horizon", "T", default=24, show_default=True, type=click.IntRange(min=1), help="Periods.")
@click.option("--scale", default=1.0, show_default=True, type=click.FloatRange(min=0, min_open=True))
@click.option("--noise", default=0.1, show_default=True, type=click.FloatRange(0, 1, max_open=True))
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--profile", default="diurnal", show_default=True, type=click.Choice(sorted(PROFILES)),
              help="Base 24-hour load shape.")
@click.option("--line-limits/--no-line-limits", default=True, show_default=True)
@click.option("--check/--no-check", default=True, show_default=True, help="Resample infeasible draws (solves each).")
@click.pass_context
def cmd_gen_data(ctx, case_name, jobs, run_dir, k, T, scale, noise, seed, profile, line_limits, check):
    """Generate a demand dataset (CSV + manifest)."""
    case = _load_case(case_name)
    spec = DatasetSpec(K=k, T=T, scale=scale, noise=noise, seed=seed, line_limits=line_limits, profile=profile)
    out = _run_dir(ctx, "gen-data", seed, run_dir)
    manifest = RunManifest(
        "gen-data", dict(ctx.params), seed, case.fingerprint(), _version(), started=_now(),
        extra={"dataset_spec": asdict(spec)},
    )
    try:
        ds = generate_dataset(spec, case, check_feasible=check, jobs=jobs)
    except (DatasetError, SolverError) as exc:
        raise RuntimeFailure(str(exc)) from exc
    manifest.outputs["dataset"] = str(write_dataset_csv(ds, out / "dataset.csv"))
    if ds.labels is not None:
        manifest.outputs["labels"] = str(write_labels(ds, out / "labels.npz"))
    manifest.extra["resampled"] = ds.resampled
    manifest.extra["digest"] = ds.digest()
    click.echo(f"{len(ds)} scenarios, digest {ds.digest()[:16]}, resampled {ds.resampled}")
    _finish(manifest, out)


# --------------------------------------------------------------------- solve


def _single_scenario(case: GridCase, demand_csv: str | None, T: int, scale: float) -> DemandScenario:
    if demand_csv:
        try:
            arr = np.loadtxt(demand_csv, delimiter=",", ndmin=2)
        except (OSError, ValueError) as exc:
            raise ValidationFailure(f"cannot read demand file {demand_csv}: {exc}") from exc
        if arr.shape[0] != case.n_d:
            raise ValidationFailure(f"demand file has {arr.shape[0]} rows, case has {case.n_d} loads")
        return DemandScenario(arr * scale)
    return DemandScenario(np.maximum(case.nominal_demand, 0)[:, None] * base_shape(T)[None, :] * scale)


@main.command("solve")
@_common
@click.option("--dataset", "dataset_dir", type=click.Path(exists=True, file_okay=False), help="gen-data run directory.")
@click.option("--demand", "demand_csv", type=click.Path(dir_okay=False), help="Single scenario: loads x hours CSV.")
@click.option("--horizon", "T", default=24, show_default=True, type=click.IntRange(min=1))
@click.option("--scale", default=1.0, show_default=True, type=click.FloatRange(min=0))
@click.option("--line-limits/--no-line-limits", default=True, show_default=True)
@click.pass_context
def cmd_solve(ctx, case_name, jobs, run_dir, dataset_dir, demand_csv, T, scale, line_limits):
    """Exact multi-period dispatch for a dataset or a single scenario."""
    case = _load_case(case_name)
    seed = 0
    out = _run_dir(ctx, "solve", seed, run_dir)
    manifest = RunManifest("solve", dict(ctx.params), seed, case.fingerprint(), _version(), started=_now())
    if dataset_dir:
        ds = _dataset_from_dir(Path(dataset_dir), case)
        try:
            label_dataset(ds, case, jobs=jobs)
        except DatasetError as exc:
            raise RuntimeFailure(str(exc)) from exc
        manifest.outputs["labels"] = str(write_labels(ds, out / "labels.npz"))
        costs = [dispatch_cost(x, case, ds.spec.T) for x in ds.labels]
        with open(out / "solutions.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample", "cost"])
            for i, c in zip(ds.indices, costs):
                w.writerow([int(i), f"{c:.6f}"])
        manifest.outputs["solutions"] = str(out / "solutions.csv")
        click.echo(f"solved {len(ds)} scenarios; mean cost {np.mean(costs):.2f}")
        _finish(manifest, out)
        return

    demand = _single_scenario(case, demand_csv, T, scale)
    builder = RegionBuilder(case, demand.T, line_limits=line_limits)
    prog = opf_program(builder.qp(demand), case.cost_matrix(demand.T))
    try:
        res = solve(prog)
    except Infeasible as exc:
        manifest.extra["status"] = "infeasible"
        _finish(manifest, out)
        raise RuntimeFailure(f"Infeasible: {exc}") from exc
    except SolverError as exc:
        raise RuntimeFailure(str(exc)) from exc
    rep = check_kkt(res, prog)
    layout = builder.layout
    # drop solver round-off so tiny negatives print as 0
    x_clean = np.where(np.abs(res.x_star) < 1e-9, 0.0, res.x_star)
    pg, pch, pdis = layout.split(x_clean)
    cost = dispatch_cost(res.x_star, case, demand.T)
    np.savetxt(out / "dispatch.csv", np.vstack([pg, pch, pdis]), delimiter=",", fmt="%.9g")
    click.echo(f"status {res.status}, iterations {res.iterations}, cost {cost:.4f}")
    click.echo(
        f"KKT: stationarity {rep.stationarity:.2e}, primal {max(rep.primal_eq, rep.primal_ineq):.2e}, "
        f"complementarity {rep.complementarity:.2e}"
    )
    for i in range(case.n_g):
        click.echo(f"gen {i:2d}: " + " ".join(f"{v:9.3f}" for v in pg[i]))
    if case.n_e:
        soc = soc_trajectory(x_clean, case, layout)
        for i in range(case.n_e):
            click.echo(f"ess {i:2d} soc: " + " ".join(f"{v:9.3f}" for v in soc[i]))
    manifest.outputs["dispatch"] = str(out / "dispatch.csv")
    manifest.extra.update({"status": res.status, "cost": cost, "kkt_max": rep.max()})
    _finish(manifest, out)


# --------------------------------------------------------------------- train


@main.command("train")
@_common
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--mode", type=click.Choice(MODES), default="mpa_unsup", show_default=True)
@click.option("--epochs", default=50, show_default=True, type=click.IntRange(min=1))
@click.option("--lr", default=1e-4, show_default=True, type=float)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--patience", default=10, show_default=True, type=click.IntRange(min=1))
@click.option("--batch-size", default=1, show_default=True, type=click.IntRange(min=1))
@click.option("--split", default="0.5,0.3,0.2", show_default=True, help="Train,validation,test ratios.")
@click.pass_context
def cmd_train(ctx, case_name, jobs, run_dir, dataset_dir, mode, epochs, lr, seed, patience, batch_size, split):
    """Train a surrogate; writes checkpoint.npz and train_record.csv."""
    case = _load_case(case_name)
    ds = _dataset_from_dir(Path(dataset_dir), case)
    try:
        ratios = tuple(float(s) for s in split.split(","))
        config = TrainConfig(
            mode=mode, max_epochs=epochs, lr=lr, seed=seed, split=ratios, patience=patience,
            batch_size=batch_size, line_limits=ds.spec.line_limits,
        )
    except ValueError as exc:
        raise ValidationFailure(str(exc)) from exc
    if config.intertemporal and ds.spec.T < 2:
        raise ValidationFailure(f"mode {mode} needs a multi-period dataset (T >= 2), got T={ds.spec.T}")
    if mode in ("mpa_sup", "mpp_sup") and ds.labels is None:
        raise ValidationFailure(f"mode {mode} needs labels; run `solve --dataset {dataset_dir}` first")
    out = _run_dir(ctx, "train", seed, run_dir)
    manifest = RunManifest("train", dict(ctx.params), seed, case.fingerprint(), _version(), started=_now())
    try:
        model, record = train(case, ds, config)
    except (SolverError, FloatingPointError) as exc:
        raise RuntimeFailure(str(exc)) from exc
    extra = {"config": asdict(config), "dataset_spec": asdict(ds.spec), "best_epoch": record.best_epoch}
    manifest.outputs["checkpoint"] = str(model.save(out / "checkpoint.npz", extra=extra))
    manifest.outputs["record"] = str(record.to_csv(out / "train_record.csv"))
    (out / "timing.csv").write_text(
        "epoch,seconds\n" + "".join(f"{i + 1},{t:.3f}\n" for i, t in enumerate(record.wall_clock))
    )
    last = record.rows[-1]
    manifest.extra.update({"best_epoch": record.best_epoch, "epochs_run": len(record.rows),
                           "final_val_gap": last.val_gap, "final_val_mae": last.val_mae})
    click.echo(f"trained {mode}: {len(record.rows)} epochs, best epoch {record.best_epoch}")
    _finish(manifest, out)


# ---------------------------------------------------------------------- eval


def _load_model(path: str, case: GridCase) -> tuple[TrainedModel, dict]:
    params, _, meta = load_checkpoint(path)
    if meta.get("case") != case.fingerprint():
        raise ValidationFailure(f"checkpoint {path} was trained on a different case")
    model = TrainedModel(params, meta["mode"], int(meta["T"]), meta["case"], bool(meta.get("line_limits", True)))
    return model, meta


@main.command("eval")
@_common
@click.option("--dataset", "dataset_dir", required=True, type=click.Path(exists=True, file_okay=False))
@click.option("--checkpoint", "checkpoints", multiple=True, type=click.Path(exists=True, dir_okay=False))
@click.option("--scales", default="1.0,1.025,1.05", show_default=True)
@click.option("--exact/--no-exact", default=True, show_default=True, help="Include the exact solver row.")
@click.pass_context
def cmd_eval(ctx, case_name, jobs, run_dir, dataset_dir, checkpoints, scales, exact):
    """Evaluate checkpoints on the test split at each load scale."""
    case = _load_case(case_name)
    ds = _dataset_from_dir(Path(dataset_dir), case)
    try:
        scale_list = [float(s) for s in scales.split(",") if s.strip()]
    except ValueError as exc:
        raise ValidationFailure(f"bad --scales {scales!r}") from exc
    if not scale_list or min(scale_list) <= 0:
        raise ValidationFailure("scales must be positive")
    models = [_load_model(p, case) for p in checkpoints]
    if not models and not exact:
        raise ValidationFailure("nothing to evaluate: pass --checkpoint or --exact")
    seeds = {m[1]["config"]["seed"] for m in models} or {0}
    splits = {tuple(m[1]["config"]["split"]) for m in models} or {(0.5, 0.3, 0.2)}
    if len(seeds) > 1 or len(splits) > 1:
        raise ValidationFailure("checkpoints disagree on seed or split; evaluate them separately")
    _, _, test_pos = split_indices(len(ds), splits.pop(), seeds.pop())
    test_idx = ds.indices[test_pos]
    out = _run_dir(ctx, "eval", ds.spec.seed, run_dir)
    manifest = RunManifest("eval", dict(ctx.params), ds.spec.seed, case.fingerprint(), _version(), started=_now())
    reports = []
    try:
        for scale in scale_list:
            spec = DatasetSpec(**{**asdict(ds.spec), "scale": scale, "K": ds.spec.K})
            if np.isclose(scale, ds.spec.scale) and ds.labels is not None:
                test = ds.subset(test_pos)
            else:
                test = generate_dataset(spec, case, test_idx, jobs=jobs)
            if exact:
                reports.append(evaluate(test.labels, test.labels, test.scenarios, case, model="exact",
                                        scale=scale, line_limits=ds.spec.line_limits))
            for model, meta in models:
                outputs, skipped = predict(model, case, test.scenarios)
                keep = [i for i, x in enumerate(outputs) if x is not None]
                note = "storage energy not modelled per period" if model.per_period else ""
                if skipped:
                    note = f"{skipped} projection failures; " + note
                reports.append(evaluate(
                    [outputs[i] for i in keep], [test.labels[i] for i in keep],
                    [test.scenarios[i] for i in keep], case, model=model.mode, scale=scale,
                    line_limits=ds.spec.line_limits, notes=note.strip("; "),
                ))
    except (DatasetError, SolverError) as exc:
        raise RuntimeFailure(str(exc)) from exc
    paths = write_reports(reports, out)
    manifest.outputs.update({k: str(v) for k, v in paths.items()})
    click.echo(paths["summary"].read_text(), nl=False)
    _finish(manifest, out)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
