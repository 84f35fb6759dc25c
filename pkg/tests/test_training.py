import numpy as np
import pytest

from mpopf.experiments import Dataset, DatasetSpec, generate_dataset, ramp_violation
from mpopf.formulation import DemandScenario, max_violation
from mpopf.training import (
    TrainConfig,
    TrainRecord,
    init_model,
    predict,
    raw_output,
    train,
    train_mpa_unsupervised,
    train_spa,
    train_supervised,
)


@pytest.fixture(scope="module")
def toy_data(toy3):
    return generate_dataset(DatasetSpec(K=60, T=4, seed=4), toy3)


@pytest.fixture(scope="module")
def mpa_run(toy3, toy_data):
    return train_mpa_unsupervised(toy3, toy_data, TrainConfig(max_epochs=6, lr=1e-3, seed=3))


def test_config_validation():
    with pytest.raises(ValueError, match="unknown mode"):
        TrainConfig(mode="nope")
    with pytest.raises(ValueError, match="split"):
        TrainConfig(split=(0.5, 0.5, 0.5))
    assert not TrainConfig(mode="spa_unsup").intertemporal


def test_output_width(case39):
    model = init_model(case39, 24, TrainConfig())
    z, _ = raw_output(model, np.ones((case39.n_d, 24)))
    assert z.shape == ((10 + 2) * 24,)
    spa = init_model(case39, 24, TrainConfig(mode="spa_unsup"))
    assert spa.params.sizes[0] == case39.n_d and spa.params.sizes[-1] == 12
    assert raw_output(spa, np.ones((case39.n_d, 24)))[0].shape == (12 * 24,)


def test_pinned_region_gives_constant_loss(single_gen):
    # one generator and no storage: the balance row pins the whole schedule
    spec = DatasetSpec(K=1, T=2, noise=0.0)
    data = generate_dataset(spec, single_gen)
    _, rec = train(single_gen, data, TrainConfig(max_epochs=4, lr=1e-2, split=(1.0, 0.0, 0.0)))
    losses = [r.train_loss for r in rec.rows]
    assert max(losses) - min(losses) <= 1e-9 * max(losses)


def test_record_has_one_row_per_epoch(mpa_run):
    _, rec = mpa_run
    assert [r.epoch for r in rec.rows] == list(range(1, len(rec.rows) + 1))
    assert len(rec.wall_clock) == len(rec.rows)
    assert 1 <= rec.best_epoch <= len(rec.rows)


def test_outputs_feasible(mpa_run, toy3, toy_data):
    model, _ = mpa_run
    outputs, skipped = predict(model, toy3, toy_data.scenarios)
    assert skipped == 0
    assert max(max_violation(x, toy3, sc) for x, sc in zip(outputs, toy_data.scenarios)) <= 1e-6


def test_unsupervised_loss_trend(mpa_run):
    _, rec = mpa_run
    loss = np.array([r.train_loss for r in rec.rows])
    smooth = np.convolve(loss, np.ones(5) / 5, mode="valid") if loss.size >= 5 else loss
    assert np.all(np.diff(smooth) <= 0.05 * smooth[:-1])
    assert loss[-1] < loss[0]


def test_deterministic(toy3, toy_data, tmp_path):
    cfg = TrainConfig(max_epochs=2, lr=1e-3, seed=8)
    a_model, a_rec = train(toy3, toy_data, cfg)
    b_model, b_rec = train(toy3, toy_data, cfg)
    assert a_rec == b_rec
    a_rec.to_csv(tmp_path / "a.csv")
    b_rec.to_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert all(np.array_equal(x, y) for x, y in zip(a_model.params.arrays(), b_model.params.arrays()))


def test_supervised_needs_labels(toy3):
    data = generate_dataset(DatasetSpec(K=4, T=4), toy3, check_feasible=False)
    with pytest.raises(ValueError, match="labels"):
        train_supervised(toy3, data, TrainConfig(mode="mpp_sup", max_epochs=1))


def test_mpp_inference_is_projected(toy3, toy_data):
    model, _ = train_supervised(toy3, toy_data, TrainConfig(mode="mpp_sup", max_epochs=1, lr=1e-3))
    raw = [raw_output(model, sc.p_d)[0] for sc in toy_data.scenarios]
    assert max(max_violation(z, toy3, sc) for z, sc in zip(raw, toy_data.scenarios)) > 1e-3
    outputs, _ = predict(model, toy3, toy_data.scenarios)
    assert max(max_violation(x, toy3, sc) for x, sc in zip(outputs, toy_data.scenarios)) <= 1e-6


def test_projection_aware_supervision_beats_post_hoc(toy3, toy_data):
    cfg = dict(max_epochs=5, lr=1e-3, seed=1)
    _, mpa = train_supervised(toy3, toy_data, TrainConfig(mode="mpa_sup", **cfg))
    _, mpp = train_supervised(toy3, toy_data, TrainConfig(mode="mpp_sup", **cfg))
    assert mpa.rows[-1].val_mae <= mpp.rows[-1].val_mae


def test_single_period_model_ignores_ramps(toy3):
    spec = DatasetSpec(K=20, T=3, noise=0.0)
    data = generate_dataset(spec, toy3)
    model, _ = train_spa(toy3, data, TrainConfig(mode="spa_unsup", max_epochs=3, lr=1e-3))
    # demand jumps by 70 MW in one hour; the cheap unit can only ramp 30 MW
    steep = DemandScenario(np.array([[20.0, 90.0, 90.0]]))
    (x,), _ = predict(model, toy3, [steep])
    assert max_violation(x, toy3, steep, intertemporal=False) <= 1e-6
    assert ramp_violation(x, toy3, 3)


def test_record_csv_has_no_timing(tmp_path):
    rec = TrainRecord()
    text = rec.to_csv(tmp_path / "r.csv").read_text()
    assert text.strip() == "epoch,train_loss,val_mae,val_gap,val_cost,degenerate_rows,skipped"


@pytest.mark.slow
def test_toy_unsupervised_reaches_one_percent(toy3):
    data = generate_dataset(DatasetSpec(K=200, T=4, seed=12), toy3)
    _, rec = train_mpa_unsupervised(toy3, data, TrainConfig(max_epochs=50, lr=1e-3, seed=0))
    assert min(r.val_gap for r in rec.rows) < 1.0


def test_empty_split_rejected(toy3):
    data = generate_dataset(DatasetSpec(K=1, T=4), toy3)
    with pytest.raises(ValueError, match="empty"):
        train(toy3, data, TrainConfig(max_epochs=1))


def test_dataset_subset_keeps_labels(toy_data):
    sub = toy_data.subset([0, 5])
    assert isinstance(sub, Dataset) and len(sub) == 2
    np.testing.assert_array_equal(sub.labels[1], toy_data.labels[5])
