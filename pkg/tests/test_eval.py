import json

import numpy as np
import pytest

from advcritic import data
from advcritic import evaluate as ev
from models import random_mlp


def _rec(i, r, x, ok=True):
    return {"index": i, "label": 0, "target": 1, "r_norm": r, "x_norm": x,
            "success": ok, "iterations": 3, "confidence": 0.5}


def test_rho_arithmetic():
    assert ev.rho_from_records([_rec(0, 1.0, 4.0)]) == 0.25
    assert ev.rho_from_records([_rec(0, 0.0, 4.0), _rec(1, 0.0, 2.0)]) == 0.0
    # failures are excluded from the mean
    assert ev.rho_from_records([_rec(0, 1.0, 4.0), _rec(1, 3.0, 1.0, ok=False)]) == 0.25


class PerfectModel:
    """Wraps a classifier but answers with the dataset labels (for test_error)."""

    def __init__(self, lookup):
        self.lookup = lookup

    def predict(self, x):
        return np.array([self.lookup[x_row.tobytes()] for x_row in x])


def test_test_error():
    ds = data.make_synthetic("blobs", 30, 3, seed=0)
    perfect = PerfectModel({row.tobytes(): lab for row, lab in zip(ds.images, ds.labels)})
    assert ev.test_error(perfect, ds, batch_size=7) == 0.0
    model, _ = random_mlp(0, n_in=2, hidden=(6,), k=3)
    manual = 100.0 * np.mean(model.predict(ds.images) != ds.labels)
    assert ev.test_error(model, ds, batch_size=7) == pytest.approx(manual, abs=1e-12)


@pytest.fixture(scope="module")
def setup():
    ds = data.make_synthetic("blobs", 40, 3, seed=1, dim=4, separation=2.0)
    model, _ = random_mlp(11, n_in=4, hidden=(10,), k=3)
    # make most points correctly classified: relabel with the model's own argmax
    labels = model.predict(ds.images)
    ds = data.Dataset(ds.images, labels, 3, "test")
    return model, ds


@pytest.mark.parametrize("attack", ["deepfool", "ours"])
def test_robustness_report(setup, attack):
    model, ds = setup
    rep = ev.robustness(model, ds, attack, name="m", batch_size=16)
    assert rep.n_attacked + rep.n_misclassified + rep.n_zero_input == len(ds)
    assert rep.n_failed == sum(not r["success"] for r in rep.records)
    assert rep.rho == pytest.approx(ev.rho_from_records(rep.records), abs=0)
    assert rep.fingerprint["dataset"] == ds.fingerprint
    assert len(rep.fingerprint["checkpoint"]) == 16
    # same inputs in a different order give the same rho
    order = np.random.default_rng(0).permutation(len(ds))
    shuffled = ev.robustness(model, ds.subset(order), attack, batch_size=16)
    assert shuffled.rho == pytest.approx(rep.rho, rel=1e-12)


def test_success_postconditions_reverified(setup):
    model, ds = setup
    x, y = ds.images, ds.labels
    res = ev.run_attack(model, x, y, "ours")
    p0 = model.predict_probs(x)[np.arange(len(x)), y]
    p_adv = model.predict_probs(res.x_adv)[np.arange(len(x)), res.target]
    assert np.all(p_adv[res.success] >= np.minimum(p0, ev.MAX_CONFIDENCE)[res.success])
    assert np.all(res.target != y)
    df = ev.run_attack(model, x, y, "deepfool")
    assert np.all(model.predict(df.x_adv)[df.success] != y[df.success])
    with pytest.raises(ValueError):
        ev.run_attack(model, x, y, "cw")


def test_zero_input_skipped():
    model, _ = random_mlp(2, n_in=3, hidden=(5,), k=2)
    images = np.array([[0.0, 0.0, 0.0], [0.2, 0.9, 0.4]])
    labels = model.predict(images)
    rep = ev.robustness(model, data.Dataset(images, labels, 2), "deepfool")
    assert rep.n_zero_input == 1 and rep.n_attacked == 1
    with pytest.raises(ValueError):
        ev.robustness(model, data.Dataset(np.zeros((0, 3)), np.zeros(0, dtype=int), 2),
                      "deepfool")


def test_serialization_round_trip(setup, tmp_path):
    model, ds = setup
    rep = ev.robustness(model, ds, "deepfool", name="m")
    back = ev.RobustnessReport.from_json(rep.to_json())
    assert back == rep
    from_csv = ev.parse_records_csv(rep.records_csv())
    assert from_csv == rep.records  # floats written with repr survive exactly
    rep.save(tmp_path / "rep")
    saved = json.loads((tmp_path / "rep.json").read_text())
    assert saved["rho"] == rep.rho
    hist = (tmp_path / "rep_hist.csv").read_text().splitlines()
    assert hist[0] == "bin_lo,bin_hi,count"
    assert sum(int(line.split(",")[2]) for line in hist[1:]) == rep.n_attacked - rep.n_failed


def _report(name, attack, rho, err=1.0, dataset="d"):
    return ev.RobustnessReport(name, attack, rho, err, 1, 0, 0, 0, [], {"dataset": dataset})


def test_compare_table():
    text, table = ev.compare([_report("zeta", "deepfool", 0.2), _report("alpha", "deepfool", 0.1),
                              _report("alpha", "ours", 0.3)])
    rows = table.splitlines()
    assert rows[0] == "model,test_error_%,rho_deepfool,rho_ours"
    assert rows[1].startswith("alpha,") and rows[2].startswith("zeta,")
    assert rows[2].endswith(",")  # missing cell
    assert "alpha" in text and "0.300" in text
    single_text, single = ev.compare([_report("one", "deepfool", 0.1)])
    assert len(single.splitlines()) == 2
    with pytest.raises(ev.ReportMismatchError):
        ev.compare([_report("a", "deepfool", 0.1), _report("b", "deepfool", 0.1, dataset="e")])
    with pytest.raises(ValueError):
        ev.compare([])
