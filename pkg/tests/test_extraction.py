import numpy as np
import pytest

from killchain.data import make_toy2d_dataset
from killchain.extraction import (
    LLDS,
    ExtractionReport,
    build_llds,
    epochs_for,
    extract,
    fidelity,
    train_substitute,
)
from killchain.model import ArchitectureSpec, TrainConfig, predict
from killchain.oracle import BudgetExhausted, OracleHandle
from killchain.querygen import QueryStrategy

TOY_SPEC = ArchitectureSpec.classifier((1, 1, 2), 3, filters=[], dense=[16])
TOY_CFG = TrainConfig(epochs=60, batch_size=32, learning_rate=0.01, optimizer="adam", seed=0)


def _queries(n, seed=0):
    return np.random.default_rng(seed).random((n, 1, 1, 2), dtype=np.float32)


def test_llds_labels_come_from_the_oracle(toy_victim):
    o = OracleHandle.local(toy_victim, budget=100)
    q = _queries(60)
    llds = build_llds(o, q)
    assert len(llds) == 60 == o.used
    assert np.array_equal(llds.images, q)
    assert np.allclose(llds.outputs, predict(toy_victim, q))
    with pytest.raises(BudgetExhausted):
        build_llds(o, _queries(41))
    assert o.used == 60  # refused up front, nothing spent


def test_llds_hard_mode_and_round_trip(toy_victim, tmp_path):
    o = OracleHandle.local(toy_victim, "hard")
    llds = build_llds(o, _queries(20), provenance=["uniform_noise"] * 20)
    assert llds.label_mode == "hard" and llds.outputs.dtype == np.int64
    back = LLDS.load(llds.save(tmp_path / "llds"))
    assert np.array_equal(back.images, llds.images) and np.array_equal(back.outputs, llds.outputs)
    assert back.provenance.tolist() == ["uniform_noise"] * 20
    assert len(llds.prefix(5)) == 5


def test_llds_rejects_inconsistent_pairs():
    with pytest.raises(ValueError):
        LLDS(_queries(3), np.full((3, 3), 1 / 3), "soft", np.array(["q"] * 3), 4)
    with pytest.raises(ValueError):
        LLDS(_queries(2), np.array([[0.5, 0.6, 0.0]] * 2), "soft", np.array(["q"] * 2), 2)


def test_substitute_trains_without_touching_oracle(toy_victim):
    o = OracleHandle.local(toy_victim, budget=300)
    llds = build_llds(o, _queries(300))
    used = o.used
    sub = train_substitute(llds, TOY_SPEC, TOY_CFG)
    assert o.used == used and o.eval_queries == 0
    assert fidelity(sub, o, make_toy2d_dataset(300, seed=7).images) > 0.9
    assert o.used == used and o.eval_queries == 300


def test_substitute_mode_must_fit_spec(toy_victim):
    llds = build_llds(OracleHandle.local(toy_victim), _queries(5))
    with pytest.raises(ValueError):
        train_substitute(llds, ArchitectureSpec.localizer((1, 1, 2), filters=[], dense=[4]), TOY_CFG)


def test_hard_label_extraction_learns(toy_victim):
    o = OracleHandle.local(toy_victim, "hard")
    sub = train_substitute(build_llds(o, _queries(400)), TOY_SPEC, TOY_CFG)
    assert fidelity(sub, o, make_toy2d_dataset(300, seed=7).images) > 0.9


def test_epochs_for_min_steps():
    cfg = TrainConfig(epochs=5, batch_size=64)
    assert epochs_for(20000, cfg, 600) == 5
    assert epochs_for(1000, cfg, 600) == 38
    assert epochs_for(1000, cfg, 0) == 5


def test_extract_checkpoints_and_budget(toy_victim):
    o = OracleHandle.local(toy_victim, budget=500)
    test = make_toy2d_dataset(200, seed=9)
    sub, report = extract(o, QueryStrategy("uniform_noise", seed=1), 500, TOY_SPEC, TOY_CFG, test,
                          checkpoints=[100, 500], topk=1)
    assert o.used == 500 and report.budget_spent == 500
    assert o.eval_queries == 2 * len(test)
    assert [c.budget for c in report.checkpoints] == [100, 500]
    assert report.substitute_hash == sub.fingerprint()
    assert report.final.fidelity > 0.9
    assert report.provenance_counts == {"uniform_noise": 500}
    again = ExtractionReport.from_dict(report.to_dict())
    assert again == report
    with pytest.raises(BudgetExhausted):
        extract(o, QueryStrategy("uniform_noise"), 10, TOY_SPEC, TOY_CFG, test)


def test_extract_charges_eval_queries_when_asked(toy_victim):
    o = OracleHandle.local(toy_victim, budget=150)
    test = make_toy2d_dataset(25, seed=9)
    extract(o, QueryStrategy("uniform_noise"), 100, TOY_SPEC, TOY_CFG, test, checkpoints=[50, 100],
            eval_exempt=False, topk=1)
    assert o.used == 150 and o.eval_queries == 0


def test_extract_rejects_bad_checkpoints(toy_victim):
    o = OracleHandle.local(toy_victim)
    test = make_toy2d_dataset(10)
    for cps in ([200, 100], [50, 150], [0, 100]):
        with pytest.raises(ValueError):
            extract(o, QueryStrategy("uniform_noise"), 100, TOY_SPEC, TOY_CFG, test, checkpoints=cps)


def test_report_validation_rejects_out_of_range():
    d = {"strategy": "blob", "label_mode": "soft", "budget_spent": 1, "task_metric_name": "x",
         "fidelity_name": "agreement", "eval_exempt": True,
         "checkpoints": [{"budget": 1, "fidelity": 1.2, "task_metric": 0.5, "metrics": {}}]}
    with pytest.raises(ValueError):
        ExtractionReport.from_dict(d)
