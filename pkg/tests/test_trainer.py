import csv
import io

import numpy as np
import pytest

from ialgca import trainer
from ialgca.data import SyntheticConfig, generate_synthetic
from ialgca.errors import ConfigError, TrainingDivergedError
from ialgca.losses import cross_entropy
from ialgca.model import DFERModel, ModelConfig, load_checkpoint, save_checkpoint
from ialgca.trainer import (
    ABLATION_FIELDS,
    AblationSpec,
    Cell,
    TrainConfig,
    ablation_table,
    evaluate,
    lr_at_epoch,
    run_ablation,
    train,
)

TINY_DATA = dict(num_classes=3, train_per_class=3, test_per_class=3, min_frames=4, max_frames=6,
                 height=8, width=8, noise_std=0.05)
TINY_MODEL = dict(frames=4, height=8, width=8, widths=(4, 8), reduction=2, heads=2, layers=1,
                  token_dim=8, mlp_dim=8)


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    return generate_synthetic(SyntheticConfig(**TINY_DATA), tmp_path_factory.mktemp("tiny"))


def tiny_model(**kw):
    return DFERModel(ModelConfig(**{"num_classes": 3, **TINY_MODEL, **kw}))


def tiny_train(**kw):
    return TrainConfig(**{"epochs": 2, "base_lr": 0.01, "batch_size": 4, "U": 4, "V": 1, **kw})


# ---------------------------------------------------------------- schedule


def test_lr_schedule():
    assert lr_at_epoch(TrainConfig(base_lr=0.001), 0) == 0.001
    assert abs(lr_at_epoch(TrainConfig(base_lr=0.001, gamma=0.9), 2) - 0.00081) <= 1e-15
    cfg = TrainConfig(base_lr=0.3, gamma=1.0)
    assert all(lr_at_epoch(cfg, e) == 0.3 for e in range(10))


@pytest.mark.parametrize("kw", [dict(gamma=0.0), dict(gamma=1.5), dict(base_lr=0.0), dict(epochs=-1)])
def test_train_config_validation(kw):
    with pytest.raises(ConfigError):
        TrainConfig(**kw)


# ---------------------------------------------------------------- training loop


def test_zero_epochs_leave_model_unchanged(tiny_data, tmp_path):
    model = tiny_model()
    before = model.state()
    _, log = train(model, tiny_train(epochs=0), tiny_data[0], log_path=tmp_path / "log.csv")
    assert log == []
    for name, arr in before.items():
        np.testing.assert_array_equal(arr, model.params[name].data)
    assert (tmp_path / "log.csv").read_text() == "epoch,lr,loss,train_war,test_uar,test_war\n"


def test_frame_mismatch_is_rejected(tiny_data):
    with pytest.raises(ConfigError):
        train(tiny_model(), tiny_train(U=8), tiny_data[0])


def test_single_sample_overfits(tiny_data):
    one = trainer.Manifest(tiny_data[0].records[4:5], 3, "train")
    cfg = tiny_train(epochs=200, base_lr=0.02, momentum=0.9, lam=0.0, batch_size=1, flip=False, crop=False)
    _, log = train(tiny_model(dtype="float64"), cfg, one)
    assert log[-1].loss < 1e-2


def test_training_is_bitwise_deterministic(tiny_data, tmp_path):
    paths = []
    for i in range(2):
        model, _ = train(tiny_model(attention="gca", aux=True), tiny_train(momentum=0.9, flip=True), tiny_data[0])
        paths.append(tmp_path / f"{i}.ckpt")
        save_checkpoint(model, paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes()


def test_lambda_zero_trains_exactly_like_cross_entropy(tiny_data, monkeypatch):
    a, log_a = train(tiny_model(seed=2), tiny_train(lam=0.0), tiny_data[0])
    monkeypatch.setattr(trainer, "combined_loss", lambda logits, aux, t, cfg: cross_entropy(logits, t))
    b, log_b = train(tiny_model(seed=2), tiny_train(lam=0.0), tiny_data[0])
    assert [e.loss for e in log_a] == [e.loss for e in log_b]
    for name, prm in a.params.items():
        np.testing.assert_array_equal(prm.data, b.params[name].data)


def test_divergence_names_the_batch_seed(tiny_data):
    with pytest.raises(TrainingDivergedError, match=r"batch seed \(0, \d+, \d+\)"):
        train(tiny_model(), tiny_train(epochs=3, base_lr=1e6), tiny_data[0])


def test_log_file_and_periodic_eval(tiny_data, tmp_path):
    _, log = train(tiny_model(), tiny_train(eval_every=1), tiny_data[0], tiny_data[1], tmp_path / "log.csv")
    rows = list(csv.DictReader(io.StringIO((tmp_path / "log.csv").read_text())))
    assert [int(r["epoch"]) for r in rows] == [0, 1]
    assert all(r["test_war"] != "" for r in rows)
    assert float(rows[1]["lr"]) == pytest.approx(0.01 * 0.96)


# ---------------------------------------------------------------- evaluation


def test_untrained_model_is_near_chance(tmp_path):
    train_set, test_set = generate_synthetic(
        SyntheticConfig(train_per_class=1, test_per_class=10, height=16, width=16), tmp_path
    )
    model = DFERModel(ModelConfig(num_classes=7, height=16, width=16))
    rep = evaluate(model, test_set, 8, 1)
    assert abs(rep.war - 1 / 7) <= 0.1


def test_checkpoint_round_trip_preserves_evaluation(tiny_data, tmp_path):
    model, _ = train(tiny_model(attention="se", aux=True), tiny_train(), tiny_data[0])
    save_checkpoint(model, tmp_path / "m.ckpt")
    loaded = load_checkpoint(tmp_path / "m.ckpt")
    a = evaluate(model, tiny_data[1], 4, 1)
    b = evaluate(loaded, tiny_data[1], 4, 1)
    assert a.to_dict() == b.to_dict()
    np.testing.assert_array_equal(
        trainer.predict(model, tiny_data[1], 4, 1), trainer.predict(loaded, tiny_data[1], 4, 1)
    )


def test_evaluate_reports_intensity_bins(tiny_data):
    rep = evaluate(tiny_model(), tiny_data[1], 4, 1)
    assert rep.low_count + rep.high_count == 6
    assert rep.confusion.total == 9


# ---------------------------------------------------------------- ablation


def tiny_spec(cells, seeds=(0,)):
    return AblationSpec(
        cells=cells,
        seeds=list(seeds),
        synthetic=TINY_DATA,
        model={k: v for k, v in TINY_MODEL.items() if k != "frames"},
        train=dict(epochs=1, batch_size=4, U=4, V=1),
    )


def test_one_cell_one_seed_gives_one_row():
    table = ablation_table(run_ablation(tiny_spec([Cell("baseline")])))
    rows = list(csv.reader(io.StringIO(table)))
    assert tuple(rows[0]) == ABLATION_FIELDS
    assert len(rows) == 2
    assert rows[1][:7] == ["baseline", "none", "0", "0", "", "4", "0"]
    assert rows[1][ABLATION_FIELDS.index("war_std")] == "0.000000"


def test_ablation_is_byte_reproducible():
    spec = tiny_spec([Cell("baseline"), Cell("gca+ial", attention="gca", aux=True, ial=True, reduction=2)], (0, 1))
    a = ablation_table(run_ablation(spec))
    b = ablation_table(run_ablation(spec))
    assert a == b
    rows = list(csv.DictReader(io.StringIO(a)))
    assert [r["cell"] for r in rows] == ["baseline", "gca+ial"]
    assert rows[1]["seeds"] == "0;1" and rows[1]["lambda"] == "0.100000"


def test_ablation_spec_parsing(tmp_path):
    path = tmp_path / "spec.json"
    path.write_text('{"cells": [{"name": "x", "attention": "se", "ial": true, "lambda": 0.2, "r": 2}], "seeds": [3]}')
    spec = AblationSpec.load(path)
    assert spec.cells[0].lam == 0.2 and spec.cells[0].reduction == 2 and spec.seeds == [3]
    path.write_text('{"cells": [], "bogus": 1}')
    with pytest.raises(ConfigError):
        AblationSpec.load(path)
    path.write_text("{")
    with pytest.raises(ConfigError):
        AblationSpec.load(path)
