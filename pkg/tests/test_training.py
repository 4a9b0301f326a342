import json
from dataclasses import replace

import numpy as np
import pytest
import torch

from spseg.annotation import sample_dataset_keypoints
from spseg.core import DatasetError
from spseg.evaluation import evaluate_model
from spseg.network import build_backbone, load_checkpoint
from spseg.objectives import LossConfig
from spseg.training import (EarlyStopping, TrainConfig, _fit, backbone_config_for, batch_loss, holdout_split,
                            load_history, run_repeated, save_run, train_benchmark, train_spss, train_spss_plus)


def _with_keypoints(ds, ids=None, **kw):
    ids = ds.train_ids if ids is None else ids
    return ds.with_keypoints(sample_dataset_keypoints(ds.gt_masks, ids, [1], n_seeds=2, dilation_radius=1, **kw))


def test_early_stopping_contract():
    stop = EarlyStopping(patience=10)
    losses = [0.5, 0.4] + [0.41] * 10
    for epoch, loss in enumerate(losses, start=1):
        stop.update(epoch, loss)
        if stop.should_stop:
            break
    assert epoch == 12 and stop.best_epoch == 2


def test_config_round_trip_and_validation():
    cfg = TrainConfig(mode="spss_plus", loss_cfg=LossConfig(alpha=0.3), seed=4)
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    for bad in ({"patience": 0}, {"batch_size": 0}, {"mode": "x"}, {"learning_rate": -1.0}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_zero_learning_rate_leaves_parameters_untouched(tiny_multiclass, fast_cfg):
    cfg = replace(fast_cfg, learning_rate=0.0, max_epochs=1)
    fit_ids, _ = holdout_split(tiny_multiclass, cfg)
    from spseg.training import class_prior

    before = build_backbone(backbone_config_for(tiny_multiclass, cfg), cfg.seed,
                            class_prior(tiny_multiclass, cfg, fit_ids)).parameter_arrays()
    model, _ = train_spss(tiny_multiclass, cfg)
    after = model.parameter_arrays()
    assert all(np.array_equal(before[k], after[k]) for k in before)


def test_reported_loss_matches_recomputed_objective(tiny_multiclass, fast_cfg):
    cfg = replace(fast_cfg, learning_rate=0.0, max_epochs=1, batch_size=64)
    model, hist = train_spss(tiny_multiclass, cfg)
    fit_ids, val_ids = holdout_split(tiny_multiclass, cfg)
    with torch.no_grad():
        assert hist.train_loss[0] == pytest.approx(float(batch_loss(model, tiny_multiclass, cfg, fit_ids)), rel=1e-6)
        assert hist.val_loss[0] == pytest.approx(float(batch_loss(model, tiny_multiclass, cfg, val_ids)), rel=1e-6)


def test_single_image_overfit(tiny_multiclass):
    one = tiny_multiclass.train_ids[0]
    ds = replace(tiny_multiclass, split={i: ("train" if i == one else "test") for i in tiny_multiclass.ids})
    cfg = TrainConfig(base_filters=4, batch_size=1, max_epochs=500, patience=500, val_fraction=0.0,
                      prior_init=False, seed=1)
    model, hist = train_spss(ds, cfg)
    assert hist.train_loss[0] > 1e-3
    with torch.no_grad():
        assert float(batch_loss(model, ds, cfg, [one])) < 1e-3


def test_benchmark_single_image_overfit(tiny_multiclass):
    one = tiny_multiclass.train_ids[0]
    ds = replace(tiny_multiclass, split={i: ("train" if i == one else "test") for i in tiny_multiclass.ids})
    cfg = TrainConfig(base_filters=8, batch_size=1, max_epochs=300, patience=300, val_fraction=0.0, seed=0)
    model, _ = train_benchmark(ds, cfg)
    assert evaluate_model(model, ds, ids=[one]).mean_accuracy > 0.99


def test_alpha_one_reduces_to_spss(tiny_multiclass, fast_cfg):
    ds = _with_keypoints(tiny_multiclass)
    cfg = replace(fast_cfg, max_epochs=3)
    m1, h1 = train_spss(ds, cfg)
    m2, h2 = train_spss_plus(ds, replace(cfg, loss_cfg=LossConfig(alpha=1.0)))
    assert h1.train_loss == h2.train_loss and h1.val_loss == h2.val_loss
    a, b = m1.parameter_arrays(), m2.parameter_arrays()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_alpha_zero_keypoint_loss_decreases(tiny_multiclass):
    image = tiny_multiclass.train_ids[0]
    ds = _with_keypoints(tiny_multiclass, [image])
    cfg = TrainConfig(mode="spss_plus", base_filters=4, batch_size=8, max_epochs=5, patience=5, seed=0,
                      loss_cfg=LossConfig(alpha=0.0))
    _, hist = train_spss_plus(ds, cfg)
    assert all(b < a for a, b in zip(hist.train_loss, hist.train_loss[1:]))


def test_spss_plus_is_deterministic(tiny_binary):
    ds = tiny_binary.with_keypoints(sample_dataset_keypoints(tiny_binary.gt_masks, tiny_binary.train_ids, [0],
                                                             n_seeds=2, dilation_radius=1, negatives=True))
    cfg = TrainConfig(base_filters=4, batch_size=8, max_epochs=2, seed=3)
    m1, h1 = train_spss_plus(ds, cfg)
    m2, h2 = train_spss_plus(ds, cfg)
    assert h1 == h2 and h1.to_json() == h2.to_json()
    a, b = m1.parameter_arrays(), m2.parameter_arrays()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_missing_annotations_raise(tiny_multiclass, fast_cfg):
    with pytest.raises(DatasetError, match="spss"):
        train_spss_plus(tiny_multiclass, fast_cfg)
    with pytest.raises(DatasetError, match="masks"):
        train_benchmark(replace(tiny_multiclass, gt_masks=None), fast_cfg)
    sp = dict(tiny_multiclass.sp)
    del sp[tiny_multiclass.train_ids[0]]
    with pytest.raises(DatasetError, match="SP"):
        train_spss(tiny_multiclass.with_sp(sp), fast_cfg)


def test_holdout_split(tiny_multiclass, fast_cfg):
    ds = _with_keypoints(tiny_multiclass, tiny_multiclass.train_ids[:5])
    fit, val = holdout_split(ds, fast_cfg)
    assert len(val) == round(0.1 * len(ds.train_ids))
    assert set(fit) | set(val) == set(ds.train_ids) and not set(fit) & set(val)
    assert not set(val) & {k.image_id for k in ds.keypoints}
    assert holdout_split(ds, fast_cfg) == (fit, val)
    fit, val = holdout_split(ds, replace(fast_cfg, monitor="test"))
    assert val == sorted(ds.test_ids)
    assert holdout_split(ds, replace(fast_cfg, val_fraction=0.0))[1] == []


def test_early_stopping_restores_best(tiny_multiclass, fast_cfg):
    cfg = replace(fast_cfg, max_epochs=4, patience=1)
    model, hist = train_spss(tiny_multiclass, cfg)
    assert 1 <= hist.best_epoch <= hist.stopped_epoch <= 4
    _, val_ids = holdout_split(tiny_multiclass, cfg)
    with torch.no_grad():
        assert float(batch_loss(model, tiny_multiclass, cfg, val_ids)) == pytest.approx(hist.best_val_loss, rel=1e-5)


def test_repeats_and_run_files(tmp_path, tiny_multiclass, fast_cfg):
    runs = run_repeated(train_spss, tiny_multiclass, replace(fast_cfg, max_epochs=1, seed=7), n_runs=2)
    assert [h.seed for _, h in runs] == [7, 8]
    model, hist = runs[0]
    save_run(tmp_path, model, hist, fast_cfg, {"note": "x"})
    for name in ("checkpoint.pt", "history.json", "timing.json", "config.json"):
        assert (tmp_path / name).exists()
    assert load_history(tmp_path / "history.json").to_json() == hist.to_json()
    assert json.loads((tmp_path / "config.json").read_text())["note"] == "x"
    assert load_checkpoint(tmp_path / "checkpoint.pt").seed == 7
    with pytest.raises(ValueError):
        run_repeated(train_spss, tiny_multiclass, fast_cfg, n_runs=0)


def test_binary_benchmark_runs(tiny_binary, fast_cfg):
    model, hist = train_benchmark(tiny_binary, fast_cfg)
    assert model.config.n_out == 1 and len(hist.train_loss) == 2


def test_fit_continues_from_given_model(tiny_multiclass, fast_cfg):
    model, _ = train_spss(tiny_multiclass, replace(fast_cfg, max_epochs=1))
    steps = model.step
    model, _ = _fit(tiny_multiclass, replace(fast_cfg, max_epochs=1), model)
    assert model.step > steps
