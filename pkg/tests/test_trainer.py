"""Training-loop tests: optimizer arithmetic, PET assembly rules, the
frozen-generator contract, fold hygiene, and report structure."""

import dataclasses
import json

import numpy as np
import pytest

from trimodal.mmg import MmgConfig, MmgModel
from trimodal.losses import LossConfig
from trimodal.nn import Parameter
from trimodal.synthdata import split_kfold
from trimodal.trainer import (
    Adam,
    Instrument,
    OptimizerNaNError,
    TrainConfig,
    _batches,
    _imputation_noise,
    assemble_pet,
    evaluate_fusion,
    run_cv,
    run_cv_single_fold,
    train_fusion,
    train_mmg,
)
from trimodal.checkpoint import state_checksums

from conftest import fast_train_config


# -- optimizer -------------------------------------------------------------


def test_adam_single_step_hand_value():
    p = Parameter(np.array([1.0], dtype=np.float32))
    p.grad = np.array([0.5], dtype=np.float32)
    opt = Adam([("w", p)], lr=0.1)
    opt.step()
    # bias correction makes the first step lr * g / (|g| + eps)
    want = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8)
    assert float(p.data[0]) == pytest.approx(want, abs=1e-7)


def test_adam_skips_missing_gradients():
    p = Parameter(np.array([2.0], dtype=np.float32))
    opt = Adam([("w", p)], lr=0.1)
    p.grad = None
    opt.step()
    assert float(p.data[0]) == 2.0


def test_adam_rejects_nan_gradient():
    p = Parameter(np.array([1.0], dtype=np.float32))
    p.grad = np.array([np.nan], dtype=np.float32)
    opt = Adam([("w", p)], lr=0.1)
    with pytest.raises(OptimizerNaNError, match="'w'"):
        opt.step()


def test_adam_rejects_bad_lr():
    with pytest.raises(ValueError):
        Adam([], lr=0.0)


def test_zero_grad_clears_all():
    p = Parameter(np.array([1.0], dtype=np.float32))
    p.grad = np.array([1.0], dtype=np.float32)
    Adam([("w", p)], lr=0.1).zero_grad()
    assert p.grad is None


def test_batches_partition_indices(rng):
    got = _batches(11, 4, rng)
    assert [len(b) for b in got] == [4, 4, 3]
    assert sorted(np.concatenate(got).tolist()) == list(range(11))


# -- config ----------------------------------------------------------------


def test_train_config_mode_mapping():
    assert fast_train_config(use_mmg=False, use_tcaf=False).mode() == "none"
    assert fast_train_config(use_mmg=True, use_tcaf=False).mode() == "mmg_only"
    assert fast_train_config(use_mmg=False, use_tcaf=True).mode() == "tcaf_only"
    assert fast_train_config(use_mmg=True, use_tcaf=True).mode() == "mmg_tcaf"


@pytest.mark.parametrize(
    "kwargs",
    [
        dict(epochs_stage1=0),
        dict(batch_size=0),
        dict(k_folds=1),
        dict(lr=0.0),
        dict(average_last=-1),
        dict(seed=-1),
    ],
)
def test_train_config_validation(kwargs):
    with pytest.raises(ValueError):
        fast_train_config(**kwargs).validate()


# -- PET assembly ----------------------------------------------------------


def _toy_generator(rng, residual_sd=0.0):
    model = MmgModel(rng, MmgConfig(codebook_size=8, d_code=4), volume_shape=(8, 8, 8))
    model.calib.affine.data[2] = residual_sd
    return model


def test_assemble_pet_keeps_acquired_volumes(small_subjects, rng):
    model = _toy_generator(rng)
    out = assemble_pet(small_subjects, model)
    assert out.shape == (len(small_subjects), 1, 8, 8, 8)
    for i, s in enumerate(small_subjects):
        if s.has_pet:
            np.testing.assert_array_equal(out[i, 0], s.pet)


def test_assemble_pet_zero_fills_without_generator(small_subjects):
    out = assemble_pet(small_subjects, None)
    for i, s in enumerate(small_subjects):
        if not s.has_pet:
            assert not out[i].any()


def test_assemble_pet_imputes_only_missing(small_subjects, rng):
    model = _toy_generator(rng)
    inst = Instrument()
    out = assemble_pet(small_subjects, model, instrument=inst)
    missing = [s.subject_id for s in small_subjects if not s.has_pet]
    assert inst.all_ids("imputed_ids") == missing
    assert len(missing) > 0
    gen_all = model.generate_pet(
        np.stack([s.mri for s in small_subjects])[:, None])
    for i, s in enumerate(small_subjects):
        if not s.has_pet:
            np.testing.assert_array_equal(out[i], gen_all[i])  # residual_sd 0


def test_assemble_pet_noise_matching_is_deterministic(small_subjects, rng):
    model = _toy_generator(rng, residual_sd=0.4)
    a = assemble_pet(small_subjects, model)
    b = assemble_pet(small_subjects, model)
    assert a.tobytes() == b.tobytes()
    # imputed volume = calibrated mean prediction + residual_sd * keyed noise
    i = next(i for i, s in enumerate(small_subjects) if not s.has_pet)
    gen = model.generate_pet(small_subjects[i].mri[None, None])[0, 0]
    want = gen + 0.4 * _imputation_noise(small_subjects[i].mri, (8, 8, 8))
    np.testing.assert_allclose(a[i, 0], want, atol=1e-6)


def test_imputation_noise_keyed_to_volume_bytes(rng):
    mri = rng.standard_normal((8, 8, 8)).astype(np.float32)
    n1 = _imputation_noise(mri, mri.shape)
    n2 = _imputation_noise(mri.copy(), mri.shape)
    assert n1.tobytes() == n2.tobytes()
    other = _imputation_noise(mri + 1e-3, mri.shape)
    assert n1.tobytes() != other.tobytes()
    assert abs(float(n1.mean())) < 0.1 and abs(float(n1.std()) - 1.0) < 0.1


# -- stage 1 ---------------------------------------------------------------


def test_train_mmg_needs_two_complete_subjects(small_subjects):
    starved = [dataclasses.replace(s, has_pet=False, pet=None) for s in small_subjects]
    with pytest.raises(ValueError, match="stage 1"):
        train_mmg(starved, fast_train_config())


def test_train_mmg_reconstruction_improves(small_subjects):
    cfg = fast_train_config(epochs_stage1=8)
    model, history = train_mmg(small_subjects, cfg)
    l1 = [row[1] for row in history]
    assert len(history) == 8
    assert l1[-1] < l1[0]
    # calibration was fitted after training
    assert float(model.calib.affine.data[1]) != 1.0 or float(model.calib.affine.data[0]) != 0.0


def test_train_mmg_is_deterministic(small_subjects):
    cfg = fast_train_config()
    m1, h1 = train_mmg(small_subjects, cfg)
    m2, h2 = train_mmg(small_subjects, cfg)
    assert h1 == h2
    for k, v in m1.state_dict().items():
        np.testing.assert_array_equal(v, m2.state_dict()[k])


# -- stage 2 ---------------------------------------------------------------


def test_train_fusion_never_touches_generator(small_subjects, rng):
    model = _toy_generator(rng)
    before = state_checksums(model.state_dict())
    inst = Instrument()
    train_fusion(small_subjects, fast_train_config(), model, instrument=inst)
    assert state_checksums(model.state_dict()) == before
    assert inst.events["mmg_checksums_before"] == inst.events["mmg_checksums_after"]


def test_train_fusion_sdm_off_leaves_trajectory_unchanged(
        small_subjects, monkeypatch):
    # with the triple term weighted zero the SDM values are reported but
    # must not influence training: replacing them with constants yields a
    # bitwise-identical parameter trajectory
    cfg = fast_train_config(loss=LossConfig(alpha_total=0.0))
    real = train_fusion(small_subjects, cfg, None)

    from trimodal.autograd import Tensor

    def fake_terms(feats, y, loss_cfg):
        z = Tensor(np.zeros((), dtype=np.float32))
        return z, z, z

    monkeypatch.setattr("trimodal.trainer._sdm_terms", fake_terms)
    stubbed = train_fusion(small_subjects, cfg, None)
    for k, v in real.model.state_dict().items():
        np.testing.assert_array_equal(v, stubbed.model.state_dict()[k])
    # focal column identical, sdm columns differ (reporting only)
    assert [r[2] for r in real.history] == [r[2] for r in stubbed.history]
    assert any(r[3] != 0.0 for r in real.history)


def test_evaluate_fusion_metric_row(small_subjects):
    cfg = fast_train_config(use_mmg=False)
    bundle = train_fusion(small_subjects, cfg, None)
    row = evaluate_fusion(bundle, small_subjects, None)
    for key in ("acc", "sen", "spe", "auc", "f1", "tp", "tn", "fp", "fn"):
        assert key in row
    assert 0.0 <= row["auc"] <= 1.0
    assert row["tp"] + row["tn"] + row["fp"] + row["fn"] == len(small_subjects)


# -- cross-validation ------------------------------------------------------


def test_single_fold_train_events_exclude_test_ids(small_subjects):
    cfg = fast_train_config()
    inst = Instrument()
    row = run_cv_single_fold(small_subjects, cfg, 0, instrument=inst)
    ids = [s.subject_id for s in small_subjects]
    labels = [s.label for s in small_subjects]
    test_ids = set(split_kfold(ids, cfg.k_folds, cfg.seed, labels=labels)[0])
    assert row["test_size"] == len(test_ids)
    for key in ("standardizer_ids", "mmg_batch", "fusion_batch", "imputed_ids"):
        seen = set(inst.all_ids(key))
        assert seen.isdisjoint(test_ids), f"{key} saw held-out subjects"
    # training still saw everything outside the held-out fold
    assert set(inst.all_ids("standardizer_ids")) == set(ids) - test_ids


def test_run_cv_report_structure_and_artifacts(small_subjects, tmp_path):
    cfg = fast_train_config()
    report = run_cv(small_subjects, cfg, out_dir=str(tmp_path))
    assert report["mode"] == "mmg_tcaf"
    assert report["k_folds"] == 2
    assert len(report["folds"]) == 2
    assert sum(r["test_size"] for r in report["folds"]) == len(small_subjects)
    for key in ("acc", "sen", "spe", "auc", "f1"):
        agg = report["aggregate"][key]
        assert 0.0 <= agg["mean"] <= 1.0 and agg["std"] >= 0.0

    on_disk = json.loads((tmp_path / "metrics_mmg_tcaf.json").read_text())
    assert on_disk == json.loads(json.dumps(report))  # same after round-trip
    for fold in (0, 1):
        d = tmp_path / f"fold_{fold}"
        for name in ("stage1_loss.csv", "stage2_loss.csv", "mmg.itck", "fusion.itck"):
            assert (d / name).exists(), f"missing {name} in fold_{fold}"


def test_run_cv_is_reproducible(small_subjects):
    cfg = fast_train_config(use_mmg=False, use_tcaf=False)  # cheapest mode
    r1 = run_cv(small_subjects, cfg)
    r2 = run_cv(small_subjects, cfg)
    assert r1 == r2
