import dataclasses
import json

import numpy as np
import pytest
import torch

from ctpseg import trainer
from ctpseg.config import TrainConfig
from ctpseg.errors import (
    CaseValidationError,
    InputValidationError,
    TrainingDivergedError,
)
from ctpseg.volume_io import read_split


def small_samples(tiny_corpus, cfg, role="train"):
    return trainer.build_dataset(tiny_corpus, tiny_corpus / "split.txt", cfg, role)


def test_pad_or_crop_round_trip():
    rng = np.random.default_rng(0)
    arr = rng.random((3, 10, 14)).astype(np.float32)
    padded = trainer.pad_or_crop_2d(arr, (16, 16))
    assert padded.shape == (3, 16, 16)
    back = trainer.restore_2d(padded, (10, 14))
    np.testing.assert_array_equal(back, arr)

    cropped = trainer.pad_or_crop_2d(arr, (8, 8))
    assert cropped.shape == (3, 8, 8)
    back = trainer.restore_2d(cropped, (10, 14))
    assert back.shape == (3, 10, 14)
    np.testing.assert_array_equal(back[:, 1:9, 3:11], cropped)
    assert back[:, 0, :].sum() == 0  # padding ring restored as zeros

    mixed = trainer.pad_or_crop_2d(arr, (8, 16))
    assert mixed.shape == (3, 8, 16)


def test_preprocess_case(tiny_case, small_cfg):
    pre = trainer.preprocess_case(tiny_case, small_cfg)
    assert pre.maps.shape == (4, 3, 32, 32)
    assert pre.frames.shape == (small_cfg.n_frames, 3, 32, 32)
    assert pre.mip.shape == (3, 32, 32)
    assert pre.window is not None and pre.window.rule_derived
    for vol in (pre.maps, pre.frames, pre.mip, pre.dwi):
        assert vol.min() >= 0.0 and vol.max() <= 1.0
    assert pre.weights.min() >= 0.5
    assert pre.weights.max() == pytest.approx(small_cfg.fg_weight)


def test_write_preprocessed(tmp_path, tiny_case, small_cfg):
    pre = trainer.preprocess_case(tiny_case, small_cfg)
    trainer.write_preprocessed(tmp_path / "out", pre)
    assert (tmp_path / "out" / "mip.json").exists()
    assert (tmp_path / "out" / "frames.raw").exists()
    doc = json.loads((tmp_path / "out" / "window.json").read_text())
    assert doc["window_start"] == pre.window.start
    assert len(doc["frame_indices"]) == small_cfg.n_frames


def test_build_dataset_shapes(tiny_corpus, small_cfg):
    samples = small_samples(tiny_corpus, small_cfg)
    split = read_split(tiny_corpus / "split.txt")
    assert len(samples) == 3 * len(split["train"])  # 3 slices per case
    s = samples[0]
    assert s.maps.shape == (4, 32, 32)
    assert s.frames.shape == (small_cfg.n_frames, 32, 32)
    assert s.mip.shape == (1, 32, 32)
    assert s.dwi.shape == (1, 32, 32)
    assert s.mask.shape == (32, 32)
    assert s.weights.shape == (32, 32)
    assert all(t.dtype == torch.float32 for t in (s.maps, s.frames, s.dwi, s.mask))


def test_build_dataset_role_and_members(tiny_corpus, small_cfg, tmp_path):
    with pytest.raises(InputValidationError):
        small_samples(tiny_corpus, small_cfg, role="holdout")

    # a case stripped of its dwi cannot feed a synthesis wiring
    import shutil

    root = tmp_path / "nodwi"
    shutil.copytree(tiny_corpus, root)
    case_dir = root / read_split(root / "split.txt")["train"][0]
    (case_dir / "dwi.json").unlink()
    (case_dir / "dwi.raw").unlink()
    with pytest.raises(CaseValidationError):
        trainer.build_dataset(root, root / "split.txt", small_cfg, "train")
    fo = dataclasses.replace(small_cfg, wiring="f_o_only")
    trainer.build_dataset(root, root / "split.txt", fo, "train")


def test_segmenter_in_channels(small_cfg):
    channels = {
        "cta_only": small_cfg.n_frames,
        "f_o_only": 4,
        "pseudo_dwi_full": 1,
        "f_o_plus_pseudo": 5,
        "real_dwi": 1,
    }
    for wiring, expected in channels.items():
        cfg = dataclasses.replace(small_cfg, wiring=wiring)
        assert trainer.segmenter_in_channels(cfg) == expected


def test_bundle_wiring_forward(tiny_corpus, small_cfg):
    samples = small_samples(tiny_corpus, small_cfg)[:2]
    for wiring in ("cta_only", "f_o_only", "pseudo_dwi_full", "f_o_plus_pseudo", "real_dwi"):
        cfg = dataclasses.replace(small_cfg, wiring=wiring)
        bundle = trainer.ModelBundle.build(cfg)
        synthesis = trainer.needs_synthesis(wiring)
        assert (bundle.extractor is not None) == synthesis
        assert (bundle.generator is not None) == synthesis
        assert (bundle.context is not None) == synthesis
        probs, pseudo, high = bundle.forward(trainer._collate(samples))
        assert probs.shape == (2, 2, 32, 32)
        if synthesis:
            assert pseudo.shape == (2, 1, 32, 32)
            assert high.shape == (2, 1, 32, 32)
        else:
            assert pseudo is None and high is None


def test_first_step_deterministic(tiny_corpus, small_cfg, tmp_path):
    samples = small_samples(tiny_corpus, small_cfg)
    runs = []
    for tag in ("a", "b"):
        res = trainer.train(small_cfg, samples, out_dir=tmp_path / tag, max_steps=2)
        runs.append(res.breakdowns)
    assert runs[0][0] == runs[1][0]
    assert runs[0][1] == runs[1][1]


def test_train_log_and_result(tiny_corpus, small_cfg, tmp_path):
    samples = small_samples(tiny_corpus, small_cfg)
    val = small_samples(tiny_corpus, small_cfg, "val")
    res = trainer.train(small_cfg, samples, val, out_dir=tmp_path, max_steps=5)
    assert res.steps == 5
    assert len(res.breakdowns) == 5
    lines = res.log_path.read_text().splitlines()
    assert lines[0].split(",") == list(trainer.LOG_COLUMNS)
    assert len(lines) == 6
    first = lines[1].split(",")
    assert first[0] == "1" and first[1] == "1"
    assert float(first[2]) == res.breakdowns[0].total
    assert res.last_checkpoint.with_suffix(".json").exists()
    assert res.best_checkpoint is not None
    assert 0.0 <= res.best_val_dice <= 1.0


def test_train_empty_split_rejected(small_cfg, tmp_path):
    with pytest.raises(InputValidationError):
        trainer.train(small_cfg, [], out_dir=tmp_path)


def test_divergence_guard(tiny_corpus, small_cfg, tmp_path):
    cfg = dataclasses.replace(small_cfg, wiring="f_o_only")
    samples = small_samples(tiny_corpus, cfg)
    samples[0].maps[0, 0, 0] = float("nan")
    # one full epoch visits every sample regardless of shuffle order
    with pytest.raises(TrainingDivergedError):
        trainer.train(cfg, samples, out_dir=tmp_path, max_steps=len(samples))


def test_descent_on_fixed_batch(tiny_corpus, small_cfg):
    # one small-lr RMSprop step in double precision strictly decreases the loss
    cfg = dataclasses.replace(small_cfg, lr=1e-4)
    samples = small_samples(tiny_corpus, cfg)[:2]
    bundle = trainer.ModelBundle.build(cfg)
    for _, model in bundle.named_models():
        model.double()
    batch = trainer._collate(samples)
    batch = {k: v.double() if v is not None else None for k, v in batch.items()}
    bundle.train_mode()
    optimizer = trainer._make_optimizer(bundle, [t for t, _ in bundle.named_models()], cfg.lr)
    total, before = trainer._step_loss(bundle, batch, None)
    optimizer.zero_grad()
    total.backward()
    optimizer.step()
    with torch.no_grad():
        _, after = trainer._step_loss(bundle, batch, None)
    assert after.total < before.total


def test_stage_schedule():
    cfg = TrainConfig(epochs=9, lr_decay_epoch=5, crop_size=(32, 32), depth=2)
    stages = [trainer._stage_of_epoch(cfg, e) for e in range(1, 10)]
    assert stages == [1, 1, 1, 2, 2, 2, 3, 3, 3]


def test_staged_training_runs_and_freezes(tiny_corpus, small_cfg, tmp_path):
    cfg = dataclasses.replace(small_cfg, mode="staged", epochs=3, lr_decay_epoch=2, batch_size=6)
    samples = small_samples(tiny_corpus, cfg)
    bundle_before = trainer.ModelBundle.build(cfg)
    res = trainer.train(cfg, samples, out_dir=tmp_path)
    assert res.steps == 6  # 9 samples, batch 6 -> 2 steps/epoch, 3 epochs

    # stage 1 trains only the extractor: its first-epoch rows carry extract only
    first = res.breakdowns[0]
    assert first.extract > 0 and first.seg == 0 and first.synth == 0
    mid = res.breakdowns[2]
    assert mid.synth > 0 and mid.extract == 0 and mid.seg == 0
    last = res.breakdowns[-1]
    assert last.seg > 0 and last.synth == 0 and last.extract == 0

    # the segmenter kept its init through stages 1 and 2, then moved in stage 3
    init_state = bundle_before.segmenter.state_dict()
    final_state = res.bundle.segmenter.state_dict()
    moved = any(
        not torch.equal(init_state[k], final_state[k])
        for k in init_state
        if init_state[k].dtype.is_floating_point
    )
    assert moved


def test_staged_mode_without_synthesis(tiny_corpus, small_cfg, tmp_path):
    cfg = dataclasses.replace(small_cfg, mode="staged", wiring="f_o_only")
    samples = small_samples(tiny_corpus, cfg)
    res = trainer.train(cfg, samples, out_dir=tmp_path, max_steps=3)
    assert all(b.seg > 0 for b in res.breakdowns)


def test_checkpoint_round_trip(tiny_corpus, small_cfg, tmp_path):
    samples = small_samples(tiny_corpus, small_cfg)
    res = trainer.train(small_cfg, samples, out_dir=tmp_path / "run", max_steps=3)
    bundle, manifest = trainer.load_checkpoint(res.last_checkpoint)
    assert manifest["epoch"] >= 1
    assert manifest["config"]["base_ch"] == small_cfg.base_ch
    for (tag_a, model_a), (tag_b, model_b) in zip(
        res.bundle.named_models(), bundle.named_models()
    ):
        assert tag_a == tag_b
        state_a, state_b = model_a.state_dict(), model_b.state_dict()
        assert set(state_a) == set(state_b)
        for key in state_a:
            assert torch.equal(state_a[key], state_b[key]), f"{tag_a}.{key}"
            assert state_a[key].dtype == state_b[key].dtype


def test_checkpoint_rejects_corruption(tiny_corpus, small_cfg, tmp_path):
    samples = small_samples(tiny_corpus, small_cfg)
    res = trainer.train(small_cfg, samples, out_dir=tmp_path, max_steps=1)
    base = res.last_checkpoint
    with pytest.raises(InputValidationError):
        trainer.load_checkpoint(tmp_path / "absent")

    manifest = json.loads(base.with_suffix(".json").read_text())
    manifest["arrays"] = manifest["arrays"][:-1]
    base.with_suffix(".json").write_text(json.dumps(manifest))
    with pytest.raises(InputValidationError):
        trainer.load_checkpoint(base)

    manifest["format"] = 99
    base.with_suffix(".json").write_text(json.dumps(manifest))
    with pytest.raises(InputValidationError):
        trainer.load_checkpoint(base)


def test_predict_shapes_and_determinism(tiny_corpus, small_cfg, tiny_case, tmp_path):
    samples = small_samples(tiny_corpus, small_cfg)
    res = trainer.train(small_cfg, samples, out_dir=tmp_path, max_steps=3)
    pseudo, seg = trainer.predict(res.bundle, tiny_case)
    assert seg.shape == tiny_case.shape
    assert pseudo.shape == tiny_case.shape
    assert set(np.unique(seg)) <= {0.0, 1.0}
    assert pseudo.min() >= 0.0 and pseudo.max() <= 1.0

    bundle, _ = trainer.load_checkpoint(res.last_checkpoint)
    pseudo2, seg2 = trainer.predict(bundle, tiny_case)
    np.testing.assert_array_equal(seg, seg2)
    np.testing.assert_array_equal(pseudo, pseudo2)


def test_predict_crop_restores_original_dims(tiny_corpus, small_cfg, tiny_case, tmp_path):
    # crop smaller than the case: prediction is padded back out with zeros
    cfg = dataclasses.replace(small_cfg, crop_size=(16, 16))
    samples = small_samples(tiny_corpus, cfg)
    res = trainer.train(cfg, samples, out_dir=tmp_path, max_steps=2)
    pseudo, seg = trainer.predict(res.bundle, tiny_case)
    assert seg.shape == tiny_case.shape
    assert seg[:, :8, :].sum() == 0  # outside the centered crop

    bigger = dataclasses.replace(small_cfg, crop_size=(48, 48))
    samples = trainer.build_dataset(
        tiny_corpus, tiny_corpus / "split.txt", bigger, "train"
    )
    res = trainer.train(bigger, samples, out_dir=tmp_path / "b", max_steps=2)
    _, seg = trainer.predict(res.bundle, tiny_case)
    assert seg.shape == tiny_case.shape


def test_predict_wiring_constraints(tiny_corpus, small_cfg, tiny_case):
    cfg = dataclasses.replace(small_cfg, wiring="f_o_only")
    bundle = trainer.ModelBundle.build(cfg)
    pseudo, seg = trainer.predict(bundle, tiny_case)
    assert pseudo is None and seg.shape == tiny_case.shape

    stripped = dataclasses.replace(tiny_case, cta=None)
    with pytest.raises(CaseValidationError):
        trainer.predict(trainer.ModelBundle.build(small_cfg), stripped)
