"""Checkpoint persistence, the Trainer loop, and evaluation plumbing."""

import os
import struct

import numpy as np
import pytest

from canet import data
from canet.config import TrainConfig, serialize_config
from canet.model import CANet, ModelConfig
from canet.optim import SGD
from canet.train import (
    CKPT_MAGIC,
    Trainer,
    best_checkpoint_path,
    evaluate_checkpoint,
    forward_prob,
    load_checkpoint,
    predict,
    restore_model,
    restore_optimizer,
    save_checkpoint,
)


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    data.generate_synthetic(5, 32, 5, root)
    return root


def make_cfg(dataset, tmp_path, **kw):
    base = dict(
        shapes_dir=str(dataset / "shapes"),
        skeletons_dir=str(dataset / "skeletons"),
        split_ratio=0.8,
        split_seed=0,
        batch_size=2,
        total_steps=4,
        lr_max=0.01,
        eval_interval=2,
        checkpoint_path=str(tmp_path / "runs" / "net.ckpt"),
        model=ModelConfig(base_channels=2, attention_reduction=4, seed=1),
    )
    base.update(kw)
    return TrainConfig(**base)


def small_model(seed=1):
    return CANet(ModelConfig(base_channels=2, attention_reduction=4,
                             seed=seed))


def plain_cfg():
    return TrainConfig(model=ModelConfig(base_channels=2,
                                         attention_reduction=4, seed=1))


# ---------------------------------------------------------------------------
# checkpoint round trips


def test_checkpoint_roundtrip_bitwise(tmp_path):
    model = small_model()
    opt = SGD(model.named_parameters(), 0.9)
    for v in opt.velocity.values():
        v += np.random.default_rng(0).normal(size=v.shape).astype(np.float32)
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, plain_cfg(), model, opt, step=17, threshold=0.23)

    ckpt = load_checkpoint(path)
    assert ckpt.step == 17
    assert ckpt.threshold == pytest.approx(0.23)
    assert ckpt.config == plain_cfg()

    restored = restore_model(ckpt)
    for name, p in model.named_parameters().items():
        np.testing.assert_array_equal(
            restored.named_parameters()[name].data, p.data)
    for name, b in model.named_buffers().items():
        np.testing.assert_array_equal(
            restored.named_buffers()[name], b.astype(np.float32))
    ropt = restore_optimizer(ckpt, restored)
    for name, v in opt.velocity.items():
        np.testing.assert_array_equal(ropt.velocity[name], v)


def test_checkpoint_roundtrip_predictions(tmp_path):
    model = small_model(seed=4)
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, plain_cfg(), model, step=1)
    restored = restore_model(load_checkpoint(path))
    x = np.random.default_rng(8).random((32, 32)).astype(np.float32)
    np.testing.assert_array_equal(forward_prob(model, x),
                                  forward_prob(restored, x))


def test_checkpoint_without_optimizer_or_threshold(tmp_path):
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, plain_cfg(), small_model())
    ckpt = load_checkpoint(path)
    assert ckpt.step == 0
    assert ckpt.threshold is None
    assert not any(k.startswith("velocity/") for k in ckpt.tensors)
    model = restore_model(ckpt)
    opt = restore_optimizer(ckpt, model)  # fresh zero velocities
    assert all(not v.any() for v in opt.velocity.values())


def test_checkpoint_leaves_no_temp_files(tmp_path):
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, plain_cfg(), small_model())
    assert os.listdir(tmp_path) == ["net.ckpt"]


def test_best_checkpoint_path():
    assert best_checkpoint_path("runs/net.ckpt") == "runs/net.best.ckpt"
    assert best_checkpoint_path("net") == "net.best.ckpt"


# ---------------------------------------------------------------------------
# checkpoint error paths


def test_load_checkpoint_missing_file(tmp_path):
    with pytest.raises(IOError, match="cannot read checkpoint"):
        load_checkpoint(tmp_path / "absent.ckpt")


def test_load_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPTx" + b"\x00" * 40)
    with pytest.raises(IOError, match="not a checkpoint file"):
        load_checkpoint(path)


def test_load_checkpoint_bad_version(tmp_path):
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, plain_cfg(), small_model())
    blob = bytearray(path.read_bytes())
    blob[len(CKPT_MAGIC)] = 9
    path.write_bytes(bytes(blob))
    with pytest.raises(IOError, match="unsupported checkpoint version 9"):
        load_checkpoint(path)


def test_load_checkpoint_truncated(tmp_path):
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, plain_cfg(), small_model())
    blob = path.read_bytes()
    path.write_bytes(blob[: len(blob) // 2])
    with pytest.raises(IOError, match="truncated checkpoint"):
        load_checkpoint(path)


def test_load_checkpoint_duplicate_tensor(tmp_path):
    text = serialize_config(TrainConfig()).encode()
    entry = (struct.pack("<Q", 1) + b"x" + bytes([0]) + struct.pack("<Q", 1)
             + struct.pack("<Q", 1) + struct.pack("<f", 0.5))
    path = tmp_path / "dup.ckpt"
    path.write_bytes(CKPT_MAGIC + bytes([1]) + struct.pack("<Q", len(text))
                     + text + entry + entry)
    with pytest.raises(IOError, match="duplicate tensor 'x'"):
        load_checkpoint(path)


def test_load_checkpoint_unknown_dtype_code(tmp_path):
    text = serialize_config(TrainConfig()).encode()
    entry = (struct.pack("<Q", 1) + b"x" + bytes([7]) + struct.pack("<Q", 1)
             + struct.pack("<Q", 1) + struct.pack("<f", 0.5))
    path = tmp_path / "odd.ckpt"
    path.write_bytes(CKPT_MAGIC + bytes([1]) + struct.pack("<Q", len(text))
                     + text + entry)
    with pytest.raises(IOError, match="unknown tensor dtype code 7"):
        load_checkpoint(path)


def checkpoint_for_mutation(tmp_path):
    path = tmp_path / "net.ckpt"
    save_checkpoint(path, plain_cfg(), small_model(), step=1)
    return load_checkpoint(path)


def test_restore_model_unknown_tensor(tmp_path):
    ckpt = checkpoint_for_mutation(tmp_path)
    ckpt.tensors["bogus.weight"] = np.zeros((1,), dtype=np.float32)
    with pytest.raises(ValueError, match="'bogus.weight' does not match"):
        restore_model(ckpt)


def test_restore_model_missing_tensor(tmp_path):
    ckpt = checkpoint_for_mutation(tmp_path)
    del ckpt.tensors["head.weight"]
    with pytest.raises(ValueError, match="missing tensor 'head.weight'"):
        restore_model(ckpt)


def test_restore_model_extent_mismatch(tmp_path):
    ckpt = checkpoint_for_mutation(tmp_path)
    ckpt.tensors["head.weight"] = np.zeros((2, 2, 1, 1), dtype=np.float32)
    with pytest.raises(ValueError, match="extents"):
        restore_model(ckpt)


def test_restore_model_orphan_velocity(tmp_path):
    ckpt = checkpoint_for_mutation(tmp_path)
    ckpt.tensors["velocity/ghost"] = np.zeros((1,), dtype=np.float32)
    with pytest.raises(ValueError, match="velocity/ghost"):
        restore_model(ckpt)


# ---------------------------------------------------------------------------
# trainer behavior


def test_trainer_split_and_batch_epochs(dataset, tmp_path):
    tr = Trainer(make_cfg(dataset, tmp_path))
    assert len(tr.train_ids) == 4 and len(tr.test_ids) == 1
    first = tr._next_batch()
    second = tr._next_batch()
    # one epoch = one permutation of the train ids, chunked into batches
    assert sorted(first + second) == sorted(tr.train_ids)


def test_trainer_loss_trace_deterministic(dataset, tmp_path):
    runs = []
    for sub in ("a", "b"):
        tr = Trainer(make_cfg(dataset, tmp_path / sub))
        trace = []
        for step in range(3):
            value, lr, stems = tr.train_step(step)
            trace.append((value, lr, tuple(stems)))
        runs.append(trace)
    assert runs[0] == runs[1]  # exact equality, batches included


def test_trainer_rejects_non_finite_loss(dataset, tmp_path):
    tr = Trainer(make_cfg(dataset, tmp_path))
    tr.model.named_parameters()["head.weight"].data[:] = np.nan
    with pytest.raises(RuntimeError,
                       match=r"non-finite loss \(nan\) at step 3 on batch"):
        tr.train_step(3)


def test_trainer_rejects_mixed_extents(dataset, tmp_path):
    from canet import image

    shapes = tmp_path / "shapes"
    skels = tmp_path / "skeletons"
    shapes.mkdir()
    skels.mkdir()
    small = np.zeros((32, 32), dtype=bool)
    small[10:20, 10:20] = True
    big = np.zeros((48, 48), dtype=bool)
    big[10:30, 10:30] = True
    for stem, mask in (("a", small), ("b", big), ("c", small)):
        image.save_image(shapes / f"{stem}.pgm", mask)
        image.save_image(skels / f"{stem}.pgm",
                         image.zhang_suen_thinning(mask))
    cfg = make_cfg(tmp_path, tmp_path, split_ratio=0.7)
    tr = Trainer(cfg)
    tr.train_ids = ["a", "b"]
    with pytest.raises(ValueError, match="batch mixes image extents.*a, b"):
        tr.train_step(0)


def test_trainer_run_history_and_checkpoints(dataset, tmp_path):
    cfg = make_cfg(dataset, tmp_path)
    history = Trainer(cfg).run()
    assert history["steps_run"] == 4
    assert len(history["losses"]) == 4
    assert [e[0] for e in history["evals"]] == [1, 3]  # steps 2 and 4 (0-based)
    assert 0.0 <= history["best_f1"] <= 1.0
    final = load_checkpoint(cfg.checkpoint_path)
    assert final.step == 4
    assert final.threshold == pytest.approx(history["evals"][-1][1])
    assert os.path.exists(best_checkpoint_path(cfg.checkpoint_path))


def test_trainer_early_stop(dataset, tmp_path):
    cfg = make_cfg(dataset, tmp_path, total_steps=6, eval_interval=2)
    tr = Trainer(cfg)
    history = tr.run(early_stop_f1=0.0, early_stop_ids=tr.train_ids)
    assert history["steps_run"] == 2  # stopped at the first evaluation


def test_trainer_logs(dataset, tmp_path):
    lines = []
    Trainer(make_cfg(dataset, tmp_path), log=lines.append).run()
    assert any(line.startswith("step 0 lr ") for line in lines)
    assert any("split_test_f1" in line for line in lines)


# ---------------------------------------------------------------------------
# inference and evaluation helpers


def test_forward_prob_and_predict_agree():
    model = small_model(seed=2)
    mask = np.zeros((32, 32), dtype=bool)
    mask[8:24, 8:24] = True
    skeleton, prob = predict(model, "repaired_distance", mask, 0.5)
    assert prob.shape == (32, 32)
    assert prob.min() >= 0.0 and prob.max() <= 1.0
    np.testing.assert_array_equal(skeleton, prob >= 0.5)
    x = data.preprocess("repaired_distance", mask)
    np.testing.assert_array_equal(prob, forward_prob(model, x))


def test_evaluate_checkpoint_end_to_end(dataset, tmp_path):
    cfg = make_cfg(dataset, tmp_path, total_steps=2, eval_interval=2)
    Trainer(cfg).run()
    report = evaluate_checkpoint(cfg.checkpoint_path, cfg.shapes_dir,
                                 cfg.skeletons_dir)
    assert len(report.image_ids) == 5
    assert report.threshold in [i / 100 for i in range(1, 100)]
    fixed = evaluate_checkpoint(cfg.checkpoint_path, cfg.shapes_dir,
                                cfg.skeletons_dir, threshold=0.5)
    assert fixed.threshold == 0.5
