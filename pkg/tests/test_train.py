import csv
import os
import struct
import sys
import tempfile

import numpy as np
import pytest

from nanotfm import checkpoint as ckpt_io
from nanotfm import tensor as T
from nanotfm.model import ModelConfig, NanoTabPFNModel
from nanotfm.prior import PriorDumpDataLoader, SyntheticPriorConfig, write_dump
from nanotfm.train import (
    TrainConfig,
    TrainingDiverged,
    batch_loss,
    load_training_checkpoint,
    make_optimizer,
    save_training_checkpoint,
    train,
)

# the package re-exports ``train`` the function under the submodule's name
TRAIN_MODULE = sys.modules["nanotfm.train"]

TINY = ModelConfig(embedding_size=8, num_attention_heads=2, mlp_hidden_size=16, num_layers=2, num_outputs=2)


@pytest.fixture(scope="module")
def dump(tmp_path_factory):
    path = tmp_path_factory.mktemp("train") / "d.h5"
    write_dump(path, SyntheticPriorConfig(rows=24, cols=3, seed=1), 64)
    return path


@pytest.fixture
def deterministic():
    T.set_deterministic(True)
    yield
    T.set_deterministic(False)


def run(dump, steps, seed=0, batch_size=4, model_seed=0, **kw):
    model = NanoTabPFNModel(TINY, seed=model_seed)
    loader = PriorDumpDataLoader(dump, steps, batch_size, seed=seed)
    cfg = TrainConfig(num_steps=steps, batch_size=batch_size, seed=seed, warmup_steps=5, **kw)
    try:
        return train(model, loader, cfg)
    finally:
        loader.close()


def test_train_config_defaults():
    c = TrainConfig()
    assert (c.lr, c.num_steps, c.batch_size, c.warmup_steps) == (4e-3, 2500, 32, 100)
    assert (c.beta1, c.beta2, c.eps, c.weight_decay) == (0.9, 0.999, 1e-8, 0.0)


@pytest.mark.parametrize("kw", [dict(lr=0.0), dict(beta1=1.0), dict(beta2=-0.1), dict(batch_size=6, grad_accum=4)])
def test_train_config_validation(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_history_length_and_returned_weights(dump):
    model, hist = run(dump, 12)
    assert len(hist) == 12 and hist.steps == list(range(1, 13))
    assert all(np.isfinite(hist.losses))
    assert all(b > a for a, b in zip(hist.seconds, hist.seconds[1:]))


def test_train_accepts_keyword_overrides(dump):
    model = NanoTabPFNModel(TINY)
    loader = PriorDumpDataLoader(dump, 3, 4)
    _, hist = train(model, loader, lr=1e-3)
    assert len(hist) == 3
    loader.close()


def test_model_holds_averaged_iterate(dump):
    model = NanoTabPFNModel(TINY, seed=0)
    loader = PriorDumpDataLoader(dump, 6, 4)
    seen = {}
    train(model, loader, TrainConfig(num_steps=6, batch_size=4), callback=lambda s, m, o, t: seen.update(x=o.averaged()))
    for name, p in model.params.items():
        assert np.array_equal(p.data, seen["x"][name])
    loader.close()


def test_gradients_are_taken_at_interpolated_point(dump, monkeypatch):
    probe = "layers.1.mlp.b2"
    at_grad, after = [], []
    original = batch_loss

    def instrumented(model, batch, grad_accum=1):
        at_grad.append(model.params[probe].data.copy())
        return original(model, batch, grad_accum)

    def record(step, model, opt, seconds):
        after.append((opt.eval_point(probe), opt.x[probe].copy(), opt.z[probe].copy()))

    monkeypatch.setattr(TRAIN_MODULE, "batch_loss", instrumented)
    model = NanoTabPFNModel(TINY)
    loader = PriorDumpDataLoader(dump, 8, 4)
    train(model, loader, TrainConfig(num_steps=8, batch_size=4, warmup_steps=2), callback=record)
    loader.close()
    assert not at_grad[0].any()  # step 1 starts from the initial (zero) bias
    for t in range(1, 8):
        y, x, z = after[t - 1]
        assert np.array_equal(at_grad[t], y)
        if t >= 2:  # after step 1, c = 1 makes x, z and y coincide
            assert not np.array_equal(at_grad[t], x) and not np.array_equal(at_grad[t], z)


def test_grad_accumulation_matches_full_batch(dump):
    T.set_default_dtype("float64")
    try:
        model = NanoTabPFNModel(TINY, seed=1, dtype=np.float64)
        loader = PriorDumpDataLoader(dump, 1, 8, prefetch=0)
        batch = loader.batch_at(0)
        grads = []
        for accum in (1, 4):
            model.zero_grad()
            batch_loss(model, batch, accum)
            grads.append({k: p.grad.copy() for k, p in model.params.items()})
        for k in grads[0]:
            assert np.allclose(grads[0][k], grads[1][k], rtol=1e-9, atol=1e-12)
        loader.close()
    finally:
        T.set_default_dtype("float32")


def test_deterministic_runs_are_bit_identical(dump, tmp_path, deterministic):
    files = []
    for i in range(2):
        model = NanoTabPFNModel(TINY, seed=5)
        loader = PriorDumpDataLoader(dump, 30, 4, seed=5)
        path = tmp_path / f"run{i}.ckpt"
        _, hist = train(model, loader, TrainConfig(num_steps=30, batch_size=4, seed=5), checkpoint_path=path)
        loader.close()
        files.append((hist.losses, path.read_bytes()))
    assert files[0][0] == files[1][0]
    assert files[0][1] == files[1][1]


def test_resume_continues_identical_trajectory(dump, tmp_path, deterministic):
    cfg = TrainConfig(num_steps=40, batch_size=4, seed=2, warmup_steps=5)
    model = NanoTabPFNModel(TINY, seed=2)
    loader = PriorDumpDataLoader(dump, 40, 4, seed=2)
    _, straight = train(model, loader, cfg, checkpoint_path=tmp_path / "straight.ckpt")
    loader.close()

    half = TrainConfig(**{**cfg.to_dict(), "num_steps": 20})
    model = NanoTabPFNModel(TINY, seed=2)
    loader = PriorDumpDataLoader(dump, 20, 4, seed=2)
    _, first = train(model, loader, half, checkpoint_path=tmp_path / "half.ckpt")
    loader.close()

    model, opt, _ = load_training_checkpoint(tmp_path / "half.ckpt")
    assert opt.t == 20
    loader = PriorDumpDataLoader(dump, 40, 4, seed=2)
    _, second = train(model, loader, cfg, optimizer=opt, checkpoint_path=tmp_path / "resumed.ckpt")
    loader.close()
    assert second.steps[0] == 21
    assert first.losses + second.losses == straight.losses
    assert (tmp_path / "resumed.ckpt").read_bytes() == (tmp_path / "straight.ckpt").read_bytes()


def test_loss_csv(dump, tmp_path):
    model = NanoTabPFNModel(TINY)
    loader = PriorDumpDataLoader(dump, 5, 4)
    train(model, loader, TrainConfig(num_steps=5, batch_size=4), loss_csv=tmp_path / "loss.csv")
    loader.close()
    rows = list(csv.reader(open(tmp_path / "loss.csv")))
    assert rows[0] == ["step", "loss", "cumulative_seconds"]
    assert [int(r[0]) for r in rows[1:]] == [1, 2, 3, 4, 5]


def test_loader_exhaustion_and_mismatch_errors(dump):
    model = NanoTabPFNModel(TINY)
    loader = PriorDumpDataLoader(dump, 3, 4)
    with pytest.raises(ValueError, match="num_steps"):
        train(model, loader, TrainConfig(num_steps=5, batch_size=4))
    with pytest.raises(ValueError, match="batch_size"):
        train(model, loader, TrainConfig(num_steps=3, batch_size=8))
    three = NanoTabPFNModel(ModelConfig(**{**TINY.to_dict(), "num_outputs": 1}))
    with pytest.raises(ValueError, match="classes"):
        train(three, loader, TrainConfig(num_steps=3, batch_size=4))
    loader.close()


def test_divergence_aborts_and_keeps_last_good_checkpoint(dump, tmp_path):
    path = tmp_path / "c.ckpt"

    def poison(step, model, opt, seconds):
        if step == 5:
            model.params["decoder.W2"].data[...] = np.nan

    model = NanoTabPFNModel(TINY)
    loader = PriorDumpDataLoader(dump, 10, 4)
    with pytest.raises(FloatingPointError):
        train(model, loader, TrainConfig(num_steps=10, batch_size=4, checkpoint_every=2), callback=poison,
              checkpoint_path=path)
    loader.close()
    c = ckpt_io.load(path)
    assert c.step == 4
    assert all(np.isfinite(a).all() for a in c.params.values())


def test_training_diverged_reports_step():
    err = TrainingDiverged(7, float("nan"))
    assert err.step == 7 and "step 7" in str(err)


def test_smoothed_loss_decreases():
    # default prior shape, a small model, 500 steps, 3 seeds
    cfg = ModelConfig(embedding_size=16, num_attention_heads=2, mlp_hidden_size=32, num_layers=1)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "p.h5")
        write_dump(path, SyntheticPriorConfig(), 2000)
        for seed in range(3):
            model = NanoTabPFNModel(cfg, seed=seed)
            loader = PriorDumpDataLoader(path, 500, 8, seed=seed)
            _, hist = train(model, loader, TrainConfig(num_steps=500, batch_size=8, seed=seed))
            loader.close()
            losses = np.array(hist.losses)
            assert losses[450:500].mean() < losses[0:50].mean()


# --- checkpoint format ------------------------------------------------------------------------

def test_model_checkpoint_round_trip(tmp_path):
    model = NanoTabPFNModel(TINY, seed=3)
    ckpt_io.save(tmp_path / "m.ckpt", TINY.to_dict(), model.state_dict())
    c = ckpt_io.load(tmp_path / "m.ckpt")
    assert not c.is_training and ModelConfig.from_dict(c.model_config) == TINY
    assert list(c.params) == list(model.params)
    for k, v in model.state_dict().items():
        assert np.array_equal(c.params[k], v) and c.params[k].dtype == np.float32


def test_training_checkpoint_round_trip(dump, tmp_path):
    model = NanoTabPFNModel(TINY)
    loader = PriorDumpDataLoader(dump, 4, 4)
    cfg = TrainConfig(num_steps=4, batch_size=4)
    opt = make_optimizer(model, cfg)
    _, _ = train(model, loader, cfg, optimizer=opt)
    loader.close()
    save_training_checkpoint(tmp_path / "t.ckpt", model, opt, cfg)
    m2, o2, c2 = load_training_checkpoint(tmp_path / "t.ckpt")
    assert c2 == cfg and o2.t == 4 and o2.gamma_sq_sum == opt.gamma_sq_sum
    for k in opt.z:
        assert np.array_equal(o2.z[k], opt.z[k]) and np.array_equal(o2.x[k], opt.x[k])
        assert np.array_equal(o2.v[k], opt.v[k])


def test_checkpoint_header_layout(tmp_path):
    ckpt_io.save(tmp_path / "m.ckpt", TINY.to_dict(), {"a": np.arange(6, dtype=np.float32).reshape(2, 3)})
    raw = (tmp_path / "m.ckpt").read_bytes()
    assert raw[:4] == b"NTPF"
    assert struct.unpack("<II", raw[4:12]) == (1, 0)
    n = struct.unpack("<I", raw[12:16])[0]
    assert raw[16 : 16 + n].startswith(b"{")
    tail = raw[16 + n :]
    assert struct.unpack("<II", tail[:8]) == (1, 1)
    assert tail[8:9] == b"a" and struct.unpack("<III", tail[9:21]) == (2, 2, 3)
    assert np.array_equal(np.frombuffer(tail[21:], "<f4"), np.arange(6))


@pytest.mark.parametrize("mutate", ["truncate", "magic", "version", "trailing"])
def test_corrupt_checkpoints_are_rejected(tmp_path, mutate):
    model = NanoTabPFNModel(TINY)
    path = tmp_path / "m.ckpt"
    ckpt_io.save(path, TINY.to_dict(), model.state_dict())
    raw = bytearray(path.read_bytes())
    if mutate == "truncate":
        raw = raw[: len(raw) // 2]
    elif mutate == "magic":
        raw[:4] = b"XXXX"
    elif mutate == "version":
        raw[4:8] = struct.pack("<I", 9)
    else:
        raw += b"\0"
    path.write_bytes(bytes(raw))
    with pytest.raises(ckpt_io.CheckpointFormatError):
        ckpt_io.load(path)


def test_every_truncation_is_detected(dump, tmp_path):
    model = NanoTabPFNModel(ModelConfig(embedding_size=2, num_attention_heads=1, mlp_hidden_size=2, num_layers=1))
    loader = PriorDumpDataLoader(dump, 2, 4)
    cfg = TrainConfig(num_steps=2, batch_size=4)
    opt = make_optimizer(model, cfg)
    train(model, loader, cfg, optimizer=opt)
    loader.close()
    path = tmp_path / "t.ckpt"
    save_training_checkpoint(path, model, opt, cfg)
    raw = path.read_bytes()
    for cut in range(0, len(raw), 7):
        path.write_bytes(raw[:cut])
        with pytest.raises(ckpt_io.CheckpointFormatError):
            load_training_checkpoint(path)


def test_model_only_checkpoint_cannot_resume(tmp_path):
    ckpt_io.save(tmp_path / "m.ckpt", TINY.to_dict(), NanoTabPFNModel(TINY).state_dict())
    with pytest.raises(ckpt_io.CheckpointFormatError, match="resumed"):
        load_training_checkpoint(tmp_path / "m.ckpt")
