"""Checkpoint container: bitwise round trips and malformed-input rejection."""

import struct

import numpy as np
import pytest

from prilora.checkpoint import FORMAT_VERSION, MAGIC, capture_state, restore_state
from prilora.errors import FormatError
from prilora.model import ModelDims, ToyModel
from prilora.numerics import Rng
from prilora.prune_engine import EmaState
from prilora.rank_plan import linear_plan, uniform_plan
from prilora.train_harness import make_optimizer

DIMS = ModelDims(num_layers=2, d_model=16, num_heads=2, d_ff=32,
                 vocab_size=8, seq_len=8, num_outputs=2)


def fresh(plan=None, seed=3):
    plan = plan or linear_plan(2, 2, 4)
    model = ToyModel.build(DIMS, plan, Rng(seed).child("model"))
    optimizer = make_optimizer("adam", model.trainable())
    return model, optimizer


def populated_state(seed=3):
    """A model with distinctive values in every saved slot."""
    model, optimizer = fresh(seed=seed)
    rng = Rng(1000 + seed)
    model.head_w.data[...] = rng.child("hw").normal(model.head_w.shape)
    for name, pair in model.adapters.items():
        pair.B.data[...] = rng.child(f"b/{name}").normal(pair.B.shape)
    # take real optimizer steps so the moment buffers are nonzero
    for _ in range(3):
        for t in model.trainable().values():
            t.grad = rng.child("g").normal(t.shape)
        optimizer.step(1e-3)
    ema_input = {
        name: EmaState(np.abs(rng.child(f"e/{name}").normal((pair.d2,))))
        for name, pair in model.adapters.items()
    }
    ema_latent = {}
    rngs = {"data": Rng(7).child("data"), "prune": Rng(7).child("prune")}
    rngs["data"].integers(0, 100, size=13)  # advance the stream position
    return model, optimizer, ema_input, ema_latent, rngs


def make_blob(step=0):
    model, optimizer, ema_i, ema_l, rngs = populated_state()
    return capture_state(model, optimizer, ema_i, ema_l, step, rngs)


def test_blob_leads_with_magic_and_version():
    blob = make_blob()
    assert blob[:4] == MAGIC
    assert struct.unpack_from("<I", blob, 4)[0] == FORMAT_VERSION


def test_save_load_save_is_bitwise():
    model, optimizer, ema_i, ema_l, rngs = populated_state()
    blob = capture_state(model, optimizer, ema_i, ema_l, 17, rngs)

    model2, optimizer2 = fresh()
    ema_i2: dict = {}
    ema_l2: dict = {}
    rngs2 = {"data": Rng(7).child("data"), "prune": Rng(7).child("prune")}
    step = restore_state(blob, model2, optimizer2, ema_i2, ema_l2, rngs2)
    assert step == 17
    assert capture_state(model2, optimizer2, ema_i2, ema_l2, 17, rngs2) == blob


def test_restore_rehydrates_every_slot():
    model, optimizer, ema_i, ema_l, rngs = populated_state()
    blob = capture_state(model, optimizer, ema_i, ema_l, 5, rngs)

    model2, optimizer2 = fresh(seed=4)  # different init, same layout
    ema_i2: dict = {}
    rngs2 = {"data": Rng(9).child("data")}
    restore_state(blob, model2, optimizer2, ema_i2, {}, rngs2)

    for name, t in model.trainable().items():
        assert np.array_equal(t.data, model2.trainable()[name].data), name
    assert optimizer2.t == optimizer.t
    for k in optimizer.m:
        assert np.array_equal(optimizer.m[k], optimizer2.m[k])
        assert np.array_equal(optimizer.v[k], optimizer2.v[k])
    assert set(ema_i2) == set(ema_i)
    for name in ema_i:
        assert np.array_equal(ema_i2[name].xbar, ema_i[name].xbar)
        assert ema_i2[name].decay == ema_i[name].decay
    # the restored stream continues exactly where the saved one paused
    assert np.array_equal(rngs["data"].integers(0, 1000, size=8),
                          rngs2["data"].integers(0, 1000, size=8))


def test_restore_does_not_rebind_tensors():
    model, optimizer, ema_i, ema_l, rngs = populated_state()
    blob = capture_state(model, optimizer, ema_i, ema_l, 5, rngs)
    model2, optimizer2 = fresh()
    held = model2.adapters["blocks.0.wq"].A
    restore_state(blob, model2, optimizer2, {}, {}, {})
    assert model2.adapters["blocks.0.wq"].A is held


def test_bad_magic_rejected():
    blob = make_blob()
    with pytest.raises(FormatError):
        restore_state(b"XXXX" + blob[4:], *fresh(), {}, {}, {})


def test_unknown_version_rejected():
    blob = bytearray(make_blob())
    struct.pack_into("<I", blob, 4, 99)
    with pytest.raises(FormatError):
        restore_state(bytes(blob), *fresh(), {}, {}, {})


def test_truncated_payload_rejected():
    blob = make_blob()
    with pytest.raises(FormatError):
        restore_state(blob[:-9], *fresh(), {}, {}, {})
    with pytest.raises(FormatError):
        restore_state(blob[:10], *fresh(), {}, {}, {})


def test_trailing_bytes_rejected():
    blob = make_blob()
    with pytest.raises(FormatError):
        restore_state(blob + b"\x00", *fresh(), {}, {}, {})


def test_corrupt_header_rejected():
    blob = bytearray(make_blob())
    blob[16] = 0xFF  # header starts right after the fixed prefix
    with pytest.raises(FormatError):
        restore_state(bytes(blob), *fresh(), {}, {}, {})


def test_plan_mismatch_rejected():
    blob = make_blob()
    other = ToyModel.build(DIMS, uniform_plan(2, 3), Rng(3).child("model"))
    with pytest.raises(FormatError):
        restore_state(blob, other, make_optimizer("adam", other.trainable()), {}, {}, {})


def test_adapter_set_mismatch_rejected():
    blob = make_blob()
    other = ToyModel.build(DIMS, linear_plan(2, 2, 4), Rng(3).child("model"),
                           adapt_kinds=("wq", "wv"))
    with pytest.raises(FormatError):
        restore_state(blob, other, make_optimizer("adam", other.trainable()), {}, {}, {})


def test_optimizer_kind_mismatch_rejected():
    model, optimizer, ema_i, ema_l, rngs = populated_state()
    blob = capture_state(model, optimizer, ema_i, ema_l, 0, rngs)
    model2, _ = fresh()
    from prilora.errors import ConfigError

    with pytest.raises(ConfigError):
        restore_state(blob, model2, make_optimizer("sgd", model2.trainable()), {}, {}, {})
