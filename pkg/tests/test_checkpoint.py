from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from shiftlab import adapters as A
from shiftlab.adapters import AdapterKind
from shiftlab.backbone import Backbone
from shiftlab.checkpoint import decode, encode, load_checkpoint, load_model, save_checkpoint, save_model
from shiftlab.errors import ChecksumError, CheckpointError

from .conftest import TINY, grid_batch, jitter


def test_header_layout():
    blob = encode({"a": np.arange(6, dtype=np.float32).reshape(2, 3)})
    assert blob[:4] == b"RZ3D"
    assert int.from_bytes(blob[4:8], "little") == 1
    assert int.from_bytes(blob[8:12], "little") == 1
    assert int.from_bytes(blob[12:16], "little") == 1 and blob[16:17] == b"a"
    assert int.from_bytes(blob[17:21], "little") == 2
    # 12 header bytes + 4 + 1 + 4 + 2*4 dims + 6*4 data + 4 crc
    assert len(blob) == 12 + 4 + 1 + 4 + 8 + 24 + 4


names = st.text(st.characters(min_codepoint=97, max_codepoint=122), min_size=1, max_size=12)
arrays = hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                    elements=st.floats(-1e6, 1e6, width=32))


@settings(max_examples=50, deadline=None)
@given(st.dictionaries(names, arrays, max_size=5))
def test_roundtrip_bit_exact(state):
    out = decode(encode(state))
    assert out.keys() == state.keys()
    for k in state:
        assert out[k].shape == state[k].shape
        assert out[k].tobytes() == state[k].tobytes()
    assert encode(out) == encode(state)


def test_save_load_save_is_byte_identical(tmp_path):
    m = jitter(Backbone(TINY, seed=0))
    A.attach(m, AdapterKind.SHIFTER, np.random.default_rng(0), rank=4)
    save_model(tmp_path / "a.rz3d", m)
    save_checkpoint(tmp_path / "b.rz3d", load_checkpoint(tmp_path / "a.rz3d"))
    assert (tmp_path / "a.rz3d").read_bytes() == (tmp_path / "b.rz3d").read_bytes()


def test_crc_and_format_errors(tmp_path):
    blob = bytearray(encode({"w": np.ones(4, np.float32)}))
    blob[-8] ^= 0x01
    with pytest.raises(ChecksumError):
        decode(bytes(blob))
    with pytest.raises(CheckpointError):
        decode(b"NOPE" + bytes(blob[4:]))
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.rz3d")
    with pytest.raises(CheckpointError):
        decode(b"RZ3D")


def test_partial_load_by_name():
    state = {"a": np.zeros(2, np.float32), "b": np.ones(3, np.float32)}
    assert list(decode(encode(state), names=["b"])) == ["b"]
    with pytest.raises(CheckpointError):
        decode(encode(state), names=["c"])


@pytest.mark.parametrize("kinds", [(), (AdapterKind.SHIFTER,), (AdapterKind.LORA, AdapterKind.SPATIAL),
                                   (AdapterKind.SWITCHER, AdapterKind.LINEAR)])
def test_load_model_restores_adapters(tmp_path, kinds):
    m = Backbone(TINY, seed=0)
    for k in kinds:
        A.attach(m, k, np.random.default_rng(1), rank=4, switch_dim=6)
    jitter(m, seed=2)
    save_model(tmp_path / "m.rz3d", m)
    m2 = load_model(tmp_path / "m.rz3d", TINY)
    assert [A.is_attached(m2, k) for k in kinds] == [True] * len(kinds)
    x, c = grid_batch(TINY, 2)
    kw = {"switch_domain": "real"} if AdapterKind.SWITCHER in kinds else {}
    if AdapterKind.SHIFTER in kinds:
        kw["plan"] = ["syn"] * TINY.n_blocks
    np.testing.assert_array_equal(m(x, 500, [0, 1], c, **kw).data, m2(x, 500, [0, 1], c, **kw).data)
