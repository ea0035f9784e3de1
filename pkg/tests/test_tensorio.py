import struct

import numpy as np
import pytest

from deltaedit.errors import FormatError
from deltaedit.tensorio import (
    decode_tensor,
    encode_tensor,
    load_checkpoint,
    load_tensor,
    save_checkpoint,
    save_tensor,
)


def test_f32t_layout_is_byte_exact():
    arr = np.arange(6, dtype=np.float32).reshape(2, 3)
    payload = encode_tensor(arr)
    assert payload[:4] == b"F32T"
    assert payload[4] == 1
    assert struct.unpack("<I", payload[5:9]) == (2,)
    assert struct.unpack("<II", payload[9:17]) == (2, 3)
    assert np.frombuffer(payload[17:], "<f4").tolist() == [0, 1, 2, 3, 4, 5]


def test_f32t_round_trip(tmp_path):
    arr = np.random.default_rng(0).standard_normal((1, 4, 5)).astype(np.float32)
    save_tensor(tmp_path / "x.f32t", arr)
    assert np.array_equal(load_tensor(tmp_path / "x.f32t"), arr)


def test_f32t_rejects_garbage():
    with pytest.raises(FormatError):
        decode_tensor(b"NOPE" + bytes(10))
    bad = encode_tensor(np.zeros(3))[:-1]
    with pytest.raises(FormatError):
        decode_tensor(bad)


def test_checkpoint_round_trip(tmp_path):
    tensors = {"a": np.ones((2, 2), np.float32), "b.weight": np.arange(3, dtype=np.float32)}
    save_checkpoint(tmp_path / "m.f32k", tensors, {"hello": [1, 2]})
    back, cfg = load_checkpoint(tmp_path / "m.f32k")
    assert cfg == {"hello": [1, 2]}
    assert set(back) == {"a", "b.weight"}
    assert np.array_equal(back["b.weight"], tensors["b.weight"])
