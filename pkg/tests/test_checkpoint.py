import json
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import array_shapes, arrays

from cradle.numerics.checkpoint import (
    MAGIC,
    CheckpointError,
    decode_tensors,
    encode_tensors,
    load_checkpoint,
    manifest_path,
    save_checkpoint,
)


def test_byte_layout_of_single_tensor():
    blob = encode_tensors({"w": np.array([[1.0, 2.0]])})
    assert blob[:8] == MAGIC
    assert struct.unpack_from("<II", blob, 8) == (1, 1)
    assert struct.unpack_from("<H", blob, 16) == (1,)
    assert blob[18:19] == b"w"
    assert struct.unpack_from("<B2Q", blob, 19) == (2, 1, 2)
    assert struct.unpack_from("<2d", blob, 36) == (1.0, 2.0)
    assert len(blob) == 36 + 16 + 32


names = st.text(st.characters(min_codepoint=33, max_codepoint=0x2FF), min_size=1, max_size=12)


@given(st.dictionaries(names, arrays(np.float64, array_shapes(min_dims=0, max_dims=3, max_side=4),
                                     elements=st.floats(allow_nan=False)), max_size=5))
def test_round_trip_is_exact(tensors):
    back = decode_tensors(encode_tensors(tensors))
    assert list(back) == list(tensors)
    for k in tensors:
        assert back[k].shape == tensors[k].shape
        assert back[k].tobytes() == tensors[k].tobytes()


def test_corruption_detected():
    blob = bytearray(encode_tensors({"a": np.arange(4.0)}))
    blob[40] ^= 1
    with pytest.raises(CheckpointError, match="checksum"):
        decode_tensors(bytes(blob))
    with pytest.raises(CheckpointError):
        decode_tensors(bytes(blob[:20]))
    with pytest.raises(CheckpointError, match="magic"):
        decode_tensors(b"NOTACKPT" + bytes(60))


def test_save_load_with_manifest(tmp_path):
    path = tmp_path / "ck.bin"
    save_checkpoint({"a": np.ones((2, 3))}, {"d_z": 8}, path)
    assert manifest_path(path).exists()
    assert not (tmp_path / "ck.bin.tmp").exists()
    tensors, manifest = load_checkpoint(path, expect={"d_z": 8})
    assert manifest["shapes"] == {"a": [2, 3]}
    np.testing.assert_array_equal(tensors["a"], np.ones((2, 3)))
    with pytest.raises(CheckpointError, match="d_z"):
        load_checkpoint(path, expect={"d_z": 16})


def test_missing_and_mismatched_files(tmp_path):
    with pytest.raises(CheckpointError, match="missing"):
        load_checkpoint(tmp_path / "nope.bin")
    path = tmp_path / "ck.bin"
    save_checkpoint({"a": np.ones(3)}, {}, path)
    m = json.loads(manifest_path(path).read_text())
    m["shapes"]["a"] = [4]
    manifest_path(path).write_text(json.dumps(m))
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(path)
