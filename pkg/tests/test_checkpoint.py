import struct

import numpy as np
import pytest

from midl.checkpoint import (
    MAGIC_DATA,
    CheckpointError,
    decode_tensors,
    encode_tensors,
    inspect,
    load_tensors,
    save_tensors,
)
from midl.layers import MidlParams


def sample_tensors(rng):
    p = MidlParams.init(8, 8, rng)
    out = {n: t.data for n, t in p.named_tensors().items()}
    out["scalar"] = np.asarray(3.25)
    out["empty"] = np.zeros((0, 3))
    return out


def test_write_read_write_is_byte_identical(tmp_path, rng):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    tensors = sample_tensors(rng)
    save_tensors(a, tensors)
    loaded = load_tensors(a)
    save_tensors(b, loaded)
    assert a.read_bytes() == b.read_bytes()
    assert list(loaded) == list(tensors)
    for name in tensors:
        assert loaded[name].shape == tensors[name].shape
        np.testing.assert_array_equal(loaded[name], tensors[name])


def test_header_layout():
    buf = encode_tensors({"w": np.array([[1.0, 2.0]])})
    assert buf[:4] == b"MIDL"
    assert struct.unpack_from("<I", buf, 4) == (1,)
    assert struct.unpack_from("<I", buf, 8) == (1,)
    assert buf[12:13] == b"w"
    assert struct.unpack_from("<I2Q", buf, 13) == (2, 1, 2)
    assert struct.unpack_from("<2d", buf, 33) == (1.0, 2.0)
    assert len(buf) == 49


def test_inspect_lists_manifest(tmp_path, rng):
    tensors = sample_tensors(rng)
    path = tmp_path / "m.ckpt"
    save_tensors(path, tensors)
    assert inspect(path) == [(n, a.shape) for n, a in tensors.items()]


def test_data_magic_variant(tmp_path):
    path = tmp_path / "d.bin"
    save_tensors(path, {"x": np.ones(3)}, magic=MAGIC_DATA)
    assert path.read_bytes()[:4] == b"DATA"
    with pytest.raises(CheckpointError, match="bad magic"):
        load_tensors(path)
    assert inspect(path) == [("x", (3,))]


@pytest.mark.parametrize(
    "mutate, message",
    [
        (lambda b: b[:6], "too short"),
        (lambda b: b"XXXX" + b[4:], "bad magic"),
        (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "version"),
        (lambda b: b[:-3], "truncated"),
        (lambda b: b + b"\x01", "truncated"),
    ],
)
def test_malformed_files_are_rejected(mutate, message):
    buf = encode_tensors({"w": np.arange(6.0).reshape(2, 3)})
    with pytest.raises(CheckpointError, match=message):
        decode_tensors(mutate(buf))


def test_duplicate_names_rejected():
    one = encode_tensors({"w": np.ones(1)})
    with pytest.raises(CheckpointError, match="duplicate"):
        decode_tensors(one + one[8:])


def test_random_truncation_never_decodes(rng):
    buf = encode_tensors(sample_tensors(rng))
    for cut in rng.integers(1, len(buf), 200):
        try:
            out = decode_tensors(buf[:cut])
        except CheckpointError:
            continue
        # a cut exactly on a record boundary is a valid, shorter file
        assert encode_tensors(out) == buf[:cut]


def test_failed_write_leaves_existing_file(tmp_path):
    path = tmp_path / "keep.ckpt"
    save_tensors(path, {"a": np.ones(2)})
    before = path.read_bytes()
    with pytest.raises(Exception):
        save_tensors(path, {"a": object()})
    assert path.read_bytes() == before
    assert [p.name for p in tmp_path.iterdir()] == ["keep.ckpt"]
