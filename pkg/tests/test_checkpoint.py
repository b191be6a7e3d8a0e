import struct

import numpy as np
import pytest

from btranspose.checkpoint import (FLAG_BACKBONE_ONLY, MAGIC, BadMagicError, Checkpoint, CheckpointError,
                                   TruncatedError, UnknownTensorError, VersionError, decode, encode,
                                   load_checkpoint, load_pretrained, read_checkpoint, save_checkpoint)
from btranspose.model import build_model, tiny_spec


@pytest.fixture
def tiny_model():
    model = build_model(tiny_spec("C2A1(4)"), seed=3)
    # move BN statistics off their defaults so buffers are exercised too
    for name, buf in model.named_buffers():
        buf[...] = np.random.default_rng(len(name)).random(buf.shape)
    return model


def test_round_trip_bit_exact(tmp_path, tiny_model):
    path = save_checkpoint(tiny_model, tmp_path / "m.btw", step=42)
    model, ckpt = load_checkpoint(path, seed=99)
    assert ckpt.step == 42 and ckpt.descriptor == tiny_model.spec.descriptor() and not ckpt.backbone_only
    assert model.spec == tiny_model.spec
    want, got = tiny_model.state_dict(), model.state_dict()
    assert list(want) == list(got)
    for k in want:
        assert got[k].dtype == want[k].dtype and got[k].tobytes() == want[k].tobytes(), k


def test_encode_decode_all_dtypes():
    tensors = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array(np.pi),
               "c": np.array([-1, 2**40], dtype=np.int64), "é": np.zeros((0, 4), dtype=np.float32)}
    back = decode(encode(Checkpoint("x", 7, 0, tensors)))
    for k, v in tensors.items():
        assert back.tensors[k].dtype == v.dtype and back.tensors[k].shape == v.shape
        assert back.tensors[k].tobytes() == v.tobytes()


def test_byte_audit():
    w = np.array([[1.5, -2.0]], dtype=np.float32)
    n = np.array([3, 4, 5], dtype=np.int64)
    data = encode(Checkpoint("C3A1(4)", 258, FLAG_BACKBONE_ONLY, {"w": w, "bn.n": n}))
    want = (b"BTRW" + (1).to_bytes(4, "little") + b"\x01" + (7).to_bytes(2, "little") + b"C3A1(4)"
            + (258).to_bytes(8, "little") + (2).to_bytes(4, "little")
            + (1).to_bytes(2, "little") + b"w" + b"\x00" + b"\x02" + (1).to_bytes(4, "little")
            + (2).to_bytes(4, "little") + struct.pack("<2f", 1.5, -2.0)
            + (4).to_bytes(2, "little") + b"bn.n" + b"\x02" + b"\x01" + (3).to_bytes(4, "little")
            + struct.pack("<3q", 3, 4, 5))
    assert data == want


def test_tiny_model_file_matches_layout(tmp_path, tiny_model):
    data = save_checkpoint(tiny_model, tmp_path / "m.btw", step=5).read_bytes()
    assert data[:4] == MAGIC
    version, flags, n_desc = struct.unpack_from("<IBH", data, 4)
    assert (version, flags) == (1, 0)
    pos = 11
    assert data[pos:pos + n_desc].decode() == tiny_model.spec.descriptor()
    pos += n_desc
    step, count = struct.unpack_from("<QI", data, pos)
    pos += 12
    state = tiny_model.state_dict()
    assert step == 5 and count == len(state)
    for name, arr in state.items():
        (n_name,) = struct.unpack_from("<H", data, pos)
        pos += 2
        assert data[pos:pos + n_name].decode() == name
        pos += n_name
        code, rank = data[pos], data[pos + 1]
        pos += 2
        assert code == {np.float32: 0, np.float64: 1, np.int64: 2}[arr.dtype.type] and rank == arr.ndim
        assert struct.unpack_from(f"<{rank}I", data, pos) == arr.shape
        pos += 4 * rank
        assert data[pos:pos + arr.nbytes] == arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        pos += arr.nbytes
    assert pos == len(data)


def test_truncation_everywhere(tmp_path, tiny_model):
    data = save_checkpoint(tiny_model, tmp_path / "m.btw").read_bytes()
    for cut in [0, 3, 6, 10, 15, 30, len(data) // 2, len(data) - 1]:
        with pytest.raises(TruncatedError if cut >= 4 else (TruncatedError, BadMagicError)):
            decode(data[:cut])


def test_bad_magic_and_version(tmp_path, tiny_model):
    data = bytearray(save_checkpoint(tiny_model, tmp_path / "m.btw").read_bytes())
    with pytest.raises(BadMagicError):
        decode(b"PK\x03\x04" + bytes(data[4:]))
    data[4] = 2
    with pytest.raises(VersionError, match="version 2"):
        decode(bytes(data))


def test_trailing_bytes():
    with pytest.raises(CheckpointError, match="trailing"):
        decode(encode(Checkpoint("x")) + b"\x00")


def test_unknown_tensor_name(tmp_path, tiny_model):
    state = dict(tiny_model.state_dict())
    state["ghost.weight"] = np.zeros(3, dtype=np.float32)
    (tmp_path / "g.btw").write_bytes(encode(Checkpoint(tiny_model.spec.descriptor(), 0, 0, state)))
    with pytest.raises(UnknownTensorError, match="ghost"):
        load_checkpoint(tmp_path / "g.btw")


def test_missing_tensor_in_full_checkpoint(tmp_path, tiny_model):
    state = dict(tiny_model.state_dict())
    state.pop(next(iter(state)))
    (tmp_path / "m.btw").write_bytes(encode(Checkpoint(tiny_model.spec.descriptor(), 0, 0, state)))
    with pytest.raises(CheckpointError, match="lacks"):
        load_checkpoint(tmp_path / "m.btw")


def test_unsupported_dtype():
    with pytest.raises(TypeError):
        encode(Checkpoint("x", tensors={"a": np.zeros(2, dtype=np.int8)}))


def test_backbone_only_partial_load(tmp_path, tiny_model):
    path = save_checkpoint(tiny_model, tmp_path / "b.btw", prefixes=("backbone.",))
    ckpt = read_checkpoint(path)
    assert ckpt.backbone_only and len(ckpt.tensors) > 10
    assert all(k.startswith("backbone.") for k in ckpt.tensors)
    fresh = build_model(tiny_model.spec, seed=50)
    head_before = fresh.head.final.weight.data.copy()
    loaded = load_pretrained(fresh, path)
    assert sorted(loaded) == sorted(ckpt.tensors)
    for k in loaded:
        assert fresh.state_dict()[k].tobytes() == tiny_model.state_dict()[k].tobytes()
    assert np.array_equal(fresh.head.final.weight.data, head_before)
    model, _ = load_checkpoint(path, seed=50)
    assert np.array_equal(model.head.final.weight.data, head_before)
