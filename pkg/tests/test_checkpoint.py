import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from kaseg import checkpoint as ckpt
from kaseg.models import build_network


def test_round_trip_bit_exact(tmp_path, rng):
    tensors = {
        "a": rng.normal(size=(3, 4)).astype(np.float32),
        "scalar": np.asarray(7, np.float32),
        "ünïcode.name": np.array([np.inf, -0.0, 1e-45], np.float32),
    }
    path = tmp_path / "x.ckpt"
    ckpt.save(path, tensors, 0xDEADBEEFCAFEF00D)
    c = ckpt.load(path)
    assert c.config_hash == 0xDEADBEEFCAFEF00D
    assert list(c.tensors) == list(tensors)
    for k, v in tensors.items():
        assert c.tensors[k].tobytes() == v.tobytes()
        assert c.tensors[k].shape == v.shape


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, max_side=5)),
       st.integers(0, 2**64 - 1))
def test_round_trip_property(tmp_path_factory, arr, h):
    path = tmp_path_factory.mktemp("ck") / "p.ckpt"
    ckpt.save(path, {"t": arr}, h)
    c = ckpt.load(path)
    assert c.config_hash == h
    assert c.tensors["t"].tobytes() == arr.tobytes()


def test_header_layout(tmp_path):
    path = tmp_path / "h.ckpt"
    ckpt.save(path, {"w": np.ones((2, 3), np.float32)}, 5)
    buf = path.read_bytes()
    assert buf[:4] == b"KADC"
    assert struct.unpack_from("<IQI", buf, 4) == (1, 5, 1)
    off = 4 + 16
    assert struct.unpack_from("<I", buf, off) == (1,)
    assert buf[off + 4 : off + 5] == b"w"
    assert struct.unpack_from("<B2Q", buf, off + 5) == (2, 2, 3)
    assert len(buf) == off + 5 + 1 + 16 + 24


def test_rejects_non_float32(tmp_path):
    with pytest.raises(ckpt.CheckpointError, match="float32"):
        ckpt.save(tmp_path / "x", {"a": np.zeros(2)}, 0)


@pytest.mark.parametrize("damage", ["magic", "truncate", "trailing", "version"])
def test_corruption_detected(tmp_path, damage):
    path = tmp_path / "c.ckpt"
    ckpt.save(path, {"a": np.arange(6, dtype=np.float32)}, 1)
    buf = bytearray(path.read_bytes())
    if damage == "magic":
        buf[:4] = b"XXXX"
    elif damage == "truncate":
        buf = buf[:-3]
    elif damage == "trailing":
        buf += b"\0"
    else:
        buf[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(buf))
    with pytest.raises(ckpt.CheckpointError):
        ckpt.load(path)


def test_missing_file_is_os_error(tmp_path):
    with pytest.raises(FileNotFoundError):
        ckpt.load(tmp_path / "absent.ckpt")


def test_save_leaves_no_temp_file(tmp_path):
    ckpt.save(tmp_path / "a.ckpt", {"x": np.zeros(1, np.float32)}, 0)
    assert [p.name for p in tmp_path.iterdir()] == ["a.ckpt"]


def test_int_tensor_limits():
    assert ckpt.int_tensor(2**24) == 2**24
    with pytest.raises(ckpt.CheckpointError):
        ckpt.int_tensor(2**24 + 1)


def test_module_state_round_trip(tmp_path):
    src, dst = build_network("student", seed=1), build_network("student", seed=2)
    src.named_buffers()[next(iter(src.named_buffers()))][...] = 3.0
    ckpt.save(tmp_path / "m.ckpt", ckpt.module_state(src, "student"), 0)
    assert ckpt.checksum(src) != ckpt.checksum(dst)
    ckpt.load_module_state(dst, ckpt.load(tmp_path / "m.ckpt"), "student")
    assert ckpt.checksum(src) == ckpt.checksum(dst)


def test_load_module_state_checks_entries(tmp_path):
    net = build_network("adapter")
    ckpt.save(tmp_path / "e.ckpt", {"param.adapter.nope": np.zeros(1, np.float32)}, 0)
    with pytest.raises(ckpt.CheckpointError, match="lacks"):
        ckpt.load_module_state(net, ckpt.load(tmp_path / "e.ckpt"), "adapter")


def test_checksum_sensitive_to_single_value():
    net = build_network("adapter", seed=0)
    before = ckpt.checksum(net)
    next(iter(net.named_parameters().values())).data.flat[0] += 1e-7
    assert ckpt.checksum(net) != before
