import struct

import numpy as np
import pytest

from rvk.checkpoint import CheckpointError, load_checkpoint, read_header, save_checkpoint
from rvk.formats import FormatError, read_flo, read_pgm, write_flo, write_pgm


def test_pgm_round_trip(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (7, 11), dtype=np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    np.testing.assert_array_equal(read_pgm(tmp_path / "a.pgm"), img)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n11 7\n255\n")


def test_pgm_header_comment(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 2\n255\n\x00\x01\x02\x03")
    np.testing.assert_array_equal(read_pgm(p), [[0, 1], [2, 3]])


def test_pgm_rejects(tmp_path):
    with pytest.raises(ValueError):
        write_pgm(tmp_path / "x.pgm", np.zeros((3, 3)))
    p = tmp_path / "bad.pgm"
    p.write_bytes(b"P6\n1 1\n255\n\x00")
    with pytest.raises(FormatError, match="offset 0"):
        read_pgm(p)
    p.write_bytes(b"P5\n4 4\n255\n\x00\x00")
    with pytest.raises(FormatError, match="does not match 4x4"):
        read_pgm(p)
    p.write_bytes(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(FormatError, match="8-bit"):
        read_pgm(p)


def test_flo_round_trip_and_layout(tmp_path):
    fl = np.random.default_rng(1).normal(size=(5, 3, 2)).astype(np.float32)
    write_flo(tmp_path / "f.flo", fl)
    buf = (tmp_path / "f.flo").read_bytes()
    assert buf[:4] == b"PIEH"
    assert struct.unpack("<f", buf[:4])[0] == 202021.25
    assert struct.unpack("<ii", buf[4:12]) == (3, 5)
    # interleaved (u, v), row-major
    assert struct.unpack("<ff", buf[12:20]) == tuple(fl[0, 0])
    np.testing.assert_array_equal(read_flo(tmp_path / "f.flo"), fl)


def test_flo_rejects(tmp_path):
    p = tmp_path / "f.flo"
    write_flo(p, np.zeros((4, 6, 2), np.float32))
    with pytest.raises(FormatError, match="does not match image"):
        read_flo(p, expect_shape=(6, 4))
    p.write_bytes(b"XXXX" + p.read_bytes()[4:])
    with pytest.raises(FormatError, match="magic"):
        read_flo(p)
    p.write_bytes(b"PIEH" + struct.pack("<ii", 4, 6) + b"\x00" * 10)
    with pytest.raises(FormatError, match="offset 12"):
        read_flo(p)
    with pytest.raises(ValueError):
        write_flo(p, np.zeros((4, 6)))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    tensors = {"w": rng.normal(size=(3, 4)), "b": rng.normal(size=(4,)), "s": np.array(2.5)}
    meta = {"lr": 1e-4, "dims": [16, 32]}
    save_checkpoint(tmp_path / "m.ckpt", tensors, meta)
    got, got_meta = load_checkpoint(tmp_path / "m.ckpt")
    assert got_meta == meta
    assert list(got) == ["w", "b", "s"]
    for k in tensors:
        np.testing.assert_array_equal(got[k], tensors[k])
    assert read_header(tmp_path / "m.ckpt")["schema_version"] == 1


def test_checkpoint_bytes_deterministic(tmp_path):
    t = {"a": np.arange(6.0).reshape(2, 3)}
    save_checkpoint(tmp_path / "1", t, {"z": 1, "a": 2})
    save_checkpoint(tmp_path / "2", t, {"a": 2, "z": 1})
    assert (tmp_path / "1").read_bytes() == (tmp_path / "2").read_bytes()


def test_checkpoint_corruption(tmp_path):
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, {"w": np.ones((2, 2))}, {})
    good = p.read_bytes()
    p.write_bytes(good[:-3])
    with pytest.raises(CheckpointError, match="truncated block 'w'"):
        load_checkpoint(p)
    p.write_bytes(good + b"\x00")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(p)
    p.write_bytes(b"NOTACKPT" + good[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(p)
    p.write_bytes(good[:10])
    with pytest.raises(CheckpointError, match="offset 8"):
        load_checkpoint(p)


def test_checkpoint_schema_mismatch(tmp_path):
    import json
    raw = json.dumps({"schema_version": 99, "tensors": [], "meta": {}}).encode()
    p = tmp_path / "v.ckpt"
    p.write_bytes(b"RVKCKPT1" + struct.pack("<I", len(raw)) + raw)
    with pytest.raises(CheckpointError, match="schema_version 99"):
        load_checkpoint(p)
