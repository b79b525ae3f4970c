import numpy as np
import pytest

from reidlab import checkpoint as ckpt
from reidlab.errors import ValidationError


def test_round_trip_preserves_names_shapes_order(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "backbone/conv0/w": rng.normal(size=(4, 3, 3, 3)),
        "head/b": np.array(0.25),
        "state/centroids": rng.normal(size=(5, 8)),
    }
    path = tmp_path / "model.pssl"
    ckpt.save_tensors(path, tensors)
    loaded = ckpt.load_tensors(path)
    assert list(loaded) == list(tensors)
    for name, arr in tensors.items():
        assert loaded[name].shape == np.asarray(arr).shape
        np.testing.assert_array_equal(loaded[name], np.asarray(arr, dtype=np.float32))


def test_save_load_save_is_bitwise_stable(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {"w": rng.normal(size=(7, 7))}
    p1 = tmp_path / "a.pssl"
    p2 = tmp_path / "b.pssl"
    ckpt.save_tensors(p1, tensors)
    ckpt.save_tensors(p2, ckpt.load_tensors(p1))
    assert p1.read_bytes() == p2.read_bytes()


def test_magic_bytes_and_rejection(tmp_path):
    path = tmp_path / "model.pssl"
    ckpt.save_tensors(path, {"x": np.zeros(3)})
    assert path.read_bytes()[:4] == b"PSSL"
    bad = tmp_path / "bad.pssl"
    bad.write_bytes(b"XXXX" + path.read_bytes()[4:])
    with pytest.raises(ValidationError):
        ckpt.load_tensors(bad)


def test_truncated_file_rejected(tmp_path):
    path = tmp_path / "model.pssl"
    ckpt.save_tensors(path, {"x": np.arange(10.0)})
    trunc = tmp_path / "trunc.pssl"
    trunc.write_bytes(path.read_bytes() + b"\x00\x00")
    with pytest.raises(ValidationError):
        ckpt.load_tensors(trunc)


def test_text_and_uint_encoding_round_trip():
    s = "epochs = 60\nbatch_size = 64\n# comment\n"
    assert ckpt.decode_text(ckpt.encode_text(s)) == s
    for v in (0, 1, 65535, 2**31 - 1, 123456789):
        assert ckpt.decode_uint(ckpt.encode_uint(v, 4)) == v


def test_rng_state_round_trip():
    rng = np.random.default_rng(42)
    rng.normal(size=17)  # advance
    enc = ckpt.encode_rng_state(rng)
    clone = ckpt.decode_rng_state(enc)
    np.testing.assert_array_equal(rng.normal(size=8), clone.normal(size=8))


def test_scalar_rank_zero_round_trip(tmp_path):
    path = tmp_path / "s.pssl"
    ckpt.save_tensors(path, {"meta/epoch": np.array(37.0)})
    loaded = ckpt.load_tensors(path)
    assert loaded["meta/epoch"].shape == ()
    assert float(loaded["meta/epoch"]) == 37.0
