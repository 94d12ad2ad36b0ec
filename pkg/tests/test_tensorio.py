"""Binary tensor records, checkpoints, and graymap export."""
import numpy as np
import pytest

from dopm import tensorio


def test_tensor_round_trip_shapes(tmp_path):
    rng = np.random.default_rng(0)
    shapes = [(), (1,), (7,), (3, 4), (2, 3, 4, 5)]
    for i, shape in enumerate(shapes):
        arr = rng.standard_normal(shape)
        path = tmp_path / f"t{i}.dopt"
        tensorio.write_tensor(path, arr)
        back = tensorio.read_tensor(path)
        assert back.shape == arr.shape
        np.testing.assert_array_equal(back, arr)


def test_records_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    arrays = [rng.standard_normal((2, 2)),
              rng.standard_normal(5),
              np.float64(3.25)]
    path = tmp_path / "records.dopt"
    tensorio.write_records(path, arrays)
    back = tensorio.read_records(path)
    assert len(back) == len(arrays)
    for got, want in zip(back, arrays):
        np.testing.assert_array_equal(got, np.asarray(want))


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    arrays = {"w": rng.standard_normal((3, 3)), "b": rng.standard_normal(3)}
    meta = {"variant": "dopm", "beta": "0.01"}
    tensorio.save_checkpoint(tmp_path / "ck", arrays, meta)
    arrays2, meta2 = tensorio.load_checkpoint(tmp_path / "ck")
    assert meta2 == meta
    assert list(arrays2) == list(arrays)
    for key, arr in arrays.items():
        np.testing.assert_array_equal(arrays2[key], arr)


def test_checkpoint_save_is_deterministic(tmp_path):
    arrays = {"w": np.arange(6.0).reshape(2, 3)}
    meta = {"k": "v"}
    tensorio.save_checkpoint(tmp_path / "a", arrays, meta)
    tensorio.save_checkpoint(tmp_path / "b", arrays, meta)
    for name in ("manifest.txt", "params.dopt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_read_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.dopt"
    path.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(ValueError):
        tensorio.read_tensor(path)


def test_read_rejects_truncated_payload(tmp_path):
    path = tmp_path / "t.dopt"
    tensorio.write_tensor(path, np.ones((4, 4)))
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(ValueError):
        tensorio.read_tensor(path)


def test_write_pgm_format(tmp_path):
    values = np.array([[0.0, 0.5], [0.75, 1.0]])
    path = tmp_path / "map.pgm"
    tensorio.write_pgm(path, values)
    raw = path.read_bytes()
    header, payload = raw.split(b"255\n", 1)
    assert header.startswith(b"P5")
    assert b"2 2" in header
    assert payload == bytes([0, 128, 191, 255])


def test_write_pgm_constant_map(tmp_path):
    path = tmp_path / "flat.pgm"
    tensorio.write_pgm(path, np.full((3, 3), 0.4))
    payload = path.read_bytes().split(b"255\n", 1)[1]
    assert set(payload) == {0}


def test_write_pgm_rejects_non_2d(tmp_path):
    with pytest.raises(ValueError):
        tensorio.write_pgm(tmp_path / "x.pgm", np.zeros(4))
