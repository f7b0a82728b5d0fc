import numpy as np
import pytest
import torch

from retinaregen.checkpoint import (
    MAGIC,
    CheckpointFormatError,
    arrays_to_state_dict,
    load_arrays,
    save_arrays,
    state_dict_to_arrays,
)


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    arrays = {
        "a/weight": rng.standard_normal((3, 4, 5)).astype(np.float32),
        "b": rng.standard_normal(7).astype(np.float32),
        "scalar": np.float32(3.25).reshape(()),
    }
    path = str(tmp_path / "m.rrgn")
    save_arrays(arrays, path)
    loaded = load_arrays(path)
    assert set(loaded) == set(arrays)
    for k in arrays:
        assert np.array_equal(loaded[k], arrays[k])
        assert loaded[k].dtype == np.float32


def test_save_load_save_byte_identical(tmp_path):
    rng = np.random.default_rng(1)
    arrays = {f"arr{i}": rng.standard_normal((i + 1, 3)).astype(np.float32) for i in range(5)}
    p1, p2 = str(tmp_path / "a.rrgn"), str(tmp_path / "b.rrgn")
    save_arrays(arrays, p1)
    save_arrays(load_arrays(p1), p2)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_empty_model_round_trips(tmp_path):
    path = str(tmp_path / "empty.rrgn")
    save_arrays({}, path)
    assert load_arrays(path) == {}


def test_100_random_arrays_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    arrays = {}
    for i in range(100):
        ndim = int(rng.integers(0, 4))
        shape = tuple(int(rng.integers(1, 6)) for _ in range(ndim))
        arrays[f"x/{i:03d}"] = rng.standard_normal(shape).astype(np.float32)
    path = str(tmp_path / "big.rrgn")
    save_arrays(arrays, path)
    loaded = load_arrays(path)
    for k, v in arrays.items():
        assert np.array_equal(loaded[k], v), k
        assert loaded[k].shape == v.shape


def test_bad_magic(tmp_path):
    path = str(tmp_path / "bad.rrgn")
    with open(path, "wb") as fh:
        fh.write(b"NOPE00" + b"\x00" * 16)
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_arrays(path)


def test_truncated_payload(tmp_path):
    good = str(tmp_path / "good.rrgn")
    save_arrays({"w": np.ones((4, 4), dtype=np.float32)}, good)
    data = open(good, "rb").read()
    bad = str(tmp_path / "trunc.rrgn")
    with open(bad, "wb") as fh:
        fh.write(data[:-10])
    with pytest.raises(CheckpointFormatError, match="truncated"):
        load_arrays(bad)


def test_unknown_dtype(tmp_path):
    good = str(tmp_path / "good.rrgn")
    save_arrays({"w": np.ones(2, dtype=np.float32)}, good)
    data = bytearray(open(good, "rb").read())
    # dtype tag sits after magic(6) + count(4) + namelen(2) + name(1)
    data[13] = 9
    bad = str(tmp_path / "baddtype.rrgn")
    with open(bad, "wb") as fh:
        fh.write(bytes(data))
    with pytest.raises(CheckpointFormatError, match="dtype"):
        load_arrays(bad)


def test_torch_state_dict_round_trip(tmp_path):
    torch.manual_seed(0)
    model = torch.nn.Sequential(torch.nn.Linear(4, 3), torch.nn.Linear(3, 2))
    path = str(tmp_path / "sd.rrgn")
    save_arrays(state_dict_to_arrays(model.state_dict(), "m/"), path)
    restored = arrays_to_state_dict(load_arrays(path), "m/")
    for k, v in model.state_dict().items():
        assert torch.equal(restored[k], v)
