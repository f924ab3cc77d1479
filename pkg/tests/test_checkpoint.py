"""Binary checkpoint round-trips and header validation."""

from __future__ import annotations

import numpy as np
import pytest

from gridstitch import checkpoint
from gridstitch.autograd import Tensor


def test_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    params = {
        "enc.w": Tensor(rng.standard_normal((4, 8)), requires_grad=True),
        "enc.b": Tensor(np.zeros(8), requires_grad=True),
        "scalar": Tensor(np.array(3.25), requires_grad=True),
    }
    path = tmp_path / "ck.bin"
    checkpoint.save(params, path)
    loaded = checkpoint.load(path)
    assert list(loaded) == list(params)
    for k in params:
        assert loaded[k].tobytes() == params[k].data.tobytes()
        assert loaded[k].shape == params[k].data.shape


def test_save_is_deterministic(tmp_path):
    params = {"a": Tensor(np.arange(6, dtype=float).reshape(2, 3))}
    p1, p2 = tmp_path / "one.bin", tmp_path / "two.bin"
    checkpoint.save(params, p1)
    checkpoint.save(params, p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError, match="magic"):
        checkpoint.load(path)


def test_bad_version_rejected(tmp_path):
    path = tmp_path / "v9.bin"
    params = {"a": Tensor(np.ones(2))}
    checkpoint.save(params, path)
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="version"):
        checkpoint.load(path)


def test_load_into_validates_names(tmp_path):
    path = tmp_path / "ck.bin"
    checkpoint.save({"a": Tensor(np.ones(2))}, path)
    with pytest.raises(ValueError, match="mismatch"):
        checkpoint.load_into(path, {"b": Tensor(np.ones(2), requires_grad=True)})
    target = {"a": Tensor(np.zeros(2), requires_grad=True)}
    checkpoint.load_into(path, target)
    assert np.array_equal(target["a"].data, [1.0, 1.0])
