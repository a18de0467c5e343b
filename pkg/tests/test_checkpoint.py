import json
import struct

import numpy as np
import pytest

from maskflow import checkpoint as ckpt
from maskflow import masknet as mn
from maskflow import train as tr
from maskflow.layers import ShapeMismatchError


def test_round_trip_keeps_values_shapes_and_meta(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {"a": rng.standard_normal((3, 4)).astype(np.float32), "b/c": np.arange(5.0),
               "scalar": np.array(2.5)}
    sha = ckpt.save(tmp_path / "x.m2f", tensors, {"k": [1, 2]})
    got, meta = ckpt.load(tmp_path / "x.m2f")
    assert meta == {"k": [1, 2]}
    assert sha == ckpt.file_sha256(tmp_path / "x.m2f")
    for k, v in tensors.items():
        assert got[k].dtype == np.float32 and got[k].shape == np.shape(v)
        np.testing.assert_array_equal(got[k], np.asarray(v, dtype=np.float32))
    assert not (tmp_path / "x.m2f.tmp").exists()


def test_bytes_do_not_depend_on_insertion_order():
    a = ckpt.to_bytes({"x": np.ones(2), "y": np.zeros(3)}, {"b": 1, "a": 2})
    b = ckpt.to_bytes({"y": np.zeros(3), "x": np.ones(2)}, {"a": 2, "b": 1})
    assert a == b


def _blob_with_directory(directory, payload=b"\0" * 16):
    header = json.dumps({"meta": {}, "tensors": directory}).encode()
    return ckpt.MAGIC + struct.pack("<IQ", ckpt.VERSION, len(header)) + header + payload


@pytest.mark.parametrize("blob,match", [
    (b"NOPE" + b"\0" * 20, "bad magic"),
    (ckpt.MAGIC + struct.pack("<IQ", 9, 2) + b"{}", "version 9"),
    (ckpt.MAGIC + struct.pack("<IQ", 1, 3) + b"{x}", "corrupt header"),
    (_blob_with_directory({"a": {"shape": [8], "offset": 0, "dtype": "float32"}}), "past end"),
    (_blob_with_directory({"a": {"shape": [2], "offset": 0, "dtype": "float32"},
                           "b": {"shape": [2], "offset": 4, "dtype": "float32"}}), "overlap"),
    (_blob_with_directory({"a": {"shape": [2], "offset": 0, "dtype": "int8"}}), "dtype"),
])
def test_malformed_files_are_rejected(blob, match):
    with pytest.raises(ckpt.CheckpointError, match=match):
        ckpt.from_bytes(blob)


def test_load_errors_name_the_path(tmp_path):
    with pytest.raises(OSError, match="nothing.m2f"):
        ckpt.load(tmp_path / "nothing.m2f")
    (tmp_path / "bad.m2f").write_bytes(b"garbage")
    with pytest.raises(ckpt.CheckpointError, match="bad.m2f"):
        ckpt.load(tmp_path / "bad.m2f")


def test_matrix_helpers(tmp_path):
    m = np.arange(6.0).reshape(2, 3)
    ckpt.save_matrix(tmp_path / "m.m2f", m, {"id": "x"})
    np.testing.assert_array_equal(ckpt.load_matrix(tmp_path / "m.m2f"), m)
    ckpt.save(tmp_path / "other.m2f", {"w": m})
    with pytest.raises(ckpt.CheckpointError, match="matrix"):
        ckpt.load_matrix(tmp_path / "other.m2f")


def test_model_checkpoint_round_trip_and_shape_mismatch(tmp_path):
    tr.init_checkpoint(tmp_path / "m.m2f", "mask", "toy", seed=3)
    model, meta = tr.load_model(tmp_path / "m.m2f")
    fresh = mn.MaskNet(mn.MaskNetConfig.toy(init_seed=3))
    for name, p in fresh.params.items():
        np.testing.assert_array_equal(model.params[name].data, p.data)
    assert meta["stage"] == "mask"
    tensors, meta = ckpt.load(tmp_path / "m.m2f")
    meta["model_config"]["lstm_hidden"] = 16
    ckpt.save(tmp_path / "bad.m2f", tensors, meta)
    with pytest.raises(ShapeMismatchError,
                       match=r"lstm0.fwd.w_hh: model \(16, 64\) vs state \(32, 128\)"):
        tr.load_model(tmp_path / "bad.m2f")
    ckpt.save_matrix(tmp_path / "mat.m2f", np.zeros(2))
    with pytest.raises(ckpt.CheckpointError, match="not a training checkpoint"):
        tr.load_model(tmp_path / "mat.m2f")
