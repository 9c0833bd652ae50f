import struct

import numpy as np
import pytest

from vtryon import cft
from vtryon.bundle import (
    BundleError,
    SequenceBundle,
    load_named_tensors,
    save_named_tensors,
)
from vtryon.cft import BadMagicError, DimOverflowError, TruncatedError


def test_cft_roundtrip_preserves_shape_and_values(tmp_path):
    rng = np.random.default_rng(0)
    for shape in [(3,), (2, 4), (2, 3, 4, 2)]:
        arr = rng.normal(size=shape)
        p = tmp_path / "t.cft"
        cft.write_tensor(p, arr)
        back = cft.read_tensor(p)
        assert back.shape == shape
        assert back.dtype == np.float64
        np.testing.assert_allclose(back, arr.astype(np.float32), atol=0)


def test_cft_rank_zero_scalar(tmp_path):
    p = tmp_path / "s.cft"
    cft.write_tensor(p, np.array(2.5))
    back = cft.read_tensor(p)
    assert back.shape == ()
    assert float(back) == 2.5


def test_cft_exact_byte_layout(tmp_path):
    p = tmp_path / "x.cft"
    cft.write_tensor(p, np.array([[1.0, 2.0]], dtype=np.float32))
    blob = p.read_bytes()
    assert blob[:4] == b"CFT1"
    assert struct.unpack_from("<I", blob, 4)[0] == 2  # rank
    assert struct.unpack_from("<II", blob, 8) == (1, 2)  # dims
    np.testing.assert_array_equal(
        np.frombuffer(blob[16:], dtype="<f4"), [1.0, 2.0]
    )


def test_cft_bad_magic(tmp_path):
    p = tmp_path / "bad.cft"
    p.write_bytes(b"NOPE" + b"\x00" * 12)
    with pytest.raises(BadMagicError):
        cft.read_tensor(p)


def test_cft_truncated_variants(tmp_path):
    p = tmp_path / "t.cft"
    p.write_bytes(b"CFT")  # shorter than any header
    with pytest.raises(TruncatedError):
        cft.read_tensor(p)
    p.write_bytes(b"CFT1" + struct.pack("<I", 3) + struct.pack("<I", 2))
    with pytest.raises(TruncatedError):  # dim table cut short
        cft.read_tensor(p)
    cft.write_tensor(p, np.ones((4, 4)))
    blob = p.read_bytes()
    p.write_bytes(blob[:-4])  # payload cut short
    with pytest.raises(TruncatedError):
        cft.read_tensor(p)


def test_cft_dim_overflow(tmp_path):
    p = tmp_path / "big.cft"
    p.write_bytes(b"CFT1" + struct.pack("<I", 2) + struct.pack("<II", 1 << 20, 1 << 20))
    with pytest.raises(DimOverflowError):
        cft.read_tensor(p)


def _tiny_bundle():
    T, H, W = 2, 4, 4
    tensors = {
        "frames": np.zeros((T, H, W, 3)),
        "seg": np.zeros((T, H, W)),
        "dense": np.zeros((T, H, W)),
        "pose": np.zeros((T, 5, 2)),
        "matte": np.zeros((T, H, W)),
        "clothes": np.zeros((H, W, 3)),
        "optical_flows": np.ones((T, H, W, 2)),
    }
    return SequenceBundle(T, H, W, tensors)


def test_bundle_save_load_roundtrip(tmp_path):
    b = _tiny_bundle()
    b.tensors["frames"] += 0.5
    b.save(tmp_path / "scene")
    loaded = SequenceBundle.load(tmp_path / "scene")
    assert (loaded.T, loaded.H, loaded.W) == (2, 4, 4)
    assert set(loaded.tensors) == set(b.tensors)
    np.testing.assert_array_equal(loaded["frames"], b["frames"])


def test_bundle_missing_role_message():
    b = _tiny_bundle()
    del b.tensors["pose"]
    with pytest.raises(BundleError, match="missing role: pose"):
        b.validate()
    with pytest.raises(BundleError, match="missing role: gt_flows"):
        _ = _tiny_bundle()["gt_flows"]


def test_bundle_shape_validation():
    b = _tiny_bundle()
    b.tensors["seg"] = np.zeros((2, 5, 4))
    with pytest.raises(BundleError, match="role seg"):
        b.validate()


def test_bundle_contains():
    b = _tiny_bundle()
    assert "frames" in b
    assert "gt_flows" not in b


def test_bundle_load_errors(tmp_path):
    with pytest.raises(BundleError, match="no manifest"):
        SequenceBundle.load(tmp_path / "nowhere")
    d = tmp_path / "broken"
    d.mkdir()
    (d / "manifest.txt").write_text("T=2\nH=4\n")
    with pytest.raises(BundleError, match="missing dimension"):
        SequenceBundle.load(d)
    (d / "manifest.txt").write_text("T=2\nH=4\nW=4\nrole.frames=gone.cft\n")
    with pytest.raises(BundleError, match="does not resolve"):
        SequenceBundle.load(d)


def test_named_tensors_roundtrip(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {"enc.w0": rng.normal(size=(3, 3, 2, 4)), "dec.b1": rng.normal(size=4)}
    save_named_tensors(tmp_path / "ckpt", tensors)
    back = load_named_tensors(tmp_path / "ckpt")
    assert set(back) == set(tensors)
    for k in tensors:
        np.testing.assert_allclose(back[k], tensors[k].astype(np.float32), atol=0)
