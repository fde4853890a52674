import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowlens import container, datasets
from flowlens.imageio import decode_pgm16, decode_ppm, encode_pgm16, encode_ppm

MAGIC = b"TESTMAG1"


def test_container_round_trip():
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "s": np.float32(2.5)}
    blob = container.pack(MAGIC, {"k": [1, 2]}, arrays)
    header, back = container.unpack(MAGIC, blob)
    assert header["k"] == [1, 2]
    np.testing.assert_array_equal(back["a"], arrays["a"])
    assert back["s"].shape == () and float(back["s"]) == 2.5
    assert container.pack(MAGIC, header, back) == blob


@pytest.mark.parametrize("mangle,msg", [
    (lambda b: b"XXXXXXXX" + b[8:], "magic"),
    (lambda b: b[:10], "truncated"),
    (lambda b: b[:-2], "truncated"),
    (lambda b: b + b"\0\0\0\0", "trailing"),
])
def test_container_rejects_damage(mangle, msg):
    blob = container.pack(MAGIC, {}, {"a": np.ones(4, np.float32)})
    with pytest.raises(container.ContainerError, match=msg):
        container.unpack(MAGIC, mangle(blob))


def test_container_version_check():
    blob = container.pack(MAGIC, {"format_version": 99}, {})
    with pytest.raises(container.ContainerError, match="unsupported version"):
        container.unpack(MAGIC, blob)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**16))
def test_ppm_round_trip(h, w, seed):
    img = np.random.default_rng(seed).integers(0, 256, (h, w, 3)) / 255.0
    np.testing.assert_allclose(decode_ppm(encode_ppm(img)), img, atol=1e-7)


def test_ppm_header_comment():
    data = b"P6\n# made by hand\n1 1\n255\n" + bytes([255, 0, 128])
    np.testing.assert_allclose(decode_ppm(data)[0, 0], [1.0, 0.0, 128 / 255])


def test_ppm_errors():
    with pytest.raises(ValueError):
        encode_ppm(np.zeros((2, 2)))
    with pytest.raises(ValueError, match="P6"):
        decode_ppm(b"P5\n1 1\n255\n\0")
    with pytest.raises(ValueError, match="truncated"):
        decode_ppm(b"P6\n2 2\n255\n\0\0")


def test_pgm16_normalization():
    v = np.array([[0.0, 1.0], [2.0, 4.0]])
    data, factor = encode_pgm16(v)
    assert factor == 4.0
    assert data.startswith(b"P5\n2 2\n65535\n")
    np.testing.assert_allclose(decode_pgm16(data, factor), v, atol=factor / 65535)
    zero, f0 = encode_pgm16(np.zeros((2, 2)))
    assert f0 == 0.0 and decode_pgm16(zero).sum() == 0


def test_dataset_round_trip():
    ds = datasets.make_dataset("nominal", 4, seed=3, jitter=True)
    assert len(ds) == 8 and ds.jittered.sum() == 4
    blob = datasets.save_dataset(ds)
    back = datasets.load_dataset(blob)
    assert datasets.save_dataset(back) == blob
    assert back.labels.tolist() == ds.labels.tolist()
    assert len(back.clean()) == 4 and not back.clean().jittered.any()


def test_dominant_label_is_largest_object():
    from flowlens import camsim as cs
    sc = cs.generate_scene(5)
    biggest = max(sc.objects, key=lambda b: b.area)
    assert datasets.dominant_label(sc) == biggest.label


def test_make_dataset_rejects_empty():
    with pytest.raises(ValueError):
        datasets.make_dataset(n=0)
