import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from stablenet.errors import ShapeError
from stablenet.tensor import (
    Feature,
    Filter,
    devectorize,
    from_bytes,
    load_tensor,
    norm,
    save_tensor,
    to_bytes,
    vectorize,
)

finite = st.floats(-1e6, 1e6, allow_nan=False)
shapes = st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 4))


class TestVectorize:
    def test_single_entry(self):
        np.testing.assert_array_equal(vectorize(np.full((1, 1, 1), 5.0)), [5.0])

    def test_two_by_two(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None]
        np.testing.assert_array_equal(vectorize(x), [1, 2, 3, 4])

    def test_index_formula(self):
        """vec[k*h*w + i*w + j] == x[i, j, k] for every entry."""
        h, w, d = 3, 4, 2
        x = np.arange(h * w * d, dtype=float).reshape(h, w, d) * 1.5
        v = vectorize(x)
        for i in range(h):
            for j in range(w):
                for k in range(d):
                    assert v[k * h * w + i * w + j] == x[i, j, k]

    def test_batch_axis(self):
        x = np.random.default_rng(0).standard_normal((3, 2, 2, 2))
        v = vectorize(x)
        assert v.shape == (3, 8)
        np.testing.assert_array_equal(v[1], vectorize(x[1]))

    def test_rejects_low_rank(self):
        with pytest.raises(ShapeError):
            vectorize(np.ones(4))

    @settings(max_examples=200, deadline=None)
    @given(shapes.flatmap(lambda s: arrays(np.float64, s, elements=finite)))
    def test_roundtrip_bit_exact(self, x):
        h, w, d = x.shape
        np.testing.assert_array_equal(devectorize(vectorize(x), h, w, d), x)
        v = vectorize(x)
        np.testing.assert_array_equal(vectorize(devectorize(v, h, w, d)), v)

    def test_norm_isometry(self):
        rng = np.random.default_rng(1)
        for _ in range(1000):
            x = rng.standard_normal(tuple(rng.integers(1, 6, size=3)))
            v = vectorize(x)
            assert norm(v, "l2") == pytest.approx(np.linalg.norm(x.ravel()), rel=1e-14)
            assert norm(v, "linf") == np.abs(x).max()

    def test_devectorize_length_mismatch(self):
        with pytest.raises(ShapeError):
            devectorize(np.ones(5), 2, 2, 1)


class TestNorm:
    def test_l2(self):
        assert norm([3.0, -4.0], "l2") == 5.0

    def test_l1(self):
        assert norm([1.0, -1.0, 1.0], "l1") == 3.0

    @pytest.mark.parametrize("kind", ["l1", "l2", "linf", "frobenius"])
    def test_zero(self, kind):
        assert norm(np.zeros(4), kind) == 0.0

    def test_lpp_zero(self):
        assert norm(np.zeros(4), "lpp", p=3) == 0.0

    def test_lpp(self):
        v = np.array([1.0, -2.0, 2.0])
        assert norm(v, "lpp", p=3) == pytest.approx(17.0 ** (1 / 3))
        assert norm(v, "lpp", p=2) == pytest.approx(3.0)

    def test_lpp_rejects_small_p(self):
        with pytest.raises(ValueError):
            norm([1.0], "lpp", p=0.5)
        with pytest.raises(ValueError):
            norm([1.0], "lpp")

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            norm([1.0], "l7")


class TestContainers:
    def test_feature_roundtrip(self):
        x = np.random.default_rng(2).standard_normal((3, 2, 2))
        f = Feature.from_array(x)
        assert f.shape == (3, 2, 2)
        np.testing.assert_array_equal(f.array(), x)
        np.testing.assert_array_equal(np.asarray(f), x)

    def test_feature_is_immutable(self):
        f = Feature.from_array(np.ones((2, 2, 1)))
        with pytest.raises(ValueError):
            f.data[0] = 3.0

    def test_feature_size_check(self):
        with pytest.raises(ShapeError):
            Feature(2, 2, 2, np.ones(7))

    def test_filter_subfilter(self):
        K = np.arange(3 * 3 * 2 * 4, dtype=float).reshape(3, 3, 2, 4)
        f = Filter.from_array(K)
        assert (f.n, f.d_in, f.d_out) == (3, 2, 4)
        for i in range(2):
            for j in range(4):
                assert f.subfilter(i, j).shape == (3, 3)
                np.testing.assert_array_equal(f.subfilter(i, j), K[:, :, i, j])

    def test_filter_rejects_non_square(self):
        with pytest.raises(ShapeError):
            Filter.from_array(np.ones((3, 2, 1, 1)))


class TestSerialization:
    def test_header_layout(self):
        x = np.arange(12, dtype=float).reshape(2, 3, 2)
        buf = to_bytes(x)
        assert buf[:4] == b"STBL"
        assert struct.unpack_from("<I", buf, 4) == (3,)
        assert struct.unpack_from("<3Q", buf, 8) == (2, 3, 2)
        payload = np.frombuffer(buf, "<f8", offset=8 + 24)
        # features are stored in vectorization order
        np.testing.assert_array_equal(payload, vectorize(x))

    @pytest.mark.parametrize("shape", [(), (4,), (2, 3), (2, 3, 4), (3, 3, 2, 5)])
    def test_roundtrip(self, shape):
        x = np.random.default_rng(3).standard_normal(shape)
        y, end = from_bytes(to_bytes(x))
        assert end == len(to_bytes(x))
        np.testing.assert_array_equal(y, x)

    def test_concatenated(self):
        a, b = np.ones((2, 2)), np.arange(3.0)
        buf = to_bytes(a) + to_bytes(b)
        a2, off = from_bytes(buf)
        b2, _ = from_bytes(buf, off)
        np.testing.assert_array_equal(a2, a)
        np.testing.assert_array_equal(b2, b)

    def test_file_roundtrip(self, tmp_path):
        x = np.random.default_rng(4).standard_normal((3, 3, 1, 2))
        save_tensor(tmp_path / "k.stbl", x)
        np.testing.assert_array_equal(load_tensor(tmp_path / "k.stbl"), x)

    def test_bad_magic(self):
        with pytest.raises(ValueError):
            from_bytes(b"XXXX" + bytes(8))

    def test_rank_limit(self):
        with pytest.raises(ShapeError):
            to_bytes(np.ones((1, 1, 1, 1, 1)))
