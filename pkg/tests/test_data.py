import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from minet.data import (
    HazeParams,
    ManifestError,
    PPMError,
    decode_ppm,
    encode_ppm,
    from_batch,
    load_dataset,
    load_ppm,
    make_dataset,
    make_depth,
    quantize,
    read_manifest,
    save_ppm,
    synthesize_haze,
    to_batch,
    transmission,
    write_dataset,
)


class TestScattering:
    def test_clear_air_returns_scene(self, rng):
        R = rng.random((5, 4, 3))
        np.testing.assert_array_equal(synthesize_haze(R, np.ones((5, 4)), HazeParams(0.0, 0.8)), R)

    def test_far_field_is_airlight(self, rng):
        R = rng.random((3, 3, 3))
        out = synthesize_haze(R, np.full((3, 3), 1e4), HazeParams(1.0, 0.7))
        np.testing.assert_allclose(out, 0.7, atol=1e-12)

    def test_half_transmission(self):
        out = synthesize_haze(np.full((1, 1, 3), 0.5), np.full((1, 1), math.log(2)), HazeParams(1.0, 1.0))
        np.testing.assert_allclose(out, 0.75, rtol=1e-15)

    def test_transmission_values(self):
        np.testing.assert_allclose(transmission(np.array([0.0, 1.0]), 2.0), [1.0, math.exp(-2)])

    def test_invalid_params(self):
        with pytest.raises(ValueError):
            HazeParams(-0.1, 0.5)
        with pytest.raises(ValueError):
            HazeParams(1.0, 1.2)

    def test_shape_errors(self, rng):
        with pytest.raises(ValueError):
            synthesize_haze(rng.random((4, 4)), np.ones((4, 4)), HazeParams(1, 1))
        with pytest.raises(ValueError):
            synthesize_haze(rng.random((4, 4, 3)), np.ones((4, 5)), HazeParams(1, 1))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), b1=st.floats(0, 3), b2=st.floats(0, 3), A=st.floats(0, 1))
def test_haze_is_between_scene_and_airlight_and_monotone(seed, b1, b2, A):
    r = np.random.default_rng(seed)
    R = r.random((4, 5, 3))
    d = r.random((4, 5)) * 2
    lo_b, hi_b = sorted((b1, b2))
    lo = synthesize_haze(R, d, HazeParams(lo_b, A))
    hi = synthesize_haze(R, d, HazeParams(hi_b, A))
    tol = 1e-12
    assert np.all(lo >= np.minimum(R, A) - tol) and np.all(lo <= np.maximum(R, A) + tol)
    # thicker haze moves every pixel toward the airlight
    assert np.all(np.abs(hi - A) <= np.abs(lo - A) + tol)


class TestDepth:
    def test_ramp(self):
        d = make_depth("ramp", 2, 3, 1.0)
        np.testing.assert_allclose(d, [[0, 0.5, 1.0]] * 2)

    def test_radial_centre_zero(self):
        d = make_depth("radial", 5, 5, 2.0)
        assert d[2, 2] == 0.0 and abs(d.max() - 2.0) < 1e-12

    def test_constant(self):
        assert np.all(make_depth("constant", 3, 2, 0.7) == 0.7)

    def test_unknown(self):
        with pytest.raises(ValueError, match="unknown depth"):
            make_depth("spiral", 3, 3)


class TestPPM:
    def test_zero_image(self):
        buf = encode_ppm(np.zeros((2, 2, 3)))
        assert buf == b"P6\n2 2\n255\n" + bytes(12)

    def test_half_rounds_up(self):
        assert quantize(np.array([0.5]))[0] == 128
        assert decode_ppm(encode_ppm(np.full((1, 1, 3), 0.5)))[0, 0, 0] == 128 / 255

    def test_roundtrip_within_half_step(self, rng):
        for _ in range(100):
            img = rng.random((int(rng.integers(1, 9)), int(rng.integers(1, 9)), 3))
            back = decode_ppm(encode_ppm(img))
            assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12

    def test_quantized_roundtrip_exact(self, rng, tmp_path):
        img = quantize(rng.random((6, 7, 3))) / 255.0
        save_ppm(tmp_path / "a.ppm", img)
        np.testing.assert_array_equal(load_ppm(tmp_path / "a.ppm"), img)

    def test_header_comments(self):
        buf = b"P6 # comment\n1 1\n# another\n255\n\x00\x80\xff"
        np.testing.assert_allclose(decode_ppm(buf)[0, 0], [0, 128 / 255, 1.0])

    @pytest.mark.parametrize(
        "buf, msg",
        [
            (b"P3\n1 1\n255\n000", "magic"),
            (b"P6\n1 1\n65535\n" + bytes(6), "maxval"),
            (b"P6\n2 2\n255\n" + bytes(5), "truncated"),
            (b"P6\n2", "malformed"),
            (b"P6\nx 2\n255\n" + bytes(12), "malformed"),
        ],
    )
    def test_malformed(self, buf, msg):
        with pytest.raises(PPMError, match=msg):
            decode_ppm(buf)

    def test_encode_rejects_gray(self):
        with pytest.raises(ValueError):
            encode_ppm(np.zeros((2, 2)))


class TestDataset:
    def test_deterministic(self):
        a, b = make_dataset(7, 3, 8, 8), make_dataset(7, 3, 8, 8)
        for p, q in zip(a, b):
            assert np.array_equal(p.hazy, q.hazy) and p.beta == q.beta

    def test_pairs_depend_on_index_only(self):
        full = make_dataset(3, 5, 8, 8)
        tail = make_dataset(3, 2, 8, 8, start=3)
        assert np.array_equal(full[3].clean, tail[0].clean)

    def test_ranges(self):
        for p in make_dataset(11, 20, 12, 10, beta_range=(0.5, 1.0), A_range=(0.8, 0.9)):
            assert p.hazy.shape == p.clean.shape == (12, 10, 3)
            assert 0.5 <= p.beta <= 1.0 and 0.8 <= p.A <= 0.9
            assert p.hazy.min() >= 0 and p.hazy.max() <= 1
            assert p.clean.min() >= 0 and p.clean.max() <= 1

    def test_bad_ranges(self):
        with pytest.raises(ValueError):
            make_dataset(0, 1, 4, 4, beta_range=(2.0, 1.0))
        with pytest.raises(ValueError):
            make_dataset(0, 1, 4, 4, A_range=(0.5, 1.5))

    def test_manifest_roundtrip(self, tmp_path):
        pairs = make_dataset(5, 3, 6, 6)
        manifest = write_dataset(tmp_path / "ds", pairs)
        loaded = load_dataset(manifest)
        assert len(loaded) == 3
        for p, q in zip(pairs, loaded):
            assert q.beta == p.beta and q.A == p.A and q.depth_kind == p.depth_kind
            np.testing.assert_array_equal(q.clean, quantize(p.clean) / 255.0)

    def test_manifest_errors_name_line(self, tmp_path):
        m = tmp_path / "m.tsv"
        m.write_text("a.ppm\tb.ppm\t1.0\t0.9\tramp\n\na.ppm\tb.ppm\tbad\n")
        with pytest.raises(ManifestError, match=r"m\.tsv:3"):
            read_manifest(m)
        m.write_text("a.ppm\tb.ppm\tx\t0.9\tramp\n")
        with pytest.raises(ManifestError, match=":1: beta"):
            read_manifest(m)

    def test_batch_roundtrip(self, rng):
        imgs = [rng.random((4, 5, 3)) for _ in range(2)]
        batch = to_batch(imgs)
        assert batch.shape == (2, 3, 4, 5)
        assert batch[1, 2, 3, 4] == imgs[1][3, 4, 2]
        for a, b in zip(imgs, from_batch(batch)):
            np.testing.assert_array_equal(a, b)
