import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spectral_cnn.spectra import (CALIB_BAND_MASK, BandMask, DegenerateSpectrumError,
                                  Spectrum, WavelengthAxis, apply_band_mask, default_axis,
                                  l2_distance, normalize_l2, normalize_max)


def spec(values, wl=None):
    values = np.asarray(values, dtype=float)
    wl = np.arange(values.size, dtype=float) + 300.0 if wl is None else wl
    return Spectrum(WavelengthAxis(wl), values)


positive = arrays(np.float64, st.integers(2, 40),
                  elements=st.floats(0.01, 100.0, allow_nan=False))


class TestContainers:
    def test_axis_must_increase(self):
        with pytest.raises(ValueError):
            WavelengthAxis([300.0, 300.0, 301.0])

    def test_gap_axis_allowed(self):
        ax = WavelengthAxis([240.0, 300.0, 390.0])
        assert len(ax) == 3 and ax.min == 240.0 and ax.max == 390.0

    def test_length_must_match_axis(self):
        with pytest.raises(ValueError, match="length"):
            Spectrum(WavelengthAxis([1.0, 2.0]), [1.0, 2.0, 3.0])

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            spec([1.0, np.nan])

    def test_spectrum_is_immutable(self):
        s = spec([1.0, 2.0])
        with pytest.raises(ValueError):
            s.intensities[0] = 5.0

    def test_default_axis_layout(self):
        ax = default_axis(512)
        assert len(ax) == 512
        assert ax.min == 240.0 and ax.max == 905.0
        assert not np.any((ax.values > 340.0) & (ax.values < 382.0))
        assert len(ax.detector_boundaries) == 3


class TestNormalization:
    @pytest.mark.parametrize("x, expected", [
        ([2, 4], [0.5, 1.0]),
        ([1, 1, 1], [1, 1, 1]),
        ([0.3, 0.6, 0.15], [0.5, 1.0, 0.25]),
    ])
    def test_max_examples(self, x, expected):
        np.testing.assert_allclose(normalize_max(spec(x)).intensities, expected, rtol=1e-15)

    @pytest.mark.parametrize("x, expected", [
        ([3, 4], [0.6, 0.8]),
        ([1, 0, 0], [1, 0, 0]),
        ([2, 2, 2, 2], [0.5, 0.5, 0.5, 0.5]),
    ])
    def test_l2_examples(self, x, expected):
        np.testing.assert_allclose(normalize_l2(spec(x)).intensities, expected, rtol=1e-15)

    @pytest.mark.parametrize("x", [[0, 0, 0], [-1, -2, 0]])
    def test_max_degenerate(self, x):
        with pytest.raises(DegenerateSpectrumError, match="degenerate spectrum"):
            normalize_max(spec(x))

    def test_l2_degenerate(self):
        with pytest.raises(DegenerateSpectrumError, match="degenerate spectrum"):
            normalize_l2(spec([0.0, 0.0]))

    def test_axis_unchanged(self):
        s = spec([1.0, 3.0])
        assert normalize_max(s).axis == s.axis

    @given(positive, st.floats(1e-3, 1e3))
    def test_max_scale_invariance(self, x, c):
        a = normalize_max(spec(x)).intensities
        b = normalize_max(spec(c * x)).intensities
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)
        assert a.max() == 1.0

    @given(positive)
    def test_l2_idempotent(self, x):
        once = normalize_l2(spec(x))
        twice = normalize_l2(once)
        np.testing.assert_allclose(twice.intensities, once.intensities, atol=1e-12)
        assert abs(np.linalg.norm(once.intensities) - 1.0) < 1e-12


class TestBandMask:
    def test_example(self):
        s = spec([1.0, 2.0, 3.0], np.array([240.0, 245.0, 250.0]))
        out = apply_band_mask(s, BandMask([(240.811, 246.635)]))
        np.testing.assert_array_equal(out.wavelengths, [240.0, 250.0])
        np.testing.assert_array_equal(out.intensities, [1.0, 3.0])

    def test_endpoints_inclusive(self):
        s = spec([1.0, 2.0, 3.0], np.array([240.811, 241.0, 246.635]))
        assert len(apply_band_mask(s, BandMask([(240.811, 246.635)]))) == 0

    def test_empty_mask_identity(self):
        s = spec([1.0, 2.0])
        assert apply_band_mask(s, BandMask()) == s

    def test_bad_interval(self):
        with pytest.raises(ValueError):
            BandMask([(5.0, 1.0)])

    def test_calib_mask_on_default_axis(self):
        ax = default_axis(512)
        s = Spectrum(ax, np.ones(512))
        out = apply_band_mask(s, CALIB_BAND_MASK)
        assert 0 < len(out) < 512
        assert not np.any((out.wavelengths >= 849.0) & (out.wavelengths <= 905.574))
        # detector ranges re-indexed onto the surviving bins
        assert out.axis.detector_boundaries[-1][1] == len(out)

    @given(arrays(np.float64, st.integers(1, 50), elements=st.floats(200, 1000)),
           st.lists(st.tuples(st.floats(200, 1000), st.floats(0, 100)), max_size=4))
    def test_idempotent_and_ordered(self, wl, bands):
        wl = np.unique(wl)
        mask = BandMask([(lo, lo + w) for lo, w in bands])
        s = spec(np.arange(wl.size, dtype=float), wl)
        once = apply_band_mask(s, mask)
        assert apply_band_mask(once, mask) == once
        assert np.all(np.diff(once.intensities) > 0)  # original order preserved
        for lo, hi in mask.excluded:
            assert not np.any((once.wavelengths >= lo) & (once.wavelengths <= hi))


class TestDistance:
    @pytest.mark.parametrize("a, b, d", [
        ([1.0, 2.0], [1.0, 2.0], 0.0),
        ([1.0, 0.0], [0.0, 0.0], 1.0),
        ([1.0, 3.0], [0.0, 0.0], np.sqrt(10.0)),
    ])
    def test_examples(self, a, b, d):
        assert l2_distance(spec(a), spec(b)) == pytest.approx(d, rel=1e-15)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            l2_distance(spec([1.0]), spec([1.0, 2.0]))

    def test_axis_mismatch(self):
        with pytest.raises(ValueError, match="axes"):
            l2_distance(spec([1.0, 2.0]), spec([1.0, 2.0], np.array([1.0, 2.0])))

    @given(st.integers(0, 2**31))
    def test_triangle_inequality(self, seed):
        r = np.random.default_rng(seed)
        a, b, c = (spec(r.normal(size=8)) for _ in range(3))
        assert l2_distance(a, c) <= l2_distance(a, b) + l2_distance(b, c) + 1e-12
