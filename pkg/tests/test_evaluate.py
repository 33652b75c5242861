import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from spectral_cnn.dataio import DataFormatError
from spectral_cnn.evaluate import (DISTANCE_BINS, calib_report, distance_bin_index,
                                   eval_by_distance, eval_calib_rmse, eval_preproc,
                                   fit_line, preproc_errors, read_report_csv,
                                   scatter_export, unit_l2_rows, write_report_csv)
from spectral_cnn.models import NetConfig, PreprocNet
from spectral_cnn.records import ShotRecord
from spectral_cnn.spectra import Spectrum, WavelengthAxis

AX = WavelengthAxis([300.0, 301.0, 302.0, 303.0])


def shot(i, raw, clean, d=2.5):
    return ShotRecord(f"s{i}", "t", "x", d, Spectrum(AX, raw), clean_1b=Spectrum(AX, clean))


def zero_residual_net_for(recs):
    n = len(recs[0].raw)
    net = PreprocNet(NetConfig(input_length=n, depth=3, width=4), np.random.default_rng(0))
    net.last.weight[:] = 0
    net.last.bias[:] = 0
    return net.eval()


class TestPreproc:
    def test_perfect_net_scores_zero(self):
        data = [shot(0, [1, 2, 3, 4], [1, 2, 3, 4]), shot(1, [0, 1, 0, 1], [0, 2, 0, 2])]
        assert eval_preproc(zero_residual_net_for(data), data).value == pytest.approx(0, abs=1e-15)

    def test_identity_distance_0_3(self):
        # after normalization the pair is 0.3 apart
        x = np.array([1.0, 0, 0, 0])
        theta = 2 * np.arcsin(0.15)
        y = np.array([np.cos(theta), np.sin(theta), 0, 0]) * 7.0
        rep = eval_preproc(None, [shot(0, y, x)])
        assert rep.value == pytest.approx(0.3) and rep.count == 1

    def test_identity_baseline_matches_raw_distance(self, small_manifest):
        recs = small_manifest.records
        raw = np.stack([r.raw.intensities for r in recs])
        clean = np.stack([r.clean_1b.intensities for r in recs])
        expected = np.linalg.norm(unit_l2_rows(raw) - unit_l2_rows(clean), axis=1).mean()
        assert eval_preproc(None, recs).value == pytest.approx(expected)
        assert eval_preproc(zero_residual_net_for(recs), recs).value == pytest.approx(expected)

    def test_missing_labels(self):
        r = ShotRecord("a", "t", "x", 1.0, Spectrum(AX, [1, 2, 3, 4]))
        with pytest.raises(DataFormatError, match="level-1b"):
            eval_preproc(None, [r])

    def test_empty(self):
        with pytest.raises(ValueError):
            eval_preproc(None, [])

    def test_errors_non_negative(self, rng):
        e = preproc_errors(rng.normal(size=(5, 8)), rng.normal(size=(5, 8)))
        assert np.all(e >= 0) and np.all(e <= 2 + 1e-12)


class TestCalibRmse:
    def test_equal_is_zero(self, rng):
        t = rng.uniform(0, 50, (6, 8))
        assert np.array_equal(eval_calib_rmse(t, t), np.zeros(8))

    def test_single_shot(self):
        assert eval_calib_rmse([[3.0, 1.0]], [[1.0, 1.0]]).tolist() == [2.0, 0.0]

    def test_two_shots_sqrt5(self):
        r = eval_calib_rmse([[1.0], [3.0]], [[0.0], [0.0]])
        assert r[0] == pytest.approx(2.2360, abs=1e-4)
        assert r[0] == pytest.approx(np.sqrt(5))

    def test_count_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            eval_calib_rmse(np.zeros((2, 3)), np.zeros((3, 3)))
        with pytest.raises(ValueError, match="mismatch"):
            eval_calib_rmse(np.zeros((2, 3)), np.zeros((2, 4)))

    @given(arrays(np.float64, (7, 3), elements=st.floats(-100, 100)),
           arrays(np.float64, (7, 3), elements=st.floats(-100, 100)),
           st.permutations(range(7)))
    def test_permutation_invariant(self, p, t, perm):
        perm = list(perm)
        a = eval_calib_rmse(p, t)
        b = eval_calib_rmse(p[perm], t[perm])
        assert np.all(a >= 0)
        np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)

    def test_report_baseline_and_total(self):
        truths = np.array([[1.0, 10.0], [3.0, 20.0]])
        rep = calib_report(truths + [[1.0, 0.0], [3.0, 0.0]], truths,
                           train_truths=[[2.0, 15.0]], element_names=("A", "B"))
        np.testing.assert_allclose(rep.rmse, [np.sqrt(5), 0])
        np.testing.assert_allclose(rep.baseline_rmse, [1.0, 5.0])
        assert rep.total_rmse == pytest.approx(np.sqrt(5))
        assert len(rep.rows()) == 4


class TestFitLine:
    @pytest.mark.parametrize("f,slope,intercept", [
        (lambda t: t, 1.0, 0.0),
        (lambda t: t + 5, 1.0, 5.0),
        (lambda t: 2 * t, 2.0, 0.0),
    ])
    def test_examples(self, rng, f, slope, intercept):
        t = rng.uniform(0, 60, 30)
        s, b = fit_line(t, f(t))
        assert s == pytest.approx(slope, abs=1e-12)
        assert b == pytest.approx(intercept, abs=1e-10)

    def test_matches_polyfit(self, rng):
        t, p = rng.normal(size=40), rng.normal(size=40)
        np.testing.assert_allclose(fit_line(t, p), np.polyfit(t, p, 1), rtol=1e-10)

    def test_zero_variance_flagged(self, tmp_path):
        lines = scatter_export([[1.0, 2.0], [3.0, 4.0]], [[5.0, 1.0], [5.0, 2.0]],
                               tmp_path / "s.csv", ("A", "B"))
        assert lines["A"]["defined"] is False and np.isnan(lines["A"]["slope"])
        assert lines["B"]["defined"] is True

    def test_scatter_csv(self, tmp_path, rng):
        t = rng.uniform(0, 50, (5, 2))
        p = t + rng.normal(size=(5, 2))
        scatter_export(p, t, tmp_path / "s.csv", ("A", "B"))
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines[0] == "element,truth,pred"
        assert len(lines) == 1 + 10
        name, tv, pv = lines[1].split(",")
        assert name == "A" and float(tv) == t[0, 0] and float(pv) == p[0, 0]

    def test_scatter_empty(self, tmp_path):
        with pytest.raises(ValueError):
            scatter_export(np.zeros((0, 2)), np.zeros((0, 2)), tmp_path / "s.csv", ("A", "B"))


class TestDistance:
    def test_bins(self):
        assert len(DISTANCE_BINS) == 6
        assert distance_bin_index(1.0) == 0
        assert distance_bin_index(1.999) == 0
        assert distance_bin_index(2.0) == 1
        assert distance_bin_index(6.5) == 5
        assert distance_bin_index(7.0) == 5
        assert distance_bin_index(0.5) == 6
        assert distance_bin_index(7.01) == 6

    def test_all_at_2_5(self):
        data = [shot(i, [1, 2, 3, 4 + i], [1, 2, 3, 4]) for i in range(5)]
        rep = eval_by_distance(None, data)
        assert rep.counts.tolist() == [0, 5, 0, 0, 0, 0, 0]
        assert np.isnan(rep.rmse[0]) and not np.isnan(rep.rmse[1])
        assert rep.labels[1] == "[2,3)" and rep.labels[5] == "[6,7]"

    def test_overflow_not_dropped(self):
        data = [shot(0, [1, 2, 3, 4], [1, 2, 3, 4], d=9.0), shot(1, [1, 2, 3, 5], [1, 2, 3, 4], d=1.5)]
        rep = eval_by_distance(None, data)
        assert rep.counts[-1] == 1 and rep.labels[-1] == "overflow"

    def test_counts_sum(self, small_manifest):
        rep = eval_by_distance(None, small_manifest.records)
        assert rep.counts.sum() == len(small_manifest)
        pooled = eval_preproc(None, small_manifest.records)
        weighted = np.nansum(rep.rmse * rep.counts) / rep.counts.sum()
        assert weighted == pytest.approx(pooled.value)


class TestReportCsv:
    def test_round_trip(self, tmp_path, small_manifest):
        rows = eval_preproc(None, small_manifest.records).rows()
        rows += eval_by_distance(None, small_manifest.records).rows()
        rows += calib_report([[1.0, 2.0]], [[1.5, 2.0]], [[0.0, 0.0]], ("A", "B")).rows()
        write_report_csv(rows, tmp_path / "r.csv")
        back = read_report_csv(tmp_path / "r.csv")
        assert len(back) == len(rows)
        for a, b in zip(rows, back):
            assert a[:3] == b[:3] and a[4] == b[4]
            assert (np.isnan(a[3]) and np.isnan(b[3])) or a[3] == b[3]
        assert (tmp_path / "r.csv").read_text().splitlines()[0] == "metric,split,element_or_bin,value,count"

    def test_bad_header(self, tmp_path):
        (tmp_path / "r.csv").write_text("a,b\n")
        with pytest.raises(DataFormatError):
            read_report_csv(tmp_path / "r.csv")
