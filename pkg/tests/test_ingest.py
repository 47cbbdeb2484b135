import numpy as np
import pytest

from sapsim.ingest import (IngestError, TemperatureSeries, load_csv, sample,
                           sample_kelvin, smooth, synthetic_series,
                           synthetic_sinusoid, zero_crossings)


def write(tmp_path, text, name="t.csv"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return str(path)


class TestLoadCsv:
    def test_two_row_file(self, tmp_path):
        s = load_csv(write(tmp_path, "time,temp_c\n0,5.0\n900,6.0\n"))
        assert len(s) == 2
        assert s.cadence == 900.0
        assert s.provenance == "raw"
        assert s.temps_c[1] == 6.0

    def test_iso_timestamps(self, tmp_path):
        s = load_csv(write(tmp_path,
                           "time,temp_c\n"
                           "2010-03-01T00:00:00,1.0\n"
                           "2010-03-01T00:15:00,2.0\n"
                           "2010-03-01T00:30:00,1.5\n"))
        assert len(s) == 3
        assert np.allclose(np.diff(s.times), 900.0)

    def test_out_of_order_names_line(self, tmp_path):
        with pytest.raises(IngestError, match="line 3"):
            load_csv(write(tmp_path, "time,temp_c\n900,5.0\n0,6.0\n"))

    def test_duplicate_time_rejected(self, tmp_path):
        with pytest.raises(IngestError, match="duplicate"):
            load_csv(write(tmp_path, "time,temp_c\n0,5.0\n0,6.0\n"))

    def test_bad_value_names_line(self, tmp_path):
        with pytest.raises(IngestError, match="line 2"):
            load_csv(write(tmp_path, "time,temp_c\n0,warm\n900,5\n"))

    def test_empty_and_headerless_files(self, tmp_path):
        with pytest.raises(IngestError):
            load_csv(write(tmp_path, ""))
        with pytest.raises(IngestError, match="header"):
            load_csv(write(tmp_path, "0,5.0\n900,6.0\n"))
        with pytest.raises(IngestError, match="no data"):
            load_csv(write(tmp_path, "time,temp_c\n"))

    def test_month_long_cadence_900_count(self, tmp_path):
        t = np.arange(33 * 96 + 1) * 900.0
        rows = "".join(f"{int(ti)},{5 + 0.1 * (i % 7)}\n" for i, ti in enumerate(t))
        s = load_csv(write(tmp_path, "time,temp_c\n" + rows))
        assert len(s) == 3169

    def test_gap_rejection_and_bridging(self, tmp_path):
        text = "time,temp_c\n0,1\n900,2\n1800,3\n5400,4\n6300,5\n"
        with pytest.raises(IngestError, match="gap"):
            load_csv(write(tmp_path, text))
        s = load_csv(write(tmp_path, text), allow_gaps=True)
        assert np.all(np.diff(s.times) <= 1800.0)
        # bridged samples interpolate linearly
        assert sample(s, 3600.0) == pytest.approx(3 + (4 - 3) * 1800 / 3600)


class TestSmooth:
    def test_constant_series_fixed_point(self):
        s = TemperatureSeries(np.arange(10.0) * 900, np.full(10, 4.2))
        out = smooth(s, 25)
        assert np.array_equal(out.temps_c, s.temps_c)

    def test_single_pass_kernel(self):
        s = TemperatureSeries(np.arange(3.0), np.array([0.0, 1.0, 0.0]))
        out = smooth(s, 1)
        assert np.allclose(out.temps_c, [0.0, 0.5, 0.0])

    def test_ten_passes_match_bruteforce_convolution(self):
        n = 21
        v = np.zeros(n)
        v[10] = 1.0
        s = TemperatureSeries(np.arange(float(n)) * 900, v)
        out = smooth(s, 10)
        ref = v.copy()
        for _ in range(10):
            nxt = ref.copy()
            for i in range(1, n - 1):
                nxt[i] = 0.25 * ref[i - 1] + 0.5 * ref[i] + 0.25 * ref[i + 1]
            ref = nxt
        assert np.array_equal(out.temps_c, ref)
        assert out.provenance == "smoothed(10)"

    def test_endpoints_held_fixed(self):
        rng = np.random.RandomState(0)
        s = TemperatureSeries(np.arange(50.0) * 900, rng.uniform(-10, 10, 50))
        out = smooth(s, 10)
        assert out.temps_c[0] == s.temps_c[0]
        assert out.temps_c[-1] == s.temps_c[-1]

    def test_pass_additivity_exact(self):
        rng = np.random.RandomState(1)
        s = TemperatureSeries(np.arange(40.0) * 900, rng.uniform(-5, 5, 40))
        a_then_b = smooth(smooth(s, 3), 7)
        once = smooth(s, 10)
        assert np.array_equal(a_then_b.temps_c, once.temps_c)
        assert a_then_b.provenance == once.provenance == "smoothed(10)"

    def test_max_norm_contraction(self):
        rng = np.random.RandomState(2)
        s = TemperatureSeries(np.arange(64.0) * 900, rng.uniform(-7, 7, 64))
        out = smooth(s, 10)
        assert np.abs(out.temps_c).max() <= np.abs(s.temps_c).max() + 1e-15

    def test_too_short(self):
        s = TemperatureSeries(np.array([0.0, 900.0]), np.array([1.0, 2.0]))
        with pytest.raises(IngestError):
            smooth(s, 1)


class TestSyntheticSinusoid:
    def test_reference_values(self):
        assert synthetic_sinusoid(0.0) == pytest.approx(5.0)
        assert synthetic_sinusoid(21600.0) == pytest.approx(-10.0)
        assert synthetic_sinusoid(64800.0) == pytest.approx(20.0)

    def test_range(self):
        t = np.linspace(0, 5 * 86400, 200001)
        v = synthetic_sinusoid(t)
        assert v.min() == pytest.approx(-10.0, abs=1e-6)
        assert v.max() == pytest.approx(20.0, abs=1e-6)

    def test_series_builder(self):
        s = synthetic_series(5 * 86400.0)
        assert s.provenance == "synthetic"
        assert s.times[-1] >= 5 * 86400.0


class TestSampleAndCrossings:
    def test_sample_hits_nodes_exactly(self):
        s = TemperatureSeries(np.array([0.0, 900.0, 1800.0]),
                              np.array([1.0, -2.0, 4.0]))
        for t, v in zip(s.times, s.temps_c):
            assert sample(s, t) == v

    def test_sample_clamps_beyond_ends(self):
        s = TemperatureSeries(np.array([0.0, 900.0]), np.array([1.0, 2.0]))
        assert sample(s, -50.0) == 1.0
        assert sample(s, 5000.0) == 2.0
        assert sample_kelvin(s, 0.0) == pytest.approx(274.15)

    def test_single_segment_crossing_midpoint(self):
        s = TemperatureSeries(np.array([0.0, 900.0]), np.array([-1.0, 1.0]))
        ev = zero_crossings(s)
        assert len(ev) == 1
        t, kind = ev[0]
        assert t == pytest.approx(450.0)
        assert kind == "thaw"

    def test_five_day_sinusoid_has_ten_alternating_events(self):
        s = synthetic_series(5 * 86400.0)
        ev = zero_crossings(s)
        assert len(ev) == 10
        kinds = [k for _, k in ev]
        assert kinds == ["freeze", "thaw"] * 5

    def test_threshold_shift_invariance(self):
        rng = np.random.RandomState(3)
        vals = np.cumsum(rng.uniform(-1, 1, 300))
        s = TemperatureSeries(np.arange(300.0) * 900, vals)
        base = zero_crossings(s, threshold=0.0)
        shifted = TemperatureSeries(s.times, s.temps_c + 3.5)
        moved = zero_crossings(shifted, threshold=3.5)
        assert len(base) == len(moved)
        for (t1, k1), (t2, k2) in zip(base, moved):
            assert t1 == pytest.approx(t2, abs=1e-6)
            assert k1 == k2

    def test_series_validation(self):
        with pytest.raises(IngestError):
            TemperatureSeries(np.array([0.0, 0.0]), np.array([1.0, 2.0]))
        with pytest.raises(IngestError):
            TemperatureSeries(np.array([0.0, 900.0]), np.array([1.0, np.nan]))
        with pytest.raises(IngestError):
            TemperatureSeries(np.array([]), np.array([]))
