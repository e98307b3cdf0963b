"""EDF round trips, phase labeling, segmentation oracle, folds."""

import numpy as np
import pytest

from spiking_conformer.data import (
    Dataset,
    EdfError,
    EdfSignal,
    PhaseInterval,
    SeizureAnnotation,
    balance,
    digital_payload,
    extract_phases,
    from_segments,
    kfold_split,
    load_dataset,
    parse_edf,
    read_annotations_csv,
    save_dataset,
    segment_count,
    segment_interval,
    standardize_recording,
    write_annotations_csv,
    write_edf,
)
from spiking_conformer.synthetic import make_separable_dataset, make_synthetic_edf


def _headers(n_ch, spr=256, dig_min=-32768, dig_max=32767):
    return [
        EdfSignal(label=f"EEG CH{c:02d}", phys_min=-1000.0, phys_max=1000.0,
                  dig_min=dig_min, dig_max=dig_max, samples_per_record=spr)
        for c in range(n_ch)
    ]


class TestEdfRoundTrip:
    def test_two_record_fixture(self, tmp_path):
        rng = np.random.default_rng(0)
        digital = rng.integers(-32768, 32768, size=(1, 512), dtype=np.int64).astype(np.int16)
        path = tmp_path / "one.edf"
        write_edf(path, digital, _headers(1))
        rec = parse_edf(path)
        assert rec.samples.shape == (1, 512)
        assert rec.fs == 256.0
        assert rec.n_records == 2
        np.testing.assert_array_equal(rec.digital, digital)

    def test_payload_byte_identical(self, tmp_path):
        rng = np.random.default_rng(1)
        digital = rng.integers(-2000, 2000, size=(3, 1024)).astype(np.int16)
        path = tmp_path / "multi.edf"
        write_edf(path, digital, _headers(3))
        raw = path.read_bytes()
        header_bytes = 256 + 256 * 3
        rec = parse_edf(path, n_channels=3)
        rebuilt = digital_payload(rec.digital, rec.signal_headers[0].samples_per_record)
        assert rebuilt == raw[header_bytes:]

    def test_calibration_linear(self, tmp_path):
        # symmetric digital range maps digital 0 to the physical midpoint
        headers = _headers(1, dig_min=-32767, dig_max=32767)
        digital = np.array([[-32767, 0, 32767]], dtype=np.int16)
        path = tmp_path / "cal.edf"
        write_edf(path, np.tile(digital, (1, 256)), headers)
        rec = parse_edf(path, n_channels=1)
        assert abs(rec.samples[0, 0] - (-1000.0)) <= 1e-9
        assert abs(rec.samples[0, 1] - 0.0) <= 1e-9
        assert abs(rec.samples[0, 2] - 1000.0) <= 1e-9

    def test_asymmetric_range_near_midpoint(self, tmp_path):
        headers = _headers(1)  # -32768..32767
        digital = np.zeros((1, 256), dtype=np.int16)
        path = tmp_path / "asym.edf"
        write_edf(path, digital, headers)
        rec = parse_edf(path, n_channels=1)
        lsb = 2000.0 / 65535.0
        assert abs(rec.samples[0, 0]) <= lsb  # within one step of center

    def test_first_22_of_23_channels(self, tmp_path):
        rng = np.random.default_rng(2)
        digital = rng.integers(-100, 100, size=(23, 256)).astype(np.int16)
        path = tmp_path / "many.edf"
        write_edf(path, digital, _headers(23))
        rec = parse_edf(path)
        assert rec.samples.shape[0] == 22
        assert rec.channels == [f"EEG CH{c:02d}" for c in range(22)]

    def test_truncated_rejected(self, tmp_path):
        digital = np.zeros((2, 512), dtype=np.int16)
        path = tmp_path / "t.edf"
        write_edf(path, digital, _headers(2))
        raw = path.read_bytes()
        (tmp_path / "trunc.edf").write_bytes(raw[:-100])
        with pytest.raises(EdfError):
            parse_edf(tmp_path / "trunc.edf")

    def test_discontinuous_rejected(self, tmp_path):
        digital = np.zeros((1, 256), dtype=np.int16)
        path = tmp_path / "d.edf"
        write_edf(path, digital, _headers(1))
        raw = bytearray(path.read_bytes())
        raw[192:197] = b"EDF+D"
        (tmp_path / "plusd.edf").write_bytes(bytes(raw))
        with pytest.raises(EdfError):
            parse_edf(tmp_path / "plusd.edf")

    def test_synthetic_generator_parses(self, tmp_path):
        path = tmp_path / "synth.edf"
        make_synthetic_edf(path, duration_s=60.0, seizures=[(10.0, 20.0)])
        rec = parse_edf(path)
        assert rec.fs == 256.0
        assert rec.samples.shape == (22, 60 * 256)
        # ictal span carries far more power than background
        ictal = rec.samples[:, 10 * 256 : 20 * 256]
        background = rec.samples[:, : 10 * 256]
        assert ictal.std() > 3 * background.std()


class TestAnnotations:
    def test_csv_roundtrip(self, tmp_path):
        anns = [SeizureAnnotation("case01", 100.0, 140.0),
                SeizureAnnotation("case02", 7.5, 20.25)]
        path = tmp_path / "ann.csv"
        write_annotations_csv(path, anns)
        assert read_annotations_csv(path) == anns

    def test_invalid_interval(self):
        with pytest.raises(ValueError):
            SeizureAnnotation("x", 10.0, 10.0)


def _recording(duration_s=4000.0, fs=256.0):
    n = int(duration_s * fs)
    from spiking_conformer.data import EegRecording

    return EegRecording(
        case_id="case01", channels=[f"c{i}" for i in range(22)], fs=fs,
        samples=np.zeros((22, n)), digital=np.zeros((22, n), dtype=np.int16),
        signal_headers=_headers(22), n_records=int(duration_s),
        record_duration=1.0,
    )


class TestPhases:
    def test_standard_preictal(self):
        rec = _recording()
        phases = extract_phases(rec, [SeizureAnnotation("case01", 1000.0, 1040.0)])
        pre = [p for p in phases if p.phase == "pre_ictal"][0]
        assert (pre.start_s, pre.end_s) == (100.0, 1000.0)
        ictal = [p for p in phases if p.phase == "ictal"][0]
        assert (ictal.start_s, ictal.end_s) == (1000.0, 1040.0)

    def test_truncated_at_recording_start(self):
        rec = _recording()
        phases = extract_phases(rec, [SeizureAnnotation("case01", 300.0, 340.0)])
        pre = [p for p in phases if p.phase == "pre_ictal"][0]
        assert (pre.start_s, pre.end_s) == (0.0, 300.0)

    def test_truncated_by_prior_seizure(self):
        rec = _recording()
        phases = extract_phases(rec, [
            SeizureAnnotation("case01", 1000.0, 1040.0),
            SeizureAnnotation("case01", 1500.0, 1520.0),
        ])
        pres = [p for p in phases if p.phase == "pre_ictal"]
        assert (pres[1].start_s, pres[1].end_s) == (1040.0, 1500.0)

    def test_no_annotations_all_interictal(self):
        rec = _recording()
        phases = extract_phases(rec, [])
        assert len(phases) == 1
        assert phases[0].phase == "inter_ictal"
        assert (phases[0].start_s, phases[0].end_s) == (0.0, 4000.0)

    def test_interictal_guard(self):
        rec = _recording(duration_s=6000.0)
        phases = extract_phases(
            rec, [SeizureAnnotation("case01", 1000.0, 1040.0)], guard_s=1800.0
        )
        inters = [p for p in phases if p.phase == "inter_ictal"]
        for iv in inters:
            # at least guard away from the pre-ictal start and post-ictal window
            assert iv.end_s <= 100.0 - 1800.0 or iv.start_s >= 1040.0 + 1800.0

    def test_phase_disjointness(self):
        rec = _recording(duration_s=9000.0)
        phases = extract_phases(rec, [
            SeizureAnnotation("case01", 2000.0, 2050.0),
            SeizureAnnotation("case01", 6000.0, 6100.0),
        ])
        spans = sorted([(p.start_s, p.end_s) for p in phases])
        for (s1, e1), (s2, e2) in zip(spans, spans[1:]):
            assert e1 <= s2 + 1e-9

    def test_overlapping_annotations_rejected(self):
        rec = _recording()
        with pytest.raises(ValueError):
            extract_phases(rec, [
                SeizureAnnotation("case01", 100.0, 200.0),
                SeizureAnnotation("case01", 150.0, 250.0),
            ])


class TestSegmentation:
    def test_ictal_36(self):
        rec = _recording()
        iv = PhaseInterval("ictal", 1000.0, 1040.0, "case01")
        segs = segment_interval(iv, rec, stride_s=1.0)
        assert len(segs) == 36
        assert all(s.data.shape == (22, 1280) for s in segs)
        assert all(s.label == 0 for s in segs)

    def test_exact_fit(self):
        rec = _recording()
        iv = PhaseInterval("inter_ictal", 0.0, 5.0, "case01")
        segs = segment_interval(iv, rec, stride_s=5.0)
        assert len(segs) == 1 and segs[0].label == 1

    def test_window_does_not_fit(self):
        rec = _recording()
        iv = PhaseInterval("ictal", 0.0, 4.0, "case01")
        assert segment_interval(iv, rec, stride_s=1.0) == []

    def test_counts_match_brute_force(self):
        rng = np.random.default_rng(3)
        for _ in range(2000):
            length = int(rng.integers(1, 2000))
            window = int(rng.integers(1, 50))
            stride = int(rng.integers(1, 40))
            brute = 0
            start = 0
            while start + window <= length:
                brute += 1
                start += stride
            assert segment_count(length, window, stride) == brute

    def test_segments_stay_inside_interval(self):
        rec = _recording()
        iv = PhaseInterval("pre_ictal", 107.0, 193.0, "case01")
        segs = segment_interval(iv, rec, stride_s=2.5)
        end_sample = int(193.0 * 256)
        for s in segs:
            assert s.source[1] >= int(107.0 * 256)
            assert s.source[1] + 1280 <= end_sample

    def test_stride_validation(self):
        rec = _recording()
        iv = PhaseInterval("ictal", 0.0, 40.0, "case01")
        with pytest.raises(ValueError):
            segment_interval(iv, rec, stride_s=0.0)


class TestBalance:
    def _segments(self, n, label):
        from spiking_conformer.data import Segment

        return [
            Segment(data=np.full((22, 1280), float(i)), label=label,
                    source=("f", i))
            for i in range(n)
        ]

    def test_majority_subsampled(self):
        ds = balance(self._segments(100, 0), self._segments(300, 1), seed=0)
        assert int((ds.y == 0).sum()) == 100
        assert int((ds.y == 1).sum()) == 100

    def test_already_balanced_unchanged(self):
        ds = balance(self._segments(50, 0), self._segments(50, 1), seed=0)
        assert len(ds) == 100

    def test_deterministic(self):
        a = balance(self._segments(20, 0), self._segments(90, 1), seed=7)
        b = balance(self._segments(20, 0), self._segments(90, 1), seed=7)
        assert [s for s in a.sources] == [s for s in b.sources]
        np.testing.assert_array_equal(a.X, b.X)

    def test_ratio_tolerance(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            n_pos = int(rng.integers(20, 400))
            n_neg = int(rng.integers(20, 400))
            ds = balance(self._segments(n_pos, 0), self._segments(n_neg, 1), seed=1)
            p = int((ds.y == 0).sum())
            n = int((ds.y == 1).sum())
            assert abs(p / n - 1.0) <= 0.05

    def test_empty_class_rejected(self):
        with pytest.raises(ValueError):
            balance([], self._segments(5, 1))


class TestKfold:
    def test_ten_of_ten(self):
        folds = kfold_split(10, k=10, seed=0)
        assert len(folds) == 10
        assert all(len(test) == 1 for _, test in folds)

    def test_remainder_distribution(self):
        folds = kfold_split(103, k=10, seed=0)
        sizes = sorted(len(test) for _, test in folds)
        assert sizes == [10] * 7 + [11] * 3

    def test_partition_property(self):
        for seed in range(5):
            folds = kfold_split(57, k=10, seed=seed)
            all_test = np.concatenate([test for _, test in folds])
            assert len(all_test) == 57
            assert len(np.unique(all_test)) == 57
            for train, test in folds:
                assert len(np.intersect1d(train, test)) == 0
                assert len(train) + len(test) == 57

    def test_k_validation(self):
        with pytest.raises(ValueError):
            kfold_split(10, k=1)
        with pytest.raises(ValueError):
            kfold_split(5, k=10)


class TestDatasetIo:
    def test_save_load_roundtrip(self, tmp_path):
        ds = make_separable_dataset(12, seed=0)
        ds.folds = kfold_split(12, k=3, seed=0)
        save_dataset(ds, tmp_path)
        loaded = load_dataset(tmp_path)
        np.testing.assert_array_equal(loaded.X, ds.X)
        np.testing.assert_array_equal(loaded.y, ds.y)
        assert len(loaded.folds) == 3
        for (ta, sa), (tb, sb) in zip(ds.folds, loaded.folds):
            np.testing.assert_array_equal(sa, sb)
            np.testing.assert_array_equal(ta, tb)

    def test_standardize(self, tmp_path):
        path = tmp_path / "s.edf"
        make_synthetic_edf(path, duration_s=30.0, seizures=[])
        rec = standardize_recording(parse_edf(path))
        np.testing.assert_allclose(rec.samples.mean(axis=1), 0.0, atol=1e-9)
        np.testing.assert_allclose(rec.samples.std(axis=1), 1.0, atol=1e-9)

    def test_segment_invariants(self):
        ds = make_separable_dataset(8, seed=1)
        assert ds.X.shape[1:] == (22, 1280)
        assert np.all(np.isfinite(ds.X))
