import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pdstage import data as D
from pdstage.data import (DataError, ExcludedWalk, ParseError, PipelineOrderError, SubjectInfo,
                          UnknownSubjectError, WalkRecord)

from conftest import make_roster, write_walk


def _record(values, subject="GaPt01", cohort="parkinson"):
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = np.tile(values, (D.SENSOR_COUNT, 1))
    return WalkRecord(subject, "Ga", cohort, "01", np.arange(values.shape[1]) * 0.01, values)


def _normalized(length, rng):
    rec, _ = D.preprocess(_record(rng.normal(size=(D.SENSOR_COUNT, length))))
    return rec


class TestParse:
    def test_three_rows(self, tmp_path, rng):
        path = tmp_path / "GaCo01_01.txt"
        write_walk(path, 3, rng)
        rec = D.parse_vgrf_file(path)
        assert rec.length == 3 and rec.channels.shape == (18, 3)
        assert rec.time.tolist() == [0.0, 0.01, 0.02]

    def test_columns_in_file_order(self, tmp_path):
        path = tmp_path / "GaCo01_01.txt"
        path.write_text(" ".join(str(v) for v in range(19)) + "\n")
        rec = D.parse_vgrf_file(path)
        assert rec.time.tolist() == [0.0]
        assert rec.channels[:, 0].tolist() == list(range(1, 19))

    def test_short_row_names_line(self, tmp_path):
        path = tmp_path / "GaCo01_01.txt"
        good = " ".join(["1"] * 19)
        path.write_text(f"{good}\n{good}\n" + " ".join(["1"] * 18) + "\n")
        with pytest.raises(ParseError, match=r":3: expected 19 columns, found 18") as err:
            D.parse_vgrf_file(path)
        assert err.value.line == 3

    def test_non_numeric(self, tmp_path):
        path = tmp_path / "GaCo01_01.txt"
        path.write_text(" ".join(["x"] + ["1"] * 18) + "\n")
        with pytest.raises(ParseError, match="non-numeric"):
            D.parse_vgrf_file(path)

    def test_empty(self, tmp_path):
        path = tmp_path / "GaCo01_01.txt"
        path.write_text("\n\n")
        with pytest.raises(ParseError, match="empty"):
            D.parse_vgrf_file(path)

    def test_name_grammar(self):
        assert D.parse_walk_name("GaPt07_02.txt") == ("Ga", "parkinson", "GaPt07", "02")
        assert D.parse_walk_name("SiCo12_10.txt") == ("Si", "control", "SiCo12", "10")

    @pytest.mark.parametrize("name", ["XxPt07_02.txt", "GaPt07.txt", "GaPt07_02.csv", "demographics.txt"])
    def test_bad_names(self, name):
        with pytest.raises(DataError):
            D.parse_walk_name(name)

    def test_find_files_filters_and_sorts(self, tmp_path, rng):
        for name in ("JuPt02_01.txt", "GaCo01_01.txt", "notes.txt"):
            write_walk(tmp_path / name, 2, rng)
        assert [p.name for p in D.find_walk_files(tmp_path)] == ["GaCo01_01.txt", "JuPt02_01.txt"]


class TestRecord:
    def test_length_mismatch(self):
        with pytest.raises(DataError):
            WalkRecord("GaCo01", "Ga", "control", "01", np.arange(3), np.zeros((18, 4)))

    def test_cohort_severity_consistency(self):
        with pytest.raises(DataError):
            WalkRecord("GaCo01", "Ga", "control", "01", np.arange(2), np.zeros((18, 2)), severity="stage2")


class TestSeverity:
    TABLE = {
        "GaCo01": SubjectInfo("GaCo01", "control", None),
        "GaPt01": SubjectInfo("GaPt01", "parkinson", 2.0),
        "GaPt02": SubjectInfo("GaPt02", "parkinson", 2.5),
        "GaPt03": SubjectInfo("GaPt03", "parkinson", 3.0),
        "GaPt04": SubjectInfo("GaPt04", "parkinson", 4.0),
    }

    def test_control(self):
        rec = D.attach_severity(_record([1.0], "GaCo01", "control"), self.TABLE)
        assert rec.severity == "healthy" and rec.label == 0

    @pytest.mark.parametrize("subject,label", [("GaPt01", 1), ("GaPt02", 2), ("GaPt03", 3)])
    def test_stages(self, subject, label):
        assert D.attach_severity(_record([1.0], subject), self.TABLE).label == label

    def test_stage4_excluded(self):
        with pytest.raises(ExcludedWalk, match="4.0"):
            D.attach_severity(_record([1.0], "GaPt04"), self.TABLE)

    def test_unknown_subject(self):
        with pytest.raises(UnknownSubjectError):
            D.attach_severity(_record([1.0], "GaPt99"), self.TABLE)

    def test_demographics_formats(self, tmp_path):
        tab = tmp_path / "d.txt"
        tab.write_text("ID\tStudy\tGroup\tHoehnYahr\nGaCo01\tGa\tCO\t\nGaPt01\tGa\tPD\t2.5\n")
        csv_ = tmp_path / "d.csv"
        csv_.write_text("ID,Group,HoehnYahr\nGaCo01,2,0\nGaPt01,1,2.5\n")
        for path in (tab, csv_):
            table = D.load_demographics(path)
            assert table["GaCo01"].group == "control"
            assert table["GaPt01"] == SubjectInfo("GaPt01", "parkinson", 2.5)

    def test_demographics_missing_columns(self, tmp_path):
        path = tmp_path / "d.txt"
        path.write_text("Name Age\nx 3\n")
        with pytest.raises(DataError, match="Hoehn"):
            D.load_demographics(path)


class TestImpute:
    def test_no_gaps(self, rng):
        rec = _record(rng.normal(size=(18, 5)))
        out, count = D.impute_missing(rec)
        assert count == 0 and np.array_equal(out.channels, rec.channels)

    def test_one_cell(self, rng):
        values = rng.normal(size=(18, 5))
        values[3, 2] = np.nan
        out, count = D.impute_missing(_record(values))
        assert count == 1 and out.channels[3, 2] == 0.0

    def test_whole_channel(self, rng):
        values = rng.normal(size=(18, 7))
        values[5] = np.inf
        out, count = D.impute_missing(_record(values))
        assert count == 7 and not out.channels[5].any()


class TestNormalize:
    def test_one_two_three(self):
        out = D.normalize(D.impute_missing(_record([1.0, 2.0, 3.0]))[0]).channels
        np.testing.assert_allclose(out.mean(axis=1), 0, atol=1e-15)
        np.testing.assert_allclose(out.std(axis=1), 1, atol=1e-15)

    def test_constant_channel(self):
        out = D.normalize(D.impute_missing(_record([503.25] * 4))[0]).channels
        assert not out.any()

    @settings(max_examples=60, deadline=None)
    @given(arrays(np.float64, (3, 12), elements=st.floats(-1e4, 1e4)))
    def test_idempotent(self, values):
        once = D.zscore_rows(values)
        np.testing.assert_allclose(D.zscore_rows(once), once, atol=1e-9)
        assert np.isfinite(once).all()

    def test_requires_imputation(self, rng):
        with pytest.raises(PipelineOrderError):
            D.normalize(_record(rng.normal(size=(18, 3))))


class TestSegment:
    @pytest.mark.parametrize("length,count", [(100, 1), (149, 1), (150, 2), (1000, 19), (99, 0)])
    def test_counts(self, rng, length, count):
        segs = D.segment_walk(_normalized(length, rng))
        assert len(segs) == count == D.segment_count(length)

    def test_offsets_1000(self, rng):
        segs = D.segment_walk(_normalized(1000, rng))
        assert [s.start_offset for s in segs] == list(range(0, 901, 50))

    @settings(max_examples=50, deadline=None)
    @given(st.integers(1, 600))
    def test_count_formula(self, length):
        rec = _normalized(length, np.random.default_rng(length))
        segs = D.segment_walk(rec)
        assert len(segs) == (0 if length < 100 else (length - 100) // 50 + 1)
        for s in segs:
            assert s.values.shape == (18, 100)
            assert s.start_offset + 100 <= length
            np.testing.assert_array_equal(s.values, rec.channels[:, s.start_offset:s.start_offset + 100])

    def test_short_walk_warns(self, rng, caplog):
        with caplog.at_level(logging.WARNING):
            assert D.segment_walk(_normalized(40, rng)) == []
        assert "shorter than segment length" in caplog.text

    def test_label_inherited(self, rng):
        rec = D.attach_severity(_record(rng.normal(size=(18, 200)), "GaPt02"),
                                {"GaPt02": SubjectInfo("GaPt02", "parkinson", 2.5)})
        rec, _ = D.preprocess(rec)
        assert {s.label for s in D.segment_walk(rec)} == {2}


class TestPipelineOrder:
    def test_segment_before_normalize(self, rng):
        rec, _ = D.impute_missing(_record(rng.normal(size=(18, 200))))
        with pytest.raises(PipelineOrderError):
            D.segment_walk(rec)

    def test_attach_after_impute(self, rng):
        rec, _ = D.impute_missing(_record(rng.normal(size=(18, 5))))
        with pytest.raises(PipelineOrderError):
            D.attach_severity(rec, {})

    def test_impute_after_normalize(self, rng):
        with pytest.raises(PipelineOrderError):
            D.impute_missing(_normalized(5, rng))


def _labels(n_control, stage_counts):
    labels = {f"GaCo{i:03d}": 0 for i in range(n_control)}
    for cls, n in enumerate(stage_counts, start=1):
        labels.update({f"GaPt{cls}{i:03d}": cls for i in range(n)})
    return labels


class TestFolds:
    def test_ten_and_ten(self):
        plan = D.stratified_folds(_labels(10, (10, 0, 0)), k=10, seed=3)
        assert all(t[0] == 1 and sum(t[1:]) == 1 for t in plan.tallies)

    def test_too_few(self):
        with pytest.raises(DataError, match="at least 10"):
            D.stratified_folds(_labels(9, (20, 0, 0)), k=10)

    def test_seed_deterministic(self):
        labels = _labels(30, (30, 25, 18))
        assert D.stratified_folds(labels, seed=1).folds == D.stratified_folds(labels, seed=1).folds
        assert D.stratified_folds(labels, seed=1).folds != D.stratified_folds(labels, seed=2).folds

    @settings(max_examples=60, deadline=None)
    @given(st.integers(2, 6), st.integers(0, 40), st.lists(st.integers(0, 30), min_size=3, max_size=3),
           st.integers(0, 2**32 - 1))
    def test_partition_and_balance(self, k, extra_control, stages, seed):
        stages[0] += k  # guarantee enough PD subjects
        labels = _labels(k + extra_control, stages)
        plan = D.stratified_folds(labels, k=k, seed=seed)
        flat = [s for f in plan.folds for s in f]
        assert sorted(flat) == sorted(labels) and len(set(flat)) == len(flat)
        controls = [t[0] for t in plan.tallies]
        pd = [sum(t[1:]) for t in plan.tallies]
        assert max(controls) - min(controls) <= 1
        assert max(pd) - min(pd) <= 1
        for cls in range(1, 4):
            per = [t[cls] for t in plan.tallies]
            assert max(per) - min(per) <= 1

    def test_train_test_split(self):
        plan = D.stratified_folds(_labels(10, (10, 0, 0)), k=10)
        test, train = plan.test_and_train(4)
        assert len(test) == 2 and len(train) == 18 and not set(test) & set(train)

    def test_holdout_split(self):
        labels = _labels(20, (10, 10, 10))
        train, val = D.holdout_split(labels, 0.1, seed=0)
        assert len(val) == 5 and not set(train) & set(val)
        assert sorted(train + val) == sorted(labels)


class TestBuildDataset:
    def test_roster(self, tmp_path):
        directory, demo = make_roster(tmp_path / "walks", length=260)
        ds = D.build_dataset(directory, demo)
        assert len(ds.walks) == 6 and ds.excluded == []
        assert ds.class_counts() == [3, 1, 1, 1]
        assert all(len(w.segments) == 4 for w in ds.walks)
        x, y = ds.arrays(["GaCo01", "GaPt02"])
        assert x.shape == (8, 18, 100) and sorted(set(y.tolist())) == [0, 2]

    def test_exclusions_recorded(self, tmp_path, rng, caplog):
        directory, demo = make_roster(tmp_path / "walks", length=260)
        (directory / "GaPt09_01.txt").write_text("1 2 3\n")
        write_walk(directory / "GaPt08_01.txt", 200, rng)
        with caplog.at_level(logging.WARNING):
            ds = D.build_dataset(directory, demo)
        names = [name for name, _ in ds.excluded]
        assert names == ["GaPt08_01.txt", "GaPt09_01.txt"]
        assert "excluding GaPt09_01.txt" in caplog.text

    def test_manifest(self, tmp_path):
        directory, demo = make_roster(tmp_path / "walks", n_control=1, n_pd=1, length=150)
        ds = D.build_dataset(directory, demo)
        path = tmp_path / "manifest.csv"
        D.write_manifest(ds, path)
        assert path.read_text().splitlines() == [
            "subject,walk,study,length,segments,label,severity,imputed",
            "GaCo01,01,Ga,150,2,0,healthy,0",
            "GaPt01,01,Ga,150,2,1,stage2,0",
        ]
