import datetime as dt

import numpy as np
import pytest
from hypothesis import given, strategies as st

from longalign.data import (
    ExamRecord,
    MANIFEST_COLUMNS,
    build_pairs,
    build_risk_target,
    density_categories,
    load_manifest,
    make_pair,
    save_manifest,
    split_patients,
)
from longalign.errors import DataError, ManifestFormatError, ManifestIntegrityError

HEADER = ",".join(MANIFEST_COLUMNS)


def record(patient="p1", exam="e1", date="2013-05-01", followup=6.0, cancer=None, **kw):
    defaults = dict(
        patient_id=patient,
        exam_id=exam,
        laterality="L",
        view="CC",
        acquisition_date=dt.date.fromisoformat(date),
        image_path=f"img/{patient}_{exam}.png",
        density_value=35.2,
        followup_years=followup,
        cancer_year=cancer,
    )
    defaults.update(kw)
    return ExamRecord(**defaults)


class TestLoadManifest:
    def test_header_only_gives_empty_list(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(HEADER + "\n")
        assert load_manifest(path) == []

    def test_row_with_blank_cancer_year(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(HEADER + "\np1,e1,L,CC,2013-05-01,img/p1_e1.png,35.2,6.0,\n")
        (rec,) = load_manifest(path)
        assert rec.cancer_year is None
        assert rec.followup_years == 6.0
        assert rec.acquisition_date == dt.date(2013, 5, 1)
        assert rec.density_value == 35.2

    def test_duplicate_key_is_integrity_error(self, tmp_path):
        path = tmp_path / "m.csv"
        row = "p1,e1,L,CC,2013-05-01,a.png,,5.0,\n"
        path.write_text(HEADER + "\n" + row + row)
        with pytest.raises(ManifestIntegrityError):
            load_manifest(path)

    def test_missing_column_named_in_error(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(HEADER.replace(",cancer_year", "") + "\n")
        with pytest.raises(ManifestFormatError, match="cancer_year"):
            load_manifest(path)

    def test_bad_date_reports_line_number(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(HEADER + "\np1,e1,L,CC,not-a-date,a.png,,5.0,\n")
        with pytest.raises(ManifestFormatError, match=":2:"):
            load_manifest(path)

    def test_bad_number_reports_line_number(self, tmp_path):
        path = tmp_path / "m.csv"
        path.write_text(HEADER + "\np1,e1,L,CC,2013-05-01,a.png,,5.0,\np2,e1,L,CC,2013-05-01,a.png,,oops,\n")
        with pytest.raises(ManifestFormatError, match=":3:"):
            load_manifest(path)

    def test_round_trip(self, tmp_path):
        records = [record(), record(exam="e2", date="2015-07-01", cancer=2.5, followup=6.0)]
        save_manifest(records, tmp_path / "m.csv")
        assert load_manifest(tmp_path / "m.csv") == records


class TestExamRecord:
    def test_cancer_year_beyond_followup_rejected(self):
        with pytest.raises(DataError):
            record(cancer=7.0, followup=6.0)

    def test_pair_requires_strict_date_order(self):
        with pytest.raises(DataError):
            make_pair(record(date="2015-01-01"), record(exam="e2", date="2015-01-01"))

    def test_build_pairs_uses_most_recent_prior(self):
        exams = [
            record(exam="e1", date="2012-01-01", followup=9.0),
            record(exam="e2", date="2014-01-01", followup=7.0),
            record(exam="e3", date="2015-06-01", followup=5.5),
        ]
        pairs = build_pairs(exams)
        assert [(p.prior.exam_id, p.current.exam_id) for p in pairs] == [("e1", "e2"), ("e2", "e3")]


class TestBuildRiskTarget:
    def test_event_at_two_and_a_half_years(self):
        t = build_risk_target(record(cancer=2.5, followup=7.0))
        assert t.target.tolist() == [0, 0, 1, 1, 1, 0]
        assert t.mask.tolist() == [1, 1, 1, 1, 1, 1]

    def test_censored_at_three_point_two_years(self):
        t = build_risk_target(record(followup=3.2))
        assert t.target[:3].tolist() == [0, 0, 0]
        assert t.mask.tolist() == [1, 1, 1, 0, 0, 0]

    def test_cancer_free_at_five_years(self):
        t = build_risk_target(record(followup=5.0))
        assert t.target.tolist() == [0, 0, 0, 0, 0, 1]
        assert t.mask.tolist() == [1, 1, 1, 1, 1, 1]

    def test_horizon_is_fixed(self):
        with pytest.raises(ValueError):
            build_risk_target(record(), horizon=4)

    @given(
        cancer=st.one_of(st.none(), st.floats(min_value=0.0, max_value=10.0)),
        extra=st.floats(min_value=0.0, max_value=10.0),
    )
    def test_observed_events_are_observable(self, cancer, extra):
        followup = (cancer if cancer is not None else 0.0) + extra
        t = build_risk_target(record(cancer=cancer, followup=followup))
        assert np.all(t.mask >= t.target[:6] * (t.mask >= 0))  # mask=1 wherever target=1
        assert np.all((t.target[:5] == 1) <= (t.mask[:5] == 1))
        observed = t.mask[:5] == 1
        vals = t.target[:5][observed]
        assert np.all(np.diff(vals) >= 0)  # cumulative risk labels are non-decreasing
        assert t.target[5] == 1 - t.target[4]
        assert t.mask[5] == t.mask[4]

    @given(
        cancer=st.one_of(st.none(), st.floats(min_value=0.0, max_value=6.0)),
        followup=st.floats(min_value=0.0, max_value=10.0),
        bump=st.floats(min_value=0.0, max_value=5.0),
    )
    def test_mask_monotone_in_followup(self, cancer, followup, bump):
        if cancer is not None:
            followup = max(followup, cancer)
        a = build_risk_target(record(cancer=cancer, followup=followup))
        b = build_risk_target(record(cancer=cancer, followup=followup + bump))
        assert np.all(b.mask >= a.mask)


class TestSplitPatients:
    def make_records(self, n_patients, exams_per_patient=1):
        return [
            record(patient=f"p{i}", exam=f"e{j}", date=f"201{j % 9}-01-01", followup=9.0)
            for i in range(n_patients)
            for j in range(exams_per_patient)
        ]

    def test_exact_ratio_sizes(self):
        splits = split_patients(self.make_records(10), seed=0)
        counts = {s: list(splits.values()).count(s) for s in ("train", "val", "test")}
        assert counts == {"train": 5, "val": 2, "test": 3}

    def test_deterministic(self):
        records = self.make_records(17)
        assert split_patients(records, seed=3) == split_patients(records, seed=3)
        assert split_patients(records, seed=3) != split_patients(records, seed=4)

    def test_patient_level(self):
        records = self.make_records(10, exams_per_patient=2)
        splits = split_patients(records, seed=1)
        assert set(splits) == {f"p{i}" for i in range(10)}  # every patient exactly once
        per_exam = [splits[rec.patient_id] for rec in records]
        for i in range(10):
            a, b = per_exam[2 * i], per_exam[2 * i + 1]
            assert a == b  # both exams of one patient share a split
        assert set(per_exam) <= {"train", "val", "test"}

    def test_empty_raises(self):
        with pytest.raises(DataError):
            split_patients([])

    @given(n=st.integers(min_value=1, max_value=60), seed=st.integers(min_value=0, max_value=100))
    def test_fractions_within_one_patient(self, n, seed):
        splits = split_patients(self.make_records(n), seed=seed)
        counts = {s: list(splits.values()).count(s) for s in ("train", "val", "test")}
        assert counts["train"] + counts["val"] + counts["test"] == n
        assert abs(counts["train"] - 0.5 * n) <= 1
        assert abs(counts["val"] - 0.2 * n) <= 1
        assert abs(counts["test"] - 0.3 * n) <= 1


class TestDensityCategories:
    def test_exact_tertiles(self):
        assert density_categories([1, 2, 3, 4, 5, 6]) == ["low", "low", "med", "med", "high", "high"]

    def test_all_equal_is_stable_and_balanced(self):
        labels = density_categories([7.0] * 7)
        assert labels == ["low", "low", "low", "med", "med", "high", "high"]

    def test_hundred_uniform_values_balanced(self):
        rng = np.random.default_rng(0)
        labels = density_categories(list(rng.uniform(size=100)))
        sizes = {g: labels.count(g) for g in ("low", "med", "high")}
        assert all(s in (33, 34) for s in sizes.values())

    def test_quantile_ordering(self):
        rng = np.random.default_rng(1)
        values = list(rng.uniform(size=100))
        labels = density_categories(values)
        lows = [v for v, l in zip(values, labels) if l == "low"]
        meds = [v for v, l in zip(values, labels) if l == "med"]
        highs = [v for v, l in zip(values, labels) if l == "high"]
        assert max(lows) <= min(meds) and max(meds) <= min(highs)

    def test_empty_raises(self):
        with pytest.raises(DataError):
            density_categories([])
