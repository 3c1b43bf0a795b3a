from datetime import datetime, timedelta, timezone

import pytest

from segqa.ledger import (
    CohortManifest,
    GradeProxy,
    LedgerError,
    ManifestEntry,
    QaLedger,
    QaRecord,
)


def ts(i):
    return datetime(2026, 1, 1, tzinfo=timezone.utc) + timedelta(seconds=i)


def manifest(n=5, cohort="A", role="eval"):
    return CohortManifest(
        cohort_id=cohort,
        entries=[
            ManifestEntry(study_id=f"{cohort}-{i:03d}", image_path=f"{i}/image.nii",
                          label_path=f"{i}/label.nii", role=role)
            for i in range(n)
        ],
    )


def ledger_with(grades, cohort="A", version="v1", path=None):
    led = QaLedger(path)
    led.register_manifest(manifest(len(grades), cohort))
    for i, g in enumerate(grades):
        led.record_grade(QaRecord(f"{cohort}-{i:03d}", "r1", g, version, ts(i)))
    return led


class TestRecords:
    def test_invalid_grade_rejected(self):
        with pytest.raises(LedgerError, match="grade"):
            QaRecord("s1", "r1", 3, "v1", ts(0))

    def test_unknown_study_rejected(self):
        led = QaLedger()
        led.register_manifest(manifest(2))
        with pytest.raises(LedgerError, match="manifest"):
            led.record_grade(QaRecord("nope", "r1", 0, "v1", ts(0)))

    def test_latest_grade_wins(self):
        led = QaLedger()
        led.register_manifest(manifest(1))
        led.record_grade(QaRecord("A-000", "r1", 2, "v1", ts(0)))
        led.record_grade(QaRecord("A-000", "r1", 1, "v1", ts(5)))
        assert led.effective_grades("A", "v1") == {"A-000": 1}
        assert len(led.records) == 2  # append-only; both retained

    def test_five_records_five_studies(self):
        led = ledger_with([0, 1, 2, 0, 1])
        assert len(led.records) == 5
        assert len(led.effective_grades("A", "v1")) == 5

    def test_timestamps_must_be_monotone(self):
        led = QaLedger()
        led.register_manifest(manifest(2))
        led.record_grade(QaRecord("A-000", "r1", 0, "v1", ts(10)))
        with pytest.raises(LedgerError, match="monotone"):
            led.record_grade(QaRecord("A-001", "r1", 0, "v1", ts(3)))


class TestRates:
    def test_hand_counted_failure_rate(self):
        led = ledger_with([0, 1, 2, 2, 0])
        assert led.failure_rate("A", "v1") == pytest.approx(0.4)

    def test_all_excellent(self):
        led = ledger_with([0, 0, 0])
        assert led.failure_rate("A", "v1") == 0.0

    def test_empty_cohort_error(self):
        led = QaLedger()
        led.register_manifest(manifest(3))
        with pytest.raises(LedgerError, match="no grades"):
            led.failure_rate("A", "v1")

    def test_breakdown_hand_counts(self):
        led = ledger_with([0, 0, 1, 2])
        assert led.quality_breakdown("A", "v1") == pytest.approx((0.5, 0.25, 0.25))

    def test_breakdown_all_usable(self):
        led = ledger_with([1, 1, 1])
        assert led.quality_breakdown("A", "v1") == (0.0, 1.0, 0.0)

    def test_breakdown_sums_to_one_and_matches_rate(self):
        import numpy as np

        g = np.random.default_rng(0)
        for _ in range(25):
            grades = list(g.integers(0, 3, size=int(g.integers(1, 30))))
            led = ledger_with([int(x) for x in grades])
            p0, p1, p2 = led.quality_breakdown("A", "v1")
            assert p0 + p1 + p2 == pytest.approx(1.0, abs=1e-12)
            assert led.failure_rate("A", "v1") == pytest.approx(p2)


class TestFailureExport:
    def test_grade2_set_exact(self):
        led = ledger_with([0, 2, 1, 2, 2])
        out = led.export_failure_manifest("A", "v1")
        assert [e.study_id for e in out.entries] == ["A-001", "A-003", "A-004"]
        assert all(e.role == "corrected" for e in out.entries)
        assert all(e.label_path is None for e in out.entries)

    def test_usable_is_not_failure(self):
        led = ledger_with([1, 1, 1])
        assert led.export_failure_manifest("A", "v1").entries == []

    def test_partition_property(self):
        led = ledger_with([0, 2, 1, 2, 0, 1, 2])
        failures = {e.study_id for e in led.export_failure_manifest("A", "v1").entries}
        grades = led.effective_grades("A", "v1")
        non_failures = {s for s, g in grades.items() if g != 2}
        assert failures | non_failures == set(grades)
        assert not (failures & non_failures)


class TestCompare:
    def test_identical_multisets_p_one(self):
        led = QaLedger()
        led.register_manifest(manifest(4))
        for i, g in enumerate([0, 2, 1, 2]):
            led.record_grade(QaRecord(f"A-{i:03d}", "r1", g, "v1", ts(i)))
        for i, g in enumerate([2, 0, 2, 1]):  # same multiset, permuted
            led.record_grade(QaRecord(f"A-{i:03d}", "r1", g, "v2", ts(10 + i)))
        res = led.compare_failure_rates("A", "v1", "v2")
        assert res.p_value == pytest.approx(1.0)

    def test_cohort_scale_table(self):
        led = QaLedger()
        led.register_manifest(manifest(2004))
        t = 0
        for i in range(2004):
            led.record_grade(QaRecord(f"A-{i:03d}", "r1", 2 if i < 260 else 0, "v1", ts(t)))
            t += 1
        for i in range(2004):
            led.record_grade(QaRecord(f"A-{i:03d}", "r1", 2 if i < 180 else 0, "v2", ts(t)))
            t += 1
        res = led.compare_failure_rates("A", "v1", "v2")
        assert res.statistic == pytest.approx(16.34, abs=0.05)
        assert res.p_value < 0.001

    def test_single_version_studies_excluded(self):
        led = QaLedger()
        led.register_manifest(manifest(4))
        for i in range(4):
            led.record_grade(QaRecord(f"A-{i:03d}", "r1", 2 if i == 0 else 0, "v1", ts(i)))
        # only two studies graded under v2
        led.record_grade(QaRecord("A-000", "r1", 0, "v2", ts(10)))
        led.record_grade(QaRecord("A-001", "r1", 2, "v2", ts(11)))
        res = led.compare_failure_rates("A", "v1", "v2")
        # table over the 2 common studies: v1 -> 1 fail, v2 -> 1 fail
        assert res.statistic == pytest.approx(0.0, abs=1e-12)


class TestPersistence:
    def test_replay_reconstructs_state(self, tmp_path):
        path = tmp_path / "qa_ledger.ndjson"
        led = ledger_with([0, 1, 2, 2, 0], path=path)
        led.record_grade(QaRecord("A-002", "r2", 0, "v1", ts(100)))  # re-grade

        replayed = QaLedger(path)
        replayed.register_manifest(manifest(5))
        assert replayed.effective_grades("A", "v1") == led.effective_grades("A", "v1")
        assert replayed.failure_rate("A", "v1") == led.failure_rate("A", "v1")
        assert replayed.quality_breakdown("A", "v1") == led.quality_breakdown("A", "v1")

    def test_file_only_grows(self, tmp_path):
        path = tmp_path / "qa_ledger.ndjson"
        led = QaLedger(path)
        led.register_manifest(manifest(3))
        sizes = []
        for i in range(3):
            led.record_grade(QaRecord(f"A-{i:03d}", "r1", 0, "v1", ts(i)))
            sizes.append(path.stat().st_size)
        assert sizes == sorted(sizes)
        assert sizes[0] > 0

    def test_malformed_line_rejected(self, tmp_path):
        path = tmp_path / "qa_ledger.ndjson"
        path.write_text('{"study_id": "x"}\n', encoding="utf-8")
        with pytest.raises(LedgerError, match="malformed"):
            QaLedger(path)


class TestManifest:
    def test_duplicate_ids_rejected(self):
        with pytest.raises(LedgerError, match="duplicate"):
            CohortManifest(
                cohort_id="A",
                entries=[
                    ManifestEntry("s1", "a.nii"),
                    ManifestEntry("s1", "b.nii"),
                ],
            )

    def test_bad_role_rejected(self):
        with pytest.raises(LedgerError, match="role"):
            ManifestEntry("s1", "a.nii", role="test")

    def test_save_load_roundtrip(self, tmp_path):
        m = manifest(4)
        m.save(tmp_path / "m.json")
        back = CohortManifest.load(tmp_path / "m.json")
        assert back.cohort_id == m.cohort_id
        assert [e.study_id for e in back.entries] == [e.study_id for e in m.entries]
        assert [e.role for e in back.entries] == [e.role for e in m.entries]


class TestGradeProxy:
    def test_thresholds(self):
        proxy = GradeProxy(excellent_min=0.8, fail_below=0.5)
        assert proxy(0.95) == 0
        assert proxy(0.8) == 0
        assert proxy(0.65) == 1
        assert proxy(0.49) == 2
        assert proxy(float("nan")) == 2

    def test_invalid_thresholds(self):
        with pytest.raises(LedgerError):
            GradeProxy(excellent_min=0.4, fail_below=0.5)
