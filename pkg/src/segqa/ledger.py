"""Append-only record of human quality grades, plus cohort manifests.

The ledger file is NDJSON: one UTF-8 line per grading event with fields
study_id, rater_id, grade, algorithm_version, timestamp (RFC3339, UTC).
Re-grades of the same (study, version) are kept; the latest timestamp wins
for reporting (ties resolve to the later line). Replaying a file rebuilds
identical effective state.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .stats import TestResult, chi_squared_2x2

VALID_GRADES = (0, 1, 2)
GRADE_MEANINGS = {0: "Excellent", 1: "Usable", 2: "GlobalFail"}
VALID_ROLES = ("train", "eval", "corrected")


class LedgerError(ValueError):
    pass


@dataclass(frozen=True)
class QaRecord:
    study_id: str
    rater_id: str
    grade: int
    algorithm_version: str
    timestamp: datetime

    def __post_init__(self):
        if not self.study_id:
            raise LedgerError("study_id must be non-empty")
        if self.grade not in VALID_GRADES:
            raise LedgerError(
                f"grade must be one of {VALID_GRADES} "
                f"(Excellent/Usable/GlobalFail), got {self.grade!r}"
            )
        if self.timestamp.tzinfo is None:
            raise LedgerError("timestamp must be timezone-aware (UTC)")

    def to_json(self) -> str:
        return json.dumps(
            {
                "study_id": self.study_id,
                "rater_id": self.rater_id,
                "grade": self.grade,
                "algorithm_version": self.algorithm_version,
                "timestamp": self.timestamp.astimezone(timezone.utc).isoformat(),
            }
        )

    @staticmethod
    def from_json(line: str) -> "QaRecord":
        try:
            d = json.loads(line)
            return QaRecord(
                study_id=d["study_id"],
                rater_id=d["rater_id"],
                grade=d["grade"],
                algorithm_version=d["algorithm_version"],
                timestamp=datetime.fromisoformat(d["timestamp"]),
            )
        except (KeyError, ValueError, TypeError) as e:
            raise LedgerError(f"malformed ledger line {line!r}: {e}") from e


@dataclass
class ManifestEntry:
    study_id: str
    image_path: str
    label_path: str | None = None
    role: str = "eval"
    soft_path: str | None = None  # windowed companion written by preprocess
    hard: bool | None = None  # phantom-generator annotation, never fed to models

    def __post_init__(self):
        if self.role not in VALID_ROLES:
            raise LedgerError(f"role must be one of {VALID_ROLES}, got {self.role!r}")


@dataclass
class CohortManifest:
    cohort_id: str
    entries: list[ManifestEntry] = field(default_factory=list)

    def __post_init__(self):
        ids = [e.study_id for e in self.entries]
        if len(ids) != len(set(ids)):
            dupes = sorted({i for i in ids if ids.count(i) > 1})
            raise LedgerError(f"duplicate study ids in manifest: {dupes}")

    def study_ids(self) -> list[str]:
        return [e.study_id for e in self.entries]

    def entry(self, study_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.study_id == study_id:
                return e
        raise LedgerError(f"study {study_id!r} not in cohort {self.cohort_id!r}")

    def save(self, path) -> None:
        doc = {
            "cohort_id": self.cohort_id,
            "entries": [
                {
                    "study_id": e.study_id,
                    "image_path": e.image_path,
                    "label_path": e.label_path,
                    "role": e.role,
                    "soft_path": e.soft_path,
                    "hard": e.hard,
                }
                for e in self.entries
            ],
        }
        Path(path).write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")

    @staticmethod
    def load(path) -> "CohortManifest":
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        return CohortManifest(
            cohort_id=doc["cohort_id"],
            entries=[ManifestEntry(**e) for e in doc["entries"]],
        )


class QaLedger:
    """Single-writer append stream of QaRecords over registered cohorts."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.records: list[QaRecord] = []
        self.cohorts: dict[str, CohortManifest] = {}
        self._known: set[str] = set()
        self._last_ts: datetime | None = None
        if self.path is not None and self.path.exists():
            for line in self.path.read_text(encoding="utf-8").splitlines():
                if line.strip():
                    self._append_memory(QaRecord.from_json(line))

    def register_manifest(self, manifest: CohortManifest) -> None:
        self.cohorts[manifest.cohort_id] = manifest
        self._known.update(manifest.study_ids())

    def _append_memory(self, record: QaRecord) -> None:
        if self._last_ts is not None and record.timestamp < self._last_ts:
            raise LedgerError(
                f"timestamps must be monotone within the stream: "
                f"{record.timestamp.isoformat()} < {self._last_ts.isoformat()}"
            )
        self.records.append(record)
        self._last_ts = record.timestamp

    def record_grade(self, record: QaRecord) -> None:
        if self._known and record.study_id not in self._known:
            raise LedgerError(f"study {record.study_id!r} is not in any registered manifest")
        self._append_memory(record)
        if self.path is not None:
            with self.path.open("a", encoding="utf-8") as f:
                f.write(record.to_json() + "\n")

    def record_grade_values(
        self,
        study_id: str,
        rater_id: str,
        grade: int,
        algorithm_version: str,
        timestamp: datetime | None = None,
    ) -> QaRecord:
        ts = timestamp or datetime.now(timezone.utc)
        if self._last_ts is not None and ts < self._last_ts:
            ts = self._last_ts  # clock went backwards; keep the stream monotone
        rec = QaRecord(study_id, rater_id, grade, algorithm_version, ts)
        self.record_grade(rec)
        return rec

    def _cohort_ids(self, cohort: str) -> list[str]:
        if cohort not in self.cohorts:
            raise LedgerError(f"unknown cohort {cohort!r}")
        return self.cohorts[cohort].study_ids()

    def effective_grades(self, cohort: str, algorithm_version: str) -> dict[str, int]:
        """Latest grade per study for this cohort/version."""
        wanted = set(self._cohort_ids(cohort))
        best: dict[str, QaRecord] = {}
        for rec in self.records:
            if rec.algorithm_version != algorithm_version or rec.study_id not in wanted:
                continue
            prev = best.get(rec.study_id)
            if prev is None or rec.timestamp >= prev.timestamp:
                best[rec.study_id] = rec
        return {sid: r.grade for sid, r in best.items()}

    def failure_rate(self, cohort: str, algorithm_version: str) -> float:
        grades = self.effective_grades(cohort, algorithm_version)
        if not grades:
            raise LedgerError(
                f"no grades for cohort {cohort!r} under version {algorithm_version!r}"
            )
        return sum(1 for g in grades.values() if g == 2) / len(grades)

    def quality_breakdown(self, cohort: str, algorithm_version: str) -> tuple[float, float, float]:
        grades = self.effective_grades(cohort, algorithm_version)
        if not grades:
            raise LedgerError(
                f"no grades for cohort {cohort!r} under version {algorithm_version!r}"
            )
        n = len(grades)
        counts = [0, 0, 0]
        for g in grades.values():
            counts[g] += 1
        return (counts[0] / n, counts[1] / n, counts[2] / n)

    def export_failure_manifest(self, cohort: str, algorithm_version: str) -> CohortManifest:
        """Manifest of every effective-grade-2 study, ready for correction
        (role=corrected, label paths left as placeholders)."""
        manifest = self.cohorts.get(cohort)
        if manifest is None:
            raise LedgerError(f"unknown cohort {cohort!r}")
        grades = self.effective_grades(cohort, algorithm_version)
        entries = []
        for e in manifest.entries:
            if grades.get(e.study_id) == 2:
                entries.append(
                    ManifestEntry(
                        study_id=e.study_id,
                        image_path=e.image_path,
                        label_path=None,
                        role="corrected",
                        hard=e.hard,
                    )
                )
        return CohortManifest(cohort_id=f"{cohort}-failures-{algorithm_version}", entries=entries)

    def compare_failure_rates(self, cohort: str, version_a: str, version_b: str) -> TestResult:
        """Chi-squared on fail/non-fail counts over studies graded under both."""
        a = self.effective_grades(cohort, version_a)
        b = self.effective_grades(cohort, version_b)
        common = sorted(set(a) & set(b))
        if not common:
            raise LedgerError(
                f"no studies graded under both {version_a!r} and {version_b!r} "
                f"in cohort {cohort!r}"
            )
        fail_a = sum(1 for s in common if a[s] == 2)
        fail_b = sum(1 for s in common if b[s] == 2)
        n = len(common)
        return chi_squared_2x2([[fail_a, n - fail_a], [fail_b, n - fail_b]])


@dataclass(frozen=True)
class GradeProxy:
    """Automated stand-in for a human rater on synthetic runs: grades from
    mean foreground Dice against ground truth. Thresholds are configurable."""

    excellent_min: float = 0.8
    fail_below: float = 0.5

    def __post_init__(self):
        if not (0.0 <= self.fail_below <= self.excellent_min <= 1.0):
            raise LedgerError(
                f"need 0 <= fail_below <= excellent_min <= 1, got "
                f"{self.fail_below}, {self.excellent_min}"
            )

    def __call__(self, mean_foreground_dice: float) -> int:
        if math.isnan(mean_foreground_dice):
            return 2
        if mean_foreground_dice >= self.excellent_min:
            return 0
        if mean_foreground_dice < self.fail_below:
            return 2
        return 1
