"""Parse longitudinal event records and apply the cohort inclusion rules.

Input schema (CSV, UTF-8, header required):
  events:   patient_id,code,age_years,strata
  metadata: patient_id,registration_age_years,followup_years,strata
  vocabulary: one code per line; file order defines the column index.

Records that violate a rule are rejected with a counted reason, never
silently dropped.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from tcnmf.errors import DataFormatError

DEFAULT_T_MAX = 114
EVENT_HEADER = ["patient_id", "code", "age_years", "strata"]
META_HEADER = ["patient_id", "registration_age_years", "followup_years", "strata"]


@dataclass(frozen=True, slots=True)
class EventRecord:
    """One (patient, disease code, age-in-years) diagnosis event."""

    patient_id: str
    code: str
    age_years: int
    strata: str = ""


@dataclass(frozen=True, slots=True)
class PatientMeta:
    patient_id: str
    registration_age_years: int
    followup_years: int
    strata: str = ""


class DiseaseVocabulary:
    """Ordered set of disease codes; position defines the matrix column."""

    def __init__(self, codes):
        codes = list(codes)
        if len(codes) != len(set(codes)):
            raise DataFormatError("vocabulary contains duplicate codes")
        if len(codes) < 2:
            raise DataFormatError("vocabulary must contain at least 2 codes")
        self.codes = tuple(codes)
        self.index = {code: j for j, code in enumerate(codes)}

    def __len__(self):
        return len(self.codes)

    def __contains__(self, code):
        return code in self.index

    @classmethod
    def from_file(cls, path) -> "DiseaseVocabulary":
        path = Path(path)
        if not path.exists():
            raise DataFormatError(f"vocabulary file not found: {path}")
        codes = [line.strip() for line in path.read_text().splitlines() if line.strip()]
        return cls(codes)

    def to_file(self, path) -> None:
        Path(path).write_text("".join(c + "\n" for c in self.codes))


@dataclass
class RejectionSummary:
    """Counts of rejected records by reason, reported at the end of a load."""

    rejected: int = 0
    reasons: Counter = field(default_factory=Counter)

    def add(self, reason: str, n: int = 1) -> None:
        self.rejected += n
        self.reasons[reason] += n

    def to_json(self) -> str:
        return json.dumps(
            {"rejected": self.rejected, "reasons": dict(sorted(self.reasons.items()))},
            sort_keys=True,
        )


def _open_csv(path, expected_header):
    path = Path(path)
    if not path.exists():
        raise DataFormatError(f"input file not found: {path}")
    handle = path.open(newline="")
    reader = csv.reader(handle)
    try:
        header = next(reader)
    except StopIteration:
        handle.close()
        raise DataFormatError(f"{path}: empty file, expected header {expected_header}")
    if [h.strip() for h in header] != expected_header:
        handle.close()
        raise DataFormatError(f"{path}: header {header} does not match {expected_header}")
    return handle, reader


def _parse_age(text: str) -> int:
    # sub-year ages are floored to whole years at ingest
    return math.floor(float(text))


def load_events(path, vocabulary: DiseaseVocabulary, t_max: int = DEFAULT_T_MAX,
                summary: RejectionSummary | None = None) -> tuple[list[EventRecord], RejectionSummary]:
    """Load event records, rejecting (and counting) rows that break the rules.

    Rejection reasons: ``malformed_row`` (wrong field count or non-numeric
    age), ``unknown_code`` (not in the vocabulary), ``age_out_of_range``
    (outside [0, t_max)).
    """
    summary = summary if summary is not None else RejectionSummary()
    events: list[EventRecord] = []
    handle, reader = _open_csv(path, EVENT_HEADER)
    with handle:
        for row in reader:
            if not row:
                continue
            if len(row) != len(EVENT_HEADER):
                summary.add("malformed_row")
                continue
            patient_id, code, age_text, strata = (f.strip() for f in row)
            try:
                age = _parse_age(age_text)
            except ValueError:
                summary.add("malformed_row")
                continue
            if code not in vocabulary:
                summary.add("unknown_code")
                continue
            if not 0 <= age < t_max:
                summary.add("age_out_of_range")
                continue
            events.append(EventRecord(patient_id, code, age, strata))
    return events, summary


def load_metadata(path, summary: RejectionSummary | None = None) -> tuple[list[PatientMeta], RejectionSummary]:
    """Load patient metadata; negative follow-up or malformed rows are rejected."""
    summary = summary if summary is not None else RejectionSummary()
    meta: list[PatientMeta] = []
    seen: set[str] = set()
    handle, reader = _open_csv(path, META_HEADER)
    with handle:
        for row in reader:
            if not row:
                continue
            if len(row) != len(META_HEADER):
                summary.add("malformed_row")
                continue
            patient_id, reg_text, fup_text, strata = (f.strip() for f in row)
            try:
                registration = _parse_age(reg_text)
                followup = _parse_age(fup_text)
            except ValueError:
                summary.add("malformed_row")
                continue
            if followup < 0:
                summary.add("negative_followup")
                continue
            if patient_id in seen:
                summary.add("duplicate_patient")
                continue
            seen.add(patient_id)
            meta.append(PatientMeta(patient_id, registration, followup, strata))
    return meta, summary


@dataclass
class InclusionSummary:
    patients_in: int = 0
    patients_removed_followup: int = 0
    patients_missing_metadata: int = 0
    events_in: int = 0
    events_removed_washout: int = 0
    events_removed_recurrence: int = 0
    events_out: int = 0


def apply_inclusion(events, meta, min_followup: int = 5, washout: int = 1,
                    washout_mode: str = "record") -> tuple[list[EventRecord], InclusionSummary]:
    """Filter to incident first occurrences of each disease per eligible patient.

    Rules, in order:
      (a) patients with followup_years < min_followup are removed entirely;
      (c) events recorded before registration_age + washout are removed;
      (b) per (patient, code), only the earliest surviving event is kept.

    washout_mode controls what a washout-period record means for later
    recurrences of the same code:
      "record"  - only that record is dropped; a recurrence after the washout
                  window counts as the first eligible occurrence (default);
      "disease" - the (patient, code) pair is excluded permanently.

    Idempotent: applying the filter to its own output is a no-op.
    """
    if washout_mode not in ("record", "disease"):
        raise ValueError(f"washout_mode must be 'record' or 'disease', got {washout_mode!r}")
    summary = InclusionSummary(events_in=len(events))
    by_patient = {m.patient_id: m for m in meta}
    summary.patients_in = len({e.patient_id for e in events})

    eligible: dict[str, int] = {}
    dropped_followup: set[str] = set()
    missing_meta: set[str] = set()
    washed_out_codes: set[tuple[str, str]] = set()

    for event in events:
        m = by_patient.get(event.patient_id)
        if m is None:
            missing_meta.add(event.patient_id)
            continue
        if m.followup_years < min_followup:
            dropped_followup.add(event.patient_id)
            continue
        if event.age_years < m.registration_age_years + washout:
            if washout_mode == "disease":
                washed_out_codes.add((event.patient_id, event.code))

    first: dict[tuple[str, str], EventRecord] = {}
    for event in events:
        m = by_patient.get(event.patient_id)
        if m is None or m.followup_years < min_followup:
            continue
        if event.age_years < m.registration_age_years + washout:
            summary.events_removed_washout += 1
            continue
        key = (event.patient_id, event.code)
        if key in washed_out_codes:
            summary.events_removed_washout += 1
            continue
        kept = first.get(key)
        if kept is None or event.age_years < kept.age_years:
            first[key] = event

    summary.patients_removed_followup = len(dropped_followup)
    summary.patients_missing_metadata = len(missing_meta)
    kept_events = sorted(first.values(), key=lambda e: (e.patient_id, e.code, e.age_years))
    summary.events_out = len(kept_events)
    summary.events_removed_recurrence = (
        summary.events_in - summary.events_out - summary.events_removed_washout
        - sum(1 for e in events
              if e.patient_id in dropped_followup or e.patient_id in missing_meta)
    )
    return kept_events, summary


def write_events_csv(events, path) -> None:
    with Path(path).open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(EVENT_HEADER)
        for e in events:
            writer.writerow([e.patient_id, e.code, e.age_years, e.strata])


def write_metadata_csv(meta, path) -> None:
    with Path(path).open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(META_HEADER)
        for m in meta:
            writer.writerow([m.patient_id, m.registration_age_years, m.followup_years, m.strata])
