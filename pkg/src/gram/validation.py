"""Input checks shared by the estimator and the command line."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .ehr import PatientRecord


def check_records(X, num_codes: int | None = None, min_visits: int = 1) -> list[PatientRecord]:
    """Return ``X`` as a list of patient records, or raise ``ValueError``.

    Checks element types, that every visit is non-empty, that code ids lie in
    ``[0, num_codes)`` when given, and that each patient has at least
    ``min_visits`` visits.
    """
    if isinstance(X, PatientRecord):
        raise ValueError("expected a sequence of PatientRecord, got a single record")
    records = list(X)
    if not records:
        raise ValueError("no patient records given")
    for pos, rec in enumerate(records):
        if not isinstance(rec, PatientRecord):
            raise ValueError(f"element {pos} is {type(rec).__name__}, not PatientRecord")
        if rec.num_visits < min_visits:
            raise ValueError(
                f"patient {rec.patient_id!r} has {rec.num_visits} visit(s); at least {min_visits} needed"
            )
        for visit in rec.visits:
            if not visit:
                raise ValueError(f"patient {rec.patient_id!r} has an empty visit")
            if num_codes is not None and (min(visit) < 0 or max(visit) >= num_codes):
                raise ValueError(f"patient {rec.patient_id!r} has a code outside [0, {num_codes})")
    return records


def check_binary_targets(y, records: Sequence[PatientRecord]) -> dict[str, int]:
    """Map aligned 0/1 targets (array-like or ``{patient_id: label}``) to flags."""
    if y is None:
        raise ValueError("binary task needs targets y")
    if isinstance(y, dict):
        missing = [r.patient_id for r in records if r.patient_id not in y]
        if missing:
            raise ValueError(f"no label for patient {missing[0]!r}")
        flags = {r.patient_id: int(y[r.patient_id]) for r in records}
    else:
        arr = np.asarray(y)
        if arr.ndim != 1 or len(arr) != len(records):
            raise ValueError(f"y must have one label per patient ({len(records)}), got shape {arr.shape}")
        flags = {r.patient_id: int(v) for r, v in zip(records, arr)}
    if any(v not in (0, 1) for v in flags.values()):
        raise ValueError("binary labels must be 0 or 1")
    return flags
