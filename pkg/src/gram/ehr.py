"""Patient records, label grouping and dataset splitting."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .ontology import OntologyDag

logger = logging.getLogger(__name__)

Visit = frozenset  # set of concept ids; nonempty


class RecordError(ValueError):
    """Raised for malformed records, flags or group-map files."""


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    visits: tuple[Visit, ...]

    def __post_init__(self):
        if any(not v for v in self.visits):
            raise RecordError(f"patient {self.patient_id!r} has an empty visit")

    @property
    def num_visits(self) -> int:
        return len(self.visits)


@dataclass(frozen=True)
class GroupMap:
    """Total map from leaf id to label-group id.

    Attributes:
        groups: group id per leaf, indexed by leaf id.
        names: display name per group id.
    """

    groups: tuple[int, ...]
    names: tuple[str, ...]

    @property
    def num_groups(self) -> int:
        return len(self.names)

    def __getitem__(self, leaf: int) -> int:
        return self.groups[leaf]


@dataclass(frozen=True)
class DatasetSplit:
    train: list[PatientRecord]
    validation: list[PatientRecord]
    test: list[PatientRecord]


def load_records(
    path: str | os.PathLike,
    dag: OntologyDag,
    min_visits: int = 2,
    return_dropped: bool = False,
):
    """Read a ``patient_id,visit_index,code`` CSV into patient records.

    Rows for one patient must have non-decreasing visit indices. Codes must be
    leaves of ``dag``. Patients with fewer than ``min_visits`` visits are
    dropped with a logged warning; pass ``return_dropped=True`` to also get
    their count.
    """
    visits: dict[str, dict[int, set[int]]] = {}
    last_index: dict[str, int] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["patient_id", "visit_index", "code"]:
            raise RecordError(f"{path}: expected header 'patient_id,visit_index,code'")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise RecordError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            pid, raw_index, code = (c.strip() for c in row)
            try:
                index = int(raw_index)
            except ValueError:
                raise RecordError(f"{path}:{lineno}: bad visit index {raw_index!r}") from None
            if pid in last_index and index < last_index[pid]:
                raise RecordError(
                    f"{path}:{lineno}: visit index {index} for patient {pid!r} "
                    f"follows {last_index[pid]} (non-monotone)"
                )
            last_index[pid] = index
            try:
                node = dag.index(code)
            except KeyError:
                raise RecordError(f"{path}:{lineno}: unknown code {code!r}") from None
            if not dag.is_leaf(node):
                raise RecordError(f"{path}:{lineno}: code {code!r} is not a leaf of the ontology")
            visits.setdefault(pid, {}).setdefault(index, set()).add(node)

    records = []
    dropped = 0
    for pid, by_index in visits.items():
        if len(by_index) < min_visits:
            dropped += 1
            continue
        records.append(
            PatientRecord(pid, tuple(frozenset(by_index[i]) for i in sorted(by_index)))
        )
    if dropped:
        logger.warning("dropped %d patient(s) with fewer than %d visits", dropped, min_visits)
    if return_dropped:
        return records, dropped
    return records


def write_records(records: Iterable[PatientRecord], dag: OntologyDag, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id", "visit_index", "code"])
        for rec in records:
            for t, visit in enumerate(rec.visits):
                for code in sorted(visit):
                    writer.writerow([rec.patient_id, t, dag.names[code]])


def load_flags(path: str | os.PathLike) -> dict[str, int]:
    """Read the ``patient_id,label`` CSV used by the binary task."""
    flags = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"patient_id", "label"}:
            raise RecordError(f"{path}: expected header 'patient_id,label'")
        for row in reader:
            label = row["label"].strip()
            if label not in ("0", "1"):
                raise RecordError(f"{path}: label for {row['patient_id']!r} must be 0 or 1")
            flags[row["patient_id"].strip()] = int(label)
    return flags


def write_flags(flags: dict[str, int], path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["patient_id", "label"])
        for pid, label in flags.items():
            writer.writerow([pid, int(label)])


def load_group_map(path: str | os.PathLike, dag: OntologyDag) -> GroupMap:
    """Read a ``code,group_name`` CSV. Group ids follow first appearance."""
    assigned: dict[int, str] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or set(reader.fieldnames) != {"code", "group_name"}:
            raise RecordError(f"{path}: expected header 'code,group_name'")
        for row in reader:
            try:
                node = dag.index(row["code"].strip())
            except KeyError:
                raise RecordError(f"{path}: unknown code {row['code']!r}") from None
            assigned[node] = row["group_name"].strip()
    return make_group_map(assigned, dag.num_leaves)


def make_group_map(assigned: dict[int, str], num_leaves: int) -> GroupMap:
    missing = [i for i in range(num_leaves) if i not in assigned]
    if missing:
        raise RecordError(f"group map is not total: {len(missing)} leaves unmapped (first id {missing[0]})")
    names: list[str] = []
    ids: dict[str, int] = {}
    groups = []
    for leaf in range(num_leaves):
        name = assigned[leaf]
        if name not in ids:
            ids[name] = len(names)
            names.append(name)
        groups.append(ids[name])
    return GroupMap(tuple(groups), tuple(names))


def write_group_map(gm: GroupMap, dag: OntologyDag, path: str | os.PathLike) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["code", "group_name"])
        for leaf, g in enumerate(gm.groups):
            writer.writerow([dag.names[leaf], gm.names[g]])


def multi_hot(visit: Visit, dim: int) -> np.ndarray:
    x = np.zeros(dim)
    x[sorted(visit)] = 1.0
    return x


def build_labels(
    record: PatientRecord,
    gm: GroupMap,
    task: str = "sequential",
    flag: int | None = None,
) -> np.ndarray:
    """Targets for one patient.

    ``sequential`` gives a ``(T-1, L)`` multi-hot array whose row ``t`` holds
    the groups of visit ``t+1``. ``binary`` gives a single 0/1 label taken
    from ``flag``.
    """
    if task == "binary":
        if flag is None:
            raise ValueError("binary task needs a flag")
        return np.array(float(flag))
    if task != "sequential":
        raise ValueError(f"unknown task {task!r}")
    y = np.zeros((record.num_visits - 1, gm.num_groups))
    for t, visit in enumerate(record.visits[1:]):
        y[t, [gm[c] for c in visit]] = 1.0
    return y


def split_dataset(
    records: Sequence[PatientRecord],
    ratios: Sequence[float] = (0.75, 0.10, 0.15),
    seed: int = 0,
) -> DatasetSplit:
    """Random train/validation/test partition.

    Cut points are the rounded cumulative targets ``n * (r1)`` and
    ``n * (r1 + r2)``, so each part is within one patient of its target.
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or not np.isclose(sum(ratios), 1.0):
        raise ValueError(f"ratios must be three nonnegative numbers summing to 1, got {ratios}")
    n = len(records)
    perm = np.random.default_rng(seed).permutation(n)
    cuts = [int(np.floor(n * c + 0.5 + 1e-9)) for c in np.cumsum(ratios[:2])]
    parts = np.split(perm, cuts)
    train, valid, test = ([records[i] for i in part] for part in parts)
    return DatasetSplit(train, valid, test)


def label_frequencies(train: Iterable[PatientRecord], gm: GroupMap) -> np.ndarray:
    """How often each group occurs among the sequential targets of ``train``."""
    counts = np.zeros(gm.num_groups, dtype=np.int64)
    for rec in train:
        for visit in rec.visits[1:]:
            for g in {gm[c] for c in visit}:
                counts[g] += 1
    return counts
