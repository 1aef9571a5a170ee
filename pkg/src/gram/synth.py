"""Ontology-structured synthetic EHR data.

A balanced tree is generated top-down from ``branching``. Each patient carries
a latent state, one of the leaves' parent nodes ("groups"); every visit emits
codes from the active group's leaves, weighted by a Zipf law over leaf ranks.
Between visits the state persists with probability ``coherence`` and is
otherwise redrawn in proportion to group popularity, so leaf frequencies
follow the Zipf weights and siblings share predictive structure.
"""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .ehr import GroupMap, PatientRecord, make_group_map, write_flags, write_group_map, write_records
from .ontology import OntologyDag, write_ontology


@dataclass(frozen=True)
class SynthConfig:
    num_leaves: int = 400
    branching: tuple[int, ...] = (5, 8, 10)
    num_patients: int = 2000
    visits_per_patient: tuple[int, int] = (4, 12)
    codes_per_visit: tuple[int, int] = (1, 4)
    zipf_exponent: float = 1.2
    coherence: float = 0.8
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if len(self.branching) < 2 or min(self.branching) < 1:
            raise ValueError("branching needs at least two levels, each >= 1")
        if int(np.prod(self.branching)) != self.num_leaves:
            raise ValueError(
                f"branching {self.branching} gives {int(np.prod(self.branching))} leaves, "
                f"config says {self.num_leaves}"
            )
        lo, hi = self.visits_per_patient
        if not 1 <= lo <= hi:
            raise ValueError("visits_per_patient must satisfy 1 <= lo <= hi")
        lo, hi = self.codes_per_visit
        if not 1 <= lo <= hi:
            raise ValueError("codes_per_visit must satisfy 1 <= lo <= hi")
        if hi > self.num_leaves:
            raise ValueError("codes per visit cannot exceed the number of leaves")
        if self.num_patients < 1:
            raise ValueError("num_patients must be >= 1")
        for name in ("coherence", "noise"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.zipf_exponent < 0:
            raise ValueError("zipf_exponent must be >= 0")


@dataclass
class SynthDataset:
    dag: OntologyDag
    records: list[PatientRecord]
    group_map: GroupMap
    flags: dict[str, int]
    categories: dict[str, str]
    case_group: str
    leaf_weights: np.ndarray


def build_tree(branching: Sequence[int]) -> tuple[OntologyDag, dict[str, str]]:
    """Balanced tree plus a leaf -> top-level-category map."""
    levels: list[list[tuple[str, str]]] = []
    category = {}
    frontier: list[tuple[str, str | None]] = [("root", None)]
    for depth, width in enumerate(branching):
        edges, nxt = [], []
        for parent, top in frontier:
            for k in range(width):
                if depth == 0:
                    name = f"T{k:02d}"
                elif depth == len(branching) - 1:
                    name = f"{parent}.C{k:02d}"
                else:
                    name = f"{parent}.M{k:02d}"
                edges.append((name, parent))
                nxt.append((name, top or name))
        levels.append(edges)
        frontier = nxt
    for name, top in frontier:
        category[name] = top
    # deepest level first so ids run leaves, parents, ..., root
    ordered = [e for edges in reversed(levels) for e in edges]
    return OntologyDag.from_edges(ordered), category


def _leaf_weights(dag: OntologyDag, exponent: float, rng) -> np.ndarray:
    """Zipf weights with ranks handed out one parent group at a time."""
    groups = sorted({dag.parents[i][0] for i in range(dag.num_leaves)})
    rng.shuffle(groups)
    weights = np.zeros(dag.num_leaves)
    rank = 1
    for g in groups:
        members = [i for i in range(dag.num_leaves) if dag.parents[i][0] == g]
        rng.shuffle(members)
        for leaf in members:
            weights[leaf] = rank ** -exponent
            rank += 1
    return weights / weights.sum()


CASE_RATE = 0.25


def _entry_rate(mass: np.ndarray, config: SynthConfig) -> np.ndarray:
    """Chance that a patient's latent state visits each group at least once."""
    lo, hi = config.visits_per_patient
    redraw = 1.0 - config.coherence
    never = np.zeros_like(mass)
    for t in range(lo, hi + 1):
        never += (1.0 - mass) * (1.0 - redraw * mass) ** (t - 1)
    return 1.0 - never / (hi - lo + 1)


def _case_group(mass: np.ndarray, config: SynthConfig) -> int:
    # aim for roughly a quarter positives so AUC is well defined on small splits
    return int(np.argmin(np.abs(_entry_rate(mass, config) - CASE_RATE)))


def generate(config: SynthConfig = SynthConfig()) -> SynthDataset:
    rng = np.random.default_rng(config.seed)
    dag, categories = build_tree(config.branching)
    weights = _leaf_weights(dag, config.zipf_exponent, rng)
    parent = np.array([dag.parents[i][0] for i in range(dag.num_leaves)])
    groups = np.unique(parent)
    members = {g: np.flatnonzero(parent == g) for g in groups}
    mass = np.array([weights[members[g]].sum() for g in groups])
    case_pos = _case_group(mass, config)

    records = []
    flags = {}
    width = len(str(config.num_patients - 1))
    for n in range(config.num_patients):
        pid = f"P{n:0{width}d}"
        num_visits = int(rng.integers(config.visits_per_patient[0], config.visits_per_patient[1] + 1))
        state = int(rng.choice(len(groups), p=mass))
        entered = False
        visits = []
        for t in range(num_visits):
            if t > 0 and rng.random() >= config.coherence:
                state = int(rng.choice(len(groups), p=mass))
            entered |= state == case_pos
            pool = members[groups[state]]
            k = int(rng.integers(config.codes_per_visit[0], config.codes_per_visit[1] + 1))
            k = min(k, len(pool))
            p = weights[pool] / weights[pool].sum()
            codes = set(int(c) for c in rng.choice(pool, size=k, replace=False, p=p))
            if config.noise > 0:
                swap = rng.random(k) < config.noise
                for _ in range(int(swap.sum())):
                    codes.add(int(rng.choice(dag.num_leaves, p=weights)))
            visits.append(frozenset(codes))
        records.append(PatientRecord(pid, tuple(visits)))
        flags[pid] = int(entered)

    gm = make_group_map({i: dag.names[parent[i]] for i in range(dag.num_leaves)}, dag.num_leaves)
    return SynthDataset(dag, records, gm, flags, categories, dag.names[groups[case_pos]], weights)


def describe(records: Sequence[PatientRecord]) -> dict:
    """Patient, visit and code counts in the style of a dataset summary table."""
    visits = [v for rec in records for v in rec.visits]
    codes = set().union(*visits) if visits else set()
    return {
        "num_patients": len(records),
        "num_visits": len(visits),
        "avg_visits_per_patient": len(visits) / len(records) if records else 0.0,
        "unique_codes": len(codes),
        "avg_codes_per_visit": float(np.mean([len(v) for v in visits])) if visits else 0.0,
        "max_codes_per_visit": max((len(v) for v in visits), default=0),
    }


def write_dataset(ds: SynthDataset, out_dir: str | os.PathLike, config: SynthConfig | None = None) -> dict:
    """Write ontology, records, groups, flags, labels and stats; return the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "ontology": out / "ontology.tsv",
        "records": out / "records.csv",
        "groups": out / "groups.csv",
        "flags": out / "flags.csv",
        "labels": out / "labels.tsv",
        "stats": out / "stats.json",
    }
    write_ontology(ds.dag, paths["ontology"])
    write_records(ds.records, ds.dag, paths["records"])
    write_group_map(ds.group_map, ds.dag, paths["groups"])
    write_flags(ds.flags, paths["flags"])
    with open(paths["labels"], "w", encoding="utf-8", newline="\n") as fh:
        for name in ds.dag.names[: ds.dag.num_leaves]:
            fh.write(f"{name}\t{ds.categories[name]}\n")
    stats = describe(ds.records)
    stats["case_group"] = ds.case_group
    stats["positive_rate"] = float(np.mean(list(ds.flags.values())))
    if config is not None:
        stats["config"] = asdict(config)
    with open(paths["stats"], "w", encoding="utf-8", newline="\n") as fh:
        json.dump(stats, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return {k: str(v) for k, v in paths.items()}
