"""Knowledge DAG: parsing, validation and ancestor closure.

Nodes are laid out densely with leaves first: ids ``[0, num_leaves)`` are the
medical codes that appear in records, ids ``[num_leaves, num_nodes)`` are the
more general ancestor concepts. The root is always the last id.
"""

from __future__ import annotations

import os
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Sequence


class OntologyError(ValueError):
    """Raised for malformed or inconsistent ontology input."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class OntologyDag:
    """Immutable parent-child DAG in leaf-first dense layout.

    Attributes:
        names: one name per node, indexed by concept id.
        parents: for each node, the tuple of its parent ids (empty for root).
        num_leaves: number of leaf codes; leaves occupy ids ``[0, num_leaves)``.
        root: id of the unique parentless node.
    """

    names: tuple[str, ...]
    parents: tuple[tuple[int, ...], ...]
    num_leaves: int
    root: int
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if not self._index:
            self._index.update({name: i for i, name in enumerate(self.names)})

    @property
    def num_nodes(self) -> int:
        return len(self.names)

    @property
    def num_internal(self) -> int:
        return self.num_nodes - self.num_leaves

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise KeyError(f"unknown concept {name!r}") from None

    def is_leaf(self, node: int) -> bool:
        return 0 <= node < self.num_leaves

    def children(self) -> list[list[int]]:
        kids: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for child, ps in enumerate(self.parents):
            for p in ps:
                kids[p].append(child)
        return kids

    def edges(self) -> list[tuple[str, str]]:
        """(child, parent) name pairs in id order."""
        return [
            (self.names[c], self.names[p])
            for c, ps in enumerate(self.parents)
            for p in ps
        ]

    @classmethod
    def from_edges(
        cls,
        edges: Iterable[tuple[str, str]],
        lines: Sequence[int] | None = None,
    ) -> "OntologyDag":
        """Build and validate a DAG from ``(child, parent)`` name pairs.

        Node order within each block (leaves, internals) follows first
        appearance in ``edges``; the root is moved to the final id.
        """
        edges = list(edges)
        if lines is None:
            lines = list(range(1, len(edges) + 1))
        order: list[str] = []
        seen: set[str] = set()
        is_parent: set[str] = set()
        parents_of: dict[str, list[str]] = {}
        edge_line: dict[tuple[str, str], int] = {}
        for (child, parent), line in zip(edges, lines):
            if child == parent:
                raise OntologyError(f"node {child!r} is its own parent", line)
            if (child, parent) in edge_line:
                raise OntologyError(
                    f"duplicate edge {child!r} -> {parent!r} "
                    f"(first seen on line {edge_line[(child, parent)]})",
                    line,
                )
            edge_line[(child, parent)] = line
            for name in (child, parent):
                if name not in seen:
                    seen.add(name)
                    order.append(name)
            is_parent.add(parent)
            parents_of.setdefault(child, []).append(parent)

        if not order:
            raise OntologyError("ontology has no edges")
        roots = [n for n in order if n not in parents_of]
        if len(roots) != 1:
            bad = roots[1:] if roots else order[:1]
            line = min(edge_line[e] for e in edge_line if e[1] in bad) if roots else None
            raise OntologyError(
                f"expected exactly one root, found {len(roots)}: "
                + ", ".join(repr(r) for r in roots),
                line,
            )
        root = roots[0]
        leaves = [n for n in order if n not in is_parent]
        internal = [n for n in order if n in is_parent and n != root]
        names = tuple(leaves + internal + [root])
        index = {n: i for i, n in enumerate(names)}
        parents = tuple(
            tuple(index[p] for p in parents_of.get(n, ())) for n in names
        )
        dag = cls(names=names, parents=parents, num_leaves=len(leaves), root=index[root])
        try:
            validate(dag)
        except OntologyError as err:
            culprit = getattr(err, "node", None)
            if culprit is not None and err.line is None:
                name = names[culprit]
                line = min(edge_line[e] for e in edge_line if name in e)
                raise OntologyError(str(err), line) from None
            raise
        return dag


def topological_order(dag: OntologyDag) -> list[int]:
    """Kahn's algorithm, children before parents.

    Raises:
        OntologyError: if the parent relation contains a cycle.
    """
    indegree = [0] * dag.num_nodes  # number of unprocessed children
    for ps in dag.parents:
        for p in ps:
            indegree[p] += 1
    queue = deque(i for i in range(dag.num_nodes) if indegree[i] == 0)
    order = []
    while queue:
        node = queue.popleft()
        order.append(node)
        for p in dag.parents[node]:
            indegree[p] -= 1
            if indegree[p] == 0:
                queue.append(p)
    if len(order) != dag.num_nodes:
        stuck = min(i for i in range(dag.num_nodes) if indegree[i] > 0)
        err = OntologyError(f"cycle detected through node {dag.names[stuck]!r}")
        err.node = stuck
        raise err
    return order


def validate(dag: OntologyDag) -> None:
    """Check the structural invariants; raise OntologyError on violation."""
    n = dag.num_nodes
    if len(dag.parents) != n:
        raise OntologyError("parents table does not match node count")
    if not 0 < dag.num_leaves < n:
        raise OntologyError("need at least one leaf and one non-leaf node")
    if dag.root != n - 1 or dag.parents[dag.root]:
        raise OntologyError("root must be the last id and have no parents")
    for node, ps in enumerate(dag.parents):
        if node != dag.root and not ps:
            err = OntologyError(f"node {dag.names[node]!r} has no parent")
            err.node = node
            raise err
        if len(set(ps)) != len(ps) or node in ps:
            err = OntologyError(f"node {dag.names[node]!r} has repeated or self parents")
            err.node = node
            raise err
        if any(not 0 <= p < n for p in ps):
            raise OntologyError(f"node {dag.names[node]!r} has an out-of-range parent")
    topological_order(dag)
    for leaf in range(dag.num_leaves):
        if dag.root not in _ancestor_set(dag, leaf):
            err = OntologyError(f"leaf {dag.names[leaf]!r} has no path to the root")
            err.node = leaf
            raise err


def parse_ontology(path: str | os.PathLike) -> OntologyDag:
    """Read a ``child<TAB>parent`` edge list into a validated DAG.

    Blank lines and lines starting with ``#`` are skipped. Errors carry the
    offending line number.
    """
    edges = []
    lines = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            text = raw.rstrip("\r\n")
            if not text.strip() or text.startswith("#"):
                continue
            parts = text.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise OntologyError(
                    f"expected 'child<TAB>parent', got {text!r}", lineno
                )
            edges.append((parts[0], parts[1]))
            lines.append(lineno)
    return OntologyDag.from_edges(edges, lines)


def write_ontology(dag: OntologyDag, path: str | os.PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("# child\tparent\n")
        for child, parent in dag.edges():
            fh.write(f"{child}\t{parent}\n")


def read_labels(path: str | os.PathLike) -> dict[str, str]:
    """Read the optional ``name<TAB>category`` sidecar used by exporters."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            text = raw.rstrip("\r\n")
            if not text or text.startswith("#"):
                continue
            name, _, category = text.partition("\t")
            out[name] = category
    return out


def _ancestor_set(dag: OntologyDag, node: int) -> set[int]:
    seen: set[int] = set()
    stack = list(dag.parents[node])
    while stack:
        p = stack.pop()
        if p not in seen:
            seen.add(p)
            stack.extend(dag.parents[p])
    return seen


def ancestors(dag: OntologyDag, leaf: int) -> list[int]:
    """Attention support of ``leaf``: itself, then distinct ancestors ascending.

    Nodes reachable through several paths appear once.
    """
    if not dag.is_leaf(leaf):
        raise IndexError(f"leaf index {leaf} out of range [0, {dag.num_leaves})")
    return [leaf] + sorted(_ancestor_set(dag, leaf))


def ancestor_map(dag: OntologyDag) -> list[list[int]]:
    """``ancestors`` for every leaf, in leaf order."""
    return [ancestors(dag, i) for i in range(dag.num_leaves)]


def direct_parent(dag: OntologyDag, node: int) -> int:
    """The smallest-id parent; the root maps to itself."""
    ps = dag.parents[node]
    return min(ps) if ps else node


def promote_observed_ancestors(dag: OntologyDag, observed: Iterable[str]) -> OntologyDag:
    """Move internal nodes that occur in records into the leaf block.

    Promoted nodes keep their parent edges, so their ancestor list is their
    own upward closure. Existing leaves keep their relative order; promoted
    nodes follow in ascending original id.

    Raises:
        KeyError: for a name not present in the DAG.
        OntologyError: when asked to promote the root.
    """
    ids = set()
    for name in observed:
        node = dag.index(name)
        if node == dag.root:
            raise OntologyError(f"cannot promote the root {name!r} to a leaf")
        ids.add(node)
    promoted = sorted(i for i in ids if not dag.is_leaf(i))
    if not promoted:
        return dag
    keep_internal = [i for i in range(dag.num_leaves, dag.num_nodes) if i not in ids]
    new_order = list(range(dag.num_leaves)) + promoted + keep_internal
    remap = {old: new for new, old in enumerate(new_order)}
    names = tuple(dag.names[old] for old in new_order)
    parents = tuple(tuple(remap[p] for p in dag.parents[old]) for old in new_order)
    out = OntologyDag(
        names=names,
        parents=parents,
        num_leaves=dag.num_leaves + len(promoted),
        root=remap[dag.root],
    )
    validate(out)
    return out
