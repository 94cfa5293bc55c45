"""Class hierarchy parsing and the semantic (hyponym) correlation encoding.

Taxonomy files hold one ``parent>child`` edge per line. A line with a single
bare id declares an isolated node; ``#`` starts a comment line. Partition
files list coarse and fine class ids under ``[coarse]`` and ``[fine]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from finedet.correlation import CorrelationMatrix
from finedet.errors import TaxonomyError, ValidationError


@dataclass(frozen=True)
class TaxonomyGraph:
    """Directed acyclic hypernym -> hyponym graph. Nodes are kept sorted."""

    nodes: tuple[str, ...]
    edges: tuple[tuple[str, str], ...]

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(sorted(set(self.nodes))))
        object.__setattr__(self, "edges", tuple(sorted(set(self.edges))))
        known = set(self.nodes)
        for parent, child in self.edges:
            if parent not in known or child not in known:
                raise TaxonomyError(f"edge {parent}>{child} references an undeclared node")
            if parent == child:
                raise TaxonomyError(f"self-loop on {parent}")
        cycle = _find_cycle(self.nodes, self.children)
        if cycle:
            raise TaxonomyError("cycle detected: " + " > ".join(cycle))

    @cached_property
    def children(self) -> dict[str, tuple[str, ...]]:
        out: dict[str, list[str]] = {n: [] for n in self.nodes}
        for parent, child in self.edges:
            out[parent].append(child)
        return {k: tuple(v) for k, v in out.items()}

    @cached_property
    def parents(self) -> dict[str, tuple[str, ...]]:
        out: dict[str, list[str]] = {n: [] for n in self.nodes}
        for parent, child in self.edges:
            out[child].append(parent)
        return {k: tuple(v) for k, v in out.items()}

    def __contains__(self, node) -> bool:
        return node in self.children


def _find_cycle(nodes, children):
    white, grey, black = 0, 1, 2
    colour = dict.fromkeys(nodes, white)
    for root in nodes:
        if colour[root] != white:
            continue
        stack = [(root, iter(children[root]))]
        path = [root]
        colour[root] = grey
        while stack:
            node, it = stack[-1]
            nxt = next(it, None)
            if nxt is None:
                colour[node] = black
                stack.pop()
                path.pop()
            elif colour[nxt] == grey:
                return path[path.index(nxt):] + [nxt]
            elif colour[nxt] == white:
                colour[nxt] = grey
                stack.append((nxt, iter(children[nxt])))
                path.append(nxt)
    return None


def parse_taxonomy(text: str) -> TaxonomyGraph:
    nodes: set[str] = set()
    edges: list[tuple[str, str]] = []
    seen: dict[tuple[str, str], int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if ">" not in line:
            if len(line.split()) != 1:
                raise TaxonomyError(f"malformed line {raw!r}", lineno)
            nodes.add(line)
            continue
        parts = [p.strip() for p in line.split(">")]
        if len(parts) != 2 or not all(parts) or any(len(p.split()) != 1 for p in parts):
            raise TaxonomyError(f"malformed edge {raw!r}", lineno)
        edge = (parts[0], parts[1])
        if edge[0] == edge[1]:
            raise TaxonomyError(f"cycle detected: self-loop on {edge[0]}", lineno)
        if edge in seen:
            raise TaxonomyError(f"duplicate edge {line!r} (first on line {seen[edge]})", lineno)
        seen[edge] = lineno
        edges.append(edge)
        nodes.update(edge)
    return TaxonomyGraph(tuple(nodes), tuple(edges))


def serialize_taxonomy(graph: TaxonomyGraph) -> str:
    linked = {n for e in graph.edges for n in e}
    lines = [n for n in graph.nodes if n not in linked]
    lines += [f"{p}>{c}" for p, c in graph.edges]
    return "\n".join(lines) + ("\n" if lines else "")


def _closure(graph: TaxonomyGraph, node: str, step: dict) -> set[str]:
    if node not in graph:
        raise ValidationError(f"unknown class {node!r}")
    out: set[str] = set()
    stack = list(step[node])
    while stack:
        n = stack.pop()
        if n not in out:
            out.add(n)
            stack.extend(step[n])
    return out


def hyponym_closure(graph: TaxonomyGraph, node: str) -> set[str]:
    """All transitive descendants of ``node``, excluding ``node``."""
    return _closure(graph, node, graph.children)


def hypernym_closure(graph: TaxonomyGraph, node: str) -> set[str]:
    return _closure(graph, node, graph.parents)


@dataclass(frozen=True)
class ClassPartition:
    """Disjoint ordered coarse and fine class lists; order fixes matrix indices."""

    coarse: tuple[str, ...]
    fine: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "coarse", tuple(self.coarse))
        object.__setattr__(self, "fine", tuple(self.fine))
        for name, ids in (("coarse", self.coarse), ("fine", self.fine)):
            if len(set(ids)) != len(ids):
                raise ValidationError(f"duplicate ids in {name} list")
        overlap = set(self.coarse) & set(self.fine)
        if overlap:
            raise ValidationError(f"coarse and fine classes overlap: {sorted(overlap)}")

    def check_graph(self, graph: TaxonomyGraph) -> None:
        missing = [c for c in self.coarse + self.fine if c not in graph]
        if missing:
            raise ValidationError(f"partition ids missing from taxonomy: {missing}")

    @classmethod
    def sorted(cls, coarse, fine) -> "ClassPartition":
        return cls(tuple(sorted(coarse)), tuple(sorted(fine)))


def parse_partition(text: str, graph: TaxonomyGraph | None = None) -> ClassPartition:
    sections: dict[str, list[str]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1].strip()
            if current not in ("coarse", "fine"):
                raise TaxonomyError(f"unknown section [{current}]", lineno)
            sections.setdefault(current, [])
            continue
        if current is None or len(line.split()) != 1:
            raise TaxonomyError(f"malformed partition line {raw!r}", lineno)
        sections[current].append(line)
    part = ClassPartition(tuple(sections.get("coarse", ())), tuple(sections.get("fine", ())))
    if graph is not None:
        part.check_graph(graph)
    return part


def serialize_partition(partition: ClassPartition) -> str:
    return "\n".join(["[coarse]", *partition.coarse, "[fine]", *partition.fine]) + "\n"


def _require(ids, cls_id, what):
    if cls_id not in ids:
        raise ValidationError(f"unknown {what} class {cls_id!r}")


def semantic_encode(graph: TaxonomyGraph, partition: ClassPartition, coarse_class: str) -> np.ndarray:
    """0/1 row over fine classes: 1 where the fine class is a hyponym."""
    _require(partition.coarse, coarse_class, "coarse")
    below = hyponym_closure(graph, coarse_class)
    return np.array([1.0 if f in below else 0.0 for f in partition.fine])


def reverse_semantic_encode(graph: TaxonomyGraph, partition: ClassPartition, fine_class: str) -> np.ndarray:
    _require(partition.fine, fine_class, "fine")
    above = hypernym_closure(graph, fine_class)
    return np.array([1.0 if c in above else 0.0 for c in partition.coarse])


def build_semantic_correlation(graph: TaxonomyGraph, partition: ClassPartition) -> CorrelationMatrix:
    partition.check_graph(graph)
    rows = [semantic_encode(graph, partition, c) for c in partition.coarse]
    values = np.array(rows).reshape(len(partition.coarse), len(partition.fine))
    return CorrelationMatrix(values, "semantic-onehot", partition.coarse, partition.fine)
