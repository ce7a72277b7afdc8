"""Cell-type hierarchy, marker catalogs and specificity-ordered prototypes."""

from __future__ import annotations

import itertools
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .errors import InsufficientMarkers, InvalidOntology, UnknownCellType, UnknownGene

DEFAULT_PROTOTYPE_LENGTH = 16


@dataclass(frozen=True)
class CellOntology:
    """A rooted tree of cell types.

    Levels are derived from the edges (root = 0) and never stored on disk.
    """

    nodes: tuple[str, ...]
    parent: Mapping[str, str]
    level: Mapping[str, int] = field(default_factory=dict)

    @classmethod
    def from_edges(cls, nodes: Iterable[str], edges: Iterable[tuple[str, str]]) -> "CellOntology":
        nodes = tuple(dict.fromkeys(nodes))
        node_set = set(nodes)
        parent: dict[str, str] = {}
        for par, child in edges:
            if par not in node_set or child not in node_set:
                raise InvalidOntology(f"edge ({par!r}, {child!r}) references an unknown node")
            if child in parent:
                raise InvalidOntology(f"node {child!r} has more than one parent")
            if par == child:
                raise InvalidOntology(f"self loop on {child!r}")
            parent[child] = par
        roots = [n for n in nodes if n not in parent]
        if len(roots) != 1:
            raise InvalidOntology(f"expected exactly one root, found {len(roots)}")

        level: dict[str, int] = {roots[0]: 0}
        children = defaultdict(list)
        for child, par in parent.items():
            children[par].append(child)
        stack = [roots[0]]
        while stack:
            node = stack.pop()
            for child in children[node]:
                level[child] = level[node] + 1
                stack.append(child)
        if len(level) != len(nodes):
            # unreachable nodes can only sit on a cycle
            raise InvalidOntology("parent relation contains a cycle")
        return cls(nodes=nodes, parent=dict(parent), level=level)

    @property
    def root(self) -> str:
        return next(n for n in self.nodes if n not in self.parent)

    def ancestors(self, node: str) -> list[str]:
        """Ancestors from the immediate parent up to the root."""
        if node not in self.level:
            raise UnknownCellType(node)
        out = []
        while node in self.parent:
            node = self.parent[node]
            out.append(node)
        return out

    def children(self, node: str) -> list[str]:
        return [c for c in self.nodes if self.parent.get(c) == node]

    def descendants(self, node: str) -> set[str]:
        out: set[str] = set()
        frontier = [node]
        while frontier:
            cur = frontier.pop()
            for child in self.children(cur):
                out.add(child)
                frontier.append(child)
        return out

    def to_json(self) -> dict:
        edges = [[self.parent[n], n] for n in self.nodes if n in self.parent]
        return {"nodes": list(self.nodes), "edges": edges}

    @classmethod
    def from_json(cls, obj: Mapping) -> "CellOntology":
        try:
            return cls.from_edges(obj["nodes"], [tuple(e) for e in obj["edges"]])
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidOntology(f"malformed ontology document: {exc}") from exc

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CellOntology":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class MarkerCatalog:
    """Marker genes per cell type, each tagged with its specificity level."""

    entries: Mapping[str, tuple[tuple[str, int], ...]]

    @classmethod
    def from_mapping(cls, mapping: Mapping[str, Iterable]) -> "MarkerCatalog":
        return cls({ct: tuple((str(g), int(lvl)) for g, lvl in markers) for ct, markers in mapping.items()})

    def validate(self, ontology: CellOntology, genes: Iterable[str] | None = None) -> None:
        known = set(genes) if genes is not None else None
        for ct, markers in self.entries.items():
            if ct not in ontology.level:
                raise UnknownCellType(f"catalog entry {ct!r} is not in the ontology")
            if known is not None:
                for gene, _ in markers:
                    if gene not in known:
                        raise UnknownGene(f"marker {gene!r} of {ct!r} is not in the vocabulary")

    def to_json(self) -> dict:
        return {ct: [[g, lvl] for g, lvl in markers] for ct, markers in self.entries.items()}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "MarkerCatalog":
        return cls.from_mapping(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class Prototype:
    cell_type: str
    genes: tuple[str, ...]


def _by_specificity(markers: Iterable[tuple[str, int]]) -> list[tuple[str, int]]:
    return sorted(markers, key=lambda m: (-m[1], m[0]))


def organize_markers(
    catalog: MarkerCatalog,
    ontology: CellOntology,
    cell_type: str,
    K: int = DEFAULT_PROTOTYPE_LENGTH,
) -> Prototype:
    """Order a cell type's markers from most to least specific and keep K.

    Ties within a level break on ascending gene id. When the type itself has
    fewer than K markers, markers of its ancestors (nearest first) fill the
    remaining slots without repeats.
    """
    if cell_type not in ontology.level or cell_type not in catalog.entries:
        raise UnknownCellType(cell_type)
    if K < 1:
        raise ValueError("K must be positive")
    own = catalog.entries[cell_type]
    if not own:
        raise InsufficientMarkers(f"{cell_type!r} has no markers")

    chosen: dict[str, int] = {}
    for source in [cell_type, *ontology.ancestors(cell_type)]:
        for gene, lvl in _by_specificity(catalog.entries.get(source, ())):
            chosen.setdefault(gene, lvl)
        if len(chosen) >= K:
            break
    if len(chosen) < K:
        raise InsufficientMarkers(
            f"{cell_type!r}: only {len(chosen)} distinct markers across the type and its ancestors, need {K}"
        )
    ordered = _by_specificity(chosen.items())[:K]
    return Prototype(cell_type=cell_type, genes=tuple(g for g, _ in ordered))


def parent_lineage_pairs(ontology: CellOntology) -> set[frozenset[str]]:
    """Unordered pairs of distinct types sharing both parent and ontology level."""
    groups: dict[tuple[str, int], list[str]] = defaultdict(list)
    for node, par in ontology.parent.items():
        groups[(par, ontology.level[node])].append(node)
    pairs = set()
    for members in groups.values():
        for a, b in itertools.combinations(sorted(members), 2):
            pairs.add(frozenset((a, b)))
    return pairs


def build_prototypes(
    catalog: MarkerCatalog, ontology: CellOntology, cell_types: Iterable[str], K: int
) -> dict[str, Prototype]:
    return {ct: organize_markers(catalog, ontology, ct, K) for ct in cell_types}
