from __future__ import annotations

import itertools
import json
import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from cellrefine.errors import InsufficientMarkers, InvalidOntology, UnknownCellType
from cellrefine.ontology import (
    CellOntology,
    MarkerCatalog,
    build_prototypes,
    organize_markers,
    parent_lineage_pairs,
)


def chain_ontology():
    # root -> A -> B -> C
    return CellOntology.from_edges(["root", "A", "B", "C"], [("root", "A"), ("A", "B"), ("B", "C")])


def random_ontology(n: int, seed: int) -> CellOntology:
    rng = random.Random(seed)
    nodes = [f"n{i}" for i in range(n)]
    edges = [(nodes[rng.randrange(i)], nodes[i]) for i in range(1, n)]
    return CellOntology.from_edges(nodes, edges)


# --- CellOntology ----------------------------------------------------------------


def test_levels_follow_depth():
    onto = chain_ontology()
    assert [onto.level[n] for n in ("root", "A", "B", "C")] == [0, 1, 2, 3]
    assert onto.root == "root"
    assert onto.ancestors("C") == ["B", "A", "root"]


@pytest.mark.parametrize(
    "nodes, edges",
    [
        (["a", "b"], []),  # two roots
        (["a", "b", "c"], [("a", "b"), ("c", "b")]),  # two parents
        (["a", "b", "c"], [("a", "b"), ("c", "c")]),  # self loop
        (["r", "a", "b"], [("a", "b"), ("b", "a")]),  # cycle off the root
        (["a"], [("a", "zzz")]),  # unknown node
    ],
)
def test_invalid_ontologies_rejected(nodes, edges):
    with pytest.raises(InvalidOntology):
        CellOntology.from_edges(nodes, edges)


def test_json_round_trip(tmp_path):
    onto = random_ontology(12, 3)
    path = tmp_path / "ontology.json"
    onto.save(path)
    doc = json.loads(path.read_text())
    assert set(doc) == {"nodes", "edges"}
    again = CellOntology.load(path)
    assert again.level == onto.level and again.parent == onto.parent


@given(st.integers(2, 50), st.integers(0, 10_000))
def test_child_level_is_parent_level_plus_one(n, seed):
    onto = random_ontology(n, seed)
    for child, par in onto.parent.items():
        assert onto.level[child] == onto.level[par] + 1


# --- organize_markers ------------------------------------------------------------


def test_markers_ordered_most_specific_first():
    onto = chain_ontology()
    catalog = MarkerCatalog.from_mapping({"C": [("A", 1), ("B", 2), ("C", 3)]})
    assert organize_markers(catalog, onto, "C", K=3).genes == ("C", "B", "A")


def test_singleton_prototype():
    onto = chain_ontology()
    catalog = MarkerCatalog.from_mapping({"A": [("X", 1)]})
    assert organize_markers(catalog, onto, "A", K=1).genes == ("X",)


def test_equal_specificity_breaks_ties_by_gene_id():
    onto = chain_ontology()
    catalog = MarkerCatalog.from_mapping({"A": [("g2", 1), ("g1", 1)]})
    assert organize_markers(catalog, onto, "A", K=2).genes == ("g1", "g2")


def test_short_type_is_padded_from_ancestors_without_repeats():
    onto = chain_ontology()
    catalog = MarkerCatalog.from_mapping(
        {"C": [("c1", 3)], "B": [("b1", 2), ("c1", 3)], "A": [("a1", 1), ("a2", 1)]}
    )
    proto = organize_markers(catalog, onto, "C", K=4)
    assert proto.genes == ("c1", "b1", "a1", "a2")


def test_insufficient_markers():
    onto = chain_ontology()
    catalog = MarkerCatalog.from_mapping({"C": [("c1", 3)], "A": [("a1", 1)]})
    with pytest.raises(InsufficientMarkers):
        organize_markers(catalog, onto, "C", K=3)


def test_unknown_cell_type():
    catalog = MarkerCatalog.from_mapping({"A": [("X", 1)]})
    with pytest.raises(UnknownCellType):
        organize_markers(catalog, chain_ontology(), "nope", K=1)
    with pytest.raises(UnknownCellType):
        organize_markers(catalog, chain_ontology(), "B", K=1)


@given(
    st.dictionaries(st.sampled_from([f"g{i}" for i in range(30)]), st.integers(1, 3), min_size=1, max_size=30),
    st.integers(1, 30),
)
def test_prototype_invariants(markers, K):
    onto = chain_ontology()
    catalog = MarkerCatalog.from_mapping({"C": list(markers.items())})
    if K > len(markers):
        with pytest.raises(InsufficientMarkers):
            organize_markers(catalog, onto, "C", K)
        return
    proto = organize_markers(catalog, onto, "C", K)
    levels = [markers[g] for g in proto.genes]
    assert len(proto.genes) == K
    assert len(set(proto.genes)) == K
    assert all(a >= b for a, b in zip(levels, levels[1:]))
    assert organize_markers(catalog, onto, "C", K) == proto


def test_build_prototypes_covers_every_type():
    onto = chain_ontology()
    catalog = MarkerCatalog.from_mapping({"A": [("a", 1)], "B": [("b", 2)]})
    protos = build_prototypes(catalog, onto, ["A", "B"], K=1)
    assert {t: p.genes for t, p in protos.items()} == {"A": ("a",), "B": ("b",)}


# --- parent_lineage_pairs --------------------------------------------------------


def test_two_siblings():
    onto = CellOntology.from_edges(["root", "X", "Y", "Z"], [("root", "X"), ("X", "Y"), ("X", "Z")])
    assert frozenset(("Y", "Z")) in parent_lineage_pairs(onto)
    assert parent_lineage_pairs(onto) == {frozenset(("Y", "Z"))}


def test_single_child_has_no_pairs():
    onto = CellOntology.from_edges(["root", "X", "Y"], [("root", "X"), ("X", "Y")])
    assert parent_lineage_pairs(onto) == set()


def test_cousins_are_not_paired():
    onto = CellOntology.from_edges(
        ["root", "A", "B", "C", "D"], [("root", "A"), ("root", "B"), ("A", "C"), ("B", "D")]
    )
    assert parent_lineage_pairs(onto) == {frozenset(("A", "B"))}


@given(st.integers(2, 50), st.integers(0, 10_000))
def test_pairs_match_brute_force(n, seed):
    onto = random_ontology(n, seed)
    expected = set()
    for a, b in itertools.product(onto.nodes, repeat=2):
        if a != b and a in onto.parent and b in onto.parent:
            if onto.parent[a] == onto.parent[b] and onto.level[a] == onto.level[b]:
                expected.add(frozenset((a, b)))
    got = parent_lineage_pairs(onto)
    assert got == expected
    for pair in got:
        a, b = sorted(pair)
        assert onto.parent[a] == onto.parent[b] and onto.level[a] == onto.level[b]
