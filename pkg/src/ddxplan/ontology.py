"""Two-layer symptom hierarchy defining the inquiry action space.

Symptoms get dense integer ids with all first-layer categories in the block
[0, F) and all second-layer symptoms in [F, M). Every second-layer symptom
belongs to exactly one first-layer category; the index layout makes the
hierarchy gate on actions a constant-time lookup.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

FIRST_LAYER = 1
SECOND_LAYER = 2


class OntologyError(ValueError):
    """Malformed ontology file or inconsistent hierarchy."""


@dataclass(frozen=True)
class SymptomNode:
    id: int
    name: str
    layer: int
    parent: int | None = None
    children: tuple[int, ...] = ()


@dataclass(frozen=True)
class Ontology:
    """Immutable symptom hierarchy; safe to share across threads."""

    nodes: tuple[SymptomNode, ...]
    n_first: int

    # parent id per symptom, -1 for first-layer; used by the mask kernels
    parent_index: np.ndarray = field(compare=False, repr=False, default=None)

    def __post_init__(self):
        pid = np.full(len(self.nodes), -1, dtype=np.int64)
        for node in self.nodes:
            if node.parent is not None:
                pid[node.id] = node.parent
        object.__setattr__(self, "parent_index", pid)

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def names(self) -> list[str]:
        return [n.name for n in self.nodes]

    def id_of(self, name: str) -> int:
        try:
            return self._name_to_id[name]
        except AttributeError:
            mapping = {n.name: n.id for n in self.nodes}
            object.__setattr__(self, "_name_to_id", mapping)
            return self._name_to_id[name]

    def __contains__(self, name: str) -> bool:
        try:
            self.id_of(name)
            return True
        except KeyError:
            return False


def _check_id(ontology: Ontology, symptom_id: int) -> None:
    if not 0 <= symptom_id < ontology.size:
        raise IndexError(f"symptom id {symptom_id} out of range [0, {ontology.size})")


def parent_of(ontology: Ontology, symptom_id: int) -> int | None:
    """Parent id for second-layer symptoms, None for first-layer ones."""
    _check_id(ontology, symptom_id)
    return ontology.nodes[symptom_id].parent


def children_of(ontology: Ontology, symptom_id: int) -> tuple[int, ...]:
    """Child ids for first-layer symptoms, empty for second-layer ones."""
    _check_id(ontology, symptom_id)
    return ontology.nodes[symptom_id].children


def _build(first: list[str], second: list[tuple[str, str]]) -> Ontology:
    """Assemble and validate an ontology from name lists.

    first: first-layer names in index order. second: (name, parent_name)
    pairs in index order. Raises OntologyError on duplicate names or
    unresolvable parents.
    """
    seen: set[str] = set()
    for name in [n for n in first] + [n for n, _ in second]:
        if name in seen:
            raise OntologyError(f"duplicate symptom name: {name!r}")
        seen.add(name)

    n_first = len(first)
    parent_id = {name: i for i, name in enumerate(first)}
    children: dict[int, list[int]] = {i: [] for i in range(n_first)}
    second_nodes = []
    for offset, (name, parent_name) in enumerate(second):
        if parent_name not in parent_id:
            raise OntologyError(
                f"symptom {name!r} names unknown first-layer parent {parent_name!r}"
            )
        sid = n_first + offset
        children[parent_id[parent_name]].append(sid)
        second_nodes.append((sid, name, parent_id[parent_name]))

    nodes = [
        SymptomNode(i, name, FIRST_LAYER, None, tuple(children[i]))
        for i, name in enumerate(first)
    ]
    nodes.extend(SymptomNode(sid, name, SECOND_LAYER, pid) for sid, name, pid in second_nodes)
    return Ontology(nodes=tuple(nodes), n_first=n_first)


def load_ontology(path) -> Ontology:
    """Parse an ontology file: one `layer<TAB>name<TAB>parent-or-dash` per line.

    First-layer rows must precede any of their children; `#` starts a
    comment. Indices are assigned first-layer-first in file order.
    """
    first: list[str] = []
    second: list[tuple[str, str]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise OntologyError(
                    f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}"
                )
            layer_text, name, parent_name = (p.strip() for p in parts)
            if layer_text == "1":
                if parent_name != "-":
                    raise OntologyError(
                        f"{path}:{lineno}: first-layer symptom {name!r} must use '-' parent"
                    )
                first.append(name)
            elif layer_text == "2":
                if parent_name == "-":
                    raise OntologyError(
                        f"{path}:{lineno}: second-layer symptom {name!r} needs a parent"
                    )
                if parent_name not in first:
                    raise OntologyError(
                        f"{path}:{lineno}: symptom {name!r} references parent "
                        f"{parent_name!r} not declared above it"
                    )
                second.append((name, parent_name))
            else:
                raise OntologyError(f"{path}:{lineno}: layer must be 1 or 2, got {layer_text!r}")
    if not first:
        raise OntologyError(f"{path}: no first-layer symptoms")
    return _build(first, second)


def serialize_ontology(ontology: Ontology) -> str:
    """Render back to the file format; load(serialize(o)) == o."""
    lines = []
    for node in ontology.nodes[: ontology.n_first]:
        lines.append(f"1\t{node.name}\t-")
    for node in ontology.nodes[ontology.n_first :]:
        lines.append(f"2\t{node.name}\t{ontology.nodes[node.parent].name}")
    return "\n".join(lines) + "\n"


def save_ontology(ontology: Ontology, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize_ontology(ontology))


def generate_synthetic_ontology(n_first: int, children_per_first: int, seed: int = 0) -> Ontology:
    """Uniform synthetic hierarchy: `cat<i>` categories, `sym<i>.<j>` children.

    Deterministic for fixed arguments; the seed is accepted for interface
    stability (name generation has no randomness to drive).
    """
    if n_first < 1:
        raise ValueError("n_first must be >= 1")
    if children_per_first < 0:
        raise ValueError("children_per_first must be >= 0")
    first = [f"cat{i}" for i in range(n_first)]
    second = [
        (f"sym{i}.{j}", f"cat{i}")
        for i in range(n_first)
        for j in range(children_per_first)
    ]
    return _build(first, second)
