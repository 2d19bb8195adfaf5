"""Label tree loading, level indexing, ancestor closure and tree distances."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import (
    CycleDetected,
    EmptyTaxonomy,
    InvalidIndex,
    MultipleParents,
    OrphanLabel,
)

ROOT = "Root"
ROOT_INDEX = -1


@dataclass(frozen=True, eq=False)
class LabelHierarchy:
    """An immutable label tree.

    Labels are indexed globally in breadth-first order, so every level occupies
    one contiguous block of indices: level 1 first, then level 2, and so on.
    ``parent[i]`` is ``ROOT_INDEX`` for level-1 labels.
    """

    labels: tuple[str, ...]
    parent: tuple[int, ...]
    level_of: tuple[int, ...]
    levels: tuple[tuple[int, ...], ...]
    distance: np.ndarray = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.labels)

    @property
    def depth(self) -> int:
        return len(self.levels)

    @property
    def level_sizes(self) -> list[int]:
        return [len(block) for block in self.levels]

    def index(self, name: str) -> int:
        try:
            return self._name_to_index[name]
        except KeyError:
            raise InvalidIndex(f"unknown label {name!r}") from None

    def __contains__(self, name: object) -> bool:
        return name in self._name_to_index

    @property
    def _name_to_index(self) -> dict[str, int]:
        cached = self.__dict__.get("_n2i")
        if cached is None:
            cached = {name: i for i, name in enumerate(self.labels)}
            object.__setattr__(self, "_n2i", cached)
        return cached

    def children(self, i: int) -> list[int]:
        self._check(i)
        return [j for j, p in enumerate(self.parent) if p == i]

    def ancestors(self, i: int) -> list[int]:
        """Ancestors of ``i`` from its parent up to level 1 (root excluded)."""
        self._check(i)
        out = []
        p = self.parent[i]
        while p != ROOT_INDEX:
            out.append(p)
            p = self.parent[p]
        return out

    def _check(self, i: int) -> None:
        if not isinstance(i, (int, np.integer)) or not 0 <= i < self.size:
            raise InvalidIndex(f"label index {i!r} out of range for {self.size} labels")

    def to_lines(self) -> list[str]:
        """Serialize back to the tab-separated parent/children format."""
        kids: dict[int, list[int]] = {ROOT_INDEX: []}
        for i, p in enumerate(self.parent):
            kids.setdefault(p, []).append(i)
        lines = []
        for p in [ROOT_INDEX, *range(self.size)]:
            if kids.get(p):
                name = ROOT if p == ROOT_INDEX else self.labels[p]
                lines.append("\t".join([name, *(self.labels[c] for c in kids[p])]))
        return lines

    def same_structure(self, other: "LabelHierarchy") -> bool:
        return self.labels == other.labels and self.parent == other.parent


def parse_taxonomy(lines: Iterable[str]) -> LabelHierarchy:
    """Build a hierarchy from ``parent<TAB>child...`` records.

    Blank lines are skipped. A parent may span several records; its children
    are appended in order of appearance.
    """
    children: dict[str, list[str]] = {}
    parent_of: dict[str, str] = {}
    for raw in lines:
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        fields = [f.strip() for f in line.split("\t")]
        head, kids = fields[0], [k for k in fields[1:] if k]
        children.setdefault(head, [])
        for kid in kids:
            if kid == ROOT:
                raise CycleDetected(f"{ROOT!r} cannot appear as a child (under {head!r})")
            if kid in parent_of:
                raise MultipleParents(
                    f"label {kid!r} appears under both {parent_of[kid]!r} and {head!r}"
                )
            parent_of[kid] = head
            children[head].append(kid)

    if not parent_of:
        raise EmptyTaxonomy("taxonomy defines no labels")

    for head in children:
        if head != ROOT and head not in parent_of:
            raise OrphanLabel(f"parent {head!r} is never defined as a child of {ROOT!r} or another label")

    for name in parent_of:
        seen = {name}
        p = parent_of[name]
        while p != ROOT:
            if p in seen:
                raise CycleDetected(f"label {name!r} is its own ancestor")
            seen.add(p)
            p = parent_of[p]

    if not children.get(ROOT):
        raise EmptyTaxonomy(f"{ROOT!r} has no children")

    names: list[str] = []
    levels_named: list[list[str]] = []
    frontier = list(children[ROOT])
    while frontier:
        levels_named.append(frontier)
        names.extend(frontier)
        frontier = [c for n in frontier for c in children.get(n, [])]

    index = {n: i for i, n in enumerate(names)}
    parent = tuple(ROOT_INDEX if parent_of[n] == ROOT else index[parent_of[n]] for n in names)
    level_of = tuple(h + 1 for h, block in enumerate(levels_named) for _ in block)
    levels = tuple(tuple(index[n] for n in block) for block in levels_named)
    return LabelHierarchy(
        labels=tuple(names),
        parent=parent,
        level_of=level_of,
        levels=levels,
        distance=_distance_table(parent, level_of),
    )


def load_taxonomy(source: str | Path | Iterable[str]) -> LabelHierarchy:
    """Load a hierarchy from a file path or an iterable of lines."""
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            return parse_taxonomy(fh.readlines())
    return parse_taxonomy(source)


def _distance_table(parent: tuple[int, ...], level_of: tuple[int, ...]) -> np.ndarray:
    # d(a, b) = depth(a) + depth(b) - 2 depth(lca); the root sits at depth 0.
    n = len(parent)
    paths = []
    for i in range(n):
        chain = [i]
        while parent[chain[-1]] != ROOT_INDEX:
            chain.append(parent[chain[-1]])
        paths.append(set(chain))
    dist = np.zeros((n, n), dtype=np.int64)
    for a in range(n):
        for b in range(a + 1, n):
            common = paths[a] & paths[b]
            lca_depth = max((level_of[c] for c in common), default=0)
            dist[a, b] = dist[b, a] = level_of[a] + level_of[b] - 2 * lca_depth
    dist.setflags(write=False)
    return dist


def ancestor_closure(h: LabelHierarchy, labels: Iterable[int]) -> frozenset[int]:
    out: set[int] = set()
    for i in labels:
        h._check(i)
        out.add(int(i))
        out.update(h.ancestors(int(i)))
    return frozenset(out)


def tree_distance(h: LabelHierarchy, a: int, b: int) -> int:
    h._check(a)
    h._check(b)
    return int(h.distance[a, b])


def closure_mask(h: LabelHierarchy, labels: Iterable[int]) -> np.ndarray:
    """Multi-hot vector over all labels for the ancestor closure of ``labels``."""
    mask = np.zeros(h.size, dtype=np.float32)
    mask[list(ancestor_closure(h, labels))] = 1.0
    return mask
