"""Ragged OS label taxonomy and its structural operators.

The taxonomy is a forest of trees whose roots are the level-1 nodes (OS families). A
node's level is its depth on the path from its root, so branches may terminate at
different depths: a major version without minor versions is itself a terminal leaf.
"""

import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Literal

from hiercp import HierCPError

logger = logging.getLogger(__name__)

# characters with a structural meaning in the prediction-set file format
RESERVED_NAME_CHARACTERS = frozenset("|;{}")

# the terminal-leaf layer spans depths, so it is addressed by name rather than depth
LEAF_LEVEL: Literal["leaf"] = "leaf"
Level = int | Literal["leaf"]


def parse_level(value: str) -> Level:
    """Parse a level written as an integer depth or as `leaf`."""
    value = value.strip()
    if value == LEAF_LEVEL:
        return LEAF_LEVEL
    try:
        return int(value)
    except ValueError:
        message = f"'{value}' is not a level; expected a positive integer or 'leaf'"
        raise TaxonomyError(message) from None


class TaxonomyError(HierCPError):
    """Exception raised for malformed taxonomy files or invalid taxonomy queries."""


@dataclass(frozen=True)
class NodeId:
    name: str
    index: int


class Taxonomy:
    """Immutable rooted (possibly ragged) label forest.

    Node order is the order in which nodes appear in the taxonomy file; it defines the
    column order of every probability table.
    """

    def __init__(self, names: list[str], parents: dict[str, str | None]) -> None:
        """Initialize Taxonomy instance from validated names and parent links."""
        self._nodes = tuple(NodeId(name, index) for index, name in enumerate(names))
        self._by_name = {node.name: node for node in self._nodes}
        self._parent_of = dict(parents)
        children: dict[str, list[str]] = {name: [] for name in names}
        for name in names:
            parent = parents[name]
            if parent is not None:
                children[parent].append(name)
        self._children_of = {name: tuple(kids) for name, kids in children.items()}
        self._paths: dict[str, tuple[str, ...]] = {}
        for name in names:
            self._paths[name] = self._root_path(name)
        self._level_of = {name: len(path) for name, path in self._paths.items()}
        self._depth = max(self._level_of.values())

    def _root_path(self, name: str) -> tuple[str, ...]:
        path = [name]
        parent = self._parent_of[name]
        while parent is not None:
            path.append(parent)
            parent = self._parent_of[parent]
        return tuple(reversed(path))

    def __repr__(self) -> str:
        return (
            f"Taxonomy(nodes={len(self._nodes)}, depth={self._depth}, "
            f"leaves={len(self.leaves)})"
        )

    def __contains__(self, name: object) -> bool:
        return name in self._by_name

    @property
    def nodes(self) -> tuple[NodeId, ...]:
        return self._nodes

    @property
    def depth(self) -> int:
        return self._depth

    @cached_property
    def leaves(self) -> tuple[str, ...]:
        """Terminal leaves (childless nodes at any depth) in node order."""
        return tuple(
            node.name for node in self._nodes if not self._children_of[node.name]
        )

    @cached_property
    def roots(self) -> tuple[str, ...]:
        return self.level_nodes(1)

    def node(self, name: str) -> NodeId:
        try:
            return self._by_name[name]
        except KeyError:
            message = f"Unknown taxonomy node '{name}'"
            raise TaxonomyError(message) from None

    def level_of(self, name: str) -> int:
        return self._level_of[self.node(name).name]

    def parent_of(self, name: str) -> str | None:
        return self._parent_of[self.node(name).name]

    def children_of(self, name: str) -> tuple[str, ...]:
        return self._children_of[self.node(name).name]

    def is_leaf(self, name: str) -> bool:
        return not self.children_of(name)

    def path(self, name: str) -> tuple[str, ...]:
        """Return the root-to-node path, root first."""
        return self._paths[self.node(name).name]

    def level_nodes(self, level: int) -> tuple[str, ...]:
        """Return the level-k nodes in node order."""
        self._check_level(level)
        return tuple(
            node.name for node in self._nodes if self._level_of[node.name] == level
        )

    def leaf_descendants(self, name: str) -> frozenset[str]:
        """Return the terminal leaves at or below a node; a leaf returns itself."""
        return self._leaf_descendants[self.node(name).name]

    @cached_property
    def _leaf_descendants(self) -> dict[str, frozenset[str]]:
        descendants: dict[str, set[str]] = {node.name: set() for node in self._nodes}
        for leaf in self.leaves:
            for ancestor in self._paths[leaf]:
                descendants[ancestor].add(leaf)
        return {name: frozenset(leaves) for name, leaves in descendants.items()}

    def ancestor_at_level(self, name: str, level: int) -> str | None:
        """Return the level-k node on the node's root path, or None if k is deeper."""
        self._check_level(level)
        path = self.path(name)
        if level > len(path):
            return None
        return path[level - 1]

    @property
    def reported_levels(self) -> tuple[Level, ...]:
        """Depth levels 1..K followed by the terminal-leaf layer."""
        return (*range(1, self._depth + 1), LEAF_LEVEL)

    def class_order(self, level: Level) -> tuple[str, ...]:
        """Return the label space of a depth level or of the leaf layer."""
        if level == LEAF_LEVEL:
            return self.leaves
        return self.level_nodes(int(level))

    def label_at(self, leaf: str, level: Level) -> str | None:
        """Return the level label induced by a terminal leaf, or None if undefined."""
        if level == LEAF_LEVEL:
            return self.node(leaf).name
        return self.ancestor_at_level(leaf, int(level))

    def _check_level(self, level: int) -> None:
        if isinstance(level, bool) or not isinstance(level, int):
            message = f"Level {level!r} is not a depth level"
            raise TaxonomyError(message)
        if not 1 <= level <= self._depth:
            message = f"Level {level} is outside the taxonomy's range 1..{self._depth}"
            raise TaxonomyError(message)


def parse_taxonomy(source: str) -> Taxonomy:
    """Parse taxonomy file content into a validated Taxonomy.

    Each non-comment line is `node_name<TAB>parent_name`; a root line has an empty (or
    missing) parent field. Parents may be referenced before they are defined.

    Raises:
        TaxonomyError: on an empty file, duplicate node name, reserved characters in a
            name, unknown parent or cycle.
    """
    names: list[str] = []
    parents: dict[str, str | None] = {}
    for line_number, raw_line in enumerate(source.splitlines(), start=1):
        line = raw_line.rstrip("\r\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        name, _, parent = line.partition("\t")
        name, parent = name.strip(), parent.strip()
        if "\t" in parent:
            message = f"Line {line_number} has more than two tab-separated fields"
            raise TaxonomyError(message)
        if not name:
            message = f"Line {line_number} has an empty node name"
            raise TaxonomyError(message)
        if RESERVED_NAME_CHARACTERS.intersection(name):
            message = (
                f"Node name '{name}' on line {line_number} contains one of the reserved "
                f"characters {''.join(sorted(RESERVED_NAME_CHARACTERS))}"
            )
            raise TaxonomyError(message)
        if name in parents:
            message = f"Duplicate node name '{name}' on line {line_number}"
            raise TaxonomyError(message)
        names.append(name)
        parents[name] = parent or None

    if not names:
        message = "Taxonomy file contains no nodes"
        raise TaxonomyError(message)
    unknown = [parent for parent in parents.values() if parent and parent not in parents]
    if unknown:
        message = f"Unknown parent node(s): {', '.join(sorted(set(unknown)))}"
        raise TaxonomyError(message)
    _check_acyclic(names, parents)

    taxonomy = Taxonomy(names, parents)
    logger.debug("Parsed %r", taxonomy)
    return taxonomy


def _check_acyclic(names: list[str], parents: dict[str, str | None]) -> None:
    rooted: set[str] = set()
    for name in names:
        seen: list[str] = []
        current: str | None = name
        while current is not None and current not in rooted:
            if current in seen:
                cycle = " -> ".join([*seen[seen.index(current) :], current])
                message = f"Cycle detected in taxonomy: {cycle}"
                raise TaxonomyError(message)
            seen.append(current)
            current = parents[current]
        rooted.update(seen)


def read_taxonomy(path: str | Path) -> Taxonomy:
    with open(path, encoding="utf-8") as taxonomy_file:
        return parse_taxonomy(taxonomy_file.read())
