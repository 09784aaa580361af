"""Discrete path space: increment-labelled paths, scenario trees and stopping rules."""

from __future__ import annotations

import math
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Union


@dataclass(frozen=True)
class TimeGrid:
    steps: int
    dt: float

    def __post_init__(self) -> None:
        if not isinstance(self.steps, int) or self.steps < 1:
            raise ValueError("steps >= 1 required")
        if not self.dt > 0:
            raise ValueError("dt > 0 required")

    @property
    def horizon(self) -> float:
        return self.steps * self.dt


@dataclass(frozen=True)
class DiscretePath:
    """A path started at 0, stored as its increments."""

    increments: tuple[float, ...] = ()

    def __len__(self) -> int:
        return len(self.increments)

    def value(self, step: int | None = None) -> float:
        """Path value at ``step`` (default: the last step)."""
        incs = self.increments if step is None else self.increments[:step]
        if step is not None and not 0 <= step <= len(self.increments):
            raise IndexError(f"step {step} outside [0, {len(self.increments)}]")
        return math.fsum(incs)

    def values(self) -> tuple[float, ...]:
        return tuple(self.value(k) for k in range(len(self) + 1))

    def prefix(self, step: int) -> DiscretePath:
        if not 0 <= step <= len(self.increments):
            raise IndexError(f"step {step} outside [0, {len(self.increments)}]")
        return DiscretePath(self.increments[:step])

    def tail(self, step: int) -> DiscretePath:
        if not 0 <= step <= len(self):
            raise IndexError(f"step {step} outside [0, {len(self)}]")
        return DiscretePath(self.increments[step:])

    def extend(self, increment: float) -> DiscretePath:
        return DiscretePath(self.increments + (increment,))

    def is_prefix_of(self, other: DiscretePath) -> bool:
        return other.increments[: len(self)] == self.increments


ROOT = DiscretePath()


def concat(prefix: DiscretePath, at: int, tail: DiscretePath, steps: int | None = None) -> DiscretePath:
    """Concatenate ``tail`` onto ``prefix`` at step ``at``.

    The result follows ``prefix`` on ``[0, at]`` and then moves by the increments
    of ``tail``; in value terms the tail is offset by ``prefix.value(at)``.
    """
    if at < 0 or len(prefix) < at:
        raise ValueError(f"prefix has {len(prefix)} increments, cannot concatenate at {at}")
    out = DiscretePath(prefix.increments[:at] + tail.increments)
    if steps is not None and len(out) > steps:
        raise ValueError(f"concatenated length {len(out)} exceeds horizon {steps}")
    return out


class ScenarioTree:
    """Finite non-recombining tree whose nodes are path prefixes.

    ``labels`` maps every non-terminal node to the sorted increments of its
    child edges. Leaves are exactly the nodes at step ``grid.steps``.
    """

    def __init__(self, grid: TimeGrid, labels: Mapping[DiscretePath, Sequence[float]]):
        self.grid = grid
        self._labels: dict[DiscretePath, tuple[float, ...]] = {}
        nodes = [ROOT]
        frontier = [ROOT]
        for _ in range(grid.steps):
            nxt = []
            for node in frontier:
                if node not in labels:
                    raise ValueError(f"missing child labels for node {node.increments}")
                labs = tuple(sorted(float(x) for x in labels[node]))
                if len(labs) < 2:
                    raise ValueError(f"node {node.increments} has fewer than 2 children")
                if len(set(labs)) != len(labs):
                    raise ValueError(f"node {node.increments} has repeated child labels")
                self._labels[node] = labs
                nxt.extend(node.extend(x) for x in labs)
            nodes.extend(nxt)
            frontier = nxt
        self.nodes: tuple[DiscretePath, ...] = tuple(nodes)
        self.leaves: tuple[DiscretePath, ...] = tuple(frontier)
        self.internal: tuple[DiscretePath, ...] = tuple(n for n in nodes if len(n) < grid.steps)
        self._ids = {n: i for i, n in enumerate(self.nodes)}

    @classmethod
    def build(cls, grid: TimeGrid, support: Callable[[DiscretePath], Sequence[float]]) -> ScenarioTree:
        labels: dict[DiscretePath, tuple[float, ...]] = {}
        frontier = [ROOT]
        for _ in range(grid.steps):
            nxt = []
            for node in frontier:
                labs = tuple(support(node))
                labels[node] = labs
                nxt.extend(node.extend(x) for x in labs)
            frontier = nxt
        return cls(grid, labels)

    @property
    def steps(self) -> int:
        return self.grid.steps

    def __contains__(self, node: object) -> bool:
        return node in self._ids

    def __len__(self) -> int:
        return len(self.nodes)

    def node_id(self, node: DiscretePath) -> int:
        return self._ids[node]

    def is_leaf(self, node: DiscretePath) -> bool:
        return len(node) == self.grid.steps

    def labels(self, node: DiscretePath) -> tuple[float, ...]:
        return self._labels[node]

    def children(self, node: DiscretePath) -> tuple[DiscretePath, ...]:
        if self.is_leaf(node):
            return ()
        return tuple(node.extend(x) for x in self._labels[node])

    def level(self, step: int) -> tuple[DiscretePath, ...]:
        return tuple(n for n in self.nodes if len(n) == step)

    def descendants(self, node: DiscretePath, step: int | None = None) -> tuple[DiscretePath, ...]:
        """Nodes of the subtree at ``node`` (inclusive), optionally only those at ``step``."""
        out = [n for n in self.nodes if node.is_prefix_of(n)]
        if step is not None:
            out = [n for n in out if len(n) == step]
        return tuple(out)

    def subtree(self, node: DiscretePath) -> ScenarioTree:
        """The subtree rooted at a non-terminal ``node``, re-based to start at 0."""
        if node not in self or self.is_leaf(node):
            raise ValueError("subtree requires a non-terminal node of the tree")
        k = len(node)
        labels = {n.tail(k): labs for n, labs in self._labels.items() if node.is_prefix_of(n)}
        return ScenarioTree(TimeGrid(self.grid.steps - k, self.grid.dt), labels)


@dataclass(frozen=True)
class StoppingRule:
    """Stop/continue decision on every node; all leaves stop.

    The induced stopping step of a path is the first step at which its prefix
    node says stop.
    """

    tree: ScenarioTree = field(repr=False)
    stops: frozenset[DiscretePath]

    def __post_init__(self) -> None:
        missing = [leaf for leaf in self.tree.leaves if leaf not in self.stops]
        if missing:
            raise ValueError(f"leaf {missing[0].increments} must stop")
        first: dict[DiscretePath, DiscretePath | None] = {}
        for node in self.tree.nodes:
            up = first[node.prefix(len(node) - 1)] if len(node) else None
            first[node] = up if up is not None else (node if node in self.stops else None)
        object.__setattr__(self, "_first", first)
        object.__setattr__(self, "_stop_nodes", tuple(dict.fromkeys(first[leaf] for leaf in self.tree.leaves)))

    @classmethod
    def from_mapping(cls, tree: ScenarioTree, decisions: Mapping[DiscretePath, bool]) -> StoppingRule:
        ok, witness = is_stopping_rule(decisions, tree)
        if not ok:
            raise ValueError(f"not a stopping rule: {witness}")
        return cls(tree, frozenset(n for n, s in decisions.items() if s))

    @classmethod
    def constant(cls, tree: ScenarioTree, step: int) -> StoppingRule:
        if not 0 <= step <= tree.steps:
            raise ValueError(f"step {step} outside [0, {tree.steps}]")
        return cls(tree, frozenset(n for n in tree.nodes if len(n) >= step))

    def stops_at(self, node: DiscretePath) -> bool:
        return node in self.stops

    def stopping_node(self, path: DiscretePath) -> DiscretePath:
        """First prefix of ``path`` at which the rule stops."""
        found = self._first.get(path)
        if found is not None:
            return found
        for k in range(len(path) + 1):
            pre = path.prefix(k)
            if pre in self.stops:
                return pre
        raise ValueError(f"path {path.increments} never stops before its end")

    def stop_step(self, path: DiscretePath) -> int:
        return len(self.stopping_node(path))

    def stop_nodes(self) -> tuple[DiscretePath, ...]:
        """Nodes where some path actually stops (no strict ancestor stops)."""
        return self._stop_nodes

    def first_stop(self, node: DiscretePath) -> DiscretePath | None:
        """Stopping node on the way to ``node`` (itself included), or None if not yet stopped."""
        return self._first[node]

    def is_before_stop(self, node: DiscretePath) -> bool:
        return self._first[node] is None

    def __le__(self, other: StoppingRule) -> bool:
        return all(self.stop_step(leaf) <= other.stop_step(leaf) for leaf in self.tree.leaves)


PathFunction = Callable[[DiscretePath], int]


def is_stopping_rule(
    candidate: Union[Mapping[DiscretePath, bool], PathFunction],
    tree: ScenarioTree,
) -> tuple[bool, object]:
    """Check a stop/continue map on nodes, or a step-valued function on full paths.

    Returns ``(ok, counterexample)``; the counterexample is ``None`` when ok.
    For a path function the check is Galmarino's test on the leaves: two paths
    agreeing up to the stopping step of the first must stop at the same step.
    """
    if isinstance(candidate, Mapping):
        missing = [n for n in tree.nodes if n not in candidate]
        if missing:
            raise ValueError(f"candidate undefined at node {missing[0].increments}")
        for leaf in tree.leaves:
            if not candidate[leaf]:
                return False, ("leaf does not stop", leaf)
        return True, None

    taus = {leaf: candidate(leaf) for leaf in tree.leaves}
    for leaf, t in taus.items():
        if not (isinstance(t, int) and 0 <= t <= tree.steps):
            return False, ("stopping step out of range", leaf, t)
    for leaf, t in taus.items():
        pre = leaf.prefix(t)
        for other in tree.descendants(pre, tree.steps):
            if taus[other] != t:
                return False, (leaf, other, t, taus[other])
    return True, None


def rule_from_path_function(tau: PathFunction, tree: ScenarioTree) -> StoppingRule:
    ok, witness = is_stopping_rule(tau, tree)
    if not ok:
        raise ValueError(f"not a stopping time: {witness}")
    return StoppingRule(tree, frozenset(leaf.prefix(tau(leaf)) for leaf in tree.leaves) | frozenset(tree.leaves))


def hitting_rule(level: float, tree: ScenarioTree) -> StoppingRule:
    """Stop the first time ``|path value| >= level``, else at the horizon."""
    if level < 0:
        raise ValueError("level >= 0 required")
    stops = frozenset(n for n in tree.nodes if tree.is_leaf(n) or abs(n.value()) >= level)
    return StoppingRule(tree, stops)

