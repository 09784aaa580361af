"""Minimal superreplication, duality reporting, Doob-Meyer parts and admissibility checks."""

from __future__ import annotations

import csv
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

from .claims import Claim, eval_claim
from .dp_engine import ValueSurface, sublinear_expectation
from .path_lattice import DiscretePath, ScenarioTree
from .uncertainty import Family, Policy, ScenarioSet

TIGHT_TOL = 1e-9


@dataclass
class Hedge:
    """Share position held over the step following each non-terminal node."""

    tree: ScenarioTree = field(repr=False)
    positions: dict[DiscretePath, float]

    def __getitem__(self, node: DiscretePath) -> float:
        return self.positions[node]

    def gains(self, path: DiscretePath) -> float:
        return math.fsum(self.positions[path.prefix(k)] * x for k, x in enumerate(path.increments))

    def to_csv(self, path: str | Path, compensator: dict[DiscretePath, float] | None = None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node_id", "step", "h", "dK"])
            for node in self.tree.internal:
                dk = "" if compensator is None else repr(compensator[node])
                w.writerow([self.tree.node_id(node), len(node), repr(self.positions[node]), dk])


def upper_envelope_at_zero(points: Sequence[tuple[float, float]]) -> tuple[float, float, tuple[float, float]]:
    """Value and slope at 0 of the upper concave envelope of ``points``.

    ``points`` must lie on both sides of 0 and not at 0. Also returns the
    envelope's supporting pair ``(a, b)``, the hull vertices around 0.
    """
    pts = sorted(points)
    hull: list[tuple[float, float]] = []
    for p in pts:
        while len(hull) >= 2:
            (x1, y1), (x2, y2) = hull[-2], hull[-1]
            # drop hull[-1] when it lies on or below the chord hull[-2] -> p
            if (x2 - x1) * (p[1] - y1) - (y2 - y1) * (p[0] - x1) >= 0:
                hull.pop()
            else:
                break
        hull.append(p)
    for (a, fa), (b, fb) in zip(hull, hull[1:]):
        if a < 0 < b:
            slope = (fb - fa) / (b - a)
            return fa - slope * a, slope, (a, b)
    raise ValueError("points must straddle 0")


def minimal_superhedge(xi: Claim, scenarios: ScenarioSet) -> tuple[float, Hedge]:
    """Least capital and hedge dominating ``xi`` on every path of the tree.

    Backward minimax ``X(node) = min_h max_u (X(child_u) - h u)`` over the
    node's full support, whatever the kernel family: the minimum is the
    concave envelope at 0 and ``h`` its slope there.
    """
    tree = scenarios.tree
    X = {leaf: eval_claim(xi, leaf) for leaf in tree.leaves}
    positions: dict[DiscretePath, float] = {}
    for node in reversed(tree.internal):
        pts = [(u, X[node.extend(u)]) for u in tree.labels(node)]
        X[node], positions[node], _ = upper_envelope_at_zero(pts)
    return X[DiscretePath()], Hedge(tree, positions)


@dataclass(frozen=True)
class SlackReport:
    min_slack: float
    tight_paths: int
    worst_path: DiscretePath


def verify_superhedge(x: float, H: Hedge, xi: Claim, tree: ScenarioTree) -> SlackReport:
    """Slack ``x + sum H dB - xi`` on every leaf path."""
    worst, worst_path, tight = math.inf, tree.leaves[0], 0
    for leaf in tree.leaves:
        slack = x + H.gains(leaf) - eval_claim(xi, leaf)
        if slack <= TIGHT_TOL:
            tight += 1
        if slack < worst:
            worst, worst_path = slack, leaf
    return SlackReport(worst, tight, worst_path)


@dataclass(frozen=True)
class DualityReport:
    family: Family
    primal: float
    dual: float
    gap: float
    worst_path: DiscretePath
    tight_paths: int
    min_slack: float


def duality_report(xi: Claim, scenarios: ScenarioSet) -> DualityReport:
    primal = sublinear_expectation(xi, scenarios).root
    dual, hedge = minimal_superhedge(xi, scenarios)
    check = verify_superhedge(dual, hedge, xi, scenarios.tree)
    return DualityReport(
        scenarios.family.tag, primal, dual, dual - primal, check.worst_path, check.tight_paths, check.min_slack
    )


@dataclass
class DoobMeyerParts:
    """Martingale integrand ``H^P`` and compensator increment ``dK`` per non-terminal node.

    ``half_width`` records the policy's atoms ``±u`` at each node.
    """

    hedge: Hedge
    compensator: dict[DiscretePath, float]
    half_width: dict[DiscretePath, float] = field(repr=False)

    def edge_residual(self, Y: ValueSurface) -> float:
        """Max ``|dY - (H dB - dK)|`` over the edges charged by the policy."""
        worst = 0.0
        for node, u in self.half_width.items():
            for x in (-u, u):
                dy = Y[node.extend(x)] - Y[node]
                worst = max(worst, abs(dy - (self.hedge[node] * x - self.compensator[node])))
        return worst


def _two_point_nodes(Y: ValueSurface, p: Policy):
    for node in Y.scenarios.tree.internal:
        ker = p[node]
        if not ker.is_symmetric_pair():
            raise ValueError(f"node {node.increments}: decomposition needs a symmetric two-point kernel")
        yield node, ker.atoms[1][0]


def doob_meyer(Y: ValueSurface, p: Policy) -> DoobMeyerParts:
    """One-step Doob-Meyer split of ``Y`` under a two-point policy.

    With children at ``±u`` the martingale part is ``H dB`` with
    ``H = (Y(+u) - Y(-u)) / 2u`` and the compensator increment is
    ``Y(node) - E_p[Y(child)]``.
    """
    tree = Y.scenarios.tree
    h: dict[DiscretePath, float] = {}
    dk: dict[DiscretePath, float] = {}
    widths: dict[DiscretePath, float] = {}
    for node, u in _two_point_nodes(Y, p):
        up, down = Y[node.extend(u)], Y[node.extend(-u)]
        h[node] = (up - down) / (2.0 * u)
        dk[node] = Y[node] - 0.5 * (up + down)
        widths[node] = u
    return DoobMeyerParts(Hedge(tree, h), dk, widths)


def covariation_hedge(Y: ValueSurface, p: Policy) -> Hedge:
    """``H = E_p[dY dB] / E_p[dB^2]`` node by node."""
    h: dict[DiscretePath, float] = {}
    for node, _ in _two_point_nodes(Y, p):
        ker = p[node]
        cov = math.fsum(q * (Y[node.extend(x)] - Y[node]) * x for x, q in ker.atoms)
        h[node] = cov / ker.variance
    return Hedge(Y.scenarios.tree, h)


@dataclass
class AdmissibilityReport:
    floor: float
    min_gain: float
    worst_path: DiscretePath
    mean_violations: list[tuple[DiscretePath, float]]

    @property
    def martingale_ok(self) -> bool:
        return not self.mean_violations

    @property
    def floor_ok(self) -> bool:
        return self.min_gain >= self.floor

    @property
    def passed(self) -> bool:
        return self.martingale_ok and self.floor_ok


def admissibility_check(H: Hedge, scenarios: ScenarioSet, floor: float, tol: float = 1e-12) -> AdmissibilityReport:
    """Gains process ``sum H dB``: zero conditional drift under every member kernel, and a floor on all paths.

    The drift condition is node-wise and linear in the kernel, so checking the
    family's extreme kernels at each node covers every member policy.
    """
    tree = scenarios.tree
    violations = []
    for node in tree.internal:
        for ker in scenarios.candidates(node):
            drift = H[node] * ker.mean
            if abs(drift) > tol:
                violations.append((node, drift))
    worst, worst_path = math.inf, tree.nodes[0]
    for node in tree.nodes:
        g = H.gains(node)
        if g < worst:
            worst, worst_path = g, node
    return AdmissibilityReport(floor, worst, worst_path, violations)


@dataclass(frozen=True)
class AggregationReport:
    """Where the universal hedge and the argmax policy's integrand coincide."""

    matched_nodes: int
    unmatched_nodes: int
    max_diff_matched: float


def aggregation_report(xi: Claim, scenarios: ScenarioSet) -> AggregationReport:
    """Compare the minimax hedge with ``H^P`` of the two-point argmax policy.

    Only nodes whose symmetric argmax pair is also the envelope's supporting
    pair, with equal superhedge and value-surface levels at both children,
    are compared; the others are counted.
    """
    if scenarios.family.tag is not Family.TWO_POINT:
        raise ValueError("aggregation compares against two-point integrands")
    Y = sublinear_expectation(xi, scenarios)
    parts = doob_meyer(Y, Y.argmax_policy())
    _, universal = minimal_superhedge(xi, scenarios)
    X = {leaf: eval_claim(xi, leaf) for leaf in scenarios.tree.leaves}
    matched = unmatched = 0
    worst = 0.0
    tree = scenarios.tree
    for node in reversed(tree.internal):
        pts = [(u, X[node.extend(u)]) for u in tree.labels(node)]
        X[node], _, pair = upper_envelope_at_zero(pts)
        u = math.sqrt(Y.decisions[node] * tree.grid.dt)
        up, down = node.extend(u), node.extend(-u)
        same_level = abs(X[up] - Y[up]) <= 1e-12 and abs(X[down] - Y[down]) <= 1e-12
        if pair == (-u, u) and same_level:
            matched += 1
            worst = max(worst, abs(universal[node] - parts.hedge[node]))
        else:
            unmatched += 1
    return AggregationReport(matched, unmatched, worst)
