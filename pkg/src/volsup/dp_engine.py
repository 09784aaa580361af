"""Conditional sublinear expectation by backward recursion, with brute-force and PDE oracles."""

from __future__ import annotations

import csv
import math
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .claims import Claim, eval_claim
from .path_lattice import DiscretePath, ScenarioTree, StoppingRule, TimeGrid
from .uncertainty import (
    DEFAULT_POLICY_CAP,
    Family,
    KernelFamily,
    Policy,
    PolicyCapExceeded,
    ScenarioSet,
    VolBand,
    condition_policy,
    enumerate_policies,
    measure_of,
    paste,
    support_points,
)

TIE_TOL = 1e-12

Descriptor = Union[float, tuple[float, float]]


def node_sup(
    children: Mapping[float, float],
    family: KernelFamily,
    band: VolBand,
    dt: float,
) -> tuple[float, Descriptor]:
    """One-step supremum of the expected child value over the family's kernels.

    Returns the value and the maximiser: the chosen variance for the
    two-point family, the chosen pair ``(a, b)`` for the polytope family. The
    polytope value is the concave envelope of the child values at 0.
    """
    support = support_points(band, dt, family.m)
    if tuple(sorted(children)) != support:
        raise ValueError(f"children keyed by {sorted(children)}, expected support {support}")
    candidates: list[tuple[float, Descriptor]] = []
    if family.tag is Family.TWO_POINT:
        for v in band.variances(family.m):
            u = math.sqrt(v * dt)
            candidates.append((0.5 * (children[u] + children[-u]), v))
    else:
        neg = sorted((x for x in support if x < 0), key=abs)
        pos = [x for x in support if x > 0]
        for a in neg:
            for b in pos:
                candidates.append(((b * children[a] - a * children[b]) / (b - a), (a, b)))
    best = max(val for val, _ in candidates)
    tol = TIE_TOL * max(1.0, abs(best))
    choice = next(desc for val, desc in candidates if val >= best - tol)
    return best, choice


@dataclass
class ValueSurface:
    """Node values of the conditional sublinear expectation and the per-node maximisers."""

    scenarios: ScenarioSet = field(repr=False)
    values: dict[DiscretePath, float]
    decisions: dict[DiscretePath, Descriptor]

    def __getitem__(self, node: DiscretePath) -> float:
        return self.values[node]

    @property
    def root(self) -> float:
        return self.values[DiscretePath()]

    def argmax_policy(self) -> Policy:
        """Kernel choice attaining the node supremum everywhere."""
        from .uncertainty import Kernel

        kernels = {}
        for node, desc in self.decisions.items():
            if isinstance(desc, tuple):
                kernels[node] = Kernel.two_point(*desc)
            else:
                kernels[node] = Kernel.symmetric(math.sqrt(desc * self.scenarios.grid.dt))
        return Policy(kernels)

    def to_csv(self, path: str | Path) -> None:
        tree = self.scenarios.tree
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["node_id", "step", "path_value", "Y"])
            for node in tree.nodes:
                w.writerow([tree.node_id(node), len(node), repr(node.value()), repr(self.values[node])])


def _backward(scenarios: ScenarioSet, leaf_values: Callable[[DiscretePath], float]) -> ValueSurface:
    tree = scenarios.tree
    values: dict[DiscretePath, float] = {leaf: float(leaf_values(leaf)) for leaf in tree.leaves}
    decisions: dict[DiscretePath, Descriptor] = {}
    dt = tree.grid.dt
    for node in reversed(tree.internal):
        children = {x: values[node.extend(x)] for x in tree.labels(node)}
        values[node], decisions[node] = node_sup(children, scenarios.family, scenarios.rule(node), dt)
    return ValueSurface(scenarios, values, decisions)


def sublinear_expectation(xi: Claim, scenarios: ScenarioSet) -> ValueSurface:
    if xi.steps != scenarios.tree.steps:
        raise ValueError(f"claim horizon {xi.steps} != tree horizon {scenarios.tree.steps}")
    return _backward(scenarios, lambda leaf: eval_claim(xi, leaf))


def brute_force_price(
    xi: Claim,
    scenarios: ScenarioSet,
    cap: int = DEFAULT_POLICY_CAP,
    chunk: int = 8192,
) -> tuple[float, Policy]:
    """Maximise ``E^p[xi]`` over every enumerated policy.

    Leaf probabilities are products of kernel weights along the path,
    evaluated for blocks of policies at once. Extreme kernels suffice for the
    polytope family since the objective is multilinear in the node kernels.
    """
    count = scenarios.policy_count()
    if count > cap:
        raise PolicyCapExceeded(count, cap)
    tree = scenarios.tree
    nodes = tree.internal
    index = {n: i for i, n in enumerate(nodes)}
    cands = [scenarios.candidates(n) for n in nodes]
    # weight[i][c, j]: probability of child j of node i under candidate c
    weight = [
        np.array([[ker.prob(x) for x in tree.labels(n)] for ker in cs]) for n, cs in zip(nodes, cands)
    ]
    radices = np.array([len(c) for c in cands], dtype=np.int64)
    leaves = tree.leaves
    payoff = np.array([eval_claim(xi, leaf) for leaf in leaves])
    routes = []
    for leaf in leaves:
        route = []
        for k, x in enumerate(leaf.increments):
            parent = leaf.prefix(k)
            route.append((index[parent], tree.labels(parent).index(x)))
        routes.append(route)

    best_val = -math.inf
    best_idx = 0
    for start in range(0, count, chunk):
        flat = np.arange(start, min(count, start + chunk), dtype=np.int64)
        digits = np.empty((flat.size, len(nodes)), dtype=np.int64)
        rem = flat.copy()
        for i in range(len(nodes) - 1, -1, -1):
            digits[:, i] = rem % radices[i]
            rem //= radices[i]
        probs = np.ones((flat.size, len(leaves)))
        for li, route in enumerate(routes):
            for i, j in route:
                probs[:, li] *= weight[i][digits[:, i], j]
        vals = probs @ payoff
        k = int(np.argmax(vals))
        if vals[k] > best_val:
            best_val, best_idx = float(vals[k]), int(flat[k])

    choice = []
    rem = best_idx
    for i in range(len(nodes) - 1, -1, -1):
        choice.append(int(rem % radices[i]))
        rem //= int(radices[i])
    choice.reverse()
    policy = Policy({n: cands[i][c] for i, (n, c) in enumerate(zip(nodes, choice))})
    return best_val, policy


def policy_expectation(xi: Claim, p: Policy, tree: ScenarioTree) -> float:
    return math.fsum(measure_of(p, leaf) * eval_claim(xi, leaf) for leaf in tree.leaves)


def stopped_claim(surface: ValueSurface, tau: StoppingRule) -> Claim:
    """``E_tau(xi)`` as a claim on full paths: the surface value at each path's stopping node."""
    tree = surface.scenarios.tree
    values = {leaf: surface.values[tau.stopping_node(leaf)] for leaf in tree.leaves}
    return Claim(tree.steps, lambda path: values[path], None, "stopped")


def check_tower(xi: Claim, scenarios: ScenarioSet, sigma: StoppingRule, tau: StoppingRule) -> float:
    """Max ``|E_sigma(xi) - E_sigma(E_tau(xi))|`` over the sigma stopping nodes."""
    if not sigma <= tau:
        raise ValueError("sigma <= tau required")
    direct = sublinear_expectation(xi, scenarios)
    nested = sublinear_expectation(stopped_claim(direct, tau), scenarios)
    return max(abs(direct[n] - nested[n]) for n in sigma.stop_nodes())


def esssup_form(
    xi: Claim,
    scenarios: ScenarioSet,
    p: Policy,
    sigma: StoppingRule,
    cap: int = DEFAULT_POLICY_CAP,
) -> float:
    """Compare ``E_sigma(xi)`` with the best conditional expectation over policies equal to ``p`` before sigma.

    At each sigma node reached with positive ``p``-probability, every policy
    of the subtree is pasted onto ``p`` and its conditional expectation is
    computed from path measures; the maximum is compared with the surface.
    """
    tree = scenarios.tree
    surface = sublinear_expectation(xi, scenarios)
    payoff = {leaf: eval_claim(xi, leaf) for leaf in tree.leaves}
    worst = 0.0
    identity = {s: condition_policy(p, s) for s in sigma.stop_nodes() if not tree.is_leaf(s)}
    for node in sigma.stop_nodes():
        base = measure_of(p, node)
        if base <= 0.0:
            continue
        if tree.is_leaf(node):
            best = payoff[node]
        else:
            below = tree.descendants(node, tree.steps)
            best = -math.inf
            for q in enumerate_policies(scenarios.subset(node), cap):
                nu = dict(identity)
                nu[node] = q
                pbar = paste(p, sigma, nu)
                cond = math.fsum(measure_of(pbar, leaf) * payoff[leaf] for leaf in below) / base
                best = max(best, cond)
        worst = max(worst, abs(surface[node] - best))
    return worst


def supermartingale_check(Y: ValueSurface, p: Policy) -> float:
    """Smallest one-step slack ``Y(node) - E_p[Y(child)]`` over non-terminal nodes."""
    tree = Y.scenarios.tree
    slack = math.inf
    for node in tree.internal:
        ker = p[node]
        nxt = ker.expect({x: Y[node.extend(x)] for x in ker.increments})
        slack = min(slack, Y[node] - nxt)
    return slack


@dataclass(frozen=True)
class PdeGrid:
    """Explicit finite-difference grid on ``[-radius, radius]``; stable when ``k * hi / h**2 <= 1``."""

    h: float
    radius: float
    k: float
    band: VolBand

    def __post_init__(self) -> None:
        if not (self.h > 0 and self.k > 0 and self.radius > 0):
            raise ValueError("h, k and radius must be positive")
        if self.k * self.band.hi / self.h**2 > 1.0:
            raise ValueError(
                f"unstable explicit scheme: k*hi/h^2 = {self.k * self.band.hi / self.h**2:.4g} > 1"
            )

    @classmethod
    def stable(cls, h: float, radius: float, band: VolBand, cfl: float = 1.0) -> PdeGrid:
        return cls(h, radius, cfl * h * h / band.hi, band)


def barenblatt_fd(
    payoff: Callable[[np.ndarray], np.ndarray],
    band: VolBand,
    horizon: float,
    grid: PdeGrid,
) -> float:
    """Value at ``(0, 0)`` of the G-heat equation ``u_t + sup_v (v/2) u_xx = 0``, ``u(T) = payoff``.

    Explicit backward Euler in time with the central second difference;
    the two boundary nodes keep their terminal values (linear extrapolation),
    so affine payoffs are reproduced exactly. The time step is
    shrunk to ``horizon / ceil(horizon / k)`` to land on the horizon.
    """
    if band != grid.band:
        raise ValueError("band differs from the grid's band")
    if horizon < 0:
        raise ValueError("horizon >= 0 required")
    n_space = int(round(grid.radius / grid.h))
    x = np.arange(-n_space, n_space + 1) * grid.h
    u = np.asarray(payoff(x), dtype=float)
    n_time = max(1, math.ceil(horizon / grid.k - 1e-9)) if horizon > 0 else 0
    k = horizon / n_time if n_time else 0.0
    half_lo, half_hi = 0.5 * band.lo, 0.5 * band.hi
    inv_h2 = 1.0 / grid.h**2
    d2 = np.zeros_like(u)
    for _ in range(n_time):
        d2[1:-1] = (u[2:] - 2.0 * u[1:-1] + u[:-2]) * inv_h2
        u = u + k * np.maximum(half_lo * d2, half_hi * d2)
    return float(u[n_space])


def lattice_price(
    payoff: Callable[[np.ndarray], np.ndarray],
    band: VolBand,
    grid: TimeGrid,
    family: KernelFamily,
) -> float:
    """Root price of a terminal payoff on the recombining lattice of a constant band.

    Needs every support point to be an integer multiple of the smallest one
    (e.g. band [1, 4] with m = 2), so path values live on ``j * sqrt(lo * dt)``.
    Agrees with :func:`sublinear_expectation` on the corresponding tree.
    """
    support = support_points(band, grid.dt, family.m)
    unit = min(x for x in support if x > 0)
    mults = [x / unit for x in support if x > 0]
    ints = [int(round(r)) for r in mults]
    if any(abs(r - i) > 1e-12 for r, i in zip(mults, ints)):
        raise ValueError("support is not commensurate with its smallest point; no recombining lattice")
    reach = max(ints)
    n = grid.steps
    width = reach * n
    x = np.arange(-width, width + 1) * unit
    values = np.asarray(payoff(x), dtype=float)
    for _ in range(n):
        size = values.size

        def shifted(j: int) -> np.ndarray:
            return values[reach + j : size - reach + j]

        if family.tag is Family.TWO_POINT:
            cand = [0.5 * (shifted(i) + shifted(-i)) for i in ints]
        else:
            cand = [(b * shifted(-a) + a * shifted(b)) / (a + b) for a in ints for b in ints]
        values = np.maximum.reduce(cand)
    return float(values[0])
