"""Scenario sets: volatility bands, martingale kernels, adapted policies, conditioning and pasting."""

from __future__ import annotations

import enum
import itertools
import math
import random
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any, Protocol, Union

from .path_lattice import DiscretePath, ScenarioTree, StoppingRule, TimeGrid, concat, hitting_rule

KERNEL_TOL = 1e-12
DEFAULT_POLICY_CAP = 10**6


class PolicyCapExceeded(RuntimeError):
    def __init__(self, count: int, cap: int):
        super().__init__(f"{count} policies exceed the enumeration cap {cap}")
        self.count = count
        self.cap = cap


@dataclass(frozen=True)
class VolBand:
    """Admissible variance per unit time, ``0 < lo <= hi``."""

    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise ValueError("band bounds must be finite")
        if self.lo <= 0:
            raise ValueError("lo > 0 required")
        if self.lo > self.hi:
            raise ValueError("lo > hi")

    def variances(self, m: int) -> tuple[float, ...]:
        if m < 1:
            raise ValueError("m >= 1 required")
        if m == 1:
            if self.lo != self.hi:
                raise ValueError("m = 1 needs lo == hi")
            return (self.lo,)
        step = (self.hi - self.lo) / (m - 1)
        return tuple(self.lo + i * step for i in range(m - 1)) + (self.hi,)


def support_points(band: VolBand, dt: float, m: int) -> tuple[float, ...]:
    """Sorted increments ``±sqrt(v * dt)`` for ``m`` variances evenly spaced in the band."""
    if not dt > 0:
        raise ValueError("dt > 0 required")
    roots = [math.sqrt(v * dt) for v in band.variances(m)]
    return tuple(sorted([-r for r in roots] + roots))


class VolRule(Protocol):
    def __call__(self, node: DiscretePath) -> VolBand: ...


@dataclass(frozen=True)
class ConstantRule:
    band: VolBand

    def __call__(self, node: DiscretePath) -> VolBand:
        return self.band

    def to_json(self) -> dict[str, Any]:
        return {"constant": [self.band.lo, self.band.hi]}


@dataclass(frozen=True)
class LevelScaledRule:
    """``inner`` while ``|path value| < threshold``, ``outer`` otherwise."""

    threshold: float
    inner: VolBand
    outer: VolBand

    def __call__(self, node: DiscretePath) -> VolBand:
        return self.inner if abs(node.value()) < self.threshold else self.outer

    def to_json(self) -> dict[str, Any]:
        return {
            "level_scaled": {
                "threshold": self.threshold,
                "inner": [self.inner.lo, self.inner.hi],
                "outer": [self.outer.lo, self.outer.hi],
            }
        }


@dataclass(frozen=True)
class ShiftedRule:
    """The rule seen from the subtree at ``prefix``."""

    base: Any
    prefix: DiscretePath

    def __call__(self, node: DiscretePath) -> VolBand:
        return self.base(concat(self.prefix, len(self.prefix), node))


def _band_from_json(obj: Any, where: str) -> VolBand:
    if not (isinstance(obj, list) and len(obj) == 2 and all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in obj
    )):
        raise ValueError(f"{where}: expected [lo, hi]")
    lo, hi = float(obj[0]), float(obj[1])
    if lo > hi:
        raise ValueError(f"{where}: lo > hi")
    if lo <= 0:
        raise ValueError(f"{where}: lo > 0 required")
    return VolBand(lo, hi)


def vol_rule_from_json(obj: Mapping[str, Any]) -> Union[ConstantRule, LevelScaledRule]:
    if not isinstance(obj, Mapping) or len(obj) != 1:
        raise ValueError("band: expected exactly one of 'constant' or 'level_scaled'")
    if "constant" in obj:
        return ConstantRule(_band_from_json(obj["constant"], "band.constant"))
    if "level_scaled" in obj:
        spec = obj["level_scaled"]
        if not isinstance(spec, Mapping) or set(spec) != {"threshold", "inner", "outer"}:
            raise ValueError("band.level_scaled: expected keys threshold, inner, outer")
        thr = spec["threshold"]
        if isinstance(thr, bool) or not isinstance(thr, (int, float)) or thr < 0:
            raise ValueError("band.level_scaled.threshold: expected a number >= 0")
        return LevelScaledRule(
            float(thr),
            _band_from_json(spec["inner"], "band.level_scaled.inner"),
            _band_from_json(spec["outer"], "band.level_scaled.outer"),
        )
    raise ValueError(f"band: unknown form {sorted(obj)}")


@dataclass(frozen=True)
class Kernel:
    """One-step martingale law: ``(increment, probability)`` atoms, sorted by increment."""

    atoms: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        atoms = tuple(sorted((float(x), float(p)) for x, p in self.atoms))
        object.__setattr__(self, "atoms", atoms)
        if not atoms:
            raise ValueError("empty kernel")
        if any(p <= 0 for _, p in atoms):
            raise ValueError("kernel probabilities must be positive")
        if len({x for x, _ in atoms}) != len(atoms):
            raise ValueError("repeated kernel atoms")
        if abs(math.fsum(p for _, p in atoms) - 1.0) > KERNEL_TOL:
            raise ValueError("kernel probabilities must sum to 1")
        if abs(self.mean) > KERNEL_TOL:
            raise ValueError(f"kernel mean {self.mean} is not 0")

    @classmethod
    def symmetric(cls, u: float) -> Kernel:
        return cls(((-u, 0.5), (u, 0.5)))

    @classmethod
    def two_point(cls, a: float, b: float) -> Kernel:
        """Mean-zero kernel on ``a < 0 < b``."""
        if not a < 0 < b:
            raise ValueError("two-point kernel needs a < 0 < b")
        if a == -b:
            return cls.symmetric(b)
        return cls(((a, b / (b - a)), (b, -a / (b - a))))

    @property
    def increments(self) -> tuple[float, ...]:
        return tuple(x for x, _ in self.atoms)

    @property
    def mean(self) -> float:
        return math.fsum(p * x for x, p in self.atoms)

    @property
    def variance(self) -> float:
        return math.fsum(p * x * x for x, p in self.atoms)

    def prob(self, increment: float) -> float:
        for x, p in self.atoms:
            if x == increment:
                return p
        return 0.0

    def expect(self, values: Mapping[float, float]) -> float:
        return math.fsum(p * values[x] for x, p in self.atoms)

    def is_symmetric_pair(self) -> bool:
        return (
            len(self.atoms) == 2
            and self.atoms[0][0] == -self.atoms[1][0]
            and self.atoms[0][1] == self.atoms[1][1] == 0.5
        )


class Family(str, enum.Enum):
    TWO_POINT = "two-point"
    POLYTOPE = "polytope"


@dataclass(frozen=True)
class KernelFamily:
    tag: Family
    m: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "tag", Family(self.tag))
        if not isinstance(self.m, int) or self.m < 1:
            raise ValueError("m >= 1 required")

    def candidates(self, support: Sequence[float]) -> tuple[Kernel, ...]:
        """Extreme kernels of the family on a node's support.

        Two-point: one symmetric kernel per variance, ascending. Polytope: the
        two-atom mean-zero kernels on every pair ``a < 0 < b``, ordered by
        ``(|a|, b)``; these are the vertices of the mean-zero simplex.
        """
        pos = sorted(x for x in support if x > 0)
        if self.tag is Family.TWO_POINT:
            return tuple(Kernel.symmetric(u) for u in pos)
        neg = sorted((x for x in support if x < 0), key=abs)
        return tuple(Kernel.two_point(a, b) for a in neg for b in pos)


@dataclass(frozen=True)
class Policy:
    """Adapted kernel choice at every non-terminal node (nodes relative to the tree root)."""

    kernels: Mapping[DiscretePath, Kernel]

    def __getitem__(self, node: DiscretePath) -> Kernel:
        return self.kernels[node]

    def __contains__(self, node: object) -> bool:
        return node in self.kernels

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Policy) and dict(self.kernels) == dict(other.kernels)

    def __hash__(self) -> int:
        return hash(frozenset(self.kernels.items()))


@dataclass(frozen=True)
class ScenarioSet:
    """A tree whose child labels are the supports of the volatility rule, plus a kernel family."""

    tree: ScenarioTree = field(repr=False)
    rule: Any
    family: KernelFamily
    validate: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.validate:
            return
        dt = self.tree.grid.dt
        for node in self.tree.internal:
            want = support_points(self.rule(node), dt, self.family.m)
            if self.tree.labels(node) != want:
                raise ValueError(f"node {node.increments}: labels differ from the rule's support")

    @classmethod
    def build(cls, grid: TimeGrid, rule: Any, family: KernelFamily) -> ScenarioSet:
        tree = ScenarioTree.build(grid, lambda node: support_points(rule(node), grid.dt, family.m))
        return cls(tree, rule, family)

    @property
    def grid(self) -> TimeGrid:
        return self.tree.grid

    def band(self, node: DiscretePath) -> VolBand:
        return self.rule(node)

    def support(self, node: DiscretePath) -> tuple[float, ...]:
        return self.tree.labels(node)

    def candidates(self, node: DiscretePath) -> tuple[Kernel, ...]:
        return self.family.candidates(self.tree.labels(node))

    def subset(self, node: DiscretePath) -> ScenarioSet:
        """The scenario set seen from a non-terminal ``node``."""
        # a restriction of a consistent set is consistent; skip re-validation
        return ScenarioSet(self.tree.subtree(node), ShiftedRule(self.rule, node), self.family, validate=False)

    def policy_count(self) -> int:
        return math.prod(len(self.candidates(n)) for n in self.tree.internal)


def enumerate_policies(scenarios: ScenarioSet, cap: int = DEFAULT_POLICY_CAP) -> Iterator[Policy]:
    """All node-wise assignments of the family's extreme kernels.

    The order is ``itertools.product`` over internal nodes in breadth-first
    order, each node's candidates in :meth:`KernelFamily.candidates` order.
    """
    count = scenarios.policy_count()
    if count > cap:
        raise PolicyCapExceeded(count, cap)
    nodes = scenarios.tree.internal
    choices = [scenarios.candidates(n) for n in nodes]
    for combo in itertools.product(*choices):
        yield Policy(dict(zip(nodes, combo)))


def condition_policy(p: Policy, node: DiscretePath) -> Policy:
    """Restriction of ``p`` to the subtree at ``node``, re-based to start at 0."""
    k = len(node)
    return Policy({n.tail(k): ker for n, ker in p.kernels.items() if node.is_prefix_of(n)})


PastingKernel = Mapping[DiscretePath, Policy]


def paste(p: Policy, rule: StoppingRule, nu: PastingKernel) -> Policy:
    """Follow ``p`` until the rule stops, then the policy ``nu[stop node]`` on that subtree."""
    tree = rule.tree
    out: dict[DiscretePath, Kernel] = {}
    for node in tree.internal:
        stop = rule.first_stop(node)
        if stop is None:
            out[node] = p[node]
            continue
        if stop not in nu:
            raise ValueError(f"pasting kernel undefined at stop node {stop.increments}")
        tail = node.tail(len(stop))
        sub = nu[stop]
        if tail not in sub:
            raise ValueError(f"policy pasted at {stop.increments} undefined at {tail.increments}")
        out[node] = sub[tail]
    return Policy(out)


def measure_of(p: Policy, event: Union[DiscretePath, Iterable[DiscretePath]]) -> float:
    """Probability of reaching a node under ``p``, or of a set of nodes (summed)."""
    if isinstance(event, DiscretePath):
        prob = 1.0
        incs = event.increments
        for k, x in enumerate(incs):
            prob *= p.kernels[DiscretePath(incs[:k])].prob(x)
            if prob == 0.0:
                break
        return prob
    return math.fsum(measure_of(p, path) for path in event)


def conditional_expectation(p: Policy, tree: ScenarioTree, node: DiscretePath, values: Mapping[DiscretePath, float]) -> float:
    """``E^p[values(leaf) | node]`` from path measures; requires positive probability at ``node``."""
    base = measure_of(p, node)
    if base == 0.0:
        raise ValueError(f"node {node.increments} has zero probability")
    leaves = tree.descendants(node, tree.steps)
    return math.fsum(measure_of(p, leaf) * values[leaf] for leaf in leaves) / base


def kernel_violation(scenarios: ScenarioSet, node: DiscretePath, ker: Kernel) -> str | None:
    """Why ``ker`` is not admissible at ``node`` (None if it is)."""
    dt = scenarios.grid.dt
    band = scenarios.rule(node)
    allowed = set(support_points(band, dt, scenarios.family.m))
    if not set(ker.increments) <= allowed:
        return "kernel atoms outside the support"
    var = ker.variance
    if var < band.lo * dt - KERNEL_TOL or var > band.hi * dt + KERNEL_TOL:
        return f"kernel variance {var} outside [{band.lo * dt}, {band.hi * dt}]"
    if abs(ker.mean) > KERNEL_TOL:
        return "kernel mean is not 0"
    if scenarios.family.tag is Family.TWO_POINT and not ker.is_symmetric_pair():
        return "two-point family needs a symmetric equal-weight pair"
    return None


def membership_violation(
    p: Policy,
    scenarios: ScenarioSet,
    cache: dict[tuple[DiscretePath, Kernel], str | None] | None = None,
) -> tuple[DiscretePath, str] | None:
    for node in scenarios.tree.internal:
        if node not in p:
            return node, "policy undefined"
        ker = p[node]
        if cache is None:
            why = kernel_violation(scenarios, node, ker)
        else:
            key = (node, ker)
            if key not in cache:
                cache[key] = kernel_violation(scenarios, node, ker)
            why = cache[key]
        if why is not None:
            return node, why
    return None


def membership(p: Policy, scenarios: ScenarioSet) -> bool:
    return membership_violation(p, scenarios) is None


@dataclass
class ClosureReport:
    conditioning_checked: int = 0
    pasting_checked: int = 0
    mixing_checked: int = 0
    identity_checked: int = 0
    pasting_identity_error: float = 0.0
    failures: list[tuple[str, Any]] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def failed(self, kind: str) -> bool:
        return any(k == kind for k, _ in self.failures)


def all_stopping_rules(tree: ScenarioTree, limit: int = 2000) -> list[StoppingRule]:
    """Every stopping rule of a small tree (up to ``limit``, then stops enumerating)."""

    def rec(node: DiscretePath) -> Iterator[frozenset[DiscretePath]]:
        yield frozenset({node})
        if tree.is_leaf(node):
            return
        parts = [list(rec(c)) for c in tree.children(node)]
        for combo in itertools.product(*parts):
            yield frozenset().union(*combo)

    rules = []
    for stop_set in rec(tree.nodes[0]):
        closed = set(stop_set)
        for s in stop_set:
            closed.update(tree.descendants(s))
        rules.append(StoppingRule(tree, frozenset(closed)))
        if len(rules) >= limit:
            break
    return rules


def random_stopping_rule(tree: ScenarioTree, rng: random.Random, p_stop: float = 0.35) -> StoppingRule:
    stops = {n for n in tree.nodes if tree.is_leaf(n) or rng.random() < p_stop}
    return StoppingRule(tree, frozenset(stops))


def path_measures(p: Policy, tree: ScenarioTree) -> dict[DiscretePath, float]:
    """Probability of every node under ``p``, by a forward sweep."""
    out = {tree.nodes[0]: 1.0}
    for node in tree.internal:
        ker = p.kernels[node]
        base = out[node]
        for x in tree.labels(node):
            out[node.extend(x)] = base * ker.prob(x)
    return out


def _pasting_identity_error(
    p: Policy, rule: StoppingRule, nu: PastingKernel, pbar: Policy, events: Sequence[Sequence[int]]
) -> float:
    """Max error of ``P̄(A) = Σ_stop P(stop) ν_stop(tail of A)`` over events given as leaf indices."""
    tree = rule.tree
    bar = path_measures(pbar, tree)
    before = path_measures(p, tree)
    lhs, rhs = [], []
    for leaf in tree.leaves:
        stop = rule.stopping_node(leaf)
        lhs.append(bar[leaf])
        rhs.append(before[stop] * measure_of(nu[stop], leaf.tail(len(stop))))
    worst = 0.0
    for event in events:
        err = abs(math.fsum(lhs[i] for i in event) - math.fsum(rhs[i] for i in event))
        worst = max(worst, err)
    return worst


def check_closure(
    scenarios: ScenarioSet,
    cap: int = DEFAULT_POLICY_CAP,
    nu_samples: int = 16,
    rule_limit: int = 200,
    identity_samples: int = 2000,
    seed: int = 0,
) -> ClosureReport:
    """Enumerative check that the scenario set is stable under conditioning, pasting and mixing.

    Every member policy is conditioned at every node and pasted along every
    stopping rule of the tree (up to ``rule_limit``) plus hitting rules, with
    the identity pasting kernel and ``nu_samples`` random draws from the
    enumerated subtree policies. The pasting measure identity is evaluated on
    a seeded sample of about ``identity_samples`` of those pastings.
    """
    rng = random.Random(seed)
    tree = scenarios.tree
    report = ClosureReport()
    verdicts: dict[tuple[DiscretePath, Kernel], str | None] = {}
    policies = list(enumerate_policies(scenarios, cap))
    members = [p for p in policies if membership(p, scenarios)]
    if len(members) != len(policies):
        bad = next(p for p in policies if not membership(p, scenarios))
        report.failures.append(("enumeration", (bad, membership_violation(bad, scenarios))))

    subsets = {n: scenarios.subset(n) for n in tree.internal}
    sub_policies = {n: list(enumerate_policies(s, cap)) for n, s in subsets.items()}

    for p in members:
        for node in tree.internal:
            report.conditioning_checked += 1
            q = condition_policy(p, node)
            if not membership(q, subsets[node]):
                report.failures.append(("conditioning", (p, node, membership_violation(q, subsets[node]))))

    rules = all_stopping_rules(tree, rule_limit)
    rules += [hitting_rule(lvl, tree) for lvl in sorted({abs(n.value()) for n in tree.nodes})]
    n_leaves = len(tree.leaves)
    events = [[i] for i in range(n_leaves)]
    events += [rng.sample(range(n_leaves), rng.randint(1, n_leaves)) for _ in range(4)] + [list(range(n_leaves))]

    total = len(members) * len(rules) * (1 + nu_samples)
    rate = min(1.0, identity_samples / max(total, 1))
    for p in members:
        for rule in rules:
            stop_nodes = [s for s in rule.stop_nodes() if not tree.is_leaf(s)]
            identity = {s: condition_policy(p, s) for s in stop_nodes}
            draws = [identity]
            for _ in range(nu_samples):
                draws.append({s: rng.choice(sub_policies[s]) for s in stop_nodes})
            for nu in draws:
                report.pasting_checked += 1
                pbar = paste(p, rule, nu)
                if nu is identity and pbar != p:
                    report.failures.append(("pasting-identity", (p, rule, nu)))
                viol = membership_violation(pbar, scenarios, verdicts)
                if viol is not None:
                    report.failures.append(("pasting", (p, rule, nu, viol)))
                    continue
                if rng.random() >= rate:
                    continue
                full_nu = dict(nu)
                full_nu.update({leaf: Policy({}) for leaf in rule.stop_nodes() if tree.is_leaf(leaf)})
                err = _pasting_identity_error(p, rule, full_nu, pbar, events)
                report.identity_checked += 1
                report.pasting_identity_error = max(report.pasting_identity_error, err)
                if err > KERNEL_TOL:
                    report.failures.append(("pasting-measure", (p, rule, nu, err)))

    for p in members:
        for t in range(1, tree.steps):
            level = tree.level(t)
            at_t = StoppingRule.constant(tree, t)
            for _ in range(max(1, nu_samples // 4)):
                lam = {n for n in level if rng.random() < 0.5}
                nu1 = {n: rng.choice(sub_policies[n]) for n in level}
                nu2 = {n: rng.choice(sub_policies[n]) for n in level}
                p1, p2 = paste(p, at_t, nu1), paste(p, at_t, nu2)
                mixed = {n: condition_policy(p1 if n in lam else p2, n) for n in level}
                pbar = paste(p, at_t, mixed)
                report.mixing_checked += 1
                viol = membership_violation(pbar, scenarios, verdicts)
                if viol is not None:
                    report.failures.append(("mixing", (p, t, lam, viol)))
    return report
