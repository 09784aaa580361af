import math

import pytest

from volsup.path_lattice import (
    DiscretePath,
    ScenarioTree,
    StoppingRule,
    TimeGrid,
    concat,
    hitting_rule,
    is_stopping_rule,
    rule_from_path_function,
)
from _instances import POLY, TWO, unit2


def P(*xs):
    return DiscretePath(xs)


class TestTimeGrid:
    def test_horizon(self):
        g = TimeGrid(4, 0.25)
        assert g.horizon == 1.0

    @pytest.mark.parametrize("steps,dt", [(0, 1.0), (2, 0.0), (2, -1.0)])
    def test_rejects(self, steps, dt):
        with pytest.raises(ValueError):
            TimeGrid(steps, dt)


class TestConcat:
    @pytest.mark.parametrize(
        "prefix,at,tail,values",
        [
            (P(1), 1, P(-1), (0, 1, 0)),
            (P(), 0, P(2), (0, 2)),
            (P(1, 1), 2, P(1), (0, 1, 2, 3)),
        ],
    )
    def test_examples(self, prefix, at, tail, values):
        assert concat(prefix, at, tail).values() == values

    def test_starts_at_zero(self):
        assert P(3, -1).values()[0] == 0

    def test_overflow_rejected(self):
        with pytest.raises(ValueError):
            concat(P(1, 1), 2, P(1), steps=2)
        with pytest.raises(ValueError):
            concat(P(1), 2, P(1))

    def test_reconstructs_every_tree_path(self):
        tree = unit2(POLY, steps=3).tree
        for leaf in tree.leaves:
            for k in range(tree.steps + 1):
                assert concat(leaf.prefix(k), k, leaf.tail(k)) == leaf


class TestScenarioTree:
    def test_structure(self):
        tree = unit2(TWO, steps=2).tree
        assert len(tree.level(0)) == 1
        assert len(tree.level(1)) == 4
        assert len(tree.leaves) == 16
        for node in tree.internal:
            for child, x in zip(tree.children(node), tree.labels(node)):
                assert child == node.extend(x)

    def test_needs_two_children(self):
        with pytest.raises(ValueError):
            ScenarioTree(TimeGrid(1, 1.0), {P(): (1.0,)})

    def test_subtree_rebased(self):
        tree = unit2(TWO, steps=2).tree
        sub = tree.subtree(P(2.0))
        assert sub.steps == 1
        assert sub.labels(P()) == tree.labels(P(2.0))


class TestStoppingRules:
    def test_hitting_level_zero_stops_at_root(self):
        tree = unit2(TWO, steps=2).tree
        rule = hitting_rule(0.0, tree)
        assert all(rule.stop_step(leaf) == 0 for leaf in tree.leaves)

    def test_hitting_infinite_level(self):
        tree = unit2(TWO, steps=2).tree
        rule = hitting_rule(math.inf, tree)
        assert all(rule.stop_step(leaf) == 2 for leaf in tree.leaves)

    def test_hitting_unit2_level2(self):
        tree = unit2(TWO).tree
        rule = hitting_rule(2.0, tree)
        assert all(rule.stop_step(leaf) == 1 for leaf in tree.leaves)

    def test_hitting_rules_are_stopping_rules(self):
        tree = unit2(POLY, steps=3).tree
        for level in (0.0, 1.0, 1.5, 2.0, 3.0, math.inf):
            rule = hitting_rule(level, tree)
            decisions = {n: rule.stops_at(n) for n in tree.nodes}
            assert is_stopping_rule(decisions, tree) == (True, None)
            ok, _ = is_stopping_rule(rule.stop_step, tree)
            assert ok

    def test_constant_rule(self):
        tree = unit2(TWO, steps=2).tree
        assert is_stopping_rule(lambda path: 2, tree) == (True, None)

    def test_final_increment_rule_fails_galmarino(self):
        tree = unit2(TWO, steps=2).tree

        def tau(path):
            return 1 if path.increments[-1] > 0 else 2

        ok, witness = is_stopping_rule(tau, tree)
        assert not ok
        first, second, t1, t2 = witness
        assert first.prefix(1) == second.prefix(1) and t1 != t2

    def test_partial_candidate_rejected(self):
        tree = unit2(TWO).tree
        with pytest.raises(ValueError):
            is_stopping_rule({P(): False}, tree)

    def test_leaf_must_stop(self):
        tree = unit2(TWO).tree
        decisions = {n: False for n in tree.nodes}
        ok, witness = is_stopping_rule(decisions, tree)
        assert not ok and witness[0] == "leaf does not stop"

    def test_from_path_function_roundtrip(self):
        tree = unit2(TWO, steps=2).tree
        tau = hitting_rule(2.0, tree).stop_step
        rule = rule_from_path_function(tau, tree)
        assert all(rule.stop_step(leaf) == tau(leaf) for leaf in tree.leaves)

    def test_ordering(self):
        tree = unit2(TWO, steps=2).tree
        assert StoppingRule.constant(tree, 1) <= StoppingRule.constant(tree, 2)
        assert not StoppingRule.constant(tree, 2) <= StoppingRule.constant(tree, 1)
