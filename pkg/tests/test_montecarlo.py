import json
import math

import numpy as np
import pytest

from volsup.dp_engine import lattice_price
from volsup.montecarlo import (
    ConstantPolicy,
    ThresholdPolicy,
    lower_bound_report,
    psd_sqrt,
    simulate_price,
)
from volsup.path_lattice import TimeGrid
from volsup.uncertainty import Family, KernelFamily, VolBand


def digital(x):
    return (x >= 0).astype(float)


def rotation(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


class TestPsdSqrt:
    def test_identity(self):
        assert np.array_equal(psd_sqrt(np.eye(3)), np.eye(3))

    def test_diagonal(self):
        assert np.allclose(psd_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), rtol=0, atol=1e-12)

    def test_remultiply(self):
        a = np.array([[2.0, 1.0], [1.0, 2.0]])
        r = psd_sqrt(a)
        assert np.max(np.abs(r @ r - a)) <= 1e-10
        assert np.array_equal(r, r.T)
        assert np.all(np.linalg.eigvalsh(r) > 0)

    def test_random_spd(self):
        rng = np.random.default_rng(0)
        for d in (1, 2, 3, 5):
            g = rng.normal(size=(d, d))
            a = g @ g.T + 0.1 * np.eye(d)
            r = psd_sqrt(a)
            assert np.max(np.abs(r @ r - a)) <= 1e-10

    @pytest.mark.parametrize("theta", [0.1, 0.7, 2.0, -1.3])
    def test_rotation_commutes(self, theta):
        a = np.array([[3.0, 0.5], [0.5, 1.0]])
        q = rotation(theta)
        lhs = psd_sqrt(q @ a @ q.T)
        rhs = q @ psd_sqrt(a) @ q.T
        assert np.max(np.abs(lhs - rhs)) <= 1e-10

    def test_rejects_indefinite(self):
        with pytest.raises(ValueError, match="eigenvalue -1"):
            psd_sqrt(np.array([[1.0, 2.0], [2.0, 1.0]]))

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError, match="symmetric"):
            psd_sqrt(np.array([[1.0, 0.5], [0.0, 1.0]]))


class TestSimulate:
    def within(self, est, target, k=3.0):
        return abs(est.mean - target) <= k * est.stderr

    def test_second_moment(self):
        est = simulate_price(lambda x: x * x, ConstantPolicy(4.0), steps=4, paths=100_000, seed=1)
        assert self.within(est, 4.0)

    def test_martingale(self):
        est = simulate_price(lambda x: x, ConstantPolicy(1.0), steps=4, paths=100_000, seed=2)
        assert self.within(est, 0.0)

    def test_digital_symmetric(self):
        est = simulate_price(digital, ConstantPolicy(4.0), steps=4, paths=100_000, seed=3)
        assert self.within(est, 0.5)

    def test_two_dimensional(self):
        a = np.array([[2.0, 1.0], [1.0, 2.0]])
        est = simulate_price(lambda x: x[:, 0] * x[:, 1], ConstantPolicy(a), steps=2, paths=50_000, seed=4)
        assert self.within(est, 1.0)

    def test_stderr_definition(self):
        seen = []

        def record(x):
            seen.append(x * x)
            return x * x

        est = simulate_price(record, ConstantPolicy(2.0), steps=3, paths=10_000, seed=5)
        vals = np.concatenate(seen)
        assert len(vals) == est.paths == 10_000
        assert est.mean == pytest.approx(vals.mean(), rel=1e-12)
        assert est.stderr == pytest.approx(vals.std(ddof=1) / math.sqrt(len(vals)), rel=1e-9)

    def test_thread_independence(self):
        pol = ThresholdPolicy(0.5, 1.0, 4.0)
        runs = [simulate_price(digital, pol, steps=10, paths=20_000, seed=7, threads=t) for t in (1, 2, 4)]
        assert runs[0] == runs[1] == runs[2]

    def test_seed_changes_result(self):
        a = simulate_price(digital, ConstantPolicy(1.0), steps=2, paths=5000, seed=1)
        b = simulate_price(digital, ConstantPolicy(1.0), steps=2, paths=5000, seed=2)
        assert a.mean != b.mean

    def test_json(self):
        est = simulate_price(digital, ConstantPolicy(1.0, name="lo"), steps=1, paths=100, seed=9)
        assert json.loads(est.to_json()) == {
            "mean": est.mean, "stderr": est.stderr, "paths": 100, "seed": 9, "policy": "lo"
        }

    def test_invalid_counts(self):
        with pytest.raises(ValueError):
            simulate_price(digital, ConstantPolicy(1.0), steps=0, paths=10, seed=0)


class TestPolicies:
    def test_band_check(self):
        ConstantPolicy(np.diag([1.0, 4.0])).check_band(1.0, 4.0)
        with pytest.raises(ValueError):
            ThresholdPolicy(1.0, 1.0, 5.0).check_band(1.0, 4.0)

    def test_threshold_selects(self):
        pol = ThresholdPolicy(1.0, 1.0, 4.0)
        roots = pol.sqrt_at(0, np.array([[0.5], [-1.5], [1.0]]))
        assert roots[:, 0, 0].tolist() == [1.0, 2.0, 2.0]


@pytest.fixture(scope="module")
def reference():
    return lattice_price(digital, VolBand(1.0, 4.0), TimeGrid(400, 1 / 400), KernelFamily(Family.TWO_POINT, 2))


class TestLowerBound:
    def test_constant_policies(self, reference):
        pols = [ConstantPolicy(a) for a in (1.0, 2.5, 4.0)]
        rep = lower_bound_report(digital, pols, reference, steps=20, paths=50_000, seed=11)
        assert rep.passed

    def test_threshold_reported(self, reference):
        pols = [ConstantPolicy(a) for a in (1.0, 4.0)] + [ThresholdPolicy(0.5, 4.0, 1.0, name="switch")]
        rep = lower_bound_report(digital, pols, reference, steps=20, paths=50_000, seed=12)
        assert rep.passed
        sw = rep.estimates["switch"]
        assert all(sw.mean > e.mean - 3 * e.stderr for e in rep.estimates.values())

    def test_convex_best_is_max_variance(self):
        pols = [ConstantPolicy(a) for a in (1.0, 2.5, 4.0)]
        rep = lower_bound_report(lambda x: x * x, pols, 4.0, steps=4, paths=50_000, seed=13)
        assert rep.best == pols[-1].name
        assert abs(rep.estimates[rep.best].mean - 4.0) <= 3 * rep.estimates[rep.best].stderr

    def test_violation_flagged(self):
        rep = lower_bound_report(digital, [ConstantPolicy(1.0, name="c")], 0.3, steps=2, paths=20_000, seed=0)
        assert rep.violations == ["c"]
