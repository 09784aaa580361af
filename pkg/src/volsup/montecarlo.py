"""Euler simulation of volatility-controlled Brownian integrals in dimension d."""

from __future__ import annotations

import json
import math
from collections.abc import Callable, Mapping, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np

BLOCK = 4096


def _as_vol_matrix(a: Any) -> np.ndarray:
    m = np.atleast_2d(np.asarray(a, dtype=float))
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError("volatility matrix must be square")
    if not np.allclose(m, m.T, rtol=0.0, atol=1e-12):
        raise ValueError("volatility matrix must be symmetric")
    return m


def psd_sqrt(a: Any) -> np.ndarray:
    """Symmetric positive-definite square root via an eigendecomposition."""
    m = _as_vol_matrix(a)
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    if w.min() <= 0:
        raise ValueError(f"matrix is not positive definite (eigenvalue {w.min():.6g})")
    root = (v * np.sqrt(w)) @ v.T
    return 0.5 * (root + root.T)


class MatrixPolicy:
    """Adapted choice of the variance matrix from the current simulated state."""

    name = "policy"
    dim = 1

    def sqrt_at(self, step: int, state: np.ndarray) -> np.ndarray:
        """Array ``(paths, d, d)`` of matrix square roots used over the next step."""
        raise NotImplementedError

    def eigen_range(self) -> tuple[float, float]:
        raise NotImplementedError

    def check_band(self, lo: float, hi: float) -> None:
        emin, emax = self.eigen_range()
        if emin < lo - 1e-12 or emax > hi + 1e-12:
            raise ValueError(f"{self.name}: eigenvalues [{emin:.6g}, {emax:.6g}] leave band [{lo}, {hi}]")


class ConstantPolicy(MatrixPolicy):
    def __init__(self, a: Any, name: str | None = None):
        self.matrix = _as_vol_matrix(a)
        self.root = psd_sqrt(self.matrix)
        self.dim = self.matrix.shape[0]
        self.name = name or f"constant({self.matrix.tolist()})"

    def sqrt_at(self, step: int, state: np.ndarray) -> np.ndarray:
        return np.broadcast_to(self.root, (state.shape[0], self.dim, self.dim))

    def eigen_range(self) -> tuple[float, float]:
        w = np.linalg.eigvalsh(self.matrix)
        return float(w.min()), float(w.max())


class ThresholdPolicy(MatrixPolicy):
    """``inner`` while ``|X| < threshold``, ``outer`` otherwise."""

    def __init__(self, threshold: float, inner: Any, outer: Any, name: str | None = None):
        self.threshold = float(threshold)
        self.inner = _as_vol_matrix(inner)
        self.outer = _as_vol_matrix(outer)
        if self.inner.shape != self.outer.shape:
            raise ValueError("inner and outer matrices differ in dimension")
        self.roots = np.stack([psd_sqrt(self.inner), psd_sqrt(self.outer)])
        self.dim = self.inner.shape[0]
        self.name = name or f"threshold({self.threshold})"

    def sqrt_at(self, step: int, state: np.ndarray) -> np.ndarray:
        outside = np.linalg.norm(state, axis=1) >= self.threshold
        return self.roots[outside.astype(np.intp)]

    def eigen_range(self) -> tuple[float, float]:
        w = np.concatenate([np.linalg.eigvalsh(self.inner), np.linalg.eigvalsh(self.outer)])
        return float(w.min()), float(w.max())


@dataclass(frozen=True)
class MCEstimate:
    mean: float
    stderr: float
    paths: int
    seed: int
    policy: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def _block_moments(
    payoff: Callable[[np.ndarray], np.ndarray],
    policy: MatrixPolicy,
    steps: int,
    dt: float,
    seed: int,
    block: int,
    n: int,
) -> tuple[float, float]:
    # substream keyed by (seed, block index); blocks are fixed ranges of path indices
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(block,)))
    d = policy.dim
    x = np.zeros((n, d))
    sq = math.sqrt(dt)
    for k in range(steps):
        z = rng.standard_normal((n, d))
        roots = policy.sqrt_at(k, x)
        x = x + sq * np.einsum("nij,nj->ni", roots, z)
    vals = np.asarray(payoff(x if d > 1 else x[:, 0]), dtype=float)
    return float(vals.sum()), float((vals * vals).sum())


def simulate_price(
    payoff: Callable[[np.ndarray], np.ndarray],
    policy: MatrixPolicy,
    steps: int,
    paths: int,
    seed: int,
    horizon: float = 1.0,
    threads: int = 1,
) -> MCEstimate:
    """Monte Carlo estimate of ``E[payoff(X_T)]`` for ``dX = alpha^{1/2} dW``.

    ``payoff`` receives terminal states, shape ``(paths,)`` in dimension 1 and
    ``(paths, d)`` otherwise. Paths are simulated in fixed blocks of
    ``BLOCK`` with one random substream per block, so the estimate does not
    depend on ``threads``.
    """
    if steps < 1 or paths < 1:
        raise ValueError("steps and paths must be >= 1")
    dt = horizon / steps
    sizes = [min(BLOCK, paths - start) for start in range(0, paths, BLOCK)]
    jobs = [(payoff, policy, steps, dt, seed, b, n) for b, n in enumerate(sizes)]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda job: _block_moments(*job), jobs))
    else:
        parts = [_block_moments(*job) for job in jobs]
    total = math.fsum(s for s, _ in parts)
    total_sq = math.fsum(q for _, q in parts)
    mean = total / paths
    var = max(total_sq / paths - mean * mean, 0.0) * paths / max(paths - 1, 1)
    return MCEstimate(mean, math.sqrt(var / paths), paths, seed, policy.name)


@dataclass
class LowerBoundReport:
    reference: float
    estimates: dict[str, MCEstimate]
    violations: list[str] = field(default_factory=list)

    @property
    def best(self) -> str:
        return max(self.estimates, key=lambda k: self.estimates[k].mean)

    @property
    def passed(self) -> bool:
        return not self.violations


def lower_bound_report(
    payoff: Callable[[np.ndarray], np.ndarray],
    policies: Sequence[MatrixPolicy] | Mapping[str, MatrixPolicy],
    reference: float,
    steps: int,
    paths: int,
    seed: int,
    horizon: float = 1.0,
    threads: int = 1,
) -> LowerBoundReport:
    """Each policy's estimate must sit below the reference price plus 3 standard errors."""
    if not isinstance(policies, Mapping):
        policies = {p.name: p for p in policies}
    report = LowerBoundReport(reference, {})
    for name, pol in policies.items():
        est = simulate_price(payoff, pol, steps, paths, seed, horizon, threads)
        report.estimates[name] = est
        if est.mean > reference + 3.0 * est.stderr:
            report.violations.append(name)
    return report
