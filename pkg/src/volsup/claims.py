"""Payoff library: digitals, vanillas, realized variance and point-wise combinators."""

from __future__ import annotations

import math
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from typing import Any

from .path_lattice import DiscretePath, TimeGrid, concat


@dataclass(frozen=True)
class Claim:
    """A bounded payoff on paths of length ``steps``.

    When ``terminal`` is set the claim depends on the final path value only and
    ``terminal`` evaluates it from that value (used by the recombining lattice,
    the PDE and the simulator). Tree evaluation always goes through ``payoff``
    so shifted and unshifted claims see bit-identical paths.
    """

    steps: int
    payoff: Callable[[DiscretePath], float] = field(repr=False)
    terminal: Callable[[float], float] | None = field(default=None, repr=False)
    label: str = ""

    @property
    def terminal_only(self) -> bool:
        return self.terminal is not None

    def __call__(self, path: DiscretePath) -> float:
        return eval_claim(self, path)


def eval_claim(xi: Claim, path: DiscretePath) -> float:
    if len(path) != xi.steps:
        raise ValueError(f"claim expects {xi.steps} increments, got {len(path)}")
    return float(xi.payoff(path))


def shift_claim(xi: Claim, at: int, prefix: DiscretePath) -> Claim:
    """The claim ``tail -> xi(concat(prefix, at, tail))`` on the remaining steps."""
    if len(prefix) < at:
        raise ValueError(f"prefix has {len(prefix)} increments, cannot shift at {at}")
    if at == 0:
        return xi
    steps = xi.steps - at
    offset = prefix.value(at)
    terminal = None
    if xi.terminal is not None:
        base = xi.terminal
        terminal = lambda x: base(offset + x)  # noqa: E731
    return Claim(
        steps=steps,
        payoff=lambda tail: xi.payoff(concat(prefix, at, tail)),
        terminal=terminal,
        label=f"{xi.label}@{at}",
    )


def terminal_claim(steps: int, fn: Callable[[float], float], label: str = "") -> Claim:
    return Claim(steps, lambda path: fn(path.value()), fn, label)


def path_claim(steps: int, fn: Callable[[DiscretePath], float], label: str = "") -> Claim:
    return Claim(steps, fn, None, label)


_LEAF_PARAMS: dict[str, tuple[str, ...]] = {
    "digital": ("strike",),
    "call": ("strike",),
    "put": ("strike",),
    "power": ("exponent",),
    "identity": (),
    "constant": ("value",),
    "realized_variance": (),
    "neg_abs": (),
}
_COMBINATORS: dict[str, tuple[str, ...]] = {
    "affine": ("scale", "claim", "shift"),
    "max": ("claims",),
    "min": ("claims",),
}


class ClaimSpecError(ValueError):
    pass


@dataclass(frozen=True)
class ClaimSpec:
    """Declarative payoff description, e.g. ``{"type": "digital", "strike": 0.0}``."""

    type: str
    params: tuple[tuple[str, float], ...] = ()
    args: tuple[ClaimSpec, ...] = ()

    def param(self, name: str) -> float:
        return dict(self.params)[name]

    @classmethod
    def from_json(cls, obj: Mapping[str, Any], where: str = "claim") -> ClaimSpec:
        if not isinstance(obj, Mapping):
            raise ClaimSpecError(f"{where}: expected an object")
        tag = obj.get("type")
        if tag in _LEAF_PARAMS:
            allowed = _LEAF_PARAMS[tag]
        elif tag in _COMBINATORS:
            allowed = _COMBINATORS[tag]
        else:
            raise ClaimSpecError(f"{where}: unknown claim type {tag!r}")
        keys = set(obj) - {"type"}
        if keys != set(allowed):
            extra = sorted(keys - set(allowed))
            missing = sorted(set(allowed) - keys)
            raise ClaimSpecError(f"{where}: bad keys for {tag!r} (unknown {extra}, missing {missing})")

        if tag in _LEAF_PARAMS:
            params = []
            for name in allowed:
                value = obj[name]
                if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
                    raise ClaimSpecError(f"{where}.{name}: expected a finite number")
                params.append((name, float(value)))
            if tag == "power":
                p = params[0][1]
                if p != int(p) or int(p) % 2 or p < 0:
                    raise ClaimSpecError(f"{where}.exponent: power requires an even non-negative integer")
            return cls(tag, tuple(params))

        if tag == "affine":
            scale, shift = obj["scale"], obj["shift"]
            for name, value in (("scale", scale), ("shift", shift)):
                if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
                    raise ClaimSpecError(f"{where}.{name}: expected a finite number")
            inner = cls.from_json(obj["claim"], f"{where}.claim")
            return cls(tag, (("scale", float(scale)), ("shift", float(shift))), (inner,))

        parts = obj["claims"]
        if not isinstance(parts, list) or len(parts) != 2:
            raise ClaimSpecError(f"{where}.claims: expected a list of two claims")
        return cls(tag, (), tuple(cls.from_json(c, f"{where}.claims[{i}]") for i, c in enumerate(parts)))

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"type": self.type}
        if self.type == "affine":
            out.update(scale=self.param("scale"), claim=self.args[0].to_json(), shift=self.param("shift"))
        elif self.type in ("max", "min"):
            out["claims"] = [a.to_json() for a in self.args]
        else:
            out.update(dict(self.params))
        return out


def _terminal_fn(spec: ClaimSpec) -> Callable[[float], float] | None:
    t = spec.type
    if t == "digital":
        k = spec.param("strike")
        return lambda x: 1.0 if x >= k else 0.0
    if t == "call":
        k = spec.param("strike")
        return lambda x: max(x - k, 0.0)
    if t == "put":
        k = spec.param("strike")
        return lambda x: max(k - x, 0.0)
    if t == "power":
        p = int(spec.param("exponent"))
        return lambda x: x**p
    if t == "identity":
        return lambda x: x
    if t == "constant":
        c = spec.param("value")
        return lambda x: c
    if t == "neg_abs":
        return lambda x: -abs(x)
    if t == "realized_variance":
        return None
    inner = [_terminal_fn(a) for a in spec.args]
    if any(f is None for f in inner):
        return None
    if t == "affine":
        a, b, f = spec.param("scale"), spec.param("shift"), inner[0]
        return lambda x: a * f(x) + b
    f, g = inner
    return (lambda x: max(f(x), g(x))) if t == "max" else (lambda x: min(f(x), g(x)))


def _path_fn(spec: ClaimSpec) -> Callable[[DiscretePath], float]:
    t = spec.type
    if t == "realized_variance":
        return lambda path: math.fsum(x * x for x in path.increments)
    if t in _LEAF_PARAMS:
        f = _terminal_fn(spec)
        return lambda path: f(path.value())
    inner = [_path_fn(a) for a in spec.args]
    if t == "affine":
        a, b, f = spec.param("scale"), spec.param("shift"), inner[0]
        return lambda path: a * f(path) + b
    f, g = inner
    return (lambda path: max(f(path), g(path))) if t == "max" else (lambda path: min(f(path), g(path)))


def build_claim(spec: ClaimSpec | Mapping[str, Any], grid: TimeGrid | int) -> Claim:
    """Turn a spec (or its JSON form) into a claim on paths of the grid's length."""
    if not isinstance(spec, ClaimSpec):
        spec = ClaimSpec.from_json(spec)
    steps = grid.steps if isinstance(grid, TimeGrid) else int(grid)
    return Claim(steps, _path_fn(spec), _terminal_fn(spec), spec.type)


def vectorized(xi: Claim):
    """Terminal payoff of ``xi`` as a numpy function of final values."""
    if xi.terminal is None:
        raise ValueError(f"claim {xi.label!r} is path-dependent; no terminal payoff")
    import numpy as np

    return np.vectorize(xi.terminal, otypes=[float])
