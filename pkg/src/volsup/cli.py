"""Batch entry point: ``volsup <mode> --config <path> [--out <path>] [--threads k] [--seed s]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .claims import ClaimSpec, ClaimSpecError, build_claim, vectorized
from .dp_engine import PdeGrid, barenblatt_fd, brute_force_price, lattice_price, sublinear_expectation
from .montecarlo import ConstantPolicy, ThresholdPolicy, lower_bound_report
from .path_lattice import TimeGrid
from .superhedge import duality_report, minimal_superhedge, verify_superhedge
from .uncertainty import (
    DEFAULT_POLICY_CAP,
    ConstantRule,
    Family,
    KernelFamily,
    PolicyCapExceeded,
    ScenarioSet,
    VolBand,
    check_closure,
    vol_rule_from_json,
)

log = logging.getLogger("volsup")

MODES = ("price", "hedge", "verify-duality", "check-conditions", "simulate", "pde-crosscheck")
EXIT_OK, EXIT_INVARIANT, EXIT_CAP, EXIT_CONFIG = 0, 1, 2, 3
DEFAULT_NODE_CAP = 10**6

_TOP_KEYS = {"grid", "band", "family", "claim", "mode", "seed", "output", "caps", "simulate", "pde"}
_SIM_KEYS = {"paths", "steps", "reference_steps", "policies"}
_PDE_KEYS = {"h", "radius", "lattice_steps"}


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        super().__init__("; ".join(errors))
        self.errors = errors


@dataclass
class RunConfig:
    grid: TimeGrid
    band: Any
    family: KernelFamily
    claim: ClaimSpec
    mode: str | None = None
    seed: int = 0
    output: dict[str, str] = field(default_factory=dict)
    caps: dict[str, int] = field(default_factory=lambda: {"policies": DEFAULT_POLICY_CAP, "nodes": DEFAULT_NODE_CAP})
    simulate: dict[str, Any] = field(default_factory=dict)
    pde: dict[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {
            "grid": {"steps": self.grid.steps, "dt": self.grid.dt},
            "band": self.band.to_json(),
            "family": {"tag": self.family.tag.value, "m": self.family.m},
            "claim": self.claim.to_json(),
            "seed": self.seed,
            "caps": dict(self.caps),
        }
        if self.mode is not None:
            out["mode"] = self.mode
        for key in ("output", "simulate", "pde"):
            if getattr(self, key):
                out[key] = getattr(self, key)
        return out


def _is_num(v: Any) -> bool:
    return isinstance(v, (int, float)) and not isinstance(v, bool)


def _is_int(v: Any) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def parse_config(text: str | Mapping[str, Any]) -> RunConfig:
    """Validate a JSON config, collecting every error before raising :class:`ConfigError`."""
    errors: list[str] = []
    if isinstance(text, Mapping):
        obj = dict(text)
    else:
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError([f"invalid JSON: {exc}"]) from exc
    if not isinstance(obj, dict):
        raise ConfigError(["config must be a JSON object"])
    for key in sorted(set(obj) - _TOP_KEYS):
        errors.append(f"unknown key {key!r}")
    for key in ("grid", "band", "family", "claim"):
        if key not in obj:
            errors.append(f"missing key {key!r}")

    grid = None
    g = obj.get("grid")
    if g is not None:
        if not isinstance(g, dict) or set(g) != {"steps", "dt"}:
            errors.append("grid: expected keys steps, dt")
        else:
            ok = True
            if not _is_int(g["steps"]) or g["steps"] < 1:
                errors.append("grid.steps: steps ≥ 1")
                ok = False
            if not _is_num(g["dt"]) or not g["dt"] > 0:
                errors.append("grid.dt: dt > 0")
                ok = False
            if ok:
                grid = TimeGrid(int(g["steps"]), float(g["dt"]))

    band = None
    if "band" in obj:
        try:
            band = vol_rule_from_json(obj["band"])
        except ValueError as exc:
            errors.append(str(exc))

    family = None
    f = obj.get("family")
    if f is not None:
        if not isinstance(f, dict) or set(f) != {"tag", "m"}:
            errors.append("family: expected keys tag, m")
        else:
            tag_ok = f["tag"] in {t.value for t in Family}
            if not tag_ok:
                errors.append(f"family.tag: expected one of {[t.value for t in Family]}")
            if not _is_int(f["m"]) or f["m"] < 1:
                errors.append("family.m: m ≥ 1")
            elif tag_ok:
                family = KernelFamily(Family(f["tag"]), int(f["m"]))
    if family is not None and band is not None and family.m == 1:
        bands = [band.band] if isinstance(band, ConstantRule) else [band.inner, band.outer]
        if any(b.lo != b.hi for b in bands):
            errors.append("family.m: m = 1 needs lo == hi in every band")

    claim = None
    if "claim" in obj:
        try:
            claim = ClaimSpec.from_json(obj["claim"])
        except ClaimSpecError as exc:
            errors.append(str(exc))

    mode = obj.get("mode")
    if mode is not None and mode not in MODES:
        errors.append(f"mode: expected one of {list(MODES)}")
    seed = obj.get("seed", 0)
    if not _is_int(seed) or seed < 0:
        errors.append("seed: expected an integer ≥ 0")

    output = obj.get("output", {})
    if not isinstance(output, dict) or set(output) - {"report", "surface_csv", "hedge_csv"} or not all(
        isinstance(v, str) for v in output.values()
    ):
        errors.append("output: allowed keys report, surface_csv, hedge_csv (strings)")

    caps = {"policies": DEFAULT_POLICY_CAP, "nodes": DEFAULT_NODE_CAP}
    c = obj.get("caps", {})
    if not isinstance(c, dict) or set(c) - set(caps):
        errors.append("caps: allowed keys policies, nodes")
    else:
        for k, v in c.items():
            if not _is_int(v) or v < 1:
                errors.append(f"caps.{k}: expected an integer ≥ 1")
            else:
                caps[k] = v

    sim = obj.get("simulate", {})
    if not isinstance(sim, dict) or set(sim) - _SIM_KEYS:
        errors.append(f"simulate: allowed keys {sorted(_SIM_KEYS)}")
        sim = {}
    for k in ("paths", "steps", "reference_steps"):
        if k in sim and (not _is_int(sim[k]) or sim[k] < 1):
            errors.append(f"simulate.{k}: expected an integer ≥ 1")
    for i, pol in enumerate(sim.get("policies", [])):
        if not isinstance(pol, dict) or not (
            (set(pol) == {"constant"} and _is_num(pol["constant"]) and pol["constant"] > 0)
            or (
                set(pol) == {"threshold", "inner", "outer"}
                and all(_is_num(pol[k]) for k in pol)
                and pol["inner"] > 0
                and pol["outer"] > 0
            )
        ):
            errors.append(f"simulate.policies[{i}]: expected {{constant: a}} or {{threshold, inner, outer}}")

    pde = obj.get("pde", {})
    if not isinstance(pde, dict) or set(pde) - _PDE_KEYS:
        errors.append(f"pde: allowed keys {sorted(_PDE_KEYS)}")
        pde = {}
    for k in ("h", "radius"):
        if k in pde and (not _is_num(pde[k]) or pde[k] <= 0):
            errors.append(f"pde.{k}: expected a number > 0")
    if "lattice_steps" in pde and (not _is_int(pde["lattice_steps"]) or pde["lattice_steps"] < 1):
        errors.append("pde.lattice_steps: expected an integer ≥ 1")

    if errors:
        raise ConfigError(errors)
    return RunConfig(grid, band, family, claim, mode, seed, dict(output), caps, dict(sim), dict(pde))


@dataclass
class RunReport:
    mode: str
    inputs: dict[str, Any]
    values: dict[str, Any] = field(default_factory=dict)
    invariants: list[dict[str, Any]] = field(default_factory=list)
    artifacts: list[str] = field(default_factory=list)
    wall_time: float = 0.0
    error: str | None = None

    def check(self, name: str, measured: float, tolerance: float, ok: bool) -> None:
        self.invariants.append({"name": name, "measured": measured, "tolerance": tolerance, "pass": bool(ok)})

    @property
    def passed(self) -> bool:
        return all(inv["pass"] for inv in self.invariants)

    def to_json(self) -> dict[str, Any]:
        return {
            "mode": self.mode,
            "inputs": self.inputs,
            "values": self.values,
            "invariants": self.invariants,
            "passed": self.passed,
            "artifacts": self.artifacts,
            "wall_time": self.wall_time,
            "error": self.error,
        }


def _tree_size(cfg: RunConfig) -> int:
    width = 2 * cfg.family.m
    return sum(width**k for k in range(cfg.grid.steps + 1))


def _scenarios(cfg: RunConfig) -> ScenarioSet:
    size = _tree_size(cfg)
    if size > cfg.caps["nodes"]:
        raise PolicyCapExceeded(size, cfg.caps["nodes"])
    return ScenarioSet.build(cfg.grid, cfg.band, cfg.family)


def _constant_band(cfg: RunConfig) -> VolBand:
    if not isinstance(cfg.band, ConstantRule):
        raise ValueError("this mode needs a constant band")
    return cfg.band.band


def _run_price(cfg: RunConfig, report: RunReport) -> None:
    sc = _scenarios(cfg)
    xi = build_claim(cfg.claim, cfg.grid)
    surface = sublinear_expectation(xi, sc)
    report.values["price"] = surface.root
    if sc.policy_count() <= min(cfg.caps["policies"], 10**5):
        brute, _ = brute_force_price(xi, sc, cfg.caps["policies"])
        report.values["brute_force_price"] = brute
        err = abs(brute - surface.root)
        report.check("oracle_equivalence", err, 1e-12, err <= 1e-12)
    if "surface_csv" in cfg.output:
        surface.to_csv(cfg.output["surface_csv"])
        report.artifacts.append(cfg.output["surface_csv"])


def _run_hedge(cfg: RunConfig, report: RunReport) -> None:
    sc = _scenarios(cfg)
    xi = build_claim(cfg.claim, cfg.grid)
    x, hedge = minimal_superhedge(xi, sc)
    slack = verify_superhedge(x, hedge, xi, sc.tree)
    report.values.update(capital=x, root_hedge=hedge[sc.tree.nodes[0]], min_slack=slack.min_slack, tight_paths=slack.tight_paths)
    report.check("superhedge_min_slack", slack.min_slack, -1e-9, slack.min_slack >= -1e-9)
    report.check("tight_paths", slack.tight_paths, 1, slack.tight_paths >= 1)
    if "hedge_csv" in cfg.output:
        hedge.to_csv(cfg.output["hedge_csv"])
        report.artifacts.append(cfg.output["hedge_csv"])


def _run_duality(cfg: RunConfig, report: RunReport) -> None:
    sc = _scenarios(cfg)
    xi = build_claim(cfg.claim, cfg.grid)
    d = duality_report(xi, sc)
    report.values.update(
        primal=d.primal, dual=d.dual, gap=d.gap, min_slack=d.min_slack, tight_paths=d.tight_paths,
        worst_path=list(d.worst_path.increments),
    )
    if sc.family.tag is Family.POLYTOPE:
        report.check("duality_gap", abs(d.gap), 1e-9, abs(d.gap) <= 1e-9)
    else:
        report.check("gap_nonnegative", d.gap, -1e-12, d.gap >= -1e-12)
    report.check("superhedge_min_slack", d.min_slack, -1e-9, d.min_slack >= -1e-9)
    report.check("tight_paths", d.tight_paths, 1, d.tight_paths >= 1)


def _run_conditions(cfg: RunConfig, report: RunReport) -> None:
    sc = _scenarios(cfg)
    closure = check_closure(sc, cap=cfg.caps["policies"], seed=cfg.seed)
    report.values.update(
        conditioning_checked=closure.conditioning_checked,
        pasting_checked=closure.pasting_checked,
        mixing_checked=closure.mixing_checked,
        failures=[kind for kind, _ in closure.failures[:20]],
    )
    for kind in ("enumeration", "conditioning", "pasting", "pasting-identity", "pasting-measure", "mixing"):
        n = sum(1 for k, _ in closure.failures if k == kind)
        report.check(f"closure_{kind}", n, 0, n == 0)
    err = closure.pasting_identity_error
    report.check("pasting_measure_identity", err, 1e-12, err <= 1e-12)


def _run_simulate(cfg: RunConfig, report: RunReport, threads: int) -> None:
    band = _constant_band(cfg)
    sim = cfg.simulate
    xi = build_claim(cfg.claim, cfg.grid)
    payoff = vectorized(xi)
    ref_steps = sim.get("reference_steps", 400)
    ref_grid = TimeGrid(ref_steps, cfg.grid.horizon / ref_steps)
    reference = lattice_price(payoff, band, ref_grid, KernelFamily(Family.TWO_POINT, 2 if band.lo != band.hi else 1))
    specs = sim.get("policies") or [{"constant": band.lo}, {"constant": band.hi}]
    policies = []
    for spec in specs:
        if "constant" in spec:
            pol = ConstantPolicy([[spec["constant"]]], name=f"constant({spec['constant']})")
        else:
            pol = ThresholdPolicy(spec["threshold"], [[spec["inner"]]], [[spec["outer"]]],
                                  name=f"threshold({spec['threshold']},{spec['inner']},{spec['outer']})")
        pol.check_band(band.lo, band.hi)
        policies.append(pol)
    lb = lower_bound_report(
        payoff, policies, reference, sim.get("steps", cfg.grid.steps), sim.get("paths", 10**4), cfg.seed,
        cfg.grid.horizon, threads,
    )
    report.values["reference"] = reference
    report.values["estimates"] = {k: {"mean": e.mean, "stderr": e.stderr, "paths": e.paths, "seed": e.seed, "policy": e.policy}
                                  for k, e in lb.estimates.items()}
    report.values["best_policy"] = lb.best
    for name, est in lb.estimates.items():
        excess = est.mean - reference
        report.check(f"lower_bound[{name}]", excess, 3.0 * est.stderr, name not in lb.violations)


def _run_pde(cfg: RunConfig, report: RunReport) -> None:
    band = _constant_band(cfg)
    xi = build_claim(cfg.claim, cfg.grid)
    payoff = vectorized(xi)
    h = cfg.pde.get("h", 0.0125)
    radius = cfg.pde.get("radius", 6.0)
    steps = cfg.pde.get("lattice_steps", 400)
    T = cfg.grid.horizon
    fd = barenblatt_fd(payoff, band, T, PdeGrid.stable(h, radius, band))
    lat = lattice_price(payoff, band, TimeGrid(steps, T / steps), cfg.family)
    report.values.update(pde=fd, lattice=lat, lattice_steps=steps, difference=abs(fd - lat))
    report.check("pde_crosscheck", abs(fd - lat), 5e-3, abs(fd - lat) <= 5e-3)


def run(cfg: RunConfig, mode: str | None = None, threads: int = 1) -> tuple[RunReport, int]:
    mode = mode or cfg.mode
    report = RunReport(mode or "", cfg.to_json())
    start = time.perf_counter()
    code = EXIT_OK
    try:
        if mode not in MODES:
            raise ConfigError([f"mode: expected one of {list(MODES)}"])
        if cfg.mode is not None and cfg.mode != mode:
            raise ConfigError([f"mode: command line {mode!r} conflicts with config {cfg.mode!r}"])
        if mode == "price":
            _run_price(cfg, report)
        elif mode == "hedge":
            _run_hedge(cfg, report)
        elif mode == "verify-duality":
            _run_duality(cfg, report)
        elif mode == "check-conditions":
            _run_conditions(cfg, report)
        elif mode == "simulate":
            _run_simulate(cfg, report, threads)
        else:
            _run_pde(cfg, report)
        if not report.passed:
            code = EXIT_INVARIANT
    except PolicyCapExceeded as exc:
        report.error = str(exc)
        code = EXIT_CAP
    except ConfigError as exc:
        report.error = str(exc)
        code = EXIT_CONFIG
    except ValueError as exc:
        report.error = str(exc)
        code = EXIT_CONFIG
    report.wall_time = time.perf_counter() - start
    if "report" in cfg.output:
        Path(cfg.output["report"]).write_text(json.dumps(report.to_json(), indent=2))
        report.artifacts.append(cfg.output["report"])
    return report, code


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="volsup", description=__doc__)
    parser.add_argument("mode", choices=MODES)
    parser.add_argument("--config", required=True, type=Path)
    parser.add_argument("--out", type=Path, help="write the JSON report here")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--seed", type=int)
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    try:
        cfg = parse_config(args.config.read_text())
    except OSError as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return EXIT_CONFIG
    except ConfigError as exc:
        print(json.dumps({"error": "config", "errors": exc.errors}), file=sys.stderr)
        return EXIT_CONFIG
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out is not None:
        cfg.output["report"] = str(args.out)
    report, code = run(cfg, args.mode, max(1, args.threads))
    print(json.dumps(report.to_json(), indent=2))
    log.info("mode %s finished with exit code %d", args.mode, code)
    return code


if __name__ == "__main__":
    sys.exit(main())
