import json

import pytest

from volsup.cli import (
    EXIT_CAP,
    EXIT_CONFIG,
    EXIT_INVARIANT,
    EXIT_OK,
    ConfigError,
    RunReport,
    main,
    parse_config,
    run,
)

UNIT2 = {
    "grid": {"steps": 1, "dt": 1.0},
    "band": {"constant": [1.0, 4.0]},
    "family": {"tag": "polytope", "m": 2},
    "claim": {"type": "digital", "strike": 0.0},
    "mode": "verify-duality",
}
LEVEL_SCALED = {
    "grid": {"steps": 2, "dt": 1.0},
    "band": {"level_scaled": {"threshold": 1.5, "inner": [1.0, 4.0], "outer": [0.25, 1.0]}},
    "family": {"tag": "two-point", "m": 2},
    "claim": {"type": "digital", "strike": 0.0},
}


def cfg(**changes):
    out = json.loads(json.dumps(UNIT2))
    for k, v in changes.items():
        if v is None:
            out.pop(k, None)
        else:
            out[k] = v
    return out


def write(tmp_path, obj, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(obj))
    return p


class TestParse:
    def test_unit2_valid(self):
        c = parse_config(json.dumps(UNIT2))
        assert c.grid.steps == 1 and c.family.m == 2 and c.mode == "verify-duality"

    def test_band_order(self):
        with pytest.raises(ConfigError) as exc:
            parse_config(cfg(band={"constant": [4.0, 1.0]}))
        assert any("lo > hi" in e for e in exc.value.errors)

    def test_steps(self):
        with pytest.raises(ConfigError) as exc:
            parse_config(cfg(grid={"steps": 0, "dt": 1.0}))
        assert any("steps ≥ 1" in e for e in exc.value.errors)

    def test_collects_all_errors(self):
        bad = cfg(grid={"steps": 0, "dt": -1.0}, band={"constant": [4.0, 1.0]}, extra=1)
        with pytest.raises(ConfigError) as exc:
            parse_config(bad)
        errs = exc.value.errors
        assert len(errs) == 4
        assert any("unknown key 'extra'" in e for e in errs)
        assert any("dt > 0" in e for e in errs)

    @pytest.mark.parametrize(
        "change",
        [
            {"family": {"tag": "three-point", "m": 2}},
            {"family": {"tag": "polytope", "m": 0}},
            {"claim": {"type": "digital"}},
            {"claim": {"type": "call", "strike": 0, "note": 1}},
            {"mode": "optimise"},
            {"caps": {"policies": 0}},
            {"caps": {"leaves": 5}},
            {"seed": -1},
            {"grid": {"steps": 1, "dt": 1.0, "t": 1}},
        ],
    )
    def test_rejections(self, change):
        with pytest.raises(ConfigError):
            parse_config(cfg(**change))

    def test_missing_sections(self):
        with pytest.raises(ConfigError) as exc:
            parse_config({"mode": "price"})
        assert len(exc.value.errors) == 4

    @pytest.mark.parametrize("obj", [UNIT2, LEVEL_SCALED])
    def test_round_trip(self, obj):
        c = parse_config(obj)
        again = parse_config(json.dumps(c.to_json()))
        assert again == c


class TestRun:
    def test_duality_polytope(self):
        rep, code = run(parse_config(UNIT2))
        assert code == EXIT_OK
        assert rep.values["primal"] == pytest.approx(2 / 3, abs=1e-15)
        assert rep.values["dual"] == pytest.approx(2 / 3, abs=1e-15)
        assert abs(rep.values["gap"]) <= 1e-9

    def test_duality_two_point_gap_is_not_an_error(self):
        rep, code = run(parse_config(cfg(family={"tag": "two-point", "m": 2})))
        assert code == EXIT_OK
        assert rep.values["gap"] == pytest.approx(1 / 6, abs=1e-15)

    def test_check_conditions(self):
        rep, code = run(parse_config(LEVEL_SCALED), "check-conditions")
        assert code == EXIT_OK
        assert rep.values["failures"] == []
        assert all(inv["pass"] for inv in rep.invariants)

    def test_price_checks_oracle(self):
        rep, code = run(parse_config(cfg(mode=None, grid={"steps": 2, "dt": 1.0})), "price")
        assert code == EXIT_OK
        assert [inv["name"] for inv in rep.invariants] == ["oracle_equivalence"]

    def test_node_cap(self):
        rep, code = run(parse_config(cfg(mode=None, caps={"nodes": 3})), "hedge")
        assert code == EXIT_CAP
        assert rep.error

    def test_policy_cap(self):
        c = parse_config(cfg(mode=None, grid={"steps": 2, "dt": 1.0}, family={"tag": "two-point", "m": 2}, caps={"policies": 5}))
        assert run(c, "check-conditions")[1] == EXIT_CAP

    def test_invariant_failure(self):
        # a forced failure: a pde cross-check on a grid too coarse to meet 5e-3
        c = parse_config(cfg(mode=None, pde={"h": 0.5, "radius": 6.0, "lattice_steps": 4}))
        rep, code = run(c, "pde-crosscheck")
        assert code == EXIT_INVARIANT
        assert not rep.passed

    def test_mode_conflict(self):
        assert run(parse_config(UNIT2), "price")[1] == EXIT_CONFIG

    def test_non_constant_band_for_pde(self):
        assert run(parse_config(LEVEL_SCALED), "pde-crosscheck")[1] == EXIT_CONFIG

    def test_pde_crosscheck(self):
        c = parse_config(cfg(mode=None, family={"tag": "two-point", "m": 2}))
        rep, code = run(c, "pde-crosscheck")
        assert code == EXIT_OK
        assert rep.values["lattice"] == pytest.approx(2 / 3, abs=1e-12)

    def test_simulate(self):
        c = parse_config(cfg(mode=None, simulate={"paths": 20000, "steps": 10, "reference_steps": 100,
                                                  "policies": [{"constant": 1.0}, {"threshold": 0.5, "inner": 4.0, "outer": 1.0}]}))
        rep, code = run(c, "simulate", threads=2)
        assert code == EXIT_OK
        assert len(rep.values["estimates"]) == 2

    def test_simulate_policy_outside_band(self):
        c = parse_config(cfg(mode=None, simulate={"policies": [{"constant": 9.0}]}))
        assert run(c, "simulate")[1] == EXIT_CONFIG

    def test_determinism(self):
        c = parse_config(cfg(mode=None, seed=3, simulate={"paths": 5000, "steps": 5, "reference_steps": 50}))
        a, _ = run(c, "simulate", threads=1)
        b, _ = run(c, "simulate", threads=3)
        assert a.values == b.values and a.invariants == b.invariants

    def test_report_lists_every_invariant(self):
        rep, _ = run(parse_config(UNIT2))
        for inv in rep.invariants:
            assert set(inv) == {"name", "measured", "tolerance", "pass"}
        assert isinstance(rep, RunReport)
        json.dumps(rep.to_json())


class TestMain:
    def test_artifacts(self, tmp_path):
        out = {"surface_csv": str(tmp_path / "y.csv"), "hedge_csv": str(tmp_path / "h.csv")}
        path = write(tmp_path, cfg(mode=None, output=out))
        assert main(["price", "--config", str(path), "--out", str(tmp_path / "r.json")]) == EXIT_OK
        assert main(["hedge", "--config", str(path)]) == EXIT_OK
        report = json.loads((tmp_path / "r.json").read_text())
        assert report["values"]["price"] == pytest.approx(2 / 3, abs=1e-15)
        assert (tmp_path / "y.csv").read_text().splitlines()[0] == "node_id,step,path_value,Y"
        assert (tmp_path / "h.csv").read_text().splitlines()[0] == "node_id,step,h,dK"

    def test_config_error_exit(self, tmp_path, capsys):
        path = write(tmp_path, cfg(band={"constant": [4.0, 1.0]}))
        assert main(["verify-duality", "--config", str(path)]) == EXIT_CONFIG
        err = json.loads(capsys.readouterr().err)
        assert any("lo > hi" in e for e in err["errors"])

    def test_missing_file(self, tmp_path):
        assert main(["price", "--config", str(tmp_path / "none.json")]) == EXIT_CONFIG

    def test_seed_flag(self, tmp_path, capsys):
        path = write(tmp_path, cfg(mode=None, simulate={"paths": 2000, "steps": 2, "reference_steps": 20}))
        main(["simulate", "--config", str(path), "--seed", "5", "--threads", "2"])
        rep = json.loads(capsys.readouterr().out)
        assert rep["inputs"]["seed"] == 5
        assert all(e["seed"] == 5 for e in rep["values"]["estimates"].values())


@pytest.mark.parametrize("name", ["unit2_digital.json", "level_scaled_n2.json", "digital_continuum.json"])
def test_shipped_configs_parse(name):
    from pathlib import Path

    path = Path(__file__).parent.parent / "configs" / name
    parse_config(path.read_text())
