"""
Tests scenario loading and the end-to-end pipeline.
"""
import json

import attr
import pytest

import ftrbid
from ftrbid import scenario
from ftrbid.contribution import OBLIGATION
from ftrbid.equilibrium import CONVERGED
from ftrbid.exceptions import ConfigError, InfeasibleDispatchError, SchemaError

SMALL = {"grid_resolution": 3, "solve_kkt": False}


def _write(path, document):
    path.write_text(json.dumps(document))
    return path


def test_builtin_scenarios():
    assert scenario.builtin_scenarios() == ["eight_bus", "two_bus"]


def test_load_builtin():
    config = ftrbid.load_scenario("two_bus")
    assert config.name == "two_bus"
    assert [line.id for line in config.lines] == [1]
    assert config.solver.grid_resolution == 5
    assert config.solver.max_rounds == ftrbid.SolverOptions().max_rounds


def test_solver_layering(config_path):
    ftrbid.config.load(config_path)
    config = ftrbid.load_scenario("two_bus")
    # Configuration file sets max_sweeps, the scenario wins on the grid.
    assert config.solver.max_sweeps == 3
    assert config.solver.grid_resolution == 5

    ftrbid.config["SOLVER"] = {"max_rounds": 7, "grid_resolution": 8}
    config = ftrbid.load_scenario("two_bus", {"grid_resolution": 3, "seed": None})
    assert config.solver.max_rounds == 7
    assert config.solver.grid_resolution == 3
    assert config.solver.seed == 0


def test_network_file(tmp_path, two_bus_document):
    network = {key: two_bus_document.pop(key) for key in ("buses", "lines", "generators", "loads")}
    _write(tmp_path / "grid.json", network)
    two_bus_document["network"] = "grid.json"
    path = _write(tmp_path / "case.json", two_bus_document)

    config = ftrbid.load_scenario(path)
    assert len(config.buses) == 2
    assert config.loads[0].demand == 50
    assert [player.name for player in config.players] == ["P1", "P2"]


def test_load_errors(tmp_path, two_bus_document):
    with pytest.raises(ConfigError):
        ftrbid.load_scenario("no_such_scenario")

    path = tmp_path / "broken.yml"
    path.write_text("buses: [\n")
    with pytest.raises(ConfigError):
        ftrbid.load_scenario(path)

    path.write_text("- just\n- a list\n")
    with pytest.raises(ConfigError):
        ftrbid.load_scenario(path)

    del two_bus_document["buses"]
    with pytest.raises(SchemaError):
        ftrbid.load_scenario(_write(tmp_path / "missing.json", two_bus_document))


def test_metrics_only():
    report = ftrbid.run_scenario(ftrbid.load_scenario("two_bus"), metrics_only=True)
    assert report.status == "metrics"
    assert report.stage is None
    assert report.converged
    assert report.equilibrium is None
    assert report.dispatch.cost == pytest.approx(1100.0)
    assert report.dispatch.path_spread["line1"] == pytest.approx(20.0)
    assert report.risks["line1"].zeta_f == pytest.approx(1.0)
    assert report.path_impacts["line1"] == pytest.approx([1.0])
    assert set(report.timings) == {"network", "dispatch", "redispatch", "risk", "contribution"}


def test_run_two_bus():
    report = ftrbid.run_scenario(ftrbid.load_scenario("two_bus", SMALL))
    assert report.status == "converged"
    assert report.converged
    assert report.selection[("P1", "line1")] == OBLIGATION
    assert report.joint is None

    equilibrium = report.equilibrium
    assert equilibrium.status == CONVERGED
    assert equilibrium.nash.certified
    p1 = equilibrium.result("P1", "line1")
    # P1 alone holds the congested line: its band floor wins the full 20 MW.
    assert p1.decision.ftr_type == OBLIGATION
    assert p1.decision.price == 0.0
    assert p1.decision.award == pytest.approx(20.0)
    assert equilibrium.player_profits["P1"] == pytest.approx(400.0)
    assert equilibrium.player_profits["P2"] == pytest.approx(0.0, abs=1e-6)

    assert report.obligation_state.player_profits["P1"] == pytest.approx(400.0)
    assert report.option_state.player_profits["P1"] == pytest.approx(0.0, abs=1e-6)


def test_run_two_bus_joint():
    report = ftrbid.run_scenario(ftrbid.load_scenario("two_bus", {"grid_resolution": 3}))
    assert "joint" in report.timings
    assert report.joint is not None
    assert report.joint.objective >= report.equilibrium.objective - 1e-3


def test_stage_errors(tmp_path, two_bus_document):
    two_bus_document["loads"][0]["demand"] = 500
    config = ftrbid.load_scenario(_write(tmp_path / "short.json", two_bus_document))
    with pytest.raises(InfeasibleDispatchError) as exc_info:
        ftrbid.run_scenario(config)
    assert exc_info.value.stage == "dispatch"


def test_emit_tables(tmp_path):
    report = ftrbid.run_scenario(ftrbid.load_scenario("two_bus", SMALL))
    written = ftrbid.emit_tables(report, tmp_path / "first")
    assert sorted(path.name for path in written) == [
        "summary.json",
        "table_bids.csv",
        "table_fcp_rcp.csv",
        "table_ftrs.csv",
        "table_mcp.csv",
        "table_profits.csv",
        "table_zeta.csv",
    ]
    zeta = (tmp_path / "first" / "table_zeta.csv").read_text().splitlines()
    assert zeta[0] == "path,line,source,sink,p_est,spread,fpf,rpf,zeta_f,zeta_r,obligation_cap,option_cap"
    assert zeta[1].startswith("line1,1,1,2,20.0000,20.0000,")

    summary = json.loads((tmp_path / "first" / "summary.json").read_text())
    assert summary["scenario"] == "two_bus"
    assert summary["status"] == "converged"

    # Tables are reproducible.
    ftrbid.emit_tables(report, tmp_path / "second")
    for path in written:
        if path.suffix == ".csv":
            assert path.read_bytes() == (tmp_path / "second" / path.name).read_bytes()


def test_emit_tables_default_directory(tmp_path, monkeypatch):
    report = ftrbid.run_scenario(ftrbid.load_scenario("two_bus"), metrics_only=True)
    monkeypatch.setenv("FTRBID_OUTPUT_DIR", str(tmp_path))
    written = ftrbid.emit_tables(report)
    assert all(path.parent == tmp_path for path in written)
    # Metrics only runs leave the auction tables empty.
    assert (tmp_path / "table_bids.csv").read_text() == "player,path,bid_obligation,bid_option\n"


@pytest.mark.slow
def test_run_eight_bus(eight_bus):
    config = attr.evolve(eight_bus, solver=attr.evolve(eight_bus.solver, grid_resolution=10))
    report = ftrbid.run_scenario(config)
    assert report.equilibrium is not None
    nash = report.equilibrium.nash
    assert nash.certified
    assert nash.grid_resolution == 19
    assert nash.joint_evaluated > 0
    assert len(report.table_zeta()) == 5
    assert len(report.table_fcp_rcp()) == 30
    assert len(report.table_profits()) == 30
    assert set(report.table_profits()["selected"]) <= {"obligation", "option", ""}
    assert report.equilibrium.residuals["band"] <= 1e-9

    # Every award lies within the holder's FTR bounds.
    for state in (report.obligation_state, report.option_state, report.equilibrium):
        for result in state.results:
            decision = result.decision
            assert 0.0 <= decision.award <= decision.quantity + 1e-6
            if decision.award > 1e-9:
                metrics = report.contributions[decision.key]
                assert max(0.0, metrics.ftr_min) - 1e-9 <= decision.award <= metrics.ftr_max + 1e-9

    # Reversal is more likely than not on line 8 only, so nobody holds an obligation there.
    assert report.obligation_state.outcome.instance.offers
    for offer in report.equilibrium.outcome.instance.offers + report.obligation_state.outcome.instance.offers:
        if offer.path == "line8":
            assert offer.ftr_type != OBLIGATION
    for player in report.player_names:
        assert report.equilibrium.outcome.award(player, "line8", OBLIGATION) == 0.0

    bids = report.table_bids().dropna()
    assert len(bids)
    assert (bids["bid_option"] >= bids["bid_obligation"] - 1e-9).all()


def test_eight_bus_reproducible(eight_bus, tmp_path):
    written = ftrbid.emit_tables(ftrbid.run_scenario(eight_bus), tmp_path / "first")
    ftrbid.emit_tables(ftrbid.run_scenario(eight_bus), tmp_path / "second")
    for path in written:
        if path.suffix == ".csv":
            assert path.read_bytes() == (tmp_path / "second" / path.name).read_bytes()
