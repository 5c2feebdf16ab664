"""
Tests the library entry points.
"""
import copy

import pytest

import ftrbid
from ftrbid import core
from ftrbid.contribution import OBLIGATION, OPTION
from ftrbid.exceptions import ConfigError, SchemaError

INSTANCE = {
    "name": "hand",
    "lines": [{"id": 7, "capacity": 10}],
    "paths": {"A": [1.0], "B": [-1.0]},
    "offers": [
        {"player": "P1", "path": "A", "ftr_type": "option", "price": 2.0, "quantity_max": 15.0},
        {"player": "P2", "path": "B", "ftr_type": "option", "price": 1.0, "quantity_max": 5.0},
    ],
}


@pytest.fixture
def instance():
    return copy.deepcopy(INSTANCE)


def test_clear_instance(instance):
    outcome = ftrbid.clear_instance(instance)
    assert outcome.awards == pytest.approx([10.0, 5.0])
    assert outcome.revenue == pytest.approx(25.0)
    assert outcome.instance.line_ids == (7,)
    assert outcome.instance.tie_break == ftrbid.SolverOptions().tie_break

    instance["tie_break"] = 0.0
    instance["offers"][1]["quantity_min"] = 2.0
    outcome = ftrbid.clear_instance(instance)
    assert outcome.instance.tie_break == 0.0
    assert outcome.instance.offers[1].quantity_min == 2.0


@pytest.mark.parametrize("change", [
    lambda doc: doc.pop("lines"),
    lambda doc: doc["offers"][0].update(ftr_type="swap"),
    lambda doc: doc["offers"][0].update(color="red"),
    lambda doc: doc["paths"].update(A=[1.0, 2.0]),
    lambda doc: doc["offers"][0].update(path="C"),
])
def test_clear_instance_invalid(instance, change):
    change(instance)
    with pytest.raises(SchemaError):
        ftrbid.clear_instance(instance)


def test_clear_instance_not_mapping():
    with pytest.raises(SchemaError):
        ftrbid.clear_instance(["lines"])


def test_run_writes(tmp_path):
    report = ftrbid.run("two_bus", output_directory=tmp_path, solver_overrides={"grid_resolution": 3, "solve_kkt": False})
    assert report.config.solver.grid_resolution == 3
    assert (tmp_path / "summary.json").exists()

    # Overrides also apply to loaded scenarios.
    config = ftrbid.load_scenario("two_bus")
    report = ftrbid.metrics(config, solver_overrides={"grid_resolution": 2, "seed": None})
    assert report.config.solver.grid_resolution == 2
    assert report.status == "metrics"


def test_load_decisions(tmp_path):
    report = ftrbid.run("two_bus", output_directory=tmp_path, solver_overrides={"grid_resolution": 3, "solve_kkt": False})
    profile = core.load_decisions(tmp_path / "summary.json")
    assert profile == report.equilibrium.profile()
    assert all(decision.award is None for decision in profile.values())

    summary = report.as_dict()
    assert core.load_decisions(summary, OBLIGATION) == report.obligation_state.profile()
    assert core.load_decisions(summary, OPTION) == report.option_state.profile()
    with pytest.raises(ConfigError):
        core.load_decisions(summary, "joint")
    with pytest.raises(ConfigError):
        core.load_decisions(tmp_path / "missing.json")


def test_verify(tmp_path):
    ftrbid.run("two_bus", output_directory=tmp_path, solver_overrides={"grid_resolution": 3, "solve_kkt": False})
    nash, report = ftrbid.verify("two_bus", tmp_path / "summary.json", grid_resolution=5)
    assert nash.certified
    assert nash.grid_resolution == 5
    assert report.status == "metrics"

    summary = report.as_dict()
    with pytest.raises(ConfigError):
        ftrbid.verify("two_bus", summary)


def test_verify_unknown_keys():
    report = ftrbid.run("two_bus", solver_overrides={"grid_resolution": 3, "solve_kkt": False})
    summary = report.as_dict()
    summary["equilibrium"]["decisions"][0]["decision"]["player"] = "P9"
    with pytest.raises(ConfigError, match="unknown player"):
        ftrbid.verify("two_bus", summary)


def test_schema():
    schema = ftrbid.schema()
    assert schema["type"] == "object"
    assert {"buses", "lines", "generators", "loads"} <= set(schema["required"])
