import copy

import pytest

from tracesim.core import RiskClass, TaskInstance


def small_scenario(**overrides):
    """Two-component binary scenario; keyword overrides patch the sub-domain."""
    sd = {
        "label": "unit",
        "task_types": {
            "check": {
                "alphabet": ["yes", "no"],
                "allow_label": "yes",
                "deny_label": "no",
                "veto_label": "no",
                "adequacy": {"min_accuracy": 0.7, "max_calibration_error": 0.1, "max_latency": 100},
            }
        },
        "ruleset": {
            "rules": [
                {"rule_id": "deny-hot", "priority": 2, "action": "deny", "guard": [{"field": "temp", "op": ">", "value": 0.9}]},
                {"rule_id": "allow-low", "priority": 1, "action": "allow", "guard": [{"field": "risk_class", "op": "=", "value": "low"}]},
            ]
        },
        "components": [
            {"component_id": "fast", "component_class": "L2a", "supported_task_types": ["check"],
             "cost": {"latency": 1.0}, "sim": {"accuracy": 0.8, "confidence_noise": 0.05}},
            {"component_id": "slow", "component_class": "L2b", "supported_task_types": ["check"],
             "cost": {"latency": 10.0}, "sim": {"accuracy": 0.9, "latency_ticks": 3}},
        ],
        "plans": {"check": {"steps": ["fast", "slow"]}},
        "trigger": {"risk_threshold": "high", "confidence_threshold": 0.8, "inconsistency_threshold": 0.5, "reinvocation_budget": 1},
        "adjudicator": {"competence": 0.9, "review_cost": {"latency": 50.0}, "veto_enabled": True, "latency_ticks": 5},
        "generator": {
            "risk_classes": {"low": 0.4, "medium": 0.3, "high": 0.3},
            "features": {"temp": {"uniform": [0.0, 1.0]}},
            "context": {"n_items": [1, 4], "relevant_prob": 0.5, "max_age": 10, "first_pass_items": 1, "horizon": 20},
        },
        "autonomy": {"window": 20},
        "perturbation": {"magnitude": 0.05, "replicas": 4, "every": 5},
    }
    sd.update(copy.deepcopy(overrides))
    return {"scenario_id": "unit", "seed": 7, "n_tasks": 40, "sub_domains": [sd]}


@pytest.fixture
def scenario():
    return small_scenario


def make_task(task_id="t0", risk="low", truth="yes", task_type="check", **features):
    return TaskInstance(task_id, task_type, features, RiskClass(risk), truth)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(mod.RESULTS, key=lambda s: int(s.split()[2].rstrip(":"))):
        terminalreporter.write_line(line)
