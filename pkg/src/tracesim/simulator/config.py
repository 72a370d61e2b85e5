"""Declarative scenario configuration: JSON Schema plus cross-reference checks,
compiled into the typed objects each layer consumes."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Any, Mapping

import jsonschema

from tracesim.core import CostVector, digest
from tracesim.errors import ConfigInvalid, InvalidRuleSet
from tracesim.l1_rules import RuleSet
from tracesim.l2_inventory import ComponentDescriptor, FeatureThreshold, SimulatedComponentSpec
from tracesim.l3_policy import AutonomyThresholds, EscalationTriggerSpec, InvocationPlan
from tracesim.l4_supervision import AdjudicatorModel
from tracesim.metrics import DEFAULT_COST_WEIGHTS, DEFAULT_ORIENTATION, AdequacyRequirement

DEFAULT_N_TASKS = 1000
DEFAULT_TICK_LIMIT = 10**12


@lru_cache(maxsize=1)
def scenario_schema() -> dict:
    text = resources.files("tracesim.simulator").joinpath("schema.json").read_text(encoding="utf-8")
    return json.loads(text)


def _json_path(parts) -> str:
    out = "$"
    for p in parts:
        out += f"[{p}]" if isinstance(p, int) else f".{p}"
    return out


@dataclass(frozen=True)
class TaskTypeSpec:
    name: str
    alphabet: tuple[str, ...]
    weight: float = 1.0
    label_weights: Mapping[str, float] = field(default_factory=dict)
    allow_label: str | None = None
    deny_label: str | None = None
    veto_label: str | None = None
    adequacy: AdequacyRequirement = field(default_factory=AdequacyRequirement)


@dataclass(frozen=True)
class ContextSpec:
    n_items: tuple[int, int] = (0, 0)
    relevant_prob: float = 1.0
    max_age: int = 0
    first_pass_items: int = 2
    horizon: float = 100.0


@dataclass(frozen=True)
class GeneratorSpec:
    arrival_interval: int = 1
    risk_classes: Mapping[str, float] = field(default_factory=lambda: {"low": 1.0, "medium": 1.0, "high": 1.0})
    features: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)
    context: ContextSpec = field(default_factory=ContextSpec)


@dataclass(frozen=True)
class PerturbationSpec:
    magnitude: float = 0.05
    replicas: int = 8
    every: int = 0  # probe every k-th task; 0 disables probing


@dataclass(frozen=True)
class AutonomySpec:
    levels: Mapping[str, str] = field(default_factory=dict)
    default_level: str = "act_with_review"
    window: int = 100
    thresholds: AutonomyThresholds = field(default_factory=AutonomyThresholds)


@dataclass(frozen=True)
class SubDomainConfig:
    label: str
    task_types: Mapping[str, TaskTypeSpec]
    ruleset: RuleSet
    components: tuple[ComponentDescriptor, ...]
    plans: Mapping[str, InvocationPlan]
    trigger: EscalationTriggerSpec
    adjudicator: AdjudicatorModel
    generator: GeneratorSpec
    autonomy: AutonomySpec
    perturbation: PerturbationSpec
    n_tasks: int

    def component(self, component_id: str) -> ComponentDescriptor:
        for c in self.components:
            if c.component_id == component_id:
                return c
        raise KeyError(component_id)


@dataclass(frozen=True)
class CrossDomainPipeline:
    name: str
    stages: tuple[tuple[str, str], ...]
    n_instances: int = 0
    arrival_interval: int = 1
    handoff_feature: str = "upstream_decision"


@dataclass(frozen=True)
class ScenarioConfig:
    scenario_id: str
    seed: int
    tick_limit: int
    sub_domains: tuple[SubDomainConfig, ...]
    pipelines: tuple[CrossDomainPipeline, ...]
    metric_params: Mapping[str, Any]
    raw: Mapping[str, Any] = field(repr=False, compare=False, default_factory=dict)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ScenarioConfig:
        problems = validate(data)
        if problems:
            raise ConfigInvalid(problems)
        return _compile(copy.deepcopy(dict(data)))

    @classmethod
    def from_json(cls, text: str) -> ScenarioConfig:
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigInvalid([("$", f"not valid JSON: {exc}")]) from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return copy.deepcopy(dict(self.raw))

    def digest(self) -> str:
        return digest(self.to_dict())

    def sub_domain(self, label: str) -> SubDomainConfig:
        for sd in self.sub_domains:
            if sd.label == label:
                return sd
        raise KeyError(label)

    def with_overrides(self, *, seed: int | None = None, n_tasks: int | None = None, drop_sub_domains=()) -> ScenarioConfig:
        """Copy with the seed, per-stream task count, or sub-domain set changed.

        Dropping a sub-domain also drops every pipeline that touches it.
        """
        data = self.to_dict()
        if seed is not None:
            data["seed"] = int(seed)
        if n_tasks is not None:
            data["n_tasks"] = int(n_tasks)
            for sd in data["sub_domains"]:
                sd.pop("n_tasks", None)
            for p in data.get("pipelines", []):
                p["n_instances"] = min(p.get("n_instances", 0), int(n_tasks))
        if drop_sub_domains:
            drop = set(drop_sub_domains)
            data["sub_domains"] = [sd for sd in data["sub_domains"] if sd["label"] not in drop]
            data["pipelines"] = [
                p for p in data.get("pipelines", []) if not any(s["sub_domain"] in drop for s in p["stages"])
            ]
        return ScenarioConfig.from_dict(data)


def validate(data: Any) -> list[tuple[str, str]]:
    """Every violation as ``(json_path, message)``; empty when the config is valid."""
    validator = jsonschema.Draft202012Validator(scenario_schema())
    problems = [
        (_json_path(err.absolute_path), err.message)
        for err in sorted(validator.iter_errors(data), key=lambda e: [str(p) for p in e.absolute_path])
    ]
    if problems:
        return problems
    return _cross_references(data)


def _cross_references(data: Mapping[str, Any]) -> list[tuple[str, str]]:
    problems: list[tuple[str, str]] = []
    labels: dict[str, dict] = {}
    for i, sd in enumerate(data["sub_domains"]):
        base = f"$.sub_domains[{i}]"
        if sd["label"] in labels:
            problems.append((f"{base}.label", f"duplicate sub-domain label {sd['label']!r}"))
        labels[sd["label"]] = sd
        task_types = sd["task_types"]
        comps: dict[str, dict] = {}
        for j, c in enumerate(sd["components"]):
            cp = f"{base}.components[{j}]"
            if c["component_id"] in comps:
                problems.append((f"{cp}.component_id", f"duplicate component id {c['component_id']!r}"))
            comps[c["component_id"]] = c
            for k, tt in enumerate(c["supported_task_types"]):
                if tt not in task_types:
                    problems.append((f"{cp}.supported_task_types[{k}]", f"unknown task type {tt!r}"))
            if c["component_class"] == "L2a" and c.get("sim", {}).get("hallucination_rate", 0) != 0:
                problems.append((f"{cp}.sim.hallucination_rate", "L2a components cannot hallucinate"))
        for name, tt in task_types.items():
            tp = f"{base}.task_types.{name}"
            for key in ("allow_label", "deny_label", "veto_label"):
                if key in tt and tt[key] not in tt["alphabet"]:
                    problems.append((f"{tp}.{key}", f"{tt[key]!r} not in alphabet"))
            for lab in tt.get("label_weights", {}):
                if lab not in tt["alphabet"]:
                    problems.append((f"{tp}.label_weights.{lab}", "label not in alphabet"))
            if name not in sd["plans"]:
                problems.append((f"{base}.plans", f"no plan for task type {name!r}"))
        for name, plan in sd["plans"].items():
            pp = f"{base}.plans.{name}"
            if name not in task_types:
                problems.append((pp, f"plan for unknown task type {name!r}"))
                continue
            for k, cid in enumerate(plan["steps"]):
                if cid not in comps:
                    problems.append((f"{pp}.steps[{k}]", f"unknown component {cid!r}"))
                elif name not in comps[cid]["supported_task_types"]:
                    problems.append((f"{pp}.steps[{k}]", f"component {cid!r} does not support {name!r}"))
        for k, rule in enumerate(sd.get("ruleset", {}).get("rules", [])):
            act = rule["action"]
            if act.startswith("route(") and act[6:-1] not in comps:
                problems.append((f"{base}.ruleset.rules[{k}].action", f"route target {act[6:-1]!r} unknown"))
        for name in sd.get("autonomy", {}).get("levels", {}):
            if name not in task_types:
                problems.append((f"{base}.autonomy.levels.{name}", "unknown task type"))
        gen = sd.get("generator", {})
        for name, spec in gen.get("features", {}).items():
            if "uniform" in spec and spec["uniform"][0] > spec["uniform"][1]:
                problems.append((f"{base}.generator.features.{name}.uniform", "lower bound exceeds upper bound"))
        ctx = gen.get("context", {})
        if "n_items" in ctx and ctx["n_items"][0] > ctx["n_items"][1]:
            problems.append((f"{base}.generator.context.n_items", "lower bound exceeds upper bound"))
        if "risk_classes" in gen and sum(gen["risk_classes"].values()) <= 0:
            problems.append((f"{base}.generator.risk_classes", "weights must not all be zero"))
        if sum(tt.get("weight", 1.0) for tt in task_types.values()) <= 0:
            problems.append((f"{base}.task_types", "task-type weights must not all be zero"))
        try:
            RuleSet.from_dict(sd.get("ruleset"))
        except InvalidRuleSet as exc:
            problems.append((f"{base}.ruleset", str(exc)))
    names = set()
    for i, p in enumerate(data.get("pipelines", [])):
        base = f"$.pipelines[{i}]"
        if p["name"] in names:
            problems.append((f"{base}.name", f"duplicate pipeline name {p['name']!r}"))
        names.add(p["name"])
        for k, stage in enumerate(p["stages"]):
            sd = labels.get(stage["sub_domain"])
            if sd is None:
                problems.append((f"{base}.stages[{k}].sub_domain", f"unknown sub-domain {stage['sub_domain']!r}"))
            elif stage["task_type"] not in sd["task_types"]:
                problems.append((f"{base}.stages[{k}].task_type", f"unknown task type {stage['task_type']!r}"))
    return problems


def _compile(data: dict) -> ScenarioConfig:
    n_default = data.get("n_tasks", DEFAULT_N_TASKS)
    sub_domains = tuple(_compile_sub_domain(sd, n_default) for sd in data["sub_domains"])
    pipelines = tuple(
        CrossDomainPipeline(
            name=p["name"],
            stages=tuple((s["sub_domain"], s["task_type"]) for s in p["stages"]),
            n_instances=p.get("n_instances", 0),
            arrival_interval=p.get("arrival_interval", 1),
            handoff_feature=p.get("handoff_feature", "upstream_decision"),
        )
        for p in data.get("pipelines", [])
    )
    m = data.get("metrics", {})
    params = {
        "cost_weights": {**DEFAULT_COST_WEIGHTS, **m.get("cost_weights", {})},
        "ece_bins": m.get("ece_bins", 10),
        "orientation": m.get("orientation", dict(DEFAULT_ORIENTATION)),
        "composite_weights": m.get("composite_weights", {}),
        "stability": {
            "windows": m.get("stability", {}).get("windows", 4),
            "tolerances": m.get("stability", {}).get("tolerances", {}),
        },
    }
    return ScenarioConfig(
        scenario_id=data["scenario_id"],
        seed=int(data["seed"]),
        tick_limit=data.get("tick_limit", DEFAULT_TICK_LIMIT),
        sub_domains=sub_domains,
        pipelines=pipelines,
        metric_params=params,
        raw=data,
    )


def _compile_sub_domain(sd: Mapping[str, Any], n_default: int) -> SubDomainConfig:
    task_types = {}
    for name, tt in sd["task_types"].items():
        adequacy = tt.get("adequacy", {})
        task_types[name] = TaskTypeSpec(
            name=name,
            alphabet=tuple(tt["alphabet"]),
            weight=tt.get("weight", 1.0),
            label_weights=tt.get("label_weights", {}),
            allow_label=tt.get("allow_label"),
            deny_label=tt.get("deny_label"),
            veto_label=tt.get("veto_label"),
            adequacy=AdequacyRequirement(
                adequacy.get("min_accuracy", 0.0),
                adequacy.get("max_calibration_error", 1.0),
                adequacy.get("max_latency", math.inf),
            ),
        )
    components = tuple(
        ComponentDescriptor(
            component_id=c["component_id"],
            component_class=c["component_class"],
            supported_task_types=frozenset(c["supported_task_types"]),
            cost_per_invocation=CostVector.from_dict(c.get("cost")),
            sim=SimulatedComponentSpec(**c.get("sim", {})),
            decision_rule=FeatureThreshold(**c["decision_rule"]) if "decision_rule" in c else None,
        )
        for c in sd["components"]
    )
    plans = {
        name: InvocationPlan(
            task_type=name,
            steps=tuple(p["steps"]),
            ordering_mode=p.get("ordering_mode", "as_listed"),
            allow_label=task_types[name].allow_label,
            deny_label=task_types[name].deny_label,
        )
        for name, p in sd["plans"].items()
    }
    gen = sd.get("generator", {})
    ctx = gen.get("context", {})
    auto = sd.get("autonomy", {})
    return SubDomainConfig(
        label=sd["label"],
        task_types=task_types,
        ruleset=RuleSet.from_dict(sd.get("ruleset")),
        components=components,
        plans=plans,
        trigger=EscalationTriggerSpec(**sd.get("trigger", {})),
        adjudicator=AdjudicatorModel(
            competence=sd.get("adjudicator", {}).get("competence", 1.0),
            review_cost=CostVector.from_dict(sd.get("adjudicator", {}).get("review_cost")),
            veto_enabled=sd.get("adjudicator", {}).get("veto_enabled", False),
            latency_ticks=sd.get("adjudicator", {}).get("latency_ticks", 0),
        ),
        generator=GeneratorSpec(
            arrival_interval=gen.get("arrival_interval", 1),
            risk_classes=gen.get("risk_classes", {"low": 1.0, "medium": 1.0, "high": 1.0}),
            features=gen.get("features", {}),
            context=ContextSpec(
                n_items=tuple(ctx.get("n_items", (0, 0))),
                relevant_prob=ctx.get("relevant_prob", 1.0),
                max_age=ctx.get("max_age", 0),
                first_pass_items=ctx.get("first_pass_items", 2),
                horizon=ctx.get("horizon", 100.0),
            ),
        ),
        autonomy=AutonomySpec(
            levels=auto.get("levels", {}),
            default_level=auto.get("default_level", "act_with_review"),
            window=auto.get("window", 100),
            thresholds=AutonomyThresholds(
                max_override_rate=auto.get("max_override_rate", 0.05),
                max_calibration_error=auto.get("max_calibration_error", 0.05),
                min_escalation_precision=auto.get("min_escalation_precision", 0.8),
                window_minimum=auto.get("window", 100),
                demotion_factor=auto.get("demotion_factor", 2.0),
            ),
        ),
        perturbation=PerturbationSpec(**sd.get("perturbation", {})),
        n_tasks=sd.get("n_tasks", n_default),
    )
