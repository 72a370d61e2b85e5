"""Trust metric suite: cross-cutting metrics, parsimony ratio, weighted
uncertainty combination, and the trust report assembled from evidence logs.

Every log-derived metric is computed by :func:`log_metrics` from evidence
records alone, so an auditor holding the JSONL files reproduces the reported
values bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from tracesim.core import EVIDENCE_SCHEMA, CostVector, EvidenceTrail, record_is_complete
from tracesim.errors import (
    IncompleteRun,
    InadequateDeployment,
    NoAdequateComponent,
    SingleWindow,
    WeightMismatch,
)
from tracesim.l1_rules import RuleAction, consistency_from_matches
from tracesim.l2_inventory import ComponentDescriptor, expected_calibration_error, item_freshness
from tracesim.l3_policy import AUTONOMY_LEVELS, level_rank

# (name, layer, is_ratio)
METRIC_TABLE: tuple[tuple[str, str, bool], ...] = (
    ("rule_coverage_rate", "L1", True),
    ("rule_consistency_index", "L1", True),
    ("update_traceability_coefficient", "L1", True),
    ("context_relevance_precision", "L2", True),
    ("context_freshness_index", "L2", False),
    ("input_perturbation_stability_rate", "L2", True),
    ("escalation_precision", "L3", True),
    ("tier_cost_coefficient", "L3", False),
    ("false_positive_attenuation", "L3", True),
    ("review_burden_index", "L4", True),
    ("override_rate", "L4", True),
    ("signal_to_noise_ratio", "L4", False),
    ("evidence_trail_completeness", "cross", True),
    ("calibration_error", "cross", False),
    ("autonomy_boundary_compliance", "cross", True),
    ("operational_stability_index", "cross", False),
    ("computational_parsimony_ratio", "parsimony", False),
)
METRIC_NAMES = tuple(m[0] for m in METRIC_TABLE)
METRIC_LAYER = {m[0]: m[1] for m in METRIC_TABLE}
RATIO_METRICS = frozenset(m[0] for m in METRIC_TABLE if m[2])
# derived from configuration rather than per-task evidence
CONFIG_METRICS = frozenset({"update_traceability_coefficient", "computational_parsimony_ratio"})
LOG_METRICS = tuple(n for n in METRIC_NAMES if n not in CONFIG_METRICS)

DEFAULT_ORIENTATION = {
    "calibration_error": "complement",
    "review_burden_index": "complement",
    "override_rate": "complement",
    "tier_cost_coefficient": "reciprocal",
    "signal_to_noise_ratio": "saturate",
}
DEFAULT_COST_WEIGHTS = {"latency": 1.0, "compute": 1.0, "monetary": 1.0}


@dataclass(frozen=True)
class AdequacyRequirement:
    min_accuracy: float = 0.0
    max_calibration_error: float = 1.0
    max_latency: float = math.inf


@dataclass(frozen=True)
class MetricValue:
    name: str
    value: float | None
    std_uncertainty: float = 0.0
    n: int = 0
    layer: str = ""

    def __post_init__(self):
        if self.name not in METRIC_LAYER:
            raise ValueError(f"unknown metric {self.name!r}")
        if not self.layer:
            object.__setattr__(self, "layer", METRIC_LAYER[self.name])
        if self.std_uncertainty < 0:
            raise ValueError("std_uncertainty must be >= 0")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "value": self.value,
            "std_uncertainty": self.std_uncertainty,
            "n": self.n,
            "layer": self.layer,
        }


def binomial_uncertainty(value: float, n: int) -> float:
    if n <= 0:
        return 0.0
    return math.sqrt(max(0.0, value * (1.0 - value)) / n)


# --------------------------------------------------------------------------
# standalone metric operations


def cpr(
    deployed: ComponentDescriptor,
    inventory: Sequence[ComponentDescriptor],
    requirement: AdequacyRequirement,
    eval_results: Mapping[str, Mapping[str, float]],
    weights: Mapping[str, float] | None = None,
) -> float:
    """Cost of the cheapest adequate component over the cost of the deployed one."""

    def adequate(c: ComponentDescriptor) -> bool:
        r = eval_results[c.component_id]
        return (
            r["accuracy"] >= requirement.min_accuracy
            and r["ece"] <= requirement.max_calibration_error
            and r["latency"] <= requirement.max_latency
        )

    if not adequate(deployed):
        raise InadequateDeployment(f"{deployed.component_id} does not meet the requirement")
    pool = {c.component_id: c for c in inventory}
    pool.setdefault(deployed.component_id, deployed)
    adequate_costs = [c.cost().scalarize(weights) for c in pool.values() if adequate(c)]
    if not adequate_costs:
        raise NoAdequateComponent("no component meets the requirement")
    deployed_cost = deployed.cost().scalarize(weights)
    if deployed_cost == 0:
        return 1.0
    return min(adequate_costs) / deployed_cost


def nominal_eval(component: ComponentDescriptor) -> dict[str, float]:
    """Profile implied by a simulated component's configuration."""
    s = component.sim
    p = s.accuracy * (1.0 - s.hallucination_rate)
    conf = min(1.0, max(0.0, s.accuracy + s.miscalibration_shift))
    return {"accuracy": p, "ece": abs(conf - p), "latency": component.cost().latency}


def autonomy_boundary_compliance(actions: Iterable[Mapping[str, str] | tuple[str, str]]) -> float:
    total = ok = 0
    for a in actions:
        executed, granted = (a["executed_level"], a["granted_level"]) if isinstance(a, Mapping) else a
        total += 1
        ok += level_rank(executed) <= level_rank(granted)
    return 1.0 if total == 0 else ok / total


def operational_stability_index(
    series: Mapping[str, Sequence[float]], tolerances: Mapping[str, float]
) -> float:
    worst = 0.0
    for name, values in series.items():
        if len(values) < 2:
            raise SingleWindow(f"{name}: stability needs at least two windows")
        tau = tolerances[name]
        if tau <= 0:
            raise ValueError(f"tolerance for {name} must be > 0")
        worst = max(worst, max(abs(v - values[0]) for v in values) / tau)
    return 1.0 - min(1.0, worst)


def gum_combine(metrics: Sequence[MetricValue], weights: Sequence[float]) -> tuple[float, float]:
    """Weighted-sum composite with root-sum-square combined standard uncertainty."""
    if len(metrics) != len(weights):
        raise WeightMismatch(f"{len(metrics)} metrics vs {len(weights)} weights")
    if any(w < 0 for w in weights) or not math.isclose(sum(weights), 1.0, abs_tol=1e-9):
        raise WeightMismatch("weights must be nonnegative and sum to 1")
    composite = sum(w * m.value for w, m in zip(weights, metrics))
    u_c = math.sqrt(sum((w * m.std_uncertainty) ** 2 for w, m in zip(weights, metrics)))
    return composite, u_c


def orient(metric: MetricValue, mode: str | None) -> MetricValue:
    """Map a metric onto [0, 1], higher is better, propagating its uncertainty."""
    v, u = metric.value, metric.std_uncertainty
    if mode is None or mode == "identity":
        ov, ou = v, u
    elif mode == "complement":
        ov, ou = 1.0 - v, u
    elif mode == "reciprocal":
        ov, ou = (1.0 / v, u / v**2) if v > 0 else (0.0, 0.0)
    elif mode == "saturate":
        ov, ou = v / (1.0 + v), u / (1.0 + v) ** 2
    else:
        raise ValueError(f"unknown orientation {mode!r}")
    return MetricValue(metric.name, min(1.0, max(0.0, ov)), ou, metric.n, metric.layer)


# --------------------------------------------------------------------------
# evidence-log extraction


@dataclass
class _TaskLog:
    meta: Mapping[str, Any]
    records: list
    invocations: list = field(default_factory=list)
    rules: list = field(default_factory=list)
    escalations: list = field(default_factory=list)
    adjudications: list = field(default_factory=list)
    decisions: list = field(default_factory=list)
    finalizations: list = field(default_factory=list)


def _split(trails: Sequence[EvidenceTrail]):
    tasks: list[_TaskLog] = []
    autonomy: list = []
    for trail in trails:
        if not trail.records:
            continue
        head = trail.records[0]
        if head.event_kind == "policy_decision" and head.payload.get("decision_kind") == "ingest":
            t = _TaskLog(head.payload, list(trail.records))
            for rec in trail.records[1:]:
                kind, p = rec.event_kind, rec.payload
                if kind == "invocation":
                    t.invocations.append(p)
                elif kind == "rule_fired":
                    t.rules.append(p)
                elif kind == "escalation":
                    t.escalations.append(p)
                elif kind == "adjudication":
                    t.adjudications.append(p)
                elif kind == "policy_decision":
                    t.decisions.append(p)
                elif kind == "finalization":
                    t.finalizations.append(p)
            tasks.append(t)
        else:
            autonomy.extend(r.payload for r in trail.records if r.event_kind == "autonomy_change")
    tasks.sort(key=lambda t: (t.meta["created_at"], t.meta["task_id"]))
    return tasks, autonomy


def _granted_level(autonomy: Sequence[Mapping], sub_domain: str, task_type: str, tick: int) -> str:
    level = AUTONOMY_LEVELS[0]
    best = None
    for ev in autonomy:
        if ev.get("sub_domain") != sub_domain or ev["task_type"] != task_type:
            continue
        eff = ev.get("effective_from_tick", 0)
        if eff <= tick and (best is None or (eff, ev.get("order", 0)) >= best):
            best = (eff, ev.get("order", 0))
            level = ev["new_level"]
    return level


def _final(t: _TaskLog) -> Mapping | None:
    return t.finalizations[-1] if t.finalizations else None


def window_series(tasks: Sequence[_TaskLog], windows: int) -> dict[str, list[float]]:
    chunks = [c for c in np.array_split(np.arange(len(tasks)), windows) if len(c)]
    series: dict[str, list[float]] = {"first_pass_accuracy": [], "final_accuracy": [], "review_burden": []}
    for chunk in chunks:
        sub = [tasks[i] for i in chunk]
        fp = [t for t in sub if t.invocations]
        series["first_pass_accuracy"].append(
            sum(t.invocations[0]["decision"] == t.meta["ground_truth"] for t in fp) / len(fp) if fp else 1.0
        )
        fin = [t for t in sub if _final(t) is not None]
        series["final_accuracy"].append(
            sum(_final(t)["decision"] == t.meta["ground_truth"] for t in fin) / len(fin) if fin else 1.0
        )
        series["review_burden"].append(sum(1 for t in sub if t.escalations) / len(sub))
    return series


def log_metrics(trails: Sequence[EvidenceTrail], params: Mapping[str, Any]) -> dict[str, tuple[float, int]]:
    """``{name: (value, n)}`` for every metric derivable from evidence records."""
    tasks, autonomy = _split(trails)
    weights = params.get("cost_weights", DEFAULT_COST_WEIGHTS)
    out: dict[str, tuple[float, int]] = {}
    n_tasks = len(tasks)

    covered = sum(1 for t in tasks if t.rules)
    out["rule_coverage_rate"] = (covered / n_tasks if n_tasks else 1.0, n_tasks)
    matches = [[(r["rule_id"], RuleAction.parse(r["outcome"])) for r in t.rules] for t in tasks]
    pairs = {tuple(sorted((a[0], b[0]))) for m in matches for i, a in enumerate(m) for b in m[i + 1 :]}
    out["rule_consistency_index"] = (consistency_from_matches(matches), len(pairs))

    supplied = relevant = 0
    fresh: list[float] = []
    stable = probes = 0
    for t in tasks:
        horizon = t.meta["context_horizon"]
        for inv in t.invocations:
            ctx = inv["context"]
            supplied += ctx["supplied"]
            relevant += ctx["relevant"]
            fresh.extend(item_freshness(age, horizon) for age in ctx["ages"])
            if "perturbation" in inv:
                stable += inv["perturbation"]["stable"]
                probes += inv["perturbation"]["n"]
    out["context_relevance_precision"] = (relevant / supplied if supplied else 1.0, supplied)
    out["context_freshness_index"] = (sum(fresh) / len(fresh) if fresh else 1.0, len(fresh))
    out["input_perturbation_stability_rate"] = (stable / probes if probes else 1.0, probes)

    esc = [(e.get("pre_decision"), t.meta["ground_truth"]) for t in tasks for e in t.escalations]
    warranted = sum(1 for pre, gt in esc if pre != gt)
    out["escalation_precision"] = (warranted / len(esc) if esc else 1.0, len(esc))

    executed = minimal = 0.0
    costed = 0
    for t in tasks:
        if not t.invocations:
            continue
        costed += 1
        for inv in t.invocations:
            executed += CostVector.from_dict(inv["cost"]).scalarize(weights)
        minimal += CostVector.from_dict(t.meta["minimal_cost"]).scalarize(weights)
    out["tier_cost_coefficient"] = (executed / minimal if minimal > 0 else 1.0, costed)

    spurious = suppressed = 0
    for t in tasks:
        gt = t.meta["ground_truth"]
        cands = [(d["decision_kind"], d["reason"]) for d in t.decisions if isinstance(d["reason"], Mapping)]
        cands += [("escalate", e) for e in t.escalations]
        for kind, reason in cands:
            if "candidate" not in reason or reason["pre_decision"] != gt:
                continue
            spurious += 1
            suppressed += kind == "reinvoke" and not t.escalations
    out["false_positive_attenuation"] = (suppressed / spurious if spurious else 1.0, spurious)

    n_esc = sum(1 for t in tasks if t.escalations)
    out["review_burden_index"] = (n_esc / n_tasks if n_tasks else 0.0, n_tasks)
    reviews = [a for t in tasks for a in t.adjudications]
    overrides = sum(1 for a in reviews if a["outcome"] != "uphold")
    out["override_rate"] = (overrides / len(reviews) if reviews else 0.0, len(reviews))
    w = sum(1 for a in reviews if a["warranted"])
    out["signal_to_noise_ratio"] = (w / max(1, len(reviews) - w), len(reviews))

    records = [r for trail in trails for r in trail.records]
    complete = sum(record_is_complete(r, EVIDENCE_SCHEMA) for r in records)
    out["evidence_trail_completeness"] = (complete / len(records) if records else 1.0, len(records))

    pairs_ce = [(inv["confidence"], inv["decision"] == t.meta["ground_truth"]) for t in tasks for inv in t.invocations]
    bins = params.get("ece_bins", 10)
    out["calibration_error"] = (expected_calibration_error(pairs_ce, bins) if pairs_ce else 0.0, len(pairs_ce))

    actions = []
    for t in tasks:
        fin = _final(t)
        if fin is None:
            continue
        granted = _granted_level(autonomy, t.meta["sub_domain"], t.meta["task_type"], t.meta["created_at"])
        actions.append((fin["executed_level"], granted))
    out["autonomy_boundary_compliance"] = (autonomy_boundary_compliance(actions), len(actions))

    osi = params.get("stability", {})
    n_windows = min(int(osi.get("windows", 4)), n_tasks)
    if n_windows >= 2:
        series = window_series(tasks, n_windows)
        tol = osi.get("tolerances", {})
        value = operational_stability_index(series, {k: tol.get(k, 0.1) for k in series})
    else:
        value = 1.0
    out["operational_stability_index"] = (value, n_tasks)
    return out


def error_absorption_from_logs(trails: Sequence[EvidenceTrail]) -> tuple[float, int, int]:
    """``(absorption, absorbed, first_pass_errors)`` over tasks with a first-pass verdict."""
    tasks, _ = _split(trails)
    wrong = absorbed = 0
    for t in tasks:
        if not t.invocations or _final(t) is None:
            continue
        gt = t.meta["ground_truth"]
        if t.invocations[0]["decision"] != gt:
            wrong += 1
            absorbed += _final(t)["decision"] == gt
    return (absorbed / wrong if wrong else 1.0), absorbed, wrong


# --------------------------------------------------------------------------
# report


@dataclass(frozen=True)
class TrustReport:
    metrics: Mapping[str, MetricValue]
    composite_trust_score: float
    composite_uncertainty: float
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if set(self.metrics) != set(METRIC_NAMES) or len(self.metrics) != len(METRIC_NAMES):
            missing = sorted(set(METRIC_NAMES) - set(self.metrics))
            extra = sorted(set(self.metrics) - set(METRIC_NAMES))
            raise IncompleteRun(f"trust report needs all {len(METRIC_NAMES)} metrics; missing={missing} extra={extra}")

    def value(self, name: str) -> float | None:
        return self.metrics[name].value

    def to_dict(self) -> dict:
        return {
            "metadata": dict(self.metadata),
            "composite_trust_score": self.composite_trust_score,
            "composite_uncertainty": self.composite_uncertainty,
            "metrics": [self.metrics[n].to_dict() for n in METRIC_NAMES],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> TrustReport:
        metrics = {m["name"]: MetricValue(**m) for m in d["metrics"]}
        if len(metrics) != len(d["metrics"]):
            raise IncompleteRun("duplicate metric names in report")
        return cls(metrics, d["composite_trust_score"], d["composite_uncertainty"], d.get("metadata", {}))

    def to_markdown(self, title: str = "Trust report") -> str:
        lines = [
            f"### {title}",
            "",
            f"Composite trust score: {self.composite_trust_score:.4f} ± {self.composite_uncertainty:.4f}",
            "",
            "| layer | metric | value | std. uncertainty | n |",
            "|---|---|---|---|---|",
        ]
        for name in METRIC_NAMES:
            m = self.metrics[name]
            val = "undefined" if m.value is None else f"{m.value:.6f}"
            lines.append(f"| {m.layer} | {name} | {val} | {m.std_uncertainty:.6f} | {m.n} |")
        return "\n".join(lines) + "\n"


def _uncertainty(name: str, value: float | None, n: int, extra: Mapping[str, float]) -> float:
    if value is None:
        return 0.0
    if name in extra:
        return extra[name]
    if name in RATIO_METRICS:
        return binomial_uncertainty(value, n)
    return 0.0


def assemble_report(
    values: Mapping[str, tuple[float | None, int]],
    params: Mapping[str, Any],
    metadata: Mapping[str, Any] | None = None,
    extra_uncertainty: Mapping[str, float] | None = None,
) -> TrustReport:
    extra = extra_uncertainty or {}
    metrics = {
        name: MetricValue(name, v, _uncertainty(name, v, n, extra), n)
        for name, (v, n) in values.items()
    }
    if set(metrics) != set(METRIC_NAMES):
        missing = sorted(set(METRIC_NAMES) - set(metrics))
        raise IncompleteRun(f"cannot build report, missing metrics: {missing}")
    orientation = params.get("orientation", DEFAULT_ORIENTATION)
    raw_w = params.get("composite_weights") or {n: 1.0 for n in METRIC_NAMES}
    usable = [n for n in METRIC_NAMES if metrics[n].value is not None and raw_w.get(n, 0.0) > 0]
    total = sum(raw_w[n] for n in usable)
    if usable and total > 0:
        oriented = [orient(metrics[n], orientation.get(n)) for n in usable]
        composite, u_c = gum_combine(oriented, [raw_w[n] / total for n in usable])
    else:
        composite, u_c = 0.0, 0.0
    return TrustReport(metrics, composite, u_c, dict(metadata or {}))


def build_trust_report(
    trails: Sequence[EvidenceTrail],
    config_metrics: Mapping[str, tuple[float | None, int]],
    params: Mapping[str, Any],
    metadata: Mapping[str, Any] | None = None,
) -> TrustReport:
    """All 17 metrics: log-derived ones from ``trails``, the rest supplied."""
    values = dict(log_metrics(trails, params))
    values.update(config_metrics)
    fresh_u = _freshness_uncertainty(trails)
    return assemble_report(values, params, metadata, {"context_freshness_index": fresh_u})


def _freshness_uncertainty(trails: Sequence[EvidenceTrail]) -> float:
    tasks, _ = _split(trails)
    vals = [
        item_freshness(age, t.meta["context_horizon"])
        for t in tasks
        for inv in t.invocations
        for age in inv["context"]["ages"]
    ]
    if len(vals) < 2:
        return 0.0
    return float(np.std(vals, ddof=1) / math.sqrt(len(vals)))
