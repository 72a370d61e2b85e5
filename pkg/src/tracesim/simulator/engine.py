"""Scenario engine.

Each sub-domain runs its own L1-L4 stack; a master orchestrator schedules
stream tasks and cross-sub-domain pipeline stages in waves of independent
tasks. A task's behaviour depends only on ``(config, seed, task_id)`` so the
merged output is identical for any worker count.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np

from tracesim import __version__
from tracesim.core import (
    ContextItem,
    CostVector,
    EvidenceTrail,
    RiskClass,
    TaskInstance,
    Verdict,
    canonical_json,
    write_jsonl,
)
from tracesim.errors import InadequateDeployment, NoAdequateComponent, NoGroundTruth, TickLimitExceeded
from tracesim.l1_rules import evaluate_rules, traceable_updates
from tracesim.l2_inventory import (
    InvocationRequest,
    cheapest_supporting,
    expected_calibration_error,
    input_perturbation_stability,
    invoke,
)
from tracesim.l3_policy import (
    AutonomyLedger,
    PolicyState,
    close_after_review,
    observe,
    step,
    update_autonomy,
)
from tracesim.l4_supervision import EscalatedCase, adjudicate
from tracesim.metrics import (
    TrustReport,
    build_trust_report,
    cpr,
    error_absorption_from_logs,
    nominal_eval,
)
from tracesim.rng import stream
from tracesim.simulator.config import ScenarioConfig, SubDomainConfig

log = logging.getLogger(__name__)

AI_EXECUTED_LEVEL = "act_with_review"
HUMAN_EXECUTED_LEVEL = "advise_only"
RISK_ORDER = ("low", "medium", "high")


@dataclass(frozen=True)
class TaskResult:
    task_id: str
    sub_domain: str
    trail: EvidenceTrail
    ground_truth: str | None
    first_pass_decision: str | None
    final_decision: str | None
    escalated: bool
    created_at: int
    finalized_at: int


@dataclass
class RunResult:
    config: ScenarioConfig
    tasks: list[TaskResult]
    trails: dict[str, list[EvidenceTrail]]
    reports: dict[str, TrustReport]
    platform_report: TrustReport | None
    absorption: dict[str, Any]
    meta: dict[str, Any] = field(default_factory=dict)

    def report_document(self) -> dict:
        return {
            "scenario_id": self.config.scenario_id,
            "seed": self.config.seed,
            "parameters": self.config.metric_params,
            "platform": self.platform_report.to_dict() if self.platform_report else None,
            "sub_domains": {k: v.to_dict() for k, v in sorted(self.reports.items())},
            "absorption": self.absorption,
        }


# --------------------------------------------------------------------------
# task generation


def _categorical(u: float, weights: Mapping[str, float]) -> str:
    keys = list(weights)
    total = float(sum(weights[k] for k in keys))
    acc = 0.0
    for k in keys:
        acc += weights[k] / total
        if u < acc:
            return k
    return next(k for k in reversed(keys) if weights[k] > 0)


def generate_task(
    sd: SubDomainConfig,
    seed: int,
    task_id: str,
    created_at: int,
    task_type: str | None = None,
    extra_features: Mapping[str, Any] | None = None,
) -> TaskInstance:
    """Draw one task from the sub-domain's declarative generator."""
    rng = stream(seed, task_id, "generate")
    gen = sd.generator
    u_type, u_risk, u_truth = rng.random(3)
    if task_type is None:
        task_type = _categorical(u_type, {k: v.weight for k, v in sd.task_types.items()})
    tt = sd.task_types[task_type]
    risk = _categorical(u_risk, {r: gen.risk_classes.get(r, 0.0) for r in RISK_ORDER})
    label_w = tt.label_weights or {label: 1.0 for label in tt.alphabet}
    truth = _categorical(u_truth, {label: label_w.get(label, 0.0) for label in tt.alphabet})

    features: dict[str, Any] = {}
    for name in sorted(gen.features):
        spec = gen.features[name]
        u = rng.random()
        if "uniform" in spec:
            lo, hi = spec["uniform"]
            features[name] = lo + (hi - lo) * u
        else:
            features[name] = _categorical(u, spec["categorical"])
    if extra_features:
        features.update(extra_features)

    ctx = gen.context
    lo, hi = ctx.n_items
    n_items = int(rng.integers(lo, hi + 1)) if hi > 0 else 0
    items = []
    for j in range(n_items):
        age = int(rng.integers(0, ctx.max_age + 1))
        relevant = bool(rng.random() < ctx.relevant_prob)
        items.append(ContextItem(f"ctx{j}", j, created_at - age, relevant))
    items.sort(key=lambda it: (-it.stamped_at, it.key))
    return TaskInstance(
        task_id=task_id,
        task_type=task_type,
        features=features,
        risk_class=RiskClass(risk),
        ground_truth=truth,
        context_items=tuple(items),
        created_at=created_at,
        sub_domain=sd.label,
    )


# --------------------------------------------------------------------------
# per-task processing


def _context_log(items: Sequence[ContextItem], now: int) -> dict:
    return {
        "supplied": len(items),
        "relevant": sum(1 for it in items if it.relevant),
        "ages": [now - it.stamped_at for it in items],
    }


def process_task(sd: SubDomainConfig, weights: Mapping[str, float], seed: int, task: TaskInstance, probe: bool) -> TaskResult:
    """Drive one task through L1 -> L3/L2 -> (L4) and return its evidence trail."""
    if task.ground_truth is None:
        raise NoGroundTruth(task.task_id)
    tt = sd.task_types[task.task_type]
    capabilities = {c.component_id: c.capability for c in sd.components}
    plan = sd.plans[task.task_type].resolved(capabilities)
    trigger = sd.trigger
    minimal = cheapest_supporting(sd.components, task.task_type, weights).cost()

    trail = EvidenceTrail(task.task_id)
    trail = trail.append(
        "L3:policy",
        "policy_decision",
        {
            "decision_kind": "ingest",
            "reason": "task admitted",
            "task_id": task.task_id,
            "task_type": task.task_type,
            "sub_domain": task.sub_domain,
            "risk_class": task.risk_class.value,
            "ground_truth": task.ground_truth,
            "created_at": task.created_at,
            "features": dict(task.features),
            "context_horizon": sd.generator.context.horizon,
            "minimal_cost": minimal.to_dict(),
        },
    )

    outcome = evaluate_rules(sd.ruleset, task)
    conflicted = {rid for pair in outcome.conflicts for rid in pair}
    for rid, action in outcome.matched:
        trail = trail.append(
            "L1",
            "rule_fired",
            {
                "rule_id": rid,
                "rule_version": outcome.versions[rid],
                "outcome": str(action),
                "conflicted": rid in conflicted,
            },
        )

    base_ctx = task.context_items[: sd.generator.context.first_pass_items]
    state = PolicyState.initial(task, trigger)
    tick = task.created_at
    n_inv = 0
    first_pass = None
    while True:
        decision, state = step(plan, trigger, outcome, state)
        if decision.kind in ("invoke", "reinvoke"):
            n_inv += 1
            comp = sd.component(decision.component_id)
            supplied = task.context_items if decision.expanded_context else base_ctx
            request = InvocationRequest(task, supplied, n_inv, tt.alphabet, len(base_ctx))
            verdict = invoke(comp, request, stream(seed, task.task_id, "invoke", n_inv))
            payload = {
                "component_id": comp.component_id,
                "component_class": comp.component_class,
                "decision": verdict.decision,
                "confidence": verdict.confidence,
                "cost": verdict.cost.to_dict(),
                "attempt": n_inv,
                "expanded_context": request.expanded,
                "context": _context_log(supplied, tick),
            }
            if probe and n_inv == 1 and sd.perturbation.every > 0:
                numeric = [v for v in task.features.values() if isinstance(v, (int, float)) and not isinstance(v, bool)]
                if numeric:
                    p = sd.perturbation
                    rate = input_perturbation_stability(
                        comp, request, p.magnitude, p.replicas, stream(seed, task.task_id, "perturb", n_inv)
                    )
                    payload["perturbation"] = {"stable": round(rate * p.replicas), "n": p.replicas}
            trail = trail.append(
                "L3:policy",
                "policy_decision",
                {
                    "decision_kind": decision.kind,
                    "reason": dict(decision.reason),
                    "component_id": comp.component_id,
                    "expanded_context": decision.expanded_context,
                },
            )
            trail = trail.append(verdict.source, "invocation", payload)
            if first_pass is None:
                first_pass = verdict.decision
            state = observe(state, comp.component_id, verdict)
            tick += max(1, comp.sim.latency_ticks)
            continue

        if decision.kind == "escalate":
            pre = state.history[-1][1] if state.history else Verdict(None, 0.0, "L1")
            trail = trail.append(
                "L3:policy",
                "escalation",
                {
                    **dict(decision.reason),
                    "trigger": decision.trigger_reason,
                    "risk_class": state.risk_class.value,
                    "confidence": state.accumulated_confidence,
                    "pre_decision": pre.decision,
                },
            )
            case = EscalatedCase(task, pre, decision, tt.alphabet, tt.veto_label)
            review = adjudicate(sd.adjudicator, case, stream(seed, task.task_id, "adjudicate"))
            tick += max(1, sd.adjudicator.latency_ticks)
            trail = trail.append(
                "L4",
                "adjudication",
                {
                    "outcome": review.action,
                    "overridden_decision": pre.decision if review.action != "uphold" else None,
                    "new_decision": review.new_decision,
                    "warranted": review.warranted,
                    "cost": review.cost.to_dict(),
                },
            )
            state = close_after_review(state)
            final = review.final_decision(pre)
            trail = trail.append(
                "L4",
                "finalization",
                {
                    "decision": final,
                    "confidence": sd.adjudicator.competence,
                    "total_cost": (state.accumulated_cost + review.cost).to_dict(),
                    "tick": tick,
                    "decided_by": "L4",
                    "executed_level": HUMAN_EXECUTED_LEVEL,
                },
            )
            return TaskResult(task.task_id, sd.label, trail, task.ground_truth, first_pass, final, True, task.created_at, tick)

        # finalize
        verdict = decision.verdict
        trail = trail.append(
            "L3:policy",
            "policy_decision",
            {"decision_kind": "finalize", "reason": dict(decision.reason)},
        )
        trail = trail.append(
            "L3:policy",
            "finalization",
            {
                "decision": verdict.decision,
                "confidence": verdict.confidence,
                "total_cost": state.accumulated_cost.to_dict(),
                "tick": tick,
                "decided_by": "L3",
                "executed_level": AI_EXECUTED_LEVEL,
            },
        )
        return TaskResult(
            task.task_id, sd.label, trail, task.ground_truth, first_pass, verdict.decision, False, task.created_at, tick
        )


# --------------------------------------------------------------------------
# orchestration

_WORKER_CONFIG: ScenarioConfig | None = None


def _init_worker(config_dict: dict) -> None:
    global _WORKER_CONFIG
    _WORKER_CONFIG = ScenarioConfig.from_dict(config_dict)


def _work(job: tuple[str, TaskInstance, bool]) -> TaskResult:
    label, task, probe = job
    cfg = _WORKER_CONFIG
    return process_task(cfg.sub_domain(label), cfg.metric_params["cost_weights"], cfg.seed, task, probe)


def _run_wave(config: ScenarioConfig, jobs: list, pool: ProcessPoolExecutor | None, workers: int) -> list[TaskResult]:
    if pool is None:
        w = config.metric_params["cost_weights"]
        return [process_task(config.sub_domain(label), w, config.seed, task, probe) for label, task, probe in jobs]
    chunk = max(1, len(jobs) // (4 * workers))
    return list(pool.map(_work, jobs, chunksize=chunk))


def _probe(sd: SubDomainConfig, index: int) -> bool:
    every = sd.perturbation.every
    return every > 0 and index % every == 0


def run_scenario(config: ScenarioConfig, workers: int = 1) -> RunResult:
    """Execute every stream and pipeline of ``config``; deterministic for any ``workers``."""
    seed = config.seed
    jobs = []
    for sd in config.sub_domains:
        for i in range(sd.n_tasks):
            tid = f"{sd.label}-{i:06d}"
            task = generate_task(sd, seed, tid, i * sd.generator.arrival_interval)
            jobs.append((sd.label, task, _probe(sd, i)))

    pool = ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(config.to_dict(),)) if workers > 1 else None
    try:
        results = _run_wave(config, jobs, pool, workers)
        # pipeline stages: wave k holds stage k of every pipeline instance
        pending = []
        for p in config.pipelines:
            for k in range(p.n_instances):
                pending.append((p, k, None))
        stage = 0
        while pending:
            wave = []
            for p, k, prev in pending:
                label, ttype = p.stages[stage]
                sd = config.sub_domain(label)
                tid = f"{p.name}-{k:05d}-s{stage}"
                if prev is None:
                    created, extra = k * p.arrival_interval, None
                else:
                    created, extra = prev.finalized_at + 1, {p.handoff_feature: prev.final_decision}
                task = generate_task(sd, seed, tid, created, ttype, extra)
                wave.append(((label, task, _probe(sd, k)), p, k))
            done = _run_wave(config, [w[0] for w in wave], pool, workers)
            results.extend(done)
            stage += 1
            pending = [(p, k, r) for (_, p, k), r in zip(wave, done) if stage < len(p.stages)]
    finally:
        if pool is not None:
            pool.shutdown()

    for r in results:
        if r.finalized_at > config.tick_limit:
            raise TickLimitExceeded(f"{r.task_id} finalized at tick {r.finalized_at} > {config.tick_limit}")

    results.sort(key=lambda r: r.task_id)
    trails: dict[str, list[EvidenceTrail]] = {sd.label: [] for sd in config.sub_domains}
    for r in results:
        trails[r.sub_domain].append(r.trail)
    for sd in config.sub_domains:
        ledger = autonomy_ledger(sd, [r for r in results if r.sub_domain == sd.label], config.metric_params["ece_bins"])
        trails[sd.label].append(ledger.trail)

    params = config.metric_params
    reports = {}
    for sd in config.sub_domains:
        reports[sd.label] = build_trust_report(
            trails[sd.label],
            config_metrics([sd], params),
            params,
            {"scenario_id": config.scenario_id, "seed": seed, "scope": sd.label, **_tick_span(r for r in results if r.sub_domain == sd.label)},
        )
    all_trails = [t for sd in config.sub_domains for t in trails[sd.label]]
    platform = build_trust_report(
        all_trails,
        config_metrics(config.sub_domains, params),
        params,
        {"scenario_id": config.scenario_id, "seed": seed, "scope": "platform", **_tick_span(results)},
    )
    absorption = {}
    for label, scoped in [("platform", all_trails)] + [(sd.label, trails[sd.label]) for sd in config.sub_domains]:
        value, absorbed, wrong = error_absorption_from_logs(scoped)
        absorption[label] = {"error_absorption": value, "absorbed": absorbed, "first_pass_errors": wrong}
    meta = {
        "scenario_id": config.scenario_id,
        "config_digest": config.digest(),
        "seed": seed,
        "version": __version__,
        "n_tasks": len(results),
        **_tick_span(results),
    }
    return RunResult(config, results, trails, reports, platform, absorption, meta)


def _tick_span(results) -> dict:
    results = list(results)
    if not results:
        return {"tick_span": [0, 0]}
    return {"tick_span": [min(r.created_at for r in results), max(r.finalized_at for r in results)]}


def error_absorption(result: RunResult) -> float:
    """Share of first-pass errors corrected before finalization, platform-wide."""
    if any(t.ground_truth is None for t in result.tasks):
        raise NoGroundTruth("error absorption needs ground truth on every task")
    return result.absorption["platform"]["error_absorption"]


# --------------------------------------------------------------------------
# configuration-derived metrics and the autonomy ledger


def config_metrics(sub_domains: Sequence[SubDomainConfig], params: Mapping[str, Any]) -> dict[str, tuple[float | None, int]]:
    """Update traceability and parsimony ratio, pooled over ``sub_domains``."""
    n_updates = sum(len(sd.ruleset.update_log) for sd in sub_domains)
    ok = sum(traceable_updates(sd.ruleset) for sd in sub_domains)
    utc = ok / n_updates if n_updates else 1.0

    ratios = []
    for sd in sub_domains:
        ratios.extend(v for v in sub_domain_cpr(sd, params["cost_weights"]).values() if v is not None)
    cpr_value = sum(ratios) / len(ratios) if ratios else None
    return {
        "update_traceability_coefficient": (utc, n_updates),
        "computational_parsimony_ratio": (cpr_value, len(ratios)),
    }


def sub_domain_cpr(sd: SubDomainConfig, weights: Mapping[str, float]) -> dict[str, float | None]:
    """Parsimony ratio per task type, deploying each plan's first resolved step."""
    capabilities = {c.component_id: c.capability for c in sd.components}
    out: dict[str, float | None] = {}
    for name in sorted(sd.task_types):
        deployed = sd.component(sd.plans[name].resolved(capabilities).steps[0])
        inventory = [c for c in sd.components if name in c.supported_task_types]
        evals = {c.component_id: nominal_eval(c) for c in inventory}
        try:
            out[name] = cpr(deployed, inventory, sd.task_types[name].adequacy, evals, weights)
        except (InadequateDeployment, NoAdequateComponent):
            out[name] = None
    return out


def autonomy_ledger(sd: SubDomainConfig, results: Sequence[TaskResult], ece_bins: int) -> AutonomyLedger:
    """Replay the staged-autonomy ledger over finished tasks in canonical order.

    Levels changed by a window take effect for tasks created after the
    window's last task.
    """
    task_id = f"autonomy/{sd.label}"
    ledger = AutonomyLedger(default_level=sd.autonomy.default_level, trail=EvidenceTrail(task_id))
    order = 0
    levels = {}
    trail = ledger.trail
    for name in sorted(sd.task_types):
        level = sd.autonomy.levels.get(name, sd.autonomy.default_level)
        levels[name] = level
        trail = trail.append(
            "L3:autonomy",
            "autonomy_change",
            {
                "task_type": name,
                "old_level": "unassigned",
                "new_level": level,
                "justification": "initial grant from scenario configuration",
                "sub_domain": sd.label,
                "effective_from_tick": 0,
                "order": order,
                "task_id": task_id,
            },
        )
        order += 1
    ledger = AutonomyLedger(levels, {}, trail, sd.autonomy.default_level)

    window = sd.autonomy.window
    by_type: dict[str, list[TaskResult]] = {}
    for r in sorted(results, key=lambda r: (r.created_at, r.task_id)):
        by_type.setdefault(r.trail.records[0].payload["task_type"], []).append(r)
    for name in sorted(by_type):
        rows = by_type[name]
        for start in range(0, len(rows) - window + 1, window):
            chunk = rows[start : start + window]
            ledger = update_autonomy(
                ledger,
                name,
                _window_metrics(chunk, ece_bins),
                sd.autonomy.thresholds,
                sub_domain=sd.label,
                effective_from_tick=chunk[-1].created_at + 1,
                order=order,
                task_id=task_id,
            )
            order += 1
    return ledger


def _window_metrics(chunk: Sequence[TaskResult], ece_bins: int) -> dict[str, float]:
    escalations, reviews, pairs = [], [], []
    for r in chunk:
        for rec in r.trail.records:
            p = rec.payload
            if rec.event_kind == "escalation":
                escalations.append(p["pre_decision"] != r.ground_truth)
            elif rec.event_kind == "adjudication":
                reviews.append(p["outcome"] != "uphold")
            elif rec.event_kind == "invocation":
                pairs.append((p["confidence"], p["decision"] == r.ground_truth))
    return {
        "escalation_precision": sum(escalations) / len(escalations) if escalations else 1.0,
        "override_rate": sum(reviews) / len(reviews) if reviews else 0.0,
        "calibration_error": expected_calibration_error(pairs, ece_bins) if pairs else 0.0,
        "n_tasks": len(chunk),
    }


# --------------------------------------------------------------------------
# persistence


def write_outputs(result: RunResult, out_dir) -> Path:
    """Write evidence logs, reports and run metadata under ``out_dir``."""
    out = Path(out_dir)
    (out / "evidence").mkdir(parents=True, exist_ok=True)
    for label, trails in sorted(result.trails.items()):
        write_jsonl(trails, out / "evidence" / f"{label}.jsonl")
    _dump(out / "report.json", result.report_document())
    (out / "report.md").write_text(render_markdown(result.report_document()), encoding="utf-8")
    _dump(out / "run_meta.json", result.meta)
    _dump(out / "scenario.json", result.config.to_dict())
    return out


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n", encoding="utf-8")


def render_markdown(doc: Mapping[str, Any]) -> str:
    parts = [f"# Trust report: {doc['scenario_id']} (seed {doc['seed']})", ""]
    ab = doc.get("absorption", {}).get("platform")
    if ab:
        parts.append(
            f"Error absorption: {ab['error_absorption']:.4f} "
            f"({ab['absorbed']} of {ab['first_pass_errors']} first-pass errors corrected)"
        )
        parts.append("")
    if doc.get("platform"):
        parts.append(TrustReport.from_dict(doc["platform"]).to_markdown("Platform"))
    for label, rep in doc.get("sub_domains", {}).items():
        parts.append(TrustReport.from_dict(rep).to_markdown(f"Sub-domain: {label}"))
    return "\n".join(parts)


def canonical_report_bytes(result: RunResult) -> bytes:
    return canonical_json(result.report_document()).encode("utf-8")
