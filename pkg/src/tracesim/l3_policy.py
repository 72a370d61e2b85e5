"""Stateful orchestration-and-escalation policy.

``step`` is a pure transition function over :class:`PolicyState`; the caller
executes the returned decision (invoking a component, handing the case to
L4, or finalizing) and feeds component verdicts back through ``observe``.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence

from tracesim.core import CostVector, EvidenceTrail, RiskClass, TaskInstance, Verdict
from tracesim.errors import InsufficientWindow, PhaseViolation, TooFewVerdicts, ZeroMinimalCost
from tracesim.l1_rules import RuleOutcome

ORDERING_MODES = ("as_listed", "descending_capability", "ascending_capability")
TRIGGER_REASONS = ("joint_risk_confidence", "inconsistency", "budget_exhausted", "l1_mandated")
AUTONOMY_LEVELS = ("advise_only", "act_with_review", "act_autonomously")


class Phase(str, Enum):
    INGESTING = "ingesting"
    INFERRING = "inferring"
    ESCALATED = "escalated"
    FINALIZED = "finalized"


@dataclass(frozen=True)
class InvocationPlan:
    task_type: str
    steps: tuple[str, ...]
    ordering_mode: str = "as_listed"
    # decision labels an L1 allow / deny corresponds to, for contradiction checks
    allow_label: str | None = None
    deny_label: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "steps", tuple(self.steps))
        if not self.steps:
            raise ValueError(f"plan for {self.task_type!r} has no steps")
        if self.ordering_mode not in ORDERING_MODES:
            raise ValueError(f"unknown ordering_mode {self.ordering_mode!r}")

    def resolved(self, capabilities: Mapping[str, float]) -> InvocationPlan:
        """Concrete invocation order; capability sorts are stable in listed order."""
        if self.ordering_mode == "as_listed":
            return self
        sign = -1.0 if self.ordering_mode == "descending_capability" else 1.0
        steps = sorted(self.steps, key=lambda c: sign * capabilities[c])
        return replace(self, steps=tuple(steps), ordering_mode="as_listed")

    def l1_label(self, action_kind: str) -> str | None:
        return {"allow": self.allow_label, "deny": self.deny_label}.get(action_kind)


@dataclass(frozen=True)
class EscalationTriggerSpec:
    risk_threshold: RiskClass = RiskClass.HIGH
    confidence_threshold: float = 0.9
    inconsistency_threshold: float = 0.5
    reinvocation_budget: int = 1

    def __post_init__(self):
        object.__setattr__(self, "risk_threshold", RiskClass(self.risk_threshold))
        for name in ("confidence_threshold", "inconsistency_threshold"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.reinvocation_budget < 0:
            raise ValueError("reinvocation_budget must be >= 0")


@dataclass(frozen=True)
class PolicyState:
    task_id: str
    risk_class: RiskClass
    budget_remaining: int
    history: tuple[tuple[str, Verdict], ...] = ()
    accumulated_confidence: float = 0.0
    accumulated_cost: CostVector = field(default_factory=CostVector)
    phase: Phase = Phase.INGESTING
    next_step: int = 0

    @classmethod
    def initial(cls, task: TaskInstance, trigger: EscalationTriggerSpec) -> PolicyState:
        return cls(task.task_id, task.risk_class, trigger.reinvocation_budget)

    @property
    def verdicts(self) -> list[Verdict]:
        return [v for _, v in self.history]


@dataclass(frozen=True)
class PolicyDecision:
    kind: str  # invoke | reinvoke | escalate | finalize
    component_id: str | None = None
    expanded_context: bool = False
    trigger_reason: str | None = None
    verdict: Verdict | None = None
    reason: Mapping[str, Any] = field(default_factory=dict)


def noisy_or_confidence(history: Sequence[Verdict]) -> float:
    """1 - prod(1 - c) over the trailing run of verdicts agreeing with the latest."""
    if not history:
        return 0.0
    latest = history[-1].decision
    miss = 1.0
    for v in reversed(history):
        if v.decision != latest:
            break
        miss *= 1.0 - v.confidence
    return 1.0 - miss


def observe(state: PolicyState, component_id: str, verdict: Verdict) -> PolicyState:
    history = state.history + ((component_id, verdict),)
    return replace(
        state,
        history=history,
        accumulated_confidence=noisy_or_confidence([v for _, v in history]),
        accumulated_cost=state.accumulated_cost + verdict.cost,
    )


def detect_inconsistency(verdicts: Sequence[Verdict]) -> float:
    if len(verdicts) < 2:
        raise TooFewVerdicts("inconsistency needs at least two verdicts")
    modal = Counter(v.decision for v in verdicts).most_common(1)[0][1]
    return 1.0 - modal / len(verdicts)


def _unique_mode(verdicts: Sequence[Verdict]) -> str | None:
    counts = Counter(v.decision for v in verdicts).most_common()
    if len(counts) > 1 and counts[0][1] == counts[1][1]:
        return None
    return counts[0][0]


def _alternative(plan: InvocationPlan, state: PolicyState) -> str:
    latest = state.history[-1][0]
    for cid in plan.steps:
        if cid != latest:
            return cid
    return latest


def step(
    plan: InvocationPlan,
    trigger: EscalationTriggerSpec,
    l1_outcome: RuleOutcome,
    state: PolicyState,
) -> tuple[PolicyDecision, PolicyState]:
    if state.phase not in (Phase.INGESTING, Phase.INFERRING):
        raise PhaseViolation(f"{state.task_id}: step called in phase {state.phase.value}")

    def escalate(reason_code: str, **reason) -> tuple[PolicyDecision, PolicyState]:
        reason = {
            "risk_class": state.risk_class.value,
            "risk_threshold": trigger.risk_threshold.value,
            "accumulated_confidence": state.accumulated_confidence,
            "confidence_threshold": trigger.confidence_threshold,
            "budget_remaining": state.budget_remaining,
            **reason,
        }
        return (
            PolicyDecision("escalate", trigger_reason=reason_code, reason=reason),
            replace(state, phase=Phase.ESCALATED),
        )

    def invoke_next(**reason) -> tuple[PolicyDecision, PolicyState]:
        cid = plan.steps[state.next_step]
        return (
            PolicyDecision("invoke", component_id=cid, reason={"plan_step": state.next_step, **reason}),
            replace(state, phase=Phase.INFERRING, next_step=state.next_step + 1),
        )

    def reinvoke(**reason) -> tuple[PolicyDecision, PolicyState]:
        if state.next_step < len(plan.steps):
            cid, nxt = plan.steps[state.next_step], state.next_step + 1
        else:
            cid, nxt = _alternative(plan, state), state.next_step
        return (
            PolicyDecision("reinvoke", component_id=cid, expanded_context=True, reason=reason),
            replace(state, phase=Phase.INFERRING, next_step=nxt, budget_remaining=state.budget_remaining - 1),
        )

    # (1) rule precedence
    if l1_outcome.mandates_escalation:
        rule_id = l1_outcome.matched[0][0]
        return escalate("l1_mandated", rule_id=rule_id)

    # (2) first pass, honouring an L1 route when the target serves this plan
    if not state.history:
        act = l1_outcome.mandated_action
        if act is not None and act.kind == "route" and act.target in plan.steps:
            cid = act.target
            return (
                PolicyDecision("invoke", component_id=cid, reason={"routed_by": l1_outcome.matched[0][0]}),
                replace(state, phase=Phase.INFERRING, next_step=state.next_step + (plan.steps[state.next_step] == cid)),
            )
        return invoke_next()

    verdicts = state.verdicts
    latest = verdicts[-1]
    acc = state.accumulated_confidence
    disagree = any(v.decision != latest.decision for v in verdicts[:-1])
    score = detect_inconsistency(verdicts) if len(verdicts) >= 2 else 0.0

    # (3) inconsistency between components
    if disagree and score >= trigger.inconsistency_threshold:
        candidate = {
            "candidate": "inconsistency",
            "pre_decision": latest.decision,
            "inconsistency": score,
            "accumulated_confidence": acc,
        }
        if state.budget_remaining > 0:
            return reinvoke(**candidate)
        code = "budget_exhausted" if trigger.reinvocation_budget > 0 else "inconsistency"
        return escalate(code, **candidate)

    # (4) joint risk and confidence, with a contradiction witness
    l1_act = l1_outcome.mandated_action
    l1_label = plan.l1_label(l1_act.kind) if l1_act is not None else None
    l1_contradiction = l1_label is not None and latest.decision != l1_label
    if (
        state.risk_class.at_least(trigger.risk_threshold)
        and acc >= trigger.confidence_threshold
        and (disagree or l1_contradiction)
    ):
        return escalate(
            "joint_risk_confidence",
            contradicts="l1" if l1_contradiction else "verdict",
            pre_decision=latest.decision,
        )

    # (5) confident and settled
    if acc >= trigger.confidence_threshold and (not disagree or _unique_mode(verdicts) == latest.decision):
        final = Verdict(latest.decision, acc, "L3", state.accumulated_cost)
        return (
            PolicyDecision("finalize", verdict=final, reason={"accumulated_confidence": acc}),
            replace(state, phase=Phase.FINALIZED),
        )

    # (6) keep going along the plan, then spend budget, then hand off
    if state.next_step < len(plan.steps):
        return invoke_next(accumulated_confidence=acc)
    if state.budget_remaining > 0:
        return reinvoke(
            candidate="borderline_confidence",
            pre_decision=latest.decision,
            inconsistency=score,
            accumulated_confidence=acc,
        )
    return escalate("budget_exhausted", pre_decision=latest.decision)


def close_after_review(state: PolicyState) -> PolicyState:
    if state.phase is not Phase.ESCALATED:
        raise PhaseViolation(f"{state.task_id}: only escalated tasks close through review")
    return replace(state, phase=Phase.FINALIZED)


# --------------------------------------------------------------------------
# policy metrics


def tier_cost_coefficient(
    executed_path_cost: CostVector,
    minimal_path_cost: CostVector,
    weights: Mapping[str, float] | None = None,
) -> float:
    minimal = minimal_path_cost.scalarize(weights)
    if minimal <= 0:
        raise ZeroMinimalCost("minimal path cost scalarizes to zero")
    return executed_path_cost.scalarize(weights) / minimal


def _label(v) -> Any:
    return v.decision if isinstance(v, Verdict) else v


def escalation_precision(escalations: Iterable[tuple[Any, Any]]) -> float:
    """Share of hand-offs whose pre-escalation verdict was wrong (1.0 when none)."""
    escalations = list(escalations)
    if not escalations:
        return 1.0
    warranted = sum(1 for pre, truth in escalations if _label(pre) != truth)
    return warranted / len(escalations)


@dataclass(frozen=True)
class EscalationCandidate:
    was_spurious: bool
    suppressed_by_reinvocation: bool


def false_positive_attenuation(candidates: Iterable[EscalationCandidate | Mapping]) -> float:
    spurious = suppressed = 0
    for c in candidates:
        if isinstance(c, Mapping):
            c = EscalationCandidate(bool(c["was_spurious"]), bool(c["suppressed_by_reinvocation"]))
        if c.was_spurious:
            spurious += 1
            suppressed += c.suppressed_by_reinvocation
    return 1.0 if spurious == 0 else suppressed / spurious


# --------------------------------------------------------------------------
# staged autonomy


@dataclass(frozen=True)
class AutonomyThresholds:
    max_override_rate: float = 0.05
    max_calibration_error: float = 0.05
    min_escalation_precision: float = 0.8
    window_minimum: int = 100
    demotion_factor: float = 2.0


@dataclass(frozen=True)
class AutonomyLedger:
    levels: Mapping[str, str] = field(default_factory=dict)
    supporting_window: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    trail: EvidenceTrail = field(default_factory=lambda: EvidenceTrail("autonomy"))
    default_level: str = "advise_only"

    def level(self, task_type: str) -> str:
        return self.levels.get(task_type, self.default_level)


def level_rank(level: str) -> int:
    return AUTONOMY_LEVELS.index(level)


def update_autonomy(
    ledger: AutonomyLedger,
    task_type: str,
    window_metrics: Mapping[str, float],
    thresholds: AutonomyThresholds = AutonomyThresholds(),
    **event_extra,
) -> AutonomyLedger:
    """Promote one level when the window clears every bar; demote one level when
    any bar is missed by the demotion factor; otherwise keep the level."""
    n = window_metrics["n_tasks"]
    if n < thresholds.window_minimum:
        raise InsufficientWindow(f"{task_type}: window of {n} < {thresholds.window_minimum}")
    ep = window_metrics["escalation_precision"]
    orr = window_metrics["override_rate"]
    ece = window_metrics["calibration_error"]
    t, k = thresholds, thresholds.demotion_factor

    old = ledger.level(task_type)
    rank = level_rank(old)
    if orr < t.max_override_rate and ece < t.max_calibration_error and ep > t.min_escalation_precision:
        rank, why = min(rank + 1, len(AUTONOMY_LEVELS) - 1), "promotion predicate satisfied over window"
    elif (
        orr >= k * t.max_override_rate
        or ece >= k * t.max_calibration_error
        or (1.0 - ep) >= k * (1.0 - t.min_escalation_precision)
    ):
        rank, why = max(rank - 1, 0), "window metric missed its bar by the demotion factor"
    else:
        why = ""
    new = AUTONOMY_LEVELS[rank]
    window = {key: window_metrics[key] for key in ("escalation_precision", "override_rate", "calibration_error", "n_tasks")}
    ledger = replace(ledger, supporting_window={**ledger.supporting_window, task_type: window})
    if new == old:
        return ledger
    trail = ledger.trail.append(
        "L3:autonomy",
        "autonomy_change",
        {
            "task_type": task_type,
            "old_level": old,
            "new_level": new,
            "justification": {"rule": why, **window},
            **event_extra,
        },
    )
    return replace(ledger, levels={**ledger.levels, task_type: new}, trail=trail)
