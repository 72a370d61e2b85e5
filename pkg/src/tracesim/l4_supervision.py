"""Bounded human supervision: a simulated adjudicator and the workload metrics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from tracesim.core import CostVector, TaskInstance, Verdict
from tracesim.errors import EmptyRun, NoGroundTruth, NotEscalated
from tracesim.l3_policy import PolicyDecision

REVIEW_ACTIONS = ("uphold", "override", "veto")


@dataclass(frozen=True)
class AdjudicatorModel:
    competence: float = 1.0
    review_cost: CostVector = field(default_factory=CostVector)
    veto_enabled: bool = False
    latency_ticks: int = 0

    def __post_init__(self):
        if not 0.0 <= self.competence <= 1.0:
            raise ValueError("competence must lie in [0, 1]")


@dataclass(frozen=True)
class EscalatedCase:
    task: TaskInstance
    verdict: Verdict
    decision: PolicyDecision
    alphabet: tuple[str, ...] = ()
    # ruling that blocks the action outright; overrides to it count as vetoes
    veto_label: str | None = None


@dataclass(frozen=True)
class ReviewOutcome:
    task_id: str
    action: str
    warranted: bool
    cost: CostVector = field(default_factory=CostVector)
    new_decision: str | None = None

    def __post_init__(self):
        if self.action not in REVIEW_ACTIONS:
            raise ValueError(f"unknown review action {self.action!r}")
        if self.action != "uphold" and self.new_decision is None:
            raise ValueError("override and veto carry the replacing decision")

    def final_decision(self, verdict: Verdict) -> str | None:
        return verdict.decision if self.action == "uphold" else self.new_decision


def adjudicate(model: AdjudicatorModel, case: EscalatedCase, rng: np.random.Generator) -> ReviewOutcome:
    """Rule on an escalated case.

    With probability ``competence`` the ruling matches ground truth; otherwise
    the reviewer makes the opposite call (upholding a wrong verdict, or
    overriding a right one with some other label).
    """
    if case.decision.kind != "escalate":
        raise NotEscalated(f"{case.task.task_id} reached L4 without an escalate decision")
    truth = case.task.ground_truth
    if truth is None:
        raise NoGroundTruth(case.task.task_id)
    u_rule, u_label = rng.random(2)
    competent = u_rule < model.competence
    pre = case.verdict.decision
    alphabet = case.alphabet or (truth,)
    wrong = [label for label in alphabet if label != truth]

    if pre == truth:
        if competent or not wrong:
            action, new = "uphold", None
        else:
            action, new = "override", wrong[int(u_label * len(wrong))]
    elif competent or pre is None:
        if competent or not wrong:
            action, new = "override", truth
        else:
            action, new = "override", wrong[int(u_label * len(wrong))]
    else:
        action, new = "uphold", None

    if action == "override" and model.veto_enabled and new is not None and new == case.veto_label:
        action = "veto"
    return ReviewOutcome(case.task.task_id, action, pre != truth, model.review_cost, new)


def review_burden_index(n_escalated: int, n_total: int) -> float:
    if n_total < 1:
        raise EmptyRun("review burden needs at least one task")
    if not 0 <= n_escalated <= n_total:
        raise ValueError("n_escalated must lie in [0, n_total]")
    return n_escalated / n_total


def override_rate(reviews: Sequence[ReviewOutcome]) -> float:
    """Share of reviews that replaced the AI decision; vetoes count as overrides."""
    if not reviews:
        return 0.0
    return sum(1 for r in reviews if r.action != "uphold") / len(reviews)


def escalation_snr(reviews: Iterable[ReviewOutcome]) -> float:
    reviews = list(reviews)
    warranted = sum(1 for r in reviews if r.warranted)
    return warranted / max(1, len(reviews) - warranted)
