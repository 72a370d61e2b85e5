"""Stateless learned-component inventory (L2a classical / L2b generative) with
simulated behaviour and per-component quality measures."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from numbers import Real
from typing import Iterable, Mapping, Sequence

import numpy as np

from tracesim.core import ContextItem, CostVector, TaskInstance, Verdict
from tracesim.errors import (
    EmptyInput,
    MissingRelevanceLabels,
    NoGroundTruth,
    NoNumericFeatures,
    NonPositiveHorizon,
    UnsupportedTaskType,
)

COMPONENT_CLASSES = ("L2a", "L2b")


@dataclass(frozen=True)
class SimulatedComponentSpec:
    accuracy: float = 1.0
    confidence_noise: float = 0.0
    miscalibration_shift: float = 0.0
    hallucination_rate: float = 0.0
    latency_ticks: int = 0
    context_gain: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 1.0:
            raise ValueError("accuracy must lie in [0, 1]")
        if self.confidence_noise < 0:
            raise ValueError("confidence_noise must be >= 0")
        if not -1.0 <= self.miscalibration_shift <= 1.0:
            raise ValueError("miscalibration_shift must lie in [-1, 1]")
        if not 0.0 <= self.hallucination_rate <= 1.0:
            raise ValueError("hallucination_rate must lie in [0, 1]")
        if self.latency_ticks < 0:
            raise ValueError("latency_ticks must be >= 0")
        if not 0.0 < self.context_gain <= 1.0:
            raise ValueError("context_gain must lie in (0, 1]")


@dataclass(frozen=True)
class FeatureThreshold:
    """Deterministic stump: ``above`` when ``features[feature] >= threshold``."""

    feature: str
    threshold: float
    above: str
    below: str
    confidence: float = 1.0


@dataclass(frozen=True)
class ComponentDescriptor:
    component_id: str
    component_class: str
    supported_task_types: frozenset[str]
    cost_per_invocation: CostVector = field(default_factory=CostVector)
    sim: SimulatedComponentSpec = field(default_factory=SimulatedComponentSpec)
    decision_rule: FeatureThreshold | None = None

    def __post_init__(self):
        if self.component_class not in COMPONENT_CLASSES:
            raise ValueError(f"component_class must be one of {COMPONENT_CLASSES}")
        object.__setattr__(self, "supported_task_types", frozenset(self.supported_task_types))
        if not self.supported_task_types:
            raise ValueError(f"{self.component_id}: supported_task_types is empty")
        if self.component_class == "L2a" and self.sim.hallucination_rate != 0:
            raise ValueError(f"{self.component_id}: L2a components cannot hallucinate")

    @property
    def capability(self) -> float:
        return self.sim.accuracy

    @property
    def source(self) -> str:
        return f"{self.component_class}:{self.component_id}"

    def cost(self) -> CostVector:
        c = self.cost_per_invocation
        return replace(c, latency=c.latency + self.sim.latency_ticks)


@dataclass(frozen=True)
class InvocationRequest:
    task: TaskInstance
    supplied_context: tuple[ContextItem, ...] = ()
    attempt: int = 1
    alphabet: tuple[str, ...] = ()
    prior_context_size: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "supplied_context", tuple(self.supplied_context))
        object.__setattr__(self, "alphabet", tuple(self.alphabet))
        if self.attempt < 1:
            raise ValueError("attempt is 1-based")
        if any(item not in self.task.context_items for item in self.supplied_context):
            raise ValueError("supplied context must come from the task's context items")

    @property
    def expanded(self) -> bool:
        """Re-invocation carrying strictly more context than the first pass."""
        return (
            self.attempt > 1
            and self.prior_context_size is not None
            and len(self.supplied_context) > self.prior_context_size
        )


def invoke(component: ComponentDescriptor, request: InvocationRequest, rng: np.random.Generator) -> Verdict:
    task = request.task
    if task.task_type not in component.supported_task_types:
        raise UnsupportedTaskType(f"{component.component_id} does not handle {task.task_type!r}")
    if component.decision_rule is not None:
        rule = component.decision_rule
        value = task.features.get(rule.feature)
        decision = rule.above if value is not None and value >= rule.threshold else rule.below
        return Verdict(decision, rule.confidence, component.source, component.cost())

    spec = component.sim
    # fixed draw count keeps the stream position independent of the branch taken
    u_correct, u_wrong, u_hall, u_hall_label, u_hall_conf = rng.random(5)
    z = rng.standard_normal()

    truth = task.ground_truth
    if truth is None:
        raise NoGroundTruth(f"simulated component needs ground truth for {task.task_id}")
    alphabet = request.alphabet or (truth,)
    wrong = [label for label in alphabet if label != truth]

    error = 1.0 - spec.accuracy
    if request.expanded:
        error *= spec.context_gain
    p_correct = 1.0 - error

    if u_correct < p_correct or not wrong:
        decision = truth
    else:
        decision = wrong[int(u_wrong * len(wrong))]
    confidence = min(1.0, max(0.0, p_correct + spec.miscalibration_shift + spec.confidence_noise * z))

    if component.component_class == "L2b" and wrong and u_hall < spec.hallucination_rate:
        decision = wrong[int(u_hall_label * len(wrong))]
        confidence = 0.9 + 0.1 * u_hall_conf
    return Verdict(decision, float(confidence), component.source, component.cost())


def _numeric(value) -> bool:
    return isinstance(value, Real) and not isinstance(value, bool)


def input_perturbation_stability(
    component: ComponentDescriptor,
    request: InvocationRequest,
    perturbation_magnitude: float,
    n: int,
    rng: np.random.Generator,
) -> float:
    """Fraction of jittered replicas whose decision matches the unperturbed one.

    All calls share one decision-noise seed so only the feature jitter differs.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    names = sorted(k for k, v in request.task.features.items() if _numeric(v))
    if not names:
        raise NoNumericFeatures(request.task.task_id)
    decision_seed = int(rng.integers(2**63))
    base = invoke(component, request, np.random.default_rng(decision_seed)).decision
    jitter = rng.uniform(-perturbation_magnitude, perturbation_magnitude, size=(n, len(names)))
    stable = 0
    for row in jitter:
        task = request.task.with_features(**{k: request.task.features[k] + float(d) for k, d in zip(names, row)})
        req = replace(request, task=task)
        if invoke(component, req, np.random.default_rng(decision_seed)).decision == base:
            stable += 1
    return stable / n


def calibration_bins(confidences: np.ndarray, bins: int) -> np.ndarray:
    """Right-closed equal-width bin index for each confidence; 0 lands in bin 0."""
    # k / bins is correctly rounded, so a confidence equal to an edge stays in the lower bin
    edges = np.arange(bins + 1) / bins
    idx = np.searchsorted(edges, confidences, side="left") - 1
    return np.clip(idx, 0, bins - 1)


def expected_calibration_error(pairs: Iterable[tuple[float, bool]], bins: int = 10) -> float:
    pairs = list(pairs)
    if not pairs:
        raise EmptyInput("ECE needs at least one (confidence, correct) pair")
    if bins < 1:
        raise ValueError("bins must be >= 1")
    conf = np.array([p[0] for p in pairs], dtype=float)
    correct = np.array([bool(p[1]) for p in pairs], dtype=float)
    idx = calibration_bins(conf, bins)
    counts = np.bincount(idx, minlength=bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    acc_sum = np.bincount(idx, weights=correct, minlength=bins)
    ece = 0.0
    for b in range(bins):
        if counts[b]:
            ece += counts[b] / len(pairs) * abs(acc_sum[b] / counts[b] - conf_sum[b] / counts[b])
    return float(ece)


def item_freshness(age: float, horizon: float) -> float:
    return max(0.0, 1.0 - age / horizon)


def context_freshness_index(items: Sequence[ContextItem], now: int, horizon: float) -> float:
    if horizon <= 0:
        raise NonPositiveHorizon(f"horizon must be > 0, got {horizon}")
    if not items:
        return 1.0
    for it in items:
        if it.stamped_at > now:
            raise ValueError(f"context item {it.key!r} stamped in the future")
    return sum(item_freshness(now - it.stamped_at, horizon) for it in items) / len(items)


def context_relevance_precision(supplied: Sequence[ContextItem]) -> float:
    if not supplied:
        return 1.0
    if any(it.relevant is None for it in supplied):
        raise MissingRelevanceLabels("every supplied item needs a relevance label")
    return sum(1 for it in supplied if it.relevant) / len(supplied)


def cheapest_supporting(
    inventory: Sequence[ComponentDescriptor], task_type: str, weights: Mapping[str, float] | None = None
) -> ComponentDescriptor:
    candidates = [c for c in inventory if task_type in c.supported_task_types]
    if not candidates:
        raise UnsupportedTaskType(f"no component handles {task_type!r}")
    return min(candidates, key=lambda c: (c.cost().scalarize(weights), c.component_id))
