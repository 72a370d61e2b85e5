"""Deterministic rule core: conjunctive guards, priority resolution, and the
coverage / consistency / update-traceability analyses."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from itertools import combinations
from typing import Any, Iterable, Mapping, Sequence

from tracesim.core import ZERO_DIGEST, RiskClass, TaskInstance, digest
from tracesim.errors import EmptyCorpus, InvalidRuleSet

OPERATORS = ("=", "!=", "<", "<=", ">", ">=", "in")
ACTION_KINDS = ("allow", "deny", "mandate_escalation", "route")


@dataclass(frozen=True)
class Condition:
    """``field op value``; field is ``risk_class``, ``task_type``, ``sub_domain`` or a feature name."""

    field: str
    op: str
    value: Any

    def __post_init__(self):
        if self.op not in OPERATORS:
            raise InvalidRuleSet(f"unknown operator {self.op!r}")
        if self.op == "in":
            object.__setattr__(self, "value", tuple(self.value))

    def holds(self, task: TaskInstance) -> bool:
        if self.field == "risk_class":
            lhs: Any = task.risk_class.rank
            try:
                rhs: Any = (
                    tuple(RiskClass(v).rank for v in self.value)
                    if self.op == "in"
                    else RiskClass(self.value).rank
                )
            except ValueError:
                return False
        else:
            if self.field == "task_type":
                lhs = task.task_type
            elif self.field == "sub_domain":
                lhs = task.sub_domain
            elif self.field in task.features:
                lhs = task.features[self.field]
            else:
                return False
            rhs = self.value
        try:
            if self.op == "=":
                return lhs == rhs
            if self.op == "!=":
                return lhs != rhs
            if self.op == "in":
                return lhs in rhs
            if self.op == "<":
                return lhs < rhs
            if self.op == "<=":
                return lhs <= rhs
            if self.op == ">":
                return lhs > rhs
            return lhs >= rhs
        except TypeError:
            # incomparable types never match; guards stay total
            return False

    def to_dict(self) -> dict:
        value = list(self.value) if self.op == "in" else self.value
        return {"field": self.field, "op": self.op, "value": value}


@dataclass(frozen=True)
class RuleAction:
    kind: str
    target: str | None = None

    def __post_init__(self):
        if self.kind not in ACTION_KINDS:
            raise InvalidRuleSet(f"unknown action {self.kind!r}")
        if (self.kind == "route") != (self.target is not None):
            raise InvalidRuleSet("route actions, and only route actions, carry a target")

    def __str__(self) -> str:
        return f"route({self.target})" if self.kind == "route" else self.kind

    @classmethod
    def parse(cls, spec: str | Mapping) -> RuleAction:
        if isinstance(spec, Mapping):
            return cls(spec["kind"], spec.get("target"))
        if spec.startswith("route(") and spec.endswith(")"):
            return cls("route", spec[6:-1])
        return cls(spec)


def conflicting(a: RuleAction, b: RuleAction) -> bool:
    if {a.kind, b.kind} == {"allow", "deny"}:
        return True
    return a.kind == b.kind == "route" and a.target != b.target


@dataclass(frozen=True)
class Rule:
    rule_id: str
    action: RuleAction
    guard: tuple[Condition, ...] = ()
    version: int = 1
    priority: int = 0

    def __post_init__(self):
        object.__setattr__(self, "guard", tuple(self.guard))
        if self.version < 1:
            raise InvalidRuleSet(f"{self.rule_id}: version must be >= 1")

    def matches(self, task: TaskInstance) -> bool:
        return all(c.holds(task) for c in self.guard)

    def canonical(self) -> dict:
        return {
            "rule_id": self.rule_id,
            "version": self.version,
            "priority": self.priority,
            "action": str(self.action),
            "guard": [c.to_dict() for c in self.guard],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> Rule:
        return cls(
            rule_id=d["rule_id"],
            action=RuleAction.parse(d["action"]),
            guard=tuple(Condition(c["field"], c["op"], c["value"]) for c in d.get("guard", ())),
            version=int(d.get("version", 1)),
            priority=int(d.get("priority", 0)),
        )


def rule_digest(rule: Rule) -> str:
    return digest(rule.canonical())


@dataclass(frozen=True)
class RuleUpdate:
    rule_id: str
    new_version: int
    author: str
    timestamp: int
    rationale: str
    prior_version_hash: str = ZERO_DIGEST

    def to_dict(self) -> dict:
        return {
            "rule_id": self.rule_id,
            "new_version": self.new_version,
            "author": self.author,
            "timestamp": self.timestamp,
            "rationale": self.rationale,
            "prior_version_hash": self.prior_version_hash,
        }


@dataclass(frozen=True)
class RuleSet:
    """Active rules plus the update log.

    ``retired`` keeps superseded rule versions so that an update's
    ``prior_version_hash`` can be checked against the rule it replaced.
    """

    rules: tuple[Rule, ...] = ()
    update_log: tuple[RuleUpdate, ...] = ()
    retired: tuple[Rule, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "rules", tuple(self.rules))
        object.__setattr__(self, "update_log", tuple(self.update_log))
        object.__setattr__(self, "retired", tuple(self.retired))
        seen = set()
        for r in self.rules + self.retired:
            if (r.rule_id, r.version) in seen:
                raise InvalidRuleSet(f"duplicate rule version {r.rule_id} v{r.version}")
            seen.add((r.rule_id, r.version))
        active = [r.rule_id for r in self.rules]
        if len(active) != len(set(active)):
            raise InvalidRuleSet("more than one active version for a rule_id")

    def versions(self, rule_id: str) -> list[Rule]:
        return sorted((r for r in self.rules + self.retired if r.rule_id == rule_id), key=lambda r: r.version)

    def to_dict(self) -> dict:
        return {
            "rules": [r.canonical() for r in self.rules],
            "retired": [r.canonical() for r in self.retired],
            "update_log": [u.to_dict() for u in self.update_log],
        }

    @classmethod
    def from_dict(cls, d: Mapping | None) -> RuleSet:
        d = d or {}
        return cls(
            rules=tuple(Rule.from_dict(r) for r in d.get("rules", ())),
            retired=tuple(Rule.from_dict(r) for r in d.get("retired", ())),
            update_log=tuple(RuleUpdate(**u) for u in d.get("update_log", ())),
        )


def apply_update(ruleset: RuleSet, rule: Rule, author: str, timestamp: int, rationale: str) -> RuleSet:
    """Install ``rule`` as the active version of its id and log the change."""
    prior = ruleset.versions(rule.rule_id)
    if prior and rule.version <= prior[-1].version:
        raise InvalidRuleSet(f"{rule.rule_id}: version {rule.version} does not supersede v{prior[-1].version}")
    active = [r for r in ruleset.rules if r.rule_id == rule.rule_id]
    prior_hash = rule_digest(active[0]) if active else ZERO_DIGEST
    update = RuleUpdate(rule.rule_id, rule.version, author, timestamp, rationale, prior_hash)
    return replace(
        ruleset,
        rules=tuple(r for r in ruleset.rules if r.rule_id != rule.rule_id) + (rule,),
        retired=ruleset.retired + tuple(active),
        update_log=ruleset.update_log + (update,),
    )


@dataclass(frozen=True)
class RuleOutcome:
    matched: tuple[tuple[str, RuleAction], ...] = ()
    mandated_action: RuleAction | None = None
    conflicts: tuple[tuple[str, str], ...] = ()
    versions: Mapping[str, int] = field(default_factory=dict)

    @property
    def mandates_escalation(self) -> bool:
        return self.mandated_action is not None and self.mandated_action.kind == "mandate_escalation"


def _precedence(rule: Rule):
    return (-rule.priority, rule.rule_id)


def evaluate_rules(ruleset: RuleSet, task: TaskInstance) -> RuleOutcome:
    hits = sorted((r for r in ruleset.rules if r.matches(task)), key=_precedence)
    conflicts = sorted(
        tuple(sorted((a.rule_id, b.rule_id)))
        for a, b in combinations(hits, 2)
        if conflicting(a.action, b.action)
    )
    return RuleOutcome(
        matched=tuple((r.rule_id, r.action) for r in hits),
        mandated_action=hits[0].action if hits else None,
        conflicts=tuple(conflicts),
        versions={r.rule_id: r.version for r in hits},
    )


def rule_coverage_rate(ruleset: RuleSet, corpus: Sequence[TaskInstance]) -> float:
    if not corpus:
        raise EmptyCorpus("rule coverage needs at least one task")
    covered = sum(1 for t in corpus if any(r.matches(t) for r in ruleset.rules))
    return covered / len(corpus)


def consistency_from_matches(matches: Iterable[Iterable[tuple[str, RuleAction]]]) -> float:
    """Consistency index from per-task lists of matched ``(rule_id, action)``."""
    co_matched: set[tuple[str, str]] = set()
    conflicted: set[tuple[str, str]] = set()
    for matched in matches:
        for (ra, aa), (rb, ab) in combinations(sorted(matched, key=lambda m: m[0]), 2):
            pair = (ra, rb)
            co_matched.add(pair)
            if conflicting(aa, ab):
                conflicted.add(pair)
    if not co_matched:
        return 1.0
    return 1.0 - len(conflicted) / len(co_matched)


def rule_consistency_index(ruleset: RuleSet, corpus: Sequence[TaskInstance]) -> float:
    if not corpus:
        raise EmptyCorpus("rule consistency needs at least one task")
    return consistency_from_matches(
        [(r.rule_id, r.action) for r in ruleset.rules if r.matches(t)] for t in corpus
    )


def _update_is_traceable(ruleset: RuleSet, upd: RuleUpdate) -> bool:
    if not upd.author or upd.timestamp is None or not str(upd.rationale).strip():
        return False
    earlier = [r for r in ruleset.versions(upd.rule_id) if r.version < upd.new_version]
    expected = rule_digest(earlier[-1]) if earlier else ZERO_DIGEST
    return upd.prior_version_hash == expected


def traceable_updates(ruleset: RuleSet) -> int:
    return sum(_update_is_traceable(ruleset, u) for u in ruleset.update_log)


def update_traceability_coefficient(ruleset: RuleSet) -> float:
    if not ruleset.update_log:
        return 1.0
    return traceable_updates(ruleset) / len(ruleset.update_log)
