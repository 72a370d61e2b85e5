"""Domain types shared by all layers and the hash-chained evidence trail."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Mapping, Sequence

from tracesim.errors import ChainCorrupt, UnknownEventKind

ZERO_DIGEST = "0" * 64


class RiskClass(str, Enum):
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"

    @property
    def rank(self) -> int:
        return _RISK_RANK[self.value]

    def at_least(self, other: RiskClass | str) -> bool:
        return self.rank >= RiskClass(other).rank


_RISK_RANK = {"low": 0, "medium": 1, "high": 2}


class EventKind(str, Enum):
    RULE_FIRED = "rule_fired"
    INVOCATION = "invocation"
    POLICY_DECISION = "policy_decision"
    ESCALATION = "escalation"
    ADJUDICATION = "adjudication"
    FINALIZATION = "finalization"
    AUTONOMY_CHANGE = "autonomy_change"


# Required payload fields per event kind; a trailing "?" marks an optional field.
EVIDENCE_SCHEMA: dict[str, tuple[str, ...]] = {
    "rule_fired": ("rule_id", "rule_version", "outcome"),
    "invocation": ("component_id", "component_class", "decision", "confidence", "cost"),
    "policy_decision": ("decision_kind", "reason"),
    "escalation": ("trigger", "risk_class", "confidence"),
    "adjudication": ("outcome", "overridden_decision?"),
    "finalization": ("decision", "confidence", "total_cost"),
    "autonomy_change": ("task_type", "old_level", "new_level", "justification"),
}


@dataclass(frozen=True)
class CostVector:
    latency: float = 0.0
    compute: float = 0.0
    monetary: float = 0.0

    def __post_init__(self):
        if min(self.latency, self.compute, self.monetary) < 0:
            raise ValueError(f"cost components must be nonnegative: {self}")

    def __add__(self, other: CostVector) -> CostVector:
        return CostVector(
            self.latency + other.latency,
            self.compute + other.compute,
            self.monetary + other.monetary,
        )

    def scale(self, k: float) -> CostVector:
        return CostVector(self.latency * k, self.compute * k, self.monetary * k)

    def scalarize(self, weights: Mapping[str, float] | None = None) -> float:
        w = weights or {"latency": 1.0, "compute": 1.0, "monetary": 1.0}
        return (
            w.get("latency", 0.0) * self.latency
            + w.get("compute", 0.0) * self.compute
            + w.get("monetary", 0.0) * self.monetary
        )

    def to_dict(self) -> dict[str, float]:
        return {"latency": self.latency, "compute": self.compute, "monetary": self.monetary}

    @classmethod
    def from_dict(cls, d: Mapping[str, float] | None) -> CostVector:
        d = d or {}
        return cls(
            float(d.get("latency", 0.0)),
            float(d.get("compute", 0.0)),
            float(d.get("monetary", 0.0)),
        )


@dataclass(frozen=True)
class ContextItem:
    key: str
    value: Any
    stamped_at: int
    relevant: bool | None = None


@dataclass(frozen=True)
class TaskInstance:
    task_id: str
    task_type: str
    features: Mapping[str, Any]
    risk_class: RiskClass
    ground_truth: str | None = None
    context_items: tuple[ContextItem, ...] = ()
    created_at: int = 0
    sub_domain: str = "default"

    def __post_init__(self):
        object.__setattr__(self, "risk_class", RiskClass(self.risk_class))
        object.__setattr__(self, "context_items", tuple(self.context_items))

    def with_features(self, **updates) -> TaskInstance:
        return replace(self, features={**self.features, **updates})


@dataclass(frozen=True)
class Verdict:
    """A decision with confidence and provenance.

    ``decision`` is ``None`` only for the provisional verdict attached to an
    L1-mandated escalation, where no learned component was consulted.
    """

    decision: str | None
    confidence: float
    source: str
    cost: CostVector = field(default_factory=CostVector)

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence out of [0, 1]: {self.confidence}")


# --------------------------------------------------------------------------
# evidence trail


def canonical_json(obj: Any) -> str:
    """Sorted-key, compact, UTF-8 friendly JSON used for hashing and persistence."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


def digest(obj: Any) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


def _record_digest(seq: int, actor: str, event_kind: str, payload: Mapping, prev_hash: str) -> str:
    return digest(
        {
            "seq": seq,
            "actor": actor,
            "event_kind": event_kind,
            "payload": payload,
            "prev_hash": prev_hash,
        }
    )


@dataclass(frozen=True)
class EvidenceRecord:
    seq: int
    actor: str
    event_kind: str
    payload: Mapping[str, Any]
    prev_hash: str
    this_hash: str

    def recompute_hash(self) -> str:
        return _record_digest(self.seq, self.actor, self.event_kind, self.payload, self.prev_hash)

    def to_dict(self) -> dict[str, Any]:
        return {
            "seq": self.seq,
            "actor": self.actor,
            "event_kind": self.event_kind,
            "payload": self.payload,
            "prev_hash": self.prev_hash,
            "this_hash": self.this_hash,
        }

    def to_line(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> EvidenceRecord:
        return cls(
            seq=d["seq"],
            actor=d["actor"],
            event_kind=d["event_kind"],
            payload=d["payload"],
            prev_hash=d["prev_hash"],
            this_hash=d["this_hash"],
        )


@dataclass(frozen=True)
class EvidenceTrail:
    task_id: str
    records: tuple[EvidenceRecord, ...] = ()

    def __len__(self) -> int:
        return len(self.records)

    def append(self, actor: str, event_kind: str | EventKind, payload: Mapping[str, Any]) -> EvidenceTrail:
        return append_evidence(self, actor, event_kind, payload)

    def of_kind(self, kind: str | EventKind) -> list[EvidenceRecord]:
        kind = EventKind(kind).value
        return [r for r in self.records if r.event_kind == kind]


def _chain_problem(records: Sequence[EvidenceRecord]) -> str | None:
    prev = ZERO_DIGEST
    for i, rec in enumerate(records):
        if type(rec.seq) is not int or rec.seq != i:
            return f"seq gap at position {i}"
        if rec.prev_hash != prev:
            return f"prev_hash mismatch at seq {i}"
        try:
            recomputed = rec.recompute_hash()
        except (TypeError, ValueError):
            return f"unserializable record at seq {i}"
        if rec.this_hash != recomputed:
            return f"digest mismatch at seq {i}"
        prev = rec.this_hash
    return None


def append_evidence(
    trail: EvidenceTrail, actor: str, event_kind: str | EventKind, payload: Mapping[str, Any]
) -> EvidenceTrail:
    """Return a new trail with one record appended; ``trail`` is left untouched."""
    problem = _chain_problem(trail.records)
    if problem is not None:
        raise ChainCorrupt(f"trail {trail.task_id}: {problem}")
    kind = EventKind(event_kind).value
    # detach from caller-owned containers so later mutation cannot alter the record
    payload = json.loads(canonical_json(dict(payload)))
    seq = len(trail.records)
    prev = trail.records[-1].this_hash if trail.records else ZERO_DIGEST
    rec = EvidenceRecord(seq, actor, kind, payload, prev, _record_digest(seq, actor, kind, payload, prev))
    return EvidenceTrail(trail.task_id, trail.records + (rec,))


def verify_trail(trail: EvidenceTrail) -> bool:
    return _chain_problem(trail.records) is None


def _nonempty(value: Any) -> bool:
    if value is None:
        return False
    if isinstance(value, (str, list, dict, tuple)) and len(value) == 0:
        return False
    return True


def trail_completeness(
    trail: EvidenceTrail, schema: Mapping[str, Sequence[str]] = EVIDENCE_SCHEMA
) -> float:
    """Fraction of records carrying every required payload field, non-empty."""
    if not trail.records:
        return 1.0
    complete = 0
    for rec in trail.records:
        complete += record_is_complete(rec, schema)
    return complete / len(trail.records)


def record_is_complete(rec: EvidenceRecord, schema: Mapping[str, Sequence[str]] = EVIDENCE_SCHEMA) -> bool:
    if rec.event_kind not in schema:
        raise UnknownEventKind(rec.event_kind)
    for name in schema[rec.event_kind]:
        if name.endswith("?"):
            continue
        if name not in rec.payload or not _nonempty(rec.payload[name]):
            return False
    return True


def write_jsonl(trails: Sequence[EvidenceTrail], path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for trail in trails:
            for rec in trail.records:
                fh.write(rec.to_line())
                fh.write("\n")


def read_jsonl(path) -> list[EvidenceTrail]:
    """Parse a JSONL evidence log into trails.

    A record with ``seq == 0`` opens a new trail. Lines that do not parse, are
    not in canonical form, or lack record fields raise :class:`ChainCorrupt`.
    Trail ids come from the opening record's payload when present.
    """
    trails: list[list[EvidenceRecord]] = []
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw and not raw.endswith(b"\n"):
        raise ChainCorrupt(f"{path}: missing trailing newline")
    for lineno, line in enumerate(raw.split(b"\n")[:-1] if raw else [], start=1):
        try:
            text = line.decode("utf-8")
            obj = json.loads(text)
            rec = EvidenceRecord.from_dict(obj)
        except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
            raise ChainCorrupt(f"{path}:{lineno}: unreadable record ({exc})") from exc
        if not isinstance(obj, dict) or set(obj) != {"seq", "actor", "event_kind", "payload", "prev_hash", "this_hash"}:
            raise ChainCorrupt(f"{path}:{lineno}: unexpected record fields")
        try:
            canonical = rec.to_line()
        except (TypeError, ValueError) as exc:
            raise ChainCorrupt(f"{path}:{lineno}: unserializable record") from exc
        if canonical != text:
            raise ChainCorrupt(f"{path}:{lineno}: record is not in canonical form")
        if rec.seq == 0 or not trails:
            trails.append([])
        trails[-1].append(rec)
    out = []
    for recs in trails:
        first = recs[0].payload if isinstance(recs[0].payload, dict) else {}
        task_id = str(first.get("task_id", f"trail-{len(out)}"))
        out.append(EvidenceTrail(task_id, tuple(recs)))
    return out
