import numpy as np
import pytest

from conftest import make_task
from tracesim.core import CostVector, Verdict
from tracesim.errors import EmptyRun, NotEscalated
from tracesim.l3_policy import PolicyDecision
from tracesim.l4_supervision import (
    AdjudicatorModel,
    EscalatedCase,
    ReviewOutcome,
    adjudicate,
    escalation_snr,
    override_rate,
    review_burden_index,
)

ESC = PolicyDecision("escalate", trigger_reason="inconsistency")
ALPHABET = ("yes", "no", "maybe")


def case(pre, truth="yes", decision=ESC, veto_label=None):
    return EscalatedCase(make_task(truth=truth), Verdict(pre, 0.9, "L2a:m"), decision, ALPHABET, veto_label)


def test_competent_reviewer_overrides_wrong_verdict():
    out = adjudicate(AdjudicatorModel(1.0, CostVector(30.0)), case("no"), np.random.default_rng(0))
    assert out.action == "override" and out.new_decision == "yes" and out.warranted
    assert out.cost == CostVector(30.0)


def test_competent_reviewer_upholds_correct_verdict():
    out = adjudicate(AdjudicatorModel(1.0), case("yes"), np.random.default_rng(0))
    assert out.action == "uphold" and not out.warranted
    assert out.final_decision(Verdict("yes", 0.9, "x")) == "yes"


def test_override_fraction_matches_competence():
    model = AdjudicatorModel(0.9)
    rng = np.random.default_rng(99)
    n = 10_000
    hits = sum(adjudicate(model, case("no"), rng).new_decision == "yes" for _ in range(n))
    assert abs(hits / n - 0.9) <= 0.01


def test_incompetent_reviewer_overturns_correct_verdict():
    out = adjudicate(AdjudicatorModel(0.0), case("yes"), np.random.default_rng(3))
    assert out.action == "override" and out.new_decision in ("no", "maybe")


def test_l1_mandated_case_without_verdict():
    out = adjudicate(AdjudicatorModel(1.0), case(None), np.random.default_rng(0))
    assert out.action == "override" and out.new_decision == "yes" and out.warranted


def test_veto():
    model = AdjudicatorModel(1.0, veto_enabled=True)
    out = adjudicate(model, case("yes", truth="no", veto_label="no"), np.random.default_rng(0))
    assert out.action == "veto" and out.new_decision == "no"
    plain = adjudicate(AdjudicatorModel(1.0), case("yes", truth="no", veto_label="no"), np.random.default_rng(0))
    assert plain.action == "override"


def test_requires_escalation():
    with pytest.raises(NotEscalated):
        adjudicate(AdjudicatorModel(), case("yes", decision=PolicyDecision("finalize")), np.random.default_rng(0))


def test_review_burden_examples():
    assert review_burden_index(0, 10) == 0.0
    assert review_burden_index(10, 10) == 1.0
    assert review_burden_index(15, 200) == 0.075
    with pytest.raises(EmptyRun):
        review_burden_index(0, 0)


def r(action, warranted=False):
    return ReviewOutcome("t", action, warranted, new_decision=None if action == "uphold" else "x")


def test_override_rate_examples():
    assert override_rate([r("uphold")] * 3) == 0.0
    assert override_rate([r("override")] * 3) == 1.0
    assert override_rate([r("override"), r("veto")] + [r("uphold")] * 6) == 0.25
    assert override_rate([]) == 0.0


def test_snr_examples():
    assert escalation_snr([r("override", True)] * 10) == 10.0
    assert escalation_snr([r("uphold")] * 4) == 0.0
    assert escalation_snr([r("override", True)] * 6 + [r("uphold")] * 3) == 2.0


def test_override_needs_decision():
    with pytest.raises(ValueError):
        ReviewOutcome("t", "override", True)
