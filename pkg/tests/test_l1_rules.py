from itertools import combinations

import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from conftest import make_task
from tracesim.core import ZERO_DIGEST
from tracesim.errors import EmptyCorpus, InvalidRuleSet
from tracesim.l1_rules import (
    Condition,
    Rule,
    RuleAction,
    RuleSet,
    RuleUpdate,
    apply_update,
    evaluate_rules,
    rule_coverage_rate,
    rule_consistency_index,
    rule_digest,
    update_traceability_coefficient,
)


def rule(rid, action, *guard, priority=0, version=1):
    return Rule(rid, RuleAction.parse(action), tuple(Condition(*g) for g in guard), version, priority)


def test_empty_ruleset_matches_nothing():
    out = evaluate_rules(RuleSet(), make_task())
    assert out.matched == () and out.mandated_action is None


def test_high_risk_mandate():
    rs = RuleSet((rule("r", "mandate_escalation", ("risk_class", "=", "high")),))
    out = evaluate_rules(rs, make_task(risk="high"))
    assert out.mandates_escalation
    assert not evaluate_rules(rs, make_task(risk="medium")).matched


def test_priority_and_conflict_pairs():
    rs = RuleSet((rule("r1", "allow", priority=1), rule("r2", "deny", priority=2)))
    out = evaluate_rules(rs, make_task())
    assert out.mandated_action == RuleAction("deny")
    # brute-force oracle over matched pairs
    matched = [r for r in rs.rules if r.matches(make_task())]
    expected = sorted(
        tuple(sorted((a.rule_id, b.rule_id)))
        for a, b in combinations(matched, 2)
        if {a.action.kind, b.action.kind} == {"allow", "deny"}
    )
    assert list(out.conflicts) == expected == [("r1", "r2")]


def test_equal_priority_breaks_on_rule_id():
    rs = RuleSet((rule("zeta", "deny"), rule("alpha", "allow")))
    assert evaluate_rules(rs, make_task()).mandated_action == RuleAction("allow")


def test_route_conflict_only_on_distinct_targets():
    rs = RuleSet((rule("a", "route(x)"), rule("b", "route(y)"), rule("c", "route(x)")))
    assert evaluate_rules(rs, make_task()).conflicts == (("a", "b"), ("b", "c"))


def test_risk_comparisons_use_rank():
    c = Condition("risk_class", ">=", "medium")
    assert c.holds(make_task(risk="high")) and not c.holds(make_task(risk="low"))
    assert Condition("risk_class", "in", ["low", "high"]).holds(make_task(risk="low"))


def test_guards_are_total():
    c = Condition("temp", "<", 3)
    assert not c.holds(make_task())  # missing feature
    assert not c.holds(make_task(temp="hot"))  # incomparable
    assert c.holds(make_task(temp=2))


def test_invalid_rules():
    with pytest.raises(InvalidRuleSet):
        Condition("x", "~", 1)
    with pytest.raises(InvalidRuleSet):
        RuleAction("route")
    with pytest.raises(InvalidRuleSet):
        RuleSet((rule("a", "allow"), rule("a", "deny", version=2)))


def test_coverage_catch_all():
    rs = RuleSet((rule("all", "allow"),))
    assert rule_coverage_rate(rs, [make_task(f"t{i}") for i in range(5)]) == 1.0


def test_coverage_empty_ruleset():
    assert rule_coverage_rate(RuleSet(), [make_task()]) == 0.0


def test_coverage_seven_of_ten():
    rs = RuleSet((rule("r", "allow", ("x", "<", 7)),))
    corpus = [make_task(f"t{i}", x=i) for i in range(10)]
    expected = sum(1 for t in corpus if t.features["x"] < 7) / len(corpus)
    assert rule_coverage_rate(rs, corpus) == expected == 0.7


def test_coverage_needs_corpus():
    with pytest.raises(EmptyCorpus):
        rule_coverage_rate(RuleSet(), [])


def test_consistency_disjoint_guards():
    rs = RuleSet((rule("a", "allow", ("x", "<", 0)), rule("b", "deny", ("x", ">", 0))))
    assert rule_consistency_index(rs, [make_task(x=-1), make_task(x=1)]) == 1.0


def test_consistency_same_guard_conflict():
    rs = RuleSet((rule("a", "allow"), rule("b", "deny")))
    assert rule_consistency_index(rs, [make_task()]) == 0.0


def test_consistency_two_thirds():
    rs = RuleSet((rule("a", "allow"), rule("b", "deny"), rule("c", "mandate_escalation")))
    # pairs ab, ac, bc co-match; only ab conflicts
    assert rule_consistency_index(rs, [make_task()]) == pytest.approx(2 / 3)


def test_consistency_is_empirical():
    rs = RuleSet((rule("a", "allow", ("x", ">", 5)), rule("b", "deny", ("x", ">", 3))))
    assert rule_consistency_index(rs, [make_task(x=4)]) == 1.0
    assert rule_consistency_index(rs, [make_task(x=4), make_task(x=6)]) == 0.0


def _versioned(n_updates, bad_rationale=0):
    rs = RuleSet((rule("r", "allow", ("x", ">", 0)),))
    for v in range(2, n_updates + 2):
        why = "" if v - 2 < bad_rationale else f"tightened to {v}"
        rs = apply_update(rs, rule("r", "allow", ("x", ">", v), version=v), "ops", 10 * v, why)
    return rs


def test_traceability_empty_log():
    assert update_traceability_coefficient(RuleSet()) == 1.0


def test_traceability_all_complete():
    assert update_traceability_coefficient(_versioned(4)) == 1.0


def test_traceability_missing_rationale():
    assert update_traceability_coefficient(_versioned(4, bad_rationale=1)) == 0.75


def test_traceability_checks_prior_hash():
    rs = _versioned(2)
    forged = RuleUpdate("r", 3, "ops", 30, "tightened", ZERO_DIGEST)
    rs = RuleSet(rs.rules, rs.update_log[:1] + (forged,), rs.retired)
    assert update_traceability_coefficient(rs) == 0.5


def test_update_log_records_prior_digest():
    base = RuleSet((rule("r", "allow"),))
    rs = apply_update(base, rule("r", "deny", version=2), "ops", 1, "flip")
    assert rs.update_log[0].prior_version_hash == rule_digest(base.rules[0])
    assert [r.version for r in rs.versions("r")] == [1, 2]
    with pytest.raises(InvalidRuleSet):
        apply_update(rs, rule("r", "deny", version=2), "ops", 2, "again")
    new = apply_update(rs, rule("s", "deny"), "ops", 3, "new rule")
    assert new.update_log[-1].prior_version_hash == ZERO_DIGEST


def test_ruleset_roundtrip():
    rs = _versioned(2)
    assert RuleSet.from_dict(rs.to_dict()) == rs


actions = st.sampled_from(["allow", "deny", "mandate_escalation", "route(a)", "route(b)"])
rules = st.builds(
    lambda i, a, thr, p: rule(f"r{i}", a, ("x", "<", thr), priority=p),
    st.integers(0, 1000), actions, st.integers(0, 10), st.integers(-3, 3),
)


@settings(max_examples=80, deadline=None)
@given(st.lists(rules, max_size=6, unique_by=lambda r: r.rule_id), st.integers(0, 10), st.randoms())
def test_order_independence(rs_list, x, rnd):
    task = make_task(x=x)
    shuffled = list(rs_list)
    rnd.shuffle(shuffled)
    assert evaluate_rules(RuleSet(tuple(rs_list)), task) == evaluate_rules(RuleSet(tuple(shuffled)), task)


def _conflict(a, b):
    return {a.kind, b.kind} == {"allow", "deny"} or (a.kind == b.kind == "route" and a.target != b.target)


@settings(max_examples=60, deadline=None)
@given(st.lists(rules, min_size=1, max_size=6, unique_by=lambda r: r.rule_id),
       st.lists(st.integers(0, 10), min_size=1, max_size=6), st.integers(0, 10))
def test_consistency_monotone_in_conflicting_witnesses(rs_list, xs, extra):
    rs = RuleSet(tuple(rs_list))
    witness = make_task("w", x=extra)
    matched = [r for r in rs.rules if r.matches(witness)]
    # only witnesses whose co-matched pairs all conflict
    assume(all(_conflict(a.action, b.action) for a, b in combinations(matched, 2)))
    corpus = [make_task(f"t{i}", x=x) for i, x in enumerate(xs)]
    assert rule_consistency_index(rs, corpus + [witness]) <= rule_consistency_index(rs, corpus) + 1e-12
