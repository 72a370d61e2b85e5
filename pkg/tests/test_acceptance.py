"""Acceptance suite. Each criterion prints one PASS/FAIL line.

Tolerances are pinned below; change them only with a recorded reason.
"""

import json
import shutil
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from conftest import small_scenario
from tracesim.cli import main as cli_main
from tracesim.core import EVIDENCE_SCHEMA, RiskClass, TaskInstance
from tracesim.l2_inventory import ComponentDescriptor, InvocationRequest, SimulatedComponentSpec, expected_calibration_error, invoke
from tracesim.metrics import METRIC_LAYER, METRIC_NAMES, cpr, nominal_eval
from tracesim.simulator import PRESET_NAMES, ScenarioConfig, load_preset, run_scenario, write_outputs
from tracesim.simulator import engine

# pinned tolerances and sizes
ABSORPTION_BAND = (0.169, 0.30)
ABSORPTION_GOLDEN = 0.2084592145015106
ABSORPTION_N = 10_000
RUNTIME_LIMIT_S = 30.0
N_RANDOM_SCENARIOS = 1000
N_REACHABILITY_SEEDS = 100
N_MUTATIONS = 100
ECE_N = 50_000
ECE_CALIBRATED_MAX = 0.02
ECE_SHIFT = 0.15
ECE_SHIFT_TOL = 0.02
CPR_TARGET = 0.01
CPR_TOL = 0.001

RESULTS: list[str] = []


@contextmanager
def criterion(number, text):
    try:
        yield
    except BaseException:
        line = f"[FAIL] criterion {number}: {text}"
        RESULTS.append(line)
        print(line)
        raise
    line = f"[PASS] criterion {number}: {text}"
    RESULTS.append(line)
    print(line)


@pytest.fixture(scope="module")
def preset_runs(tmp_path_factory):
    """Full-size run of every preset, kept in memory and on disk."""
    base = tmp_path_factory.mktemp("presets")
    out = {}
    for name in PRESET_NAMES:
        res = run_scenario(load_preset(name))
        out[name] = (res, write_outputs(res, base / name))
    return out


def dir_bytes(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_1_error_absorption_band():
    with criterion(1, f"clinical seed 42 n={ABSORPTION_N} absorption in {ABSORPTION_BAND}, < {RUNTIME_LIMIT_S:.0f} s, golden"):
        cfg = load_preset("clinical").with_overrides(n_tasks=ABSORPTION_N)
        assert cfg.seed == 42
        t0 = time.perf_counter()
        res = run_scenario(cfg)
        elapsed = time.perf_counter() - t0
        value = engine.error_absorption(res)
        print(f"  absorption {value:.6f} in {elapsed:.1f} s")
        assert ABSORPTION_BAND[0] <= value <= ABSORPTION_BAND[1]
        assert elapsed < RUNTIME_LIMIT_S
        assert value == ABSORPTION_GOLDEN


def _random_scenario(rng, index):
    risk = rng.dirichlet([1.0, 1.0, 1.0])
    comps = []
    for cid, cls in (("fast", "L2a"), ("slow", "L2b")):
        sim = {
            "accuracy": float(rng.uniform(0.4, 1.0)),
            "confidence_noise": float(rng.uniform(0.0, 0.2)),
            "miscalibration_shift": float(rng.uniform(-0.2, 0.2)),
        }
        if cls == "L2b":
            sim["hallucination_rate"] = float(rng.uniform(0.0, 0.2))
        comps.append({"component_id": cid, "component_class": cls, "supported_task_types": ["check"],
                      "cost": {"latency": float(rng.uniform(0.1, 20))}, "sim": sim})
    data = small_scenario(
        components=comps,
        trigger={
            "risk_threshold": str(rng.choice(["low", "medium", "high"])),
            "confidence_threshold": float(rng.uniform(0.3, 0.99)),
            "inconsistency_threshold": float(rng.uniform(0.1, 0.9)),
            "reinvocation_budget": int(rng.integers(0, 4)),
        },
    )
    data["sub_domains"][0]["generator"]["risk_classes"] = dict(zip(["low", "medium", "high"], map(float, risk)))
    data["seed"] = int(rng.integers(0, 2**31))
    data["n_tasks"] = 20
    data["scenario_id"] = f"random-{index}"
    return data


def test_criterion_2_joint_trigger_soundness():
    with criterion(2, f"joint-trigger soundness over {N_RANDOM_SCENARIOS} randomized scenarios"):
        rng = np.random.default_rng(20240601)
        fired = violations = 0
        for i in range(N_RANDOM_SCENARIOS):
            data = _random_scenario(rng, i)
            trig = data["sub_domains"][0]["trigger"]
            res = run_scenario(ScenarioConfig.from_dict(data))
            for task in res.tasks:
                head = task.trail.records[0].payload
                for rec in task.trail.records:
                    p = rec.payload
                    if rec.event_kind != "escalation" or p["trigger"] != "joint_risk_confidence":
                        continue
                    fired += 1
                    ok = (
                        p["risk_class"] == head["risk_class"]
                        and RiskClass(p["risk_class"]).at_least(trig["risk_threshold"])
                        and p["risk_threshold"] == trig["risk_threshold"]
                        and p["confidence_threshold"] == trig["confidence_threshold"]
                        and p["accumulated_confidence"] >= trig["confidence_threshold"]
                    )
                    violations += not ok
        print(f"  {fired} joint-trigger escalations checked, {violations} violations")
        assert fired > 0
        assert violations == 0


def test_criterion_3_l4_reachable_only_via_escalation():
    with criterion(3, f"no adjudication without prior escalation, 3 presets x {N_REACHABILITY_SEEDS} seeds"):
        reviewed = orphans = 0
        for name in PRESET_NAMES:
            base = load_preset(name).with_overrides(n_tasks=20)
            for seed in range(N_REACHABILITY_SEEDS):
                res = run_scenario(base.with_overrides(seed=seed))
                for task in res.tasks:
                    escalated = False
                    for rec in task.trail.records:
                        if rec.event_kind == "escalation":
                            escalated = True
                        elif rec.event_kind == "adjudication":
                            reviewed += 1
                            orphans += not escalated
        print(f"  {reviewed} adjudications checked, {orphans} without escalation")
        assert reviewed > 0
        assert orphans == 0


def test_criterion_4_determinism(preset_runs, tmp_path):
    with criterion(4, "byte-identical logs and reports across reruns and 1 vs 4 workers"):
        for name in PRESET_NAMES:
            _, first = preset_runs[name]
            expected = dir_bytes(first)
            again = write_outputs(run_scenario(load_preset(name)), tmp_path / f"{name}-again")
            assert dir_bytes(again) == expected, name
            parallel = write_outputs(run_scenario(load_preset(name), workers=4), tmp_path / f"{name}-w4")
            assert dir_bytes(parallel) == expected, name


def test_criterion_5_audit_closure(preset_runs, tmp_path):
    with criterion(5, f"verify exits 0 on untouched output and nonzero on {N_MUTATIONS} single-byte mutations"):
        runs = {}
        for name in PRESET_NAMES:
            runs[name] = shutil.copytree(preset_runs[name][1], tmp_path / name)
            assert cli_main(["verify", "--evidence", str(runs[name])]) == 0
        rng = np.random.default_rng(5)
        codes = []
        for _ in range(N_MUTATIONS):
            run = runs[PRESET_NAMES[int(rng.integers(len(PRESET_NAMES)))]]
            logs = sorted((run / "evidence").glob("*.jsonl"))
            log = logs[int(rng.integers(len(logs)))]
            original = log.read_bytes()
            pos = int(rng.integers(len(original)))
            new = (original[pos] + int(rng.integers(1, 256))) % 256
            mutated = bytearray(original)
            mutated[pos] = new
            log.write_bytes(bytes(mutated))
            try:
                codes.append(cli_main(["verify", "--evidence", str(run)]))
            finally:
                log.write_bytes(original)
        print(f"  exit codes: {sorted(set(codes))}")
        assert all(c != 0 for c in codes)


def _ece_for(shift, noise, accuracy=0.8):
    comp = ComponentDescriptor("m", "L2a", {"check"}, sim=SimulatedComponentSpec(
        accuracy=accuracy, confidence_noise=noise, miscalibration_shift=shift))
    req = InvocationRequest(TaskInstance("t", "check", {}, RiskClass.LOW, "yes"), alphabet=("yes", "no"))
    rng = np.random.default_rng(606)
    pairs = []
    for _ in range(ECE_N):
        v = invoke(comp, req, rng)
        pairs.append((v.confidence, v.decision == "yes"))
    return expected_calibration_error(pairs, 10)


def test_criterion_6_ece_correctness():
    with criterion(6, f"ECE < {ECE_CALIBRATED_MAX} calibrated, {ECE_SHIFT} +/- {ECE_SHIFT_TOL} with shift"):
        calibrated = _ece_for(0.0, 0.0)
        shifted = _ece_for(ECE_SHIFT, 0.0)
        print(f"  calibrated {calibrated:.5f}, shifted {shifted:.5f}")
        assert calibrated < ECE_CALIBRATED_MAX
        assert abs(shifted - ECE_SHIFT) <= ECE_SHIFT_TOL


def _empirical_profile(comp, task_type, alphabet, n=20_000):
    task = TaskInstance("t", task_type, {}, RiskClass.LOW, alphabet[0])
    req = InvocationRequest(task, alphabet=alphabet)
    rng = np.random.default_rng(77)
    pairs = []
    for _ in range(n):
        v = invoke(comp, req, rng)
        pairs.append((v.confidence, v.decision == alphabet[0]))
    acc = sum(ok for _, ok in pairs) / n
    return {"accuracy": acc, "ece": expected_calibration_error(pairs, 10), "latency": comp.cost().latency}


def test_criterion_7_cpr_industrial():
    with criterion(7, f"industrial technology CPR: L2b {CPR_TARGET} +/- {CPR_TOL}, cheapest adequate L2a 1.0"):
        cfg = load_preset("industrial")
        weights = cfg.metric_params["cost_weights"]
        sd = cfg.sub_domain("technology")
        ttype = "well_anomaly"
        spec = sd.task_types[ttype]
        req = spec.adequacy
        inventory = [c for c in sd.components if ttype in c.supported_task_types]

        # exhaustive scan over measured profiles
        measured = {c.component_id: _empirical_profile(c, ttype, spec.alphabet) for c in inventory}
        adequate = [
            c for c in inventory
            if measured[c.component_id]["accuracy"] >= req.min_accuracy
            and measured[c.component_id]["ece"] <= req.max_calibration_error
            and measured[c.component_id]["latency"] <= req.max_latency
        ]
        cheapest_cost = min(c.cost().scalarize(weights) for c in adequate)
        l2b = next(c for c in adequate if c.component_class == "L2b")
        l2a = min((c for c in adequate if c.component_class == "L2a"), key=lambda c: c.cost().scalarize(weights))
        scan = cheapest_cost / l2b.cost().scalarize(weights)

        nominal = {c.component_id: nominal_eval(c) for c in inventory}
        got_l2b = cpr(l2b, inventory, req, nominal, weights)
        got_l2a = cpr(l2a, inventory, req, nominal, weights)
        print(f"  L2b {l2b.component_id}: {got_l2b:.6f} (scan {scan:.6f}); L2a {l2a.component_id}: {got_l2a}")
        assert got_l2b == pytest.approx(scan, abs=1e-12)
        assert abs(got_l2b - CPR_TARGET) <= CPR_TOL
        assert got_l2a == 1.0


def _oracle_ratios(lines):
    """Simple ratio metrics straight from raw JSONL dictionaries."""
    trails = []
    for obj in lines:
        if obj["seq"] == 0:
            trails.append([])
        trails[-1].append(obj)
    tasks = [t for t in trails if t[0]["payload"].get("decision_kind") == "ingest"]
    n = len(tasks)

    def ratio(a, b, empty):
        return a / b if b else empty

    def events(t, kind):
        return [r["payload"] for r in t if r["event_kind"] == kind]

    inv = [p for t in tasks for p in events(t, "invocation")]
    esc = [(p["pre_decision"], t[0]["payload"]["ground_truth"]) for t in tasks for p in events(t, "escalation")]
    adj = [p for t in tasks for p in events(t, "adjudication")]
    probes = [p["perturbation"] for p in inv if "perturbation" in p]

    def complete(r):
        for name in EVIDENCE_SCHEMA[r["event_kind"]]:
            if name.endswith("?"):
                continue
            v = r["payload"].get(name)
            if v is None or (isinstance(v, (str, list, dict)) and len(v) == 0):
                return False
        return True

    return {
        "rule_coverage_rate": ratio(sum(1 for t in tasks if events(t, "rule_fired")), n, 1.0),
        "context_relevance_precision": ratio(sum(p["context"]["relevant"] for p in inv), sum(p["context"]["supplied"] for p in inv), 1.0),
        "input_perturbation_stability_rate": ratio(sum(p["stable"] for p in probes), sum(p["n"] for p in probes), 1.0),
        "escalation_precision": ratio(sum(1 for pre, gt in esc if pre != gt), len(esc), 1.0),
        "review_burden_index": ratio(sum(1 for t in tasks if events(t, "escalation")), n, 0.0),
        "override_rate": ratio(sum(1 for p in adj if p["outcome"] != "uphold"), len(adj), 0.0),
        "evidence_trail_completeness": ratio(sum(complete(r) for t in trails for r in t), sum(len(t) for t in trails), 1.0),
    }


def test_criterion_8_cardinality_and_recomputability(preset_runs):
    with criterion(8, "17 metrics (12/4/1) in every report; ratio metrics recomputed from JSONL match exactly"):
        layers = [METRIC_LAYER[n] for n in METRIC_NAMES]
        assert len(METRIC_NAMES) == 17
        assert sum(layer in ("L1", "L2", "L3", "L4") for layer in layers) == 12
        assert layers.count("cross") == 4 and layers.count("parsimony") == 1
        checked = 0
        for name in PRESET_NAMES:
            _, out = preset_runs[name]
            doc = json.loads((out / "report.json").read_text())
            reports = {"platform": doc["platform"], **doc["sub_domains"]}
            for rep in reports.values():
                assert [m["name"] for m in rep["metrics"]] == list(METRIC_NAMES)
            # full re-derivation of every metric from the logs
            assert cli_main(["verify", "--evidence", str(out)]) == 0
            scoped = {}
            for log in sorted((out / "evidence").glob("*.jsonl")):
                scoped[log.stem] = [json.loads(line) for line in log.read_text().splitlines()]
            scoped["platform"] = [obj for label in doc["sub_domains"] for obj in scoped[label]]
            for scope, lines in scoped.items():
                reported = {m["name"]: m["value"] for m in reports[scope]["metrics"]}
                for metric, value in _oracle_ratios(lines).items():
                    assert reported[metric] == value, (name, scope, metric)
                    checked += 1
        print(f"  {checked} independent ratio recomputations matched")


def test_criterion_9_gum_combination():
    from hypothesis import given, settings
    from hypothesis import strategies as st

    from tracesim.metrics import MetricValue, gum_combine

    with criterion(9, "GUM composite 0.7, u_c 0.111803 to 6 decimals; u_c monotone"):
        c, u = gum_combine(
            [MetricValue("rule_coverage_rate", 0.8, 0.1), MetricValue("override_rate", 0.6, 0.2)], [0.5, 0.5]
        )
        assert round(c, 6) == 0.7 and round(u, 6) == 0.111803

        @settings(max_examples=200, deadline=None)
        @given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0.01, 1)), min_size=1, max_size=17),
               st.integers(0, 16), st.floats(0, 1))
        def monotone(rows, idx, bump):
            total = sum(w for *_, w in rows)
            weights = [w / total for *_, w in rows]
            ms = [MetricValue("rule_coverage_rate", v, s) for v, s, _ in rows]
            i = idx % len(ms)
            grown = list(ms)
            grown[i] = MetricValue("rule_coverage_rate", ms[i].value, ms[i].std_uncertainty + bump)
            assert gum_combine(grown, weights)[1] >= gum_combine(ms, weights)[1] - 1e-15

        monotone()


def _called_functions(fn):
    seen = set()

    def prof(frame, event, arg):
        if event == "call":
            mod = frame.f_globals.get("__name__", "")
            if mod.startswith("tracesim"):
                seen.add(f"{mod}.{frame.f_code.co_name}")

    sys.setprofile(prof)
    try:
        fn()
    finally:
        sys.setprofile(None)
    return seen


def test_criterion_10_unity(preset_runs):
    with criterion(10, "presets differ only in data, share one engine path, complete with full reports"):
        pkg = Path(engine.__file__).resolve().parent
        preset_files = sorted(p.name for p in (pkg / "presets").iterdir() if p.is_file())
        assert preset_files == [f"{n}.json" for n in PRESET_NAMES]
        # no code path keyed on a preset name
        for src in Path(engine.__file__).resolve().parents[1].rglob("*.py"):
            if src.name == "presets.py":
                continue
            text = src.read_text()
            assert not any(name in text for name in PRESET_NAMES), src

        core_path = {
            "tracesim.simulator.engine.run_scenario",
            "tracesim.simulator.engine.generate_task",
            "tracesim.simulator.engine.process_task",
            "tracesim.l1_rules.evaluate_rules",
            "tracesim.l3_policy.step",
            "tracesim.l2_inventory.invoke",
            "tracesim.l4_supervision.adjudicate",
            "tracesim.metrics.build_trust_report",
            "tracesim.simulator.engine.autonomy_ledger",
        }
        for name in PRESET_NAMES:
            cfg = load_preset(name)
            assert type(cfg) is ScenarioConfig
            called = _called_functions(lambda: run_scenario(cfg.with_overrides(n_tasks=30)))
            assert core_path <= called, (name, core_path - called)

            res, out = preset_runs[name]
            assert res.platform_report is not None and len(res.platform_report.metrics) == 17
            assert set(res.reports) == {sd.label for sd in cfg.sub_domains}
            assert all(len(r.metrics) == 17 for r in res.reports.values())
            assert {p.name for p in out.iterdir()} == {"evidence", "report.json", "report.md", "run_meta.json", "scenario.json"}
