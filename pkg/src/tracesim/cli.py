"""``tracesim`` command line: run, validate, verify and report."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

from tracesim import __version__
from tracesim.core import read_jsonl, verify_trail
from tracesim.errors import ChainCorrupt, ConfigInvalid, TraceError
from tracesim.metrics import RATIO_METRICS, TrustReport, build_trust_report, error_absorption_from_logs
from tracesim.simulator.config import ScenarioConfig, validate
from tracesim.simulator.engine import config_metrics, render_markdown, run_scenario, write_outputs
from tracesim.simulator.presets import PRESET_NAMES, preset_data

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2
EXIT_CHAIN = 3
EXIT_MISMATCH = 4


def _err(msg: str) -> None:
    print(msg, file=sys.stderr)


def _print_problems(problems) -> None:
    for path, msg in problems:
        _err(f"{path}: {msg}")


def _load_document(args) -> dict:
    if args.preset:
        return preset_data(args.preset)
    text = Path(args.scenario).read_text(encoding="utf-8")
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigInvalid([("$", f"not valid JSON: {exc}")]) from exc


def cmd_run(args) -> int:
    try:
        data = _load_document(args)
        config = ScenarioConfig.from_dict(data)
        overrides = {}
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.n_tasks is not None:
            overrides["n_tasks"] = args.n_tasks
        if overrides:
            config = config.with_overrides(**overrides)
    except ConfigInvalid as exc:
        _print_problems(exc.problems)
        return EXIT_CONFIG
    except OSError as exc:
        _err(f"cannot read scenario: {exc}")
        return EXIT_CONFIG
    try:
        result = run_scenario(config, workers=max(1, args.workers))
        out = write_outputs(result, args.out)
    except (TraceError, OSError) as exc:
        _err(f"run failed: {exc}")
        return EXIT_RUNTIME
    ab = result.absorption["platform"]
    print(f"wrote {out} ({result.meta['n_tasks']} tasks, error absorption {ab['error_absorption']:.4f})")
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        data = _load_document(args)
    except ConfigInvalid as exc:
        _print_problems(exc.problems)
        return EXIT_CONFIG
    except OSError as exc:
        _err(f"cannot read scenario: {exc}")
        return EXIT_CONFIG
    problems = validate(data)
    if problems:
        _print_problems(problems)
        return EXIT_CONFIG
    print("valid")
    return EXIT_OK


def _run_dir(path: Path) -> Path:
    # accept either the run directory or its evidence/ subdirectory
    if (path / "evidence").is_dir():
        return path
    if path.name == "evidence" and (path.parent / "report.json").exists():
        return path.parent
    return path


def _same(a, b) -> bool:
    return json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)


def cmd_verify(args) -> int:
    run = _run_dir(Path(args.evidence))
    try:
        scenario = json.loads((run / "scenario.json").read_text(encoding="utf-8"))
        claimed = json.loads((run / "report.json").read_text(encoding="utf-8"))
        meta = json.loads((run / "run_meta.json").read_text(encoding="utf-8"))
        config = ScenarioConfig.from_dict(scenario)
    except (OSError, ValueError, ConfigInvalid) as exc:
        _err(f"missing or unreadable run artifacts in {run}: {exc}")
        return EXIT_RUNTIME
    if meta.get("config_digest") != config.digest():
        _err("scenario.json does not match the config digest in run_meta.json")
        return EXIT_MISMATCH

    trails = {}
    for sd in config.sub_domains:
        path = run / "evidence" / f"{sd.label}.jsonl"
        try:
            trails[sd.label] = read_jsonl(path)
        except FileNotFoundError:
            _err(f"{path}: missing evidence log")
            return EXIT_CHAIN
        except ChainCorrupt as exc:
            _err(f"chain corrupt: {exc}")
            return EXIT_CHAIN
        for trail in trails[sd.label]:
            if not verify_trail(trail):
                _err(f"chain corrupt: {path}: trail {trail.task_id}")
                return EXIT_CHAIN

    params = config.metric_params
    scopes = [("platform", [t for sd in config.sub_domains for t in trails[sd.label]], config.sub_domains)]
    scopes += [(sd.label, trails[sd.label], [sd]) for sd in config.sub_domains]
    mismatches = []
    for scope, scoped, sds in scopes:
        reported = claimed["platform"] if scope == "platform" else claimed.get("sub_domains", {}).get(scope)
        if reported is None:
            mismatches.append((scope, "report", "missing", "present"))
            continue
        recomputed = build_trust_report(scoped, config_metrics(sds, params), params).to_dict()
        got = {m["name"]: m for m in recomputed["metrics"]}
        for m in reported.get("metrics", []):
            name = m.get("name")
            if name not in got:
                mismatches.append((scope, name, m.get("value"), "unknown metric"))
                continue
            for key in ("value", "std_uncertainty", "n"):
                if not _same(m.get(key), got[name][key]):
                    label = name if key == "value" else f"{name}.{key}"
                    mismatches.append((scope, label, m.get(key), got[name][key]))
        missing = set(got) - {m.get("name") for m in reported.get("metrics", [])}
        mismatches.extend((scope, name, "missing", got[name]["value"]) for name in sorted(missing))
        for key in ("composite_trust_score", "composite_uncertainty"):
            if not _same(reported.get(key), recomputed[key]):
                mismatches.append((scope, key, reported.get(key), recomputed[key]))
        value, absorbed, wrong = error_absorption_from_logs(scoped)
        ab = {"error_absorption": value, "absorbed": absorbed, "first_pass_errors": wrong}
        if not _same(claimed.get("absorption", {}).get(scope), ab):
            mismatches.append((scope, "error_absorption", claimed.get("absorption", {}).get(scope), ab))
    if mismatches:
        for scope, name, rep, rec in mismatches:
            _err(f"metric mismatch [{scope}] {name}: reported {rep!r}, recomputed {rec!r}")
        return EXIT_MISMATCH
    n_ratio = sum(1 for m in claimed["platform"]["metrics"] if m["name"] in RATIO_METRICS)
    print(f"ok: {sum(len(v) for v in trails.values())} trails verified, {n_ratio} ratio metrics reproduced")
    return EXIT_OK


def cmd_report(args) -> int:
    run = _run_dir(Path(args.input))
    try:
        doc = json.loads((run / "report.json").read_text(encoding="utf-8"))
        TrustReport.from_dict(doc["platform"])
    except (OSError, ValueError, KeyError, TypeError, TraceError) as exc:
        _err(f"missing or unreadable run artifacts in {run}: {exc}")
        return EXIT_RUNTIME
    if args.format == "json":
        sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    else:
        sys.stdout.write(render_markdown(doc))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tracesim", description="Layered agent runtime simulator and trust metrics.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def scenario_source(p):
        src = p.add_mutually_exclusive_group(required=True)
        src.add_argument("--scenario", help="path to a scenario JSON document")
        src.add_argument("--preset", choices=PRESET_NAMES, help="bundled scenario")

    p = sub.add_parser("run", help="run a scenario and write evidence logs and reports")
    scenario_source(p)
    p.add_argument("--seed", type=int, help="override the scenario seed")
    p.add_argument("--n-tasks", type=int, dest="n_tasks", help="override the per-sub-domain task count")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate", help="check a scenario against the schema")
    scenario_source(p)
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("verify", help="check hash chains and re-derive every reported metric")
    p.add_argument("--evidence", required=True, help="run output directory")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("report", help="re-emit the trust report of a finished run")
    p.add_argument("--in", dest="input", required=True, help="run output directory")
    p.add_argument("--format", choices=("json", "md"), default="md")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
