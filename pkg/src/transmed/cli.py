"""Command-line entry point: ``transmed {simulate,estimate,truth,sample}``.

Exit codes: 0 success, 1 runtime failure, 2 usage, configuration or data
validation error.
"""

from __future__ import annotations

import argparse
import json
import math
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .data import DataError, TermSpec, TermSpecError, load_csv, validate, write_csv
from .dgp import LABELINGS, correct_terms, get_dgm, sample
from .estimators import ESTIMATORS, bootstrap_se, estimate_effects, wald_ci
from .simulation import EFF_SCALES, SCENARIOS, TARGETS, ConfigError, SimConfig, apply_misspecification, simulate
from .truth import truth_report

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised only on 3.10
    import tomli as tomllib

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _estimator_list(text: str) -> tuple[str, ...]:
    names = tuple(e.strip() for e in text.split(",") if e.strip())
    bad = [e for e in names if e not in ESTIMATORS]
    if bad or not names:
        raise argparse.ArgumentTypeError(f"unknown estimators {bad}; choose from {','.join(ESTIMATORS)}")
    return names


def _add_dgm_flags(p, required=False):
    p.add_argument("--dgm", type=int, required=required, help="mechanism id (1, 2 or 3)")
    p.add_argument("--labeling", choices=LABELINGS, help="numbering the --dgm id refers to")
    p.add_argument("--s-ref", dest="s_ref", type=int, choices=(0, 1), help="site used inside g*")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="transmed", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sim = sub.add_parser("simulate", help="run a replicated simulation study")
    _add_dgm_flags(sim)
    sim.add_argument("--n", type=int)
    sim.add_argument("--reps", type=int)
    sim.add_argument("--boot", type=int, help="bootstrap resamples per replication (0 disables)")
    sim.add_argument("--no-bootstrap", action="store_true")
    sim.add_argument("--seed", type=int)
    sim.add_argument("--scenario", choices=sorted(SCENARIOS))
    sim.add_argument("--estimators", type=_estimator_list)
    sim.add_argument("--clip", type=float)
    sim.add_argument("--eff-scale", dest="eff_scale", choices=EFF_SCALES)
    sim.add_argument("--target", choices=TARGETS)
    sim.add_argument("--threads", type=int, default=1)
    sim.add_argument("--out", type=Path, default=Path("out"))
    sim.add_argument("--format", choices=("csv", "json", "both"), default="both")
    sim.add_argument("--config", type=Path, help="TOML config or a previous run manifest (JSON)")

    est = sub.add_parser("estimate", help="estimate effects on a CSV dataset")
    est.add_argument("data", type=Path, help="CSV with header S,W1,W2,A,Z,M,Y")
    _add_dgm_flags(est)
    est.add_argument("--scenario", choices=sorted(SCENARIOS), default="none",
                     help="misspecify the preset terms of --dgm")
    est.add_argument("--terms", type=Path, help="TOML/JSON file with a [terms] table")
    est.add_argument("--estimators", type=_estimator_list, default=ESTIMATORS)
    est.add_argument("--boot", type=int, default=0)
    est.add_argument("--no-bootstrap", action="store_true")
    est.add_argument("--seed", type=int, default=1)
    est.add_argument("--clip", type=float, default=0.0)
    est.add_argument("--force", action="store_true", help="estimate despite positivity violations")
    est.add_argument("--out", type=Path, help="write JSON here instead of stdout")

    tr = sub.add_parser("truth", help="print exact truths and efficiency bounds")
    _add_dgm_flags(tr, required=True)
    tr.add_argument("--out", type=Path)

    smp = sub.add_parser("sample", help="draw a synthetic dataset and write it as CSV")
    smp.add_argument("--dgm", type=int, required=True, help="mechanism id (1, 2 or 3)")
    smp.add_argument("--labeling", choices=LABELINGS, help="numbering the --dgm id refers to")
    smp.add_argument("--n", type=int, required=True)
    smp.add_argument("--seed", type=int, default=1)
    smp.add_argument("--out", type=Path, required=True)
    return parser


def _load_config_file(path: Path) -> dict:
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix == ".json":
            d = json.loads(text)
            return d.get("config", d)
        d = tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return d.get("simulate", d)


def resolve_sim_config(args) -> SimConfig:
    values = _load_config_file(args.config) if args.config else {}
    for key in ("dgm", "labeling", "s_ref", "n", "reps", "boot", "seed", "scenario",
                "estimators", "clip", "eff_scale", "target"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if args.no_bootstrap:
        values["boot"] = 0
    values.setdefault("labeling", "appendix")
    try:
        return SimConfig.from_dict(values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def _manifest(command: str, config: dict, outputs: list[str], started: float) -> dict:
    return {
        "tool": "transmed",
        "version": __version__,
        "command": command,
        "config": config,
        "seed": config.get("seed"),
        "outputs": outputs,
        "wall_clock_seconds": round(time.time() - started, 3),
    }


def cmd_simulate(args) -> int:
    started = time.time()
    config = resolve_sim_config(args)
    if args.threads < 1:
        raise ConfigError("--threads must be at least 1")
    summary, _ = simulate(config, threads=args.threads)
    out: Path = args.out
    written = []
    if args.format in ("csv", "both"):
        written.append(str(_write(out / "summary.csv", summary.to_csv())))
    if args.format in ("json", "both"):
        written.append(str(_write(out / "summary.json", summary.to_json() + "\n")))
    manifest = _manifest("simulate", config.to_dict(), written, started)
    manifest["threads"] = args.threads
    _write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(summary.to_csv(), end="")
    return EXIT_OK


def _num(x):
    return None if x is None or (isinstance(x, float) and not math.isfinite(x)) else x


def _load_terms(path: Path) -> TermSpec:
    d = _load_config_file(path)
    d = d.get("terms", d)
    try:
        return TermSpec.from_dict(d)
    except (TermSpecError, KeyError, TypeError) as exc:
        raise ConfigError(f"bad term specification in {path}: {exc}") from exc


def run_estimate(args) -> dict:
    """Library-level body of ``estimate``; returns the JSON payload."""
    data = load_csv(args.data)
    violations = validate(data)
    if violations and not args.force:
        raise DataError("positivity screen failed:\n  " + "\n  ".join(violations))
    if args.terms:
        terms = _load_terms(args.terms)
    elif args.dgm is not None:
        dgm = get_dgm(args.dgm, args.labeling or "appendix")
        terms = apply_misspecification(correct_terms(dgm), args.scenario)
    else:
        raise ConfigError("supply --terms or --dgm to choose the model terms")
    s_ref = 0 if args.s_ref is None else args.s_ref
    data_c = data.collapse()
    res = estimate_effects(data_c, terms, args.estimators, s_ref, args.clip, raise_errors=False)
    boot = None
    B = 0 if args.no_bootstrap else args.boot
    if B:
        boot = bootstrap_se(data_c, terms, B, args.seed, args.estimators, s_ref, args.clip)
    payload = {
        "n": data.n,
        "s_ref": s_ref,
        "positivity_violations": violations,
        "terms": terms.to_dict(),
        "estimators": {},
    }
    for e in args.estimators:
        r = res[e]
        if not r.ok:
            payload["estimators"][e] = {"error": r.error}
            continue
        entry = {"psi": {k: c.psi for k, c in r.components.items()}}
        for eff in (r.SDE, r.SIE):
            item = {"estimate": eff.estimate, "se_ic": _num(eff.se_ic), "ci_ic": [_num(v) for v in eff.ci_ic]}
            if boot is not None:
                se_b = boot.se[e][eff.effect]
                item["se_boot"] = _num(se_b)
                item["ci_boot"] = [_num(v) for v in wald_ci(eff.estimate, se_b)]
                item["boot_failures"] = boot.failures[e]
            entry[eff.effect] = item
        payload["estimators"][e] = entry
    return payload


def cmd_estimate(args) -> int:
    payload = run_estimate(args)
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        _write(args.out, text + "\n")
    else:
        print(text)
    return EXIT_OK


def _requested_labeling(args) -> str:
    if args.dgm not in (1, 2, 3):
        raise ConfigError(f"unknown mechanism {args.dgm}; choose 1, 2 or 3")
    labeling = args.labeling or "appendix"
    if labeling == "main" and args.dgm == 3:
        raise ConfigError("mechanism 3 has no main-text label")
    return labeling


def cmd_truth(args) -> int:
    labeling = _requested_labeling(args)
    report = truth_report(args.dgm, 0 if args.s_ref is None else args.s_ref, labeling)
    d = report.to_dict()
    d["requested"] = {"dgm": args.dgm, "labeling": labeling}
    text = json.dumps(d, indent=2, sort_keys=True)
    if args.out:
        _write(args.out, text + "\n")
    else:
        print(text)
    return EXIT_OK


def cmd_sample(args) -> int:
    labeling = _requested_labeling(args)
    if args.n < 1:
        raise ConfigError("--n must be at least 1")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_csv(sample(get_dgm(args.dgm, labeling), args.n, args.seed), args.out)
    print(f"wrote {args.n} rows to {args.out}", file=sys.stderr)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "truth": cmd_truth, "sample": cmd_sample}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, DataError, TermSpecError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - report and exit nonzero
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
