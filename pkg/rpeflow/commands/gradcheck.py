"""
gradcheck: compare tape gradients with central differences.
"""
import argparse
import logging
from pathlib import Path

from rpeflow import storage
from rpeflow.commands.common import Command, finish
from rpeflow.config import settings
from rpeflow.errors import GradcheckError
from rpeflow.gradcheck import DEFAULT_H, DEFAULT_TOL
from rpeflow.logging_utils import log_gradcheck_result
from rpeflow.metrics import record_gradcheck
from rpeflow.suites import SUITES, run_suites

REPORT_JSON = "gradcheck_report.json"
COLUMNS = ("suite", "check", "max_rel_error", "checked", "status")


def configure(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--suite", action="append", choices=sorted(SUITES),
                        help="suite to run (repeatable; default: all)")
    parser.add_argument("--tol", type=float, default=DEFAULT_TOL)
    parser.add_argument("--step", type=float, default=DEFAULT_H, help="finite-difference step")
    parser.add_argument("--seed", type=int, help=f"seed (default: {settings.SEED})")
    parser.add_argument("--out", type=Path, help="directory for the JSON report")


def handle(args: argparse.Namespace, logger: logging.Logger) -> int:
    names = args.suite or list(SUITES)
    seed = settings.SEED if args.seed is None else args.seed
    results = run_suites(names, seed=seed, h=args.step, tol=args.tol)

    rows, failing = [], []
    for suite, reports in results.items():
        for rep in reports:
            record_gradcheck(suite, rep.passed)
            rows.append({
                "suite": suite,
                "check": rep.name,
                "max_rel_error": f"{rep.max_rel_error:.3e}",
                "checked": rep.checked,
                "status": "ok" if rep.passed else "FAIL",
            })
            if not rep.passed:
                reason = rep.failure or f"max rel error {rep.max_rel_error:.3e} at {rep.worst_location}"
                failing.append(f"{suite}/{rep.name} ({reason})")
        worst = max((r.max_rel_error for r in reports), default=0.0)
        log_gradcheck_result(logger, suite, worst, all(r.passed for r in reports))

    print(storage.format_table(rows, COLUMNS), end="")
    if args.out is not None:
        storage.write_json(args.out / REPORT_JSON, {
            "seed": seed,
            "tol": args.tol,
            "step": args.step,
            "suites": {s: [r.to_dict() for r in reps] for s, reps in results.items()},
        })
        finish(args.out)
    if failing:
        raise GradcheckError(f"{len(failing)} gradient checks failed: " + "; ".join(failing))
    return 0


command = Command("gradcheck", "run the gradient-check suites", configure, handle)
