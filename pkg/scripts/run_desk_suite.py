"""Run every experiment at desk scale on one shared path bundle and tabulate the verdicts.

    python3 scripts/run_desk_suite.py --out results/desk
    python3 scripts/run_desk_suite.py --only bmo,bsde --paths 20000
"""

import argparse
import csv
import sys
import time
from pathlib import Path

from bmo_bsde.harness import RUNNERS, ExperimentConfig, Workspace, run_subcommand, write_outputs


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--config", type=Path)
    ap.add_argument("--out", type=Path, default=Path("results/desk"))
    ap.add_argument("--only", default="", help="comma-separated subset of " + ", ".join(RUNNERS))
    ap.add_argument("--paths", type=int)
    args = ap.parse_args(argv)

    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if args.paths:
        cfg = cfg.replace(n_paths=args.paths)
    names = [n for n in args.only.split(",") if n] or list(RUNNERS)
    unknown = set(names) - set(RUNNERS)
    if unknown:
        ap.error(f"unknown experiments: {sorted(unknown)}")

    ws = Workspace(cfg)
    summary = []
    for name in names:
        t0 = time.perf_counter()
        res = run_subcommand(name, cfg, ws)
        write_outputs(name, res, args.out)
        rep = res.report
        n_fail = len(rep.failures())
        summary.append((name, len(rep.checks), n_fail, len(rep.errors), round(time.perf_counter() - t0, 1)))
        print(f"{name:<10} {len(rep.checks):>3} checks  {n_fail:>2} failed  {len(rep.errors)} stage errors"
              f"  {summary[-1][-1]:>7.1f}s")
        for c in rep.failures():
            print(f"    FAIL {c.name}: {c.measured:.6g} {c.relation} {c.bound:.6g} (tol {c.tolerance:.3g})")
            if c.note:
                print(f"         {c.note}")
        for e in rep.errors:
            print(f"    ERROR {e['stage']}: {e['error']}")

    # timings live here rather than in the reports so that reports stay byte-stable
    with open(args.out / "suite_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["experiment", "checks", "failed", "stage_errors", "seconds"])
        w.writerows(summary)
    return 0 if all(s[2] == 0 and s[3] == 0 for s in summary) else 1


if __name__ == "__main__":
    sys.exit(main())
