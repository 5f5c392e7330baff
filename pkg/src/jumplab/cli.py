"""Command line front end: ``jumplab run|verify|green|report``.

Output layout under <out>/<scenario name>/:
  <table>.csv      one per report table; floats in shortest round-trip form
  summary.json     per experiment: constants, tolerances, verdicts, seeds, versions
  metadata.json    wall times, worker count, timestamps (the only volatile file)

Exit status: 0 success, 1 an experiment raised, 2 bad scenario or usage,
3 a verification verdict failed, 4 a refusal was expected but not seen or
seen but not expected.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import platform
import sys
import time
import traceback
from dataclasses import replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import grid as gr
from .errors import ConfigError, JumplabError
from .experiments import RUNNERS, Context, Table, verify_suite
from .scenario import Scenario, load

ENV_OUT = "JUMPLAB_OUT"
EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_FAIL, EXIT_REFUSAL = 0, 1, 2, 3, 4


def _cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def table_csv(t: Table) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(t.columns)
    for row in t.rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def _json_safe(v):
    if isinstance(v, dict):
        return {str(k): _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    if isinstance(v, (np.floating,)):
        v = float(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, float) and not np.isfinite(v):
        return repr(v)
    return v


def versions() -> dict:
    import numba
    import scipy
    return {"jumplab": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "numba": numba.__version__, "python": platform.python_version()}


def out_root(args, sc: Scenario) -> Path:
    root = args.out or os.environ.get(ENV_OUT) or sc.out or "jumplab-out"
    return Path(root) / sc.name


def _load(args) -> Scenario:
    sc = load(args.file, diagnostic_ok=args.diagnostic_ok)
    if args.paper_mode:
        sc = replace(sc, paper_mode=True)
        sc.validate(diagnostic_ok=args.diagnostic_ok)
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("seed: must be >= 0")
        sc = replace(sc, seed=args.seed)
    return sc


def _write(outdir: Path, tables: list, summary: dict, meta: dict):
    outdir.mkdir(parents=True, exist_ok=True)
    for t in tables:
        (outdir / f"{t.name}.csv").write_text(table_csv(t))
    (outdir / "summary.json").write_text(json.dumps(_json_safe(summary), indent=2, sort_keys=True) + "\n")
    (outdir / "metadata.json").write_text(json.dumps(_json_safe(meta), indent=2, sort_keys=True) + "\n")


def _refused(tables) -> bool:
    for t in tables:
        if t.summary.get("refused"):
            return True
        if any("REFUSED" in [str(v) for v in row] for row in t.rows):
            return True
    return False


def _failed(tables) -> bool:
    return any("FAIL" in [str(v) for v in row] for t in tables for row in t.rows)


def _finish(sc: Scenario, tables, errors, status_fail: bool) -> int:
    refused = _refused(tables)
    if errors:
        return EXIT_ERROR
    if refused != sc.expect_refusal:
        return EXIT_REFUSAL
    if status_fail:
        return EXIT_FAIL
    return EXIT_OK


def cmd_run(args) -> int:
    sc = _load(args)
    ctx = Context(sc, workers=args.workers)
    tables, summary, errors, walls = [], {}, {}, {}
    for name in sc.experiments:
        t0 = time.perf_counter()
        try:
            res = RUNNERS[name](ctx)
            tables += res
            summary[name] = {"tables": {t.name: t.summary for t in res}}
        except JumplabError as exc:
            errors[name] = f"{type(exc).__name__}: {exc}"
            summary[name] = {"error": errors[name]}
        except Exception as exc:  # captured so later experiments still run
            errors[name] = f"{type(exc).__name__}: {exc}"
            summary[name] = {"error": errors[name], "traceback": traceback.format_exc()}
        walls[name] = time.perf_counter() - t0
    status = _finish(sc, tables, errors, _failed(tables))
    outdir = out_root(args, sc)
    doc = {"command": "run", "scenario": sc.canonical(), "experiments": summary, "seed": sc.seed,
           "versions": versions(), "exit_status": status}
    meta = {"started": datetime.now(timezone.utc).isoformat(), "wall_seconds": walls,
            "workers": args.workers, "host": platform.node()}
    _write(outdir, tables, doc, meta)
    for name, msg in errors.items():
        print(f"error in {name}: {msg}", file=sys.stderr)
    print(f"wrote {len(tables)} tables to {outdir} (status {status})")
    return status


def cmd_verify(args) -> int:
    sc = _load(args)
    ctx = Context(sc, workers=args.workers)
    t0 = time.perf_counter()
    errors = {}
    try:
        tables = verify_suite(ctx)
    except JumplabError as exc:
        tables = []
        errors["verify"] = f"{type(exc).__name__}: {exc}"
    verdicts = {}
    for t in tables:
        for row in t.rows:
            if row and row[-1] in ("PASS", "FAIL", "REFUSED", "NO_CERTIFICATE"):
                verdicts[f"{t.name}:{row[0]}"] = row[-1]
    status = _finish(sc, tables, errors, _failed(tables))
    outdir = out_root(args, sc) / "verify"
    doc = {"command": "verify", "scenario": sc.canonical(), "verdicts": verdicts,
           "tables": {t.name: t.summary for t in tables}, "errors": errors, "seed": sc.seed,
           "versions": versions(), "exit_status": status}
    meta = {"started": datetime.now(timezone.utc).isoformat(), "wall_seconds": time.perf_counter() - t0,
            "workers": args.workers, "host": platform.node()}
    _write(outdir, tables, doc, meta)
    for k, v in verdicts.items():
        print(f"{v:15s} {k}")
    for name, msg in errors.items():
        print(f"error in {name}: {msg}", file=sys.stderr)
    return status


def cmd_green(args) -> int:
    sc = _load(args)
    ctx = Context(sc, workers=args.workers)
    gm = ctx.grid()
    outdir = out_root(args, sc)
    outdir.mkdir(parents=True, exist_ok=True)
    extra = {"scenario": sc.name, "preset": sc.preset, "potential": sc.potential}
    gr.save_matrix(outdir / "green.bin", gm.G, gm.mesh, extra)
    if args.text:
        gr.save_triplets(outdir / "green.txt", gm.G)
    print(f"wrote {gm.gen.n}x{gm.gen.n} Green matrix (h={gm.h!r}) to {outdir / 'green.bin'}")
    return EXIT_OK


def cmd_report(args) -> int:
    root = Path(args.dir)
    files = sorted(root.rglob("summary.json"))
    if not files:
        print(f"no summary.json under {root}", file=sys.stderr)
        return EXIT_CONFIG
    for f in files:
        doc = json.loads(f.read_text())
        print(f"== {f.parent} ({doc.get('command')}, seed {doc.get('seed')}, status {doc.get('exit_status')})")
        if "verdicts" in doc:
            for k, v in doc["verdicts"].items():
                print(f"  {v:15s} {k}")
        for name, ex in doc.get("experiments", {}).items():
            if "error" in ex:
                print(f"  {name}: ERROR {ex['error']}")
                continue
            for tname, summ in ex.get("tables", {}).items():
                items = ", ".join(f"{k}={v}" for k, v in summ.items())
                print(f"  {tname}: {items}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jumplab", description="Jump-diffusion Monte-Carlo and grid oracle toolkit")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("file", help="scenario TOML file")
        sp.add_argument("--seed", type=int, default=None, help="override the scenario seed")
        sp.add_argument("--workers", type=int, default=1, help="worker threads for path simulation")
        sp.add_argument("--out", default=None, help=f"output root (default ${ENV_OUT} or ./jumplab-out)")
        sp.add_argument("--paper-mode", action="store_true", help="force paper-mode validation")
        sp.add_argument("--diagnostic-ok", action="store_true",
                        help="allow diagnostic presets and R > 1/2")

    common(sub.add_parser("run", help="run the experiments listed in a scenario"))
    common(sub.add_parser("verify", help="inequality suite at two budgets"))
    g = sub.add_parser("green", help="export the Green matrix of the default mesh")
    common(g)
    g.add_argument("--text", action="store_true", help="also write text triplets")
    r = sub.add_parser("report", help="print summaries found under a directory")
    r.add_argument("dir")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "workers", 1) is not None and getattr(args, "workers", 1) < 1:
        parser.error("--workers must be >= 1")
    cmds = {"run": cmd_run, "verify": cmd_verify, "green": cmd_green, "report": cmd_report}
    try:
        return cmds[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
