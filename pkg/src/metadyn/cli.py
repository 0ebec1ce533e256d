"""Command-line entry point (``python -m metadyn``)."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import analysis, harness, metalearners, pipelines, store
from .csvio import UNREACHED, read_csv, write_csv
from .errors import MetadynError
from .numerics import RngStream
from .tasks import BanditTask, FourierTask, LinearTask

TASK_KINDS = {"LinearTask": LinearTask, "FourierTask": FourierTask, "BanditTask": BanditTask}


def cmd_list(args):
    rows = harness.list_experiments()
    w = max(len(r[0]) for r in rows)
    w2 = max(len(r[1]) for r in rows)
    for exp_id, figs, budget in rows:
        print(f"{exp_id:<{w}}  {figs:<{w2}}  {budget}")
    return 0


def cmd_validate(args):
    cfg = harness.load_config(args.config)
    print(f"ok {cfg.experiment} {cfg.hash()}")
    return 0


def cmd_run(args):
    cfg = harness.load_config(args.config)
    try:
        manifest = harness.run(cfg, out=args.out, workers=args.workers, seed=args.seed)
    except MetadynError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    out = harness.resolve_out(cfg, args.out)
    print(f"{manifest['status']} {cfg.experiment} -> {out} ({len(manifest['files'])} files)")
    return 0


def cmd_probe(args):
    cfg = harness.load_config(args.config)
    mcfg, ck = store.import_checkpoint(args.checkpoint)
    n = int(args.episodes or cfg.probe.get("episodes", 100))
    rng = RngStream(cfg.seed).derive("probe-cli", ck.step)
    tasks = metalearners.sample_probe_tasks(mcfg, n, rng.derive("tasks"))
    traces = []
    for start, chunk in pipelines.chunked(tasks):
        traces += metalearners.probe_episodes(ck.params, chunk, mcfg, rng,
                                              episode_ids=list(range(start, start + len(chunk))))
    name = Path(args.checkpoint).with_suffix("").name
    header = traces[0].csv_header()
    rows = [row for i, tr in enumerate(traces) for row in tr.csv_rows(name, ck.step, i)]
    out = Path(args.out) if args.out else Path(harness.resolve_out(cfg)) / "probe"
    write_csv(out / f"{name}_inner.csv", header, rows)
    (out / f"{name}_inner.tasks.jsonl").write_text(
        "".join(json.dumps({"id": i, "kind": type(t).__name__, "task": t.to_json()}, sort_keys=True) + "\n"
                for i, t in enumerate(tasks)))
    q = metalearners.mean_progress(traces)
    print(f"{mcfg.family} checkpoint step {ck.step}: {n} episodes, final mean q = "
          + " ".join(f"{v:.3f}" for v in q[-1]))
    return 0


def _load_tasks(path, n_actions):
    tasks = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        d = json.loads(line)
        cls = TASK_KINDS[d["kind"]]
        tasks[d["id"]] = cls.from_json(d["task"], n_actions) if cls is BanditTask else cls.from_json(d["task"])
    return tasks


def analyze_trace(path: Path, cutoffs):
    """Per-run threshold rows for one trace CSV with its task sidecar."""
    header, rows = read_csv(path)
    sidecar = path.with_name(path.name[: -len(".csv")] + ".tasks.jsonl")
    if not sidecar.exists():
        return None
    inner = header[0] == "meta_run_id"
    n_key = 3 if inner else 1
    step_col = 3 if inner else 1
    first_payload = 4 if inner else 3
    pcols = header[first_payload:]
    n_actions = 1 + max((int(c.split("_a")[1]) for c in pcols if c.startswith("pi_")), default=0)
    tasks = _load_tasks(sidecar, n_actions)
    groups = {}
    for row in rows:
        groups.setdefault(tuple(row[:n_key]), []).append(row)
    out = []
    for key, grp in groups.items():
        task_id = int(float(key[-1])) if inner else int(float(key[0]))
        steps = [float(r[step_col]) for r in grp]
        payload = np.array([[float(v) for v in r[first_payload:]] for r in grp])
        q = analysis.progress_from_columns(tasks[task_id], payload)
        table = analysis.ThresholdTable.from_trace(steps, q, cutoffs)
        run_id = "/".join(key)
        for m, c, s in table.rows():
            out.append([run_id, m, c, UNREACHED if s is None else s])
    return out


def cmd_analyze(args):
    trace_dir = Path(args.trace_dir)
    if not trace_dir.is_dir():
        raise MetadynError(f"{trace_dir}: not a directory")
    cutoffs = [float(c) for c in args.cutoffs.split(",")]
    dest = Path(args.out) if args.out else trace_dir / "analysis"
    n = 0
    for path in sorted(trace_dir.glob("*.csv")):
        if path.name.endswith(".thresholds.csv"):
            continue
        rows = analyze_trace(path, cutoffs)
        if rows is None:
            continue
        write_csv(dest / f"{path.stem}.thresholds.csv", pipelines.THRESHOLD_HEADER, rows)
        reached = sum(r[3] != UNREACHED for r in rows)
        print(f"{path.name}: {len({r[0] for r in rows})} runs, {reached}/{len(rows)} thresholds reached")
        n += 1
    if n == 0:
        print(f"no trace CSVs with task sidecars under {trace_dir}", file=sys.stderr)
        return 1
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="metadyn", description="Learning-dynamics lab for Learners, "
                                "LSTM Meta-Learners and Bayes oracles.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("list", help="list registered experiments").set_defaults(fn=cmd_list)
    v = sub.add_parser("validate", help="check an experiment config")
    v.add_argument("config")
    v.set_defaults(fn=cmd_validate)
    r = sub.add_parser("run", help="run an experiment")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (default $METADYN_OUT/<experiment>)")
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--seed", type=int)
    r.set_defaults(fn=cmd_run)
    pr = sub.add_parser("probe", help="probe a saved Meta-Learner checkpoint")
    pr.add_argument("checkpoint")
    pr.add_argument("config")
    pr.add_argument("--episodes", type=int)
    pr.add_argument("--out")
    pr.set_defaults(fn=cmd_probe)
    a = sub.add_parser("analyze", help="steps-to-threshold tables from trace CSVs")
    a.add_argument("trace_dir")
    a.add_argument("--cutoffs", default=",".join(str(c) for c in harness.CUTOFFS))
    a.add_argument("--out")
    a.set_defaults(fn=cmd_analyze)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except MetadynError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
