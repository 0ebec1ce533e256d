"""Experiment pipelines: train, probe, analyse, and emit figure data.

Each pipeline takes a validated :class:`~metadyn.harness.ExperimentConfig`
and a :class:`~metadyn.harness.RunContext` that owns every file written.
Replica ``r`` always draws from ``RngStream(seed).derive("replica", r)`` and
probe episodes are processed in fixed-size chunks, so worker count never
changes a number.
"""
from __future__ import annotations


import numpy as np

from . import analysis, metalearners, oracles
from .csvio import UNREACHED, figure_rows
from .learners import (
    bandit_learner_config,
    fourier_learner_config,
    linear_learner_config,
    train_bandit_coupled,
    train_bandit_decoupled,
    train_fourier_learner,
    train_linear_learner,
    train_lstm_control,
)
from .numerics import RngStream
from .tasks import (
    LinearTaskDistribution,
    expected_spectrum,
    sample_bandit_task,
    sample_fourier_episode,
    sample_fourier_task,
    sample_linear_episode,
    sample_linear_task,
    singular_value_samples,
    spectrum_percentiles,
)

PROBE_CHUNK = 50
PERCENTILE_SAMPLES = 100_000


def replica_rng(cfg, r):
    return RngStream(cfg.seed).derive("replica", r)


# --------------------------------------------------------------------------
# Config -> library objects
# --------------------------------------------------------------------------


def learner_config(cfg, family):
    sec = dict(cfg.learner)
    if "hidden" in sec:
        sec["hidden"] = tuple(sec["hidden"])
    if family == "linear-regression":
        return linear_learner_config(**sec)
    if family == "fourier-regression":
        return fourier_learner_config(**sec)
    return bandit_learner_config(coupled=family == "bandit-coupled", **sec)


def meta_config(cfg, family=None):
    sec = dict(cfg.meta)
    n_ck = sec.pop("n_checkpoints")
    fam = family or sec.pop("family", None)
    sec.pop("family", None)
    # unset task options are dropped so they fall back to library defaults
    task = {k: (list(v) if isinstance(v, tuple) else v) for k, v in sec.pop("task").items() if v is not None}
    return metalearners.MetaTrainConfig(family=fam, task=task, checkpoints=tuple(analysis.log_schedule(sec["budget"], n_ck)),
                                        **sec)


# --------------------------------------------------------------------------
# Small shared helpers
# --------------------------------------------------------------------------


def hold_last(steps_list, q_list):
    """Align runs of different lengths on the union of their steps, holding final values."""
    grid = sorted(set().union(*[set(s) for s in steps_list]))
    out = []
    for steps, q in zip(steps_list, q_list):
        idx = np.searchsorted(np.asarray(steps), grid, side="right") - 1
        out.append(np.asarray(q)[np.maximum(idx, 0)])
    return grid, out


def curve_rows(x, qs, series_prefix="k"):
    """Mean (and stderr over replicas) of ``[n, K]`` curves, one series per column."""
    agg = analysis.aggregate(qs)
    rows = []
    for k in range(agg.mean.shape[1]):
        se = None if agg.stderr is None else agg.stderr[:, k]
        rows += figure_rows(x, f"{series_prefix}{k + 1}", agg.mean[:, k], se)
    return rows


def single_rows(x, q, series_prefix="k"):
    rows = []
    for k in range(q.shape[1]):
        rows += figure_rows(x, f"{series_prefix}{k + 1}", q[:, k])
    return rows


def threshold_rows(tables, xvals, cutoffs):
    """Figure rows for steps-to-threshold: one series per cutoff, unreached runs dropped.

    ``tables[r]`` is a ThresholdTable and ``xvals[r][m]`` the x value of mode ``m``.
    """
    rows = []
    for c in cutoffs:
        groups = {}
        for table, xv in zip(tables, xvals):
            for m in table.modes:
                s = table.get(m, c)
                if s is not None:
                    groups.setdefault(xv[m], []).append(s)
        for x in sorted(groups):
            vals = np.asarray(groups[x], dtype=float)
            se = vals.std(ddof=1) / np.sqrt(len(vals)) if len(vals) > 1 else None
            rows.append([x, f"c{c}", float(vals.mean()), se])
    return rows


def threshold_trace_rows(run_id, table):
    for m, c, s in table.rows():
        yield [run_id, m, c, UNREACHED if s is None else s]


THRESHOLD_HEADER = ["run_id", "mode", "cutoff", "step"]


def chunked(items, size=PROBE_CHUNK):
    return [(i, items[i : i + size]) for i in range(0, len(items), size)]


def probe_all(ctx, params, tasks, mcfg, rng):
    """Probe ``tasks`` in fixed chunks (parallel over chunks) and return traces in order."""
    jobs = [(params, chunk, mcfg, rng, list(range(start, start + len(chunk)))) for start, chunk in chunked(tasks)]
    out = []
    for res in ctx.map(_probe_job, jobs):
        out.extend(res)
    return out


def _probe_job(job):
    params, tasks, mcfg, rng, ids = job
    return metalearners.probe_episodes(params, tasks, mcfg, rng, episode_ids=ids)


def _emit_inner_traces(ctx, name, traces, meta_run_id, checkpoint_step):
    header = traces[0].csv_header()
    rows = [row for i, tr in enumerate(traces) for row in tr.csv_rows(meta_run_id, checkpoint_step, i)]
    ctx.trace(name, header, rows)
    ctx.tasks(name, [tr.task for tr in traces])


def _emit_learner_traces(ctx, name, traces):
    rows = [row for r, tr in enumerate(traces) for row in tr.csv_rows(r)]
    ctx.trace(name, traces[0].csv_header(), rows)
    ctx.tasks(name, [tr.task for tr in traces])


# --------------------------------------------------------------------------
# Linear regression
# --------------------------------------------------------------------------


def _linear_learner_job(job):
    lcfg, task_sec, spectrum, rng = job
    dist = LinearTaskDistribution("fixed-spectrum", task_sec["nx"], task_sec["ny"], spectrum=tuple(spectrum),
                                  noise_std=task_sec["noise_std"])
    task = sample_linear_task(dist, rng.derive("task"))
    trace = train_linear_learner(task, lcfg, rng.derive("train"))
    trace.meta["spectrum"] = sorted((float(v) for v in spectrum), reverse=True)
    return trace


def run_linear_learners(cfg, ctx, lcfg=None):
    lcfg = lcfg or learner_config(cfg, "linear-regression")
    spectra = cfg.task["spectra"]
    jobs = [(lcfg, cfg.task, spectra[r % len(spectra)], replica_rng(cfg, r)) for r in range(cfg.replicas)]
    return ctx.map(_linear_learner_job, jobs)


def linear_learner_figures(cfg, ctx, traces, fig_curve, fig_thresh, fig_perf):
    _emit_learner_traces(ctx, "learner", traces)
    qs = [tr.progress() for tr in traces]
    steps = traces[0].steps
    fig, panel = fig_curve
    ctx.figure(fig, panel, single_rows(steps, qs[0]))
    ctx.figure(fig, chr(ord(panel) + 1), curve_rows(steps, qs))
    tables, xvals = [], []
    trows = []
    for r, (tr, q) in enumerate(zip(traces, qs)):
        table = analysis.ThresholdTable.from_trace(tr.steps, q, cfg.cutoffs)
        tables.append(table)
        xvals.append({m: tr.meta["spectrum"][m - 1] for m in table.modes})
        trows.extend(threshold_trace_rows(r, table))
    ctx.trace("thresholds", THRESHOLD_HEADER, trows)
    ctx.figure(*fig_thresh, threshold_rows(tables, xvals, cfg.cutoffs))
    perf = -np.mean([tr.loss for tr in traces], axis=0)
    ctx.figure(*fig_perf, curve_rows(perf, qs))


def exp1_learner(cfg, ctx):
    traces = run_linear_learners(cfg, ctx)
    linear_learner_figures(cfg, ctx, traces, ("1", "a"), ("1", "c"), ("4", "a"))


def exp1_adam(cfg, ctx):
    traces = run_linear_learners(cfg, ctx)
    linear_learner_figures(cfg, ctx, traces, ("7", "a"), ("7", "c"), ("7", "d"))


def trained_meta_replicas(cfg, ctx, mcfg):
    return [ctx.meta(mcfg, r) for r in range(cfg.meta_replicas)]


def linear_probe_spectra(cfg, mcfg):
    dist = metalearners.linear_distribution(mcfg)
    rng = RngStream(cfg.seed).derive("percentiles")
    pcts = list(cfg.probe["percentiles"])
    vals = spectrum_percentiles(dist, pcts, PERCENTILE_SAMPLES, rng)
    return dist, dict(zip(pcts, (float(v) for v in vals)))


def linear_probe_tasks(dist, spectrum, n, rng):
    d = LinearTaskDistribution("fixed-spectrum", dist.nx, dist.ny, spectrum=tuple(spectrum), noise_std=dist.noise_std)
    return [sample_linear_task(d, rng.derive("task", i)) for i in range(n)]


def _spectrum_for(dist, value):
    return [value] * min(dist.nx, dist.ny)


def exp1_meta(cfg, ctx):
    mcfg = meta_config(cfg)
    runs = trained_meta_replicas(cfg, ctx, mcfg)
    dist, pct = linear_probe_spectra(cfg, mcfg)
    pooled = singular_value_samples(dist, PERCENTILE_SAMPLES, RngStream(cfg.seed).derive("percentiles")).ravel()
    hist, edges = np.histogram(pooled, bins=50, density=True)
    rows = figure_rows(0.5 * (edges[1:] + edges[:-1]), "density", hist)
    rows += [[v, f"p{p}", 0.0, None] for p, v in pct.items()]
    ctx.figure("2", "b", rows)
    hi, lo = cfg.probe["ratio_percentiles"]
    n = cfg.probe["episodes"]
    t = np.arange(1, mcfg.T + 1)
    per_rep_q, tables, xvals, trows = [], [], [], []
    sweep_tables, sweep_x = [], []
    for r, cks in enumerate(runs):
        params = cks[-1].params
        prng = RngStream(cfg.seed).derive("probe", r)
        tasks = linear_probe_tasks(dist, [pct[hi], pct[lo]], n, prng.derive("ratio-tasks"))
        traces = probe_all(ctx, params, tasks, mcfg, prng.derive("ratio"))
        _emit_inner_traces(ctx, f"inner_r{r}", traces, f"meta{r}", cks[-1].step)
        qs = [tr.progress() for tr in traces]
        if r == 0:
            ctx.figure("3", "a", single_rows(t, qs[0]))
        q = np.mean(qs, axis=0)
        per_rep_q.append(q)
        table = analysis.ThresholdTable.from_trace(t, q, cfg.cutoffs)
        tables.append(table)
        xvals.append({1: pct[hi], 2: pct[lo]})
        trows.extend(threshold_trace_rows(r, table))
        # threshold vs singular value: tasks with a flat spectrum at each percentile
        for p, v in pct.items():
            flat = linear_probe_tasks(dist, _spectrum_for(dist, v), n, prng.derive("flat", p))
            qf = metalearners.mean_progress(probe_all(ctx, params, flat, mcfg, prng.derive("flat-probe", p)))
            tb = analysis.ThresholdTable.from_trace(t, qf[:, :1], cfg.cutoffs)
            sweep_tables.append(tb)
            sweep_x.append({1: v})
    ctx.trace("thresholds", THRESHOLD_HEADER, trows)
    ctx.figure("3", "b", curve_rows(t, per_rep_q))
    ctx.figure("3", "c", threshold_rows(sweep_tables, sweep_x, cfg.cutoffs))
    ctx.figure("3", "d", threshold_rows(tables, xvals, cfg.cutoffs))


def exp1_ood(cfg, ctx):
    mcfg = meta_config(cfg)
    runs = trained_meta_replicas(cfg, ctx, mcfg)
    dist, pct = linear_probe_spectra(cfg, mcfg)
    n = cfg.probe["episodes"]
    t = np.arange(1, mcfg.T + 1)
    values = [("in", p, pct[p]) for p in cfg.probe["percentiles"]]
    values += [("ood", f, f * pct[max(pct)]) for f in cfg.probe["ood_factors"]]
    rows_a, rows_b = [], []
    for kind, label, v in values:
        per_rep = []
        for r, cks in enumerate(runs):
            prng = RngStream(cfg.seed).derive("probe", r)
            tasks = linear_probe_tasks(dist, _spectrum_for(dist, v), n, prng.derive("ood-tasks", str(label)))
            q = metalearners.mean_progress(probe_all(ctx, cks[-1].params, tasks, mcfg, prng.derive("ood", str(label))))
            per_rep.append(q[:, :1])
        agg = analysis.aggregate(per_rep)
        se = None if agg.stderr is None else agg.stderr[:, 0]
        sid = f"{kind}_s{v!r}"
        rows_a += figure_rows(t, sid, agg.mean[:, 0], se)
        rows_b.append([v, kind, float(agg.mean[-1, 0]), None if se is None else float(se[-1])])
    ctx.figure("5", "a", rows_a)
    ctx.figure("5", "b", rows_b)


def exp1_bayes(cfg, ctx):
    sec = cfg.task
    dist = LinearTaskDistribution("matrix-normal", sec["nx"], sec["ny"], noise_std=sec["noise_std"])
    spectrum = sec["spectra"][0] if sec["spectra"] else expected_spectrum(
        dist, PERCENTILE_SAMPLES, RngStream(cfg.seed).derive("expected-spectrum"))
    n, T = cfg.probe["episodes"], cfg.probe["T"]
    jobs = [(spectrum, dist, T, RngStream(cfg.seed).derive("episodes"), start, len(chunk))
            for start, chunk in chunked(list(range(n)))]
    results = []
    for res in ctx.map(_linear_oracle_job, jobs):
        results.extend(res)
    traces = [tr for tr, _ in results]
    qs = [q for _, q in results]
    t = np.arange(0, T + 1)
    _emit_inner_traces(ctx, "oracle", traces, "bayes", 0)
    ctx.figure("6", "a", curve_rows(t, qs))
    q = np.mean(qs, axis=0)
    table = analysis.ThresholdTable.from_trace(t, q, cfg.cutoffs)
    ctx.figure("6", "b", threshold_rows([table], [{m: float(spectrum[m - 1]) for m in table.modes}], cfg.cutoffs))


def _linear_oracle_job(job):
    spectrum, dist, T, rng, start, count = job
    out = []
    for i in range(start, start + count):
        er = rng.derive("episode", i)
        task = linear_probe_tasks(dist, spectrum, 1, er)[0]
        ep = sample_linear_episode(task, T, er.derive("obs"))
        w_bar = oracles.linear_oracle_trace(task, ep.inputs, ep.targets)
        tr = metalearners.InnerTrace("linear", w_bar, task, {"episode_id": i})
        out.append((tr, tr.progress()))
    return out


def _control_figures(ctx, fig, trace):
    _emit_learner_traces(ctx, "control", [trace])
    q = trace.progress()
    ctx.figure(fig, "a", single_rows(trace.steps, q))


def exp1_lstm_control(cfg, ctx):
    mcfg = meta_config(cfg)
    trace = train_lstm_control(mcfg, RngStream(cfg.seed).derive("control"))
    trace.meta.pop("checkpoints", None)
    _control_figures(ctx, "A4", trace)


# --------------------------------------------------------------------------
# Fourier regression
# --------------------------------------------------------------------------


def _fourier_learner_job(job):
    lcfg, sec, rng = job
    task = sample_fourier_task(sec["mode"], rng.derive("task"), sec["n_modes"], sec["noise_std"], tuple(sec["band"]))
    return train_fourier_learner(task, lcfg, rng.derive("train"))


def exp2_learner(cfg, ctx):
    lcfg = learner_config(cfg, "fourier-regression")
    traces = ctx.map(_fourier_learner_job, [(lcfg, cfg.task, replica_rng(cfg, r)) for r in range(cfg.replicas)])
    _emit_learner_traces(ctx, "learner", traces)
    qs = [tr.progress() for tr in traces]
    steps = traces[0].steps
    ctx.figure("8", "a", single_rows(steps, qs[0]))
    ctx.figure("8", "b", curve_rows(steps, qs))
    tables, trows = [], []
    for r, (tr, q) in enumerate(zip(traces, qs)):
        table = analysis.ThresholdTable.from_trace(tr.steps, q, cfg.cutoffs)
        tables.append(table)
        trows.extend(threshold_trace_rows(r, table))
    ctx.trace("thresholds", THRESHOLD_HEADER, trows)
    ctx.figure("8", "c", threshold_rows(tables, [{m: m for m in t.modes} for t in tables], cfg.cutoffs))


def fourier_probe_tasks(sec, n, rng):
    return [sample_fourier_task(sec["mode"], rng.derive("task", i), sec["n_modes"], sec["noise_std"], tuple(sec["band"]))
            for i in range(n)]


def _meta_probe_figures(cfg, ctx, runs, mcfg, tasks_for, fig, panels, rank_order=False, name="inner"):
    """Probe the final checkpoint of every replica; emit single/mean/threshold panels."""
    t = np.arange(1, mcfg.T + 1)
    per_rep, tables, trows = [], [], []
    for r, cks in enumerate(runs):
        prng = RngStream(cfg.seed).derive("probe", r)
        tasks = tasks_for(prng.derive("tasks"))
        traces = probe_all(ctx, cks[-1].params, tasks, mcfg, prng.derive("episodes"))
        _emit_inner_traces(ctx, f"{name}_r{r}", traces, f"meta{r}", cks[-1].step)
        qs = [tr.progress() for tr in traces]
        if rank_order:
            qs = [analysis.rank_order_contexts(q)[1] for q in qs]
        if r == 0:
            ctx.figure(fig, panels[0], single_rows(t, qs[0]))
        q = np.mean(qs, axis=0)
        per_rep.append(q)
        table = analysis.ThresholdTable.from_trace(t, q, cfg.cutoffs)
        tables.append(table)
        trows.extend(threshold_trace_rows(r, table))
    ctx.trace(f"{name}_thresholds", THRESHOLD_HEADER, trows)
    ctx.figure(fig, panels[1], curve_rows(t, per_rep))
    ctx.figure(fig, panels[2], threshold_rows(tables, [{m: m for m in tb.modes} for tb in tables], cfg.cutoffs))
    return per_rep, tables


def exp2_meta(cfg, ctx):
    mcfg = meta_config(cfg)
    runs = trained_meta_replicas(cfg, ctx, mcfg)
    _meta_probe_figures(cfg, ctx, runs, mcfg, lambda rng: fourier_probe_tasks(cfg.task, cfg.probe["episodes"], rng),
                        "8", "def")


def exp2_bandpass(cfg, ctx):
    mcfg = meta_config(cfg)
    runs = trained_meta_replicas(cfg, ctx, mcfg)
    # probe on full-band tasks so that stop-band modes have a defined projection
    sec = dict(cfg.task, mode="unit")
    _meta_probe_figures(cfg, ctx, runs, mcfg, lambda rng: fourier_probe_tasks(sec, cfg.probe["episodes"], rng),
                        "A6", "abc")


def _fourier_oracle_job(job):
    sec, T, bins, rng, start, count = job
    out = []
    for i in range(start, start + count):
        er = rng.derive("episode", i)
        task = oracles.bin_center_task(er.derive("task"), sec["n_modes"], bins, sec["noise_std"])
        ep = sample_fourier_episode(task, T, er.derive("obs"))
        g_bar = oracles.fourier_oracle_trace(task, ep.inputs[:, 0], ep.targets[:, 0], bins=bins)
        tr = metalearners.InnerTrace("fourier", g_bar, task, {"episode_id": i})
        out.append((tr, tr.progress()))
    return out


def exp2_bayes(cfg, ctx):
    n, T = cfg.probe["episodes"], cfg.probe["T"]
    jobs = [(cfg.task, T, cfg.probe["bins"], RngStream(cfg.seed).derive("episodes"), s, len(c))
            for s, c in chunked(list(range(n)), 10)]
    results = []
    for res in ctx.map(_fourier_oracle_job, jobs):
        results.extend(res)
    traces = [tr for tr, _ in results]
    qs = [q for _, q in results]
    t = np.arange(0, T + 1)
    _emit_inner_traces(ctx, "oracle", traces, "bayes", 0)
    ctx.figure("8", "g", curve_rows(t, qs))
    table = analysis.ThresholdTable.from_trace(t, np.mean(qs, axis=0), cfg.cutoffs)
    ctx.figure("8", "h", threshold_rows([table], [{m: m for m in table.modes}], cfg.cutoffs))


def exp2_lstm_control(cfg, ctx):
    mcfg = meta_config(cfg)
    trace = train_lstm_control(mcfg, RngStream(cfg.seed).derive("control"))
    trace.meta.pop("checkpoints", None)
    _control_figures(ctx, "A7", trace)


# --------------------------------------------------------------------------
# Contextual bandits
# --------------------------------------------------------------------------


def bandit_task_from(sec, rng):
    return sample_bandit_task(rng, sec["n_contexts"], sec["n_actions"], sec["p_correct"], sec["p_incorrect"],
                              sec["conflict"])


def _bandit_learner_job(job):
    lcfg, sec, rng = job
    task = bandit_task_from(sec, rng.derive("task"))
    train = train_bandit_coupled if lcfg.family == "bandit-coupled" else train_bandit_decoupled
    return train(task, lcfg, rng.derive("train"))


def bandit_learner_runs(cfg, ctx, family):
    lcfg = learner_config(cfg, family)
    return ctx.map(_bandit_learner_job, [(lcfg, cfg.task, replica_rng(cfg, r)) for r in range(cfg.replicas)])


def bandit_learner_stats(traces, cutoffs):
    """Rank-ordered curves and per-run threshold tables."""
    qs = [analysis.rank_order_contexts(tr.progress())[1] for tr in traces]
    tables = [analysis.ThresholdTable.from_trace(tr.steps, q, cutoffs) for tr, q in zip(traces, qs)]
    return qs, tables


def exp3_learner(cfg, ctx):
    for family, panels in (("bandit-coupled", "abc"), ("bandit-decoupled", "def")):
        traces = bandit_learner_runs(cfg, ctx, family)
        tag = family.split("-")[1]
        _emit_learner_traces(ctx, f"learner_{tag}", traces)
        qs, tables = bandit_learner_stats(traces, cfg.cutoffs)
        ctx.figure("9", panels[0], single_rows(traces[0].steps, qs[0]))
        grid, aligned = hold_last([tr.steps for tr in traces], qs)
        ctx.figure("9", panels[1], curve_rows(grid, aligned))
        ctx.figure("9", panels[2], threshold_rows(tables, [{m: m for m in t.modes} for t in tables], cfg.cutoffs))
        ctx.trace(f"thresholds_{tag}", THRESHOLD_HEADER,
                  [row for r, t in enumerate(tables) for row in threshold_trace_rows(r, t)])


def bandit_probe_tasks(sec, n, rng):
    return [bandit_task_from(sec, rng.derive("task", i)) for i in range(n)]


def exp3_meta(cfg, ctx):
    out = {}
    for family, panels in (("bandit-coupled", "ghi"), ("bandit-decoupled", "jkl")):
        mcfg = meta_config(cfg, family)
        runs = trained_meta_replicas(cfg, ctx, mcfg)
        tag = family.split("-")[1]
        out[family] = _meta_probe_figures(
            cfg, ctx, runs, mcfg, lambda rng: bandit_probe_tasks(cfg.task, cfg.probe["episodes"], rng), "9", panels,
            rank_order=True, name=f"inner_{tag}")
        if family == "bandit-coupled":
            outer_sweep_figures(cfg, ctx, runs, mcfg, "12",
                                lambda rng: bandit_probe_tasks(cfg.task, cfg.probe["sweep_episodes"], rng))
    return out


def _bandit_oracle_job(job):
    sec, T, rng, start, count = job
    out = []
    for i in range(start, start + count):
        er = rng.derive("episode", i)
        task = bandit_task_from(sec, er.derive("task"))
        contexts = er.derive("contexts").integers(0, task.n_contexts, size=T)
        actions = er.derive("act").integers(0, task.n_actions, size=T)
        p = task.reward_probs()[contexts, actions]
        rewards = (er.derive("reward").random(size=T) < p).astype(float)
        post = oracles.bandit_oracle_trace(task, contexts, actions, rewards)
        tr = metalearners.InnerTrace("bandit-coupled", post, task, {"episode_id": i},
                                     {"contexts": contexts, "actions": actions, "rewards": rewards})
        out.append((tr, analysis.rank_order_contexts(tr.progress())[1]))
    return out


def exp3_bayes(cfg, ctx):
    n, T = cfg.probe["episodes"], cfg.probe["T"]
    jobs = [(cfg.task, T, RngStream(cfg.seed).derive("episodes"), s, len(c)) for s, c in chunked(list(range(n)))]
    results = []
    for res in ctx.map(_bandit_oracle_job, jobs):
        results.extend(res)
    traces = [tr for tr, _ in results]
    qs = [q for _, q in results]
    t = np.arange(0, T + 1)
    _emit_inner_traces(ctx, "oracle", traces, "bayes", 0)
    ctx.figure("9", "m", curve_rows(t, qs))
    table = analysis.ThresholdTable.from_trace(t, np.mean(qs, axis=0), cfg.cutoffs)
    ctx.figure("9", "n", threshold_rows([table], [{m: m for m in table.modes}], cfg.cutoffs))


# --------------------------------------------------------------------------
# Outer-loop dynamics
# --------------------------------------------------------------------------


def outer_sweep_figures(cfg, ctx, runs, mcfg, fig, tasks_for):
    cutoff = cfg.probe["sweep_cutoff"]
    rows_a, rows_b, trows = [], [], []
    for r, cks in enumerate(runs):
        rng = RngStream(cfg.seed).derive("sweep", r)
        tasks = tasks_for(rng.derive("tasks"))
        for ck in cks:
            traces = probe_all(ctx, ck.params, tasks, mcfg, rng.derive("episodes"))
            q = metalearners.mean_progress(traces, rank_order=mcfg.family.startswith("bandit"))
            table = analysis.ThresholdTable.from_trace(np.arange(1, mcfg.T + 1), q, (cutoff,))
            for m in table.modes:
                s = table.get(m, cutoff)
                trows.append([r, ck.step, m, cutoff, UNREACHED if s is None else s])
                if s is not None:
                    rows_a.append([ck.step, f"k{m}_r{r}", s, None])
                rows_b.append([ck.step, f"k{m}_r{r}", float(q[-1, m - 1]), None])
    ctx.trace("outer_dynamics", ["run_id", "outer_step", "mode", "cutoff", "inner_step"], trows)
    ctx.figure(fig, "a", rows_a)
    ctx.figure(fig, "b", rows_b)


def outer_dynamics_1(cfg, ctx):
    mcfg = meta_config(cfg)
    runs = trained_meta_replicas(cfg, ctx, mcfg)
    dist, pct = linear_probe_spectra(cfg, mcfg)
    hi, lo = cfg.probe["ratio_percentiles"]
    outer_sweep_figures(cfg, ctx, runs, mcfg, "10",
                        lambda rng: linear_probe_tasks(dist, [pct[hi], pct[lo]], cfg.probe["sweep_episodes"], rng))


def outer_dynamics_2(cfg, ctx):
    mcfg = meta_config(cfg)
    runs = trained_meta_replicas(cfg, ctx, mcfg)
    outer_sweep_figures(cfg, ctx, runs, mcfg, "11",
                        lambda rng: fourier_probe_tasks(cfg.task, cfg.probe["sweep_episodes"], rng))


def outer_dynamics_3(cfg, ctx):
    mcfg = meta_config(cfg, "bandit-coupled")
    runs = trained_meta_replicas(cfg, ctx, mcfg)
    outer_sweep_figures(cfg, ctx, runs, mcfg, "12",
                        lambda rng: bandit_probe_tasks(cfg.task, cfg.probe["sweep_episodes"], rng))
