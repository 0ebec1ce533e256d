"""Experiment orchestration: config validation, registry, runs and manifests."""
from __future__ import annotations

import copy
import hashlib
import json
import logging
import os
import pickle
import platform
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, pipelines, store
from .csvio import FIGURE_COLUMNS, write_csv
from .errors import ConfigError, MetadynError

log = logging.getLogger(__name__)

DEFAULT_OUT = "metadyn-out"
CUTOFFS = [0.5, 0.6, 0.7, 0.8, 0.9]
EXPECTED_5D_SPECTRUM = [3.648, 2.586, 1.738, 0.977, 0.307]

# --------------------------------------------------------------------------
# Section defaults
# --------------------------------------------------------------------------

LINEAR_LEARNER = {"hidden": [10], "activation": "linear", "optimizer": "sgd", "lr": 1e-3, "batch_size": 100,
                  "steps": 4000, "init_sigma": 0.1, "bias_sigma": 0.0, "n_probe": 100}
LINEAR_TASK = {"nx": 2, "ny": 2, "noise_std": 0.01, "spectra": [[3.0, 0.06]]}
FOURIER_LEARNER = {"hidden": [256] * 5, "activation": "relu", "optimizer": "adam", "lr": 1e-4, "batch_size": 40,
                   "steps": 5000, "init_sigma": None, "bias_sigma": None}
FOURIER_TASK = {"mode": "unit", "n_modes": 5, "noise_std": 0.01, "band": [3, 5]}
BANDIT_LEARNER = {"optimizer": "adam", "lr": 1e-4, "batch_size": 200, "steps": 200_000,
                  "init_sigma": 1.0 / np.sqrt(5.0), "bias_sigma": 1.0 / np.sqrt(5.0), "stop_at": 0.98}
BANDIT_TASK = {"n_contexts": 5, "n_actions": 5, "p_correct": 0.8, "p_incorrect": 0.2, "conflict": True}

_META_COMMON = {"batch_size": 200, "hidden": 64, "n_checkpoints": 40, "baseline": "none", "baseline_decay": 0.99,
                "discount": 1.0}
META_LINEAR = dict(_META_COMMON, family="linear", T=20, optimizer="adam", lr=1e-4, budget=100_000,
                   task={"mode": "matrix-normal", "nx": 2, "ny": 2, "scale": 1.0, "spectrum": None, "s_min": None,
                         "s_max": None, "w": None, "noise_std": None})
META_FOURIER = dict(_META_COMMON, family="fourier", T=40, optimizer="adam", lr=1e-4, budget=200_000,
                    task={"mode": "unit", "n_modes": 5, "noise_std": 0.01, "band": None, "fixed": None})
META_BANDIT = dict(_META_COMMON, T=100, optimizer="adam", lr=1e-4, budget=100_000,
                   task={"n_contexts": 5, "n_actions": 5, "p_correct": 0.8, "p_incorrect": 0.2, "fixed": None})


def _meta(base, **over):
    out = copy.deepcopy(base)
    task = over.pop("task", None)
    out.update(over)
    if task:
        out["task"].update(task)
    return out


@dataclass
class Experiment:
    id: str
    figures: str
    budget: str
    pipeline: object
    defaults: dict


def _exp(id, figures, budget, pipeline, replicas=1, meta_replicas=1, **sections):
    d = {"seed": 0, "replicas": replicas, "meta_replicas": meta_replicas, "cutoffs": list(CUTOFFS)}
    d.update(sections)
    return Experiment(id, figures, budget, pipeline, d)


REGISTRY = {e.id: e for e in [
    _exp("exp1-learner", "Fig 1, Fig 4a", "50 runs x 4k minibatches", pipelines.exp1_learner, replicas=50,
         learner=LINEAR_LEARNER, task=LINEAR_TASK),
    _exp("exp1-adam", "Fig 7", "20 runs x 16k minibatches (5D)", pipelines.exp1_adam, replicas=20,
         learner=dict(LINEAR_LEARNER, optimizer="adam", steps=16_000),
         task=dict(LINEAR_TASK, nx=5, ny=5, spectra=[EXPECTED_5D_SPECTRUM])),
    _exp("exp1-meta", "Fig 2b, Fig 3 (reduced budget)", "100k outer updates", pipelines.exp1_meta,
         meta=META_LINEAR, probe={"episodes": 100, "percentiles": [5, 20, 50, 80, 95], "ratio_percentiles": [95, 20]}),
    _exp("exp1-ood", "Fig 5 (reduced budget)", "100k outer updates (shared with exp1-meta)", pipelines.exp1_ood,
         meta=META_LINEAR, probe={"episodes": 100, "percentiles": [20, 50, 95], "ood_factors": [2.0, 3.0]}),
    _exp("exp1-bayes", "Fig 6", "1000 episodes", pipelines.exp1_bayes,
         task=dict(LINEAR_TASK, nx=5, ny=5, spectra=[]), probe={"episodes": 1000, "T": 20}),
    _exp("exp1-lstm-control", "Fig A4", "20k outer updates on one task", pipelines.exp1_lstm_control,
         meta=_meta(META_LINEAR, budget=20_000, n_checkpoints=20,
                    task={"mode": "fixed-task", "w": [[2.0, 0.0], [0.0, 0.5]]})),
    _exp("exp2-learner", "Fig 8a-c", "20 runs x 5k minibatches", pipelines.exp2_learner, replicas=20,
         learner=FOURIER_LEARNER, task=FOURIER_TASK),
    _exp("exp2-meta", "Fig 8d-f (reduced budget)", "200k outer updates", pipelines.exp2_meta,
         meta=META_FOURIER, task=FOURIER_TASK, probe={"episodes": 200}),
    _exp("exp2-bayes", "Fig 8g-h", "200 episodes on a 16^5 phase grid", pipelines.exp2_bayes,
         task=FOURIER_TASK, probe={"episodes": 200, "T": 40, "bins": 16}),
    _exp("exp2-bandpass", "Fig A6 (reduced budget)", "200k outer updates", pipelines.exp2_bandpass,
         meta=_meta(META_FOURIER, task={"mode": "bandpass", "band": [3, 5]}), task=FOURIER_TASK,
         probe={"episodes": 200}),
    _exp("exp2-lstm-control", "Fig A7", "20k outer updates on one task", pipelines.exp2_lstm_control,
         meta=_meta(META_FOURIER, budget=20_000, n_checkpoints=20,
                    task={"fixed": {"amplitudes": [1.0] * 5, "phases": [0.5, 1.0, 1.5, 2.0, 2.5], "noise_std": 0.01}})),
    _exp("exp3-learner", "Fig 9a-f", "50 runs per condition, up to 200k minibatches", pipelines.exp3_learner,
         replicas=50, learner=BANDIT_LEARNER, task=BANDIT_TASK),
    _exp("exp3-meta", "Fig 9, Fig 12 (reduced budget)", "100k outer updates per condition", pipelines.exp3_meta,
         meta=META_BANDIT, task=BANDIT_TASK, probe={"episodes": 200, "sweep_episodes": 100, "sweep_cutoff": 0.5}),
    _exp("exp3-bayes", "Fig 9m-n", "2000 episodes", pipelines.exp3_bayes,
         task=BANDIT_TASK, probe={"episodes": 2000, "T": 100}),
    _exp("outer-dynamics-1", "Fig 10 (reduced budget)", "checkpoints of exp1-meta", pipelines.outer_dynamics_1,
         meta=META_LINEAR, probe={"sweep_episodes": 100, "sweep_cutoff": 0.8, "percentiles": [20, 95],
                                  "ratio_percentiles": [95, 20]}),
    _exp("outer-dynamics-2", "Fig 11 (reduced budget)", "checkpoints of exp2-meta", pipelines.outer_dynamics_2,
         meta=META_FOURIER, task=FOURIER_TASK, probe={"sweep_episodes": 100, "sweep_cutoff": 0.5}),
    _exp("outer-dynamics-3", "Fig 12 (reduced budget)", "checkpoints of exp3-meta", pipelines.outer_dynamics_3,
         meta=META_BANDIT, task=BANDIT_TASK, probe={"sweep_episodes": 100, "sweep_cutoff": 0.5}),
]}

TOP_KEYS = ("experiment", "seed", "replicas", "meta_replicas", "cutoffs", "learner", "meta", "task", "probe", "out")
SECTIONS = ("learner", "meta", "task", "probe")


def list_experiments():
    """``(id, figures, default budget)`` rows."""
    return [(e.id, e.figures, e.budget) for e in REGISTRY.values()]


# --------------------------------------------------------------------------
# Validation
# --------------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    experiment: str
    seed: int
    replicas: int
    meta_replicas: int
    cutoffs: list
    learner: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    task: dict = field(default_factory=dict)
    probe: dict = field(default_factory=dict)
    out: str | None = None

    def to_json(self):
        d = {k: getattr(self, k) for k in TOP_KEYS}
        return {k: v for k, v in d.items() if not (k in SECTIONS and not v) and v is not None}

    def hash(self):
        d = self.to_json()
        d.pop("out", None)
        return store.config_hash(d)


def _check_type(path, default, value):
    if default is None or value is None:
        if value is not None and not isinstance(value, (int, float, str, list, dict, bool)):
            raise ConfigError(path, "unsupported value type")
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, "expected true or false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, "expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, "expected a number")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(path, "expected a string")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(path, "expected a list")
        return value
    if isinstance(default, dict):
        if not isinstance(value, dict):
            raise ConfigError(path, "expected an object")
        return _merge(path, default, value)
    return value


def _merge(path, default, raw):
    out = copy.deepcopy(default)
    for k, v in raw.items():
        if k not in default:
            raise ConfigError(f"{path}.{k}" if path else k, "unknown key")
        out[k] = _check_type(f"{path}.{k}" if path else k, default[k], v)
    return out


def validate_config(raw) -> ExperimentConfig:
    """Fully defaulted config; unknown keys and bad values raise :class:`ConfigError`."""
    if isinstance(raw, (str, bytes)):
        try:
            raw = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise ConfigError("", f"invalid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("", "config must be a JSON object")
    exp_id = raw.get("experiment")
    if not exp_id or not isinstance(exp_id, str):
        raise ConfigError("experiment", "missing experiment id")
    if exp_id not in REGISTRY:
        raise ConfigError("experiment", f"unknown experiment {exp_id!r}")
    defaults = REGISTRY[exp_id].defaults
    for k in raw:
        if k not in TOP_KEYS:
            raise ConfigError(k, "unknown key")
        if k in SECTIONS and k not in defaults:
            raise ConfigError(k, f"section not used by {exp_id}")
    merged = _merge("", {k: v for k, v in defaults.items()},
                    {k: v for k, v in raw.items() if k not in ("experiment", "out")})
    cfg = ExperimentConfig(exp_id, merged["seed"], merged["replicas"], merged["meta_replicas"],
                           [float(c) for c in merged["cutoffs"]], merged.get("learner", {}), merged.get("meta", {}),
                           merged.get("task", {}), merged.get("probe", {}), raw.get("out"))
    _semantic_checks(cfg)
    return cfg


def _semantic_checks(cfg: ExperimentConfig):
    if cfg.seed < 0:
        raise ConfigError("seed", "must be non-negative")
    if cfg.replicas < 1:
        raise ConfigError("replicas", "must be >= 1")
    if cfg.meta_replicas < 1:
        raise ConfigError("meta_replicas", "must be >= 1")
    if not cfg.cutoffs or any(not 0 < c < 1 for c in cfg.cutoffs):
        raise ConfigError("cutoffs", "every cutoff must lie in (0, 1)")
    if "spectra" in cfg.task:
        k = min(cfg.task["nx"], cfg.task["ny"])
        for i, s in enumerate(cfg.task["spectra"]):
            if len(s) != k:
                raise ConfigError(f"task.spectra[{i}]", f"needs {k} singular values")
    if cfg.task.get("p_correct") is not None and not cfg.task["p_incorrect"] < cfg.task["p_correct"]:
        raise ConfigError("task.p_incorrect", "must be below p_correct")
    try:
        if cfg.learner:
            fam = {"exp2": "fourier-regression", "exp3": "bandit-coupled"}.get(cfg.experiment[:4], "linear-regression")
            pipelines.learner_config(cfg, fam)
        if cfg.meta:
            pipelines.meta_config(cfg, None if cfg.meta.get("family") else "bandit-coupled")
    except MetadynError as exc:
        raise ConfigError("learner" if cfg.learner and not cfg.meta else "meta", str(exc)) from exc
    except TypeError as exc:
        raise ConfigError("meta" if cfg.meta else "learner", str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError("", f"cannot read {path}: {exc}") from exc
    return validate_config(text)


# --------------------------------------------------------------------------
# Running
# --------------------------------------------------------------------------


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _as_if_remote(fn, job):
    # same pickle round trip a worker applies, so array layouts (and hence
    # floating-point reduction order) match a parallel run
    return pickle.loads(pickle.dumps(fn(pickle.loads(pickle.dumps(job)))))


class RunContext:
    """Owns the output directory; every artifact goes through it."""

    def __init__(self, cfg: ExperimentConfig, out: Path, workers: int = 1, cache=None):
        self.cfg = cfg
        self.out = Path(out)
        self.workers = max(1, int(workers))
        self.cache = store.cache_root() if cache is None else Path(cache)
        self.inputs = {}
        self.stage = "setup"
        self._pool = None

    def __enter__(self):
        if self.workers > 1:
            self._pool = ProcessPoolExecutor(self.workers)
        return self

    def __exit__(self, *exc):
        if self._pool is not None:
            self._pool.shutdown()

    def map(self, fn, jobs):
        jobs = list(jobs)
        if self._pool is None or len(jobs) < 2:
            return [_as_if_remote(fn, j) for j in jobs]
        return list(self._pool.map(fn, jobs))

    def figure(self, fig, panel, rows):
        write_csv(self.out / "figures" / f"fig{fig}_{panel}.csv", FIGURE_COLUMNS, rows)

    def trace(self, name, header, rows):
        write_csv(self.out / "traces" / f"{name}.csv", header, rows)

    def tasks(self, name, tasks):
        lines = [json.dumps({"id": i, "kind": type(t).__name__, "task": t.to_json()}, sort_keys=True)
                 for i, t in enumerate(tasks)]
        path = self.out / "traces" / f"{name}.tasks.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("\n".join(lines) + "\n")

    def meta(self, mcfg, replica):
        """Checkpoints of one Meta-Learner (trained or resumed through the cache)."""
        self.stage = "train"
        cks = store.trained_meta(mcfg, self.cfg.seed, replica, root=self.cache)
        run_dir = store.meta_run_dir(mcfg, self.cfg.seed, replica, root=self.cache)
        for path in sorted(run_dir.rglob("ckpt_*")):
            self.inputs[str(path)] = _sha256(path)
        store.export_checkpoint(self.out / "checkpoints" / f"{mcfg.family}_r{replica}", mcfg, cks[-1])
        self.stage = "probe"
        return cks


def resolve_out(cfg: ExperimentConfig, out=None) -> Path:
    if out is not None:
        return Path(out)
    if cfg.out:
        return Path(cfg.out)
    return Path(os.environ.get("METADYN_OUT", DEFAULT_OUT)) / cfg.experiment


def run(cfg: ExperimentConfig, out=None, workers: int = 1, seed: int | None = None, cache=None) -> dict:
    """Execute one experiment and write ``manifest.json``; returns the manifest."""
    if seed is not None:
        cfg = copy.deepcopy(cfg)
        cfg.seed = int(seed)
    out = resolve_out(cfg, out)
    out.mkdir(parents=True, exist_ok=True)
    for sub in ("figures", "traces", "checkpoints"):
        if (out / sub).exists():
            shutil.rmtree(out / sub)
    (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=1, sort_keys=True) + "\n")
    manifest = {
        "experiment": cfg.experiment,
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "resolved_seeds": {"replicas": [[cfg.seed, "replica", r] for r in range(cfg.replicas)],
                           "meta_replicas": [[cfg.seed, "meta-train", r] for r in range(cfg.meta_replicas)]},
        "started": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "software": {"metadyn": __version__, "numpy": np.__version__, "python": platform.python_version()},
        "workers": workers,
    }
    ctx = RunContext(cfg, out, workers, cache)
    try:
        with ctx:
            ctx.stage = "run"
            REGISTRY[cfg.experiment].pipeline(cfg, ctx)
        manifest["status"] = "ok"
    except Exception as exc:  # recorded in the manifest, then re-raised
        manifest["status"] = "failed"
        manifest["failed_stage"] = ctx.stage
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        _finish(out, manifest, ctx)
        raise
    _finish(out, manifest, ctx)
    return manifest


def _finish(out: Path, manifest: dict, ctx: RunContext):
    manifest["finished"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    files = []
    for path in sorted(p for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"):
        files.append({"path": path.relative_to(out).as_posix(), "sha256": _sha256(path), "bytes": path.stat().st_size})
    manifest["files"] = files
    manifest["inputs"] = [{"path": p, "sha256": h} for p, h in sorted(ctx.inputs.items())]
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def verify_manifest(out) -> list:
    """Paths whose checksum no longer matches, plus unlisted files."""
    out = Path(out)
    manifest = json.loads((out / "manifest.json").read_text())
    listed = {f["path"]: f["sha256"] for f in manifest["files"]}
    bad = [p for p, h in listed.items() if not (out / p).exists() or _sha256(out / p) != h]
    present = {p.relative_to(out).as_posix() for p in out.rglob("*") if p.is_file() and p.name != "manifest.json"}
    return bad + sorted(present - set(listed))
