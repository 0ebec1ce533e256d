"""Content-addressed locations for trained Meta-Learner runs."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .numerics import RngStream


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return _plain(dataclasses.asdict(obj))
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.generic):
        return _plain(obj.item())
    if isinstance(obj, (int, float)) and not isinstance(obj, bool):
        # 1 and 1.0 hash alike
        return float(obj)
    return obj


def canonical_json(obj) -> str:
    """Key-order-insensitive JSON text used for hashing."""
    return json.dumps(_plain(obj), sort_keys=True, separators=(",", ":"))


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode()).hexdigest()[:16]


def cache_root() -> Path:
    return Path(os.environ.get("METADYN_CACHE", Path.home() / ".cache" / "metadyn"))


def meta_rng(seed: int, replica: int) -> RngStream:
    return RngStream(seed).derive("meta-train", replica)


def meta_run_dir(cfg, seed: int, replica: int, root=None) -> Path:
    root = cache_root() if root is None else Path(root)
    return root / f"{cfg.family}-{config_hash(cfg)}-s{seed}-r{replica}"


def trained_meta(cfg, seed: int, replica: int = 0, root=None, save_every=1000):
    """Train (or resume, or just load) one Meta-Learner and return its checkpoints."""
    from .metalearners import outer_train

    run_dir = meta_run_dir(cfg, seed, replica, root)
    return outer_train(cfg, meta_rng(seed, replica), run_dir=run_dir, save_every=save_every)


def export_checkpoint(path, cfg, ck) -> tuple:
    """Self-describing archive of one checkpoint (config embedded in the manifest).

    Decoupled bandit checkpoints hold one network per context, stored under
    ``c{index}/`` tensor prefixes.
    """
    from .nets import save_archive

    nets = ck.params if isinstance(ck.params, tuple) else (ck.params,)
    tensors = {}
    for i, p in enumerate(nets):
        prefix = f"c{i}/" if isinstance(ck.params, tuple) else ""
        tensors.update({prefix + k: v for k, v in p.tensors.items()})
    meta = {"step": int(ck.step), "loss": None if not np.isfinite(ck.loss) else float(ck.loss),
            "n_networks": len(nets), "meta_config": json.loads(json.dumps(dataclasses.asdict(cfg)))}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    return save_archive(path, tensors, meta)


def import_checkpoint(path):
    """Inverse of :func:`export_checkpoint`: ``(MetaTrainConfig, MetaCheckpoint)``."""
    from .metalearners import MetaCheckpoint, MetaTrainConfig, _io_sizes
    from .nets import LstmParams, load_archive

    path = Path(path)
    if path.suffix in (".bin", ".json"):
        path = path.with_suffix("")
    tensors, meta = load_archive(path)
    d = dict(meta["meta_config"])
    d["checkpoints"] = None if d["checkpoints"] is None else tuple(int(s) for s in d["checkpoints"])
    cfg = MetaTrainConfig(**d)
    i, o = _io_sizes(cfg)
    n = int(meta.get("n_networks", 1))
    if cfg.family == "bandit-decoupled":
        params = tuple(LstmParams(i, cfg.hidden, o, {k[len(f"c{c}/"):]: v for k, v in tensors.items()
                                                        if k.startswith(f"c{c}/")}) for c in range(n))
    else:
        params = LstmParams(i, cfg.hidden, o, tensors)
    loss = meta.get("loss")
    return cfg, MetaCheckpoint(int(meta["step"]), params, float("nan") if loss is None else float(loss))
