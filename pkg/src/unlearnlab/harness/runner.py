"""Config-driven pipeline: pretrain, unlearn, evaluate and persist every cell.

All artefacts live under the output directory::

    checkpoints/<model>_s<seed>.ckpt   network parameters
    cells/<model>_s<seed>.json         metrics, MI curve and IDI of one (model, seed)
    mi_curves/<model>_s<seed>.csv      per-layer MI estimates

Every cached file records the digest of the inputs that produced it. A cached
file whose digest disagrees with the current configuration is never reused:
:class:`StaleCacheError` is raised instead.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .. import __version__
from ..data import load_csv, split_classwise, split_random, synthesize_pair
from ..idi import MICurve, idi, mi_curve, write_curve_csv
from ..metrics import accuracy_metrics, jsd_to_reference, mia_score, recovery_probe
from ..net import CheckpointError, Network, build_mlp, load_checkpoint, save_checkpoint
from ..train import train_supervised
from ..unlearn import run_method
from .config import ExperimentConfig, canonical_digest, load_config, parse_config

__all__ = ["StaleCacheError", "Workspace", "build_split", "run_stage", "run_experiment",
           "STAGES", "BASELINES", "RETRAIN_SEED_OFFSET"]

BASELINES = ("Original", "Retrain")
STAGES = ("pretrain", "unlearn", "metrics", "idi", "report")
RETRAIN_SEED_OFFSET = 1000


class StaleCacheError(RuntimeError):
    """A cached artefact was produced from different inputs."""


class Workspace:
    def __init__(self, root: str | Path):
        self.root = Path(root)

    def checkpoint(self, model: str, seed: int) -> Path:
        return self.root / "checkpoints" / f"{model}_s{seed}.ckpt"

    def cell(self, model: str, seed: int) -> Path:
        return self.root / "cells" / f"{model}_s{seed}.json"

    def curve(self, model: str, seed: int) -> Path:
        return self.root / "mi_curves" / f"{model}_s{seed}.csv"

    def read_cell(self, model: str, seed: int) -> dict | None:
        path = self.cell(model, seed)
        return json.loads(path.read_text()) if path.exists() else None

    def write_cell(self, model: str, seed: int, cell: dict) -> None:
        path = self.cell(model, seed)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(cell, indent=1, sort_keys=True, allow_nan=True))
        tmp.replace(path)


def build_split(cfg: ExperimentConfig):
    ds = cfg.dataset
    if ds["kind"] == "csv":
        base = cfg.source.parent if cfg.source else Path.cwd()
        train = load_csv(base / ds["train_csv"], ds.get("classes"))
        test = load_csv(base / ds["test_csv"], train.num_classes)
    else:
        kw = {"radius": ds["radius"], "layout": ds["layout"]}
        if "hub" in ds:
            kw["hub"] = ds["hub"]
        train, test = synthesize_pair(ds["kind"], ds["classes"], ds["per_class"], ds["dim"],
                                      ds["noise"], ds["seed"], **kw)
    sp = cfg.split
    if sp["mode"] == "classwise":
        return split_classwise(train, sp["forget_classes"], test)
    return split_random(train, sp["per_class_count"], sp["seed"], test)


def _model_spec(cfg: ExperimentConfig, split) -> tuple:
    m = cfg.model
    return (split.base.dim, m["widths"], split.base.num_classes, m["head_depth"],
            m["activation"])


def _cached_network(path: Path, digest: str) -> tuple[Network, dict] | None:
    if not path.exists():
        return None
    try:
        net, meta = load_checkpoint(path)
    except CheckpointError as exc:
        raise StaleCacheError(f"{path}: unreadable checkpoint ({exc})") from exc
    if meta.get("digest") != digest:
        raise StaleCacheError(f"{path} was produced by a different configuration; "
                              "use a fresh output directory")
    return net, meta


def _pretrained(cfg: ExperimentConfig, ws: Workspace, split, role: str, seed: int
                ) -> tuple[Network, float]:
    digest = cfg.pretrain_digest(role, seed)
    hit = _cached_network(ws.checkpoint(role, seed), digest)
    if hit is not None:
        return hit[0], hit[1]["seconds"]
    dim, widths, classes, head_depth, act = _model_spec(cfg, split)
    init = seed if role == "Original" else seed + RETRAIN_SEED_OFFSET
    net = build_mlp(dim, widths, classes, init, head_depth=head_depth, activation=act)
    data = split.full if role == "Original" else split.retain
    start = time.perf_counter()
    rec = train_supervised(net, data, cfg.pretrain_config(seed))
    seconds = time.perf_counter() - start
    save_checkpoint(rec.network, ws.checkpoint(role, seed),
                    {"digest": digest, "role": role, "seed": seed, "seconds": seconds})
    return rec.network, seconds


def _method_entry(cfg: ExperimentConfig, label: str) -> dict:
    for m in cfg.methods:
        if m.get("label", m["name"]) == label:
            return m
    raise KeyError(label)


def _unlearn_digest(cfg: ExperimentConfig, label: str, seed: int) -> str:
    return canonical_digest({"original": cfg.pretrain_digest("Original", seed),
                             "method": _method_entry(cfg, label), "seed": seed})


def _model(cfg: ExperimentConfig, ws: Workspace, split, label: str, seed: int
           ) -> tuple[Network, float, dict]:
    """Network, RTE and extra info for a baseline or method cell (trained on demand)."""
    if label in BASELINES:
        net, seconds = _pretrained(cfg, ws, split, label, seed)
        return net, seconds, {}
    digest = _unlearn_digest(cfg, label, seed)
    hit = _cached_network(ws.checkpoint(label, seed), digest)
    if hit is not None:
        return hit[0], hit[1]["rte"], hit[1].get("info", {})
    original, _ = _pretrained(cfg, ws, split, "Original", seed)
    entry = _method_entry(cfg, label)
    res = run_method(entry["name"], original, split, seed, entry.get("params"))
    info = {}
    if "pseudo_labels" in res.extra:
        info["pseudo_collisions"] = int(np.sum(res.extra["pseudo_labels"] ==
                                               res.extra["pseudo_true"]))
        info["pseudo_count"] = int(res.extra["pseudo_labels"].size)
    save_checkpoint(res.unlearned, ws.checkpoint(label, seed),
                    {"digest": digest, "method": entry["name"], "seed": seed,
                     "rte": res.rte_seconds, "info": info})
    return res.unlearned, res.rte_seconds, info


def _cell_digest(cfg: ExperimentConfig, label: str, seed: int) -> str:
    model = (cfg.pretrain_digest(label, seed) if label in BASELINES
             else _unlearn_digest(cfg, label, seed))
    return canonical_digest({"model": model, "metrics": cfg.metrics, "mi": cfg.raw["mi"],
                             "retrain": cfg.pretrain_digest("Retrain", seed),
                             "original": cfg.pretrain_digest("Original", seed)})


def _load_cell(cfg: ExperimentConfig, ws: Workspace, label: str, seed: int) -> dict:
    digest = _cell_digest(cfg, label, seed)
    cell = ws.read_cell(label, seed)
    if cell is None:
        return {"model": label, "seed": seed, "digest": digest}
    if cell.get("digest") != digest:
        raise StaleCacheError(f"{ws.cell(label, seed)} was produced by a different "
                              "configuration; use a fresh output directory")
    return cell


def _label_kind(cfg: ExperimentConfig) -> str:
    return "binary" if cfg.split["mode"] == "classwise" else "multiclass"


def _curve_from_cell(cell: dict) -> MICurve:
    c = cell["curve"]
    return MICurve(tuple(c["layers"]), tuple(max(v, 0.0) for v in c["raw"]), tuple(c["raw"]),
                   tuple(c["stddev"]), c["label_kind"], c["h_y"], cell["model"])


def _do_cell(cfg: ExperimentConfig, ws: Workspace, label: str, seed: int, stage: str) -> dict:
    split = build_split(cfg)
    cell = _load_cell(cfg, ws, label, seed)
    net, rte, info = _model(cfg, ws, split, label, seed)
    method = "Original" if label == "Original" else (
        "Retrain" if label == "Retrain" else _method_entry(cfg, label)["name"])
    changed = "rte" not in cell
    cell.update({"method": method, "rte": rte, "info": info,
                 "checkpoint": str(ws.checkpoint(label, seed).relative_to(ws.root))})
    toggles = cfg.metrics
    if stage in ("metrics", "all") and "metrics" not in cell:
        retrain, _ = _pretrained(cfg, ws, split, "Retrain", seed)
        acc = accuracy_metrics(net, split)
        metrics = acc.as_percent()
        if toggles["mia"]:
            mia = mia_score(net, split, toggles["mia_variant"], seed)
            metrics["MIA"] = mia.value
            metrics["MIA_degenerate"] = mia.degenerate
            metrics["MIA_val_acc"] = 100.0 * mia.predictor.val_accuracy
        if toggles["jsd"]:
            metrics["JSD"] = jsd_to_reference(net, retrain, split.test_view())
        if toggles["probe"] and split.mode == "classwise":
            metrics["probe"] = 100.0 * recovery_probe(net, split, toggles["probe_fraction"], seed)
        cell["metrics"] = metrics
        changed = True
    if stage in ("idi", "all") and toggles["idi"] and "curve" not in cell:
        layers = list(range(net.num_blocks))
        curve = mi_curve(net, split, _label_kind(cfg), layers, cfg.mi_config(), label)
        ws.curve(label, seed).parent.mkdir(parents=True, exist_ok=True)
        write_curve_csv(curve, ws.curve(label, seed))
        cell["curve"] = {"layers": list(curve.layer_indices), "raw": list(curve.raw),
                         "stddev": list(curve.stddev), "label_kind": curve.label_kind,
                         "h_y": curve.h_y}
        changed = True
    if changed:
        ws.write_cell(label, seed, cell)
    return cell


def _finish_idi(cfg: ExperimentConfig, ws: Workspace, seed: int, labels: Iterable[str]) -> None:
    """IDI of every cell of ``seed`` against that seed's Original and Retrain curves."""
    if not cfg.metrics["idi"]:
        return
    cells = {l: _load_cell(cfg, ws, l, seed) for l in [*BASELINES, *labels]}
    if any("curve" not in c for c in cells.values()):
        return
    co, cr = _curve_from_cell(cells["Original"]), _curve_from_cell(cells["Retrain"])
    chosen = cfg.metrics["idi_layers"]
    for label, cell in cells.items():
        cu = _curve_from_cell(cell)
        full = idi(cu, co, cr)
        part = idi(cu.restrict(chosen), co.restrict(chosen), cr.restrict(chosen))
        entry = {"IDI": part.idi, "ID": part.id_u, "ID_original": part.id_o,
                 "degenerate": part.degenerate, "over_unlearning": part.over_unlearning,
                 "IDI_all_layers": full.idi, "layers": chosen}
        if cell.get("idi") != entry:
            cell["idi"] = entry
            ws.write_cell(label, seed, cell)


def _job(raw: dict, source: str | None, root: str, label: str, seed: int, stage: str) -> str:
    cfg = parse_config(raw, Path(source) if source else None)
    _do_cell(cfg, Workspace(root), label, seed, stage)
    return label


def _pretrain_job(raw: dict, source: str | None, root: str, seed: int) -> int:
    cfg = parse_config(raw, Path(source) if source else None)
    split = build_split(cfg)
    for role in BASELINES:
        _pretrained(cfg, Workspace(root), split, role, seed)
    return seed


def _run_jobs(fn: Callable, argsets: list[tuple], jobs: int) -> None:
    if jobs <= 1 or len(argsets) <= 1:
        for args in argsets:
            fn(*args)
        return
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        for fut in [pool.submit(fn, *args) for args in argsets]:
            fut.result()


def _user_raw(cfg: ExperimentConfig) -> dict:
    return cfg.raw


def run_stage(cfg: ExperimentConfig, stage: str, jobs: int = 1) -> Path:
    """Run one CLI stage (or ``all``); returns the output directory."""
    if stage not in (*STAGES, "all"):
        raise ValueError(f"unknown stage {stage!r}")
    ws = Workspace(cfg.output_dir)
    ws.root.mkdir(parents=True, exist_ok=True)
    (ws.root / "config.json").write_text(json.dumps(cfg.raw, indent=1, sort_keys=True))
    src = str(cfg.source) if cfg.source else None
    raw, root = _user_raw(cfg), str(ws.root)
    if stage == "report":
        from .report import write_report
        write_report(cfg, ws)
        return ws.root
    _run_jobs(_pretrain_job, [(raw, src, root, s) for s in cfg.seeds], jobs)
    if stage == "pretrain":
        return ws.root
    labels = cfg.method_labels()
    models = labels if stage == "unlearn" else [*BASELINES, *labels]
    _run_jobs(_job, [(raw, src, root, l, s, stage) for s in cfg.seeds for l in models], jobs)
    if stage in ("idi", "all"):
        for s in cfg.seeds:
            _finish_idi(cfg, ws, s, labels)
    if stage == "all":
        from .report import write_report
        write_report(cfg, ws)
    return ws.root


def run_experiment(config: str | Path | ExperimentConfig, jobs: int = 1,
                   seeds: list[int] | None = None, out: str | Path | None = None) -> Path:
    """Full pipeline for a config file; returns the directory holding the report."""
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config)
    cfg = cfg.with_overrides(seeds=seeds, out=out)
    return run_stage(cfg, "all", jobs)
