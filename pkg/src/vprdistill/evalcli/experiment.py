"""Full two-stage pipeline from one JSON config, over several seeds.

Per seed: build the dataset, train the rgb and seg branches, rank the
training pairs with both, partition them, train one stage-II student per
weight scheme and evaluate every model on corrupted, clean and all test
queries. The report holds metrics only; wall-clock timings go to a
separate file so that reports are byte-identical across repeat runs.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import json
import logging
import os
import statistics
import time
from dataclasses import asdict
from pathlib import Path
from typing import Mapping

import torch

from ..dataset.groundtruth import GroundTruthConfig
from ..dataset.mining import mine_positives
from ..dataset.records import load_manifest
from ..dataset.synth import SynthConfig, load_synth, synth_generate
from ..errors import ConfigError
from ..inputs import VPRData, descriptor_provider
from ..model import BackboneConfig
from ..partition import PartitionConfig, compute_rankings, partition, save_partition
from ..slme import get_scheme
from ..training import StageConfig, WeightScheme, train_stage1, train_stage2, weight_table
from .retrieval import DEFAULT_NS, evaluate

log = logging.getLogger(__name__)

CACHE_ENV = "VPRDISTILL_CACHE"
SECTIONS = ("dataset", "slme", "model", "stage1", "partition", "stage2", "eval")
TOP_LEVEL = set(SECTIONS) | {"seeds", "schemes"}
REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"
TIMINGS_JSON = "timings.json"

DEFAULT_CONFIG = {
    "seeds": [0, 1, 2],
    "schemes": ["none", "all_ones", "eq4"],
    "dataset": {"synth": {}, "image_size": [64, 64], "ground_truth": {}},
    "slme": {"scheme": "default"},
    "model": {"rgb": {}, "seg": {}},
    "stage1": {"epochs": 15},
    "partition": {"n_t": 10, "n_m": 20},
    "stage2": {"epochs": 60, "lr": 3e-3},
    "eval": {"ns": [1, 5, 10]},
}


def cache_dir() -> Path:
    """Cache root: ``$VPRDISTILL_CACHE`` or ``~/.cache/vprdistill``."""
    return Path(os.environ.get(CACHE_ENV) or Path.home() / ".cache" / "vprdistill")


def _merge(base: dict, override: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict) and k != "synth":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def resolve_config(doc: Mapping, seed: int | None = None) -> dict:
    """Defaults overlaid with ``doc``; ``seed`` replaces the seed list."""
    unknown = set(doc) - TOP_LEVEL
    if unknown:
        raise ConfigError(f"unknown config section(s): {sorted(unknown)}; expected {sorted(TOP_LEVEL)}")
    for name in SECTIONS:
        if name in doc and not isinstance(doc[name], Mapping):
            raise ConfigError(f"config section {name!r} must be an object")
    cfg = _merge(DEFAULT_CONFIG, doc)
    if seed is not None:
        cfg["seeds"] = [int(seed)]
    if not cfg["seeds"] or not all(isinstance(s, int) for s in cfg["seeds"]):
        raise ConfigError("seeds must be a non-empty list of integers")
    if not cfg["schemes"]:
        raise ConfigError("schemes must be a non-empty list")
    ds = cfg["dataset"]
    if ("synth" in ds) == any(k in ds for k in ("train", "val", "test")) and "synth" in doc.get("dataset", {}):
        raise ConfigError("dataset: give either 'synth' or train/val/test manifests, not both")
    # validate every section up front so errors name the field before any work
    for stage in ("stage1", "stage2"):
        try:
            StageConfig.from_dict(cfg[stage])
        except (ConfigError, TypeError) as exc:
            raise ConfigError(f"{stage}: {exc}") from None
    try:
        PartitionConfig(**cfg["partition"])
    except TypeError as exc:
        raise ConfigError(f"partition: {exc}") from None
    for label in cfg["schemes"]:
        WeightScheme.parse(label)
    get_scheme(cfg["slme"].get("scheme"))
    return cfg


def load_config(path: str | Path, seed: int | None = None) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return resolve_config(doc, seed)


def _uses_manifests(ds: dict) -> bool:
    return all(k in ds for k in ("train", "val", "test"))


def _synth_dataset(ds: dict, seed: int) -> tuple[dict, dict]:
    """Generate (or reuse from the cache) the synthetic dataset for ``seed``."""
    doc = {**ds.get("synth", {})}
    doc.setdefault("seed", seed)
    scfg = SynthConfig.from_dict(doc)
    key = hashlib.sha256(json.dumps(asdict(scfg), sort_keys=True).encode()).hexdigest()[:16]
    root = cache_dir() / "synth" / key
    if not (root / "synth_meta.json").exists():
        synth_generate(scfg, root, overwrite=True)
    return load_synth(root)


def _corrupted_ids(meta: dict | None, ids: list[str]) -> tuple[list[str], list[str]]:
    if meta is None:
        return [], list(ids)
    flags = meta["records"]
    return [q for q in ids if flags[q]["corrupted"]], [q for q in ids if not flags[q]["corrupted"]]


def _evaluate_all(model, test: VPRData, meta, ns) -> dict:
    corrupted, clean = _corrupted_ids(meta, test.query_ids)
    out = {}
    for name, ids in (("corrupted", corrupted), ("clean", clean), ("all", test.query_ids)):
        if ids:
            out[name] = {f"R@{n}": round(v, 6) for n, v in evaluate(model, test, ns, ids).recalls.items()}
    return out


def run_seed(cfg: dict, seed: int, out_dir: Path | None = None, timings: dict | None = None) -> dict:
    ds = cfg["dataset"]
    gt = GroundTruthConfig(**ds.get("ground_truth", {}))
    scheme = get_scheme(cfg["slme"].get("scheme"))
    size = tuple(ds.get("image_size", (64, 64)))
    clock = time.perf_counter()

    def tick(name: str):
        nonlocal clock
        if timings is not None:
            now = time.perf_counter()
            timings[f"seed{seed}/{name}"] = round(now - clock, 3)
            clock = now

    if _uses_manifests(ds):
        records = {k: load_manifest(ds[k]) for k in ("train", "val", "test")}
        meta = None
    else:
        records, meta = _synth_dataset(ds, seed)
    train, val, test = (VPRData(records[k], size, scheme, gt) for k in ("train", "val", "test"))
    tick("dataset")

    ns = tuple(cfg["eval"].get("ns", DEFAULT_NS))
    c1 = StageConfig.from_dict({**cfg["stage1"], "seed": seed})
    c2 = StageConfig.from_dict({**cfg["stage2"], "seed": seed})
    rgb_bb = BackboneConfig.rgb_like(3, **cfg["model"].get("rgb", {}))
    seg_bb = BackboneConfig.seg_light(scheme.n_classes, **cfg["model"].get("seg", {}))

    result = {"seed": seed, "models": {}}
    rgb = train_stage1("rgb", train, val, c1, rgb_bb)
    tick("stage1_rgb")
    seg = train_stage1("seg", train, val, c1, seg_bb)
    tick("stage1_seg")
    for name, res in (("rgb", rgb), ("seg", seg)):
        result["models"][name] = {"best_epoch": res.best_epoch, "test": _evaluate_all(res.model, test, meta, ns)}
        if out_dir is not None:
            res.save(out_dir / f"seed{seed}" / name)

    pcfg = PartitionConfig(**cfg["partition"])
    pairs = mine_positives(train.records, gt, c2.positive_mining, gt=train.gt)
    x = compute_rankings(descriptor_provider(seg.model, train), train.records, pairs, "seg")
    y = compute_rankings(descriptor_provider(rgb.model, train), train.records, pairs, "rgb")
    table = partition(x, y, pcfg)
    result["partition"] = {
        "counts": table.counts(),
        "ratios": {k: round(v, 6) for k, v in table.ratios().items()},
    }
    if out_dir is not None:
        save_partition(table, out_dir / f"seed{seed}" / "partition.csv")
    tick("partition")

    for label in cfg["schemes"]:
        ws = WeightScheme.parse(label, pcfg)
        res = train_stage2(train, val, seg.model, weight_table(table, ws), c2, rgb_bb, init_model=rgb.model)
        result["models"][f"student/{ws.label}"] = {
            "best_epoch": res.best_epoch,
            "test": _evaluate_all(res.model, test, meta, ns),
        }
        if out_dir is not None:
            res.save(out_dir / f"seed{seed}" / f"student_{ws.label.replace(':', '_').replace(',', '-')}")
        tick(f"stage2_{ws.label}")
    return result


def summarize(runs: list[dict]) -> dict:
    """Median over seeds of every (model, query subset, metric)."""
    summary: dict = {}
    for model in runs[0]["models"]:
        for subset, metrics in runs[0]["models"][model]["test"].items():
            for metric in metrics:
                vals = [r["models"][model]["test"][subset][metric] for r in runs]
                summary.setdefault(model, {}).setdefault(subset, {})[metric] = round(statistics.median(vals), 6)
    return summary


def report_csv(runs: list[dict], summary: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    metrics = sorted({m for r in runs for v in r["models"].values() for s in v["test"].values() for m in s},
                     key=lambda m: int(m[2:]))
    w.writerow(["seed", "model", "queries", *metrics])
    for r in runs:
        for model, v in r["models"].items():
            for subset, vals in v["test"].items():
                w.writerow([r["seed"], model, subset, *(f"{vals[m]:.6f}" for m in metrics)])
    for model, subsets in summary.items():
        for subset, vals in subsets.items():
            w.writerow(["median", model, subset, *(f"{vals[m]:.6f}" for m in metrics)])
    return buf.getvalue()


def run_experiment(cfg: dict, out_dir: str | Path, save_models: bool = False) -> dict:
    """Run every seed, write ``report.json``, ``report.csv`` and ``timings.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    timings: dict = {}
    start = time.perf_counter()
    runs = [run_seed(cfg, seed, out_dir if save_models else None, timings) for seed in cfg["seeds"]]
    timings["total"] = round(time.perf_counter() - start, 3)
    report = {"config": cfg, "runs": runs, "summary": summarize(runs)}
    (out_dir / REPORT_JSON).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    (out_dir / REPORT_CSV).write_text(report_csv(runs, report["summary"]), encoding="utf-8")
    (out_dir / TIMINGS_JSON).write_text(
        json.dumps({"torch_threads": torch.get_num_threads(), **timings}, indent=2) + "\n", encoding="utf-8"
    )
    return report
