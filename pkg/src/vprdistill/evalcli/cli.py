"""Command-line entry point.

Every subcommand exits 0 on success. Package errors are reported on stderr
as one JSON object ``{"error": <type>, "message": <text>}`` with an exit
code per error family; argparse usage errors exit 2.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ..errors import (
    ConfigError,
    DataError,
    FormatError,
    LoadError,
    ProvenanceError,
    SchemaError,
    VPRError,
)

EXIT_CODES = (
    (ProvenanceError, 5),
    (LoadError, 4),
    (FormatError, 4),
    (SchemaError, 3),
    (ConfigError, 3),
    (DataError, 6),
    (VPRError, 1),
)


def _ns(text: str) -> list[int]:
    try:
        ns = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not ns or min(ns) < 1:
        raise argparse.ArgumentTypeError("N values must be >= 1")
    return ns


def _size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None
    return h, w


def _read_json(path: str | None) -> dict:
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise LoadError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return doc


def _write_json(path: str | Path, doc: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _data(manifest: str, args):
    from ..dataset.records import load_manifest
    from ..inputs import VPRData
    from ..slme import get_scheme

    return VPRData(load_manifest(manifest), args.image_size, get_scheme(args.slme_scheme))


def _stage_config(args, section: str):
    from ..training import StageConfig

    doc = _read_json(args.config)
    doc = dict(doc.get(section, doc))
    for key in ("epochs", "lr", "batch_size"):
        val = getattr(args, key, None)
        if val is not None:
            doc[key] = val
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        return StageConfig.from_dict(doc)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from None


# Subcommands ---------------------------------------------------------------


def cmd_synth_gen(args) -> int:
    from ..dataset.synth import SynthConfig, synth_generate

    doc = _read_json(args.config)
    doc = dict(doc.get("dataset", {}).get("synth", doc))
    for key, val in (("n_places", args.n_places), ("views_per_place", args.views),
                     ("corrupt_fraction", args.corrupt_fraction)):
        if val is not None:
            doc[key] = val
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        cfg = SynthConfig.from_dict(doc)
    except TypeError as exc:
        raise ConfigError(f"synth: {exc}") from None
    out = synth_generate(cfg, args.out, overwrite=args.overwrite)
    print(json.dumps({name: str(p) for name, p in out.manifests.items()}, sort_keys=True))
    return 0


def cmd_encode_slme(args) -> int:
    from ..dataset.images import read_labelmap
    from ..slme import get_scheme

    scheme = get_scheme(args.slme_scheme)
    if args.save_scheme:
        scheme.save(args.save_scheme)
    if args.input:
        labels = read_labelmap(args.input, args.image_size)
        np.save(args.out, scheme.encode(labels))
    return 0


def cmd_train_stage1(args) -> int:
    from ..training import train_stage1

    cfg = _stage_config(args, "stage1")
    result = train_stage1(args.branch, _data(args.train, args), _data(args.val, args), cfg)
    path = result.save(args.out)
    print(path)
    return 0


def cmd_partition(args) -> int:
    from ..dataset.mining import mine_positives
    from ..inputs import descriptor_provider
    from ..model import load_checkpoint
    from ..partition import PartitionConfig, compute_rankings, partition, save_partition

    data = _data(args.train, args)
    seg = load_checkpoint(args.seg_ckpt)
    rgb = load_checkpoint(args.rgb_ckpt)
    pairs = mine_positives(data.records, data.gt_config, args.positive_mining, gt=data.gt)
    x = compute_rankings(descriptor_provider(seg, data), data.records, pairs, "seg")
    y = compute_rankings(descriptor_provider(rgb, data), data.records, pairs, "rgb")
    digests = {"seg": seg.checkpoint_digest, "rgb": rgb.checkpoint_digest}
    table = partition(x, y, PartitionConfig(args.n_t, args.n_m), digests)
    save_partition(table, args.out)
    print(json.dumps({"counts": table.counts(), "ratios": table.ratios()}, sort_keys=True))
    return 0


def cmd_train_stage2(args) -> int:
    from ..model import load_checkpoint
    from ..partition import load_partition
    from ..training import WeightScheme, train_stage2, weight_table

    cfg = _stage_config(args, "stage2")
    teacher = load_checkpoint(args.teacher)
    init = load_checkpoint(args.init_rgb) if args.init_rgb else None
    if init is not None:
        cfg = type(cfg).from_dict({**cfg.__dict__, "init": "rgb"})
    expected = {"seg": teacher.checkpoint_digest}
    if init is not None:
        expected["rgb"] = init.checkpoint_digest
    table = load_partition(args.partition, expected, strict=args.strict_provenance)
    scheme = WeightScheme.parse(args.weight_scheme, table.config)
    result = train_stage2(
        _data(args.train, args), _data(args.val, args), teacher, weight_table(table, scheme), cfg, init_model=init
    )
    result.info["weight_scheme"] = scheme.label
    print(result.save(args.out))
    return 0


def cmd_train_baseline(args) -> int:
    from ..training import train_baseline

    cfg = _stage_config(args, "stage1")
    result = train_baseline(args.mode, _data(args.train, args), _data(args.val, args), cfg)
    print(result.save(args.out))
    return 0


def cmd_eval(args) -> int:
    from ..model import load_checkpoint
    from .descfile import save_descriptors
    from .retrieval import build_index, recall_at_n

    from ..inputs import extract_descriptors

    model = load_checkpoint(args.checkpoint)
    data = _data(args.manifest, args)
    index = build_index(model, data)
    if args.save_descriptors:
        save_descriptors(index, args.save_descriptors)
    qids = data.query_ids
    report = recall_at_n(index, qids, extract_descriptors(model, data, qids), data.gt, args.ns,
                         data.gt_config.digest())
    doc = {"checkpoint": Path(args.checkpoint).name, "model_digest": index.model_digest, **report.to_dict()}
    if args.out:
        out = Path(args.out)
        _write_json(out.with_suffix(".json"), doc)
        with open(out.with_suffix(".csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["N", "recall"])
            for n, v in report.rows():
                w.writerow([n, f"{v:.6f}"])
    print(json.dumps(doc, sort_keys=True))
    return 0


def cmd_bench(args) -> int:
    from ..model import load_checkpoint
    from .bench import bench_latency

    model = load_checkpoint(args.checkpoint)
    report = bench_latency(model, _data(args.manifest, args), args.warmup, args.reps)
    if args.out:
        _write_json(args.out, report.to_dict())
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def cmd_experiment(args) -> int:
    from .experiment import load_config, run_experiment

    cfg = load_config(args.config, args.seed)
    report = run_experiment(cfg, args.out, save_models=args.save_models)
    print(json.dumps(report["summary"], indent=2, sort_keys=True))
    return 0


# Parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--workers", type=int, default=1, help="intra-op threads used by torch")
    common.add_argument("--log-level", default="WARNING")

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--slme-scheme", default="default", help="preset name or scheme JSON path")
    data.add_argument("--image-size", type=_size, default=(64, 64), metavar="HxW")

    train = argparse.ArgumentParser(add_help=False, parents=[common, data])
    train.add_argument("--train", required=True, help="training manifest")
    train.add_argument("--val", required=True, help="validation manifest")
    train.add_argument("--out", required=True, help="run directory")
    train.add_argument("--config", help="JSON with stage settings (or a full experiment config)")
    train.add_argument("--epochs", type=int)
    train.add_argument("--lr", type=float)
    train.add_argument("--batch-size", type=int)

    parser = argparse.ArgumentParser(prog="vprdistill", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", parents=[common], help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="synth settings JSON")
    p.add_argument("--n-places", type=int)
    p.add_argument("--views", type=int)
    p.add_argument("--corrupt-fraction", type=float)
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("encode-slme", parents=[common, data], help="encode a label map")
    p.add_argument("--input", help="label map PNG")
    p.add_argument("--out", default="encoded.npy")
    p.add_argument("--save-scheme", help="write the resolved scheme as JSON")
    p.set_defaults(func=cmd_encode_slme)

    p = sub.add_parser("train-stage1", parents=[train], help="train the rgb or seg branch")
    p.add_argument("--branch", choices=("rgb", "seg"), required=True)
    p.set_defaults(func=cmd_train_stage1)

    p = sub.add_parser("partition", parents=[common, data], help="rank and group training pairs")
    p.add_argument("--train", required=True)
    p.add_argument("--seg-ckpt", required=True)
    p.add_argument("--rgb-ckpt", required=True)
    p.add_argument("--out", required=True, help="partition CSV")
    p.add_argument("--n-t", type=int, default=10)
    p.add_argument("--n-m", type=int, default=20)
    p.add_argument("--positive-mining", choices=("fov_best", "weak"), default="fov_best")
    p.set_defaults(func=cmd_partition)

    p = sub.add_parser("train-stage2", parents=[train], help="distil the seg branch into an RGB student")
    p.add_argument("--teacher", required=True, help="seg-branch checkpoint")
    p.add_argument("--partition", required=True)
    p.add_argument("--weight-scheme", default="eq4", help="eq4 | eq7 | const:w1,w2,w3,w4 | proto | ones | all | none")
    p.add_argument("--init-rgb", help="start the student from this rgb checkpoint")
    p.add_argument("--strict-provenance", action="store_true")
    p.set_defaults(func=cmd_train_stage2)

    p = sub.add_parser("train-baseline", parents=[train], help="concat_input / concat_feat baselines")
    p.add_argument("--mode", choices=("concat_input", "concat_feat"), required=True)
    p.set_defaults(func=cmd_train_baseline)

    p = sub.add_parser("eval", parents=[common, data], help="Recall@N on a manifest")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--ns", type=_ns, default=[1, 5, 10])
    p.add_argument("--out", help="report path stem; writes .json and .csv")
    p.add_argument("--save-descriptors")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common, data], help="extraction latency")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("experiment", parents=[common], help="full pipeline from one config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--save-models", action="store_true")
    p.set_defaults(func=cmd_experiment)
    return parser


def exit_code(exc: BaseException) -> int:
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    return 1


def cli_main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        print(json.dumps({"error": "ConfigError", "message": "--workers must be >= 1"}), file=sys.stderr)
        return 3
    torch.set_num_threads(args.workers)
    try:
        return args.func(args)
    except VPRError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return exit_code(exc)


def main() -> None:
    sys.exit(cli_main())
