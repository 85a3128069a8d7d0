"""Command-line entry point: ``reid-uda <command> [--config FILE] [--seed N] ...``.

Exit codes: 0 success, 2 configuration error, 3 data error, 1 anything else
raised by the library.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import pipeline
from .augment import data_adapter, read_ppm, write_ppm
from .clustering import cluster
from .deskmodel import Checkpoint, load_checkpoint, save_checkpoint
from .errors import ConfigError, DataError, ReidError
from .featureset import load_featset, save_featset, stack_features, synth_generate
from .rng import Rng

log = logging.getLogger("reid_uda")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_DATA = 0, 1, 2, 3


def _config(args) -> pipeline.PipelineConfig:
    cfg = pipeline.load_config(args.config) if args.config else pipeline.PipelineConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _out_path(args, cfg, default_name: str) -> Path:
    if args.out:
        path = Path(args.out)
    else:
        path = Path(cfg.checkpoint_dir or ".") / default_name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_ckpt(path) -> Checkpoint:
    try:
        return load_checkpoint(path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint {path} not found") from exc


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    source, _ = pipeline.load_domains(cfg)
    ckpt, run_log = pipeline.pretrain_source(cfg, source)
    out = _out_path(args, cfg, "pretrain.ckpt")
    save_checkpoint(ckpt, out)
    _write_json(out.with_suffix(".log.json"), run_log.to_dict())
    log.info("wrote %s", out)
    return EXIT_OK


def cmd_finetune(args) -> int:
    cfg = _config(args)
    _, target = pipeline.load_domains(cfg)
    pre = _load_ckpt(args.checkpoint)
    ckpt, run_log = pipeline.finetune_target(cfg, pre, target)
    out = _out_path(args, cfg, "finetune.ckpt")
    save_checkpoint(ckpt, out)
    _write_json(out.with_suffix(".log.json"), run_log.to_dict())
    log.info("wrote %s", out)
    return EXIT_OK


def cmd_cluster(args) -> int:
    cfg = _config(args)
    try:
        split = load_featset(args.features)
    except FileNotFoundError as exc:
        raise DataError(f"feature file {args.features} not found") from exc
    records = list(split.train) or list(split.records())
    X = stack_features(records).reshape(len(records), -1).astype(np.float64)
    ccfg = replace(cfg.cluster_config(args.k or cfg.k_global), seed=cfg.seed)
    model, labels = cluster(X, ccfg, Rng(cfg.seed).derive("cli-cluster"))
    out = _out_path(args, cfg, "clusters.json")
    _write_json(out, {
        "k": ccfg.k,
        "seeding": ccfg.init,
        "inertia": model.inertia,
        "record_ids": [int(r.id) for r in records],
        "labels": labels.labels.tolist(),
    })
    log.info("wrote %s", out)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    ckpt = _load_ckpt(args.checkpoint)
    which = args.network or ("teacher" if "teacher" in ckpt.stores else "model")
    if which not in ckpt.stores:
        raise ConfigError(f"checkpoint has no network {which!r}; available: {sorted(ckpt.stores)}")
    if args.data:
        try:
            split = load_featset(args.data)
        except FileNotFoundError as exc:
            raise DataError(f"data file {args.data} not found") from exc
    else:
        split = pipeline.load_domains(cfg)[1]
    rep = pipeline.evaluate_split(ckpt.model(which), split, cfg.filter_same_camera)
    out = _out_path(args, cfg, "eval.json")
    _write_json(out, rep.to_dict())
    out.with_suffix(".csv").write_text(pipeline.report_csv([
        {"network": which, **{k: v for k, v in rep.to_dict().items() if k != "cmc"}}
    ]), encoding="utf-8")
    print(json.dumps({k: v for k, v in rep.to_dict().items() if k != "cmc"}, sort_keys=True))
    return EXIT_OK


def cmd_augment(args) -> int:
    cfg = _config(args)
    try:
        img = read_ppm(args.input)
    except (FileNotFoundError, OSError) as exc:
        raise DataError(f"cannot read image {args.input}: {exc}") from exc
    rng = Rng(cfg.seed).derive("cli-augment")
    for i in range(args.count):
        out = data_adapter(img, cfg.augment, rng.derive(i), erase=args.erase)
        path = Path(args.output) if args.count == 1 else Path(args.output).with_name(
            f"{Path(args.output).stem}_{i}{Path(args.output).suffix}")
        path.parent.mkdir(parents=True, exist_ok=True)
        write_ppm(path, out)
    return EXIT_OK


def cmd_synth_bench(args) -> int:
    cfg = _config(args)
    base = replace(cfg, eval_every_epoch=False)
    out_dir = Path(args.out or (Path(cfg.checkpoint_dir or ".") / "bench"))
    report = pipeline.synth_bench(cfg.seed, args.n_seeds, base, sweep=not args.no_sweep, out_dir=out_dir)
    for key, value in report["summary"].items():
        print(f"{key}: {'PASS' if value['pass'] else 'FAIL'} {json.dumps(value, sort_keys=True)}")
    return EXIT_OK


def cmd_synth_data(args) -> int:
    cfg = _config(args)
    source, target = synth_generate(replace(cfg.synth, seed=cfg.seed))
    out = Path(args.out or ".")
    out.mkdir(parents=True, exist_ok=True)
    meta = {"generator": "synth_generate", "seed": cfg.seed, "synth": asdict(cfg.synth)}
    save_featset(source, out / "source.fset", meta | {"domain": "source"})
    save_featset(target, out / "target.fset", meta | {"domain": "target"})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reid-uda", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML config file")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.set_defaults(func=fn)
        return p

    p = add("pretrain", cmd_pretrain, "supervised training on the source domain")
    p.add_argument("--out", help="checkpoint path (default: <checkpoint_dir>/pretrain.ckpt)")

    p = add("finetune", cmd_finetune, "mean-teacher adaptation on the target domain")
    p.add_argument("--checkpoint", required=True, help="pre-trained checkpoint")
    p.add_argument("--out", help="checkpoint path (default: <checkpoint_dir>/finetune.ckpt)")

    p = add("cluster", cmd_cluster, "cluster the training records of a FEATSET file")
    p.add_argument("--features", required=True, help="FEATSET file")
    p.add_argument("--k", type=int, default=None, help="cluster count (default: k_global)")
    p.add_argument("--out", help="JSON output path")

    p = add("evaluate", cmd_evaluate, "retrieval metrics of a checkpoint on a query/gallery split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--network", choices=("model", "student", "teacher"), default=None)
    p.add_argument("--data", help="FEATSET with query/gallery records (default: configured target)")
    p.add_argument("--out", help="JSON output path; a CSV is written alongside")

    p = add("augment", cmd_augment, "apply the data adapter to a PPM image")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--erase", action="store_true", help="also apply random erasing")

    p = add("synth-bench", cmd_synth_bench, "desk-scale benchmark with ablations")
    p.add_argument("--n-seeds", type=int, default=1)
    p.add_argument("--no-sweep", action="store_true", help="skip the cluster-count sweep")
    p.add_argument("--out", help="output directory (default: <checkpoint_dir>/bench)")

    p = add("synth-data", cmd_synth_data, "write the synthetic domain pair as FEATSET files")
    p.add_argument("--out", help="output directory")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ReidError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
