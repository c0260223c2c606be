"""Command-line entry point: ``dplreid <subcommand> ...``.

Every subcommand is non-interactive and exits nonzero on any error. Training
and evaluation commands accept ``--config FILE`` and repeated
``--set key=value``; explicit flags win over both.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np

from .augment import augment_sample
from .config import ConfigError, RunConfig, load_config
from .evaluation import EvalReport
from .export import dump_heatmaps, export_embeddings
from .model import load_checkpoint, save_checkpoint
from .occlusion_library import (
    LibraryError,
    build_synthetic_library,
    load_manifest,
    save_manifest,
    shipped_library_path,
    validate_manifest,
)
from .pipeline import (
    PipelineError,
    evaluate_all,
    primary,
    resolve_data,
    resolve_library,
    run_pipeline,
    train_stage1,
    train_stage2,
    write_csv,
    write_report,
)
from .plotting import plot_cmc, plot_loss_curves
from .rng import derive_seed
from .samples import SPLITS, dataset_meta, load_dataset, save_dataset
from .stage1 import STAGE1_COLUMNS
from .stage2 import STAGE2_COLUMNS
from .synth_data import build_dataset

log = logging.getLogger("dplreid")


# --- shared plumbing ------------------------------------------------------------

def _key_value(text: str):
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def _add_config_flags(p: argparse.ArgumentParser, seed: bool = True) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--set", dest="sets", action="append", type=_key_value, default=[],
                   metavar="KEY=VALUE", help="override one config key (repeatable)")
    if seed:
        p.add_argument("--seed", type=int, help="run seed (fallback: $DPL_SEED, then config)")


def _add_data_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", type=Path, help="dataset directory (default: generate the synthetic set)")
    p.add_argument("--library", help="occlusion library manifest; 'synthetic' for the shipped one, 'none' for no library")


def _config(args, extra: Optional[Dict[str, object]] = None) -> RunConfig:
    overrides: Dict[str, object] = dict(getattr(args, "sets", []))
    flags = {"seed": getattr(args, "seed", None)}
    if getattr(args, "data", None) is not None:
        flags["data.path"] = str(args.data)
    lib = getattr(args, "library", None)
    if lib is not None:
        flags["library.path"] = "" if lib.lower() == "none" else lib
    flags.update(extra or {})
    overrides.update({k: v for k, v in flags.items() if v is not None})
    return load_config(getattr(args, "config", None), overrides)


def _summary(name: str, rep: EvalReport) -> str:
    ranks = " ".join(f"R{k} {rep.rank(k):.4f}" for k in (1, 5, 10) if k <= len(rep.cmc))
    return f"{name}: mAP {rep.map:.4f} {ranks} excluded {rep.excluded_queries}"


# --- subcommands ---------------------------------------------------------------------

def cmd_gen_synth(args) -> int:
    extra = {}
    if args.num_ids is not None:
        extra["data.num_ids"] = args.num_ids
    cfg = _config(args, extra)
    dcfg = cfg.dataset()
    splits = build_dataset(dcfg)
    save_dataset(splits, args.out, meta={"generator": "synthetic", **asdict(dcfg)})
    print(f"wrote {sum(len(v) for v in splits.values())} images to {args.out} "
          + " ".join(f"{k}={len(v)}" for k, v in splits.items()))
    return 0


def cmd_build_library(args) -> int:
    lib = build_synthetic_library(seed=args.seed if args.seed is not None else 0)
    path = save_manifest(lib, args.out)
    print(f"wrote {len(lib)} instances to {path} {lib.category_counts}")
    return 0


def cmd_validate_library(args) -> int:
    path = shipped_library_path() if str(args.manifest) == "synthetic" else args.manifest
    try:
        lib = load_manifest(path)
    except LibraryError as exc:
        print(f"violation: {exc}")
        print("1 violation")
        return 1
    problems = validate_manifest(lib)
    for iid, msg in problems:
        print(f"violation: {iid}: {msg}")
    counts = " ".join(f"{k}={v}" for k, v in sorted(lib.category_counts.items()))
    print(f"{len(lib)} instances ({counts}), {len(problems)} violations")
    return 1 if problems else 0


def cmd_augment(args) -> int:
    extra = {"augment.ratio": args.ratio, "augment.strong_weight": args.strong_weight}
    if args.no_clamp:
        extra["augment.clamp_output"] = False
    if args.no_align:
        extra["augment.align"] = False
    cfg = _config(args, extra)
    lib = resolve_library(cfg)
    aug = cfg.augment()
    splits = load_dataset(args.data)
    out: Dict[str, list] = {}
    sidecar = {}
    for si, split in enumerate(SPLITS):
        out[split] = []
        for i, s in enumerate(splits.get(split, [])):
            img_seed = derive_seed(cfg.seed, 40, si, i)
            new, iid = augment_sample(s, lib, aug, np.random.default_rng(img_seed))
            out[split].append(new)
            sidecar[f"{split}/{s.name}.png"] = {"instance_id": iid, "seed": img_seed,
                                                "aligned": bool(iid is not None and aug.align)}
    meta = dict(dataset_meta(args.data))
    meta["augment"] = {"seed": cfg.seed, **asdict(aug)}
    save_dataset(out, args.out, meta=meta)
    side = Path(args.out) / "augment.json"
    side.write_text(json.dumps(sidecar, indent=1, sort_keys=True) + "\n")
    n_occ = sum(v["instance_id"] is not None for v in sidecar.values())
    print(f"occluded {n_occ}/{len(sidecar)} images; sidecar {side}")
    return 0


def cmd_train_stage1(args) -> int:
    extra = {"template": args.template, "model.variant": args.variant}
    cfg = _config(args, extra)
    lib = resolve_library(cfg)
    data = resolve_data(cfg)
    model, rows = train_stage1(cfg, data["train"], lib)
    ckpt = save_checkpoint(args.out, model, {"stage": 1, "seed": cfg.seed})
    csv_path = write_csv(rows, STAGE1_COLUMNS, args.log or Path(args.out).with_suffix(".csv"))
    plot_loss_curves(rows, STAGE1_COLUMNS[1:], csv_path.with_suffix(".png"), "stage 1")
    print(f"stage1 loss {rows[0]['total']:.4f} -> {rows[-1]['total']:.4f}; wrote {ckpt} and {csv_path}")
    return 0


def cmd_train_stage2(args) -> int:
    extra = {"template": args.template, "augment.ratio": args.ratio}
    if args.no_wgff:
        extra["stage2.wgff"] = False
    cfg = _config(args, extra)
    model, meta = load_checkpoint(args.stage1)
    if args.variant is not None and args.variant != model.cfg.variant:
        raise ConfigError(f"--variant {args.variant} does not match the stage-1 checkpoint ({model.cfg.variant})")
    lib = resolve_library(cfg)
    data = resolve_data(cfg)
    model, rows = train_stage2(cfg, data["train"], lib, model)
    ckpt = save_checkpoint(args.out, model, {"stage": 2, "seed": cfg.seed})
    csv_path = write_csv(rows, STAGE2_COLUMNS, args.log or Path(args.out).with_suffix(".csv"))
    plot_loss_curves(rows, STAGE2_COLUMNS[1:5], csv_path.with_suffix(".png"), "stage 2")
    print(f"stage2 loss {rows[0]['total']:.4f} -> {rows[-1]['total']:.4f} "
          f"alpha {rows[-1]['alpha']:.3f} beta {rows[-1]['beta']:.3f}; wrote {ckpt}")
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args, {"eval.metric": args.metric, "eval.ratio": args.ratio})
    model, _ = load_checkpoint(args.checkpoint)
    lib = resolve_library(cfg)
    data = resolve_data(cfg)
    reports = evaluate_all(cfg, model, data, lib)
    for name, rep in reports.items():
        print(_summary(name, rep))
    if args.report:
        name, rep = primary(reports)
        path = write_report(rep, args.report, {"protocol": name, "seed": cfg.seed})
        fig = plot_cmc({k: r.cmc for k, r in reports.items()}, Path(path).with_suffix(".png"))
        print(f"wrote {path} and {fig}")
    return 0


def _eval_split(args) -> list:
    data = load_dataset(args.data) if args.data else build_dataset(_config(args).dataset())
    if args.split not in data or not data[args.split]:
        raise ConfigError(f"split {args.split!r} is empty")
    samples = data[args.split]
    return samples[: args.limit] if getattr(args, "limit", None) else samples


def cmd_export_embeddings(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    samples = _eval_split(args)
    path = export_embeddings(model, samples, args.out)
    print(f"wrote {len(samples)} x {model.cfg.D} embeddings to {path}")
    return 0


def cmd_dump_heatmap(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    samples = _eval_split(args)
    paths = dump_heatmaps(model, samples, args.out)
    print(f"wrote {len(paths)} heatmaps to {args.out}")
    return 0


def cmd_run(args) -> int:
    extra = {"template": args.template, "augment.ratio": args.ratio, "model.variant": args.variant}
    if args.no_wgff:
        extra["stage2.wgff"] = False
    cfg = _config(args, extra)
    run_dir = run_pipeline(cfg, args.runs_dir)
    rep = json.loads((run_dir / "report.json").read_text())
    print(f"run complete: {run_dir} ({rep['protocol']} mAP {rep['map']:.4f} R1 {rep['rank']['1']:.4f})")
    return 0


# --- parser --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dplreid", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate the synthetic dataset")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--num-ids", type=int)
    _add_config_flags(p)
    p.set_defaults(fn=cmd_gen_synth)

    p = sub.add_parser("build-library", help="write the procedural occlusion library")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_build_library)

    p = sub.add_parser("validate-library", help="check a library manifest and its images")
    p.add_argument("manifest", type=Path, help="manifest path, or 'synthetic' for the shipped library")
    p.set_defaults(fn=cmd_validate_library)

    p = sub.add_parser("augment", help="occlude a dataset directory")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--library", help="manifest path or 'synthetic'")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--ratio", type=float)
    p.add_argument("--strong-weight", type=float)
    p.add_argument("--no-clamp", action="store_true")
    p.add_argument("--no-align", action="store_true")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_augment)

    p = sub.add_parser("train-stage1", help="warm up encoders and fit the prompts")
    _add_data_flags(p)
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--log", type=Path, help="loss CSV (default: next to the checkpoint)")
    p.add_argument("--template", choices=("full", "occ", "both"))
    p.add_argument("--variant", choices=("grid", "token"))
    _add_config_flags(p)
    p.set_defaults(fn=cmd_train_stage1)

    p = sub.add_parser("train-stage2", help="train the image side from a stage-1 checkpoint")
    _add_data_flags(p)
    p.add_argument("--stage1", type=Path, required=True, help="stage-1 checkpoint")
    p.add_argument("--out", type=Path, required=True, help="checkpoint path")
    p.add_argument("--log", type=Path)
    p.add_argument("--ratio", type=float)
    p.add_argument("--variant", choices=("grid", "token"), help="must match the stage-1 checkpoint")
    p.add_argument("--no-wgff", action="store_true")
    p.add_argument("--template", choices=("full", "occ", "both"))
    _add_config_flags(p)
    p.set_defaults(fn=cmd_train_stage2)

    p = sub.add_parser("eval", help="rank the gallery for every query")
    p.add_argument("--checkpoint", type=Path, required=True)
    _add_data_flags(p)
    p.add_argument("--metric", choices=("cosine", "euclidean"))
    p.add_argument("--ratio", type=float, help="eval-side occlusion ratio (0: clean only)")
    p.add_argument("--report", type=Path, help="report JSON; a CMC figure is written next to it")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_eval)

    for name, fn, help_text in (("export-embeddings", cmd_export_embeddings, "write n x D float32 embeddings"),
                                ("dump-heatmap", cmd_dump_heatmap, "write feature-norm heatmaps as PNGs")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--data", type=Path)
        p.add_argument("--split", choices=SPLITS, default="gallery")
        p.add_argument("--out", type=Path, required=True)
        if name == "dump-heatmap":
            p.add_argument("--limit", type=int, help="first N images only")
        _add_config_flags(p)
        p.set_defaults(fn=fn)

    p = sub.add_parser("run", help="full pipeline into runs/<timestamp>-<seed>/")
    _add_data_flags(p)
    p.add_argument("--runs-dir", type=Path, default=Path("runs"))
    p.add_argument("--ratio", type=float)
    p.add_argument("--template", choices=("full", "occ", "both"))
    p.add_argument("--variant", choices=("grid", "token"))
    p.add_argument("--no-wgff", action="store_true")
    _add_config_flags(p)
    p.set_defaults(fn=cmd_run)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except PipelineError as exc:
        print(f"error {exc}", file=sys.stderr)
    except (ConfigError, LibraryError, FileNotFoundError, ValueError, KeyError, RuntimeError) as exc:
        print(f"error [{args.command}] {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
