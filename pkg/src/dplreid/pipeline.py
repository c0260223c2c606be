"""End-to-end orchestration: data, library, Stage 1, Stage 2, evaluation, report.

Each run writes ``<runs_root>/<timestamp>-<seed>/`` containing the resolved
config, the seed, a run log, both checkpoints, per-stage loss CSVs, the
evaluation reports and their figures. Failures are raised as
``PipelineError`` tagged with the stage that failed.
"""

from __future__ import annotations

import csv
import json
import logging
import time
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple


from .config import RunConfig
from .evaluation import EvalReport, evaluate_model, occlude_eval_samples
from .model import DPLReID, save_checkpoint
from .occlusion_library import LibraryError, LibraryManifest, load_manifest, shipped_library_path
from .plotting import plot_cmc, plot_loss_curves
from .samples import ImageSample, load_dataset
from .stage1 import STAGE1_COLUMNS, run_stage1
from .stage2 import STAGE2_COLUMNS, run_stage2
from .synth_data import build_dataset

log = logging.getLogger("dplreid")


class PipelineError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


# --- inputs ----------------------------------------------------------------------

def needs_library(cfg: RunConfig) -> List[str]:
    """Reasons the configuration needs an occlusion library (empty when it does not)."""
    reasons = []
    if cfg["augment.ratio"] > 0:
        reasons.append(f"augment.ratio = {cfg['augment.ratio']}")
    if cfg.template != "full":
        reasons.append(f"template = {cfg.template}")
    if cfg["eval.ratio"] > 0:
        reasons.append(f"eval.ratio = {cfg['eval.ratio']}")
    return reasons


def resolve_library(cfg: RunConfig) -> Optional[LibraryManifest]:
    """``synthetic`` loads the shipped library, an empty path means none."""
    path = cfg["library.path"].strip()
    reasons = needs_library(cfg)
    if not path:
        if reasons:
            raise PipelineError("library", f"no library path given but {', '.join(reasons)} needs one")
        return None
    manifest = shipped_library_path() if path == "synthetic" else Path(path)
    try:
        return load_manifest(manifest)
    except (FileNotFoundError, LibraryError) as exc:
        raise PipelineError("library", str(exc)) from None


def resolve_data(cfg: RunConfig) -> Dict[str, List[ImageSample]]:
    path = cfg["data.path"].strip()
    try:
        data = load_dataset(path) if path else build_dataset(cfg.dataset())
    except (FileNotFoundError, ValueError, KeyError) as exc:
        raise PipelineError("data", str(exc)) from None
    for split in ("train", "query", "gallery"):
        if not data.get(split):
            raise PipelineError("data", f"split {split!r} is empty")
    return data


# --- outputs ---------------------------------------------------------------------

def write_csv(rows: Sequence[Mapping[str, float]], columns: Sequence[str], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([r[c] if c == "epoch" else repr(float(r[c])) for c in columns])
    return path


def write_report(report: EvalReport, path, extra: Optional[dict] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = report.to_dict()
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def unique_run_dir(root: Path, seed: int, stamp: Optional[str] = None) -> Path:
    stamp = stamp or time.strftime("%Y%m%d-%H%M%S")
    base = root / f"{stamp}-{seed}"
    out, k = base, 1
    while out.exists():
        k += 1
        out = root / f"{stamp}-{seed}-{k}"
    out.mkdir(parents=True)
    return out


# --- stages ------------------------------------------------------------------------

def _tagged(stage: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PipelineError:
        raise
    except Exception as exc:  # noqa: BLE001 - every failure gets the stage tag
        raise PipelineError(stage, f"{type(exc).__name__}: {exc}") from exc


def train_stage1(cfg: RunConfig, train: Sequence[ImageSample], lib: Optional[LibraryManifest]):
    h, w = train[0].pixels.shape[:2]
    return _tagged("stage1", run_stage1, cfg.stage1(), train, lib, cfg.model(h, w))


def train_stage2(cfg: RunConfig, train: Sequence[ImageSample], lib: Optional[LibraryManifest], model: DPLReID):
    return _tagged("stage2", run_stage2, cfg.stage2(), train, lib, model)


def evaluation_sets(cfg: RunConfig, data, lib) -> Dict[str, Tuple[list, list]]:
    sets = {"clean": (data["query"], data["gallery"])}
    ratio = cfg["eval.ratio"]
    if ratio > 0:
        aug = cfg.eval_augment()
        sets["occluded"] = (occlude_eval_samples(data["query"], lib, ratio, cfg.seed, aug, stream=1),
                            occlude_eval_samples(data["gallery"], lib, ratio, cfg.seed, aug, stream=2))
    return sets


def evaluate_all(cfg: RunConfig, model: DPLReID, data, lib) -> Dict[str, EvalReport]:
    def go():
        return {name: evaluate_model(model, q, g, cfg["eval.metric"])
                for name, (q, g) in evaluation_sets(cfg, data, lib).items()}
    return _tagged("eval", go)


def primary(reports: Mapping[str, EvalReport]) -> Tuple[str, EvalReport]:
    name = "occluded" if "occluded" in reports else "clean"
    return name, reports[name]


def run_pipeline(cfg: RunConfig, runs_root="runs", stamp: Optional[str] = None) -> Path:
    """Run every stage in order and return the run directory.

    Inputs (library, dataset) are validated before any training starts.
    """
    # Building the component configs validates every value up front.
    _tagged("config", lambda: (cfg.dataset(), cfg.model(), cfg.stage1(), cfg.stage2(), cfg.eval_augment()))
    lib = resolve_library(cfg)
    data = resolve_data(cfg)

    run_dir = unique_run_dir(Path(runs_root), cfg.seed, stamp)
    handler = logging.FileHandler(run_dir / "run.log", mode="w")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    log.addHandler(handler)
    prev_level = log.level
    log.setLevel(logging.INFO)
    try:
        (run_dir / "config.txt").write_text(cfg.dump())
        (run_dir / "seed.txt").write_text(f"{cfg.seed}\n")
        log.info("resolved config:\n%s", cfg.dump().rstrip())
        log.info("data: %s", {k: len(v) for k, v in data.items()})

        model, rows1 = train_stage1(cfg, data["train"], lib)
        save_checkpoint(run_dir / "stage1.ckpt", model, {"stage": 1, "seed": cfg.seed})
        write_csv(rows1, STAGE1_COLUMNS, run_dir / "stage1_loss.csv")
        plot_loss_curves(rows1, STAGE1_COLUMNS[1:], run_dir / "stage1_loss.png", "stage 1")

        model, rows2 = train_stage2(cfg, data["train"], lib, model)
        save_checkpoint(run_dir / "stage2.ckpt", model, {"stage": 2, "seed": cfg.seed})
        write_csv(rows2, STAGE2_COLUMNS, run_dir / "stage2_loss.csv")
        plot_loss_curves(rows2, STAGE2_COLUMNS[1:5], run_dir / "stage2_loss.png", "stage 2")

        reports = evaluate_all(cfg, model, data, lib)
        for name, rep in reports.items():
            write_report(rep, run_dir / f"report_{name}.json", {"protocol": name, "seed": cfg.seed})
            log.info("%s: rank-1 %.4f mAP %.4f", name, rep.rank(1), rep.map)
        name, rep = primary(reports)
        write_report(rep, run_dir / "report.json", {"protocol": name, "seed": cfg.seed})
        write_cmc_csv(reports, run_dir / "cmc.csv")
        plot_cmc({k: r.cmc for k, r in reports.items()}, run_dir / "cmc.png")
    finally:
        log.removeHandler(handler)
        handler.close()
        log.setLevel(prev_level)
    return run_dir


def write_cmc_csv(reports: Mapping[str, EvalReport], path) -> Path:
    names = list(reports)
    n = max(len(r.cmc) for r in reports.values())
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", *names])
        for k in range(n):
            w.writerow([k + 1, *(repr(float(reports[m].cmc[k])) if k < len(reports[m].cmc) else "" for m in names)])
    return Path(path)
