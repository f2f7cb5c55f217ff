"""Command-line front end: build-dataset, train, infer, sweep, score, rerun.

Every command writes ``run_manifest.json`` into its output directory. On
failure a single JSON error line goes to stderr and the exit code is 1.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .config import RunConfig, load_config
from .degradation import assemble_training_set, list_images, read_image, write_image
from .metrics import (MetricReport, FeatureDistance, aggregate, aggregate_row, evaluate_image,
                      read_injections, stub_nr_metrics, write_reports)
from .pipeline import (load_pairs, load_pipeline, make_trainer, plot_loss, pretrain_autoencoder,
                       save_pipeline, schedule_from, write_loss_csv)
from .sampler import Models, SamplerConfig, preset, sample
from .semantic import SemanticExtractor
from .denoiser import Denoiser
from .sweep import SweepGrid, image_seed, plot_axes, replay_sweep, run_sweep, write_sweep_csv
from .training import prepare_training_data

log = logging.getLogger("semsr")

MANIFEST_NAME = "run_manifest.json"


class CLIError(RuntimeError):
    pass


# -- helpers -------------------------------------------------------------------

def _run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def write_run_manifest(out: Path, command: str, argv: list[str], config: dict | None,
                       seeds: dict, extra: dict | None = None) -> Path:
    doc = {"command": command, "argv": list(argv), "code_version": __version__,
           "config": config, "seeds": seeds, "extra": extra or {},
           "created_at": dt.datetime.now(dt.timezone.utc).isoformat()}
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _parse_overrides(pairs: list[str] | None) -> dict:
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise CLIError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = yaml.safe_load(v)
    return out


def sampler_config(cfg: RunConfig, preset_name: str | None, overrides: dict) -> SamplerConfig:
    """Preset (or the plain defaults), then config-file overrides, then command-line ones."""
    merged = {**cfg.sampler, **overrides}
    try:
        if preset_name:
            return preset(preset_name, **merged)
        return SamplerConfig(**merged)
    except TypeError as exc:
        raise CLIError(f"bad sampler override: {exc}") from exc


def _read_dir(directory) -> dict[str, np.ndarray]:
    images = {}
    for p in list_images(directory):
        try:
            images[p.stem] = read_image(p)
        except Exception as exc:
            log.warning("skipping unreadable image %s: %s", p, exc)
    return images


def _scorer(nr: str, perceptual: str, extractor=None):
    nr_metrics = stub_nr_metrics() if nr == "stub" else None
    plugin = FeatureDistance(extractor or SemanticExtractor()) if perceptual == "feature" else None

    def score(image_id, sr, ref):
        return evaluate_image(image_id, sr, ref, plugin, nr_metrics)
    return score


# -- commands --------------------------------------------------------------------

def cmd_build_dataset(args, argv) -> dict:
    cfg = _run_config(args)
    if args.seed is not None:
        cfg.dataset.global_seed = args.seed
    src = cfg.sources
    out = _out_dir(args)
    manifest = assemble_training_set(src.lsdir, src.ugc_pairs, src.ugc_hr, cfg.dataset, out)
    for branch, n in manifest.component_counts.items():
        log.info("component %s: %d patches", branch, n)
    write_run_manifest(out, "build-dataset", argv, cfg.to_dict(),
                       {"global_seed": cfg.dataset.global_seed},
                       {"component_counts": manifest.component_counts,
                        "num_records": len(manifest.records), "skipped": manifest.skipped})
    return {"manifest": str(out / "manifest.jsonl"), "counts": manifest.component_counts}


def cmd_train(args, argv) -> dict:
    out = _out_dir(args)
    pairs = load_pairs(args.manifest)
    if not pairs:
        raise CLIError("manifest has no records")
    if args.resume:
        cfg, models, trainer_state = load_pipeline(args.resume)
        log.info("resuming from %s at step %d", args.resume, trainer_state["step"] if trainer_state else 0)
    else:
        cfg = _run_config(args)
        ae = pretrain_autoencoder(cfg, pairs)
        models = Models(ae, Denoiser(cfg.denoiser), SemanticExtractor(cfg.extractor))
        trainer_state = None
    if args.steps is not None:
        cfg.optimizer = replace(cfg.optimizer, steps=args.steps)
    data = prepare_training_data(pairs, models.autoencoder, models.extractor,
                                 cfg.denoiser.prompt_dim, models.tagger)
    trainer = make_trainer(cfg, models, data)
    if trainer_state:
        trainer.load_state_dict(trainer_state)
    start = trainer.frozen_checksums()
    log.info("frozen checksums at start: %s", start)
    trainer.train(max(0, cfg.optimizer.steps - trainer.step))
    end = trainer.verify_frozen()
    log.info("frozen checksums at end: %s", end)

    ckpt = out / "checkpoint.pt"
    save_pipeline(ckpt, cfg, models, trainer.state_dict())
    write_loss_csv(out / "loss.csv", trainer.history)
    plot_loss(out / "loss.png", trainer.history)
    write_run_manifest(out, "train", argv, cfg.to_dict(),
                       {"seed": cfg.seed, "optimizer_seed": cfg.optimizer.seed},
                       {"frozen_checksums_start": start, "frozen_checksums_end": end,
                        "final_step": trainer.step, "manifest": str(args.manifest),
                        "resumed_from": args.resume})
    return {"checkpoint": str(ckpt), "step": trainer.step}


def cmd_infer(args, argv) -> dict:
    cfg, models, _ = load_pipeline(args.checkpoint)
    if args.seed is not None:
        cfg.seed = args.seed
    base = sampler_config(cfg, args.preset, _parse_overrides(args.set))
    sched = schedule_from(cfg)
    out = _out_dir(args)
    per_image = {}
    for image_id, lr in _read_dir(args.input).items():
        scfg = replace(base, seed=image_seed(cfg.seed, image_id))
        sr = sample(scfg, lr, models, sched)
        write_image(out / f"{image_id}.png", sr)
        per_image[image_id] = scfg.to_dict()
    write_run_manifest(out, "infer", argv, cfg.to_dict(), {"seed": cfg.seed},
                       {"checkpoint": str(args.checkpoint), "preset": args.preset,
                        "sampler": per_image})
    return {"images": len(per_image)}


def cmd_sweep(args, argv) -> dict:
    grid = SweepGrid.load(args.grid)
    out = _out_dir(args)
    if args.replay:
        if not args.inject_metrics:
            raise CLIError("--replay needs --inject-metrics DIR")
        cfg_dict, seed = None, args.seed or 0
        results = replay_sweep(grid, args.inject_metrics)
    else:
        if not (args.checkpoint and args.input):
            raise CLIError("sweep needs --checkpoint and --input unless --replay is given")
        cfg, models, _ = load_pipeline(args.checkpoint)
        seed = cfg.seed if args.seed is None else args.seed
        cfg_dict = cfg.to_dict()
        sched = schedule_from(cfg)
        images = _read_dir(args.input)
        refs = _read_dir(args.ref) if args.ref else {}
        score = _scorer(args.nr, args.perceptual, models.extractor)
        results = run_sweep(grid, images, refs, lambda c, lr: sample(c, lr, models, sched), score,
                            seed=seed, workers=args.workers, inject_dir=args.inject_metrics)
    rows = write_sweep_csv(out / "sweep.csv", grid, results)
    plots = plot_axes(out, grid, results)
    write_run_manifest(out, "sweep", argv, cfg_dict, {"seed": seed},
                       {"grid": {"axes": grid.axes, "preset": grid.preset, "fixed": grid.fixed},
                        "replay": bool(args.replay), "workers": args.workers})
    return {"rows": len(rows), "plots": [str(p) for p in plots]}


def cmd_score(args, argv) -> dict:
    out = _out_dir(args)
    injections = read_injections(args.inject_metrics) if args.inject_metrics else {}
    reports: list[MetricReport] = []
    if args.sr:
        srs = _read_dir(args.sr)
        refs = _read_dir(args.ref) if args.ref else None
        if refs is not None:
            for k in sorted(set(srs) ^ set(refs)):
                log.warning("unmatched file %s skipped", k)
            srs = {k: v for k, v in srs.items() if k in refs}
        score = _scorer(args.nr, args.perceptual)
        for image_id in sorted(srs):
            ref = refs[image_id] if refs is not None else None
            rep = score(image_id, srs[image_id], ref)
            if image_id in injections:
                rep.merge_injected(injections[image_id])
            reports.append(rep)
    else:
        if not injections:
            raise CLIError("score needs --sr or --inject-metrics")
        reports = [MetricReport(image_id=k).merge_injected(v) for k, v in injections.items()]
    card = aggregate(reports)
    extra = [aggregate_row(card, "__mean__")]
    som = {"image_id": "__score_of_means__", **{k: "" if v is None else repr(v)
                                                 for k, v in card.score_of_means.items()}}
    extra.append(som)
    write_reports(out / "scorecard.csv", reports, extra)
    write_run_manifest(out, "score", argv, None, {},
                       {"sr": args.sr, "ref": args.ref, "inject_metrics": args.inject_metrics,
                        "nr": args.nr, "perceptual": args.perceptual,
                        "psnr_inf_excluded": card.psnr_inf_excluded})
    return {"images": len(reports), **card.mean_of_scores}


def cmd_rerun(args, argv) -> dict:
    """Re-execute a recorded command with its embedded config into a new output directory."""
    doc = json.loads(Path(args.manifest).read_text())
    old = list(doc["argv"])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    new = _replace_flag(old, "--out", str(out))
    if doc.get("config") is not None and "--config" in old:
        cfg_path = out / "rerun_config.yaml"
        cfg_path.write_text(yaml.safe_dump(doc["config"], sort_keys=True))
        new = _replace_flag(new, "--config", str(cfg_path))
    return dispatch(new)


def _replace_flag(argv, flag, value):
    argv = list(argv)
    if flag in argv:
        argv[argv.index(flag) + 1] = value
    else:
        argv += [flag, value]
    return argv


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="semsr", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="run config (YAML)")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("build-dataset", help="degrade sources into training patches")
    common(p)

    p = sub.add_parser("train", help="fine-tune the control branch and attention blocks")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--resume", help="pipeline checkpoint to continue from")
    p.add_argument("--steps", type=int, help="total step target (overrides the config)")

    p = sub.add_parser("infer", help="super-resolve a directory of LR images")
    common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--preset", choices=["synthetic", "wild"])
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="sampler override")

    p = sub.add_parser("sweep", help="grid over sampler settings")
    common(p, config=False)
    p.add_argument("--grid", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--input")
    p.add_argument("--ref", help="HR references for full-reference metrics")
    p.add_argument("--inject-metrics", help="directory of <grid label>.csv metric files")
    p.add_argument("--replay", action="store_true", help="score from injected metrics only")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--nr", choices=["none", "stub"], default="none")
    p.add_argument("--perceptual", choices=["feature", "none"], default="feature")

    p = sub.add_parser("score", help="score SR images and/or injected metrics")
    common(p, config=False)
    p.add_argument("--sr")
    p.add_argument("--ref")
    p.add_argument("--inject-metrics", help="metric CSV keyed by image_id")
    p.add_argument("--nr", choices=["none", "stub"], default="none")
    p.add_argument("--perceptual", choices=["feature", "none"], default="feature")

    p = sub.add_parser("rerun", help="repeat a run from its run_manifest.json")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    return ap


COMMANDS = {"build-dataset": cmd_build_dataset, "train": cmd_train, "infer": cmd_infer,
            "sweep": cmd_sweep, "score": cmd_score, "rerun": cmd_rerun}


def dispatch(argv: list[str]) -> dict:
    args = build_parser().parse_args(argv)
    return COMMANDS[args.command](args, argv)


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    verbose = "-v" in argv or "--verbose" in argv
    logging.basicConfig(level=logging.DEBUG if verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    command = next((a for a in argv if a in COMMANDS), None)
    try:
        result = dispatch(argv)
    except SystemExit:
        raise
    except Exception as exc:
        err = {"status": "error", "command": command, "error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(err), file=sys.stderr)
        return 1
    print(json.dumps({"status": "ok", "command": command, **result}, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
