"""Hyperparameter sweeps over sampler settings, with CSV rows and per-axis plots."""

from __future__ import annotations

import csv
import itertools
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import yaml

from .degradation import derive_seed
from .metrics import CSV_HEADER, SCORE_FIELDS, MetricReport, aggregate, aggregate_row, \
    read_injections, report_row
from .prompts import PROMPT_SETS
from .sampler import PRESETS, SamplerConfig, preset

log = logging.getLogger(__name__)

AXES = ("guidance_scale", "start_point", "prompt_set")
MEAN_ID = "__mean__"


@dataclass
class SweepGrid:
    axes: dict[str, list]
    preset: str = "wild"
    fixed: dict = field(default_factory=dict)  # SamplerConfig overrides shared by every point

    def __post_init__(self):
        if not self.axes:
            raise ValueError("sweep grid needs at least one axis")
        bad = set(self.axes) - set(AXES)
        if bad:
            raise ValueError(f"unknown sweep axes {sorted(bad)}; allowed {list(AXES)}")
        for k, vals in self.axes.items():
            if not isinstance(vals, list) or not vals:
                raise ValueError(f"axis {k!r} needs a non-empty list of values")
        for v in self.axes.get("prompt_set", []):
            if v not in PROMPT_SETS:
                raise ValueError(f"prompt_set {v!r} not in {sorted(PROMPT_SETS)}")
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        self.base_config()  # validate fixed overrides early

    @classmethod
    def load(cls, path) -> "SweepGrid":
        data = yaml.safe_load(Path(path).read_text()) or {}
        unknown = set(data) - {"axes", "preset", "fixed"}
        if unknown:
            raise ValueError(f"{path}: unknown keys {sorted(unknown)}")
        return cls(**data)

    def base_config(self) -> SamplerConfig:
        return preset(self.preset, **self.fixed)

    def points(self) -> list[dict]:
        names = list(self.axes)
        return [dict(zip(names, combo)) for combo in itertools.product(*(self.axes[n] for n in names))]

    def __len__(self):
        return math.prod(len(v) for v in self.axes.values())


def point_label(point: dict) -> str:
    return ",".join(f"{k}={v}" for k, v in point.items())


def point_config(base: SamplerConfig, point: dict, seed: int | None = None) -> SamplerConfig:
    kw = {k: v for k, v in point.items() if k != "prompt_set"}
    if "guidance_scale" in kw:
        kw["guidance_scale"] = float(kw["guidance_scale"])
    if "prompt_set" in point:
        name = point["prompt_set"]
        kw["positive_prompt"] = list(PROMPT_SETS[name]) if name == "positive" else []
        kw["negative_prompt"] = list(PROMPT_SETS[name]) if name == "negative" else []
    if seed is not None:
        kw["seed"] = seed
    return replace(base, **kw)


def image_seed(seed: int, image_id: str) -> int:
    return derive_seed(seed, f"image:{image_id}") % (2 ** 63)


@dataclass
class PointResult:
    point: dict
    status: str
    reports: list[MetricReport]


def _run_point(point, grid, images, refs, seed, sample_fn, score_fn, injections):
    base = grid.base_config()
    reports = []
    for image_id, lr in images.items():
        cfg = point_config(base, point, image_seed(seed, image_id))
        sr = sample_fn(cfg, lr)
        rep = score_fn(image_id, sr, refs.get(image_id))
        if injections and image_id in injections:
            rep.merge_injected(injections[image_id])
        reports.append(rep)
    return reports


def run_sweep(grid: SweepGrid, images: dict[str, np.ndarray], refs: dict[str, np.ndarray],
              sample_fn: Callable, score_fn: Callable, seed: int = 0, workers: int = 1,
              inject_dir=None) -> list[PointResult]:
    """Sample and score every (grid point, image); grid points run on a thread pool.

    ``sample_fn(cfg, lr) -> sr`` and ``score_fn(image_id, sr, ref) -> MetricReport``.
    A failing point yields empty reports and the sweep carries on.
    """
    points = grid.points()

    def job(point):
        inj = _injection_file(inject_dir, point)
        try:
            reports = _run_point(point, grid, images, refs, seed, sample_fn, score_fn,
                                 read_injections(inj) if inj else None)
            return PointResult(point, "ok", reports)
        except Exception as exc:
            log.error("grid point %s failed: %s", point_label(point), exc)
            return PointResult(point, "failed", [MetricReport(image_id=i) for i in images])

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(job, points))


def _injection_file(inject_dir, point) -> Path | None:
    if inject_dir is None:
        return None
    p = Path(inject_dir) / f"{point_label(point)}.csv"
    return p if p.is_file() else None


def replay_sweep(grid: SweepGrid, inject_dir) -> list[PointResult]:
    """Score every grid point purely from injected metric files ``<label>.csv``."""
    out = []
    for point in grid.points():
        path = _injection_file(inject_dir, point)
        if path is None:
            log.error("no injection file for grid point %s", point_label(point))
            out.append(PointResult(point, "failed", []))
            continue
        reports = [MetricReport(image_id=k).merge_injected(v) for k, v in read_injections(path).items()]
        out.append(PointResult(point, "injected", reports))
    return out


def sweep_rows(grid: SweepGrid, results: list[PointResult]) -> tuple[list[str], list[dict]]:
    columns = ["grid_point", *grid.axes, "status", *CSV_HEADER]
    rows = []
    for res in results:
        lead = {"grid_point": point_label(res.point), **{k: res.point[k] for k in grid.axes},
                "status": res.status}
        for rep in res.reports:
            rows.append({**lead, **report_row(rep)})
        rows.append({**lead, **aggregate_row(aggregate(res.reports), MEAN_ID)})
    return columns, rows


def write_sweep_csv(path, grid: SweepGrid, results: list[PointResult]) -> list[dict]:
    columns, rows = sweep_rows(grid, results)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        w.writerows(rows)
    return rows


def aggregate_scores(results: list[PointResult]) -> list[dict]:
    """Mean-of-scores per grid point."""
    return [{**r.point, **aggregate(r.reports).mean_of_scores} for r in results]


def plot_axes(out_dir, grid: SweepGrid, results: list[PointResult]) -> list[Path]:
    """One score-vs-value plot per axis; other axes are averaged out."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    table = aggregate_scores(results)
    paths = []
    for axis, values in grid.axes.items():
        fig, ax = plt.subplots(figsize=(5, 3.5))
        xs = np.arange(len(values))
        drawn = False
        for score in SCORE_FIELDS:
            ys = []
            for v in values:
                vals = [row[score] for row in table if row[axis] == v and row[score] is not None]
                ys.append(float(np.mean(vals)) if vals else np.nan)
            if not np.all(np.isnan(ys)):
                ax.plot(xs, ys, marker="o", label=score)
                drawn = True
        ax.set_xticks(xs, [str(v) for v in values])
        ax.set_xlabel(axis)
        ax.set_ylabel("score")
        if drawn:
            ax.legend()
        else:
            ax.text(0.5, 0.5, "no scores available", ha="center", transform=ax.transAxes)
        fig.tight_layout()
        path = Path(out_dir) / f"sweep_{axis}.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        paths.append(path)
    return paths
