"""Full-reference metrics, pluggable no-reference metrics and challenge scores.

Scores are fixed linear maps of per-image metrics:

    wild      = 0.1 * MUSIQ + 10 * ManIQA + 10 * CLIPIQA
    synthetic = PSNR + 10 * SSIM - 10 * LPIPS
    combined  = synthetic + wild

A missing input makes the dependent score ``None``; it never becomes a
number. Aggregates report the mean of per-image scores (canonical) and the
score of mean metrics.
"""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import torch
from scipy.ndimage import correlate1d

log = logging.getLogger(__name__)

NR_METRICS = ("musiq", "maniqa", "clipiqa", "nrqm", "hyperiqa")
METRIC_FIELDS = ("psnr", "ssim", "lpips") + NR_METRICS
SCORE_FIELDS = ("wild_score", "synthetic_score", "combined_score")
CSV_HEADER = ("image_id",) + METRIC_FIELDS + SCORE_FIELDS


# -- full-reference ----------------------------------------------------------

def _check_pair(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """PSNR in dB for images in [0, 1]; ``inf`` for identical inputs."""
    a, b = _check_pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img, win):
    out = correlate1d(correlate1d(img, win, axis=0, mode="constant"), win, axis=1, mode="constant")
    r = len(win) // 2
    return out[r:-r, r:-r]


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local SSIM with a Gaussian window, data range 1, averaged over channels."""
    a, b = _check_pair(a, b)
    if min(a.shape[:2]) < window:
        raise ValueError(f"image {a.shape[:2]} smaller than the {window}-pixel SSIM window")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    win = _gaussian_window(window, sigma)
    c1, c2 = k1 ** 2, k2 ** 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _filter_valid(x, win), _filter_valid(y, win)
        sxx = _filter_valid(x * x, win) - mx * mx
        syy = _filter_valid(y * y, win) - my * my
        sxy = _filter_valid(x * y, win) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))


class PerceptualMetric(Protocol):
    def __call__(self, a: np.ndarray, b: np.ndarray) -> float: ...


class FeatureDistance:
    """LPIPS-style stand-in: unit-normalised trunk features, squared difference
    averaged spatially and summed over the four stages."""

    def __init__(self, extractor):
        self.extractor = extractor

    @torch.no_grad()
    def _features(self, img):
        x = torch.from_numpy(np.ascontiguousarray(np.asarray(img, np.float32).transpose(2, 0, 1)))[None]
        feats = self.extractor.trunk_forward(x)
        return [f / (f.norm(dim=1, keepdim=True) + 1e-10) for f in feats]

    def __call__(self, a, b) -> float:
        a, b = _check_pair(a, b)
        if np.array_equal(a, b):
            return 0.0
        fa, fb = self._features(a), self._features(b)
        return float(sum(((x - y) ** 2).sum(dim=1).mean() for x, y in zip(fa, fb)))


def perceptual_distance(a, b, plugin: PerceptualMetric | None) -> float | None:
    """Run a perceptual plugin; any failure yields ``None`` instead of a number."""
    if plugin is None:
        return None
    try:
        d = float(plugin(a, b))
    except Exception as exc:  # plugin faults must not abort scoring
        log.warning("perceptual metric failed: %s", exc)
        return None
    return d if math.isfinite(d) else None


# -- no-reference plugins ------------------------------------------------------

class NoReferenceMetric(Protocol):
    name: str

    def __call__(self, img: np.ndarray) -> float: ...


# plausible output ranges used by the hash stub
_STUB_RANGES = {"musiq": (40.0, 75.0), "maniqa": (0.3, 0.6), "clipiqa": (0.4, 0.8),
                "nrqm": (4.0, 7.0), "hyperiqa": (0.4, 0.7)}


@dataclass
class HashStubMetric:
    """Deterministic pseudo-score derived from the image bytes. For pipeline
    tests only: the value carries no information about quality."""

    name: str

    def __call__(self, img) -> float:
        u8 = np.clip(np.round(np.asarray(img) * 255), 0, 255).astype(np.uint8)
        h = hashlib.sha256(self.name.encode() + u8.tobytes()).digest()
        u = int.from_bytes(h[:8], "little") / 2.0 ** 64
        lo, hi = _STUB_RANGES[self.name]
        return lo + u * (hi - lo)


def stub_nr_metrics() -> dict[str, NoReferenceMetric]:
    return {n: HashStubMetric(n) for n in NR_METRICS}


# -- reports and scores --------------------------------------------------------

@dataclass
class MetricReport:
    image_id: str = ""
    psnr: float | None = None
    ssim: float | None = None
    lpips: float | None = None
    musiq: float | None = None
    maniqa: float | None = None
    clipiqa: float | None = None
    nrqm: float | None = None
    hyperiqa: float | None = None
    source: str = "computed"
    injected_fields: tuple[str, ...] = ()

    def merge_injected(self, values: dict[str, float | None]) -> "MetricReport":
        """Overlay externally computed values, flagging them as injected."""
        changed = []
        for k, v in values.items():
            if k in METRIC_FIELDS and v is not None:
                setattr(self, k, v)
                changed.append(k)
        if changed:
            self.injected_fields = tuple(sorted(set(self.injected_fields) | set(changed)))
            self.source = "injected" if set(self.injected_fields) >= self.present() else "mixed"
        return self

    def present(self) -> set[str]:
        return {k for k in METRIC_FIELDS if getattr(self, k) is not None}


def wild_score(musiq, maniqa, clipiqa) -> float | None:
    if musiq is None or maniqa is None or clipiqa is None:
        return None
    return 0.1 * musiq + 10.0 * maniqa + 10.0 * clipiqa


def synthetic_score(psnr_db, ssim_val, lpips_val) -> float | None:
    if psnr_db is None or ssim_val is None or lpips_val is None:
        return None
    if not math.isfinite(psnr_db):
        log.warning("infinite PSNR (identical images); synthetic score left absent")
        return None
    return psnr_db + 10.0 * ssim_val - 10.0 * lpips_val


def combined_score(report: MetricReport) -> float | None:
    s = synthetic_score(report.psnr, report.ssim, report.lpips)
    w = wild_score(report.musiq, report.maniqa, report.clipiqa)
    if s is None or w is None:
        return None
    return s + w


def scores(report: MetricReport) -> dict[str, float | None]:
    return {"wild_score": wild_score(report.musiq, report.maniqa, report.clipiqa),
            "synthetic_score": synthetic_score(report.psnr, report.ssim, report.lpips),
            "combined_score": combined_score(report)}


def evaluate_image(image_id: str, sr: np.ndarray, ref: np.ndarray | None = None,
                   perceptual: PerceptualMetric | None = None,
                   nr_metrics: dict[str, NoReferenceMetric] | None = None) -> MetricReport:
    rep = MetricReport(image_id=image_id)
    if ref is not None:
        rep.psnr = psnr(sr, ref)
        rep.ssim = ssim(sr, ref)
        rep.lpips = perceptual_distance(sr, ref, perceptual)
    for name, metric in (nr_metrics or {}).items():
        try:
            setattr(rep, name, float(metric(sr)))
        except Exception as exc:
            log.warning("no-reference metric %s failed on %s: %s", name, image_id, exc)
    return rep


@dataclass
class ScoreCard:
    rows: list[MetricReport]
    per_image: list[dict[str, float | None]] = field(default_factory=list)
    mean_of_scores: dict[str, float | None] = field(default_factory=dict)
    score_of_means: dict[str, float | None] = field(default_factory=dict)
    mean_metrics: dict[str, float | None] = field(default_factory=dict)
    psnr_inf_excluded: int = 0

    @property
    def wild_score(self):
        return self.mean_of_scores.get("wild_score")

    @property
    def synthetic_score(self):
        return self.mean_of_scores.get("synthetic_score")

    @property
    def combined_score(self):
        return self.mean_of_scores.get("combined_score")


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def aggregate(rows: list[MetricReport]) -> ScoreCard:
    card = ScoreCard(rows=list(rows))
    card.per_image = [scores(r) for r in rows]
    for k in METRIC_FIELDS:
        vals = [getattr(r, k) for r in rows]
        if k == "psnr":
            card.psnr_inf_excluded = sum(1 for v in vals if v is not None and not math.isfinite(v))
            vals = [v for v in vals if v is not None and math.isfinite(v)]
        card.mean_metrics[k] = _mean(vals)
    for k in SCORE_FIELDS:
        card.mean_of_scores[k] = _mean(s[k] for s in card.per_image)
    card.score_of_means = scores(MetricReport(**{k: card.mean_metrics[k] for k in METRIC_FIELDS}))
    return card


# -- CSV I/O -------------------------------------------------------------------

def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return repr(float(v))


def _parse(v: str) -> float | None:
    v = v.strip()
    return None if v == "" else float(v)


def report_row(rep: MetricReport) -> dict[str, str]:
    row = {"image_id": rep.image_id}
    row.update({k: _fmt(getattr(rep, k)) for k in METRIC_FIELDS})
    row.update({k: _fmt(v) for k, v in scores(rep).items()})
    return row


def write_reports(path, rows: list[MetricReport], extra_rows: list[dict] | None = None,
                  extra_columns: tuple[str, ...] = ()) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(extra_columns) + list(CSV_HEADER))
        writer.writeheader()
        for r in rows:
            writer.writerow(report_row(r))
        for r in extra_rows or []:
            writer.writerow(r)


def read_injections(path) -> dict[str, dict[str, float | None]]:
    """Read an injection CSV keyed by image_id; values are passed through untouched."""
    out = {}
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "image_id" not in reader.fieldnames:
            raise ValueError(f"{path}: injection file needs an image_id column")
        unknown = set(reader.fieldnames) - set(CSV_HEADER)
        if unknown:
            raise ValueError(f"{path}: unknown columns {sorted(unknown)}")
        for row in reader:
            out[row["image_id"]] = {k: _parse(row[k]) for k in METRIC_FIELDS if k in row}
    return out


def aggregate_row(card: ScoreCard, image_id: str = "__mean__") -> dict[str, str]:
    row = {"image_id": image_id}
    row.update({k: _fmt(card.mean_metrics.get(k)) for k in METRIC_FIELDS})
    row.update({k: _fmt(card.mean_of_scores.get(k)) for k in SCORE_FIELDS})
    return row
