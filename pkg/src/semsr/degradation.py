"""Training-set construction: degradation recipes, 50/50 branch mixing and
overlapping patch extraction.

Images are float32 HWC arrays in [0, 1] (RGB). All randomness is derived
from ``derive_seed(global_seed, key)`` so per-image work can run in any
order without changing outputs.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import cv2
import numpy as np

log = logging.getLogger(__name__)

IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}
BRANCHES = ("downsample_only", "degrade", "synthetic_pair", "wild_degraded")
SCALE = 4


class DegradationError(ValueError):
    pass


def derive_seed(global_seed: int, key: str) -> int:
    digest = hashlib.sha256(f"{int(global_seed)}:{key}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class DegradationRecipe:
    blur_sigma_range: tuple[float, float] = (0.0, 1.0)
    noise_sigma_range: tuple[float, float] = (0.0, 0.03)
    # None disables JPEG entirely
    jpeg_quality_range: tuple[int, int] | None = (50, 95)
    resize_factor: int = SCALE
    op_order: str = "fixed"
    seed: int = 0

    def __post_init__(self):
        self.blur_sigma_range = tuple(self.blur_sigma_range)
        self.noise_sigma_range = tuple(self.noise_sigma_range)
        if self.jpeg_quality_range is not None:
            self.jpeg_quality_range = tuple(int(q) for q in self.jpeg_quality_range)
        self.validate()

    def validate(self) -> None:
        for name in ("blur_sigma_range", "noise_sigma_range"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise DegradationError(f"{name} must satisfy 0 <= lo <= hi, got {(lo, hi)}")
        if self.jpeg_quality_range is not None:
            lo, hi = self.jpeg_quality_range
            if not 10 <= lo <= hi <= 95:
                raise DegradationError(f"jpeg_quality_range must lie in [10, 95], got {(lo, hi)}")
        if self.resize_factor not in (1, SCALE):
            raise DegradationError(f"resize_factor must be 1 or {SCALE}")
        if self.op_order not in ("fixed", "shuffled"):
            raise DegradationError(f"unknown op_order {self.op_order!r}")

    @classmethod
    def synthetic(cls, **kw) -> "DegradationRecipe":
        return cls(**{"resize_factor": SCALE, **kw})

    @classmethod
    def wild(cls, **kw) -> "DegradationRecipe":
        defaults = dict(blur_sigma_range=(0.2, 1.5), noise_sigma_range=(0.0, 0.05),
                        jpeg_quality_range=(30, 95), resize_factor=1)
        return cls(**{**defaults, **kw})


# -- image helpers -----------------------------------------------------------

def read_image(path) -> np.ndarray:
    """Decode an image file to float32 RGB in [0, 1]; raises on failure."""
    data = np.fromfile(str(path), dtype=np.uint8)
    img = cv2.imdecode(data, cv2.IMREAD_COLOR) if data.size else None
    if img is None:
        raise DegradationError(f"cannot decode image {path}")
    return cv2.cvtColor(img, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0


def write_image(path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    u8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    if not cv2.imwrite(str(path), cv2.cvtColor(u8, cv2.COLOR_RGB2BGR)):
        raise OSError(f"failed to write {path}")


def list_images(directory) -> list[Path]:
    directory = Path(directory)
    return sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTS)


def bicubic_resize(img: np.ndarray, height: int, width: int) -> np.ndarray:
    # INTER_CUBIC without antialiasing: an exact 4x reduction reads only its own
    # 4x4 block, so cropping on the 4-pixel grid commutes with resizing
    out = cv2.resize(img, (width, height), interpolation=cv2.INTER_CUBIC)
    if out.ndim == 2 and img.ndim == 3:
        out = out[..., None]
    return out.astype(np.float32)


def downsample(img: np.ndarray, factor: int = SCALE) -> np.ndarray:
    h, w = img.shape[:2]
    if h % factor or w % factor:
        raise DegradationError(f"image {h}x{w} not divisible by {factor}")
    return np.clip(bicubic_resize(img, h // factor, w // factor), 0.0, 1.0)


def upsample(img: np.ndarray, factor: int = SCALE) -> np.ndarray:
    h, w = img.shape[:2]
    return np.clip(bicubic_resize(img, h * factor, w * factor), 0.0, 1.0)


def modcrop(img: np.ndarray, factor: int = SCALE) -> np.ndarray:
    h, w = img.shape[:2]
    return img[: h - h % factor, : w - w % factor]


# -- degradation operators ---------------------------------------------------

def _gaussian_blur(img, sigma):
    if sigma <= 0:
        return img
    k = 2 * int(np.ceil(3 * sigma)) + 1
    out = cv2.GaussianBlur(img, (k, k), sigmaX=sigma, sigmaY=sigma,
                           borderType=cv2.BORDER_REFLECT_101)
    return out.reshape(img.shape)


def _gaussian_noise(img, sigma, rng):
    if sigma <= 0:
        return img
    return img + rng.normal(0.0, sigma, size=img.shape).astype(np.float32)


def _jpeg(img, quality):
    u8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    ok, buf = cv2.imencode(".jpg", cv2.cvtColor(u8, cv2.COLOR_RGB2BGR),
                           [int(cv2.IMWRITE_JPEG_QUALITY), int(quality)])
    if not ok:
        raise DegradationError("JPEG encoding failed")
    dec = cv2.cvtColor(cv2.imdecode(buf, cv2.IMREAD_COLOR), cv2.COLOR_BGR2RGB)
    return dec.astype(np.float32) / 255.0


def _apply_recipe(img: np.ndarray, recipe: DegradationRecipe, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    # draw every parameter up front so op order never changes the draws
    blur = rng.uniform(*recipe.blur_sigma_range)
    noise = rng.uniform(*recipe.noise_sigma_range)
    quality = None
    if recipe.jpeg_quality_range is not None:
        quality = int(rng.integers(recipe.jpeg_quality_range[0], recipe.jpeg_quality_range[1] + 1))
    noise_rng = np.random.default_rng(rng.integers(2**63))

    ops = ["blur", "noise", "jpeg"]
    if recipe.op_order == "shuffled":
        ops = [ops[i] for i in rng.permutation(3)]
    out = img.astype(np.float32)
    for op in ops:
        if op == "blur":
            out = _gaussian_blur(out, blur)
        elif op == "noise":
            out = _gaussian_noise(out, noise, noise_rng)
        elif quality is not None:
            out = _jpeg(np.clip(out, 0.0, 1.0), quality)
        out = np.clip(out, 0.0, 1.0)
    return out


def _check_image(img: np.ndarray) -> None:
    if img.size == 0 or min(img.shape[:2]) == 0:
        raise DegradationError("empty image")


def synth_degrade(hr: np.ndarray, recipe: DegradationRecipe, seed: int) -> np.ndarray:
    """4x bicubic downsampling followed by the recipe's degradations."""
    _check_image(hr)
    if recipe.resize_factor != SCALE:
        raise DegradationError("synthetic degradation needs resize_factor 4")
    return _apply_recipe(downsample(hr, SCALE), recipe, seed)


def wild_degrade(hr: np.ndarray, recipe: DegradationRecipe, seed: int) -> np.ndarray:
    """Degradation at native resolution."""
    _check_image(hr)
    if recipe.resize_factor != 1:
        raise DegradationError("wild degradation needs resize_factor 1")
    return _apply_recipe(hr, recipe, seed)


def mix_branch(image_id: str, seed: int) -> str:
    """Pick ``downsample_only`` or ``degrade`` with probability 1/2 each."""
    u = np.random.default_rng(derive_seed(seed, f"mix:{image_id}")).random()
    return "downsample_only" if u < 0.5 else "degrade"


# -- patches -----------------------------------------------------------------

@dataclass
class PatchRecord:
    source_image_id: str
    hr_offset: tuple[int, int]
    branch: str
    scale: int
    hr_patch: np.ndarray | None = field(default=None, repr=False)
    lr_patch: np.ndarray | None = field(default=None, repr=False)
    hr_path: str | None = None
    lr_path: str | None = None

    def to_json(self) -> dict:
        return {"source_image_id": self.source_image_id, "branch": self.branch,
                "hr_offset": list(self.hr_offset), "scale": self.scale,
                "hr_path": self.hr_path, "lr_path": self.lr_path}


def window_offsets(size: int, patch: int, stride: int) -> list[int]:
    """Stride grid over ``[0, size - patch]`` with the last window snapped to the edge."""
    if size < patch:
        raise DegradationError(f"image dimension {size} smaller than patch {patch}")
    if not 1 <= stride <= patch:
        raise DegradationError(f"stride {stride} must lie in [1, patch={patch}] so windows cover the image")
    offs = list(range(0, size - patch + 1, stride))
    if offs[-1] != size - patch:
        offs.append(size - patch)
    return offs


def crop_overlapping_patches(hr: np.ndarray, lr: np.ndarray, patch: int, stride: int,
                             scale: int = SCALE, image_id: str = "",
                             branch: str = "synthetic_pair") -> list[PatchRecord]:
    if stride < 1:
        raise DegradationError("stride must be >= 1")
    if patch % scale or stride % scale:
        raise DegradationError(f"patch and stride must be multiples of the scale {scale}")
    H, W = hr.shape[:2]
    if lr.shape[0] * scale != H or lr.shape[1] * scale != W:
        raise DegradationError(f"misaligned sizes: hr {H}x{W}, lr {lr.shape[0]}x{lr.shape[1]}, scale {scale}")
    lp = patch // scale
    records = []
    for r in window_offsets(H, patch, stride):
        for c in window_offsets(W, patch, stride):
            records.append(PatchRecord(
                source_image_id=image_id, hr_offset=(r, c), branch=branch, scale=scale,
                hr_patch=hr[r:r + patch, c:c + patch],
                lr_patch=lr[r // scale:r // scale + lp, c // scale:c // scale + lp]))
    return records


# -- dataset assembly ----------------------------------------------------------

@dataclass
class DatasetConfig:
    patch_size: int = 128
    stride: int | None = None
    global_seed: int = 0
    # how the LSDIR "degrade" branch is realised: native-scale (wild) or 4x (synthetic)
    lsdir_degrade_mode: str = "wild"
    max_patches_per_image: int | None = None
    synthetic_recipe: DegradationRecipe = field(default_factory=DegradationRecipe.synthetic)
    wild_recipe: DegradationRecipe = field(default_factory=DegradationRecipe.wild)

    def __post_init__(self):
        if isinstance(self.synthetic_recipe, dict):
            self.synthetic_recipe = DegradationRecipe(**self.synthetic_recipe)
        if isinstance(self.wild_recipe, dict):
            self.wild_recipe = DegradationRecipe(**self.wild_recipe)
        if self.stride is None:
            self.stride = self.patch_size // 2
        if self.lsdir_degrade_mode not in ("wild", "synthetic"):
            raise DegradationError("lsdir_degrade_mode must be 'wild' or 'synthetic'")
        if self.patch_size % SCALE or self.stride % SCALE:
            raise DegradationError("patch_size and stride must be multiples of 4")
        if not 0 < self.stride <= self.patch_size:
            raise DegradationError("stride must lie in (0, patch_size]")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class DatasetManifest:
    records: list[PatchRecord]
    component_counts: dict[str, int]
    global_seed: int
    skipped: list[str] = field(default_factory=list)
    path: Path | None = None

    def dump(self, path) -> None:
        """Write the header line followed by one JSON record per line."""
        path = Path(path)
        header = {"type": "header", "global_seed": self.global_seed,
                  "component_counts": self.component_counts,
                  "num_records": len(self.records), "skipped": self.skipped}
        lines = [json.dumps(header, sort_keys=True)]
        lines += [json.dumps({"type": "record", **r.to_json()}, sort_keys=True) for r in self.records]
        path.write_text("\n".join(lines) + "\n")
        self.path = path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        lines = [json.loads(ln) for ln in path.read_text().splitlines() if ln.strip()]
        header, rows = lines[0], lines[1:]
        records = [PatchRecord(source_image_id=r["source_image_id"], branch=r["branch"],
                               hr_offset=tuple(r["hr_offset"]), scale=r["scale"],
                               hr_path=r["hr_path"], lr_path=r["lr_path"]) for r in rows]
        m = cls(records, header["component_counts"], header["global_seed"],
                header.get("skipped", []), path)
        if sum(m.component_counts.values()) != len(records):
            raise DegradationError("manifest component counts do not sum to record count")
        return m

    def load_pair(self, rec: PatchRecord) -> tuple[np.ndarray, np.ndarray]:
        base = self.path.parent
        return read_image(base / rec.hr_path), read_image(base / rec.lr_path)


def _limit(records, cfg: DatasetConfig, key: str):
    if cfg.max_patches_per_image is None or len(records) <= cfg.max_patches_per_image:
        return records
    rng = np.random.default_rng(derive_seed(cfg.global_seed, f"subset:{key}"))
    keep = sorted(rng.choice(len(records), cfg.max_patches_per_image, replace=False))
    return [records[i] for i in keep]


def _load_or_skip(path: Path, skipped: list[str]):
    try:
        return modcrop(read_image(path))
    except DegradationError as exc:
        log.warning("skipping undecodable image %s: %s", path, exc)
        skipped.append(str(path))
        return None


def _lsdir_records(path, cfg, skipped):
    hr = _load_or_skip(path, skipped)
    if hr is None:
        return []
    image_id = f"lsdir/{path.stem}"
    branch = mix_branch(image_id, cfg.global_seed)
    seed = derive_seed(cfg.global_seed, image_id)
    P, S = cfg.patch_size, cfg.stride
    if min(hr.shape[:2]) < P:
        log.warning("skipping %s: smaller than patch size %d", path, P)
        skipped.append(str(path))
        return []
    if branch == "downsample_only":
        recs = crop_overlapping_patches(hr, downsample(hr), P, S, SCALE, image_id, branch)
    elif cfg.lsdir_degrade_mode == "synthetic":
        recs = crop_overlapping_patches(hr, synth_degrade(hr, cfg.synthetic_recipe, seed),
                                        P, S, SCALE, image_id, branch)
    else:
        recs = crop_overlapping_patches(hr, wild_degrade(hr, cfg.wild_recipe, seed),
                                        P, S, 1, image_id, branch)
    return _limit(recs, cfg, image_id)


def _pair_records(hr_path, lr_path, cfg, skipped):
    hr = _load_or_skip(hr_path, skipped)
    if hr is None:
        return []
    try:
        lr = read_image(lr_path)
    except DegradationError as exc:
        log.warning("skipping undecodable image %s: %s", lr_path, exc)
        skipped.append(str(lr_path))
        return []
    lr = lr[: hr.shape[0] // SCALE, : hr.shape[1] // SCALE]
    image_id = f"ugc_pair/{hr_path.stem}"
    try:
        recs = crop_overlapping_patches(hr, lr, cfg.patch_size, cfg.stride, SCALE,
                                        image_id, "synthetic_pair")
    except DegradationError as exc:
        log.warning("skipping pair %s: %s", hr_path.name, exc)
        skipped.append(str(hr_path))
        return []
    return _limit(recs, cfg, image_id)


def _wild_records(path, cfg, skipped):
    hr = _load_or_skip(path, skipped)
    if hr is None:
        return []
    image_id = f"ugc_hr/{path.stem}"
    P, S = cfg.patch_size, cfg.stride
    if min(hr.shape[:2]) < P:
        skipped.append(str(path))
        return []
    # crop first, then degrade every patch with its own seed
    recs = crop_overlapping_patches(hr, hr, P, S, 1, image_id, "wild_degraded")
    recs = _limit(recs, cfg, image_id)
    for rec in recs:
        seed = derive_seed(cfg.global_seed, f"{image_id}@{rec.hr_offset[0]},{rec.hr_offset[1]}")
        rec.lr_patch = wild_degrade(rec.hr_patch, cfg.wild_recipe, seed)
    return recs


def assemble_training_set(lsdir_dir, ugc_pairs_dir, ugc_hr_dir, config: DatasetConfig,
                          out_dir) -> DatasetManifest:
    """Build the three-component training set and write patches + manifest.

    ``ugc_pairs_dir`` holds ``HR/`` and ``LR/`` subdirectories with matching
    file stems. Any of the three sources may be ``None``.
    """
    out_dir = Path(out_dir)
    skipped: list[str] = []
    for d in (lsdir_dir, ugc_pairs_dir, ugc_hr_dir):
        if d is not None and not Path(d).is_dir():
            raise FileNotFoundError(f"missing directory {d}")

    records: list[PatchRecord] = []
    if lsdir_dir is not None:
        for p in list_images(lsdir_dir):
            records += _lsdir_records(p, config, skipped)
    if ugc_pairs_dir is not None:
        hr_dir, lr_dir = Path(ugc_pairs_dir) / "HR", Path(ugc_pairs_dir) / "LR"
        if not hr_dir.is_dir() or not lr_dir.is_dir():
            raise FileNotFoundError(f"{ugc_pairs_dir} must contain HR/ and LR/")
        lr_by_stem = {p.stem: p for p in list_images(lr_dir)}
        for p in list_images(hr_dir):
            if p.stem not in lr_by_stem:
                log.warning("no LR partner for %s", p.name)
                skipped.append(str(p))
                continue
            records += _pair_records(p, lr_by_stem[p.stem], config, skipped)
    if ugc_hr_dir is not None:
        for p in list_images(ugc_hr_dir):
            records += _wild_records(p, config, skipped)
    if not records:
        raise DegradationError("no training patches produced; are the source directories empty?")

    counts = {b: 0 for b in BRANCHES}
    for i, rec in enumerate(records):
        counts[rec.branch] += 1
        stem = f"{i:06d}_{rec.source_image_id.replace('/', '_')}_{rec.hr_offset[0]}_{rec.hr_offset[1]}"
        rec.hr_path = f"hr/{stem}.png"
        rec.lr_path = f"lr/{stem}.png"
        write_image(out_dir / rec.hr_path, rec.hr_patch)
        write_image(out_dir / rec.lr_path, rec.lr_patch)
    manifest = DatasetManifest(records, counts, config.global_seed, skipped)
    manifest.dump(out_dir / "manifest.jsonl")
    log.info("dataset built: %s (%d skipped files)", counts, len(skipped))
    return manifest
