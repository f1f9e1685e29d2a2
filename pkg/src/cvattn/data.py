"""Synthetic corpus, grayscale image I/O, augmentation and dataset manifests.

Each synthetic image is a smooth low-frequency background, one elliptical
target, and ``n_confounders`` axis-aligned bars painted at the *same*
intensity as the target, plus Gaussian noise.  Only the ellipse is in the
ground-truth mask; the bars are there to pull a purely intensity-driven
segmentation (plain Chan-Vese) onto the wrong regions.

Dataset layout on disk::

    root/images/NNNN.png  root/masks/NNNN.png  root/confounders/NNNN.png
    root/manifest.csv (+ manifest_{train,val,test}.csv)  root/synth_config.json
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .serialization import canonical_json, write_atomic

MANIFEST_HEADER = ["image_path", "mask_path", "spacing_mm"]


class ImageFormatError(ValueError):
    pass


class PlacementError(RuntimeError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # (1, H, W) float in [0, 1] (standardised after augmentation)
    mask: np.ndarray  # (1, H, W) uint8 in {0, 1}
    spacing_mm: float = 1.0
    confounders: np.ndarray | None = None  # (1, H, W) uint8, synthetic corpora only

    def __post_init__(self):
        if self.image.shape != self.mask.shape:
            raise ValueError(f"image {self.image.shape} and mask {self.mask.shape} differ")


@dataclass(frozen=True)
class SynthConfig:
    size: int = 64
    n_samples: int = 200
    contrast: float = 0.45
    background: float = 0.2
    background_amplitude: float = 0.08
    noise_sigma: float = 0.05
    n_confounders: int = 2
    axis_range: tuple[float, float] = (5.0, 11.0)
    confounder_area_ratio: tuple[float, float] = (0.4, 0.7)
    seed: int = 0
    max_retries: int = 200

    def __post_init__(self):
        lo, hi = self.axis_range
        if not 0 < lo <= hi:
            raise ValueError(f"axis_range must satisfy 0 < lo <= hi, got {self.axis_range}")
        if self.size < 2 * (hi + 2) + 1:
            raise ValueError(f"size {self.size} cannot hold an ellipse with semi-axis up to {hi}")
        if self.n_samples < 0 or self.n_confounders < 0 or self.max_retries < 1:
            raise ValueError("n_samples and n_confounders must be >= 0 and max_retries >= 1")
        if self.noise_sigma < 0:
            raise ValueError(f"noise_sigma must be >= 0, got {self.noise_sigma}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for k in ("axis_range", "confounder_area_ratio"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _smooth_field(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    f = np.zeros((size, size))
    for _ in range(3):
        ky, kx = rng.uniform(0.5, 2.0, size=2)
        ph = rng.uniform(0, 2 * np.pi)
        f += np.cos(2 * np.pi * (ky * yy + kx * xx) + ph)
    return f / 3.0


def _ellipse(size: int, cy: float, cx: float, a: float, b: float, theta: float) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    c, s = np.cos(theta), np.sin(theta)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    return (u / a) ** 2 + (v / b) ** 2 <= 1.0


def _dilate(m: np.ndarray, r: int) -> np.ndarray:
    return ndimage.binary_dilation(m, iterations=r) if r > 0 else m


def _one_sample(cfg: SynthConfig, rng: np.random.Generator):
    n = cfg.size
    margin = 2
    lo, hi = cfg.axis_range
    for _ in range(cfg.max_retries):
        a, b = rng.uniform(lo, hi, size=2)
        cy, cx = rng.uniform(margin + hi, n - margin - hi, size=2)
        target = _ellipse(n, cy, cx, a, b, rng.uniform(0, np.pi))
        if not target.any():
            continue
        area = target.sum()
        occupied = _dilate(target, 3)
        conf = np.zeros((n, n), dtype=bool)
        ok = True
        for _k in range(cfg.n_confounders):
            placed = False
            for _try in range(cfg.max_retries):
                want = area * rng.uniform(*cfg.confounder_area_ratio)
                short = int(rng.integers(3, 6))
                long_ = int(np.clip(round(want / short), 3 * short, n - 2 * margin))
                h, w = (short, long_) if rng.random() < 0.5 else (long_, short)
                y0 = int(rng.integers(margin, n - margin - h + 1))
                x0 = int(rng.integers(margin, n - margin - w + 1))
                bar = np.zeros((n, n), dtype=bool)
                bar[y0:y0 + h, x0:x0 + w] = True
                if (bar & occupied).any():
                    continue
                conf |= bar
                occupied |= _dilate(bar, 2)
                placed = True
                break
            if not placed:
                ok = False
                break
        if ok:
            return target, conf
    raise PlacementError(f"could not place target and {cfg.n_confounders} confounders after {cfg.max_retries} retries")


def generate_synthetic(cfg: SynthConfig) -> list[Sample]:
    """Deterministic corpus; sample i depends only on (cfg, i)."""
    out = []
    for i in range(cfg.n_samples):
        rng = np.random.default_rng([cfg.seed, i])
        target, conf = _one_sample(cfg, rng)
        bg = cfg.background + cfg.background_amplitude * _smooth_field(rng, cfg.size)
        img = bg + cfg.contrast * (target | conf)
        if cfg.noise_sigma > 0:
            img = img + rng.normal(0.0, cfg.noise_sigma, size=img.shape)
        img = np.clip(img, 0.0, 1.0).astype(np.float32)
        out.append(
            Sample(
                image=img[None],
                mask=target.astype(np.uint8)[None],
                spacing_mm=1.0,
                confounders=conf.astype(np.uint8)[None],
            )
        )
    return out


# --- image I/O --------------------------------------------------------------


def load_image(path) -> np.ndarray:
    """Read an 8-bit grayscale PNG or binary PGM (P5) as float32 in [0, 1], shape (H, W)."""
    path = Path(path)
    try:
        with Image.open(path) as im:
            fmt, mode = im.format, im.mode
            if fmt not in ("PNG", "PPM"):
                raise ImageFormatError(f"{path}: unsupported format {fmt}; expected PNG or PGM")
            if mode not in ("L", "1"):
                raise ImageFormatError(f"{path}: expected 8-bit grayscale, got mode {mode}")
            arr = np.asarray(im.convert("L"), dtype=np.uint8)
    except FileNotFoundError:
        raise
    except ImageFormatError:
        raise
    except Exception as exc:
        raise ImageFormatError(f"{path}: cannot read image ({exc})") from exc
    return arr.astype(np.float32) / 255.0


def _to_u8(arr) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim != 2:
        raise ImageFormatError(f"expected a 2-d image, got shape {a.shape}")
    return np.clip(np.rint(a * 255.0), 0, 255).astype(np.uint8)


def _png_bytes(u8: np.ndarray) -> bytes:
    import io

    buf = io.BytesIO()
    Image.fromarray(u8, mode="L").save(buf, format="PNG", compress_level=6, optimize=False)
    return buf.getvalue()


def save_image(arr, path) -> None:
    """Write values in [0, 1] as 8-bit grayscale PNG (PGM if the suffix is .pgm)."""
    u8 = _to_u8(arr)
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        payload = f"P5\n{u8.shape[1]} {u8.shape[0]}\n255\n".encode() + u8.tobytes()
    else:
        payload = _png_bytes(u8)
    write_atomic(path, payload)


def save_mask(mask, path) -> None:
    m = np.asarray(mask)
    if m.ndim == 3 and m.shape[0] == 1:
        m = m[0]
    save_image((m > 0).astype(np.float64), path)


def load_mask(path) -> np.ndarray:
    return (load_image(path) >= 0.5).astype(np.uint8)


# --- augmentation -----------------------------------------------------------

AUGMENTATIONS = ("hflip", "vflip", "transpose", "rotate", "shift_scale", "normalize")


@dataclass(frozen=True)
class AugmentToggles:
    hflip: bool = False
    vflip: bool = False
    transpose: bool = False
    rotate: bool = False
    shift_scale: bool = False
    normalize: bool = False

    @classmethod
    def all_on(cls) -> "AugmentToggles":
        return cls(**{k: True for k in AUGMENTATIONS})

    def to_dict(self) -> dict:
        return asdict(self)


def standardize(img: np.ndarray) -> np.ndarray:
    m = img.mean()
    s = img.std()
    return ((img - m) / (s if s > 0 else 1.0)).astype(np.float32)


def _affine_about_center(arr: np.ndarray, matrix: np.ndarray, shift: np.ndarray, order: int, mode: str) -> np.ndarray:
    """Resample so that output point y maps to input point M (y - c - shift) + c."""
    c = (np.array(arr.shape, dtype=np.float64) - 1.0) / 2.0
    offset = c - matrix @ (c + shift)
    return ndimage.affine_transform(arr, matrix, offset=offset, order=order, mode=mode, cval=0.0)


def augment(s: Sample, rng: np.random.Generator, toggles: AugmentToggles, return_params: bool = False):
    """Randomly transform a sample; each geometric toggle fires with probability 1/2.

    ``normalize`` is a deterministic per-image standardisation (applied to the
    image only, whenever enabled).  The mask follows every geometric step with
    nearest-neighbour resampling and stays binary.
    """
    img = s.image[0].astype(np.float64)
    mask = s.mask[0].astype(np.float64)
    conf = s.confounders[0].astype(np.float64) if s.confounders is not None else None
    applied: dict = {}

    def both(fn):
        nonlocal img, mask, conf
        img, mask = fn(img), fn(mask)
        if conf is not None:
            conf = fn(conf)

    if toggles.hflip and rng.random() < 0.5:
        both(lambda a: a[:, ::-1])
        applied["hflip"] = True
    if toggles.vflip and rng.random() < 0.5:
        both(lambda a: a[::-1, :])
        applied["vflip"] = True
    if toggles.transpose and rng.random() < 0.5:
        both(lambda a: a.T)
        applied["transpose"] = True

    angle = 0.0
    scale = 1.0
    shift = np.zeros(2)
    if toggles.rotate and rng.random() < 0.5:
        k = int(rng.integers(0, 4))
        both(lambda a: np.rot90(a, k))
        applied["rot90"] = k
        angle = float(rng.uniform(-15.0, 15.0))
    if toggles.shift_scale and rng.random() < 0.5:
        scale = float(rng.uniform(0.9, 1.1))
        shift = rng.uniform(-0.1, 0.1, size=2) * np.array(img.shape)
    if angle != 0.0 or scale != 1.0 or shift.any():
        t = np.deg2rad(angle)
        # output -> input map: inverse of (rotate by t, then scale)
        rot = np.array([[np.cos(t), np.sin(t)], [-np.sin(t), np.cos(t)]])
        M = rot / scale
        img = _affine_about_center(np.ascontiguousarray(img), M, shift, order=1, mode="nearest")
        mask = _affine_about_center(np.ascontiguousarray(mask), M, shift, order=0, mode="constant")
        if conf is not None:
            conf = _affine_about_center(np.ascontiguousarray(conf), M, shift, order=0, mode="constant")
        applied.update(angle=angle, scale=scale, shift=shift.tolist())

    img = np.ascontiguousarray(img, dtype=np.float32)
    if toggles.normalize:
        img = standardize(img)
        applied["normalize"] = True
    out = Sample(
        image=img[None],
        mask=(np.ascontiguousarray(mask) > 0.5).astype(np.uint8)[None],
        spacing_mm=s.spacing_mm,
        confounders=None if conf is None else (np.ascontiguousarray(conf) > 0.5).astype(np.uint8)[None],
    )
    if return_params:
        return out, applied
    return out


def forward_point(p, shape, applied: dict) -> np.ndarray:
    """Map a (row, col) point of the original image through the transforms in ``applied``."""
    y, x = float(p[0]), float(p[1])
    H, W = shape
    if applied.get("hflip"):
        x = W - 1 - x
    if applied.get("vflip"):
        y = H - 1 - y
    if applied.get("transpose"):
        y, x = x, y
        H, W = W, H
    for _ in range(applied.get("rot90", 0)):
        # np.rot90 (counter-clockwise): new[i, j] = old[j, W - 1 - i]
        y, x = W - 1 - x, y
        H, W = W, H
    if "angle" in applied:
        t = np.deg2rad(applied["angle"])
        rot = np.array([[np.cos(t), np.sin(t)], [-np.sin(t), np.cos(t)]])
        M = rot / applied["scale"]
        c = (np.array([H, W], dtype=np.float64) - 1.0) / 2.0
        # output y satisfies M (y - c - shift) + c = input
        q = np.linalg.solve(M, np.array([y, x]) - c) + c + np.asarray(applied["shift"])
        y, x = q
    return np.array([y, x])


# --- datasets on disk -------------------------------------------------------


def split_indices(n: int, seed: int, fractions=(0.70, 0.15, 0.15)) -> dict[str, list[int]]:
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    return {
        "train": sorted(perm[:n_train].tolist()),
        "val": sorted(perm[n_train:n_train + n_val].tolist()),
        "test": sorted(perm[n_train + n_val:].tolist()),
    }


def _manifest_bytes(rows: list[tuple[str, str, float]]) -> bytes:
    lines = [",".join(MANIFEST_HEADER)] + [f"{a},{b},{c!r}" for a, b, c in rows]
    return ("\n".join(lines) + "\n").encode()


def write_dataset(samples: list[Sample], root, cfg: SynthConfig | None = None, split_seed: int | None = None) -> Path:
    root = Path(root)
    rows = []
    for i, s in enumerate(samples):
        name = f"{i:04d}.png"
        save_image(s.image[0], root / "images" / name)
        save_mask(s.mask[0], root / "masks" / name)
        if s.confounders is not None:
            save_mask(s.confounders[0], root / "confounders" / name)
        rows.append((f"images/{name}", f"masks/{name}", float(s.spacing_mm)))
    write_atomic(root / "manifest.csv", _manifest_bytes(rows))
    if cfg is not None:
        write_atomic(root / "synth_config.json", (canonical_json(cfg.to_dict()) + "\n").encode())
    seed = split_seed if split_seed is not None else (cfg.seed if cfg is not None else 0)
    for part, idx in split_indices(len(samples), seed).items():
        write_atomic(root / f"manifest_{part}.csv", _manifest_bytes([rows[i] for i in idx]))
    return root / "manifest.csv"


def read_manifest(path) -> list[Sample]:
    """Load every sample listed in a manifest (paths relative to the manifest's directory)."""
    path = Path(path)
    base = path.parent
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_HEADER:
            raise ValueError(f"{path}: header {reader.fieldnames} != {MANIFEST_HEADER}")
        for row in reader:
            img = load_image(base / row["image_path"])
            mask = load_mask(base / row["mask_path"])
            conf_path = base / "confounders" / Path(row["image_path"]).name
            conf = load_mask(conf_path)[None] if conf_path.exists() else None
            out.append(Sample(img[None], mask[None], float(row["spacing_mm"]), conf))
    return out


def load_synth_config(path) -> SynthConfig:
    return SynthConfig.from_dict(json.loads(Path(path).read_text()))
