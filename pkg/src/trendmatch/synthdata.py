"""Procedural bi-temporal scenes with exact change and trend labels.

A scene is a smooth textured background with non-overlapping rectangles and
ellipses drawn from two foreground appearance classes.  Each shape is static
(same class in both frames), appears, disappears, or transforms (class A <-> B).
Both frames get an independent global brightness shift and pixel noise, so
unchanged regions are never pixel-identical.

On disk a dataset is::

    manifest.json
    t1/NNNN.png  t2/NNNN.png       RGB, 8 bit
    change/NNNN.png                L, 0 / 255
    trend/NNNN.png                 palette-indexed codes 0..3

Training code reads datasets through :func:`read_dataset` with
``include_trend=False``, which never opens anything under ``trend/``.
"""

import json
import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError, GenerationError
from .trend import APPEAR, DISAPPEAR, TRANSFORM, UNCHANGED

MANIFEST = "manifest.json"
SUBDIRS = ("t1", "t2", "change", "trend")
# palette for trend PNGs: unchanged black, appear blue, disappear white, transform red
TREND_PALETTE = [(0, 0, 0), (0, 0, 255), (255, 255, 255), (255, 0, 0)]


@dataclass
class SceneSpec:
    size: int = 64
    min_shapes: int = 3
    max_shapes: int = 6
    min_extent: int = 6
    max_extent: int = 16
    gap: int = 2
    p_appear: float = 0.3
    p_disappear: float = 0.3
    p_transform: float = 0.3
    background_band: tuple = (0.0, 0.3)
    class_a_band: tuple = (0.55, 0.7)
    class_b_band: tuple = (0.8, 0.95)
    background_freq: float = 1.5
    class_a_freq: float = 0.15
    class_b_freq: float = 0.45
    texture_amplitude: float = 0.35
    brightness_shift: float = 0.1
    noise_sigma: float = 0.02
    max_attempts: int = 100

    def __post_init__(self):
        self.background_band = tuple(self.background_band)
        self.class_a_band = tuple(self.class_a_band)
        self.class_b_band = tuple(self.class_b_band)
        probs = (self.p_appear, self.p_disappear, self.p_transform)
        if any(p < 0 for p in probs) or sum(probs) > 1 + 1e-12:
            raise ConfigError(f"trend probabilities must be >= 0 and sum to <= 1, got {probs}")
        if not 0 <= self.min_shapes <= self.max_shapes:
            raise ConfigError("need 0 <= min_shapes <= max_shapes")
        if not 1 <= self.min_extent <= self.max_extent <= self.size:
            raise ConfigError("need 1 <= min_extent <= max_extent <= size")
        bands = sorted([self.background_band, self.class_a_band, self.class_b_band])
        for lo, hi in bands:
            if not 0 <= lo <= hi <= 1:
                raise ConfigError(f"intensity band {(lo, hi)} must lie in [0, 1]")
        for (_, hi), (lo, _) in zip(bands, bands[1:]):
            if hi >= lo:
                raise ConfigError("background and class intensity bands must be disjoint")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scene spec keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


@dataclass
class SamplePair:
    t1: np.ndarray  # [3, H, W] float32 in [0, 1]
    t2: np.ndarray
    change_label: np.ndarray  # [H, W] uint8 in {0, 1}
    trend_label: np.ndarray = None  # [H, W] uint8 in {0..3}, or None when withheld
    seed: int = None

    @property
    def shape(self):
        return self.change_label.shape


def derive_seed(master_seed, index):
    """Independent per-sample seed from ``(master_seed, index)``."""
    return int(np.random.SeedSequence([int(master_seed), int(index)]).generate_state(1)[0])


def _smooth_field(rng, h, w, freq, n_waves=4):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    acc = np.zeros((h, w))
    for _ in range(n_waves):
        theta = rng.uniform(0, np.pi)
        f = freq * rng.uniform(0.5, 1.5) * 2 * np.pi / max(h, w)
        phase = rng.uniform(0, 2 * np.pi)
        acc += np.sin(f * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    acc -= acc.min()
    rng_ = acc.max()
    return acc / rng_ if rng_ > 0 else acc


def _shape_mask(h, w, kind, top, left, sh, sw):
    mask = np.zeros((h, w), dtype=bool)
    if kind == "rect":
        mask[top:top + sh, left:left + sw] = True
    else:
        yy, xx = np.mgrid[0:sh, 0:sw]
        cy, cx = (sh - 1) / 2.0, (sw - 1) / 2.0
        inside = ((yy - cy) / (sh / 2.0)) ** 2 + ((xx - cx) / (sw / 2.0)) ** 2 <= 1.0
        mask[top:top + sh, left:left + sw] = inside
    return mask


def _class_texture(rng, spec, cls, h, w):
    lo, hi = spec.class_a_band if cls == 0 else spec.class_b_band
    freq = spec.class_a_freq if cls == 0 else spec.class_b_freq
    yy, xx = np.mgrid[0:h, 0:w]
    theta = rng.uniform(0, np.pi)
    stripes = 0.5 + 0.5 * np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + rng.uniform(0, 2 * np.pi))
    base = rng.uniform(0.0, 1.0 - spec.texture_amplitude)
    return lo + (hi - lo) * (base + spec.texture_amplitude * stripes)


def _place_shapes(rng, spec, seed):
    h = w = spec.size
    n = int(rng.integers(spec.min_shapes, spec.max_shapes + 1))
    occupied = np.zeros((h, w), dtype=bool)
    shapes = []
    for _ in range(n):
        for _attempt in range(spec.max_attempts):
            sh = int(rng.integers(spec.min_extent, spec.max_extent + 1))
            sw = int(rng.integers(spec.min_extent, spec.max_extent + 1))
            top = int(rng.integers(0, h - sh + 1))
            left = int(rng.integers(0, w - sw + 1))
            g = spec.gap
            if occupied[max(0, top - g):top + sh + g, max(0, left - g):left + sw + g].any():
                continue
            kind = "rect" if rng.random() < 0.5 else "ellipse"
            mask = _shape_mask(h, w, kind, top, left, sh, sw)
            occupied[top:top + sh, left:left + sw] = True
            shapes.append(mask)
            break
        else:
            raise GenerationError(f"could not place shape {len(shapes) + 1} of {n} after {spec.max_attempts} attempts", seed=seed)
    return shapes


def generate(spec, seed):
    """Render one :class:`SamplePair` deterministically from ``seed``."""
    rng = np.random.default_rng(seed)
    h = w = spec.size
    shapes = _place_shapes(rng, spec, seed)

    blo, bhi = spec.background_band
    bg = blo + (bhi - blo) * (0.5 * _smooth_field(rng, h, w, spec.background_freq)
                              + 0.5 * _smooth_field(rng, h, w, 4 * spec.background_freq))
    tint = rng.uniform(-0.03, 0.03, size=3)
    frame1 = bg.copy()
    frame2 = bg.copy()
    trend = np.zeros((h, w), dtype=np.uint8)
    p = np.array([spec.p_appear, spec.p_disappear, spec.p_transform])
    for mask in shapes:
        u = rng.random()
        cls = int(rng.integers(0, 2))
        tex1 = _class_texture(rng, spec, cls, h, w)
        if u < p[0]:
            frame2[mask] = tex1[mask]
            trend[mask] = APPEAR
        elif u < p[0] + p[1]:
            frame1[mask] = tex1[mask]
            trend[mask] = DISAPPEAR
        elif u < p.sum():
            tex2 = _class_texture(rng, spec, 1 - cls, h, w)
            frame1[mask] = tex1[mask]
            frame2[mask] = tex2[mask]
            trend[mask] = TRANSFORM
        else:
            frame1[mask] = tex1[mask]
            frame2[mask] = tex1[mask]
            trend[mask] = UNCHANGED

    def finish(frame):
        shift = rng.uniform(-spec.brightness_shift, spec.brightness_shift)
        img = frame[None] + tint[:, None, None] + shift
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
        return np.clip(img, 0.0, 1.0).astype(np.float32)

    t1 = finish(frame1)
    t2 = finish(frame2)
    change = (trend != UNCHANGED).astype(np.uint8)
    return SamplePair(t1, t2, change, trend, seed)


def generate_many(spec, count, master_seed):
    return [generate(spec, derive_seed(master_seed, i)) for i in range(count)]


# -- augmentation -----------------------------------------------------------

@dataclass(frozen=True)
class Augmentation:
    top: int = 0
    left: int = 0
    size: int = None
    rot90: int = 0
    hflip: bool = False
    vflip: bool = False


def sample_augmentation(rng, height, width, crop_size=None, multiple=1):
    if crop_size is None:
        crop_size = min(height, width)
    if crop_size > min(height, width) or crop_size <= 0 or crop_size % multiple:
        raise ConfigError(f"invalid crop size {crop_size} for a {height}x{width} image (must divide by {multiple})")
    top = int(rng.integers(0, height - crop_size + 1))
    left = int(rng.integers(0, width - crop_size + 1))
    return Augmentation(top, left, crop_size, int(rng.integers(0, 4)), bool(rng.random() < 0.5), bool(rng.random() < 0.5))


def _apply_map(a, aug, size):
    # a is [..., H, W]
    a = a[..., aug.top:aug.top + size, aug.left:aug.left + size]
    if aug.rot90:
        a = np.rot90(a, aug.rot90, axes=(-2, -1))
    if aug.hflip:
        a = a[..., :, ::-1]
    if aug.vflip:
        a = a[..., ::-1, :]
    return np.ascontiguousarray(a)


def apply_augmentation(pair, aug):
    """Apply one geometric transform identically to both frames and labels."""
    h, w = pair.shape
    size = aug.size if aug.size is not None else min(h, w)
    if aug.top + size > h or aug.left + size > w:
        raise ConfigError("augmentation crop falls outside the image")
    return SamplePair(
        _apply_map(pair.t1, aug, size),
        _apply_map(pair.t2, aug, size),
        _apply_map(pair.change_label, aug, size),
        None if pair.trend_label is None else _apply_map(pair.trend_label, aug, size),
        pair.seed,
    )


def augment(pair, seed, crop_size=None, multiple=1):
    """Jointly sampled crop / rotation / flips applied to the whole pair."""
    h, w = pair.shape
    aug = sample_augmentation(np.random.default_rng(seed), h, w, crop_size, multiple)
    return apply_augmentation(pair, aug)


# -- disk format ------------------------------------------------------------

def _to_u8(img):
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def save_rgb(path, chw):
    Image.fromarray(_to_u8(chw).transpose(1, 2, 0), mode="RGB").save(path)


def save_trend_png(path, trend):
    im = Image.fromarray(np.asarray(trend, dtype=np.uint8), mode="P")
    flat = [c for rgb in TREND_PALETTE for c in rgb]
    im.putpalette(flat + [0] * (768 - len(flat)))
    im.save(path)


def write_dataset(pairs, out_dir, spec=None, master_seed=None, splits=None, extra=None):
    """Write ``pairs`` and a manifest; returns the manifest dict."""
    out = Path(out_dir)
    with_trend = any(p.trend_label is not None for p in pairs)
    for sub in SUBDIRS:
        if sub != "trend" or with_trend:
            (out / sub).mkdir(parents=True, exist_ok=True)
    for i, pair in enumerate(pairs):
        name = f"{i:04d}.png"
        save_rgb(out / "t1" / name, pair.t1)
        save_rgb(out / "t2" / name, pair.t2)
        Image.fromarray((np.asarray(pair.change_label, dtype=np.uint8) * 255), mode="L").save(out / "change" / name)
        if pair.trend_label is not None:
            save_trend_png(out / "trend" / name, pair.trend_label)
    count = len(pairs)
    manifest = {
        "format": "trendmatch-dataset",
        "version": 1,
        "count": count,
        "master_seed": master_seed,
        "spec": spec.to_dict() if spec is not None else None,
        "splits": splits or {"train": [0, count], "val": [count, count], "test": [count, count]},
        "seeds": [p.seed for p in pairs],
    }
    if extra:
        manifest.update(extra)
    with open(out / MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return manifest


def read_manifest(data_dir):
    path = Path(data_dir) / MANIFEST
    if not path.is_file():
        return None
    with open(path) as fh:
        return json.load(fh)


def _listing(d):
    return sorted(f for f in os.listdir(d) if f.endswith(".png"))


def read_dataset(data_dir, include_trend=True, indices=None):
    """Load a dataset directory.

    With ``include_trend=False`` the ``trend/`` folder is never touched and
    every pair's ``trend_label`` is ``None``; this is the only mode training
    uses.  With ``include_trend=True`` a missing ``trend/`` folder is allowed
    (labels come back as ``None``).
    """
    root = Path(data_dir)
    for sub in ("t1", "t2", "change"):
        if not (root / sub).is_dir():
            raise DataError(f"dataset {root} is missing the {sub}/ folder")
    names = _listing(root / "t1")
    for sub in ("t2", "change"):
        other = _listing(root / sub)
        if other != names:
            missing = sorted(set(names) - set(other))[:3]
            extra = sorted(set(other) - set(names))[:3]
            raise DataError(f"{sub}/ does not match t1/: missing={missing} extra={extra}")
    use_trend = include_trend and (root / "trend").is_dir()
    if use_trend:
        tnames = _listing(root / "trend")
        if tnames != names:
            raise DataError(f"trend/ does not match t1/ ({len(tnames)} vs {len(names)} files)")
    manifest = read_manifest(root) or {}
    seeds = manifest.get("seeds") or [None] * len(names)
    if indices is not None:
        selected = [(i, names[i]) for i in indices]
    else:
        selected = list(enumerate(names))
    pairs = []
    for i, name in selected:
        t1 = _read_rgb(root / "t1" / name)
        t2 = _read_rgb(root / "t2" / name)
        change = np.asarray(Image.open(root / "change" / name).convert("L"))
        if not np.isin(change, (0, 255)).all():
            raise DataError(f"change/{name} must contain only 0 and 255")
        change = (change // 255).astype(np.uint8)
        trend = None
        if use_trend:
            trend = np.array(Image.open(root / "trend" / name), dtype=np.uint8)
            if trend.max(initial=0) > 3:
                raise DataError(f"trend/{name} contains codes outside 0..3")
        if t1.shape != t2.shape or t1.shape[1:] != change.shape or (trend is not None and trend.shape != change.shape):
            raise DataError(f"shape mismatch across subfolders for {name}")
        pairs.append(SamplePair(t1, t2, change, trend, seeds[i] if i < len(seeds) else None))
    return pairs


def _read_rgb(path):
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def split_indices(manifest, split, count):
    """Index list for ``split`` ('train', 'val', 'test' or 'all')."""
    if split == "all" or not manifest or "splits" not in manifest:
        return list(range(count)) if split in ("all", "train") else []
    lo, hi = manifest["splits"].get(split, [0, 0])
    return list(range(lo, min(hi, count)))


def make_splits(count, val_fraction=0.0, test_fraction=0.0):
    if val_fraction < 0 or test_fraction < 0 or val_fraction + test_fraction > 1:
        raise ConfigError("split fractions must be non-negative and sum to <= 1")
    n_test = int(round(count * test_fraction))
    n_val = int(round(count * val_fraction))
    n_train = count - n_val - n_test
    return {"train": [0, n_train], "val": [n_train, n_train + n_val], "test": [n_train + n_val, count]}


def stack_batch(pairs):
    """Stack pairs into ``(t1, t2, change)`` arrays ``[N,3,H,W]``, ``[N,3,H,W]``, ``[N,1,H,W]``."""
    t1 = np.stack([p.t1 for p in pairs]).astype(np.float32)
    t2 = np.stack([p.t2 for p in pairs]).astype(np.float32)
    y = np.stack([p.change_label for p in pairs])[:, None].astype(np.float32)
    return t1, t2, y

