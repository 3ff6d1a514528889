"""Procedural pristine images, graded distortions and the labelled corpus."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import fft, ndimage

from .imageio import read_image, write_image

KINDS = ("gaussian_blur", "white_noise", "jpeg_block", "contrast_change", "pixelate")
LEVEL_TABLES = {
    "gaussian_blur": (0.8, 1.6, 2.4, 3.2, 4.0),
    "white_noise": (0.02, 0.05, 0.10, 0.18, 0.30),
    "jpeg_block": (8, 16, 32, 64, 96),
    "contrast_change": (0.8, 0.6, 0.45, 0.3, 0.2),
    "pixelate": (2, 4, 6, 10, 16),
}
PSNR_CAP = 100.0
MANIFEST_HEADER = ("path", "pristine_id", "kind", "level", "class_label", "pseudo_mos", "split")


@dataclass(frozen=True)
class DistortionSpec:
    kind: str
    level: int
    seed: int = 0  # only white_noise draws random numbers

    def __post_init__(self):
        if self.kind not in LEVEL_TABLES:
            raise ValueError(f"unknown distortion kind {self.kind!r}")
        if not 1 <= self.level <= len(LEVEL_TABLES[self.kind]):
            raise ValueError(f"level {self.level} outside 1..{len(LEVEL_TABLES[self.kind])}")

    @property
    def parameter(self):
        return LEVEL_TABLES[self.kind][self.level - 1]


# ---------------------------------------------------------------------------
# Pristine generation


def _smooth_noise(rng, size, sigma):
    field_ = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma, mode="wrap")
    return field_ / (field_.std() + 1e-12)


def gen_pristine(seed, size=64, max_draws=50):
    """Deterministic synthetic photo-like RGB image of shape (size, size, 3).

    Candidates are drawn from one seeded stream until a draw degrades strictly
    monotonically (in PSNR) across the levels of every distortion kind; pixel
    grids of non-nested block sizes occasionally break that ordering.
    """
    if size < 32:
        raise ValueError(f"pristine size must be >= 32, got {size}")
    rng = np.random.default_rng(seed)
    for _ in range(max_draws):
        img = _draw_pristine(rng, size)
        if _full_range(img) and levels_monotone(img):
            return img
    raise RuntimeError(f"no full-range, level-monotone pristine image within {max_draws} draws (seed {seed})")


def _full_range(img):
    return any(img[..., c].min() < 16 and img[..., c].max() > 239 for c in range(img.shape[-1]))


def levels_monotone(img, seed=0):
    for kind, table in LEVEL_TABLES.items():
        prev = np.inf
        for level in range(1, len(table) + 1):
            q = psnr(apply_distortion(img, DistortionSpec(kind, level, seed=seed)), img)
            if not q < prev:
                return False
            prev = q
    return True


def _draw_pristine(rng, size):
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)

    # low-frequency colour gradient around mid-tones
    img = np.empty((size, size, 3))
    angle = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(angle) * (xx - 0.5) + np.sin(angle) * (yy - 0.5)
    for c in range(3):
        img[..., c] = rng.uniform(110, 145) + rng.uniform(-30, 30) * ramp

    # band-limited textures at two scales; fixed amplitudes keep the fine-scale
    # energy comparable across images so distortion levels read the same
    for sigma, amp in ((size / 16, 18.0), (1.2, 7.0)):
        tex = _smooth_noise(rng, size, sigma)
        img += amp * tex[..., None] * rng.uniform(0.8, 1.0, size=3)

    # six anti-aliased shapes via 4x supersampled coverage, rectangles and discs
    # alternating; the last two pin the dark and bright ends of the range
    ss = 4
    sy, sx = (np.mgrid[0:size * ss, 0:size * ss] + 0.5) / (size * ss)
    n_shapes = 6
    for k in range(n_shapes):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        r = rng.uniform(0.08, 0.16)
        if k % 2:
            mask = (sy - cy) ** 2 + (sx - cx) ** 2 < r * r
        else:
            mask = (np.abs(sy - cy) < r) & (np.abs(sx - cx) < r * rng.uniform(0.6, 1.4))
        cover = mask.reshape(size, ss, size, ss).mean(axis=(1, 3))[..., None]
        if k == n_shapes - 2:
            colour = rng.uniform(0, 10, size=3)
        elif k == n_shapes - 1:
            colour = rng.uniform(245, 255, size=3)
        else:
            colour = rng.uniform(30, 225, size=3)
        img = img * (1 - cover) + colour * cover
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# Distortions


def _gaussian_blur(img, sigma):
    f = img.astype(np.float64)
    out = np.stack([ndimage.gaussian_filter(f[..., c], sigma, mode="reflect") for c in range(3)], axis=-1)
    return out


def _white_noise(img, sigma, seed):
    rng = np.random.default_rng(seed)
    return img.astype(np.float64) + rng.standard_normal(img.shape) * sigma * 255.0


def _jpeg_block(img, step):
    h, w, _ = img.shape
    ph, pw = -h % 8, -w % 8
    f = np.pad(img.astype(np.float64) - 128.0, ((0, ph), (0, pw), (0, 0)), mode="edge")
    H, W = f.shape[:2]
    blocks = f.reshape(H // 8, 8, W // 8, 8, 3).transpose(0, 2, 4, 1, 3)
    coef = fft.dctn(blocks, axes=(-2, -1), norm="ortho")
    coef = np.round(coef / step) * step
    rec = fft.idctn(coef, axes=(-2, -1), norm="ortho")
    rec = rec.transpose(0, 3, 1, 4, 2).reshape(H, W, 3) + 128.0
    return rec[:h, :w]


def _contrast(img, gain):
    return gain * (img.astype(np.float64) - 128.0) + 128.0


def _pixelate(img, block):
    h, w, _ = img.shape
    f = img.astype(np.float64)
    out = np.empty_like(f)
    for y in range(0, h, block):
        for x in range(0, w, block):
            tile = f[y:y + block, x:x + block]
            out[y:y + block, x:x + block] = tile.mean(axis=(0, 1))
    return out


def apply_distortion(img, spec):
    """Distort a uint8 (H,W,3) image; output rounded and clamped to [0,255]."""
    p = spec.parameter
    if spec.kind == "gaussian_blur":
        out = _gaussian_blur(img, p)
    elif spec.kind == "white_noise":
        out = _white_noise(img, p, spec.seed)
    elif spec.kind == "jpeg_block":
        out = _jpeg_block(img, p)
    elif spec.kind == "contrast_change":
        out = _contrast(img, p)
    elif spec.kind == "pixelate":
        out = _pixelate(img, p)
    else:  # pragma: no cover - rejected by DistortionSpec
        raise ValueError(spec.kind)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def psnr(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: dims differ {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(255.0 ** 2 / mse))


def pseudo_mos(psnr_db, lo=5.0, hi=50.0):
    """Affine map of clamp(psnr, lo, hi) onto [0, 100]."""
    return 100.0 * (min(max(psnr_db, lo), hi) - lo) / (hi - lo)


# ---------------------------------------------------------------------------
# Corpus


@dataclass
class ForgeConfig:
    seed: int = 0
    n_pristine: int = 20
    size: int = 64
    kinds: tuple = KINDS
    levels: int = 5
    mos_psnr_range: tuple = (5.0, 50.0)
    split_ratio: float = 0.8
    image_format: str = "png"

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("kinds", "mos_psnr_range"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["kinds"] = list(self.kinds)
        d["mos_psnr_range"] = list(self.mos_psnr_range)
        return d

    @property
    def n_classes(self):
        return len(self.kinds) * self.levels + 1


@dataclass
class Sample:
    path: str
    pristine_id: int
    kind: str  # "pristine" for undistorted samples
    level: int
    class_label: int
    pseudo_mos: float
    split: str = "train"


@dataclass
class DatasetManifest:
    seed: int
    size: int
    n_classes: int
    samples: list = field(default_factory=list)
    root: Path | None = None

    @property
    def pristine_ids(self):
        return sorted({s.pristine_id for s in self.samples})

    def pristine_sample(self, pid):
        for s in self.samples:
            if s.pristine_id == pid and s.level == 0:
                return s
        raise KeyError(pid)

    def load(self, sample):
        return read_image(self.root / sample.path)

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for s in self.samples:
            w.writerow([s.path, s.pristine_id, s.kind, s.level, s.class_label, f"{s.pseudo_mos:.4f}", s.split])
        return buf.getvalue()


def class_label(kind_index, level, levels):
    return kind_index * levels + (level - 1)


def default_split(pristine_ids, ratio, seed):
    """Content-disjoint train/test assignment keyed by pristine id."""
    ids = sorted(pristine_ids)
    order = np.random.default_rng(np.random.SeedSequence([seed, 0x5917])).permutation(len(ids))
    n_train = int(round(ratio * len(ids)))
    train = {ids[i] for i in order[:n_train]}
    return {pid: ("train" if pid in train else "test") for pid in ids}


def _sub_seed(*keys):
    return int(np.random.SeedSequence(list(keys)).generate_state(1)[0])


def build_corpus(config, out_dir):
    """Generate every (pristine, kind, level) sample and write images plus manifest.csv."""
    out = Path(out_dir)
    try:
        (out / "images").mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create corpus directory {out}: {exc}") from exc
    if not out.is_dir():
        raise OSError(f"{out} is not a directory")
    lo, hi = config.mos_psnr_range
    k = config.n_classes
    split = default_split(range(config.n_pristine), config.split_ratio, config.seed)
    ext = "ppm" if config.image_format == "ppm" else "png"
    manifest = DatasetManifest(config.seed, config.size, k, root=out)
    for pid in range(config.n_pristine):
        pristine = gen_pristine(_sub_seed(config.seed, pid), config.size)
        rel = f"images/p{pid:03d}_pristine_0.{ext}"
        write_image(out / rel, pristine)
        manifest.samples.append(Sample(rel, pid, "pristine", 0, k - 1, 100.0, split[pid]))
        for ki, kind in enumerate(config.kinds):
            for level in range(1, config.levels + 1):
                spec = DistortionSpec(kind, level, seed=_sub_seed(config.seed, pid, ki, level))
                img = apply_distortion(pristine, spec)
                rel = f"images/p{pid:03d}_{kind}_{level}.{ext}"
                write_image(out / rel, img)
                mos = pseudo_mos(psnr(img, pristine), lo, hi)
                manifest.samples.append(Sample(rel, pid, kind, level, class_label(ki, level, config.levels), mos, split[pid]))
    (out / "manifest.csv").write_text(manifest.to_csv(), newline="\n")
    (out / "forge_config.json").write_text(json.dumps(config.to_dict(), indent=2) + "\n")
    return manifest


def read_manifest(path):
    """Load manifest.csv (or a corpus directory containing it)."""
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.csv"
    root = path.parent
    cfg_path = root / "forge_config.json"
    cfg = json.loads(cfg_path.read_text()) if cfg_path.exists() else {}
    samples = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != MANIFEST_HEADER:
            raise ValueError(f"{path}: unexpected manifest header {reader.fieldnames}")
        for row in reader:
            mos = row["pseudo_mos"]
            samples.append(Sample(row["path"], int(row["pristine_id"]), row["kind"], int(row["level"]),
                                  int(row["class_label"]), float(mos) if mos != "" else float("nan"),
                                  row["split"]))
    n_classes = max(s.class_label for s in samples) + 1 if samples else 0
    return DatasetManifest(cfg.get("seed", 0), cfg.get("size", 0), n_classes, samples, root=root)
