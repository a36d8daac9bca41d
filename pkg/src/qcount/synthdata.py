"""Synthetic glyph-counting data with exact point annotations, plus an FSC-147-format reader.

Dataset directory layout::

    images/<id>.png        RGB 8-bit
    densities/<id>.bin     density grid (see io.write_density)
    annotations.json       {"<id>.png": {"points": [[x, y], ...],
                                         "distractor_class": str | null,
                                         "distractor_points": [[x, y], ...]}}
    classes.txt            "<id>.png\t<class name>" per line
    splits.json            {"train": [...], "val": [...], "test": [...]}
    dataset.json           generator spec and format version

Point coordinates are continuous pixel units: pixel (row r, col c) covers
[c, c+1) x [r, r+1).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
from PIL import Image

from .io import read_density, write_density

log = logging.getLogger(__name__)

SHAPES = ("discs", "squares", "triangles", "crosses", "rings", "bars")
SIGMA = 1.5
FORMAT_VERSION = 1


class GenerationError(RuntimeError):
    pass


@dataclass
class DatasetSpec:
    n_train: int = 2000
    n_val: int = 500
    n_test: int = 500
    image_size: int = 128
    classes: tuple = SHAPES
    count_range: tuple = (1, 100)
    distractor_count_range: tuple = (1, 30)
    glyph_radius: tuple = (2.5, 4.5)
    distractor_prob: float = 0.5
    noise: float = 0.03
    seed: int = 0
    version: int = FORMAT_VERSION

    def __post_init__(self):
        self.classes = tuple(self.classes)
        self.count_range = tuple(self.count_range)
        self.distractor_count_range = tuple(self.distractor_count_range)
        self.glyph_radius = tuple(self.glyph_radius)
        if len(self.classes) < 2 or len(set(self.classes)) != len(self.classes):
            raise ValueError("need at least two distinct classes")
        unknown = set(self.classes) - set(SHAPES)
        if unknown:
            raise ValueError(f"unknown glyph classes {sorted(unknown)}")
        lo, hi = self.count_range
        if not 1 <= lo <= hi:
            raise ValueError("count range must satisfy 1 <= lo <= hi")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ValueError("split sizes must be non-negative")

    @property
    def splits(self) -> dict:
        a, b = self.n_train, self.n_train + self.n_val
        return {
            "train": list(range(0, a)),
            "val": list(range(a, b)),
            "test": list(range(b, b + self.n_test)),
        }

    def to_json(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, d: dict) -> "DatasetSpec":
        return cls(**d)


@dataclass
class CountingSample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    class_name: str
    points: np.ndarray  # (K, 2) x, y
    density: np.ndarray  # (H, W) float32
    distractor_class: Optional[str] = None
    distractor_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    image_id: int = 0

    @property
    def count(self) -> int:
        return len(self.points)


def density_map(points, h, w, sigma=SIGMA):
    """Sum of unit-mass Gaussians, each truncated at 4 sigma and the image border, then renormalised."""
    out = np.zeros((h, w), dtype=np.float64)
    rad = int(math.ceil(4 * sigma))
    for x, y in np.asarray(points, dtype=np.float64).reshape(-1, 2):
        cx, cy = int(math.floor(x)), int(math.floor(y))
        x0, x1 = max(cx - rad, 0), min(cx + rad + 1, w)
        y0, y1 = max(cy - rad, 0), min(cy + rad + 1, h)
        gx = np.arange(x0, x1) + 0.5 - x
        gy = np.arange(y0, y1) + 0.5 - y
        k = np.exp(-(gy[:, None] ** 2 + gx[None, :] ** 2) / (2 * sigma ** 2))
        k[(gy[:, None] ** 2 + gx[None, :] ** 2) > (4 * sigma) ** 2] = 0.0
        s = k.sum()
        if s <= 0:  # point is guaranteed inside the image, so its own pixel is nonzero
            raise AssertionError("empty density kernel")
        out[y0:y1, x0:x1] += k / s
    return out.astype(np.float32)


def _glyph_mask(shape, dx, dy, r):
    if shape == "discs":
        return dx ** 2 + dy ** 2 <= r ** 2
    if shape == "squares":
        return np.maximum(np.abs(dx), np.abs(dy)) <= 0.8 * r
    if shape == "triangles":
        t = (dy + r) / (1.8 * r)
        return (dy >= -r) & (dy <= 0.8 * r) & (np.abs(dx) <= t * 0.95 * r)
    if shape == "crosses":
        arm = r / 3
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= r))
    if shape == "rings":
        d2 = dx ** 2 + dy ** 2
        return (d2 <= r ** 2) & (d2 >= (0.5 * r) ** 2)
    if shape == "bars":
        return (np.abs(dx) <= r) & (np.abs(dy) <= r / 3)
    raise ValueError(f"unknown glyph {shape!r}")


def _draw(canvas, shape, x, y, r, color):
    h, w, _ = canvas.shape
    x0, x1 = max(int(x - r) - 1, 0), min(int(x + r) + 2, w)
    y0, y1 = max(int(y - r) - 1, 0), min(int(y + r) + 2, h)
    cover = np.zeros((y1 - y0, x1 - x0))
    for oy in (0.25, 0.75):  # 2x2 supersampling
        for ox in (0.25, 0.75):
            dx = np.arange(x0, x1)[None, :] + ox - x
            dy = np.arange(y0, y1)[:, None] + oy - y
            cover += _glyph_mask(shape, dx, dy, r)
    cover = (cover / 4)[..., None]
    patch = canvas[y0:y1, x0:x1]
    canvas[y0:y1, x0:x1] = patch * (1 - cover) + np.asarray(color) * cover


def _log_uniform_int(rng, lo, hi):
    return int(min(hi, max(lo, math.floor(math.exp(rng.uniform(math.log(lo), math.log(hi + 1)))))))


def _place(rng, n, r, size, taken):
    """Rejection-sample ``n`` centres at least 2r+1 apart from each other and ``taken``."""
    pts = list(taken)
    new = []
    gap = 2 * r + 1
    for _ in range(n):
        for _try in range(200):
            p = rng.uniform(r + 0.5, size - r - 0.5, size=2)
            if all((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 >= gap ** 2 for q in pts):
                break
        else:
            return None
        pts.append(p)
        new.append(p)
    return new


def _color(rng, background, min_contrast=0.35):
    for _ in range(100):
        c = rng.uniform(0, 1, size=3)
        if np.abs(c - background).mean() >= min_contrast:
            return c
    return 1.0 - background


def generate_sample(spec: DatasetSpec, index: int) -> CountingSample:
    """Deterministic in (spec.seed, index)."""
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    target = spec.classes[rng.integers(len(spec.classes))]
    count = _log_uniform_int(rng, *spec.count_range)
    distractor = None
    n_dis = 0
    if rng.uniform() < spec.distractor_prob:
        others = [c for c in spec.classes if c != target]
        distractor = others[rng.integers(len(others))]
        n_dis = _log_uniform_int(rng, *spec.distractor_count_range)
    r = rng.uniform(*spec.glyph_radius)
    for attempt in range(100):
        if (count + n_dis) * (2 * r + 1) ** 2 <= 0.6 * size * size:
            pts = _place(rng, count, r, size, [])
            dis = _place(rng, n_dis, r, size, pts) if pts is not None else None
            if pts is not None and dis is not None:
                break
        r *= 0.9
    else:
        raise GenerationError(f"cannot place {count}+{n_dis} glyphs in sample {index}")

    background = rng.uniform(0.1, 0.9, size=3)
    canvas = np.broadcast_to(background, (size, size, 3)).copy()
    tcolor = _color(rng, background)
    dcolor = _color(rng, background)
    for p in pts:
        _draw(canvas, target, p[0], p[1], r, tcolor)
    for p in dis:
        _draw(canvas, distractor, p[0], p[1], r, dcolor)
    canvas += rng.normal(0, spec.noise, size=canvas.shape)
    image = (np.clip(canvas, 0, 1) * 255).round().astype(np.uint8)
    points = np.array(pts, dtype=np.float64).reshape(-1, 2)
    return CountingSample(
        image=image.astype(np.float32) / 255.0,
        class_name=target,
        points=points,
        density=density_map(points, size, size),
        distractor_class=distractor,
        distractor_points=np.array(dis, dtype=np.float64).reshape(-1, 2),
        image_id=index,
    )


def generate(spec: DatasetSpec, root) -> Path:
    """Write a full dataset directory; byte-identical for identical specs."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "densities").mkdir(exist_ok=True)
    annotations, class_lines = {}, []
    splits = spec.splits
    names = {}
    for split, ids in splits.items():
        for i in ids:
            s = generate_sample(spec, i)
            name = f"{i:05d}.png"
            names[i] = name
            Image.fromarray((s.image * 255).round().astype(np.uint8)).save(root / "images" / name)
            write_density(root / "densities" / f"{i:05d}.bin", s.density)
            annotations[name] = {
                "points": s.points.round(4).tolist(),
                "distractor_class": s.distractor_class,
                "distractor_points": s.distractor_points.round(4).tolist(),
            }
            class_lines.append(f"{name}\t{s.class_name}")
    (root / "annotations.json").write_text(json.dumps(annotations, sort_keys=True))
    (root / "classes.txt").write_text("\n".join(class_lines) + "\n")
    (root / "splits.json").write_text(
        json.dumps({k: [names[i] for i in v] for k, v in splits.items()}, sort_keys=True)
    )
    (root / "dataset.json").write_text(json.dumps(spec.to_json(), sort_keys=True))
    return root


@dataclass
class CountingData:
    """A split held in memory: uint8 images (n, H, W, 3), densities (n, H, W)."""

    images: np.ndarray
    densities: np.ndarray
    class_names: list
    counts: np.ndarray
    image_ids: np.ndarray

    def __len__(self):
        return len(self.class_names)

    def subset(self, idx) -> "CountingData":
        idx = np.asarray(idx)
        return CountingData(
            self.images[idx], self.densities[idx],
            [self.class_names[i] for i in idx], self.counts[idx], self.image_ids[idx],
        )

    @classmethod
    def from_samples(cls, samples) -> "CountingData":
        samples = list(samples)
        if not samples:
            raise ValueError("no samples")
        return cls(
            images=np.stack([(s.image * 255).round().astype(np.uint8) for s in samples]),
            densities=np.stack([s.density for s in samples]).astype(np.float32),
            class_names=[s.class_name for s in samples],
            counts=np.array([s.count for s in samples], dtype=np.int64),
            image_ids=np.array([s.image_id for s in samples], dtype=np.int64),
        )


def generate_split(spec: DatasetSpec, split: str) -> CountingData:
    return CountingData.from_samples(generate_sample(spec, i) for i in spec.splits[split])


def load_split(root, split: str) -> CountingData:
    """Load a split written by :func:`generate` (densities read back bit-exactly)."""
    root = Path(root)
    splits = json.loads((root / "splits.json").read_text())
    annotations = json.loads((root / "annotations.json").read_text())
    classes = _read_classes(root / "classes.txt")
    names = splits.get(split, [])
    if not names:
        raise ValueError(f"split {split!r} is empty or missing in {root}")
    images, dens, cls, counts, ids = [], [], [], [], []
    for name in names:
        stem = Path(name).stem
        images.append(np.asarray(Image.open(root / "images" / name).convert("RGB")))
        dens.append(read_density(root / "densities" / f"{stem}.bin"))
        cls.append(classes[name])
        counts.append(len(annotations[name]["points"]))
        ids.append(int(stem) if stem.isdigit() else len(ids))
    return CountingData(np.stack(images), np.stack(dens), cls, np.array(counts), np.array(ids))


def _read_classes(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            name, cls = line.split("\t", 1)
            out[name.strip()] = cls.strip()
    return out


def load_fsc147_format(
    root,
    image_size: int = 128,
    split: str = "train",
    annotation_file: str = None,
    class_file: str = None,
    split_file: str = None,
    image_dir: str = None,
) -> Iterator[CountingSample]:
    """Yield resized samples from an FSC-147-style directory.

    File names default to this package's layout and fall back to the
    original FSC-147 names when those are present.
    """
    root = Path(root)

    def pick(given, *candidates):
        if given:
            return root / given
        for c in candidates:
            if (root / c).exists():
                return root / c
        return root / candidates[0]

    ann_path = pick(annotation_file, "annotations.json", "annotation_FSC147_384.json")
    cls_path = pick(class_file, "classes.txt", "ImageClasses_FSC147.txt")
    split_path = pick(split_file, "splits.json", "Train_Test_Val_FSC_147.json")
    img_dir = pick(image_dir, "images", "images_384_VarV2")
    try:
        annotations = json.loads(ann_path.read_text())
        splits = json.loads(split_path.read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed annotation JSON: {exc}") from exc
    classes = _read_classes(cls_path)
    for idx, name in enumerate(splits.get(split, [])):
        ann = annotations.get(name)
        if ann is None or name not in classes:
            log.warning("no annotation for %s; skipped", name)
            continue
        img = Image.open(img_dir / name).convert("RGB")
        w0, h0 = img.size
        img = img.resize((image_size, image_size), Image.BILINEAR)
        pts = np.asarray(ann["points"], dtype=np.float64).reshape(-1, 2)
        pts = pts * [image_size / w0, image_size / h0]
        hi = np.nextafter(image_size, 0)
        clipped = np.clip(pts, 0.0, hi)
        if np.any(clipped != pts):
            log.warning("%s: %d points outside the image clamped to the border",
                        name, int(np.any(clipped != pts, axis=1).sum()))
        stem = Path(name).stem
        yield CountingSample(
            image=np.asarray(img, dtype=np.float32) / 255.0,
            class_name=classes[name],
            points=clipped,
            density=density_map(clipped, image_size, image_size),
            image_id=int(stem) if stem.isdigit() else idx,
        )
