"""Dataset loading and generation.

Layout on disk: `images/*.ppm` (binary P6, maxval 255), `labels/*.txt`
(same stem, one `class_id cx cy w h` line per box, normalized), optional
`masks/*.ppm` (grayscale P5, nonzero = object region). The synthetic
generator fills this layout with textured backgrounds, distractor shapes
and 1-3 labelled filled ellipses per image; an importer converts an
ETIS-style directory (images + per-image ground-truth masks) into the same
layout by taking connected-component bounding rectangles.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .boxes import BBox
from .errors import FormatError, UsageError

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# binary PPM (P6) / PGM (P5)

def _read_pnm_header(raw: bytes, path) -> tuple[bytes, int, int, int, int]:
    """Parse magic, width, height, maxval; returns them plus the data offset."""
    if len(raw) < 2 or raw[:1] != b"P":
        raise FormatError(f"{path}: not a PNM file")
    magic = raw[:2]
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(raw):
            raise FormatError(f"{path}: truncated header")
        ch = raw[pos : pos + 1]
        if ch == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
        elif ch.isspace():
            pos += 1
        else:
            start = pos
            while pos < len(raw) and not raw[pos : pos + 1].isspace():
                pos += 1
            try:
                fields.append(int(raw[start:pos]))
            except ValueError:
                raise FormatError(f"{path}: bad header token {raw[start:pos]!r}") from None
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise FormatError(f"{path}: bad dimensions {width}x{height}")
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported, got {maxval}")
    return magic, width, height, maxval, pos


def read_ppm(path) -> np.ndarray:
    """Binary P6 -> (H, W, 3) uint8, bit-exact."""
    raw = Path(path).read_bytes()
    magic, w, h, _, pos = _read_pnm_header(raw, path)
    if magic != b"P6":
        raise FormatError(f"{path}: expected P6, got {magic.decode('ascii', 'replace')}")
    need = w * h * 3
    data = raw[pos : pos + need]
    if len(data) < need:
        raise FormatError(f"{path}: truncated pixel data ({len(data)} of {need} bytes)")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w, 3).copy()


def read_pgm(path) -> np.ndarray:
    """Binary P5 -> (H, W) uint8."""
    raw = Path(path).read_bytes()
    magic, w, h, _, pos = _read_pnm_header(raw, path)
    if magic != b"P5":
        raise FormatError(f"{path}: expected P5, got {magic.decode('ascii', 'replace')}")
    need = w * h
    data = raw[pos : pos + need]
    if len(data) < need:
        raise FormatError(f"{path}: truncated pixel data ({len(data)} of {need} bytes)")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim != 3 or img.shape[2] != 3:
        raise UsageError(f"write_ppm expects (H, W, 3), got {img.shape}")
    h, w = img.shape[:2]
    Path(path).write_bytes(b"P6\n%d %d\n255\n" % (w, h) + img.tobytes())


def write_pgm(path, img: np.ndarray) -> None:
    img = np.asarray(img, dtype=np.uint8)
    if img.ndim != 2:
        raise UsageError(f"write_pgm expects (H, W), got {img.shape}")
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def load_image(path) -> np.ndarray:
    return read_ppm(path)


def read_mask(path) -> np.ndarray:
    """Grayscale mask as bool array; accepts P5, or P6 via the first channel."""
    raw = Path(path).read_bytes()
    magic = raw[:2]
    if magic == b"P5":
        return read_pgm(path) > 127
    if magic == b"P6":
        return read_ppm(path)[:, :, 0] > 127
    raise FormatError(f"{path}: expected P5 or P6 mask")


# ---------------------------------------------------------------------------
# bilinear resampling (pixel-center aligned, edge replicated)

def bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample float image (H, W[, C]) at fractional pixel coords, clamped."""
    h, w = img.shape[:2]
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[..., None] if img.ndim == 3 else ys - y0
    fx = (xs - x0)[..., None] if img.ndim == 3 else xs - x0
    top = img[y0, x0] * (1 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1 - fx) + img[y1, x1] * fx
    return top * (1 - fy) + bot * fy


def resize_image(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of a uint8 image; identity when sizes match."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    grid_y, grid_x = np.meshgrid(ys, xs, indexing="ij")
    out = bilinear_sample(img.astype(np.float64), grid_y, grid_x)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------------------
# labels

def parse_label_file(path) -> list[BBox]:
    """One `class_id cx cy w h` per non-empty line, normalized coordinates."""
    boxes: list[BBox] = []
    for ln, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 5:
            raise FormatError(f"{path}:{ln}: expected 5 fields, got {len(parts)}")
        try:
            cid = int(parts[0])
            cx, cy, w, h = (float(p) for p in parts[1:])
        except ValueError:
            raise FormatError(f"{path}:{ln}: malformed number in {line!r}") from None
        if cid < 0:
            raise UsageError(f"{path}:{ln}: negative class id")
        if not (0.0 <= cx <= 1.0 and 0.0 <= cy <= 1.0 and 0.0 <= w <= 1.0 and 0.0 <= h <= 1.0):
            raise UsageError(f"{path}:{ln}: coordinate out of [0,1] range")
        boxes.append(BBox(cx=cx, cy=cy, w=w, h=h, class_id=cid))
    return boxes


def write_label_file(path, boxes) -> None:
    lines = [f"{b.class_id} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}" for b in boxes]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


# ---------------------------------------------------------------------------
# manifests and splits

@dataclass(frozen=True)
class Sample:
    image_path: Path
    label_path: Path
    boxes: tuple[BBox, ...]
    mask_path: Path | None = None

    @property
    def stem(self) -> str:
        return self.image_path.stem


@dataclass(frozen=True)
class DatasetManifest:
    root: Path
    samples: tuple[Sample, ...]
    assignments: dict[str, str] | None = None  # image filename -> train|test

    def subset(self, tag: str) -> list[Sample]:
        if self.assignments is None:
            raise UsageError("dataset has no split assignments")
        return [s for s in self.samples if self.assignments.get(s.image_path.name) == tag]


def load_dataset(root) -> DatasetManifest:
    """Scan the images/labels/masks layout; every image needs a label file."""
    root = Path(root)
    img_dir = root / "images"
    if not img_dir.is_dir():
        raise UsageError(f"{root}: no images/ directory")
    samples = []
    for img_path in sorted(img_dir.glob("*.ppm")):
        label_path = root / "labels" / f"{img_path.stem}.txt"
        if not label_path.exists():
            raise UsageError(f"{img_path.name}: missing label file {label_path}")
        boxes = tuple(parse_label_file(label_path))
        mask_path = None
        for ext in (".ppm", ".pgm"):
            cand = root / "masks" / f"{img_path.stem}{ext}"
            if cand.exists():
                mask_path = cand
                break
        samples.append(Sample(img_path, label_path, boxes, mask_path))
    if not samples:
        raise UsageError(f"{root}: no images found under images/")
    return DatasetManifest(root=root, samples=tuple(samples))


def split_dataset(manifest: DatasetManifest, train_fraction: float, seed: int) -> DatasetManifest:
    """Seeded shuffle; first ceil(fraction*n) samples become the train split."""
    if not 0.0 < train_fraction < 1.0:
        raise UsageError(f"train fraction must lie in (0, 1), got {train_fraction}")
    n = len(manifest.samples)
    if n < 2:
        raise UsageError("need at least 2 samples to split")
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(np.ceil(train_fraction * n))
    assignments = {}
    for pos, idx in enumerate(order):
        assignments[manifest.samples[int(idx)].image_path.name] = "train" if pos < n_train else "test"
    return replace(manifest, assignments=assignments)


def write_split(path, manifest: DatasetManifest) -> None:
    if manifest.assignments is None:
        raise UsageError("manifest has no split to write")
    lines = [f"{s.image_path.name} {manifest.assignments[s.image_path.name]}" for s in manifest.samples]
    Path(path).write_text("\n".join(lines) + "\n")


def read_split(path) -> dict[str, str]:
    assignments = {}
    for ln, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2 or parts[1] not in ("train", "test"):
            raise FormatError(f"{path}:{ln}: expected '<filename> train|test'")
        assignments[parts[0]] = parts[1]
    return assignments


# ---------------------------------------------------------------------------
# training adapter

class DetectionDataset:
    """Indexable view yielding (float32 [3,s,s] image in [0,1], boxes)."""

    def __init__(self, samples, input_size: int, cache: bool | None = None):
        self.samples = list(samples)
        self.input_size = input_size
        self._cache_enabled = len(self.samples) <= 256 if cache is None else cache
        self._cache: dict[int, tuple[np.ndarray, list[BBox]]] = {}

    def __len__(self) -> int:
        return len(self.samples)

    def __getitem__(self, i: int):
        if self._cache_enabled and i in self._cache:
            return self._cache[i]
        s = self.samples[i]
        img = resize_image(load_image(s.image_path), self.input_size, self.input_size)
        arr = (img.astype(np.float32) / 255.0).transpose(2, 0, 1)
        item = (arr, list(s.boxes))
        if self._cache_enabled:
            self._cache[i] = item
        return item


# ---------------------------------------------------------------------------
# synthetic generator

def _draw_rect(img, r0, r1, c0, c1, color):
    img[max(r0, 0) : max(r1, 0), max(c0, 0) : max(c1, 0)] = color


def generate_synthetic(n: int, image_size: int, seed: int, out_dir) -> DatasetManifest:
    """Write n synthetic samples (textured background, distractor shapes,
    1-3 labelled filled ellipses) plus masks, reproducibly from the seed.

    Ellipses never overlap each other and keep a margin from the border,
    so every label box contains its ellipse centroid and survives the
    default zoom-in crop.
    """
    if n <= 0:
        raise UsageError(f"need a positive sample count, got {n}")
    if image_size < 16:
        raise UsageError(f"image size too small: {image_size}")
    out_dir = Path(out_dir)
    for sub in ("images", "labels", "masks"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)

    size = image_size
    yy, xx = np.mgrid[0:size, 0:size]
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        c0 = rng.uniform(40, 110, size=3)
        c1 = rng.uniform(60, 140, size=3)
        t = (xx + yy) / (2 * size)
        img = c0 + (c1 - c0) * t[..., None]
        img += rng.normal(0.0, 6.0, size=img.shape)

        # distractors: thin dark bars and small dim squares
        for _ in range(int(rng.integers(2, 5))):
            color = rng.uniform(20, 90, size=3)
            if rng.random() < 0.5:
                r = int(rng.integers(0, size - 2))
                _draw_rect(img, r, r + int(rng.integers(1, 3)), 0, size, color)
            else:
                side = int(rng.integers(3, max(4, size // 10)))
                r = int(rng.integers(0, size - side))
                c = int(rng.integers(0, size - side))
                _draw_rect(img, r, r + side, c, c + side, color)

        # ellipses: bright reddish blobs, mutually disjoint
        k = int(rng.integers(1, 4))
        placed = []  # (cy_px, cx_px, ry_px, rx_px)
        for _ in range(k):
            for _attempt in range(40):
                rx = max(rng.uniform(0.05, 0.13) * size, 2.5)
                ry = max(rng.uniform(0.05, 0.13) * size, 2.5)
                cx = rng.uniform(0.22, 0.78) * size
                cy = rng.uniform(0.22, 0.78) * size
                rad = max(rx, ry)
                if all(np.hypot(cx - p[1], cy - p[0]) > rad + max(p[2], p[3]) + 3 for p in placed):
                    placed.append((cy, cx, ry, rx))
                    break

        mask = np.zeros((size, size), dtype=bool)
        boxes = []
        for cy, cx, ry, rx in placed:
            ell = ((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2 <= 1.0
            if not ell.any():
                continue
            color = np.array([rng.uniform(170, 230), rng.uniform(80, 130), rng.uniform(90, 140)])
            shade = 1.0 - 0.25 * (((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)
            img[ell] = color + 25 * (shade[ell][:, None] - 0.75)
            mask |= ell
            rows = np.nonzero(ell.any(axis=1))[0]
            cols = np.nonzero(ell.any(axis=0))[0]
            r0, r1 = int(rows[0]), int(rows[-1]) + 1
            c0_, c1_ = int(cols[0]), int(cols[-1]) + 1
            boxes.append(BBox(cx=(c0_ + c1_) / 2 / size, cy=(r0 + r1) / 2 / size,
                              w=(c1_ - c0_) / size, h=(r1 - r0) / size))

        stem = f"img_{i:04d}"
        write_ppm(out_dir / "images" / f"{stem}.ppm", np.clip(np.rint(img), 0, 255).astype(np.uint8))
        write_label_file(out_dir / "labels" / f"{stem}.txt", boxes)
        # layout convention keeps the .ppm extension; the payload is P5
        write_pgm(out_dir / "masks" / f"{stem}.ppm", mask.astype(np.uint8) * 255)
    return load_dataset(out_dir)


# ---------------------------------------------------------------------------
# ETIS-style importer: per-image ground-truth masks -> label boxes

def import_etis(root, min_component_px: int = 10) -> DatasetManifest:
    """Convert `images/` + `masks/` (per-image ground truth) into the
    standard layout by writing one label box per 8-connected mask
    component; components under min_component_px pixels are noise."""
    root = Path(root)
    img_dir = root / "images"
    mask_dir = root / "masks"
    if not img_dir.is_dir() or not mask_dir.is_dir():
        raise UsageError(f"{root}: expected images/ and masks/ directories")
    label_dir = root / "labels"
    label_dir.mkdir(exist_ok=True)
    structure = np.ones((3, 3), dtype=bool)
    imported = 0
    for img_path in sorted(img_dir.glob("*.ppm")):
        mask_path = None
        for ext in (".ppm", ".pgm"):
            cand = mask_dir / f"{img_path.stem}{ext}"
            if cand.exists():
                mask_path = cand
                break
        if mask_path is None:
            log.warning("import: %s has no mask, skipping", img_path.name)
            continue
        mask = read_mask(mask_path)
        h, w = mask.shape
        labelled, count = ndimage.label(mask, structure=structure)
        boxes = []
        for comp in range(1, count + 1):
            region = labelled == comp
            if region.sum() < min_component_px:
                continue
            rows = np.nonzero(region.any(axis=1))[0]
            cols = np.nonzero(region.any(axis=0))[0]
            r0, r1 = int(rows[0]), int(rows[-1]) + 1
            c0, c1 = int(cols[0]), int(cols[-1]) + 1
            boxes.append(BBox(cx=(c0 + c1) / 2 / w, cy=(r0 + r1) / 2 / h,
                              w=(c1 - c0) / w, h=(r1 - r0) / h))
        write_label_file(label_dir / f"{img_path.stem}.txt", boxes)
        imported += 1
    if imported == 0:
        raise UsageError(f"{root}: nothing imported (no image/mask pairs)")
    return load_dataset(root)
