"""Offline photometric/geometric augmentation with exact box re-mapping.

Each labelled input image expands into the original plus ten variants:
seeded gaussian noise, the three clockwise right-angle rotations, zoom-in
and zoom-out, brightened and darkened copies, and x/y shears. Rotations
are pure pixel permutations; zoom and shear resample bilinearly with
edge-replicated borders. All box math happens in normalized coordinates;
geometry ops map the four corners and take the axis-aligned hull, then
clip to [0,1]^2.

Noise seeds derive from (global seed, source stem, op name), so a parallel
dataset walk would produce the same bytes in any order.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .boxes import BBox
from .data import bilinear_sample, load_image, parse_label_file, write_label_file, write_ppm
from .errors import ConfigError, GridDetError, UsageError

log = logging.getLogger(__name__)

VARIANT_NAMES = ("noise", "rot90", "rot180", "rot270", "zoom_in", "zoom_out",
                 "bright", "dark", "shear_x", "shear_y")


@dataclass(frozen=True)
class Recipe:
    """Parameters for the ten default variants. Zoom values are percents."""

    noise_sigma: float = 1.0
    zoom_in_pct: float = 30.0
    zoom_out_pct: float = 10.0
    brightness_delta: float = 40.0
    darkness_delta: float = 40.0
    shear_x: float = 0.2
    shear_y: float = 0.2
    contrast_factor: float = 1.2


def parse_recipe(text: str) -> Recipe:
    known = {f.name for f in fields(Recipe)}
    values = {}
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {ln}: expected key=value, got {line!r}")
        key, _, val = line.partition("=")
        key = key.strip()
        if key not in known:
            raise ConfigError(f"line {ln}: unknown recipe key {key!r}")
        try:
            values[key] = float(val.strip())
        except ValueError:
            raise ConfigError(f"line {ln}: bad value for {key}: {val.strip()!r}") from None
    r = Recipe(**values)
    if r.noise_sigma <= 0 or not 0 < r.zoom_in_pct < 100 or not 0 < r.zoom_out_pct < 100:
        raise ConfigError("recipe out of range: sigma > 0 and zoom percents in (0, 100)")
    if abs(r.shear_x) >= 1 or abs(r.shear_y) >= 1:
        raise ConfigError("recipe out of range: |shear| < 1")
    return r


def load_recipe(path) -> Recipe:
    return parse_recipe(Path(path).read_text())


# ---------------------------------------------------------------------------
# pixel ops

def _to_u8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def gaussian_noise(img: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Add seeded per-channel gaussian noise, clamped to [0, 255]."""
    if sigma <= 0:
        raise UsageError(f"sigma must be positive, got {sigma}")
    rng = np.random.default_rng(seed)
    return _to_u8(img.astype(np.float64) + rng.normal(0.0, sigma, size=img.shape))


def brightness(img: np.ndarray, delta: float) -> np.ndarray:
    return _to_u8(img.astype(np.float64) + delta)


def contrast(img: np.ndarray, factor: float) -> np.ndarray:
    """p -> 128 + factor*(p - 128), clamped."""
    return _to_u8(128.0 + factor * (img.astype(np.float64) - 128.0))


def rotate(img: np.ndarray, boxes, angle: int):
    """Lossless clockwise rotation by 90, 180 or 270 degrees."""
    if angle not in (90, 180, 270):
        raise UsageError(f"rotation angle must be 90, 180 or 270, got {angle}")
    k = {90: -1, 180: 2, 270: 1}[angle]
    out = np.ascontiguousarray(np.rot90(img, k=k))
    mapped = []
    for b in boxes:
        if angle == 90:
            nb = BBox(cx=1.0 - b.cy, cy=b.cx, w=b.h, h=b.w, confidence=b.confidence, class_id=b.class_id)
        elif angle == 180:
            nb = BBox(cx=1.0 - b.cx, cy=1.0 - b.cy, w=b.w, h=b.h, confidence=b.confidence, class_id=b.class_id)
        else:
            nb = BBox(cx=b.cy, cy=1.0 - b.cx, w=b.h, h=b.w, confidence=b.confidence, class_id=b.class_id)
        mapped.append(nb)
    return out, mapped


def _warp(img: np.ndarray, src_of_dst):
    """Resample: src_of_dst maps normalized dst coords -> normalized src."""
    h, w = img.shape[:2]
    qx, qy = np.meshgrid((np.arange(w) + 0.5) / w, (np.arange(h) + 0.5) / h)
    px, py = src_of_dst(qx, qy)
    out = bilinear_sample(img.astype(np.float64), py * h - 0.5, px * w - 0.5)
    return _to_u8(out)


def _clip_unit(x1, y1, x2, y2):
    x1, y1 = max(x1, 0.0), max(y1, 0.0)
    x2, y2 = min(x2, 1.0), min(y2, 1.0)
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        return None
    return x1, y1, x2, y2


def _corner_box(b: BBox, x1, y1, x2, y2) -> BBox:
    return BBox(cx=(x1 + x2) / 2, cy=(y1 + y2) / 2, w=x2 - x1, h=y2 - y1,
                confidence=b.confidence, class_id=b.class_id)


def zoom(img: np.ndarray, boxes, pct: float, direction: str):
    """Zoom in (center crop to 1-pct extent, resample up) or out (shrink to
    1-pct extent, edge-padded). pct is a fraction in (0, 1).

    Zoom-in drops boxes left under 20% visible after the crop and clips the
    rest; zoom-out only rescales.
    """
    if not 0 < pct < 1:
        raise UsageError(f"zoom pct must lie in (0, 1), got {pct}")
    if direction not in ("in", "out"):
        raise UsageError(f"zoom direction must be 'in' or 'out', got {direction!r}")
    keep = 1.0 - pct
    if direction == "in":
        out = _warp(img, lambda qx, qy: (0.5 + (qx - 0.5) * keep, 0.5 + (qy - 0.5) * keep))
        mapped = []
        for b in boxes:
            cx = 0.5 + (b.cx - 0.5) / keep
            cy = 0.5 + (b.cy - 0.5) / keep
            w, h = b.w / keep, b.h / keep
            clipped = _clip_unit(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)
            if clipped is None:
                continue
            x1, y1, x2, y2 = clipped
            if (x2 - x1) * (y2 - y1) < 0.2 * w * h:
                continue
            mapped.append(_corner_box(b, x1, y1, x2, y2))
        return out, mapped
    out = _warp(img, lambda qx, qy: (0.5 + (qx - 0.5) / keep, 0.5 + (qy - 0.5) / keep))
    mapped = [BBox(cx=0.5 + (b.cx - 0.5) * keep, cy=0.5 + (b.cy - 0.5) * keep,
                   w=b.w * keep, h=b.h * keep, confidence=b.confidence, class_id=b.class_id)
              for b in boxes]
    return out, mapped


def shear(img: np.ndarray, boxes, axis: str, factor: float):
    """Affine shear with edge padding; boxes become the axis-aligned hull of
    their four sheared corners, clipped to [0,1]^2."""
    if axis not in ("x", "y"):
        raise UsageError(f"shear axis must be 'x' or 'y', got {axis!r}")
    if not abs(factor) < 1:
        raise UsageError(f"|shear factor| must be < 1, got {factor}")
    if axis == "x":
        out = _warp(img, lambda qx, qy: (qx - factor * qy, qy))
    else:
        out = _warp(img, lambda qx, qy: (qx, qy - factor * qx))
    mapped = []
    for b in boxes:
        x1, y1, x2, y2 = b.corners()
        corners = [(x1, y1), (x2, y1), (x1, y2), (x2, y2)]
        if axis == "x":
            pts = [(x + factor * y, y) for x, y in corners]
        else:
            pts = [(x, y + factor * x) for x, y in corners]
        xs = [p[0] for p in pts]
        ys = [p[1] for p in pts]
        clipped = _clip_unit(min(xs), min(ys), max(xs), max(ys))
        if clipped is None:
            continue
        mapped.append(_corner_box(b, *clipped))
    return out, mapped


# ---------------------------------------------------------------------------
# dataset walk

@dataclass(frozen=True)
class ManifestRow:
    output_path: str
    source_path: str
    op_name: str
    parameters: str


@dataclass
class AugmentResult:
    manifest_path: Path
    rows: list[ManifestRow]
    inputs_processed: int
    inputs_skipped: int
    variants_skipped: int


def _op_seed(global_seed: int, stem: str, op_name: str) -> int:
    digest = hashlib.sha256(f"{global_seed}|{stem}|{op_name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _variants(recipe: Recipe):
    return [
        ("noise", f"sigma={recipe.noise_sigma:g}"),
        ("rot90", "angle=90"),
        ("rot180", "angle=180"),
        ("rot270", "angle=270"),
        ("zoom_in", f"pct={recipe.zoom_in_pct:g}"),
        ("zoom_out", f"pct={recipe.zoom_out_pct:g}"),
        ("bright", f"delta={recipe.brightness_delta:g}"),
        ("dark", f"delta={-recipe.darkness_delta:g}"),
        ("shear_x", f"factor={recipe.shear_x:g}"),
        ("shear_y", f"factor={recipe.shear_y:g}"),
    ]


def _apply(name: str, recipe: Recipe, img, boxes, seed: int):
    if name == "noise":
        return gaussian_noise(img, recipe.noise_sigma, seed), list(boxes)
    if name.startswith("rot"):
        return rotate(img, boxes, int(name[3:]))
    if name == "zoom_in":
        return zoom(img, boxes, recipe.zoom_in_pct / 100.0, "in")
    if name == "zoom_out":
        return zoom(img, boxes, recipe.zoom_out_pct / 100.0, "out")
    if name == "bright":
        return brightness(img, recipe.brightness_delta), list(boxes)
    if name == "dark":
        return brightness(img, -recipe.darkness_delta), list(boxes)
    if name == "shear_x":
        return shear(img, boxes, "x", recipe.shear_x)
    if name == "shear_y":
        return shear(img, boxes, "y", recipe.shear_y)
    raise UsageError(f"unknown variant {name!r}")


def augment_dataset(in_dir, out_dir, recipe: Recipe, seed: int) -> AugmentResult:
    """Expand every labelled image under in_dir into 11 outputs (original +
    VARIANT_NAMES) under out_dir, with transformed labels and a manifest.

    Unreadable inputs are skipped with a warning and counted; a geometric
    variant that would lose every box of an image is skipped and logged.
    """
    in_dir, out_dir = Path(in_dir), Path(out_dir)
    img_dir = in_dir / "images"
    if not img_dir.is_dir():
        raise UsageError(f"{in_dir}: no images/ directory")
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)

    rows: list[ManifestRow] = []
    inputs_ok = inputs_skipped = variants_skipped = 0
    for img_path in sorted(img_dir.glob("*.ppm")):
        label_path = in_dir / "labels" / f"{img_path.stem}.txt"
        try:
            img = load_image(img_path)
            boxes = parse_label_file(label_path) if label_path.exists() else None
            if boxes is None:
                raise UsageError(f"missing label file {label_path}")
        except (GridDetError, OSError) as e:
            log.warning("augment: skipping %s: %s", img_path.name, e)
            inputs_skipped += 1
            continue
        inputs_ok += 1
        stem = img_path.stem

        def emit(tag: str, out_img, out_boxes, op_name: str, params: str):
            out_name = f"{stem}__{tag}.ppm"
            write_ppm(out_dir / "images" / out_name, out_img)
            write_label_file(out_dir / "labels" / f"{stem}__{tag}.txt", out_boxes)
            rows.append(ManifestRow(f"images/{out_name}", str(img_path), op_name, params))

        emit("orig", img, boxes, "original", "")
        for name, params in _variants(recipe):
            out_img, out_boxes = _apply(name, recipe, img, boxes, _op_seed(seed, stem, name))
            if boxes and not out_boxes:
                log.warning("augment: %s/%s lost every box, variant skipped", stem, name)
                variants_skipped += 1
                continue
            emit(name, out_img, out_boxes, name, params)

    manifest_path = out_dir / "manifest.csv"
    with open(manifest_path, "w") as f:
        for r in rows:
            f.write(f"{r.output_path},{r.source_path},{r.op_name},{r.parameters}\n")
    return AugmentResult(manifest_path=manifest_path, rows=rows, inputs_processed=inputs_ok,
                         inputs_skipped=inputs_skipped, variants_skipped=variants_skipped)
