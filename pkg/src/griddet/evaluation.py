"""Centroid-based detection evaluation.

A detection counts toward a truth when its box center lies inside that
truth's region (mask containment when a mask exists, point-in-box
otherwise). Multiple detections landing in the same truth contribute a
single TP; detections inside no truth are each one FP; unhit truths are
each one FN; a frame with neither truths nor detections is one TN.

Metrics (percent except dice): precision = TP/(TP+FP)*100, sensitivity =
TP/(TP+FN)*100, F1 = 2*Pre*Sen/(Pre+Sen), F2 = 5*Pre*Sen/(4*Pre+Sen),
dice = 2TP/(2TP+FP+FN). Zero denominators make a metric undefined, which
serializes as the literal token NA.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import model as M
from . import tensor as T
from .boxes import BBox
from .data import Sample, load_image, read_mask, resize_image
from .errors import UsageError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)


@dataclass(frozen=True)
class GroundTruthRegion:
    """Either a binary mask or a box; exactly one per object per frame."""

    mask: np.ndarray | None = None
    box: BBox | None = None

    def __post_init__(self):
        if (self.mask is None) == (self.box is None):
            raise UsageError("ground truth region needs exactly one of mask or box")
        if self.mask is not None and not self.mask.any():
            raise UsageError("empty ground truth mask")

    def contains(self, cx: float, cy: float) -> bool:
        """Point test in normalized image coordinates."""
        if self.mask is not None:
            h, w = self.mask.shape
            col = min(w - 1, max(0, int(cx * w)))
            row = min(h - 1, max(0, int(cy * h)))
            return bool(self.mask[row, col])
        x1, y1, x2, y2 = self.box.corners()
        return x1 <= cx <= x2 and y1 <= cy <= y2


def match_frame(detections, truths) -> ConfusionCounts:
    """Apply the centroid counting rules to one frame.

    Detections must already be NMS-filtered. Counts are invariant to the
    order of the detections.
    """
    if not truths:
        if not detections:
            return ConfusionCounts(tn=1)
        return ConfusionCounts(fp=len(detections))
    hit = [False] * len(truths)
    fp = 0
    for d in detections:
        inside = [i for i, t in enumerate(truths) if t.contains(d.cx, d.cy)]
        if inside:
            for i in inside:
                hit[i] = True
        else:
            fp += 1
    tp = sum(hit)
    return ConfusionCounts(tp=tp, fp=fp, fn=len(truths) - tp)


# ---------------------------------------------------------------------------
# metrics

def precision(c: ConfusionCounts):
    return 100.0 * c.tp / (c.tp + c.fp) if c.tp + c.fp > 0 else None


def sensitivity(c: ConfusionCounts):
    return 100.0 * c.tp / (c.tp + c.fn) if c.tp + c.fn > 0 else None


def f1(c: ConfusionCounts):
    p, s = precision(c), sensitivity(c)
    if p is None or s is None:
        return None
    return 2.0 * p * s / (p + s) if p + s > 0 else 0.0


def f2(c: ConfusionCounts):
    p, s = precision(c), sensitivity(c)
    if p is None or s is None:
        return None
    return 5.0 * p * s / (4.0 * p + s) if 4.0 * p + s > 0 else 0.0


def dice(c: ConfusionCounts):
    denom = 2 * c.tp + c.fp + c.fn
    return 2.0 * c.tp / denom if denom > 0 else None


@dataclass(frozen=True)
class MetricReport:
    counts: ConfusionCounts
    precision: float | None
    sensitivity: float | None
    f1: float | None
    f2: float | None
    dice: float | None

    @classmethod
    def from_counts(cls, c: ConfusionCounts) -> "MetricReport":
        return cls(counts=c, precision=precision(c), sensitivity=sensitivity(c),
                   f1=f1(c), f2=f2(c), dice=dice(c))


def _fmt(value, places: int) -> str:
    return "NA" if value is None else f"{value:.{places}f}"


def format_report(r: MetricReport) -> str:
    c = r.counts
    lines = [
        f"TP           {c.tp}",
        f"TN           {c.tn}",
        f"FP           {c.fp}",
        f"FN           {c.fn}",
        f"Precision    {_fmt(r.precision, 2)}",
        f"Sensitivity  {_fmt(r.sensitivity, 2)}",
        f"F1-score     {_fmt(r.f1, 2)}",
        f"F2-score     {_fmt(r.f2, 2)}",
        f"Dice         {_fmt(r.dice, 4)}",
    ]
    return "\n".join(lines)


def report_csv_line(r: MetricReport) -> str:
    c = r.counts
    return ",".join([str(c.tp), str(c.tn), str(c.fp), str(c.fn),
                     _fmt(r.precision, 2), _fmt(r.sensitivity, 2),
                     _fmt(r.f1, 2), _fmt(r.f2, 2), _fmt(r.dice, 4)])


# ---------------------------------------------------------------------------
# whole-set evaluation

def truth_regions(sample: Sample) -> list[GroundTruthRegion]:
    """Mask regions when the sample has a mask file, label boxes otherwise.

    A mask is split per labelled box (pixels inside the box) so multiple
    objects in one mask stay separate truths; an unlabelled nonempty mask
    becomes a single region.
    """
    if sample.mask_path is None:
        return [GroundTruthRegion(box=b) for b in sample.boxes]
    mask = read_mask(sample.mask_path)
    if not sample.boxes:
        return [GroundTruthRegion(mask=mask)] if mask.any() else []
    h, w = mask.shape
    regions = []
    for b in sample.boxes:
        x1, y1, x2, y2 = b.corners()
        sub = np.zeros_like(mask)
        r0, r1 = max(0, int(np.floor(y1 * h))), min(h, int(np.ceil(y2 * h)))
        c0, c1 = max(0, int(np.floor(x1 * w))), min(w, int(np.ceil(x2 * w)))
        sub[r0:r1, c0:c1] = mask[r0:r1, c0:c1]
        regions.append(GroundTruthRegion(mask=sub) if sub.any() else GroundTruthRegion(box=b))
    return regions


def evaluate(network: M.Network, samples, conf_threshold: float = 0.25,
             nms_threshold: float = 0.45) -> MetricReport:
    """Run detect on every sample, accumulate match_frame counts."""
    samples = list(samples)
    if not samples:
        raise UsageError("evaluation set is empty")
    size = network.config.input_size
    total = ConfusionCounts()
    for s in samples:
        img = resize_image(load_image(s.image_path), size, size)
        x = T.Tensor((img.astype(np.float32) / 255.0).transpose(2, 0, 1)[None])
        dets = M.detect(network, x, conf_threshold, nms_threshold)
        total = total + match_frame(dets, truth_regions(s))
    return MetricReport.from_counts(total)
