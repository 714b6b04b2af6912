"""Segmentation metrics and the line-oriented metric report."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata


@dataclass
class Counts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __add__(self, other: "Counts") -> "Counts":
        return Counts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    @property
    def iou(self) -> float:
        denom = self.tp + self.fp + self.fn
        return 1.0 if denom == 0 else self.tp / denom


def _binary_pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(getattr(pred, "values", pred)).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    return p, g


def confusion(pred, gt) -> Counts:
    p, g = _binary_pair(pred, gt)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return Counts(tp, fp, fn, p.size - tp - fp - fn)


def iou(pred, gt) -> float:
    """TP / (TP + FP + FN); 1.0 when both masks are empty."""
    return confusion(pred, gt).iou


def miou(values) -> float:
    vals = list(values.values()) if isinstance(values, dict) else list(values)
    if not vals:
        raise ValueError("miou needs at least one class")
    return float(sum(vals) / len(vals))


def pixel_auroc(scores, gt) -> float:
    """Mann-Whitney AUROC with midranks for ties."""
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    g = np.asarray(gt).astype(bool).reshape(-1)
    if s.shape != g.shape:
        raise ValueError(f"scores {s.shape} and labels {g.shape} differ in size")
    n_pos = int(g.sum())
    n_neg = g.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC needs at least one positive and one negative pixel")
    ranks = rankdata(s)
    u = ranks[g].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MetricReport:
    per_class_iou: dict[str, float]
    miou: float
    pixel_auroc: float | None
    counts: dict[str, Counts]
    config_fingerprint: str = ""
    seed: int | None = None
    images: int = 0

    def format(self) -> str:
        """``key = value`` lines (sorted) followed by a tab-separated per-class table."""
        head = {
            "classes": len(self.per_class_iou),
            "config_fingerprint": self.config_fingerprint or "-",
            "images": self.images,
            "miou": f"{self.miou:.6f}",
            "pixel_auroc": "nan" if self.pixel_auroc is None else f"{self.pixel_auroc:.6f}",
            "seed": "-" if self.seed is None else self.seed,
        }
        lines = [f"{k} = {head[k]}" for k in sorted(head)]
        lines.append("")
        lines.append("class\tiou\ttp\tfp\tfn\ttn")
        for tag in sorted(self.per_class_iou):
            c = self.counts[tag]
            lines.append(f"{tag}\t{self.per_class_iou[tag]:.6f}\t{c.tp}\t{c.fp}\t{c.fn}\t{c.tn}")
        return "\n".join(lines) + "\n"


def evaluate(preds: list[np.ndarray], gts: list[np.ndarray], tags: list[str],
             scores: list[np.ndarray] | None = None, per_image: bool = False,
             include_normal: bool = False, config_fingerprint: str = "",
             seed: int | None = None) -> MetricReport:
    """Group images by class tag and score each class.

    Pooled mode sums the confusion counts of a class before dividing;
    ``per_image`` averages per-image IoUs instead.  Untagged images form a
    ``normal`` class only when ``include_normal`` is set; AUROC always uses
    every pixel.
    """
    if not (len(preds) == len(gts) == len(tags)):
        raise ValueError("preds, gts and tags must have equal length")
    counts: dict[str, Counts] = {}
    per_img: dict[str, list[float]] = {}
    for p, g, tag in zip(preds, gts, tags):
        if not tag and not include_normal:
            continue
        tag = tag or "normal"
        c = confusion(p, g)
        counts[tag] = counts.get(tag, Counts()) + c
        per_img.setdefault(tag, []).append(c.iou)
    if per_image:
        ious = {t: float(np.mean(v)) for t, v in per_img.items()}
    else:
        ious = {t: c.iou for t, c in counts.items()}
    auroc = None
    if scores is not None:
        flat_s = np.concatenate([np.asarray(s).reshape(-1) for s in scores])
        flat_g = np.concatenate([np.asarray(g).reshape(-1) for g in gts]).astype(bool)
        if flat_g.any() and not flat_g.all():
            auroc = pixel_auroc(flat_s, flat_g)
    return MetricReport(ious, miou(ious) if ious else float("nan"), auroc, counts,
                        config_fingerprint, seed, len(preds))
