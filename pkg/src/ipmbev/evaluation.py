"""HD-map metrics: raster IoU, Chamfer-distance AP for polylines, generalization ratio and the corruption table."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.spatial.distance import cdist

from .synthworld import CLASS_NAMES, CorruptionSpec

FOREGROUND_CLASSES = (1, 2, 3)
AP_THRESHOLDS = (0.5, 1.0, 1.5)


# -- raster metrics -----------------------------------------------------------

def iou(pred, gt) -> float:
    """Intersection over union of two binary masks; 1 when both are empty."""
    p = np.asarray(pred).astype(bool)
    g = np.asarray(gt).astype(bool)
    if p.shape != g.shape:
        raise ValueError(f"iou: shape mismatch {p.shape} vs {g.shape}")
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


class IoUAccumulator:
    """Dataset-level IoU per class: summed intersections over summed unions."""

    def __init__(self, num_classes: int = 4, classes: Sequence[int] = FOREGROUND_CLASSES):
        self.num_classes = num_classes
        self.classes = tuple(classes)
        self.inter = np.zeros(num_classes, dtype=np.int64)
        self.union = np.zeros(num_classes, dtype=np.int64)

    def update(self, pred_labels, gt_labels) -> None:
        p = np.asarray(pred_labels)
        g = np.asarray(gt_labels)
        if p.shape != g.shape:
            raise ValueError(f"label maps differ in shape: {p.shape} vs {g.shape}")
        for c in range(self.num_classes):
            pc, gc = p == c, g == c
            self.inter[c] += np.count_nonzero(pc & gc)
            self.union[c] += np.count_nonzero(pc | gc)

    def per_class(self) -> dict[str, float]:
        out = {}
        for c in self.classes:
            out[CLASS_NAMES[c]] = 1.0 if self.union[c] == 0 else float(self.inter[c] / self.union[c])
        return out

    def miou(self) -> float:
        return float(np.mean(list(self.per_class().values())))


def class_iou(pred_labels, gt_labels, num_classes: int = 4) -> tuple[dict[str, float], float]:
    acc = IoUAccumulator(num_classes)
    acc.update(pred_labels, gt_labels)
    return acc.per_class(), acc.miou()


# -- polylines -------------------------------------------------------------------

@dataclass(frozen=True)
class VectorPrediction:
    class_id: int
    points: np.ndarray
    confidence: float = 1.0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError(f"polyline needs >= 2 (x, y) vertices, got shape {pts.shape}")
        if not np.isfinite(pts).all():
            raise ValueError("polyline has non-finite coordinates")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")
        object.__setattr__(self, "points", pts)

    def to_dict(self) -> dict:
        return {"class": int(self.class_id), "confidence": float(self.confidence),
                "points": self.points.tolist()}


def resample_polyline(points, k: int = 100) -> np.ndarray:
    """``k`` points equally spaced in arc length, endpoints included."""
    pts = np.asarray(points, dtype=np.float64)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] <= 0:
        raise ValueError("cannot resample a zero-length polyline")
    t = np.linspace(0.0, s[-1], k)
    return np.stack([np.interp(t, s, pts[:, 0]), np.interp(t, s, pts[:, 1])], axis=1)


def chamfer_distance(a, b, samples: int = 100) -> float:
    """Symmetric mean-of-nearest distance between two resampled polylines."""
    pa, pb = resample_polyline(a, samples), resample_polyline(b, samples)
    d = cdist(pa, pb)
    return 0.5 * (d.min(axis=1).mean() + d.min(axis=0).mean())


def _ap_from_flags(tp: np.ndarray, n_gt: int, interpolation: str) -> float:
    if interpolation not in ("area", "101"):
        raise ValueError(f"interpolation must be 'area' or '101', got {interpolation!r}")
    if n_gt == 0:
        return 1.0 if tp.size == 0 else 0.0
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    if interpolation == "101":
        pts = np.linspace(0.0, 1.0, 101)
        best = [precision[recall >= r].max() if np.any(recall >= r) else 0.0 for r in pts]
        return float(np.mean(best))
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    env = np.maximum.accumulate(mpre[::-1])[::-1]
    return float(np.sum((mrec[1:] - mrec[:-1]) * env[1:]))


def _confidence_order(preds: Sequence[VectorPrediction]) -> list[int]:
    return sorted(range(len(preds)), key=lambda i: -preds[i].confidence)


def match_predictions(preds: Sequence[VectorPrediction], gts: Sequence, tau: float,
                      samples: int = 100) -> np.ndarray:
    """Greedy confidence-ordered matching; returns TP flags in confidence order.

    Each prediction takes the nearest still-unmatched ground truth and is a
    true positive when that distance is below ``tau``.
    """
    order = _confidence_order(preds)
    gt_pts = [np.asarray(getattr(g, "points", g)) for g in gts]
    dist = np.array([[chamfer_distance(preds[i].points, g, samples) for g in gt_pts] for i in order])
    matched = np.zeros(len(gt_pts), dtype=bool)
    flags = np.zeros(len(order), dtype=np.float64)
    for rank in range(len(order)):
        if matched.all():
            break
        d = np.where(matched, np.inf, dist[rank])
        best = int(np.argmin(d))
        if d[best] < tau:
            matched[best] = True
            flags[rank] = 1.0
    return flags


@dataclass
class APResult:
    per_threshold: dict[str, dict[float, float]]
    per_class: dict[str, float]
    mAP: float


def average_precision_scenes(pairs: Iterable[tuple[Sequence, Sequence]], thresholds=AP_THRESHOLDS,
                             classes=FOREGROUND_CLASSES, interpolation: str = "area",
                             samples: int = 100) -> APResult:
    """AP over several scenes: matching is per scene, detections are ranked jointly by confidence."""
    pairs = [(list(p), list(g)) for p, g in pairs]
    per_t, per_c = {}, {}
    for c in classes:
        name = CLASS_NAMES[c]
        per_t[name] = {}
        for t in thresholds:
            conf, flags, n_gt = [], [], 0
            for preds, gts in pairs:
                pc = [p for p in preds if p.class_id == c]
                gc = [g for g in gts if g.class_id == c]
                n_gt += len(gc)
                conf.extend(pc[i].confidence for i in _confidence_order(pc))
                flags.append(match_predictions(pc, gc, t, samples))
            fl = np.concatenate(flags) if flags else np.zeros(0)
            order = np.argsort(-np.asarray(conf, dtype=np.float64), kind="stable")
            per_t[name][float(t)] = _ap_from_flags(fl[order], n_gt, interpolation)
        per_c[name] = float(np.mean(list(per_t[name].values())))
    return APResult(per_t, per_c, float(np.mean(list(per_c.values()))))


def average_precision(preds: Iterable[VectorPrediction], gts: Iterable, thresholds=AP_THRESHOLDS,
                      classes=FOREGROUND_CLASSES, interpolation: str = "area", samples: int = 100) -> APResult:
    """Per-class AP averaged over Chamfer thresholds, and the class mean.

    ``gts`` items need ``class_id`` and ``points``. A class with neither
    ground truth nor predictions scores 1 (vacuous agreement). ``"area"``
    integrates the precision envelope over recall steps; ``"101"`` averages
    it at 101 recall points.
    """
    return average_precision_scenes([(preds, gts)], thresholds, classes, interpolation, samples)


def generalization_ratio(m_cross: float, m_source: float) -> float:
    """Cross-domain metric relative to the in-domain metric."""
    if not m_source > 0:
        raise ValueError(f"source metric must be positive, got {m_source}")
    return m_cross / m_source


# -- vector files ---------------------------------------------------------------------

def save_vectors(path, preds: Iterable[VectorPrediction]) -> None:
    Path(path).write_text(json.dumps([p.to_dict() for p in preds], indent=1), encoding="utf-8")


def load_vectors(path) -> list[VectorPrediction]:
    """Read ``[{class, confidence, points}, ...]``; raises ``ValueError`` naming the bad entry."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(raw, list):
        raise ValueError("vectors: expected a JSON list")
    out = []
    for k, d in enumerate(raw):
        try:
            out.append(VectorPrediction(int(d["class"]), np.asarray(d["points"], float),
                                        float(d.get("confidence", 1.0))))
        except (KeyError, TypeError, ValueError) as e:
            raise ValueError(f"vectors[{k}]: {e}") from None
    return out


# -- reports ------------------------------------------------------------------------------

@dataclass
class EvalReport:
    per_class_iou: dict[str, float] = field(default_factory=dict)
    miou: float | None = None
    per_class_ap: dict[str, float] = field(default_factory=dict)
    mAP: float | None = None
    generalization: float | None = None
    cvml: dict[str, float] = field(default_factory=dict)
    corruption: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"per_class_iou": self.per_class_iou, "mIoU": self.miou, "per_class_ap": self.per_class_ap,
                "mAP": self.mAP, "generalization_ratio": self.generalization, "cvml": self.cvml,
                "corruption": self.corruption}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "name", "value"])
        for k, v in self.per_class_iou.items():
            w.writerow(["iou", k, f"{v:.6f}"])
        if self.miou is not None:
            w.writerow(["iou", "mean", f"{self.miou:.6f}"])
        for k, v in self.per_class_ap.items():
            w.writerow(["ap", k, f"{v:.6f}"])
        if self.mAP is not None:
            w.writerow(["ap", "mean", f"{self.mAP:.6f}"])
        if self.generalization is not None:
            w.writerow(["generalization_ratio", "", f"{self.generalization:.6f}"])
        for k, v in self.cvml.items():
            w.writerow(["cvml", k, f"{v:.6f}"])
        for row in self.corruption:
            w.writerow(["corruption", f"{row['kind']}@{row['severity']}", f"{row['mIoU']:.6f}"])
        return buf.getvalue()

    def save(self, directory, stem: str = "eval") -> tuple[Path, Path]:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        pj, pc = d / f"{stem}.json", d / f"{stem}.csv"
        pj.write_text(self.to_json(), encoding="utf-8")
        pc.write_text(self.to_csv(), encoding="utf-8")
        return pj, pc


def corruption_specs(kinds=("brightness", "camera_crash", "frame_lost", "gaussian_noise"),
                     severities=(0.0, 0.5, 1.0), rng_seed: int = 0) -> list[CorruptionSpec]:
    return [CorruptionSpec(k, float(s), rng_seed) for k in kinds for s in severities]


def corruption_sweep(evaluate_fn: Callable[[CorruptionSpec | None], dict], specs: Sequence[CorruptionSpec]) -> list[dict]:
    """One clean row, then one row per spec. ``evaluate_fn(spec)`` returns a dict with ``mIoU``."""
    rows = [dict(kind="clean", severity=0.0, **evaluate_fn(None))]
    for spec in specs:
        rows.append(dict(kind=spec.kind, severity=float(spec.severity), **evaluate_fn(spec)))
    return rows
