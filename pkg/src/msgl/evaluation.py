"""Classification metrics, one-vs-rest ROC, boundary error analysis and report files."""

from __future__ import annotations

import csv
import json
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence, Union
from xml.etree import ElementTree as ET

import numpy as np

from msgl.errors import UsageError

NEAR_DISTANCE = 5
FAR_DISTANCE = 10
UNBOUNDED = "inf"


# --------------------------------------------------------------------- confusion / report

def compute_confusion(y_true, y_pred, C: int) -> np.ndarray:
    """C x C integer counts; rows are true classes, columns predictions."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise UsageError(f"label sequences differ in shape: {y_true.shape} vs {y_pred.shape}")
    for name, y in (("y_true", y_true), ("y_pred", y_pred)):
        if y.size and (y.min() < 0 or y.max() >= C):
            raise UsageError(f"{name} has entries outside [0, {C})")
    return np.bincount(y_true * C + y_pred, minlength=C * C).reshape(C, C)


def _safe_ratio(num: np.ndarray, den: np.ndarray, what: str, names: Sequence[str]) -> np.ndarray:
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    empty = den == 0
    if empty.any():
        warnings.warn(
            f"{what} undefined for {[names[i] for i in np.flatnonzero(empty)]}; reported as 0",
            RuntimeWarning, stacklevel=3,
        )
    return np.divide(num, den, out=np.zeros_like(num), where=~empty)


@dataclass
class ClassReport:
    classes: list[str]
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    support: np.ndarray
    accuracy: float
    weighted: dict[str, float]
    macro_recall: float

    def per_class(self) -> dict[str, dict]:
        return {
            c: {
                "precision": float(self.precision[i]), "recall": float(self.recall[i]),
                "f1": float(self.f1[i]), "support": int(self.support[i]),
            }
            for i, c in enumerate(self.classes)
        }


def class_report(cm, classes: Optional[Sequence[str]] = None) -> ClassReport:
    cm = np.asarray(cm, dtype=np.int64)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] == 0:
        raise UsageError(f"confusion matrix must be square and non-empty, got {cm.shape}")
    total = int(cm.sum())
    if total == 0:
        raise UsageError("confusion matrix holds no samples")
    C = cm.shape[0]
    names = list(classes) if classes is not None else [str(i) for i in range(C)]
    tp = np.diag(cm)
    support = cm.sum(axis=1)
    predicted = cm.sum(axis=0)
    precision = _safe_ratio(tp, predicted, "precision", names)
    recall = _safe_ratio(tp, support, "recall", names)
    pr = precision + recall
    f1 = np.divide(2 * precision * recall, pr, out=np.zeros(C), where=pr > 0)
    w = support / total
    weighted = {
        "precision": float((w * precision).sum()),
        # support * recall_c is TP_c for every class with support, so the
        # support-weighted recall is the accuracy; computing it that way keeps
        # the identity exact in floating point
        "recall": float(tp.sum() / total),
        "f1": float((w * f1).sum()),
    }
    return ClassReport(
        classes=names, precision=precision, recall=recall, f1=f1, support=support,
        accuracy=float(tp.sum() / total), weighted=weighted, macro_recall=float(recall.mean()),
    )


def avg_per_class_accuracy(cm) -> float:
    """Unweighted mean of per-class recalls; every class needs support."""
    cm = np.asarray(cm, dtype=np.int64)
    support = cm.sum(axis=1)
    if (support == 0).any():
        raise UsageError(f"class(es) {np.flatnonzero(support == 0).tolist()} have no samples")
    return float((np.diag(cm) / support).mean())


# --------------------------------------------------------------------- ROC

@dataclass
class RocCurve:
    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray


def roc_auc(y_true, scores, c: int) -> tuple[RocCurve, float]:
    """One-vs-rest ROC for class ``c`` with thresholds at +inf, each distinct
    score (descending) and -inf; AUC by the trapezoid rule."""
    y_true = np.asarray(y_true)
    scores = np.asarray(scores, dtype=np.float64)
    s = scores[:, c] if scores.ndim == 2 else scores
    pos = y_true == c
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UsageError(f"AUC for class {c} is undefined: needs both positive and negative samples")
    order = np.argsort(-s, kind="stable")
    s_sorted, pos_sorted = s[order], pos[order]
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    tp = np.cumsum(pos_sorted)[ends]
    fp = (ends + 1) - tp
    tpr = np.r_[0.0, tp / n_pos, 1.0]
    fpr = np.r_[0.0, fp / n_neg, 1.0]
    thresholds = np.r_[np.inf, s_sorted[ends], -np.inf]
    auc = float(np.sum((fpr[1:] - fpr[:-1]) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(thresholds, fpr, tpr), auc


# --------------------------------------------------------------------- boundary analysis

def transition_frames(labels) -> np.ndarray:
    """Frames whose label differs from the previous frame's."""
    labels = np.asarray(labels)
    return np.flatnonzero(labels[1:] != labels[:-1]) + 1


def distance_to_transition(labels, frames) -> np.ndarray:
    """Frames to the nearest transition of ``labels``; -1 if there is none."""
    trans = transition_frames(labels)
    frames = np.asarray(frames, dtype=np.int64)
    if trans.size == 0:
        return np.full(frames.shape, -1, dtype=np.int64)
    pos = np.searchsorted(trans, frames)
    right = np.abs(trans[np.minimum(pos, trans.size - 1)] - frames)
    left = np.abs(frames - trans[np.maximum(pos - 1, 0)])
    return np.minimum(left, right)


@dataclass
class BoundaryReport:
    bins: dict  # distance (int) or "inf" -> (samples, correct)
    transitions: int
    at_transition: Optional[float]
    near: Optional[float]
    far: Optional[float]
    per_class: dict[str, dict[str, Optional[float]]]
    error_pairs: dict[tuple[str, str], int] = field(default_factory=dict)

    def accuracy(self, key) -> float:
        n, k = self.bins[key]
        return k / n

    @property
    def total(self) -> int:
        return sum(n for n, _ in self.bins.values())

    def rows(self) -> list[tuple]:
        keys = sorted(k for k in self.bins if k != UNBOUNDED)
        if UNBOUNDED in self.bins:
            keys.append(UNBOUNDED)
        return [(k, self.bins[k][0], self.accuracy(k)) for k in keys]

    def to_dict(self) -> dict:
        return {
            "transitions": self.transitions,
            "at_transition": self.at_transition,
            "near": self.near,
            "far": self.far,
            "per_class": self.per_class,
            "bins": [{"distance": k, "samples": n, "accuracy": a} for k, n, a in self.rows()],
            "error_pairs": [
                {"true": t, "pred": p, "count": n}
                for (t, p), n in sorted(self.error_pairs.items(), key=lambda kv: (-kv[1], kv[0]))
            ],
        }


def _acc(correct: np.ndarray, mask: np.ndarray) -> Optional[float]:
    n = int(mask.sum())
    return float(correct[mask].sum() / n) if n else None


def boundary_analysis(
    ground_truth: Mapping[str, Sequence],
    origins: Sequence[tuple[str, int]],
    y_true,
    y_pred,
    classes: Sequence[str],
) -> BoundaryReport:
    """Accuracy as a function of the distance between a window's final frame
    and the nearest behaviour transition of its video.

    ``ground_truth`` maps video id to the full per-frame label stream
    (including classes that were not evaluated); ``origins`` gives the
    (video id, end frame) of each evaluated window. Windows in videos without
    any transition land in the ``"inf"`` bin, which counts as far.
    """
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    if not (len(origins) == len(y_true) == len(y_pred)):
        raise UsageError("origins, y_true and y_pred must have equal length")
    distance = np.empty(len(origins), dtype=np.int64)
    vids = np.array([o[0] for o in origins], dtype=object)
    ends = np.array([o[1] for o in origins], dtype=np.int64)
    transitions = 0
    for vid, labels in ground_truth.items():
        transitions += int(transition_frames(labels).size)
    for vid in dict.fromkeys(vids.tolist()):
        if vid not in ground_truth:
            raise UsageError(f"no ground truth for video {vid!r}")
        sel = vids == vid
        distance[sel] = distance_to_transition(ground_truth[vid], ends[sel])

    correct = y_true == y_pred
    bins: dict = {}
    for d in np.unique(distance):
        mask = distance == d
        bins[UNBOUNDED if d < 0 else int(d)] = (int(mask.sum()), int(correct[mask].sum()))
    bounded = distance >= 0
    near = bounded & (distance <= NEAR_DISTANCE)
    far = ~bounded | (distance > FAR_DISTANCE)
    per_class = {}
    for i, c in enumerate(classes):
        m = y_true == i
        per_class[c] = {"near": _acc(correct, m & near), "far": _acc(correct, m & far)}
    pairs = Counter(
        (classes[t], classes[p]) for t, p in zip(y_true[near & ~correct], y_pred[near & ~correct])
    )
    return BoundaryReport(
        bins=bins, transitions=transitions, at_transition=_acc(correct, bounded & (distance == 0)),
        near=_acc(correct, near), far=_acc(correct, far), per_class=per_class, error_pairs=dict(pairs),
    )


# --------------------------------------------------------------------- report files

def metrics_document(
    dataset: str,
    split: str,
    report: ClassReport,
    aucs: Mapping[str, Optional[float]],
    cm: Optional[np.ndarray] = None,
    boundary: Optional[BoundaryReport] = None,
) -> dict:
    doc = {
        "dataset": dataset,
        "split": split,
        "per_class": report.per_class(),
        "accuracy": report.accuracy,
        "weighted": dict(report.weighted),
        "macro_recall": report.macro_recall,
        "auc": {c: aucs.get(c) for c in report.classes},
    }
    if cm is not None:
        doc["confusion"] = np.asarray(cm).tolist()
    if boundary is not None:
        doc["boundary"] = boundary.to_dict()
    return doc


def load_class_report(path: Union[str, Path]) -> ClassReport:
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    classes = list(doc["per_class"])
    col = lambda k: np.array([doc["per_class"][c][k] for c in classes])  # noqa: E731
    return ClassReport(
        classes=classes, precision=col("precision").astype(float), recall=col("recall").astype(float),
        f1=col("f1").astype(float), support=col("support").astype(np.int64), accuracy=doc["accuracy"],
        weighted=doc["weighted"], macro_recall=doc["macro_recall"],
    )


def _svg_line_plot(
    series: Sequence[tuple[str, np.ndarray, np.ndarray]],
    x_label: str,
    y_label: str,
    x_range: tuple[float, float],
    y_range: tuple[float, float] = (0.0, 1.0),
) -> ET.ElementTree:
    width, height, margin = 480, 360, 50
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2"]
    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(width), height=str(height),
                     viewBox=f"0 0 {width} {height}")
    pw, ph = width - 2 * margin, height - 2 * margin
    x0, x1 = x_range
    y0, y1 = y_range
    sx = lambda x: margin + (x - x0) / ((x1 - x0) or 1.0) * pw  # noqa: E731
    sy = lambda y: height - margin - (y - y0) / ((y1 - y0) or 1.0) * ph  # noqa: E731
    ET.SubElement(svg, "rect", x=str(margin), y=str(margin), width=str(pw), height=str(ph),
                  fill="none", stroke="black")
    ET.SubElement(svg, "text", x=str(width / 2), y=str(height - 12), attrib={"text-anchor": "middle"}).text = x_label
    ET.SubElement(svg, "text", x="14", y=str(height / 2), attrib={"text-anchor": "middle"},
                  transform=f"rotate(-90 14 {height / 2})").text = y_label
    for v, anchor in ((x0, "start"), (x1, "end")):
        ET.SubElement(svg, "text", x=f"{sx(v):.1f}", y=str(height - margin + 14),
                      attrib={"text-anchor": anchor, "font-size": "10"}).text = f"{v:g}"
    for v in (y0, y1):
        ET.SubElement(svg, "text", x=str(margin - 4), y=f"{sy(v):.1f}",
                      attrib={"text-anchor": "end", "font-size": "10"}).text = f"{v:g}"
    for k, (name, xs, ys) in enumerate(series):
        colour = palette[k % len(palette)]
        pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
        ET.SubElement(svg, "polyline", points=pts, fill="none", stroke=colour, attrib={"stroke-width": "1.5"})
        ET.SubElement(svg, "text", x=str(margin + 8), y=str(margin + 14 + 13 * k),
                      fill=colour, attrib={"font-size": "11"}).text = name
    return ET.ElementTree(svg)


def _write_csv(path: Path, header: Sequence[str], rows) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc


def emit_report(
    out_dir: Union[str, Path],
    dataset: str,
    split: str,
    cm: np.ndarray,
    report: ClassReport,
    curves: Mapping[str, tuple[RocCurve, float]],
    boundary: Optional[BoundaryReport] = None,
    svg: bool = True,
) -> dict:
    """Write metrics.json, confusion.csv, roc_<class>.csv, boundary.csv (when a
    boundary report is given) and the SVG plots. Returns the metrics document."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create report directory {out}: {exc}") from exc
    aucs = {c: curves[c][1] if c in curves else None for c in report.classes}
    doc = metrics_document(dataset, split, report, aucs, cm, boundary)
    try:
        (out / "metrics.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    except OSError as exc:
        raise OSError(f"cannot write {out / 'metrics.json'}: {exc}") from exc
    _write_csv(out / "confusion.csv", ["true\\pred", *report.classes],
               [[c, *map(int, row)] for c, row in zip(report.classes, np.asarray(cm))])
    for c, (curve, _) in curves.items():
        rows = [[repr(float(t)), repr(float(f)), repr(float(p))]
                for t, f, p in zip(curve.thresholds, curve.fpr, curve.tpr)]
        _write_csv(out / f"roc_{_slug(c)}.csv", ["threshold", "fpr", "tpr"], rows)
    if boundary is not None:
        _write_csv(out / "boundary.csv", ["distance", "samples", "accuracy"],
                   [[k, n, repr(float(a))] for k, n, a in boundary.rows()])
    if svg:
        if curves:
            tree = _svg_line_plot([(c, cv.fpr, cv.tpr) for c, (cv, _) in curves.items()],
                                  "false positive rate", "true positive rate", (0.0, 1.0))
            tree.write(out / "roc.svg", encoding="utf-8", xml_declaration=True)
        if boundary is not None:
            finite = [(k, a) for k, _, a in boundary.rows() if k != UNBOUNDED]
            if finite:
                xs = np.array([k for k, _ in finite], dtype=float)
                ys = np.array([a for _, a in finite])
                tree = _svg_line_plot([("accuracy", xs, ys)], "frames to nearest transition", "accuracy",
                                      (0.0, max(float(xs.max()), 1.0)))
                tree.write(out / "boundary.svg", encoding="utf-8", xml_declaration=True)
    return doc


def _slug(name: str) -> str:
    return "".join(ch if ch.isalnum() else "_" for ch in name)

