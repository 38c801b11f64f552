"""Detection mAP over tIoU thresholds, segmentation mAP, window assembly, reports."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import ActionInstance
from .errors import EmptyInputError

log = logging.getLogger(__name__)

THRESHOLDS = tuple(round(0.1 * k, 1) for k in range(1, 10))


@dataclass
class Detections:
    """Predictions of one video or window: intervals (N, 2) and class scores (N, C)."""
    intervals: np.ndarray
    scores: np.ndarray

    def __len__(self):
        return self.intervals.shape[0]


@dataclass
class EvalReport:
    per_threshold_map: dict[float, float]
    average_map: float
    per_class_ap: np.ndarray            # thresholds x classes, NaN for classes without GT
    seg_map: float | None = None
    extra: dict = field(default_factory=dict)

    def metrics(self) -> dict[str, float]:
        out = {f"det_map@{t:.1f}": v for t, v in self.per_threshold_map.items()}
        out["det_map_avg"] = self.average_map
        if self.seg_map is not None:
            out["seg_map"] = self.seg_map
        out.update(self.extra)
        return out


def assemble_predictions(window_preds: Sequence[tuple[str, float, float, Detections]]
                         ) -> dict[str, Detections]:
    """Map window-normalized detections to global seconds and concatenate per video.

    Entries are (video_id, window offset seconds, window span seconds, detections).
    Nothing is merged or suppressed.
    """
    grouped: dict[str, list[Detections]] = {}
    for vid, offset, span, det in window_preds:
        iv = offset + np.asarray(det.intervals, dtype=np.float64) * span
        grouped.setdefault(vid, []).append(Detections(iv, np.asarray(det.scores, dtype=np.float64)))
    return {vid: Detections(np.concatenate([d.intervals for d in ds]).reshape(-1, 2),
                            np.concatenate([d.scores for d in ds]))
            for vid, ds in grouped.items()}


def interpolated_ap(precision: np.ndarray, recall: np.ndarray) -> float:
    """All-point interpolated AP from precision/recall at successive cut-offs."""
    if len(precision) == 0:
        return 0.0
    mprec = np.concatenate([[0.0], precision, [0.0]])
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mprec = np.maximum.accumulate(mprec[::-1])[::-1]
    return float(np.sum((mrec[1:] - mrec[:-1]) * mprec[1:]))


def _interval_iou(iv: np.ndarray, gts: np.ndarray) -> np.ndarray:
    inter = np.clip(np.minimum(iv[1], gts[:, 1]) - np.maximum(iv[0], gts[:, 0]), 0, None)
    union = (iv[1] - iv[0]) + (gts[:, 1] - gts[:, 0]) - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
    same = (gts[:, 0] == iv[0]) & (gts[:, 1] == iv[1]) & (union <= 0)
    return np.where(same, 1.0, out)


def class_ap(preds: Mapping[str, Detections], gts: Mapping[str, Sequence[ActionInstance]],
             cls: int, thresholds: Sequence[float]) -> np.ndarray:
    """AP of one class at each threshold (greedy matching in descending score order)."""
    gt_by_video = {vid: np.array([[a.start, a.end] for a in anns if a.label == cls]).reshape(-1, 2)
                   for vid, anns in gts.items()}
    npos = sum(len(g) for g in gt_by_video.values())
    entries = []   # (score, video, interval)
    for vid, det in preds.items():
        for k in range(len(det)):
            entries.append((float(det.scores[k, cls]), vid, det.intervals[k]))
    order = sorted(range(len(entries)), key=lambda i: -entries[i][0])   # stable
    ious = []
    for i in order:
        _, vid, iv = entries[i]
        g = gt_by_video.get(vid, np.zeros((0, 2)))
        ious.append((vid, _interval_iou(np.asarray(iv, dtype=np.float64), g) if len(g) else np.zeros(0)))
    aps = np.zeros(len(thresholds))
    for ti, thr in enumerate(thresholds):
        taken = {vid: np.zeros(len(g), dtype=bool) for vid, g in gt_by_video.items()}
        tp = np.zeros(len(order))
        for r, (vid, iou) in enumerate(ious):
            if not len(iou):
                continue
            cand = np.where(taken[vid], -1.0, iou)
            j = int(np.argmax(cand))
            if cand[j] >= thr:
                taken[vid][j] = True
                tp[r] = 1
        ctp = np.cumsum(tp)
        cfp = np.cumsum(1 - tp)
        aps[ti] = interpolated_ap(ctp / np.maximum(ctp + cfp, 1e-12), ctp / npos)
    return aps


def det_map(preds: Mapping[str, Detections], gts: Mapping[str, Sequence[ActionInstance]],
            num_classes: int, thresholds: Sequence[float] = THRESHOLDS) -> EvalReport:
    """Detection mAP per threshold and averaged, over classes that have ground truth."""
    counts = np.zeros(num_classes, dtype=np.int64)
    for anns in gts.values():
        for a in anns:
            counts[a.label] += 1
    if counts.sum() == 0:
        raise EmptyInputError("no ground-truth instances: mAP is undefined")
    table = np.full((len(thresholds), num_classes), np.nan)
    for c in np.flatnonzero(counts):
        table[:, c] = class_ap(preds, gts, int(c), thresholds)
    per_thr = {float(t): float(np.nanmean(table[i])) for i, t in enumerate(thresholds)}
    return EvalReport(per_thr, float(np.mean(list(per_thr.values()))), table)


def ranked_ap(scores: np.ndarray, labels: np.ndarray) -> float:
    """AP of a ranking where equal scores form one cut-off; zero scores are not retrieved."""
    npos = int(labels.sum())
    keep = scores > 0
    s, y = scores[keep], labels[keep]
    if npos == 0 or len(s) == 0:
        return 0.0
    order = np.argsort(-s, kind="stable")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    ctp = np.cumsum(y)[last]
    cnt = last + 1
    return interpolated_ap(ctp / cnt, ctp / npos)


def dense_scores(det: Detections, n_frames: int, frame_rate: float) -> np.ndarray:
    t = (np.arange(n_frames) + 0.5) / frame_rate
    C = det.scores.shape[1]
    out = np.zeros((n_frames, C))
    for k in range(len(det)):
        s, e = det.intervals[k]
        cover = (t >= s) & (t < e)
        if cover.any():
            out[cover] = np.maximum(out[cover], det.scores[k][None, :])
    return out


def dense_labels(anns: Sequence[ActionInstance], n_frames: int, frame_rate: float,
                 num_classes: int) -> np.ndarray:
    t = (np.arange(n_frames) + 0.5) / frame_rate
    out = np.zeros((n_frames, num_classes), dtype=bool)
    for a in anns:
        out[(t >= a.start) & (t < a.end), a.label] = True
    return out


def seg_map(preds: Mapping[str, Detections], gts: Mapping[str, Sequence[ActionInstance]],
            durations: Mapping[str, float], frame_rate: float, num_classes: int) -> float:
    """Frame-wise multi-label mAP after max-pooling detections onto frames."""
    all_scores, all_labels = [], []
    for vid, dur in durations.items():
        n = int(math.ceil(dur * frame_rate - 1e-9))
        if n <= 0:
            log.warning("skipping zero-length video %s", vid)
            continue
        det = preds.get(vid, Detections(np.zeros((0, 2)), np.zeros((0, num_classes))))
        all_scores.append(dense_scores(det, n, frame_rate))
        all_labels.append(dense_labels(gts.get(vid, []), n, frame_rate, num_classes))
    if not all_scores:
        raise EmptyInputError("no frames to evaluate")
    S = np.concatenate(all_scores)
    Y = np.concatenate(all_labels)
    aps = [ranked_ap(S[:, c], Y[:, c]) for c in range(num_classes) if Y[:, c].any()]
    if not aps:
        raise EmptyInputError("no positive frames: seg-mAP is undefined")
    return float(np.mean(aps))


# -- report files ------------------------------------------------------------------

def format_report(report: EvalReport) -> str:
    return "".join(f"{k} = {v:.4f}\n" for k, v in report.metrics().items())


def write_report(report: EvalReport, out_dir: str | Path, config_text: str = "") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    txt = out_dir / "report.txt"
    body = format_report(report)
    if config_text:
        body += "".join(f"# {line}\n" for line in config_text.splitlines()
                        if not line.startswith("#"))
    txt.write_text(body, encoding="utf-8")
    jsonl = out_dir / "report.jsonl"
    with jsonl.open("w", encoding="utf-8") as fh:
        for k, v in report.metrics().items():
            fh.write(json.dumps({"metric": k, "value": round(float(v), 4)}) + "\n")
        if config_text:
            fh.write(json.dumps({"config": config_text}) + "\n")
    return txt, jsonl
