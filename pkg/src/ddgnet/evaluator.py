"""Proposal generation, temporal NMS and mAP@IoU evaluation.

Snippet indices in proposals and ground truth are 1-based and inclusive;
a segment ``[s, e]`` covers the continuous interval ``[s, e + 1)``.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import base_model as bm
from .corpus import GroundTruthSegment, Video
from .model import VideoForward, forward_video
from .numerics import Tape


@dataclass(frozen=True)
class ActionProposal:
    start: int
    end: int
    category: int
    confidence: float
    video_id: str = ""

    def __post_init__(self):
        if not 1 <= self.start <= self.end:
            raise ValueError(f"invalid proposal span [{self.start}, {self.end}]")


@dataclass(frozen=True)
class EvalSettings:
    thresholds: tuple = tuple(float(x) for x in np.round(np.linspace(0.1, 0.9, 10), 10))
    iou_thresholds: tuple = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
    nms_iou: float = 0.5
    category_cut: float = 0.1
    outer_ratio: float = 0.25


def temporal_iou(a, b) -> float:
    """IoU of two inclusive snippet spans given as ``(start, end)`` or objects."""
    s1, e1 = _span(a)
    s2, e2 = _span(b)
    inter = max(0, min(e1, e2) + 1 - max(s1, s2))
    union = (e1 - s1 + 1) + (e2 - s2 + 1) - inter
    return inter / union if union > 0 else 0.0


def _span(x):
    if isinstance(x, tuple):
        return x[-2], x[-1]
    return x.start, x.end


def _runs(mask: np.ndarray):
    """Maximal runs of True as 0-based inclusive (start, end) pairs."""
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    return [(int(s), int(e) - 1) for s, e in zip(edges[::2], edges[1::2])]


def generate_proposals(att, pbar, video_scores, thresholds: Sequence[float], *,
                       category_cut: float = 0.1, outer_ratio: float = 0.25,
                       video_id: str = "") -> list[ActionProposal]:
    """Threshold the attention curve for every accepted category.

    Confidence is an outer-inner contrast on the suppressed CAS row plus
    the category's video-level score.
    """
    att = np.asarray(att, dtype=np.float64).ravel()
    pbar = np.asarray(pbar, dtype=np.float64)
    scores = np.asarray(video_scores, dtype=np.float64).ravel()
    thresholds = list(thresholds)
    if any(not 0 < v < 1 for v in thresholds) or thresholds != sorted(thresholds):
        raise ValueError("thresholds must lie in (0, 1) in ascending order")
    T = att.shape[0]
    C = pbar.shape[0] - 1
    out = []
    for c in range(C):
        if scores[c] <= category_cut:
            continue
        row = pbar[c]
        for v in thresholds:
            for s, e in _runs(att >= v):
                length = e - s + 1
                o = max(1, math.ceil(outer_ratio * length))
                outer = np.r_[max(0, s - o) : s, e + 1 : min(T, e + 1 + o)]
                inner_mean = row[s : e + 1].mean()
                outer_mean = row[outer].mean() if len(outer) else 0.0
                conf = float(inner_mean - outer_mean + scores[c])
                out.append(ActionProposal(s + 1, e + 1, c, conf, video_id))
    return out


def _rank_key(p: ActionProposal):
    return (-p.confidence, p.start)


def nms(proposals: Iterable[ActionProposal], iou_cut: float = 0.5) -> list[ActionProposal]:
    """Greedy per-category suppression; output ordered by confidence then start."""
    kept = []
    by_cat: dict[tuple, list] = {}
    for p in sorted(proposals, key=_rank_key):
        by_cat.setdefault((p.video_id, p.category), []).append(p)
    for group in by_cat.values():
        chosen = []
        for p in group:
            if all(temporal_iou(p, q) <= iou_cut for q in chosen):
                chosen.append(p)
        kept.extend(chosen)
    return sorted(kept, key=_rank_key)


def average_precision(proposals: Sequence[ActionProposal], gt_segments, iou_thr: float):
    """All-points interpolated AP for one category.

    ``gt_segments`` holds ``(video_id, start, end)`` triples.  Returns
    ``None`` when there is no ground truth (the category is then excluded
    from the mean).
    """
    gt = list(gt_segments)
    if not gt:
        return None
    ranked = sorted(proposals, key=lambda p: -p.confidence)
    by_video: dict[str, list[int]] = {}
    for i, g in enumerate(gt):
        by_video.setdefault(g[0], []).append(i)
    used = np.zeros(len(gt), dtype=bool)
    tp = np.zeros(len(ranked))
    for k, p in enumerate(ranked):
        best, best_iou = -1, iou_thr
        for i in by_video.get(p.video_id, ()):
            if used[i]:
                continue
            iou = temporal_iou(p, gt[i])
            if iou >= best_iou:
                if best < 0 or iou > best_iou:
                    best, best_iou = i, iou
        if best >= 0:
            used[best] = True
            tp[k] = 1
    if len(ranked) == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / len(gt)
    precision = ctp / np.arange(1, len(ranked) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class EvalReport:
    """AP per (category, IoU) plus per-threshold mAP and their average."""

    iou_thresholds: tuple
    ap: dict = field(default_factory=dict)  # category -> list of AP per threshold

    @property
    def categories(self) -> list[int]:
        return sorted(self.ap)

    @property
    def map_per_iou(self) -> list[float]:
        if not self.ap:
            return [0.0] * len(self.iou_thresholds)
        return [float(np.mean([self.ap[c][j] for c in self.ap])) for j in range(len(self.iou_thresholds))]

    @property
    def average(self) -> float:
        m = self.map_per_iou
        return float(np.mean(m)) if m else 0.0

    def average_over(self, ious: Iterable[float]) -> float:
        idx = [self._column(t) for t in ious]
        m = self.map_per_iou
        return float(np.mean([m[i] for i in idx]))

    def _column(self, t: float) -> int:
        for j, v in enumerate(self.iou_thresholds):
            if abs(v - t) < 1e-9:
                return j
        raise KeyError(f"IoU threshold {t} not in report")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["category"] + [f"{t:g}" for t in self.iou_thresholds] + ["Avg"])
        for c in self.categories:
            row = self.ap[c]
            w.writerow([c] + [f"{x:.6f}" for x in row] + [f"{np.mean(row):.6f}"])
        w.writerow(["mAP"] + [f"{x:.6f}" for x in self.map_per_iou] + [f"{self.average:.6f}"])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write(self.to_csv())


def evaluate_proposals(proposals: Iterable[ActionProposal],
                       ground_truth: Mapping[str, Sequence[GroundTruthSegment]],
                       iou_thresholds: Sequence[float]) -> EvalReport:
    """Aggregate AP per category over all videos in ``ground_truth``."""
    gt_by_cat: dict[int, list] = {}
    for vid in sorted(ground_truth):
        for s in ground_truth[vid]:
            gt_by_cat.setdefault(s.category, []).append((vid, s.start, s.end))
    props_by_cat: dict[int, list] = {}
    for p in sorted(proposals, key=lambda p: (p.video_id, p.category, -p.confidence, p.start, p.end)):
        props_by_cat.setdefault(p.category, []).append(p)
    report = EvalReport(tuple(iou_thresholds))
    for c, gt in sorted(gt_by_cat.items()):
        props = props_by_cat.get(c, [])
        report.ap[c] = [average_precision(props, gt, t) for t in iou_thresholds]
    return report


# ---------------------------------------------------------------- inference


def infer_video(params: Mapping[str, np.ndarray], video: Video, cfg, shape: bm.ModelShape) -> VideoForward:
    tape = Tape()
    pv = {k: tape.const(v) for k, v in params.items()}
    return forward_video(tape, pv, video.rgb, video.flow, shape, cfg.hyper, cfg.graph_options,
                         k_ratio=cfg.k_ratio)


def localize(params, video: Video, cfg, shape: bm.ModelShape, settings: EvalSettings):
    """Proposals after NMS for one video, plus the forward pass that made them."""
    fwd = infer_video(params, video, cfg, shape)
    scores = bm.video_scores(fwd.cas_suppressed, cfg.k_ratio)
    props = generate_proposals(fwd.att.value, fwd.cas_suppressed.value, scores, settings.thresholds,
                               category_cut=settings.category_cut, outer_ratio=settings.outer_ratio,
                               video_id=video.video_id)
    return nms(props, settings.nms_iou), fwd


def evaluate(videos: Sequence[Video], params, cfg, shape: bm.ModelShape,
             settings: EvalSettings = EvalSettings(), threads: int = 1) -> EvalReport:
    """Full inference on every video, then mAP at each IoU threshold."""
    def run(v):
        return localize(params, v, cfg, shape, settings)[0]

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, videos))
    else:
        results = [run(v) for v in videos]
    proposals = [p for r in results for p in r]
    gt = {v.video_id: v.segments for v in videos}
    return evaluate_proposals(proposals, gt, settings.iou_thresholds)
