"""Detection and pose evaluation: NMS, confidence-greedy IoU matching,
average precision, and per-keypoint RMSE / PCK / OKS.

Conventions fixed here and echoed in report metadata:

* NMS keeps the highest-scoring box among mutually overlapping detections;
  a pair at exactly the IoU threshold conflicts. Ties in score break by
  ascending instance id, so results are order-independent.
* Matching walks predictions by descending score; each claims the
  highest-IoU unclaimed ground truth at or above the threshold.
* AP is the all-point interpolated area under the precision-recall curve
  (exact step-curve area, not 11-point sampling).
* PCK normalizes by alpha * max(gt box w, h). OKS uses the per-slot term
  exp(-d^2 / (2 * s^2 * k_i^2)) with s^2 = gt box area.
* Only matched pairs contribute to keypoint metrics, and only slots whose
  ground truth is VISIBLE (optionally also OCCLUDED) and whose prediction
  is labeled. RMSE is in frame pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import (
    KEYPOINT_NAMES,
    NUM_KEYPOINTS,
    Instance,
    Skeleton,
    Source,
    Visibility,
    iou,
)


def default_sweep_thresholds() -> tuple[float, ...]:
    """IoU thresholds 0.3 to 0.95 in steps of 0.05 (14 values)."""
    return tuple(0.3 + 0.05 * k for k in range(14))


def _score_order(preds: Sequence[Instance]) -> list[Instance]:
    for p in preds:
        if p.score is None:
            raise ValueError(f"prediction {p.id} has no score")
    return sorted(preds, key=lambda p: (-p.score, p.id))


def nms(preds: Sequence[Instance], iou_threshold: float = 0.5) -> list[Instance]:
    """Greedy non-maximum suppression.

    Returns survivors sorted by descending score; no surviving pair has
    IoU >= iou_threshold. Invariant to input order (score ties break by id).
    """
    survivors: list[Instance] = []
    for cand in _score_order(preds):
        if all(iou(cand.bbox, kept.bbox) < iou_threshold for kept in survivors):
            survivors.append(cand)
    return survivors


@dataclass(frozen=True)
class MatchResult:
    """Prediction-to-ground-truth pairing for one frame."""

    pairs: tuple[tuple[int, int, float], ...]  # (prediction id, gt id, iou)
    unmatched_predictions: tuple[int, ...]
    unmatched_ground_truths: tuple[int, ...]
    iou_threshold: float


def match(
    preds: Sequence[Instance],
    gts: Sequence[Instance],
    iou_threshold: float = 0.5,
) -> MatchResult:
    """Confidence-greedy one-to-one matching.

    Predictions are processed in descending score order (ties by id); each
    claims the unclaimed ground truth with the highest IoU at or above the
    threshold (IoU ties by ascending gt id). Expects NMS-filtered input.
    """
    claimed: set[int] = set()
    pairs = []
    unmatched_preds = []
    for p in _score_order(preds):
        best = None
        for g in gts:
            if g.id in claimed:
                continue
            v = iou(p.bbox, g.bbox)
            if v < iou_threshold:
                continue
            if best is None or v > best[0] or (v == best[0] and g.id < best[1]):
                best = (v, g.id)
        if best is None:
            unmatched_preds.append(p.id)
        else:
            claimed.add(best[1])
            pairs.append((p.id, best[1], best[0]))
    unmatched_gts = tuple(sorted(g.id for g in gts if g.id not in claimed))
    return MatchResult(
        pairs=tuple(pairs),
        unmatched_predictions=tuple(unmatched_preds),
        unmatched_ground_truths=unmatched_gts,
        iou_threshold=iou_threshold,
    )


@dataclass(frozen=True)
class PrCurve:
    """Precision-recall points in rank order plus the interpolated area."""

    recalls: tuple[float, ...]
    precisions: tuple[float, ...]
    ap: float
    iou_threshold: float


def _interpolated_area(recalls: np.ndarray, precisions: np.ndarray) -> float:
    """All-point interpolation: area under the precision envelope."""
    if len(recalls) == 0:
        return 0.0
    envelope = np.maximum.accumulate(precisions[::-1])[::-1]
    prev_r = 0.0
    area = 0.0
    for r, p in zip(recalls, envelope):
        area += (r - prev_r) * p
        prev_r = r
    return float(area)


def average_precision(
    preds_by_frame: Mapping,
    gts_by_frame: Mapping,
    iou_threshold: float,
) -> PrCurve:
    """Confidence-ranked AP over all frames at one IoU threshold.

    TP/FP labels come from per-frame matching; the global ranking orders
    predictions by (score desc, frame key, id). Raises when there is no
    ground truth at all (AP undefined).
    """
    n_gt = sum(len(v) for v in gts_by_frame.values())
    if n_gt == 0:
        raise ValueError("average precision is undefined without ground truth")

    labeled = []  # (sort key, is_tp)
    for key, preds in preds_by_frame.items():
        gts = gts_by_frame.get(key, ())
        result = match(preds, gts, iou_threshold)
        tp_ids = {pid for pid, _, _ in result.pairs}
        for p in preds:
            labeled.append(((-p.score, key, p.id), p.id in tp_ids))
    labeled.sort(key=lambda t: t[0])

    if not labeled:
        return PrCurve((), (), 0.0, iou_threshold)

    flags = np.array([tp for _, tp in labeled], dtype=bool)
    tp_cum = np.cumsum(flags)
    fp_cum = np.cumsum(~flags)
    recalls = tp_cum / n_gt
    precisions = tp_cum / (tp_cum + fp_cum)
    ap = _interpolated_area(recalls, precisions)
    return PrCurve(
        recalls=tuple(float(r) for r in recalls),
        precisions=tuple(float(p) for p in precisions),
        ap=ap,
        iou_threshold=iou_threshold,
    )


def map_sweep(
    preds_by_frame: Mapping,
    gts_by_frame: Mapping,
    thresholds: Sequence[float],
) -> float:
    """Arithmetic mean of AP over the given IoU thresholds."""
    if len(thresholds) == 0:
        raise ValueError("threshold sweep must not be empty")
    for t in thresholds:
        if not 0.0 < t <= 1.0:
            raise ValueError(f"IoU threshold out of (0, 1]: {t}")
    aps = [average_precision(preds_by_frame, gts_by_frame, t).ap for t in thresholds]
    return float(sum(aps) / len(aps))


@dataclass(frozen=True)
class KeypointMetricRow:
    """Metrics for one keypoint slot; values are None when support is 0."""

    name: str
    rmse: Optional[float]
    pck: Optional[float]
    oks: Optional[float]
    support: int


class KeypointAccumulator:
    """Pools per-slot squared distances, PCK hits and OKS terms over
    matched pairs; order-independent, so parallel and serial accumulation
    agree."""

    def __init__(
        self,
        skeleton: Skeleton = Skeleton(),
        pck_alpha: float = 0.2,
        include_occluded: bool = False,
    ):
        if pck_alpha <= 0:
            raise ValueError(f"pck_alpha must be positive, got {pck_alpha}")
        self.skeleton = skeleton
        self.pck_alpha = pck_alpha
        self._scored_vis = {Visibility.VISIBLE}
        if include_occluded:
            self._scored_vis.add(Visibility.OCCLUDED)
        self.sq_dists: list[list[float]] = [[] for _ in range(NUM_KEYPOINTS)]
        self.pck_hits: list[list[bool]] = [[] for _ in range(NUM_KEYPOINTS)]
        self.oks_terms: list[list[float]] = [[] for _ in range(NUM_KEYPOINTS)]
        self.instance_oks: list[float] = []

    def add_pair(self, pred: Instance, gt: Instance) -> None:
        if pred.pose is None or gt.pose is None:
            return
        ref = gt.bbox.max_dim()
        pck_limit_sq = (self.pck_alpha * ref) ** 2
        s2 = gt.bbox.area()
        pair_terms = []
        for i in range(NUM_KEYPOINTS):
            g = gt.pose[i]
            p = pred.pose[i]
            if g.vis not in self._scored_vis or not p.labeled:
                continue
            d2 = (p.x - g.x) ** 2 + (p.y - g.y) ** 2
            term = math.exp(-d2 / (2.0 * s2 * self.skeleton.falloff[i] ** 2))
            self.sq_dists[i].append(d2)
            self.pck_hits[i].append(d2 <= pck_limit_sq)
            self.oks_terms[i].append(term)
            pair_terms.append(term)
        if pair_terms:
            self.instance_oks.append(sum(pair_terms) / len(pair_terms))

    def add_matches(self, matches: MatchResult, preds, gts) -> None:
        pred_by_id = {p.id: p for p in preds}
        gt_by_id = {g.id: g for g in gts}
        for pid, gid, _ in matches.pairs:
            self.add_pair(pred_by_id[pid], gt_by_id[gid])

    def rows(self) -> list[KeypointMetricRow]:
        out = []
        for i, name in enumerate(self.skeleton.names):
            n = len(self.sq_dists[i])
            if n == 0:
                out.append(KeypointMetricRow(name, None, None, None, 0))
                continue
            rmse = math.sqrt(sum(self.sq_dists[i]) / n)
            pck = 100.0 * sum(self.pck_hits[i]) / n
            oks = sum(self.oks_terms[i]) / n
            out.append(KeypointMetricRow(name, rmse, pck, oks, n))
        return out

    def average_row(self, weighted: bool = True) -> KeypointMetricRow:
        rows = [r for r in self.rows() if r.support > 0]
        total = sum(r.support for r in rows)
        if not rows:
            return KeypointMetricRow("Average", None, None, None, 0)
        if weighted:
            rmse = sum(r.rmse * r.support for r in rows) / total
            pck = sum(r.pck * r.support for r in rows) / total
            oks = sum(r.oks * r.support for r in rows) / total
        else:
            rmse = sum(r.rmse for r in rows) / len(rows)
            pck = sum(r.pck for r in rows) / len(rows)
            oks = sum(r.oks for r in rows) / len(rows)
        return KeypointMetricRow("Average", rmse, pck, oks, total)

    def instance_oks_mean(self) -> Optional[float]:
        if not self.instance_oks:
            return None
        return sum(self.instance_oks) / len(self.instance_oks)


def keypoint_metrics(
    matches: MatchResult,
    preds: Sequence[Instance],
    gts: Sequence[Instance],
    pck_alpha: float = 0.2,
    skeleton: Skeleton = Skeleton(),
    include_occluded: bool = False,
    weighted_average: bool = True,
) -> list[KeypointMetricRow]:
    """Per-keypoint rows plus an Average row for one matched scope."""
    acc = KeypointAccumulator(skeleton, pck_alpha, include_occluded)
    acc.add_matches(matches, preds, gts)
    return acc.rows() + [acc.average_row(weighted=weighted_average)]


@dataclass(frozen=True)
class EvalConfig:
    """Knobs of the evaluation protocol; echoed into every report."""

    nms_iou: float = 0.5
    match_iou: float = 0.5
    pck_alpha: float = 0.2
    oks_falloff: float = 0.1
    sweep_thresholds: tuple[float, ...] = field(default_factory=default_sweep_thresholds)
    weighted_average: bool = True
    include_occluded: bool = False

    def to_dict(self) -> dict:
        return {
            "nms_iou": self.nms_iou,
            "match_iou": self.match_iou,
            "pck_alpha": self.pck_alpha,
            "oks_falloff": self.oks_falloff,
            "sweep_thresholds": [round(t, 6) for t in self.sweep_thresholds],
            "weighted_average": self.weighted_average,
            "include_occluded": self.include_occluded,
            "ap_interpolation": "all-point",
            "oks_scale": "gt bbox area",
            "pck_normalizer": "max(gt bbox w, h)",
        }


@dataclass(frozen=True)
class MetricReport:
    """Per-keypoint metric rows plus detection AP summaries."""

    keypoint_rows: tuple[KeypointMetricRow, ...]
    average_row: KeypointMetricRow
    map_50: float
    curve_50: PrCurve
    sweep_thresholds: tuple[float, ...]
    sweep_aps: tuple[float, ...]
    map_sweep: float
    instance_oks_mean: Optional[float]
    n_matched_pairs: int
    config: EvalConfig


def evaluate(dataset, predictions, config: EvalConfig = EvalConfig()) -> MetricReport:
    """Run the full protocol: per-frame NMS, matching, keypoint metrics,
    and the detection AP sweep."""
    skeleton = dataset.skeleton.with_falloff(config.oks_falloff)
    gts_by_frame = {fr.key: list(fr.instances) for fr in dataset.frames}
    raw_by_frame = predictions.by_frame()
    preds_by_frame = {
        key: nms(raw_by_frame.get(key, []), config.nms_iou) for key in gts_by_frame
    }
    extra = sorted(set(raw_by_frame) - set(gts_by_frame))
    if extra:
        raise ValueError(f"predictions reference unknown frames: {extra}")

    acc = KeypointAccumulator(skeleton, config.pck_alpha, config.include_occluded)
    n_pairs = 0
    for key in sorted(gts_by_frame):
        result = match(preds_by_frame[key], gts_by_frame[key], config.match_iou)
        n_pairs += len(result.pairs)
        acc.add_matches(result, preds_by_frame[key], gts_by_frame[key])

    curve_50 = average_precision(preds_by_frame, gts_by_frame, 0.5)
    sweep_aps = tuple(
        average_precision(preds_by_frame, gts_by_frame, t).ap
        for t in config.sweep_thresholds
    )
    return MetricReport(
        keypoint_rows=tuple(acc.rows()),
        average_row=acc.average_row(weighted=config.weighted_average),
        map_50=curve_50.ap,
        curve_50=curve_50,
        sweep_thresholds=tuple(config.sweep_thresholds),
        sweep_aps=sweep_aps,
        map_sweep=float(sum(sweep_aps) / len(sweep_aps)),
        instance_oks_mean=acc.instance_oks_mean(),
        n_matched_pairs=n_pairs,
        config=config,
    )


def _fmt(v: Optional[float], nd: int = 2) -> str:
    return "-" if v is None else f"{v:.{nd}f}"


def render_text(report: MetricReport) -> str:
    """Human-readable tables: detection summary then the keypoint table."""
    lo, hi = report.sweep_thresholds[0], report.sweep_thresholds[-1]
    lines = [
        "Detection (bounding boxes)",
        f"  mAP@0.5                = {report.map_50:.4f}",
        f"  mAP@{lo:.2f}:0.05:{hi:.2f}    = {report.map_sweep:.4f}",
        "",
        f"Keypoints (pck_alpha={report.config.pck_alpha}, "
        f"matched pairs={report.n_matched_pairs}, "
        f"{'occluded included' if report.config.include_occluded else 'visible-only'})",
        f"  {'keypoint':<12} {'RMSE_px':>8} {'PCK_%':>7} {'OKS':>6} {'support':>8}",
    ]
    for row in list(report.keypoint_rows) + [report.average_row]:
        lines.append(
            f"  {row.name:<12} {_fmt(row.rmse):>8} {_fmt(row.pck, 1):>7} "
            f"{_fmt(row.oks):>6} {row.support:>8}"
        )
    return "\n".join(lines) + "\n"


def report_to_dict(report: MetricReport) -> dict:
    """Machine-readable report body (config echo included)."""

    def row_dict(row: KeypointMetricRow) -> dict:
        return {
            "name": row.name,
            "rmse_px": row.rmse,
            "pck_pct": row.pck,
            "oks": row.oks,
            "support": row.support,
        }

    return {
        "config": report.config.to_dict(),
        "detection": {
            "map_50": report.map_50,
            "sweep_thresholds": [round(t, 6) for t in report.sweep_thresholds],
            "sweep_aps": list(report.sweep_aps),
            "map_sweep": report.map_sweep,
            "pr_curve_50": {
                "recalls": list(report.curve_50.recalls),
                "precisions": list(report.curve_50.precisions),
            },
        },
        "keypoints": [row_dict(r) for r in report.keypoint_rows],
        "average": row_dict(report.average_row),
        "instance_oks_mean": report.instance_oks_mean,
        "n_matched_pairs": report.n_matched_pairs,
    }


def report_to_csv(report: MetricReport) -> str:
    """Long-format CSV: row,metric,value."""
    lines = ["row,metric,value"]
    lines.append(f"detection,map_50,{report.map_50!r}")
    lines.append(f"detection,map_sweep,{report.map_sweep!r}")
    for row in list(report.keypoint_rows) + [report.average_row]:
        for metric, value in (
            ("rmse_px", row.rmse),
            ("pck_pct", row.pck),
            ("oks", row.oks),
            ("support", row.support),
        ):
            lines.append(f"{row.name},{metric},{'' if value is None else repr(value)}")
    return "\n".join(lines) + "\n"
