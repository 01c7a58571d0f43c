"""
評価指標
- AP50（単一クラス、全点補間）
- フレーム処理レート、オフロード量、遅延逸脱率
- 遅延制約違反フレームへの直前有効結果の代用
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Mapping, Sequence, Tuple

import numpy as np

from core.types import Detection, InvariantError, QualityPlan, iou_matrix

logger = logging.getLogger(__name__)

AP_IOU_THRESHOLD = 0.5


class UndefinedMetricError(ValueError):
    """指標が定義できない入力（正解ボックスなし等）"""


@dataclass(frozen=True)
class LatencyBreakdown:
    """1フレームの遅延内訳 [ms]"""
    scheduling_ms: float = 0.0
    device_ms: float = 0.0
    transmission_ms: float = 0.0
    cloud_ms: float = 0.0
    return_ms: float = 0.0

    @property
    def total_ms(self) -> float:
        return (self.scheduling_ms + self.device_ms + self.transmission_ms
                + self.cloud_ms + self.return_ms)


@dataclass(frozen=True)
class FrameOutcome:
    """1フレームの処理結果"""
    frame_id: int
    detections: Tuple[Detection, ...]
    measured_latency_ms: float
    offloaded_bytes: int
    used_fallback: bool
    plan: QualityPlan
    used_stale: bool = False
    breakdown: LatencyBreakdown = field(default_factory=LatencyBreakdown)
    estimated_bandwidth_mbps: float = 0.0
    actual_bandwidth_mbps: float = 0.0
    start_ms: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "detections", tuple(self.detections))
        if self.measured_latency_ms < 0 or not math.isfinite(self.measured_latency_ms):
            raise InvariantError(f"遅延は非負の有限値です: {self.measured_latency_ms}",
                                 "measured_latency_ms", self.frame_id)
        if self.offloaded_bytes < 0:
            raise InvariantError(f"オフロード量は非負です: {self.offloaded_bytes}",
                                 "offloaded_bytes", self.frame_id)
        if self.used_fallback and self.offloaded_bytes != 0:
            raise InvariantError("フォールバック時のオフロード量は 0 です",
                                 "offloaded_bytes", self.frame_id)


@dataclass
class SummaryReport:
    """実行全体の集計"""
    frames: int
    ap50: float
    mean_fps: float
    mean_latency_ms: float
    total_offload_mb: float
    mean_deviation: float
    fallback_ratio: float
    violation_ratio: float
    stale_ratio: float
    mean_class_quality: Tuple[float, ...] = ()

    def to_dict(self) -> Dict:
        return {
            "frames": self.frames,
            "ap50": self.ap50,
            "mean_fps": self.mean_fps,
            "mean_latency_ms": self.mean_latency_ms,
            "total_offload_mb": self.total_offload_mb,
            "mean_deviation": self.mean_deviation,
            "fallback_ratio": self.fallback_ratio,
            "violation_ratio": self.violation_ratio,
            "stale_ratio": self.stale_ratio,
            "mean_class_quality": list(self.mean_class_quality),
        }


def _all_points_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """PR 曲線の全点補間による面積"""
    mrec = np.concatenate(([0.0], recall, [1.0]))
    mpre = np.concatenate(([0.0], precision, [0.0]))
    # 精度の包絡線
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    changes = np.where(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changes + 1] - mrec[changes]) * mpre[changes + 1]))


def ap50(predictions: Mapping[int, Sequence[Detection]],
         ground_truth: Mapping[int, Sequence[Detection]]) -> float:
    """
    単一クラス AP（IoU ≥ 0.5）
    全フレームの予測を信頼度降順に並べ、同一フレームの未使用正解のうち IoU 最大のものへ割り当てる
    """
    n_gt = sum(len(boxes) for boxes in ground_truth.values())
    if n_gt == 0:
        raise UndefinedMetricError("正解ボックスが 1 つもないため AP は定義できません")

    ranked = []
    for frame_id in sorted(predictions):
        for idx, det in enumerate(predictions[frame_id]):
            ranked.append((-det.conf, frame_id, idx))
    if not ranked:
        return 0.0
    ranked.sort()

    ious = {frame_id: iou_matrix(list(predictions[frame_id]), list(ground_truth.get(frame_id, ())))
            for frame_id in predictions}
    used = {frame_id: np.zeros(len(boxes), dtype=bool) for frame_id, boxes in ground_truth.items()}

    tp = np.zeros(len(ranked))
    for rank, (_, frame_id, idx) in enumerate(ranked):
        row = ious[frame_id][idx]
        if row.size == 0:
            continue
        candidates = np.where(used[frame_id], -1.0, row)
        best = int(np.argmax(candidates))
        if candidates[best] >= AP_IOU_THRESHOLD:
            used[frame_id][best] = True
            tp[rank] = 1.0

    acc_tp = np.cumsum(tp)
    acc_fp = np.cumsum(1.0 - tp)
    recall = acc_tp / n_gt
    precision = acc_tp / (acc_tp + acc_fp)
    return _all_points_ap(recall, precision)


def latency_deviation_rate(measured_ms: float, required_ms: float) -> float:
    """max(0, (measured − required) / required)"""
    if required_ms <= 0:
        raise UndefinedMetricError(f"要求遅延は正です: {required_ms}")
    return max(0.0, (measured_ms - required_ms) / required_ms)


def substitute_stale(outcomes: Sequence[FrameOutcome], latency_budget_ms: float) -> List[FrameOutcome]:
    """遅延制約を超えたフレームの検出結果を、直前の有効フレームの結果で置き換える"""
    result = []
    last_valid: Tuple[Detection, ...] = ()
    for outcome in outcomes:
        if outcome.measured_latency_ms > latency_budget_ms:
            result.append(replace(outcome, detections=last_valid, used_stale=True))
        else:
            last_valid = outcome.detections
            result.append(replace(outcome, used_stale=False) if outcome.used_stale else outcome)
    return result


def mean_class_quality(outcomes: Sequence[FrameOutcome]) -> Tuple[float, ...]:
    """実行可能プランのクラス別平均品質"""
    plans = [o.plan.per_class_quality for o in outcomes if o.plan.feasible]
    if not plans:
        return ()
    return tuple(float(v) for v in np.mean(np.asarray(plans, dtype=np.float64), axis=0))


def summarize(outcomes: Sequence[FrameOutcome], ground_truth: Mapping[int, Sequence[Detection]],
              latency_budget_ms: float) -> SummaryReport:
    """フレーム結果列を集計"""
    if not outcomes:
        raise UndefinedMetricError("フレームがありません")
    frames = len(outcomes)
    latencies = [o.measured_latency_ms for o in outcomes]
    mean_latency = math.fsum(latencies) / frames
    deviations = [latency_deviation_rate(lat, latency_budget_ms) for lat in latencies]
    predictions = {o.frame_id: list(o.detections) for o in outcomes}
    gt = {fid: list(ground_truth.get(fid, ())) for fid in predictions}

    report = SummaryReport(
        frames=frames,
        ap50=ap50(predictions, gt),
        mean_fps=1000.0 / mean_latency if mean_latency > 0 else math.inf,
        mean_latency_ms=mean_latency,
        total_offload_mb=sum(o.offloaded_bytes for o in outcomes) / 1e6,
        mean_deviation=math.fsum(deviations) / frames,
        fallback_ratio=sum(o.used_fallback for o in outcomes) / frames,
        violation_ratio=sum(lat > latency_budget_ms for lat in latencies) / frames,
        stale_ratio=sum(o.used_stale for o in outcomes) / frames,
        mean_class_quality=mean_class_quality(outcomes),
    )
    logger.info("集計: frames=%d AP50=%.4f mean_latency=%.1fms fallback=%.3f",
                frames, report.ap50, report.mean_latency_ms, report.fallback_ratio)
    return report
