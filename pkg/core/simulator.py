"""
トレース駆動シミュレーター
- フレームごとに スコアリング → スケジューリング → 圧縮・送信 → クラウド推論 → アンサンブル を実行
- 帯域は実測トレースから取得し、スケジューラーには推定値だけを渡す
- 独立したリプレイ（スイープ）はスレッドプールで並列実行
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config.config import DegradationCoeffs, SchedulingTimeMode, SimConfig, Variant
from core.ensembler import ensemble, nms
from core.evaluator import (
    FrameOutcome,
    LatencyBreakdown,
    SummaryReport,
    substitute_stale,
    summarize,
)
from core.profiler import ProfilerModel
from core.scheduler import BandwidthEstimator, ScheduleContext, fixed_plan, schedule
from core.scorer import (
    ScorerConfig,
    aggregate_importance,
    goodness_of_variance_fit,
    jenks_classify,
    patch_mask_for_box,
    refine_classes,
    validate_scores,
)
from core.types import (
    AttentionTensor,
    Detection,
    DetectionSource,
    FrameMeta,
    InvariantError,
    PatchClassification,
    QualityPalette,
    QualityPlan,
    transmission_latency_ms,
    weighted_quality,
)

logger = logging.getLogger(__name__)

SWEEP_PARAMETERS = ("latency_budget_ms", "bandwidth_scale")


class TraceExhaustedError(RuntimeError):
    """フレームの送信時刻がトレースの範囲を超えた"""


@dataclass(frozen=True, eq=False)
class FrameRecord:
    """1フレーム分の入力データ"""
    meta: FrameMeta
    attention: Optional[AttentionTensor] = None
    scores: Optional[np.ndarray] = None
    edge_detections: Tuple[Detection, ...] = ()
    ground_truth: Tuple[Detection, ...] = ()
    cloud_detections_reference: Tuple[Detection, ...] = ()

    def __post_init__(self):
        if (self.attention is None) == (self.scores is None):
            raise InvariantError("attention と scores のどちらか一方が必要です", "attention",
                                 self.meta.frame_id)
        if self.attention is not None and self.attention.n != self.meta.n:
            raise InvariantError(
                f"アテンションのパッチ数 {self.attention.n} がグリッド {self.meta.n} と一致しません",
                "attention", self.meta.frame_id)
        if self.scores is not None:
            try:
                scores = validate_scores(self.scores, self.meta.n)
            except InvariantError as e:
                raise InvariantError(str(e), "scores", self.meta.frame_id) from e
            scores = scores.copy()
            scores.setflags(write=False)
            object.__setattr__(self, "scores", scores)
        w, h = self.meta.width, self.meta.height
        for name in ("edge_detections", "ground_truth", "cloud_detections_reference"):
            boxes = tuple(d.clamp(w, h) for d in getattr(self, name))
            object.__setattr__(self, name, boxes)

    @property
    def frame_id(self) -> int:
        return self.meta.frame_id


class BandwidthTrace:
    """(timestamp_ms, bandwidth_mbps) 列の直前値保持サンプリング"""

    def __init__(self, samples: Sequence[Tuple[float, float]], loop: bool = False,
                 floor_mbps: float = 0.001, scale: float = 1.0):
        if not samples:
            raise TraceExhaustedError("帯域トレースが空です")
        self.timestamps = np.asarray([s[0] for s in samples], dtype=np.float64)
        self.bandwidths = np.asarray([s[1] for s in samples], dtype=np.float64)
        self.loop = loop
        self.floor_mbps = floor_mbps
        self.scale = scale
        # ループ周期は最終区間の長さを1区間分として加える
        step = float(self.timestamps[-1] - self.timestamps[-2]) if len(samples) > 1 else 1.0
        self.period_ms = float(self.timestamps[-1] - self.timestamps[0]) + step
        self._looped = False

    @property
    def end_ms(self) -> float:
        return float(self.timestamps[-1])

    def bandwidth_at(self, t_ms: float) -> float:
        if t_ms > self.end_ms:
            if not self.loop:
                raise TraceExhaustedError(
                    f"送信時刻 {t_ms:.1f}ms がトレース末尾 {self.end_ms:.1f}ms を超えています")
            if not self._looped:
                logger.info("トレース末尾に到達したため先頭に戻ります (t=%.1fms)", t_ms)
                self._looped = True
            t_ms = self.timestamps[0] + (t_ms - self.timestamps[0]) % self.period_ms
        idx = max(int(np.searchsorted(self.timestamps, t_ms, side="right")) - 1, 0)
        return max(float(self.bandwidths[idx]) * self.scale, self.floor_mbps)


@dataclass(frozen=True)
class CompressionModel:
    """
    実際の圧縮サイズの生成モデル（スケジューラーからは見えない）
    size = ⌊clip((α·Σ w_c q_c + α_S + ε)·S_O, 1, S_O)⌋,  ε ~ N(0, noise_std)
    """
    alpha: float
    alpha_s: float
    noise_std: float = 0.0

    def actual_size(self, meta: FrameMeta, proportions: Sequence[float],
                    plan: QualityPlan, rng: np.random.Generator) -> int:
        ratio = self.alpha * weighted_quality(proportions, plan.per_class_quality) + self.alpha_s
        if self.noise_std > 0:
            ratio += float(rng.normal(0.0, self.noise_std))
        s_o = meta.original_size_bytes
        return int(math.floor(min(max(ratio * s_o, 1.0), float(s_o))))


def score_frame(record: FrameRecord, cfg: ScorerConfig, refine: bool = True) -> PatchClassification:
    """重要度スコアの集約（またはスコア直接入力）→ Jenks 分類 → 再割り当て"""
    meta = record.meta
    if record.attention is not None:
        scores = aggregate_importance(record.attention, meta.n)
    else:
        scores = record.scores
    pc = jenks_classify(scores, cfg.k, cfg.jenks_sample_size, seed=[cfg.rng_seed, meta.frame_id])
    if logger.isEnabledFor(logging.DEBUG):
        logger.debug("frame %d: GVF=%.4f 比率=%s", meta.frame_id,
                     goodness_of_variance_fit(scores, pc.classes),
                     np.round(pc.proportions, 3).tolist())
    if not refine:
        return pc
    return refine_classes(pc, record.edge_detections, meta, cfg)


def dominant_class(det: Detection, classes: PatchClassification, meta: FrameMeta) -> int:
    """ボックスと重なるパッチの最頻クラス（同数なら上位クラス、重なりなしは 0）"""
    mask = patch_mask_for_box(meta, det)
    if not mask.any():
        return 0
    counts = np.bincount(classes.classes[mask], minlength=classes.k)
    return int(classes.k - 1 - np.argmax(counts[::-1]))


def degrade(reference: Sequence[Detection], plan: QualityPlan, classes: PatchClassification,
            meta: FrameMeta, coeffs: DegradationCoeffs,
            seed: Union[int, Sequence[int], np.random.Generator],
            palette: Optional[QualityPalette] = None) -> List[Detection]:
    """
    低品質で送られたパッチ上の物体ほど見落とし・位置ずれが増えるクラウド推論の代用
    - 生存確率 p = clip(p_base + γ·q_dom/q_max, 0, 1)
    - 位置ずれ: 各角に ±δ·(1 − q_dom/q_max)·対角長 の一様ノイズ
    乱数は常に同じ順序で引くので結果はシードだけで決まる
    """
    palette = palette or QualityPalette()
    rng = np.random.default_rng(seed)
    q_max = float(palette.q_max)
    out = []
    for det in reference:
        q_dom = plan.per_class_quality[dominant_class(det, classes, meta)]
        level = q_dom / q_max
        p = min(max(coeffs.p_base + coeffs.gamma * level, 0.0), 1.0)
        u = rng.random()
        jitter = rng.uniform(-1.0, 1.0, size=4)
        if u >= p:
            continue
        scale = coeffs.delta * (1.0 - level) * det.diagonal
        if scale <= 0:
            out.append(det)
            continue
        x1, y1, x2, y2 = (float(v) for v in np.array([det.x1, det.y1, det.x2, det.y2]) + jitter * scale)
        moved = Detection(min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2),
                          det.conf, DetectionSource.CLOUD)
        out.append(moved.clamp(meta.width, meta.height))
    return out


class EdgeCloudSimulator:
    """1回のリプレイの状態（帯域推定器を占有する）"""

    def __init__(self, cfg: SimConfig, model: ProfilerModel, compression: CompressionModel):
        if model.k != cfg.scorer.k:
            raise InvariantError(f"モデルのクラス数 {model.k} と設定 k={cfg.scorer.k} が一致しません",
                                 "k")
        self.cfg = cfg
        self.model = model
        self.compression = compression
        self.palette = cfg.palette
        self.estimator = BandwidthEstimator(cfg.bandwidth_window)
        # 直前フレームの処理完了時刻（同時に処理するのは1フレームだけ）
        self._clock_ms = float("-inf")
        self.stats = {
            'frames': 0,
            'fallback_frames': 0,
            'offloaded_bytes': 0,
        }

    def _plan(self, meta: FrameMeta, pc: PatchClassification,
              bandwidth_mbps: float) -> Tuple[QualityPlan, float]:
        """品質プランとスケジューリング時間 [ms]"""
        cfg = self.cfg
        started = time.perf_counter()
        if cfg.variant is Variant.FIXED_QUALITY:
            plan = fixed_plan(cfg.fixed_qualities, self.palette)
        else:
            ctx = ScheduleContext(
                latency_budget_ms=cfg.latency_budget_ms,
                device_latency_ms=cfg.device_latency_ms + cfg.scheduling_overhead_ms,
                cloud_latency_ms=cfg.cloud_latency_ms + cfg.return_latency_ms,
                bandwidth_mbps=bandwidth_mbps,
                original_size_bytes=meta.original_size_bytes,
                proportions=tuple(float(w) for w in pc.proportions),
                model=self.model,
                palette=self.palette,
                dp_scale=cfg.dp_scale,
            )
            plan = schedule(ctx)
        elapsed_ms = (time.perf_counter() - started) * 1000.0
        if cfg.scheduling_time_mode is SchedulingTimeMode.MEASURED:
            return plan, elapsed_ms
        return plan, cfg.scheduling_overhead_ms

    def run_frame(self, record: FrameRecord, trace: BandwidthTrace) -> FrameOutcome:
        cfg = self.cfg
        meta = record.meta
        compression_seed, degrade_seed = np.random.SeedSequence([cfg.rng_seed, meta.frame_id]).spawn(2)

        pc = score_frame(record, cfg.scorer, refine=cfg.variant is not Variant.NO_REFINE)
        estimate = self.estimator.snapshot(cfg.bootstrap_bandwidth_mbps)
        plan, scheduling_ms = self._plan(meta, pc, estimate)

        start_ms = max(meta.capture_timestamp_ms, self._clock_ms)
        send_ms = start_ms + cfg.device_latency_ms + scheduling_ms
        actual_mbps = trace.bandwidth_at(send_ms)
        self.stats['frames'] += 1

        if not plan.feasible:
            logger.debug("frame %d: デバイスのみ推論へフォールバック (推定 %.3f Mbps)",
                         meta.frame_id, estimate)
            if cfg.probe_on_fallback:
                self.estimator.observe(actual_mbps)
            self.stats['fallback_frames'] += 1
            breakdown = LatencyBreakdown(scheduling_ms=scheduling_ms, device_ms=cfg.device_latency_ms)
            self._clock_ms = start_ms + breakdown.total_ms
            return FrameOutcome(
                frame_id=meta.frame_id,
                detections=tuple(nms(record.edge_detections, cfg.nms_iou)),
                measured_latency_ms=breakdown.total_ms,
                offloaded_bytes=0,
                used_fallback=True,
                plan=plan,
                breakdown=breakdown,
                estimated_bandwidth_mbps=estimate,
                actual_bandwidth_mbps=actual_mbps,
                start_ms=start_ms,
            )

        proportions = tuple(float(w) for w in pc.proportions)
        size = self.compression.actual_size(meta, proportions, plan,
                                            np.random.default_rng(compression_seed))
        cloud = degrade(record.cloud_detections_reference, plan, pc, meta, cfg.degradation,
                        np.random.default_rng(degrade_seed), self.palette)
        if cfg.variant is Variant.CLOUD_ONLY:
            detections = nms(cloud, cfg.nms_iou)
        else:
            detections = ensemble(record.edge_detections, cloud, cfg.match_iou, cfg.nms_iou)

        breakdown = LatencyBreakdown(
            scheduling_ms=scheduling_ms,
            device_ms=cfg.device_latency_ms,
            transmission_ms=transmission_latency_ms(size, actual_mbps),
            cloud_ms=cfg.cloud_latency_ms,
            return_ms=cfg.return_latency_ms,
        )
        # 実測スループット（送信バイト / 送信時間）を推定器へ
        self.estimator.observe(actual_mbps)
        self.stats['offloaded_bytes'] += size
        measured_ms = ((cfg.device_latency_ms + scheduling_ms) + breakdown.transmission_ms
                       + (cfg.cloud_latency_ms + cfg.return_latency_ms))
        self._clock_ms = start_ms + measured_ms
        return FrameOutcome(
            frame_id=meta.frame_id,
            detections=tuple(detections),
            measured_latency_ms=measured_ms,
            offloaded_bytes=size,
            used_fallback=False,
            plan=plan,
            breakdown=breakdown,
            estimated_bandwidth_mbps=estimate,
            actual_bandwidth_mbps=actual_mbps,
            start_ms=start_ms,
        )

    def run(self, frames: Sequence[FrameRecord], trace: BandwidthTrace) -> List[FrameOutcome]:
        outcomes = []
        last_id = None
        for record in frames:
            if last_id is not None and record.frame_id <= last_id:
                raise InvariantError(f"frame_id が増加していません: {last_id} → {record.frame_id}",
                                     "frame_id", record.frame_id)
            last_id = record.frame_id
            outcomes.append(self.run_frame(record, trace))
        logger.info("シミュレーション完了: %d フレーム (フォールバック %d)",
                    self.stats['frames'], self.stats['fallback_frames'])
        return outcomes


def make_trace(samples: Sequence[Tuple[float, float]], cfg: SimConfig) -> BandwidthTrace:
    return BandwidthTrace(samples, loop=cfg.trace_loop, floor_mbps=cfg.min_bandwidth_mbps,
                          scale=cfg.bandwidth_scale)


def run(frames: Sequence[FrameRecord], trace: Sequence[Tuple[float, float]], cfg: SimConfig,
        model: ProfilerModel, compression: CompressionModel) -> List[FrameOutcome]:
    """フレーム列をトレース上で順に処理し、置き換え前の結果列を返す"""
    simulator = EdgeCloudSimulator(cfg, model, compression)
    return simulator.run(frames, make_trace(trace, cfg))


@dataclass
class ReplayResult:
    outcomes: List[FrameOutcome]
    summary: SummaryReport
    config: Optional[SimConfig] = field(repr=False, default=None)


def ground_truth_of(frames: Sequence[FrameRecord]) -> Dict[int, List[Detection]]:
    return {record.frame_id: list(record.ground_truth) for record in frames}


def replay(frames: Sequence[FrameRecord], trace: Sequence[Tuple[float, float]], cfg: SimConfig,
           model: ProfilerModel, compression: CompressionModel) -> ReplayResult:
    """run → 遅延違反フレームの結果置き換え → 集計"""
    outcomes = substitute_stale(run(frames, trace, cfg, model, compression),
                                cfg.latency_budget_ms)
    summary = summarize(outcomes, ground_truth_of(frames), cfg.latency_budget_ms)
    return ReplayResult(outcomes, summary, cfg)


def sweep(frames: Sequence[FrameRecord], trace: Sequence[Tuple[float, float]], cfg: SimConfig,
          model: ProfilerModel, compression: CompressionModel, parameter: str,
          values: Sequence[float], workers: int = 4,
          progress: Optional[Callable[[float, SummaryReport], None]] = None) -> List[Dict]:
    """
    パラメータを変えた独立リプレイを並列実行
    返り値は値の昇順に並んだ集計行
    """
    if parameter not in SWEEP_PARAMETERS:
        raise ValueError(f"未対応のスイープパラメータです: {parameter} (候補: {SWEEP_PARAMETERS})")
    duplicates = sorted({float(v) for v in values if sum(float(w) == float(v) for w in values) > 1})
    if duplicates:
        raise ValueError(f"スイープ値が重複しています: {duplicates}")

    def _one(value: float) -> ReplayResult:
        return replay(frames, trace, replace(cfg, **{parameter: float(value)}), model, compression)

    rows: Dict[float, Dict] = {}
    with ThreadPoolExecutor(max_workers=max(1, workers)) as executor:
        future_to_value = {executor.submit(_one, value): float(value) for value in values}
        for future in as_completed(future_to_value):
            value = future_to_value[future]
            summary = future.result().summary
            if progress:
                progress(value, summary)
            rows[value] = {
                'value': value,
                'ap50': summary.ap50,
                'mean_latency_ms': summary.mean_latency_ms,
                'mean_fps': summary.mean_fps,
                'violation_ratio': summary.violation_ratio,
                'mean_deviation': summary.mean_deviation,
                'fallback_ratio': summary.fallback_ratio,
                'total_offload_mb': summary.total_offload_mb,
            }
    return [rows[value] for value in sorted(rows)]
