"""
合成シナリオ生成
- 物体を埋め込んだフレーム（物体パッチにアテンションが集中）
- サイズと相関した信頼度を持つエッジ検出、軽いノイズのクラウド参照検出
- 位相ごとに平均帯域が変わる帯域トレース
- 既知の線形モデルによるプロファイリング記録と真の係数
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Set, Tuple

import numpy as np

from core.profiler import ProfilingRecord, synthesize_records
from core.scorer import patch_mask_for_box
from core.simulator import CompressionModel, FrameRecord
from core.types import (
    AttentionTensor,
    Detection,
    DetectionSource,
    FrameMeta,
    QualityPalette,
)

logger = logging.getLogger(__name__)

# 埋め込みクラス
BACKGROUND, LARGE_OBJECT, SMALL_OBJECT = 0, 1, 2


@dataclass
class ScenarioSpec:
    """生成パラメータ"""
    num_frames: int = 60
    frame_interval_ms: float = 500.0
    grid_rows: int = 9
    grid_cols: int = 16
    patch_size_px: int = 240
    channels: int = 3

    # アテンション（dense=False ならスコアベクトルのみ）
    dense_attention: bool = True
    layers: int = 1
    heads: int = 2
    logit_background: float = 0.0
    logit_large: float = 2.0
    logit_small: float = 4.0
    logit_noise: float = 0.05

    # 物体
    small_objects: Tuple[int, int] = (1, 3)   # 個数の範囲（両端含む）
    large_objects: Tuple[int, int] = (1, 2)
    large_span: int = 2                       # 大物体が占めるパッチ数（一辺）

    # エッジ検出
    edge_box_noise: float = 0.08              # 対角長比
    edge_small_miss: float = 0.3
    edge_false_positives: float = 0.5         # フレームあたり平均
    edge_conf_noise: float = 0.03

    # クラウド参照検出
    cloud_box_noise: float = 0.02
    cloud_recall: float = 0.97

    # 圧縮サイズの真のモデル
    size_alpha: float = 0.0008
    size_alpha_s: float = 0.004
    size_noise_std: float = 0.002

    # 精度の真のモデル（プロファイリング記録用）
    acc_betas: Tuple[float, ...] = (0.0002, 0.002, 0.004)
    acc_beta_a: float = 0.05
    profile_noise_std: float = 0.0
    palette_levels: Tuple[int, ...] = (15, 30, 45, 60, 75)

    # 帯域トレース: (継続時間 ms, 平均 Mbps)
    trace_phases: Tuple[Tuple[float, float], ...] = ((12000.0, 30.0), (12000.0, 90.0), (12000.0, 45.0))
    trace_step_ms: float = 100.0
    trace_jitter: float = 0.1

    def __post_init__(self):
        self.small_objects = tuple(self.small_objects)
        self.large_objects = tuple(self.large_objects)
        self.acc_betas = tuple(float(b) for b in self.acc_betas)
        self.palette_levels = tuple(int(q) for q in self.palette_levels)
        self.trace_phases = tuple((float(d), float(m)) for d, m in self.trace_phases)
        if self.num_frames < 1:
            raise ValueError(f"num_frames は 1 以上です: {self.num_frames}")
        if self.small_objects[0] < 1 or self.large_objects[0] < 1:
            raise ValueError("各フレームに小物体と大物体が少なくとも1つ必要です")
        if self.large_span >= min(self.grid_rows, self.grid_cols):
            raise ValueError("large_span がグリッドに収まりません")
        if not self.trace_phases:
            raise ValueError("trace_phases が空です")

    @property
    def original_size_bytes(self) -> int:
        return self.grid_rows * self.grid_cols * self.patch_size_px ** 2 * self.channels

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["trace_phases"] = [list(p) for p in self.trace_phases]
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "ScenarioSpec":
        return cls(**data)


@dataclass
class Scenario:
    """生成結果"""
    spec: ScenarioSpec
    seed: int
    frames: List[FrameRecord]
    trace: List[Tuple[float, float]]
    planted_classes: Dict[int, np.ndarray] = field(repr=False, default_factory=dict)
    profiling_records: List[ProfilingRecord] = field(repr=False, default_factory=list)

    @property
    def compression(self) -> CompressionModel:
        return CompressionModel(self.spec.size_alpha, self.spec.size_alpha_s, self.spec.size_noise_std)

    def truth(self) -> Dict:
        """真の係数（scenario.json の内容）"""
        return {
            "seed": self.seed,
            "size_model": {"alpha": self.spec.size_alpha, "alpha_s": self.spec.size_alpha_s,
                           "noise_std": self.spec.size_noise_std},
            "accuracy_model": {"betas": list(self.spec.acc_betas), "beta_a": self.spec.acc_beta_a},
            "spec": self.spec.to_dict(),
        }


def _free_region(rng: np.random.Generator, spec: ScenarioSpec, span: int,
                 used: Set[Tuple[int, int]]) -> Optional[Tuple[int, int]]:
    """未使用の span×span パッチ領域の左上 (row, col)"""
    candidates = [(r, c)
                  for r in range(spec.grid_rows - span + 1)
                  for c in range(spec.grid_cols - span + 1)
                  if all((r + i, c + j) not in used for i in range(span) for j in range(span))]
    if not candidates:
        return None
    return candidates[int(rng.integers(len(candidates)))]


def _place_box(rng: np.random.Generator, row: int, col: int, span: int, p: int,
               min_frac: float, max_frac: float) -> Detection:
    """領域内にランダムな大きさの正解ボックスを置く"""
    region = span * p
    w = rng.uniform(min_frac, max_frac) * region
    h = rng.uniform(min_frac, max_frac) * region
    x1 = col * p + rng.uniform(0.0, region - w)
    y1 = row * p + rng.uniform(0.0, region - h)
    return Detection(float(x1), float(y1), float(x1 + w), float(y1 + h), 1.0,
                     DetectionSource.GROUND_TRUTH)


def _jittered(rng: np.random.Generator, box: Detection, sigma: float, conf: float,
              source: DetectionSource, width: int, height: int) -> Detection:
    noise = rng.normal(0.0, sigma * box.diagonal, size=4)
    x1, y1, x2, y2 = (float(v) for v in np.array([box.x1, box.y1, box.x2, box.y2]) + noise)
    det = Detection(min(x1, x2), min(y1, y2), max(x1, x2), max(y1, y2),
                    float(min(max(conf, 0.0), 1.0)), source)
    return det.clamp(width, height)


def _attention(rng: np.random.Generator, spec: ScenarioSpec, planted: np.ndarray) -> np.ndarray:
    """埋め込みクラスに応じたロジットを softmax した (L, H, n, n) テンソル（float32）"""
    n = planted.size
    base = np.choose(planted, [spec.logit_background, spec.logit_large, spec.logit_small])
    logits = base[None, None, None, :] + rng.normal(
        0.0, spec.logit_noise, size=(spec.layers, spec.heads, n, n))
    logits -= logits.max(axis=3, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=3, keepdims=True)
    return weights.astype(np.float32)


def _frame(rng: np.random.Generator, spec: ScenarioSpec, frame_id: int) -> Tuple[FrameRecord, np.ndarray]:
    meta = FrameMeta(frame_id, spec.grid_rows, spec.grid_cols, spec.patch_size_px,
                     spec.original_size_bytes, frame_id * spec.frame_interval_ms, spec.channels)
    p = spec.patch_size_px
    used: Set[Tuple[int, int]] = set()
    objects: List[Tuple[Detection, int]] = []

    n_large = int(rng.integers(spec.large_objects[0], spec.large_objects[1] + 1))
    n_small = int(rng.integers(spec.small_objects[0], spec.small_objects[1] + 1))
    for kind, count, span, fracs in ((LARGE_OBJECT, n_large, spec.large_span, (0.6, 0.95)),
                                     (SMALL_OBJECT, n_small, 1, (0.15, 0.45))):
        for _ in range(count):
            origin = _free_region(rng, spec, span, used)
            if origin is None:
                break
            row, col = origin
            used.update((row + i, col + j) for i in range(span) for j in range(span))
            objects.append((_place_box(rng, row, col, span, p, *fracs), kind))

    planted = np.zeros(meta.n, dtype=np.int64)
    for box, kind in objects:
        mask = patch_mask_for_box(meta, box)
        planted[mask] = np.maximum(planted[mask], kind)

    ground_truth = tuple(box for box, _ in objects)
    max_side = spec.large_span * p

    # エッジ: 大きい物体ほど高信頼度、小物体は見落としあり
    edge = []
    for box, kind in objects:
        if kind == SMALL_OBJECT and rng.random() < spec.edge_small_miss:
            continue
        size_level = min(np.sqrt(box.area) / max_side, 1.0)
        conf = 0.5 + 0.48 * size_level + rng.normal(0.0, spec.edge_conf_noise)
        edge.append(_jittered(rng, box, spec.edge_box_noise, conf, DetectionSource.EDGE,
                              meta.width, meta.height))
    for _ in range(int(rng.poisson(spec.edge_false_positives))):
        w, h = rng.uniform(0.1, 0.5, size=2) * p
        x1 = rng.uniform(0.0, meta.width - w)
        y1 = rng.uniform(0.0, meta.height - h)
        edge.append(Detection(float(x1), float(y1), float(x1 + w), float(y1 + h),
                              float(rng.uniform(0.1, 0.5)), DetectionSource.EDGE))

    # クラウド: 高再現率・小さな位置ずれ
    cloud = []
    for box, _ in objects:
        if rng.random() >= spec.cloud_recall:
            continue
        cloud.append(_jittered(rng, box, spec.cloud_box_noise, rng.uniform(0.85, 0.99),
                               DetectionSource.CLOUD, meta.width, meta.height))

    if spec.dense_attention:
        attention, scores = AttentionTensor(_attention(rng, spec, planted), meta.n), None
    else:
        base = np.choose(planted, [spec.logit_background, spec.logit_large, spec.logit_small])
        weights = np.exp(base + rng.normal(0.0, spec.logit_noise, size=meta.n))
        attention, scores = None, weights / weights.sum()

    record = FrameRecord(meta, attention, scores, tuple(edge), ground_truth, tuple(cloud))
    return record, planted


def _trace(rng: np.random.Generator, spec: ScenarioSpec) -> List[Tuple[float, float]]:
    """位相ごとの平均帯域にジッタを加えたトレース（フレーム列全体を覆う長さに延長）"""
    needed_ms = spec.num_frames * spec.frame_interval_ms + 1000.0
    phases = list(spec.trace_phases)
    total = sum(d for d, _ in phases)
    if total < needed_ms:
        last_duration, last_mean = phases[-1]
        phases[-1] = (last_duration + needed_ms - total, last_mean)

    samples = []
    t = 0.0
    for duration, mean in phases:
        steps = int(np.ceil(duration / spec.trace_step_ms))
        noise = rng.normal(0.0, spec.trace_jitter, size=steps)
        for i in range(steps):
            bw = max(mean * (1.0 + noise[i]), 0.1 * mean)
            samples.append((round(t, 3), round(float(bw), 6)))
            t += spec.trace_step_ms
    return samples


def generate_scenario(spec: Optional[ScenarioSpec] = None, seed: int = 42) -> Scenario:
    """シード固定で再現可能な合成シナリオを生成"""
    spec = spec or ScenarioSpec()
    frames_seed, trace_seed, profile_seed = np.random.SeedSequence(seed).spawn(3)

    frame_rng = np.random.default_rng(frames_seed)
    frames, planted = [], {}
    for frame_id in range(spec.num_frames):
        record, classes = _frame(frame_rng, spec, frame_id)
        frames.append(record)
        planted[frame_id] = classes

    trace = _trace(np.random.default_rng(trace_seed), spec)
    records = synthesize_records(
        spec.size_alpha, spec.size_alpha_s, spec.acc_betas, spec.acc_beta_a,
        QualityPalette(spec.palette_levels), noise_std=spec.profile_noise_std,
        seed=int(profile_seed.generate_state(1)[0]))

    logger.info("シナリオ生成: %d フレーム, トレース %d 点 (seed=%d)",
                len(frames), len(trace), seed)
    return Scenario(spec, seed, frames, trace, planted, records)
