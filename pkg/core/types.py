"""
共通ドメイン型
- フレーム・パッチ・検出結果・品質プランの定義
- 単位系: 帯域 Mbps / サイズ byte / 遅延 ms
- すべての型は生成時に不変条件を検査し、以後は変更しない
"""

import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence, Tuple

import numpy as np

BITS_PER_BYTE = 8
KILO = 1000.0

# 行和の許容誤差（softmax 行）
ROW_SUM_TOLERANCE = 1e-6
PROPORTION_TOLERANCE = 1e-9

DEFAULT_PALETTE_LEVELS = (15, 30, 45, 60, 75)


class InvariantError(ValueError):
    """不変条件違反"""

    def __init__(self, message: str, field_name: Optional[str] = None,
                 frame_id: Optional[int] = None):
        prefix = []
        if frame_id is not None:
            prefix.append(f"frame_id={frame_id}")
        if field_name is not None:
            prefix.append(f"field={field_name}")
        full = f"[{', '.join(prefix)}] {message}" if prefix else message
        super().__init__(full)
        self.field_name = field_name
        self.frame_id = frame_id


def transmission_latency_ms(size_bytes: float, bandwidth_mbps: float) -> float:
    """送信遅延 = size_bytes × 8 / (bandwidth_mbps × 1000) ms"""
    if bandwidth_mbps <= 0:
        return math.inf
    return size_bytes * BITS_PER_BYTE / (bandwidth_mbps * KILO)


def bytes_within_ms(window_ms: float, bandwidth_mbps: float) -> float:
    """window_ms の間に送信できる最大バイト数"""
    return bandwidth_mbps * KILO * window_ms / BITS_PER_BYTE


def weighted_quality(proportions: Sequence[float], qualities: Sequence[float]) -> float:
    """重み付き平均品質 Σ w_c q_c（加算順に依存しない丸め）"""
    return math.fsum(float(w) * float(q) for w, q in zip(proportions, qualities))


class DetectionSource(Enum):
    """検出結果の出所"""
    EDGE = "edge"
    CLOUD = "cloud"
    FUSED = "fused"
    GROUND_TRUTH = "ground_truth"


@dataclass(frozen=True)
class Detection:
    """バウンディングボックス（フルフレームのピクセル座標）"""
    x1: float
    y1: float
    x2: float
    y2: float
    conf: float = 1.0
    source: DetectionSource = DetectionSource.EDGE

    def __post_init__(self):
        for name in ("x1", "y1", "x2", "y2", "conf"):
            value = getattr(self, name)
            if not math.isfinite(value):
                raise InvariantError(f"有限値ではありません: {value}", name)
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise InvariantError(
                f"座標の順序が不正です: ({self.x1}, {self.y1}, {self.x2}, {self.y2})", "bbox")
        if not 0.0 <= self.conf <= 1.0:
            raise InvariantError(f"信頼度は [0,1] の範囲外です: {self.conf}", "conf")
        if self.source is DetectionSource.GROUND_TRUTH and self.conf != 1.0:
            raise InvariantError("正解ボックスの信頼度は 1 である必要があります", "conf")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    def clamp(self, width: float, height: float) -> "Detection":
        """フレーム範囲内に切り詰める"""
        x1 = min(max(self.x1, 0.0), width)
        y1 = min(max(self.y1, 0.0), height)
        x2 = min(max(self.x2, 0.0), width)
        y2 = min(max(self.y2, 0.0), height)
        if (x1, y1, x2, y2) == (self.x1, self.y1, self.x2, self.y2):
            return self
        return Detection(x1, y1, x2, y2, self.conf, self.source)

    def with_source(self, source: DetectionSource) -> "Detection":
        return Detection(self.x1, self.y1, self.x2, self.y2, self.conf, source)

    def to_list(self) -> list:
        return [self.x1, self.y1, self.x2, self.y2, self.conf]

    @classmethod
    def from_list(cls, values: Sequence[float], source: DetectionSource) -> "Detection":
        if len(values) == 4:
            conf = 1.0
        elif len(values) == 5:
            conf = values[4]
        else:
            raise InvariantError(f"ボックスは4または5要素です: {list(values)}", "bbox")
        return cls(float(values[0]), float(values[1]), float(values[2]), float(values[3]),
                   float(conf), source)


@dataclass(frozen=True)
class FrameMeta:
    """フレームのメタ情報（パッチグリッドと元サイズ）"""
    frame_id: int
    grid_rows: int
    grid_cols: int
    patch_size_px: int
    original_size_bytes: int
    capture_timestamp_ms: float = 0.0
    channels: int = 3  # 記録のみ

    def __post_init__(self):
        if self.grid_rows < 1 or self.grid_cols < 1:
            raise InvariantError(
                f"パッチグリッドが空です: {self.grid_rows}x{self.grid_cols}",
                "grid_rows", self.frame_id)
        if self.patch_size_px < 1:
            raise InvariantError(f"パッチサイズが不正です: {self.patch_size_px}",
                                 "patch_size_px", self.frame_id)
        if self.original_size_bytes <= 0:
            raise InvariantError(f"元サイズは正である必要があります: {self.original_size_bytes}",
                                 "original_size_bytes", self.frame_id)

    @property
    def n(self) -> int:
        return self.grid_rows * self.grid_cols

    @property
    def width(self) -> int:
        return self.grid_cols * self.patch_size_px

    @property
    def height(self) -> int:
        return self.grid_rows * self.patch_size_px

    def patch_rect(self, index: int) -> Tuple[float, float, float, float]:
        """行優先インデックスのパッチ矩形 (x1, y1, x2, y2)"""
        row, col = divmod(index, self.grid_cols)
        p = self.patch_size_px
        return (col * p, row * p, (col + 1) * p, (row + 1) * p)


def _frozen_array(values, dtype=None) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class AttentionTensor:
    """層・ヘッドごとのパッチ間アテンション values[layer, head, from, to]"""
    values: np.ndarray
    n: Optional[int] = None

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim != 4 or values.shape[2] != values.shape[3]:
            raise InvariantError(f"形状 (L, H, n, n) が必要です: {values.shape}", "values")
        if self.n is not None and values.shape[2] != self.n:
            raise InvariantError(
                f"宣言されたパッチ数 {self.n} とテンソルの大きさ {values.shape[2]} が一致しません", "n")
        if min(values.shape) < 1:
            raise InvariantError(f"空のテンソルです: {values.shape}", "values")
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise InvariantError("アテンション値は非負の有限値である必要があります", "values")
        row_sums = values.sum(axis=3, dtype=np.float64)
        worst = float(np.max(np.abs(row_sums - 1.0)))
        if worst > ROW_SUM_TOLERANCE:
            raise InvariantError(f"softmax 行和が 1 になりません (最大誤差 {worst:.3e})", "values")
        object.__setattr__(self, "values", _frozen_array(values))
        object.__setattr__(self, "n", int(values.shape[2]))

    @property
    def layers(self) -> int:
        return int(self.values.shape[0])

    @property
    def heads(self) -> int:
        return int(self.values.shape[1])


@dataclass(frozen=True, eq=False)
class PatchClassification:
    """パッチごとの重要度スコアとクラスラベル"""
    scores: np.ndarray
    classes: np.ndarray
    k: int
    proportions: np.ndarray = None
    breaks: Tuple[float, ...] = ()
    effective_k: Optional[int] = None

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        classes = np.asarray(self.classes, dtype=np.int64)
        if scores.ndim != 1 or scores.shape != classes.shape or scores.size == 0:
            raise InvariantError(f"scores {scores.shape} と classes {classes.shape} が不整合です",
                                 "classes")
        if self.k < 1:
            raise InvariantError(f"クラス数は 1 以上です: {self.k}", "k")
        if np.any(classes < 0) or np.any(classes >= self.k):
            raise InvariantError(f"ラベルは 0..{self.k - 1} の範囲である必要があります", "classes")
        exact = np.bincount(classes, minlength=self.k) / classes.size
        if self.proportions is None:
            proportions = exact
        else:
            proportions = np.asarray(self.proportions, dtype=np.float64)
            if proportions.shape != (self.k,) or not np.array_equal(proportions, exact):
                raise InvariantError("proportions がクラス頻度と一致しません", "proportions")
        if abs(float(proportions.sum()) - 1.0) > PROPORTION_TOLERANCE:
            raise InvariantError("proportions の合計が 1 になりません", "proportions")
        object.__setattr__(self, "scores", _frozen_array(scores))
        object.__setattr__(self, "classes", _frozen_array(classes))
        object.__setattr__(self, "proportions", _frozen_array(proportions))
        object.__setattr__(self, "breaks", tuple(float(b) for b in self.breaks))
        if self.effective_k is None:
            object.__setattr__(self, "effective_k", len(self.breaks) + 1)

    @property
    def n(self) -> int:
        return int(self.scores.size)

    def with_classes(self, classes: np.ndarray) -> "PatchClassification":
        """ラベルだけを差し替えた新しい分類（proportions は再計算）"""
        return PatchClassification(self.scores, classes, self.k, None, self.breaks,
                                   self.effective_k)


@dataclass(frozen=True)
class QualityPalette:
    """利用可能な品質値 Q（厳密に増加）"""
    levels: Tuple[int, ...] = DEFAULT_PALETTE_LEVELS

    def __post_init__(self):
        levels = tuple(int(q) for q in self.levels)
        if not levels:
            raise InvariantError("品質パレットが空です", "levels")
        if any(q <= 0 for q in levels):
            raise InvariantError(f"品質値は正である必要があります: {levels}", "levels")
        if any(b <= a for a, b in zip(levels, levels[1:])):
            raise InvariantError(f"品質値は厳密に増加する必要があります: {levels}", "levels")
        object.__setattr__(self, "levels", levels)

    @property
    def q_min(self) -> int:
        return self.levels[0]

    @property
    def q_max(self) -> int:
        return self.levels[-1]

    def __contains__(self, q) -> bool:
        return q in self.levels

    def __len__(self) -> int:
        return len(self.levels)


@dataclass(frozen=True)
class QualityPlan:
    """クラスごとの品質選択 {q_c*}。feasible=False はデバイスのみ推論へのフォールバック"""
    per_class_quality: Tuple[int, ...]
    feasible: bool = True

    def __post_init__(self):
        object.__setattr__(self, "per_class_quality",
                           tuple(int(q) for q in self.per_class_quality))

    @property
    def k(self) -> int:
        return len(self.per_class_quality)

    @classmethod
    def infeasible(cls, k: int) -> "QualityPlan":
        return cls((0,) * k, feasible=False)

    def validate(self, palette: QualityPalette) -> "QualityPlan":
        if self.feasible and any(q not in palette for q in self.per_class_quality):
            raise InvariantError(
                f"品質 {self.per_class_quality} がパレット {palette.levels} に含まれません",
                "per_class_quality")
        return self


def iou(a: Detection, b: Detection) -> float:
    """Intersection over Union（面積ゼロの和集合は 0）"""
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return min(1.0, max(0.0, inter / union))


def boxes_array(dets: Iterable[Detection]) -> np.ndarray:
    """(N, 4) の座標配列"""
    rows = [(d.x1, d.y1, d.x2, d.y2) for d in dets]
    if not rows:
        return np.zeros((0, 4), dtype=np.float64)
    return np.asarray(rows, dtype=np.float64)


def iou_matrix(a: Sequence[Detection], b: Sequence[Detection]) -> np.ndarray:
    """全組の IoU 行列 (len(a), len(b))"""
    if not a or not b:
        return np.zeros((len(a), len(b)), dtype=np.float64)
    ba, bb = boxes_array(a), boxes_array(b)
    iw = np.minimum(ba[:, None, 2], bb[None, :, 2]) - np.maximum(ba[:, None, 0], bb[None, :, 0])
    ih = np.minimum(ba[:, None, 3], bb[None, :, 3]) - np.maximum(ba[:, None, 1], bb[None, :, 1])
    inter = np.where((iw > 0) & (ih > 0), iw * ih, 0.0)
    area_a = (ba[:, 2] - ba[:, 0]) * (ba[:, 3] - ba[:, 1])
    area_b = (bb[:, 2] - bb[:, 0]) * (bb[:, 3] - bb[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return np.clip(out, 0.0, 1.0)
