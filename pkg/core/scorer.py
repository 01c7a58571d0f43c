"""
協調考慮型パッチ重要度スコアラー
- アテンションから重要度スコアを集約
- ミニバッチ版 Jenks Natural Breaks で K クラスに分類
- エッジ検出の信頼度を用いてクラスを再割り当て
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from core.types import (
    AttentionTensor,
    Detection,
    FrameMeta,
    InvariantError,
    PatchClassification,
)

logger = logging.getLogger(__name__)


class ThresholdMode(Enum):
    """重要度閾値 T_i の決め方"""
    CLASS_BOUNDARY = "class_boundary"  # クラス0/1の境界
    EXPLICIT = "explicit"              # 明示値


@dataclass
class ScorerConfig:
    """スコアラー設定"""
    k: int = 3                          # クラス数 K
    conf_threshold: float = 0.90        # 検出信頼度閾値 T_c
    importance_threshold_mode: ThresholdMode = ThresholdMode.CLASS_BOUNDARY
    importance_threshold: Optional[float] = None  # EXPLICIT のときの T_i
    jenks_sample_size: int = 1000       # ブレーク推定に使う最大サンプル数
    rng_seed: int = 0

    def __post_init__(self):
        if isinstance(self.importance_threshold_mode, str):
            self.importance_threshold_mode = ThresholdMode(self.importance_threshold_mode)
        if self.k < 2:
            raise InvariantError(f"k は 2 以上です: {self.k}", "k")
        if not 0.0 < self.conf_threshold <= 1.0:
            raise InvariantError(f"conf_threshold は (0,1] です: {self.conf_threshold}",
                                 "conf_threshold")
        if self.jenks_sample_size < self.k:
            raise InvariantError(
                f"jenks_sample_size ({self.jenks_sample_size}) は k 以上である必要があります",
                "jenks_sample_size")
        if (self.importance_threshold_mode is ThresholdMode.EXPLICIT
                and self.importance_threshold is None):
            raise InvariantError("EXPLICIT モードでは importance_threshold が必要です",
                                 "importance_threshold")


def aggregate_importance(att: AttentionTensor, n: Optional[int] = None) -> np.ndarray:
    """
    ImpScore(p_i) = (1 / (L·N_h·n)) Σ_l Σ_h Σ_j A(p_j, p_i)

    p_i が受け取るアテンション（列和）として集約する。
    行和は常に 1 なので、合計は 1 になる。
    """
    if n is not None and att.n != n:
        raise InvariantError(f"パッチ数 {n} とテンソルの大きさ {att.n} が一致しません", "n")
    received = att.values.sum(axis=(0, 1, 2), dtype=np.float64)
    return received / float(att.layers * att.heads * att.n)


def validate_scores(scores: Sequence[float], n: Optional[int] = None) -> np.ndarray:
    """事前計算済みスコアベクトルの検査"""
    arr = np.asarray(scores, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise InvariantError(f"スコアは空でない1次元配列です: {arr.shape}", "scores")
    if n is not None and arr.size != n:
        raise InvariantError(f"スコア長 {arr.size} がパッチ数 {n} と一致しません", "scores")
    if np.any(arr < 0) or not np.all(np.isfinite(arr)):
        raise InvariantError("スコアは非負の有限値である必要があります", "scores")
    return arr


def sdcm(values: Sequence[float], labels: Sequence[int]) -> float:
    """クラス内偏差平方和 (Squared Deviations from Class Means)"""
    values = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels)
    total = 0.0
    for label in np.unique(labels):
        members = values[labels == label]
        total += float(np.sum((members - members.mean()) ** 2))
    return total


def goodness_of_variance_fit(values: Sequence[float], labels: Sequence[int]) -> float:
    """GVF = (SDAM - SDCM) / SDAM"""
    values = np.asarray(values, dtype=np.float64)
    sdam = float(np.sum((values - values.mean()) ** 2))
    if sdam == 0.0:
        return 1.0
    return (sdam - sdcm(values, labels)) / sdam


def _fisher_jenks_breaks(distinct: np.ndarray, weights: np.ndarray, k: int) -> Tuple[float, ...]:
    """
    重み付き Fisher-Jenks 動的計画法
    distinct: 昇順の相異なる値, weights: 各値の出現数
    返り値: 下位 k-1 クラスの上端値
    """
    m = distinct.size
    # 桁落ちを避けるため中心化
    x = distinct - np.average(distinct, weights=weights)
    cw = np.concatenate(([0.0], np.cumsum(weights)))
    cx = np.concatenate(([0.0], np.cumsum(weights * x)))
    cxx = np.concatenate(([0.0], np.cumsum(weights * x * x)))

    def ssd(start, end):
        # 区間 [start, end) の偏差平方和
        w = cw[end] - cw[start]
        s = cx[end] - cx[start]
        return np.maximum((cxx[end] - cxx[start]) - s * s / w, 0.0)

    # cost[c][i]: 先頭 i 個を c+1 クラスに分けた最小コスト
    cost = np.full((k, m + 1), np.inf)
    back = np.zeros((k, m + 1), dtype=np.int64)
    cost[0, 1:] = ssd(np.zeros(m, dtype=np.int64), np.arange(1, m + 1))
    for c in range(1, k):
        for i in range(c + 1, m + 1):
            starts = np.arange(c, i)
            candidates = cost[c - 1, starts] + ssd(starts, i)
            best = int(np.argmin(candidates))
            cost[c, i] = candidates[best]
            back[c, i] = starts[best]

    # 後ろから境界を復元
    uppers = []
    i = m
    for c in range(k - 1, 0, -1):
        start = int(back[c, i])
        uppers.append(float(distinct[start - 1]))
        i = start
    return tuple(reversed(uppers))


def jenks_classify(scores: Sequence[float], k: int, sample_size: int,
                   seed: Union[int, Sequence[int]] = 0) -> PatchClassification:
    """
    ミニバッチ Jenks 分類
    - min(sample_size, n) 個の一様サンプルで厳密な Fisher-Jenks によりブレークを推定
    - 全パッチを境界比較で割り当て（境界値ちょうどは下位クラス）
    """
    values = validate_scores(scores)
    if k < 1:
        raise InvariantError(f"k は 1 以上です: {k}", "k")
    n = values.size
    if n > sample_size:
        rng = np.random.default_rng(seed)
        sample = values[rng.choice(n, size=sample_size, replace=False)]
    else:
        sample = values

    distinct, counts = np.unique(sample, return_counts=True)
    effective_k = min(k, distinct.size)
    if effective_k < k:
        logger.info("相異なるスコア数 %d がクラス数 %d 未満のため effective_k=%d",
                    distinct.size, k, effective_k)
    if effective_k <= 1:
        breaks: Tuple[float, ...] = ()
    elif effective_k == distinct.size:
        # 値ごとに1クラス
        breaks = tuple(float(v) for v in distinct[:-1])
    else:
        breaks = _fisher_jenks_breaks(distinct, counts.astype(np.float64), effective_k)

    classes = np.searchsorted(np.asarray(breaks, dtype=np.float64), values, side="left")
    return PatchClassification(values, classes, k, None, breaks, effective_k)


def patch_mask_for_box(meta: FrameMeta, det: Detection) -> np.ndarray:
    """ボックスと正の面積で重なるパッチのマスク（行優先, 長さ n）"""
    mask = np.zeros((meta.grid_rows, meta.grid_cols), dtype=bool)
    box = det.clamp(meta.width, meta.height)
    if box.width <= 0 or box.height <= 0:
        return mask.ravel()
    p = meta.patch_size_px
    c0 = int(np.floor(box.x1 / p))
    c1 = int(np.ceil(box.x2 / p))
    r0 = int(np.floor(box.y1 / p))
    r1 = int(np.ceil(box.y2 / p))
    mask[r0:r1, c0:c1] = True
    return mask.ravel()


def importance_threshold(pc: PatchClassification, cfg: ScorerConfig) -> float:
    """T_i を決定（境界が無ければ +inf）"""
    if cfg.importance_threshold_mode is ThresholdMode.EXPLICIT:
        return float(cfg.importance_threshold)
    if not pc.breaks:
        return float("inf")
    return pc.breaks[0]


def refine_classes(pc: PatchClassification, edge_dets: Sequence[Detection], meta: FrameMeta,
                   cfg: ScorerConfig) -> PatchClassification:
    """
    スコアが T_i 以上で、かつ信頼度 T_c 以上のエッジ検出と重なるパッチを
    最下位クラス 0 に再割り当てする
    """
    if pc.n != meta.n:
        raise InvariantError(f"分類のパッチ数 {pc.n} がグリッド {meta.n} と一致しません",
                             "classes", meta.frame_id)
    t_i = importance_threshold(pc, cfg)
    confident = np.zeros(meta.n, dtype=bool)
    for det in edge_dets:
        if det.conf >= cfg.conf_threshold:
            confident |= patch_mask_for_box(meta, det)
    reassign = confident & (pc.scores >= t_i)
    if not np.any(reassign & (pc.classes > 0)):
        return pc
    classes = np.where(reassign, 0, pc.classes)
    logger.debug("frame %d: %d パッチをクラス0へ再割り当て", meta.frame_id,
                 int(np.count_nonzero(reassign & (pc.classes > 0))))
    return pc.with_classes(classes)
