"""
適応型送信スケジューラー
- 調和平均による帯域推定
- 遅延制約 → 最大フレームサイズ（DP の整数予算）への変換
- 多選択ナップサック (MCKP) を動的計画法で厳密に解く
- 解が無い場合はデバイスのみ推論へフォールバック
"""

import logging
import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Deque, Dict, List, Optional, Sequence, Tuple

from core.profiler import ProfilerModel, predict_size
from core.types import (
    BITS_PER_BYTE,
    KILO,
    PROPORTION_TOLERANCE,
    QualityPalette,
    QualityPlan,
    transmission_latency_ms,
)

logger = logging.getLogger(__name__)


class SchedulingError(ValueError):
    """スケジューリング入力の不正"""


class BandwidthEstimator:
    """直近 W_b 個のスループット観測の調和平均"""

    def __init__(self, capacity: int = 5):
        if capacity < 1:
            raise SchedulingError(f"窓幅は 1 以上です: {capacity}")
        self.capacity = capacity
        self._window: Deque[float] = deque(maxlen=capacity)
        self._estimate: Optional[float] = None

    def observe(self, sample_mbps: float) -> "BandwidthEstimator":
        if not sample_mbps > 0 or not math.isfinite(sample_mbps):
            raise SchedulingError(f"スループット観測は正の有限値です: {sample_mbps}")
        self._window.append(float(sample_mbps))
        # 有理数で計算し、同一値の窓では推定値がその値に一致するようにする
        inverse_sum = sum((1 / Fraction(s) for s in self._window), Fraction(0))
        self._estimate = float(len(self._window) / inverse_sum)
        return self

    @property
    def estimate(self) -> Optional[float]:
        return self._estimate

    @property
    def samples(self) -> Tuple[float, ...]:
        return tuple(self._window)

    def snapshot(self, bootstrap_mbps: float) -> float:
        """スケジューラーに渡す読み取り専用の推定値（未観測時はブートストラップ値）"""
        return self._estimate if self._estimate is not None else float(bootstrap_mbps)


def observe_throughput(est: BandwidthEstimator, sample_mbps: float) -> BandwidthEstimator:
    return est.observe(sample_mbps)


@dataclass(frozen=True)
class ScheduleContext:
    """1フレーム分のスケジューリング入力"""
    latency_budget_ms: float
    device_latency_ms: float
    cloud_latency_ms: float
    bandwidth_mbps: float
    original_size_bytes: float
    proportions: Tuple[float, ...]
    model: ProfilerModel
    palette: QualityPalette = field(default_factory=QualityPalette)
    dp_scale: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "proportions", tuple(float(w) for w in self.proportions))
        for name in ("latency_budget_ms", "device_latency_ms", "cloud_latency_ms"):
            if getattr(self, name) < 0:
                raise SchedulingError(f"{name} は非負です: {getattr(self, name)}")
        if self.dp_scale < 1:
            raise SchedulingError(f"dp_scale は 1 以上です: {self.dp_scale}")
        if self.bandwidth_mbps < 0:
            raise SchedulingError(f"帯域は非負です: {self.bandwidth_mbps}")
        if self.original_size_bytes <= 0:
            raise SchedulingError(f"元サイズは正です: {self.original_size_bytes}")
        if len(self.proportions) != self.model.k:
            raise SchedulingError(
                f"クラス数不一致: proportions={len(self.proportions)} model={self.model.k}")
        if abs(sum(self.proportions) - 1.0) > PROPORTION_TOLERANCE:
            raise SchedulingError("proportions の合計が 1 になりません")

    @property
    def k(self) -> int:
        return len(self.proportions)

    @property
    def transmit_window_ms(self) -> float:
        return self.latency_budget_ms - self.device_latency_ms - self.cloud_latency_ms


def predicted_latency_ms(ctx: ScheduleContext, qualities: Sequence[int]) -> float:
    """予測 E2E 遅延 = L_d + 予測サイズ / B + L_c"""
    size = predict_size(ctx.model, QualityPlan(tuple(qualities)), ctx.proportions,
                        ctx.original_size_bytes)
    return (ctx.device_latency_ms + transmission_latency_ms(size, ctx.bandwidth_mbps)
            + ctx.cloud_latency_ms)


def _exact_size_limit(ctx: ScheduleContext) -> Fraction:
    """送信可能な最大バイト数（有理数で厳密に）"""
    window = (Fraction(ctx.latency_budget_ms) - Fraction(ctx.device_latency_ms)
              - Fraction(ctx.cloud_latency_ms))
    return Fraction(ctx.bandwidth_mbps) * Fraction(int(KILO)) * window / BITS_PER_BYTE


def _exact_mass_limit(ctx: ScheduleContext) -> Optional[Fraction]:
    """
    α > 0 のとき、遅延制約 ⇔ Σ w_c q_c ≤ 返り値
    None は全プランが実行可能（クランプ後サイズ S_O が収まる）
    """
    limit = _exact_size_limit(ctx)
    s_o = Fraction(ctx.original_size_bytes)
    if limit >= s_o:
        return None
    alpha = Fraction(ctx.model.alpha)
    return (limit / s_o - Fraction(ctx.model.alpha_s)) / alpha


def is_feasible(ctx: ScheduleContext, qualities: Sequence[int]) -> bool:
    """遅延制約を有理数演算で厳密に評価"""
    limit = _exact_size_limit(ctx)
    if limit < 0:
        return False
    s_o = Fraction(ctx.original_size_bytes)
    mass = sum((Fraction(w) * q for w, q in zip(ctx.proportions, qualities)), Fraction(0))
    size = (Fraction(ctx.model.alpha) * mass + Fraction(ctx.model.alpha_s)) * s_o
    size = min(max(size, Fraction(0)), s_o)
    return size <= limit


def max_frame_size(ctx: ScheduleContext) -> Optional[int]:
    """
    遅延制約から DP の整数予算 S_max を計算（スケール済み品質質量の単位）
    S_max = ⌊dp_scale · (B(L − L_d − L_c)/S_O − α_S)⌋
    None は送信予算が無い（即座に実行不能）
    """
    if ctx.model.alpha <= 0:
        raise SchedulingError(f"α ≤ 0 のため DP 予算は定義されません: {ctx.model.alpha}")
    if ctx.transmit_window_ms <= 0:
        return None
    ratio_max = _exact_size_limit(ctx) / Fraction(ctx.original_size_bytes)
    budget = math.floor(ctx.dp_scale * (ratio_max - Fraction(ctx.model.alpha_s)))
    if budget < 0:
        return None
    return int(budget)


@dataclass
class _Entry:
    """DP 表の1要素（Path 行列のバックポインタ付き）"""
    value: Fraction      # β_A + Σ β_c q_c
    mass: Fraction       # Σ w_c q_c
    quality: int
    parent: Optional["_Entry"] = None

    @property
    def path(self) -> Tuple[int, ...]:
        out = []
        node: Optional[_Entry] = self
        while node is not None:
            out.append(node.quality)
            node = node.parent
        return tuple(reversed(out))


def _dominates(a: _Entry, b: _Entry) -> bool:
    """
    同じスケール済みサイズ状態で a が b を支配するか
    同じ後続選択に対して a は常に実行可能性で劣らず、目的値または辞書順で勝つ
    """
    if a.value < b.value or a.mass > b.mass:
        return False
    return a.value > b.value or a.path < b.path


def _insert(frontier: List[_Entry], entry: _Entry) -> None:
    if any(_dominates(other, entry) for other in frontier):
        return
    frontier[:] = [other for other in frontier if not _dominates(entry, other)]
    frontier.append(entry)


def _bypass_plan(ctx: ScheduleContext) -> QualityPlan:
    """α ≤ 0: サイズが品質に依存しないため DP を使わない"""
    all_max = (ctx.palette.q_max,) * ctx.k
    all_min = (ctx.palette.q_min,) * ctx.k
    if is_feasible(ctx, all_max):
        return QualityPlan(all_max)
    if is_feasible(ctx, all_min):
        return QualityPlan(all_min)
    return QualityPlan.infeasible(ctx.k)


def schedule(ctx: ScheduleContext) -> QualityPlan:
    """
    MCKP の DP 解法
    - クラスごとに全品質を試し、スケール済みサイズ ⌊dp_scale·α·w_c·q⌋ を状態として累積
    - 状態ごとに (精度, 厳密な品質質量) のパレート前線を保持し、切り捨て誤差でも最適性を失わない
    - 最後に厳密な遅延制約を満たす状態のうち最良を選択
    同点時: スケール済みサイズが小さい方 → 品質ベクトルの辞書順で小さい方
    """
    k = ctx.k
    if ctx.transmit_window_ms <= 0:
        return QualityPlan.infeasible(k)
    if ctx.model.alpha <= 0:
        return _bypass_plan(ctx)
    budget = max_frame_size(ctx)
    if budget is None:
        return QualityPlan.infeasible(k)
    mass_limit = _exact_mass_limit(ctx)
    if mass_limit is None:
        # S_O 以下にクランプされたサイズが必ず収まるので状態の上限は無い
        budget = math.inf

    scale_alpha = Fraction(ctx.dp_scale) * Fraction(ctx.model.alpha)
    items: List[List[Tuple[int, int, Fraction, Fraction]]] = []
    for c in range(k):
        w = Fraction(ctx.proportions[c])
        beta = Fraction(ctx.model.betas[c])
        items.append([(q, math.floor(scale_alpha * w * q), beta * q, w * q)
                      for q in ctx.palette.levels])

    table: Dict[int, List[_Entry]] = {0: [_Entry(Fraction(ctx.model.beta_a), Fraction(0), 0)]}
    for c in range(k):
        new_table: Dict[int, List[_Entry]] = {}
        for s in sorted(table):
            for entry in table[s]:
                for q, cost, gain, mass in items[c]:
                    s_next = s + cost
                    if s_next > budget:
                        continue
                    parent = entry if c > 0 else None
                    _insert(new_table.setdefault(s_next, []),
                            _Entry(entry.value + gain, entry.mass + mass, q, parent))
        table = new_table

    best_key = None
    best_path: Optional[Tuple[int, ...]] = None
    for s, frontier in table.items():
        for entry in frontier:
            if mass_limit is not None and entry.mass > mass_limit:
                continue
            path = entry.path
            key = (-entry.value, s, path)
            if best_key is None or key < best_key:
                best_key, best_path = key, path

    if best_path is None:
        logger.debug("実行可能な品質プランがありません (B=%.3f Mbps)", ctx.bandwidth_mbps)
        return QualityPlan.infeasible(k)
    return QualityPlan(best_path).validate(ctx.palette)


def fixed_plan(qualities: Sequence[int], palette: QualityPalette) -> QualityPlan:
    """固定品質ポリシー（スケジューラー無効化時）"""
    return QualityPlan(tuple(qualities)).validate(palette)
