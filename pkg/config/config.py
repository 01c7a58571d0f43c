import json
import math
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Tuple

from core.scorer import ScorerConfig
from core.types import DEFAULT_PALETTE_LEVELS, QualityPalette


class ConfigError(ValueError):
    """設定キー・設定値の不正"""


def _env_float(name: str, default: float) -> float:
    return float(os.getenv(name, default))


def _env_int(name: str, default: int) -> int:
    return int(os.getenv(name, default))


class Variant(Enum):
    """パイプラインの構成（アブレーション用）"""
    FULL = "full"
    NO_REFINE = "no_refine"           # 協調考慮の再割り当てなし
    FIXED_QUALITY = "fixed_quality"   # スケジューラーなし、固定品質で常に送信
    CLOUD_ONLY = "cloud_only"         # アンサンブルせずクラウド結果を採用


class SchedulingTimeMode(Enum):
    """スケジューリング時間の計上方法"""
    FIXED = "fixed"        # scheduling_overhead_ms を計上（再現性のため既定）
    MEASURED = "measured"  # 実測の壁時計時間を計上


@dataclass
class DegradationCoeffs:
    """クラウド推論の品質劣化モデル"""
    p_base: float = 0.3   # 品質 0 での生存確率
    gamma: float = 0.7    # 品質に比例する生存確率の増分
    delta: float = 0.05   # 位置ずれの大きさ（対角長比）

    def __post_init__(self):
        for name in ("p_base", "gamma", "delta"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
                raise ConfigError(f"{name} は有限の数値です: {value!r}")
        if self.delta < 0:
            raise ConfigError(f"delta は非負です: {self.delta}")


@dataclass
class SimConfig:
    # 遅延設定 [ms]
    latency_budget_ms: float = field(default_factory=lambda: _env_float("HYPERION_LATENCY_BUDGET_MS", 400.0))
    device_latency_ms: float = field(default_factory=lambda: _env_float("HYPERION_DEVICE_LATENCY_MS", 150.0))
    cloud_latency_ms: float = field(default_factory=lambda: _env_float("HYPERION_CLOUD_LATENCY_MS", 100.0))
    return_latency_ms: float = field(default_factory=lambda: _env_float("HYPERION_RETURN_LATENCY_MS", 0.0))

    # 帯域推定
    bandwidth_window: int = field(default_factory=lambda: _env_int("HYPERION_BANDWIDTH_WINDOW", 5))
    bootstrap_bandwidth_mbps: float = field(default_factory=lambda: _env_float("HYPERION_BOOTSTRAP_BANDWIDTH_MBPS", 50.0))
    min_bandwidth_mbps: float = 0.001           # トレース上の 0 Mbps をこの値に切り上げ
    bandwidth_scale: float = 1.0                # トレース帯域の倍率（スイープ用）
    probe_on_fallback: bool = True              # フォールバック時もトレース帯域を観測
    trace_loop: bool = False                    # トレース末尾で先頭に戻る

    # スケジューラー
    dp_scale: int = field(default_factory=lambda: _env_int("HYPERION_DP_SCALE", 1000))
    palette_levels: Tuple[int, ...] = DEFAULT_PALETTE_LEVELS
    scheduling_time_mode: SchedulingTimeMode = SchedulingTimeMode.FIXED
    scheduling_overhead_ms: float = 2.5

    # スコアラー・アンサンブル
    scorer: ScorerConfig = field(default_factory=ScorerConfig)
    match_iou: float = 0.5
    nms_iou: float = 0.25

    # シミュレーション
    degradation: DegradationCoeffs = field(default_factory=DegradationCoeffs)
    variant: Variant = Variant.FULL
    fixed_qualities: Tuple[int, ...] = (15, 45, 75)
    rng_seed: int = field(default_factory=lambda: _env_int("HYPERION_SEED", 42))

    def __post_init__(self):
        if isinstance(self.variant, str):
            self.variant = Variant(self.variant)
        if isinstance(self.scheduling_time_mode, str):
            self.scheduling_time_mode = SchedulingTimeMode(self.scheduling_time_mode)
        self.palette_levels = tuple(int(q) for q in self.palette_levels)
        self.fixed_qualities = tuple(int(q) for q in self.fixed_qualities)

        for name in ("latency_budget_ms", "bootstrap_bandwidth_mbps", "min_bandwidth_mbps",
                     "bandwidth_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} は正である必要があります: {getattr(self, name)}")
        for name in ("device_latency_ms", "cloud_latency_ms", "return_latency_ms",
                     "scheduling_overhead_ms"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} は非負である必要があります: {getattr(self, name)}")
        if self.bandwidth_window < 1 or self.dp_scale < 1:
            raise ConfigError("bandwidth_window と dp_scale は 1 以上です")
        for name in ("match_iou", "nms_iou"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} は (0,1] です: {getattr(self, name)}")
        palette = self.palette
        if len(self.fixed_qualities) != self.scorer.k:
            raise ConfigError(
                f"fixed_qualities の長さ {len(self.fixed_qualities)} が k={self.scorer.k} と一致しません")
        if any(q not in palette for q in self.fixed_qualities):
            raise ConfigError(f"fixed_qualities がパレット外です: {self.fixed_qualities}")

    @property
    def palette(self) -> QualityPalette:
        try:
            return QualityPalette(self.palette_levels)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["variant"] = self.variant.value
        data["scheduling_time_mode"] = self.scheduling_time_mode.value
        data["scorer"]["importance_threshold_mode"] = self.scorer.importance_threshold_mode.value
        data["palette_levels"] = list(self.palette_levels)
        data["fixed_qualities"] = list(self.fixed_qualities)
        return data


def _merge(current, data: Dict[str, Any], section: str = ""):
    """データクラスに辞書をマージ（未知キーはエラー）"""
    if not isinstance(data, dict):
        raise ConfigError(f"{section or '設定'} はオブジェクトである必要があります")
    known = {f.name for f in fields(current)}
    updates = {}
    for key, value in data.items():
        if key not in known:
            raise ConfigError(f"不明な設定キーです: {section}{key}")
        nested = getattr(current, key)
        if is_dataclass(nested):
            updates[key] = _merge(nested, value, f"{section}{key}.")
        else:
            updates[key] = value
    try:
        return replace(current, **updates)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{section or '設定'}の値が不正です: {e}") from e


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> SimConfig:
    """
    設定の読み込み
    優先順位: CLI 上書き > 設定ファイル (JSON) > 環境変数 > 既定値
    """
    cfg = SimConfig()
    if path:
        config_path = Path(path)
        if not config_path.exists():
            raise ConfigError(f"設定ファイルが見つかりません: {path}")
        try:
            with open(config_path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"設定ファイルの JSON が不正です: {path}: {e}") from e
        cfg = _merge(cfg, data)
    if overrides:
        cfg = _merge(cfg, {k: v for k, v in overrides.items() if v is not None})
    return cfg
