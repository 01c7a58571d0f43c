"""
軽量プロファイラー
- サイズモデル: 圧縮率 = α Σ w_c q_c + α_S
- 精度モデル:   精度 = Σ β_c q_c + β_A
- オフラインのプロファイリング記録から最小二乗（正規方程式）で係数を推定
"""

import itertools
import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from core.types import (
    PROPORTION_TOLERANCE,
    InvariantError,
    QualityPalette,
    QualityPlan,
    weighted_quality,
)

logger = logging.getLogger(__name__)


class RankDeficientError(ValueError):
    """計画行列がランク落ちしている"""

    def __init__(self, model: str, regressor: str):
        super().__init__(f"{model} の計画行列がランク落ちしています: 回帰変数 '{regressor}'")
        self.model = model
        self.regressor = regressor


@dataclass(frozen=True)
class ProfilingRecord:
    """品質の組み合わせ1つに対する観測"""
    per_class_quality: Tuple[int, ...]
    per_class_proportion: Tuple[float, ...]
    observed_compression_ratio: float
    observed_accuracy: float

    def __post_init__(self):
        object.__setattr__(self, "per_class_quality", tuple(int(q) for q in self.per_class_quality))
        object.__setattr__(self, "per_class_proportion",
                           tuple(float(w) for w in self.per_class_proportion))
        if len(self.per_class_quality) != len(self.per_class_proportion):
            raise InvariantError("品質と比率の長さが一致しません", "per_class_proportion")
        if abs(sum(self.per_class_proportion) - 1.0) > PROPORTION_TOLERANCE:
            raise InvariantError("比率の合計が 1 になりません", "per_class_proportion")
        if not 0.0 < self.observed_compression_ratio <= 1.0:
            raise InvariantError(f"圧縮率は (0,1] です: {self.observed_compression_ratio}",
                                 "observed_compression_ratio")
        if not 0.0 <= self.observed_accuracy <= 1.0:
            raise InvariantError(f"精度は [0,1] です: {self.observed_accuracy}",
                                 "observed_accuracy")

    @property
    def k(self) -> int:
        return len(self.per_class_quality)

    @property
    def mean_quality(self) -> float:
        return weighted_quality(self.per_class_proportion, self.per_class_quality)

    def to_dict(self) -> Dict:
        return {
            "per_class_quality": list(self.per_class_quality),
            "per_class_proportion": list(self.per_class_proportion),
            "observed_compression_ratio": self.observed_compression_ratio,
            "observed_accuracy": self.observed_accuracy,
        }


@dataclass(frozen=True)
class ProfilerModel:
    """サイズ・精度モデルの係数"""
    alpha: float
    alpha_s: float
    betas: Tuple[float, ...]
    beta_a: float
    size_r2: float = 1.0
    acc_r2: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))

    @property
    def k(self) -> int:
        return len(self.betas)

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["betas"] = list(self.betas)
        return data

    @classmethod
    def from_dict(cls, data: Dict) -> "ProfilerModel":
        return cls(
            alpha=float(data["alpha"]),
            alpha_s=float(data["alpha_s"]),
            betas=tuple(float(b) for b in data["betas"]),
            beta_a=float(data["beta_a"]),
            size_r2=float(data.get("size_r2", 1.0)),
            acc_r2=float(data.get("acc_r2", 1.0)),
        )


def _ols(x: np.ndarray, y: np.ndarray, names: Sequence[str], model: str) -> Tuple[np.ndarray, float]:
    """正規方程式による最小二乗。返り値: (係数, R²)"""
    for j in range(1, x.shape[1] + 1):
        if np.linalg.matrix_rank(x[:, :j]) < j:
            logger.error("%s: 回帰変数 %s で計画行列がランク落ち", model, names[j - 1])
            raise RankDeficientError(model, names[j - 1])
    coef = np.linalg.solve(x.T @ x, x.T @ y)
    residual = y - x @ coef
    ss_res = float(residual @ residual)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        r2 = 1.0 if ss_res <= 1e-24 else 0.0
    else:
        r2 = 1.0 - ss_res / ss_tot
    return coef, float(min(1.0, max(0.0, r2)))


def fit(records: Sequence[ProfilingRecord], k: int) -> ProfilerModel:
    """
    プロファイリング記録からモデルを推定
    - サイズ: 圧縮率 ~ 重み付き平均品質（傾き α, 切片 α_S）
    - 精度:   精度 ~ K 個の品質（係数 β_c, 切片 β_A）
    """
    records = list(records)
    if any(r.k != k for r in records):
        raise InvariantError(f"クラス数 {k} と異なる記録が含まれています", "per_class_quality")
    if len(records) < 2:
        raise RankDeficientError("size", "q_bar")
    if len(records) < k + 1:
        raise RankDeficientError("accuracy", f"q_{len(records) - 1}" if records else "q_0")

    ratios = np.array([r.observed_compression_ratio for r in records], dtype=np.float64)
    accuracies = np.array([r.observed_accuracy for r in records], dtype=np.float64)
    q_bar = np.array([r.mean_quality for r in records], dtype=np.float64)
    qualities = np.array([r.per_class_quality for r in records], dtype=np.float64)
    ones = np.ones((len(records), 1))

    size_x = np.column_stack((q_bar, ones))
    (alpha, alpha_s), size_r2 = _ols(size_x, ratios, ["q_bar", "intercept"], "size")

    acc_x = np.concatenate((qualities, ones), axis=1)
    acc_names = [f"q_{c}" for c in range(k)] + ["intercept"]
    acc_coef, acc_r2 = _ols(acc_x, accuracies, acc_names, "accuracy")

    betas = tuple(float(b) for b in acc_coef[:k])
    negative = [c for c, b in enumerate(betas) if b < 0]
    if negative:
        logger.warning("負の精度係数 β_c が推定されました (クラス %s): %s", negative, betas)

    model = ProfilerModel(float(alpha), float(alpha_s), betas, float(acc_coef[k]),
                          size_r2, acc_r2)
    logger.info("プロファイラー推定: α=%.6g α_S=%.6g R²(size)=%.4f R²(acc)=%.4f",
                model.alpha, model.alpha_s, size_r2, acc_r2)
    return model


def predict_ratio(m: ProfilerModel, qualities: Sequence[int], proportions: Sequence[float]) -> float:
    """モデル圧縮率（クランプなし）"""
    return m.alpha * weighted_quality(proportions, qualities) + m.alpha_s


def predict_size(m: ProfilerModel, plan: QualityPlan, proportions: Sequence[float],
                 s_o: float) -> float:
    """予測圧縮サイズ [byte]、[0, S_O] にクランプ"""
    if not plan.feasible:
        raise InvariantError("実行不能なプランのサイズは予測できません", "feasible")
    size = predict_ratio(m, plan.per_class_quality, proportions) * s_o
    return float(min(max(size, 0.0), float(s_o)))


def predict_accuracy(m: ProfilerModel, plan: QualityPlan) -> float:
    """予測精度、[0,1] にクランプ"""
    value = sum(b * q for b, q in zip(m.betas, plan.per_class_quality)) + m.beta_a
    return float(min(max(value, 0.0), 1.0))


def quality_grid(palette: QualityPalette, k: int) -> List[Tuple[int, ...]]:
    """全 |Q|^K の品質組み合わせ（辞書順）"""
    return [tuple(combo) for combo in itertools.product(palette.levels, repeat=k)]


def synthesize_records(alpha: float, alpha_s: float, betas: Sequence[float], beta_a: float,
                       palette: QualityPalette, noise_std: float = 0.0, seed: int = 0,
                       proportions: Optional[Sequence[float]] = None) -> List[ProfilingRecord]:
    """
    既知の線形モデルから全組み合わせのプロファイリング記録を合成
    proportions 未指定時は記録ごとに Dirichlet で比率を引く
    """
    k = len(betas)
    rng = np.random.default_rng(seed)
    records = []
    for combo in quality_grid(palette, k):
        if proportions is None:
            w = rng.dirichlet(np.ones(k))
            w = w / w.sum()
        else:
            w = np.asarray(proportions, dtype=np.float64)
        w = tuple(float(v) for v in w)
        ratio = alpha * weighted_quality(w, combo) + alpha_s
        acc = sum(b * q for b, q in zip(betas, combo)) + beta_a
        if noise_std > 0:
            ratio += float(rng.normal(0.0, noise_std))
            acc += float(rng.normal(0.0, noise_std))
        ratio = min(max(ratio, 1e-6), 1.0)
        acc = min(max(acc, 0.0), 1.0)
        records.append(ProfilingRecord(combo, w, ratio, acc))
    return records
