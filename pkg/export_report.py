"""
シミュレーション結果のレポート出力
- フレーム結果 → outcomes.csv（列順固定）
- 検出結果 → predictions.jsonl
- 集計 → summary.json
- スイープ → sweep.csv
- 人間向けの集計表と index.md
"""

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import pandas as pd

sys.path.insert(0, str(Path(__file__).parent))

from core.evaluator import FrameOutcome, SummaryReport, latency_deviation_rate
from core.formats import save_predictions

OUTCOME_COLUMNS = ["frame_id", "latency_ms", "deviation", "offload_bytes", "feasible", "stale"]
SWEEP_COLUMNS = ["value", "ap50", "mean_latency_ms", "mean_fps", "violation_ratio",
                 "mean_deviation", "fallback_ratio", "total_offload_mb"]


def outcomes_frame(outcomes: Sequence[FrameOutcome], latency_budget_ms: float, k: int) -> pd.DataFrame:
    """フレーム結果を固定列順の表へ（実行不能フレームの品質は 0）"""
    rows = []
    for o in outcomes:
        row = {
            "frame_id": o.frame_id,
            "latency_ms": o.measured_latency_ms,
            "deviation": latency_deviation_rate(o.measured_latency_ms, latency_budget_ms),
            "offload_bytes": o.offloaded_bytes,
            "feasible": int(o.plan.feasible),
            "stale": int(o.used_stale),
        }
        for c in range(k):
            row[f"q_{c}"] = o.plan.per_class_quality[c] if o.plan.feasible else 0
        rows.append(row)
    columns = OUTCOME_COLUMNS + [f"q_{c}" for c in range(k)]
    return pd.DataFrame(rows, columns=columns)


class ReportExporter:
    """結果ファイルを出力ディレクトリへまとめて書き出す"""

    def __init__(self, base_output_dir: str = "output"):
        self.base_output_dir = Path(base_output_dir)
        self.base_output_dir.mkdir(parents=True, exist_ok=True)
        self.written: List[Path] = []

    def _path(self, filename: str) -> Path:
        path = self.base_output_dir / filename
        self.written.append(path)
        return path

    def export_outcomes(self, outcomes: Sequence[FrameOutcome], latency_budget_ms: float, k: int,
                        filename: str = "outcomes.csv") -> Path:
        path = self._path(filename)
        df = outcomes_frame(outcomes, latency_budget_ms, k)
        df.to_csv(path, index=False, lineterminator="\n")
        return path

    def export_summary(self, summary: SummaryReport, extra: Optional[Dict] = None,
                       filename: str = "summary.json") -> Path:
        data = summary.to_dict()
        if extra:
            data.update(extra)
        return self.export_json(data, filename)

    def export_predictions(self, outcomes: Sequence[FrameOutcome],
                           filename: str = "predictions.jsonl") -> Path:
        """置き換え後の検出結果（evaluate の入力形式）"""
        path = self._path(filename)
        save_predictions({o.frame_id: o.detections for o in outcomes}, str(path))
        return path

    def export_json(self, data: Dict, filename: str) -> Path:
        path = self._path(filename)
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(data, f, ensure_ascii=False, indent=2)
            f.write("\n")
        return path

    def export_sweep(self, rows: Sequence[Dict], parameter: str, filename: str = "sweep.csv") -> Path:
        path = self._path(filename)
        df = pd.DataFrame(list(rows), columns=SWEEP_COLUMNS)
        df.insert(0, "parameter", parameter)
        df.to_csv(path, index=False, lineterminator="\n")
        return path

    def create_index(self, summary: Optional[SummaryReport] = None) -> Path:
        """出力一覧と主要指標の index.md"""
        index_file = self.base_output_dir / "index.md"
        with open(index_file, "w", encoding="utf-8", newline="\n") as f:
            f.write("# シミュレーション結果\n\n")
            if summary is not None:
                f.write("## 指標\n")
                f.write(f"- フレーム数: {summary.frames}\n")
                f.write(f"- AP50: {summary.ap50:.4f}\n")
                f.write(f"- 平均遅延: {summary.mean_latency_ms:.1f} ms ({summary.mean_fps:.2f} FPS)\n")
                f.write(f"- オフロード量: {summary.total_offload_mb:.3f} MB\n")
                f.write(f"- フォールバック率: {summary.fallback_ratio:.1%}\n\n")
            f.write("## ファイル\n")
            for path in sorted(set(self.written)):
                f.write(f"- {path.name}\n")
        return index_file


def print_summary(summary: SummaryReport, title: str = "シミュレーション結果"):
    """集計表をコンソールに表示"""
    print("\n" + "=" * 50)
    print(title)
    print("=" * 50)
    print(f"フレーム数:         {summary.frames}")
    print(f"AP50:               {summary.ap50:.4f}")
    print(f"平均遅延:           {summary.mean_latency_ms:.1f} ms")
    print(f"フレーム処理レート: {summary.mean_fps:.2f} FPS")
    print(f"オフロード量:       {summary.total_offload_mb:.3f} MB")
    print(f"遅延逸脱率(平均):   {summary.mean_deviation:.2%}")
    print(f"遅延違反率:         {summary.violation_ratio:.1%}")
    print(f"フォールバック率:   {summary.fallback_ratio:.1%}")
    print(f"代用結果率:         {summary.stale_ratio:.1%}")
    if summary.mean_class_quality:
        qualities = ", ".join(f"{q:.1f}" for q in summary.mean_class_quality)
        print(f"クラス別平均品質:   ({qualities})")
    print("-" * 50)


def print_sweep(rows: Sequence[Dict], parameter: str):
    print("\n" + "=" * 50)
    print(f"スイープ: {parameter}")
    print("=" * 50)
    df = pd.DataFrame(list(rows), columns=SWEEP_COLUMNS)
    print(df.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    print("-" * 50)


def summary_from_dict(data: Dict) -> SummaryReport:
    return SummaryReport(
        frames=int(data["frames"]),
        ap50=float(data["ap50"]),
        mean_fps=float(data["mean_fps"]),
        mean_latency_ms=float(data["mean_latency_ms"]),
        total_offload_mb=float(data["total_offload_mb"]),
        mean_deviation=float(data["mean_deviation"]),
        fallback_ratio=float(data["fallback_ratio"]),
        violation_ratio=float(data["violation_ratio"]),
        stale_ratio=float(data["stale_ratio"]),
        mean_class_quality=tuple(data.get("mean_class_quality", ())),
    )


def main():
    parser = argparse.ArgumentParser(
        description="simulate の出力ディレクトリから集計表と index.md を再作成",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
使用例:
  python export_report.py output/simulate
"""
    )
    parser.add_argument('input', help='summary.json を含むディレクトリ')
    args = parser.parse_args()

    summary_path = os.path.join(args.input, "summary.json")
    if not os.path.exists(summary_path):
        print(f"[ERROR] ファイルが見つかりません: {summary_path}")
        sys.exit(1)

    with open(summary_path, 'r', encoding='utf-8') as f:
        summary = summary_from_dict(json.load(f))

    exporter = ReportExporter(args.input)
    exporter.written.extend(sorted(Path(args.input).glob("*.csv")) + [Path(summary_path)])
    print_summary(summary)
    index = exporter.create_index(summary)
    print(f"[OK] インデックス作成: {index}")


if __name__ == "__main__":
    main()
