"""
Hyperion シミュレーター - メインモジュール
エッジ/クラウド協調 ViT 推論のスケジューリングをネットワークトレース上で再現する
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from dotenv import load_dotenv

# Add current directory to path
sys.path.append(str(Path(__file__).parent))

from config.config import ConfigError, SimConfig, Variant, load_config
from core.evaluator import ap50
from core.formats import (
    load_context,
    load_frames,
    load_model,
    load_predictions,
    load_records,
    load_trace,
    save_json,
    save_model,
    save_scenario,
)
from core.profiler import ProfilerModel, ProfilingRecord, fit
from core.scenario import ScenarioSpec, generate_scenario
from core.scheduler import is_feasible, max_frame_size, predicted_latency_ms, schedule
from core.simulator import (
    SWEEP_PARAMETERS,
    CompressionModel,
    FrameRecord,
    ground_truth_of,
    replay,
    sweep,
)
from export_report import ReportExporter, print_summary, print_sweep
from utils.logging_utils import setup_logging

logger = logging.getLogger(__name__)

DEFAULT_SPEC_PATH = Path(__file__).parent / "data" / "scenario_default.json"


def load_scenario_spec(path: Optional[str] = None) -> ScenarioSpec:
    """シナリオ生成パラメータ（省略時は同梱の既定ファイル）"""
    spec_path = Path(path) if path else DEFAULT_SPEC_PATH
    if not spec_path.exists():
        if path:
            raise ConfigError(f"シナリオ設定が見つかりません: {path}")
        return ScenarioSpec()
    with open(spec_path, 'r', encoding='utf-8') as f:
        try:
            return ScenarioSpec.from_dict(json.load(f))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"シナリオ設定が不正です: {spec_path}: {e}") from e


class HyperionRunner:
    """入力の組み立てからリプレイ・レポート出力までをまとめる"""

    def __init__(self, config: Optional[SimConfig] = None):
        self.config = config or SimConfig()

    def load_inputs(self, args) -> Tuple[List[FrameRecord], List[Tuple[float, float]],
                                         CompressionModel, List[ProfilingRecord]]:
        """
        入力の決定
        - --scenario-dir: generate の出力一式
        - --frames/--trace/--truth: 個別ファイル
        - どちらも無し: 同梱の合成シナリオをメモリ上で生成
        """
        if args.scenario_dir:
            base = Path(args.scenario_dir)
            frames = load_frames(str(base / "frames.jsonl"))
            trace = load_trace(str(base / "trace.csv"))
            compression = self._compression_from_truth(str(base / "scenario.json"))
            records_path = base / "profiling.jsonl"
            records = load_records(str(records_path)) if records_path.exists() else []
            return frames, trace, compression, records

        if args.frames or args.trace:
            if not (args.frames and args.trace and args.truth):
                raise ConfigError("--frames, --trace, --truth は同時に指定してください")
            records = load_records(args.records) if args.records else []
            return (load_frames(args.frames), load_trace(args.trace),
                    self._compression_from_truth(args.truth), records)

        spec = load_scenario_spec(args.scenario_spec)
        seed = args.seed if args.seed is not None else self.config.rng_seed
        scenario = generate_scenario(spec, seed)
        print(f"[OK] 合成シナリオを生成しました ({len(scenario.frames)} フレーム, seed={seed})")
        return scenario.frames, scenario.trace, scenario.compression, scenario.profiling_records

    @staticmethod
    def _compression_from_truth(path: str) -> CompressionModel:
        with open(path, 'r', encoding='utf-8') as f:
            truth = json.load(f)
        size = truth["size_model"]
        return CompressionModel(float(size["alpha"]), float(size["alpha_s"]),
                                float(size.get("noise_std", 0.0)))

    def resolve_model(self, model_path: Optional[str], records: Sequence[ProfilingRecord]) -> ProfilerModel:
        if model_path:
            return load_model(model_path)
        if not records:
            raise ConfigError("プロファイラーモデル (--model) かプロファイリング記録が必要です")
        return fit(records, self.config.scorer.k)

    def simulate(self, args) -> Dict:
        frames, trace, compression, records = self.load_inputs(args)
        model = self.resolve_model(args.model, records)
        result = replay(frames, trace, self.config, model, compression)

        exporter = ReportExporter(args.output)
        exporter.export_outcomes(result.outcomes, self.config.latency_budget_ms, self.config.scorer.k)
        exporter.export_predictions(result.outcomes)
        exporter.export_summary(result.summary, {"variant": self.config.variant.value,
                                                 "seed": self.config.rng_seed})
        exporter.create_index(result.summary)
        self._print_summary(result.summary)
        print(f"[OK] 出力先: {exporter.base_output_dir}")
        return result.summary.to_dict()

    def sweep(self, args) -> List[Dict]:
        frames, trace, compression, records = self.load_inputs(args)
        model = self.resolve_model(args.model, records)

        def _progress(value, summary):
            print(f"[OK] {args.parameter}={value:g}: AP50={summary.ap50:.4f} "
                  f"遅延={summary.mean_latency_ms:.1f}ms")

        rows = sweep(frames, trace, self.config, model, compression, args.parameter,
                     args.values, workers=args.workers, progress=_progress)
        exporter = ReportExporter(args.output)
        exporter.export_sweep(rows, args.parameter)
        print_sweep(rows, args.parameter)
        print(f"[OK] 出力先: {exporter.base_output_dir}")
        return rows

    def _print_summary(self, summary):
        print_summary(summary, f"シミュレーション結果 (variant={self.config.variant.value}, "
                               f"L={self.config.latency_budget_ms:g}ms)")


# ============================================================
# サブコマンド
# ============================================================

def cmd_simulate(args, config: SimConfig) -> int:
    HyperionRunner(config).simulate(args)
    return 0


def cmd_sweep(args, config: SimConfig) -> int:
    HyperionRunner(config).sweep(args)
    return 0


def cmd_profile_fit(args, config: SimConfig) -> int:
    records = load_records(args.records)
    k = args.k or config.scorer.k
    model = fit(records, k)
    save_model(model, args.output)
    print(f"[OK] {len(records)} 件の記録からモデルを推定しました")
    print(f"  α={model.alpha:.6g}  α_S={model.alpha_s:.6g}  R²={model.size_r2:.4f}")
    print(f"  β={', '.join(f'{b:.6g}' for b in model.betas)}  β_A={model.beta_a:.6g}  R²={model.acc_r2:.4f}")
    if any(b < 0 for b in model.betas):
        print("[WARNING] 負の精度係数があります")
    print(f"[OK] 出力: {args.output}")
    return 0


def cmd_schedule(args, config: SimConfig) -> int:
    ctx = load_context(args.context)
    plan = schedule(ctx)
    result = {
        "feasible": plan.feasible,
        "per_class_quality": list(plan.per_class_quality),
        "dp_budget": max_frame_size(ctx) if ctx.model.alpha > 0 else None,
    }
    if plan.feasible:
        result["predicted_latency_ms"] = predicted_latency_ms(ctx, plan.per_class_quality)
        result["within_budget"] = is_feasible(ctx, plan.per_class_quality)
    else:
        print("[WARNING] 実行可能なプランがありません（デバイスのみ推論）")
    text = json.dumps(result, ensure_ascii=False, indent=2)
    print(text)
    if args.output:
        save_json(result, args.output)
    return 0


def cmd_generate(args, config: SimConfig) -> int:
    spec = load_scenario_spec(args.scenario_spec)
    seed = args.seed if args.seed is not None else config.rng_seed
    scenario = generate_scenario(spec, seed)
    paths = save_scenario(scenario, args.output)
    print(f"[OK] シナリオを生成しました: {len(scenario.frames)} フレーム, "
          f"トレース {len(scenario.trace)} 点, 記録 {len(scenario.profiling_records)} 件")
    for name, path in paths.items():
        print(f"  {name}: {path}")
    return 0


def cmd_evaluate(args, config: SimConfig) -> int:
    predictions = load_predictions(args.predictions)
    frames = load_frames(args.frames)
    ground_truth = ground_truth_of(frames)
    missing = sorted(set(ground_truth) - set(predictions))
    if missing:
        print(f"[WARNING] 予測のないフレームがあります: {len(missing)} 件")
    metrics = {
        "frames": len(ground_truth),
        "predicted_frames": len(predictions),
        "ap50": ap50(predictions, ground_truth),
    }
    save_json(metrics, args.output)
    print(f"[OK] AP50={metrics['ap50']:.4f}  出力: {args.output}")
    return 0


def _add_common(parser: argparse.ArgumentParser):
    parser.add_argument("--config", help="設定ファイル（JSON形式）", default=None)
    parser.add_argument("--seed", help="乱数シード", type=int, default=None)
    parser.add_argument("--verbose", help="詳細な出力（エラー時にトレースバックを表示）",
                        action="store_true")


def _add_inputs(parser: argparse.ArgumentParser):
    parser.add_argument("--scenario-dir", help="generate の出力ディレクトリ", default=None)
    parser.add_argument("--frames", help="フレーム記録 (JSONL)", default=None)
    parser.add_argument("--trace", help="帯域トレース (CSV)", default=None)
    parser.add_argument("--truth", help="実圧縮サイズモデル (scenario.json)", default=None)
    parser.add_argument("--records", help="プロファイリング記録 (JSONL)", default=None)
    parser.add_argument("--model", help="プロファイラーモデル (JSON)", default=None)
    parser.add_argument("--scenario-spec", help="入力省略時に生成するシナリオの設定 (JSON)", default=None)
    parser.add_argument("--variant", choices=[v.value for v in Variant], default=None,
                        help="パイプライン構成")
    parser.add_argument("--latency-budget", type=float, default=None, help="遅延制約 L [ms]")
    parser.add_argument("--bandwidth-scale", type=float, default=None, help="トレース帯域の倍率")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hyperion",
        description="エッジ/クラウド協調 ViT 推論スケジューリングのトレース駆動シミュレーター",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="フレーム列をトレース上で再生し結果と集計を出力")
    _add_common(p)
    _add_inputs(p)
    p.add_argument("-o", "--output", default="output/simulate", help="出力ディレクトリ")
    p.set_defaults(handler=cmd_simulate)

    p = sub.add_parser("profile-fit", help="プロファイリング記録からモデル係数を推定")
    _add_common(p)
    p.add_argument("--records", required=True, help="プロファイリング記録 (JSONL)")
    p.add_argument("-k", type=int, default=None, help="クラス数（省略時は設定値）")
    p.add_argument("-o", "--output", default="model.json", help="出力するモデルファイル")
    p.set_defaults(handler=cmd_profile_fit)

    p = sub.add_parser("schedule", help="単一のスケジューリング入力から品質プランを計算")
    _add_common(p)
    p.add_argument("--context", required=True, help="スケジューリング入力 (JSON)")
    p.add_argument("-o", "--output", default=None, help="結果の出力先 (JSON)")
    p.set_defaults(handler=cmd_schedule)

    p = sub.add_parser("generate", help="合成シナリオ（フレーム・トレース・記録）を生成")
    _add_common(p)
    p.add_argument("--scenario-spec", default=None, help="シナリオ設定 (JSON)")
    p.add_argument("-o", "--output", default="output/scenario", help="出力ディレクトリ")
    p.set_defaults(handler=cmd_generate)

    p = sub.add_parser("evaluate", help="予測結果と正解から AP50 を計算")
    _add_common(p)
    p.add_argument("--predictions", required=True, help="予測結果 (JSONL)")
    p.add_argument("--frames", required=True, help="正解を含むフレーム記録 (JSONL)")
    p.add_argument("-o", "--output", default="metrics.json", help="出力する指標ファイル")
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("sweep", help="遅延制約または帯域倍率を変えて並列リプレイ")
    _add_common(p)
    _add_inputs(p)
    p.add_argument("--parameter", choices=SWEEP_PARAMETERS, default="latency_budget_ms")
    p.add_argument("--values", type=float, nargs="+", required=True, help="試す値")
    p.add_argument("--workers", type=int, default=4, help="並列数")
    p.add_argument("-o", "--output", default="output/sweep", help="出力ディレクトリ")
    p.set_defaults(handler=cmd_sweep)
    return parser


def _overrides(args) -> Dict:
    """CLI フラグによる設定の上書き"""
    return {
        "rng_seed": args.seed,
        "variant": getattr(args, "variant", None),
        "latency_budget_ms": getattr(args, "latency_budget", None),
        "bandwidth_scale": getattr(args, "bandwidth_scale", None),
    }


def main(argv: Optional[Sequence[str]] = None) -> int:
    """CLI エントリーポイント"""
    load_dotenv()
    setup_logging()
    args = build_parser().parse_args(argv)

    try:
        config = load_config(args.config, _overrides(args))
        return args.handler(args, config)
    except KeyboardInterrupt:
        print("\n処理が中断されました。")
        return 1
    except Exception as e:
        print(f"[ERROR] {type(e).__name__}: {e}")
        if args.verbose:
            import traceback
            traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
