"""
Hyperion コアモジュール
- types: ボックス・フレーム・品質プランなどの共通型
- scorer / profiler / scheduler / ensembler / evaluator: パイプラインの各段
- simulator / scenario: トレース駆動シミュレーションと合成シナリオ
- formats: ファイル形式
"""
