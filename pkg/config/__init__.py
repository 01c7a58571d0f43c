"""
設定モジュール（環境変数・JSON 設定ファイル・CLI 上書き）
"""
