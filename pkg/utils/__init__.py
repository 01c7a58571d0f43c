"""
ユーティリティモジュール
- logging_utils: HYPERION_LOG によるログ設定
"""
