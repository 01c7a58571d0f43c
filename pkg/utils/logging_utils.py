"""
ログ設定
環境変数 HYPERION_LOG (error|warn|info|debug) でログレベルを切り替える
"""

import logging
import os
from typing import Optional

LOG_ENV = "HYPERION_LOG"
DEFAULT_LEVEL = "warn"

LEVELS = {
    "error": logging.ERROR,
    "warn": logging.WARNING,
    "info": logging.INFO,
    "debug": logging.DEBUG,
}

_configured = False


def resolve_level(name: Optional[str]) -> int:
    """レベル名を logging の数値へ。未知の値は warn"""
    if name is None or not name.strip():
        return LEVELS[DEFAULT_LEVEL]
    return LEVELS.get(name.strip().lower(), LEVELS[DEFAULT_LEVEL])


def setup_logging(level_name: Optional[str] = None) -> int:
    """ルートロガーを一度だけ設定し、適用したレベルを返す"""
    global _configured
    name = level_name if level_name is not None else os.getenv(LOG_ENV, DEFAULT_LEVEL)
    level = resolve_level(name)
    root = logging.getLogger()
    if not _configured:
        handler = logging.StreamHandler()
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        root.addHandler(handler)
        _configured = True
    root.setLevel(level)
    if name and name.strip().lower() not in LEVELS:
        logging.getLogger(__name__).warning("%s=%r は未知の値のため %s を使用します",
                                            LOG_ENV, name, DEFAULT_LEVEL)
    return level
