"""
エッジ/クラウド検出結果のアンサンブル
- IoU 貪欲マッチングでペアを作る
- ペアは信頼度を重みとした角座標の加重平均で統合
- 未マッチの検出はそのまま残し、最後に NMS で重複を除去
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np

from core.types import Detection, DetectionSource, InvariantError, iou_matrix

logger = logging.getLogger(__name__)

DEFAULT_MATCH_IOU = 0.5
DEFAULT_NMS_IOU = 0.25


@dataclass(frozen=True)
class MatchResult:
    """マッチング結果"""
    pairs: Tuple[Tuple[int, int], ...]
    unmatched_edge: Tuple[int, ...]
    unmatched_cloud: Tuple[int, ...]


def _check_threshold(value: float, name: str):
    if not 0.0 < value <= 1.0:
        raise InvariantError(f"{name} は (0,1] です: {value}", name)


def match_pairs(edge: Sequence[Detection], cloud: Sequence[Detection],
                iou_thresh: float = DEFAULT_MATCH_IOU) -> MatchResult:
    """IoU の大きい順に貪欲にペアを確定（同値は (edge_idx, cloud_idx) の小さい順）"""
    _check_threshold(iou_thresh, "iou_thresh")
    ious = iou_matrix(edge, cloud)
    candidates = [(-float(ious[i, j]), i, j)
                  for i, j in zip(*np.nonzero(ious >= iou_thresh))]
    candidates.sort()

    used_edge, used_cloud = set(), set()
    pairs = []
    for _, i, j in candidates:
        if i in used_edge or j in used_cloud:
            continue
        used_edge.add(i)
        used_cloud.add(j)
        pairs.append((int(i), int(j)))

    return MatchResult(
        pairs=tuple(sorted(pairs)),
        unmatched_edge=tuple(i for i in range(len(edge)) if i not in used_edge),
        unmatched_cloud=tuple(j for j in range(len(cloud)) if j not in used_cloud),
    )


def fuse(e: Detection, c: Detection) -> Detection:
    """
    信頼度加重平均による統合
    F = (E·w_e + C·w_c) / (w_e + w_c),  F_conf = (w_e + w_c) / 2
    """
    if {e.source, c.source} != {DetectionSource.EDGE, DetectionSource.CLOUD}:
        raise InvariantError(f"エッジとクラウドの組が必要です: {e.source.value}, {c.source.value}",
                             "source")
    w_e, w_c = e.conf, c.conf
    total = w_e + w_c
    if total <= 0:
        raise InvariantError("両方の信頼度が 0 のため重みが定義できません", "conf")

    corners = []
    for a, b in ((e.x1, c.x1), (e.y1, c.y1), (e.x2, c.x2), (e.y2, c.y2)):
        value = (a * w_e + b * w_c) / total
        # 丸め誤差で入力区間をはみ出さないように
        corners.append(min(max(value, min(a, b)), max(a, b)))
    return Detection(corners[0], corners[1], corners[2], corners[3],
                     min(total / 2.0, 1.0), DetectionSource.FUSED)


def nms(dets: Sequence[Detection], iou_thresh: float = DEFAULT_NMS_IOU) -> List[Detection]:
    """貪欲 NMS（信頼度降順、同値は入力順）"""
    _check_threshold(iou_thresh, "iou_thresh")
    if len(dets) <= 1:
        return list(dets)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].conf, i))
    ious = iou_matrix(dets, dets)
    suppressed = np.zeros(len(dets), dtype=bool)
    kept = []
    for i in order:
        if suppressed[i]:
            continue
        kept.append(dets[i])
        suppressed |= ious[i] >= iou_thresh
    return kept


def ensemble(edge: Sequence[Detection], cloud: Optional[Sequence[Detection]],
             match_thresh: float = DEFAULT_MATCH_IOU,
             nms_thresh: float = DEFAULT_NMS_IOU) -> List[Detection]:
    """match → fuse → 未マッチ追加 → NMS。クラウド結果なしなら nms(edge)"""
    if not cloud:
        return nms(edge, nms_thresh)
    result = match_pairs(edge, cloud, match_thresh)
    merged = [fuse(edge[i], cloud[j]) for i, j in result.pairs]
    merged.extend(edge[i] for i in result.unmatched_edge)
    merged.extend(cloud[j] for j in result.unmatched_cloud)
    logger.debug("アンサンブル: ペア %d, エッジ単独 %d, クラウド単独 %d",
                 len(result.pairs), len(result.unmatched_edge), len(result.unmatched_cloud))
    return nms(merged, nms_thresh)
