"""
ファイル形式の読み書き
- 帯域トレース: `<timestamp_ms>,<bandwidth_mbps>` の行形式（# はコメント）
- フレーム記録: 1行1フレームの JSON Lines、密なアテンションは別ファイルのバイナリ
- プロファイリング記録 / モデル / 予測結果 / スケジューリング入力: JSON
"""

import json
import logging
import os
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from core.profiler import ProfilerModel, ProfilingRecord
from core.scheduler import ScheduleContext
from core.simulator import FrameRecord
from core.types import (
    AttentionTensor,
    Detection,
    DetectionSource,
    FrameMeta,
    InvariantError,
    QualityPalette,
)

logger = logging.getLogger(__name__)

# アテンションファイルのヘッダ: magic, version, layers, heads, n, 予約×3（int32 LE）
ATTENTION_MAGIC = 0x48595052  # "HYPR"
ATTENTION_VERSION = 1
HEADER_DTYPE = np.dtype("<i4")
VALUE_DTYPE = np.dtype("<f4")
HEADER_WORDS = 8


class TraceFormatError(ValueError):
    """帯域トレースの形式エラー"""


class FrameFormatError(ValueError):
    """フレーム記録ファイルの形式エラー"""

    def __init__(self, message: str, frame_id: Optional[int] = None, field_name: Optional[str] = None,
                 line: Optional[int] = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if frame_id is not None:
            where.append(f"frame_id={frame_id}")
        if field_name is not None:
            where.append(f"field={field_name}")
        super().__init__(f"[{', '.join(where)}] {message}" if where else message)
        self.frame_id = frame_id
        self.field_name = field_name
        self.line = line


# ============================================================
# 帯域トレース
# ============================================================

def parse_trace(lines: Iterable[str]) -> List[Tuple[float, float]]:
    samples: List[Tuple[float, float]] = []
    for line_no, raw in enumerate(lines, start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2:
            raise TraceFormatError(f"{line_no} 行目: 2 列 (timestamp_ms,bandwidth_mbps) が必要です: {line!r}")
        try:
            ts, bw = float(parts[0]), float(parts[1])
        except ValueError:
            raise TraceFormatError(f"{line_no} 行目: 数値として解釈できません: {line!r}") from None
        if not (np.isfinite(ts) and np.isfinite(bw)) or bw < 0:
            raise TraceFormatError(f"{line_no} 行目: 帯域は非負の有限値です: {line!r}")
        if samples and ts <= samples[-1][0]:
            raise TraceFormatError(
                f"{line_no} 行目: タイムスタンプが増加していません ({samples[-1][0]} → {ts})")
        samples.append((ts, bw))
    if not samples:
        raise TraceFormatError("トレースにサンプルがありません")
    return samples


def load_trace(path: str) -> List[Tuple[float, float]]:
    with open(path, "r", encoding="utf-8") as f:
        return parse_trace(f)


def save_trace(samples: Sequence[Tuple[float, float]], path: str):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("# timestamp_ms,bandwidth_mbps\n")
        for ts, bw in samples:
            f.write(f"{ts!r},{bw!r}\n")


# ============================================================
# アテンション別ファイル
# ============================================================

def write_attention(att: AttentionTensor, path: str):
    header = np.array([ATTENTION_MAGIC, ATTENTION_VERSION, att.layers, att.heads, att.n, 0, 0, 0],
                      dtype=HEADER_DTYPE)
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as f:
        f.write(header.tobytes())
        f.write(np.ascontiguousarray(att.values, dtype=VALUE_DTYPE).tobytes())


def read_attention(path: str, frame_id: Optional[int] = None) -> AttentionTensor:
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise FrameFormatError(f"アテンションファイルを読めません: {path}: {e}", frame_id,
                               "attention") from e
    header_bytes = HEADER_WORDS * HEADER_DTYPE.itemsize
    if len(raw) < header_bytes:
        raise FrameFormatError(f"ヘッダが短すぎます: {path}", frame_id, "attention")
    header = np.frombuffer(raw[:header_bytes], dtype=HEADER_DTYPE)
    magic, version, layers, heads, n = (int(v) for v in header[:5])
    if magic != ATTENTION_MAGIC or version != ATTENTION_VERSION:
        raise FrameFormatError(f"未対応のアテンション形式です (magic={magic:#x}, version={version})",
                               frame_id, "attention")
    expected = layers * heads * n * n * VALUE_DTYPE.itemsize
    if len(raw) - header_bytes != expected:
        raise FrameFormatError(
            f"データ長 {len(raw) - header_bytes} がヘッダ ({layers}x{heads}x{n}x{n}) と一致しません",
            frame_id, "attention")
    values = np.frombuffer(raw[header_bytes:], dtype=VALUE_DTYPE).reshape(layers, heads, n, n)
    try:
        return AttentionTensor(values.astype(np.float32), n)
    except InvariantError as e:
        raise FrameFormatError(str(e), frame_id, "attention") from e


# ============================================================
# フレーム記録
# ============================================================

def _boxes_to_json(dets: Sequence[Detection], with_conf: bool = True) -> List[List[float]]:
    return [d.to_list() if with_conf else d.to_list()[:4] for d in dets]


def frame_to_dict(record: FrameRecord, attention_path: Optional[str] = None) -> Dict:
    meta = record.meta
    data = {
        "frame_id": meta.frame_id,
        "grid_rows": meta.grid_rows,
        "grid_cols": meta.grid_cols,
        "patch_size_px": meta.patch_size_px,
        "original_size_bytes": meta.original_size_bytes,
        "capture_timestamp_ms": meta.capture_timestamp_ms,
        "channels": meta.channels,
    }
    if record.attention is not None:
        data["attention"] = {"path": attention_path}
    else:
        data["scores"] = [float(s) for s in record.scores]
    data["edge_detections"] = _boxes_to_json(record.edge_detections)
    data["ground_truth"] = _boxes_to_json(record.ground_truth, with_conf=False)
    data["cloud_detections_reference"] = _boxes_to_json(record.cloud_detections_reference)
    return data


def _parse_boxes(data: Dict, key: str, source: DetectionSource, frame_id: int,
                 line: Optional[int] = None) -> Tuple[Detection, ...]:
    try:
        return tuple(Detection.from_list(values, source) for values in data.get(key, []))
    except (InvariantError, TypeError, ValueError) as e:
        raise FrameFormatError(str(e), frame_id, key, line) from e


def frame_from_dict(data: Dict, base_dir: str = ".", line: Optional[int] = None) -> FrameRecord:
    frame_id = data.get("frame_id")
    for key in ("frame_id", "grid_rows", "grid_cols", "patch_size_px", "original_size_bytes"):
        if key not in data:
            raise FrameFormatError("必須フィールドがありません", frame_id, key, line)
    try:
        meta = FrameMeta(
            frame_id=int(data["frame_id"]),
            grid_rows=int(data["grid_rows"]),
            grid_cols=int(data["grid_cols"]),
            patch_size_px=int(data["patch_size_px"]),
            original_size_bytes=int(data["original_size_bytes"]),
            capture_timestamp_ms=float(data.get("capture_timestamp_ms", 0.0)),
            channels=int(data.get("channels", 3)),
        )
    except InvariantError as e:
        raise FrameFormatError(str(e), frame_id, e.field_name, line) from e
    except (TypeError, ValueError) as e:
        raise FrameFormatError(f"数値フィールドが不正です: {e}", frame_id, None, line) from e
    frame_id = meta.frame_id

    attention, scores = None, None
    if "attention" in data:
        spec = data["attention"]
        path = spec.get("path") if isinstance(spec, dict) else None
        if not isinstance(path, str) or not path:
            raise FrameFormatError("attention.path がありません", frame_id, "attention.path", line)
        try:
            attention = read_attention(os.path.join(base_dir, path), frame_id)
        except FrameFormatError as e:
            raise FrameFormatError(str(e), frame_id, "attention", line) from e
    elif "scores" in data:
        try:
            scores = np.asarray(data["scores"], dtype=np.float64)
        except (TypeError, ValueError) as e:
            raise FrameFormatError(f"scores が数値列ではありません: {e}", frame_id, "scores", line) from e
    else:
        raise FrameFormatError("attention か scores のどちらかが必要です", frame_id, "attention", line)

    try:
        return FrameRecord(
            meta=meta,
            attention=attention,
            scores=scores,
            edge_detections=_parse_boxes(data, "edge_detections", DetectionSource.EDGE, frame_id, line),
            ground_truth=_parse_boxes(data, "ground_truth", DetectionSource.GROUND_TRUTH, frame_id, line),
            cloud_detections_reference=_parse_boxes(data, "cloud_detections_reference",
                                                    DetectionSource.CLOUD, frame_id, line),
        )
    except InvariantError as e:
        raise FrameFormatError(str(e), frame_id, e.field_name, line) from e


def load_frames(path: str) -> List[FrameRecord]:
    base_dir = os.path.dirname(os.path.abspath(path))
    frames = []
    for line_no, data in _read_jsonl(path, FrameFormatError):
        if not isinstance(data, dict):
            raise FrameFormatError("レコードはオブジェクトである必要があります", line=line_no)
        record = frame_from_dict(data, base_dir, line_no)
        if frames and record.frame_id <= frames[-1].frame_id:
            raise FrameFormatError(f"frame_id が増加していません (直前 {frames[-1].frame_id})",
                                   record.frame_id, "frame_id", line_no)
        frames.append(record)
    logger.info("フレーム記録を読み込みました: %s (%d フレーム)", path, len(frames))
    return frames


def save_frames(frames: Sequence[FrameRecord], path: str, attention_dir: str = "attention"):
    base_dir = os.path.dirname(os.path.abspath(path))
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in frames:
            rel = None
            if record.attention is not None:
                rel = f"{attention_dir}/frame_{record.frame_id:06d}.bin"
                write_attention(record.attention, os.path.join(base_dir, rel))
            f.write(json.dumps(frame_to_dict(record, rel), ensure_ascii=False) + "\n")


# ============================================================
# プロファイリング記録・モデル・予測・スケジューリング入力
# ============================================================

def load_records(path: str) -> List[ProfilingRecord]:
    records = []
    for line_no, data in _read_jsonl(path, ValueError):
        try:
            records.append(ProfilingRecord(
                tuple(data["per_class_quality"]),
                tuple(data["per_class_proportion"]),
                float(data["observed_compression_ratio"]),
                float(data["observed_accuracy"]),
            ))
        except (KeyError, TypeError) as e:
            raise ValueError(f"{line_no} 行目: プロファイリング記録が不正です: {e}") from e
    return records


def save_records(records: Sequence[ProfilingRecord], path: str):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(json.dumps(record.to_dict()) + "\n")


def save_json(data: Dict, path: str):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(data, f, ensure_ascii=False, indent=2)
        f.write("\n")


def load_model(path: str) -> ProfilerModel:
    with open(path, "r", encoding="utf-8") as f:
        return ProfilerModel.from_dict(json.load(f))


def save_model(model: ProfilerModel, path: str):
    save_json(model.to_dict(), path)


def load_predictions(path: str) -> Dict[int, List[Detection]]:
    """予測結果 JSONL: {"frame_id": int, "detections": [[x1,y1,x2,y2,conf], ...]}"""
    predictions: Dict[int, List[Detection]] = {}
    for line_no, data in _read_jsonl(path, FrameFormatError):
        frame_id = data.get("frame_id")
        if frame_id is None:
            raise FrameFormatError("frame_id がありません", field_name="frame_id", line=line_no)
        try:
            predictions[int(frame_id)] = [Detection.from_list(v, DetectionSource.FUSED)
                                          for v in data.get("detections", [])]
        except InvariantError as e:
            raise FrameFormatError(str(e), int(frame_id), "detections", line_no) from e
    return predictions


def save_predictions(predictions: Dict[int, Sequence[Detection]], path: str):
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for frame_id in sorted(predictions):
            row = {"frame_id": frame_id, "detections": _boxes_to_json(predictions[frame_id])}
            f.write(json.dumps(row) + "\n")


def context_from_dict(data: Dict) -> ScheduleContext:
    """スケジューリング入力 JSON（model は係数オブジェクト）"""
    return ScheduleContext(
        latency_budget_ms=float(data["latency_budget_ms"]),
        device_latency_ms=float(data["device_latency_ms"]),
        cloud_latency_ms=float(data["cloud_latency_ms"]),
        bandwidth_mbps=float(data["bandwidth_mbps"]),
        original_size_bytes=float(data["original_size_bytes"]),
        proportions=tuple(float(w) for w in data["proportions"]),
        model=ProfilerModel.from_dict(data["model"]),
        palette=QualityPalette(tuple(data.get("palette", QualityPalette().levels))),
        dp_scale=int(data.get("dp_scale", 1000)),
    )


def load_context(path: str) -> ScheduleContext:
    with open(path, "r", encoding="utf-8") as f:
        return context_from_dict(json.load(f))


def save_scenario(scenario, out_dir: str) -> Dict[str, str]:
    """generate の出力一式を書き出し、ファイルパスを返す"""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "frames": os.path.join(out_dir, "frames.jsonl"),
        "trace": os.path.join(out_dir, "trace.csv"),
        "scenario": os.path.join(out_dir, "scenario.json"),
        "profiling": os.path.join(out_dir, "profiling.jsonl"),
    }
    save_frames(scenario.frames, paths["frames"])
    save_trace(scenario.trace, paths["trace"])
    save_json(scenario.truth(), paths["scenario"])
    save_records(scenario.profiling_records, paths["profiling"])
    return paths
