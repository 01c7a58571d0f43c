"""
エッジ/クラウド検出結果アンサンブルのテスト
"""

import numpy as np
import pytest

from core.ensembler import ensemble, fuse, match_pairs, nms
from core.types import Detection, DetectionSource, InvariantError

EDGE = DetectionSource.EDGE
CLOUD = DetectionSource.CLOUD


def edge(x1, y1, x2, y2, conf=0.9):
    return Detection(x1, y1, x2, y2, conf, EDGE)


def cloud(x1, y1, x2, y2, conf=0.9):
    return Detection(x1, y1, x2, y2, conf, CLOUD)


def random_box(rng, source):
    x = np.sort(rng.uniform(0, 100, size=2))
    y = np.sort(rng.uniform(0, 100, size=2))
    return Detection(float(x[0]), float(y[0]), float(x[1]), float(y[1]),
                     float(rng.uniform(0.01, 1.0)), source)


class TestFuse:
    def test_worked_example(self):
        fused = fuse(edge(0, 0, 10, 10, 0.8), cloud(2, 2, 12, 12, 0.4))
        assert fused.x1 == pytest.approx(2 / 3, abs=1e-9)
        assert fused.y1 == pytest.approx(2 / 3, abs=1e-9)
        assert fused.x2 == pytest.approx(32 / 3, abs=1e-9)
        assert fused.y2 == pytest.approx(32 / 3, abs=1e-9)
        assert fused.conf == pytest.approx(0.6, abs=1e-9)
        assert fused.source is DetectionSource.FUSED

    def test_swapped_roles(self):
        e, c = edge(0, 0, 10, 10, 0.8), cloud(2, 2, 12, 12, 0.4)
        assert fuse(e, c) == fuse(c, e)

    def test_identical_boxes(self):
        fused = fuse(edge(1, 2, 3, 4, 0.7), cloud(1, 2, 3, 4, 0.7))
        assert (fused.x1, fused.y1, fused.x2, fused.y2) == (1, 2, 3, 4)
        assert fused.conf == 0.7

    def test_zero_confidence_rejected(self):
        with pytest.raises(InvariantError):
            fuse(edge(0, 0, 1, 1, 0.0), cloud(0, 0, 1, 1, 0.0))

    def test_requires_edge_and_cloud(self):
        with pytest.raises(InvariantError):
            fuse(edge(0, 0, 1, 1), edge(0, 0, 1, 1))

    def test_symmetry_and_convexity(self, rng):
        for _ in range(10_000):
            e, c = random_box(rng, EDGE), random_box(rng, CLOUD)
            fused = fuse(e, c)
            assert fused == fuse(c, e)
            for name in ("x1", "y1", "x2", "y2"):
                a, b = getattr(e, name), getattr(c, name)
                assert min(a, b) <= getattr(fused, name) <= max(a, b)
            assert min(e.conf, c.conf) - 1e-12 <= fused.conf <= max(e.conf, c.conf) + 1e-12


class TestMatchPairs:
    def test_identical_single_boxes(self):
        result = match_pairs([edge(0, 0, 10, 10)], [cloud(0, 0, 10, 10)])
        assert result.pairs == ((0, 0),)
        assert result.unmatched_edge == () and result.unmatched_cloud == ()

    def test_disjoint(self):
        result = match_pairs([edge(0, 0, 10, 10)], [cloud(50, 50, 60, 60)])
        assert result.pairs == ()
        assert result.unmatched_edge == (0,) and result.unmatched_cloud == (0,)

    def test_greedy_by_iou(self):
        # IoU: (0,0)=0.9, (0,1)=0.6, (1,1)=0.8, (1,0)<0.5
        edges = [edge(0, 0, 10, 10), edge(4, 0, 11.5, 10)]
        clouds = [cloud(0, 0, 9, 10), cloud(4, 0, 10, 10)]
        result = match_pairs(edges, clouds, 0.5)
        assert result.pairs == ((0, 0), (1, 1))

    def test_tie_broken_by_index(self):
        result = match_pairs([edge(0, 0, 10, 10)], [cloud(0, 0, 10, 10), cloud(0, 0, 10, 10)])
        assert result.pairs == ((0, 0),)
        assert result.unmatched_cloud == (1,)

    def test_threshold_range(self):
        with pytest.raises(InvariantError):
            match_pairs([], [], 0.0)


class TestNms:
    def test_single_box(self):
        det = edge(0, 0, 1, 1)
        assert nms([det]) == [det]

    def test_identical_boxes_keep_highest(self):
        low, high = edge(0, 0, 10, 10, 0.8), edge(0, 0, 10, 10, 0.9)
        assert nms([low, high], 0.25) == [high]

    def test_disjoint_boxes_kept(self):
        a, b = edge(0, 0, 10, 10, 0.5), edge(20, 20, 30, 30, 0.7)
        assert nms([a, b]) == [b, a]

    def test_empty(self):
        assert nms([]) == []


class TestEnsemble:
    def test_no_cloud_results(self):
        dets = [edge(0, 0, 10, 10, 0.8), edge(0, 0, 10, 10, 0.9)]
        assert ensemble(dets, None) == nms(dets)
        assert ensemble(dets, []) == nms(dets)

    def test_pair_fused_and_unmatched_kept(self):
        e = [edge(0, 0, 10, 10, 0.8), edge(100, 100, 110, 110, 0.3)]
        c = [cloud(1, 1, 11, 11, 0.6), cloud(200, 200, 210, 210, 0.95)]
        result = ensemble(e, c)
        sources = sorted(d.source.value for d in result)
        assert sources == ["cloud", "edge", "fused"]
        assert result[0].source is CLOUD
        assert result[-1] == e[1]
