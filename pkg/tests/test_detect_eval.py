import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from yoloant import detect_eval as E
from yoloant.detect_eval import DetectionBox as Det
from yoloant.detect_eval import GroundTruthBox as Gt
from yoloant.errors import DimensionError, DomainError, FormatError, GeometryError

from oracles import random_instance, ref_ap, ref_iou, ref_mean_ap, ref_nms

coords = st.integers(0, 200)


@st.composite
def boxes(draw):
    x1, y1 = draw(coords), draw(coords)
    return (float(x1), float(y1), float(x1 + draw(st.integers(1, 120))), float(y1 + draw(st.integers(1, 120))))


class TestIou:
    def test_examples(self):
        assert E.iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
        assert E.iou((0, 0, 1, 1), (5, 5, 6, 6)) == 0.0
        assert E.iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1 / 3, abs=1e-15)

    def test_touching_is_zero(self):
        assert E.iou((0, 0, 1, 1), (1, 0, 2, 1)) == 0.0

    @given(boxes(), boxes())
    def test_symmetric_and_bounded(self, a, b):
        v = E.iou(a, b)
        assert v == E.iou(b, a)
        assert 0.0 <= v <= 1.0
        assert v == pytest.approx(ref_iou(a, b), abs=1e-15)

    @given(boxes())
    def test_self(self, a):
        assert E.iou(a, a) == 1.0

    @given(boxes(), boxes(), st.integers(1, 50))
    def test_shrinking_intersection(self, a, b, d):
        # sliding b away from a can only lower the overlap
        moved = (b[0] + d, b[1], b[2] + d, b[3])
        if b[0] >= a[0]:
            assert E.iou(a, moved) <= E.iou(a, b) + 1e-15


class TestBoxes:
    def test_degenerate_rejected(self):
        with pytest.raises(GeometryError):
            Gt("a", 0, (1, 1, 1, 2))

    @pytest.mark.parametrize("score", [-0.1, 1.5])
    def test_score_domain(self, score):
        with pytest.raises(DomainError):
            Det("a", 0, score, (0, 0, 1, 1))

    def test_negative_class(self):
        with pytest.raises(DomainError):
            Gt("a", -1, (0, 0, 1, 1))


def head_zeros(nc, h, w, na=3):
    return np.zeros((1, na * (nc + 5), h, w))


class TestDecode:
    ANCHORS = ((10, 13, 16, 30, 33, 23),)

    def test_zero_logits_cell(self):
        dets = E.decode([head_zeros(2, 1, 1)], self.ANCHORS, (8,), 0.0, clip=False)
        assert len(dets) == 3
        d = dets[1]
        assert d.box == pytest.approx((4 - 8, 4 - 15, 4 + 8, 4 + 15))
        assert d.score == 0.25

    def test_threshold_one_empty(self):
        assert E.decode([head_zeros(2, 2, 2)], self.ANCHORS, (8,), 1.0) == []

    def test_threshold_zero_cardinality(self):
        assert len(E.decode([head_zeros(2, 1, 1)], self.ANCHORS, (8,), 0.0)) == 3

    def test_strict_threshold(self):
        assert E.decode([head_zeros(1, 1, 1)], self.ANCHORS, (8,), 0.25) == []

    def test_clipped_to_image(self):
        dets = E.decode([head_zeros(2, 1, 1)], self.ANCHORS, (8,), 0.0)
        for d in dets:
            assert 0 <= d.box[0] < d.box[2] <= 8 and 0 <= d.box[1] < d.box[3] <= 8

    def test_grid_offset_and_class(self):
        h = np.full((1, 8, 2, 3), -20.0)
        # one anchor; cell (1, 2); class 2 wins
        h[0, :4, 1, 2] = 0
        h[0, 4, 1, 2] = 20
        h[0, 7, 1, 2] = 20
        (d,) = E.decode([h], ((4, 6),), (16,), 0.5, clip=False)
        assert d.class_id == 2
        assert d.box == pytest.approx((2.5 * 16 - 2, 1.5 * 16 - 3, 2.5 * 16 + 2, 1.5 * 16 + 3))

    def test_batch_image_ids(self):
        h = np.zeros((2, 6, 1, 1))
        dets = E.decode([h], ((8, 8),), (8,), 0.0)
        assert [d.image_id for d in dets] == ["0", "1"]

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            E.decode([np.zeros((1, 20, 2, 2))], self.ANCHORS, (8,), 0.1)


class TestNms:
    def test_dominance(self):
        a = Det("i", 0, 0.9, (0, 0, 10, 10))
        b = Det("i", 0, 0.8, (0, 0, 10, 11))
        assert E.iou(a.box, b.box) > 0.9 - 1e-9
        assert E.nms([b, a], 0.5) == [a]

    def test_per_class(self):
        a = Det("i", 0, 0.9, (0, 0, 10, 10))
        b = Det("i", 1, 0.8, (0, 0, 10, 11))
        assert E.nms([a, b], 0.5) == [a, b]

    def test_per_image(self):
        a = Det("i", 0, 0.9, (0, 0, 10, 10))
        b = Det("j", 0, 0.8, (0, 0, 10, 10))
        assert E.nms([a, b], 0.5) == [a, b]

    def test_equal_iou_kept(self):
        a = Det("i", 0, 0.9, (0, 0, 2, 2))
        b = Det("i", 0, 0.8, (1, 0, 3, 2))
        assert E.nms([a, b], 1 / 3) == [a, b]

    def test_oracle_random(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            dets, _ = random_instance(rng)
            t = float(rng.choice([0.3, 0.45, 0.5, 0.7]))
            assert E.nms(dets, t) == ref_nms(dets, t)

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_order_independent(self, seed):
        rng = np.random.default_rng(seed)
        dets, _ = random_instance(rng)
        perm = rng.permutation(len(dets))
        assert E.nms([dets[i] for i in perm], 0.45) == E.nms(dets, 0.45)


class TestCurve:
    def test_perfect(self):
        gts = [Gt("a", 0, (0, 0, 10, 10)), Gt("a", 0, (20, 20, 30, 30))]
        dets = [Det("a", 0, 0.9, g.box) for g in gts]
        c = E.match_and_curve(dets, gts, 0.5)
        assert (c.final_precision, c.final_recall) == (1.0, 1.0)
        assert E.average_precision(c) == 1.0

    def test_empty(self):
        c = E.match_and_curve([], [Gt("a", 0, (0, 0, 1, 1))], 0.5)
        assert (c.final_precision, c.final_recall, c.fn) == (0.0, 0.0, 1)
        assert E.average_precision(c) == 0.0

    def test_one_tp_one_fp_two_gt(self):
        gts = [Gt("a", 0, (0, 0, 10, 10)), Gt("a", 0, (50, 50, 60, 60))]
        dets = [Det("a", 0, 0.9, (0, 0, 10, 10)), Det("a", 0, 0.8, (100, 100, 110, 110))]
        c = E.match_and_curve(dets, gts, 0.5)
        assert c.points == [(1.0, 0.5), (0.5, 0.5)]
        assert (c.tp, c.fp, c.fn) == (1, 1, 1)
        assert E.average_precision(c) == pytest.approx(51 / 101, abs=1e-15)
        assert E.average_precision(c) == pytest.approx(0.5, abs=0.01)

    def test_highest_iou_wins(self):
        gts = [Gt("a", 0, (0, 0, 10, 10)), Gt("a", 0, (1, 0, 11, 10))]
        d = Det("a", 0, 0.9, (1, 0, 11, 10))
        c = E.match_and_curve([d, Det("a", 0, 0.5, (0, 0, 10, 10))], gts, 0.5)
        assert c.tp == 2

    def test_tie_goes_to_lower_index(self):
        gts = [Gt("a", 0, (0, 0, 10, 10)), Gt("a", 0, (2, 0, 12, 10))]
        d = Det("a", 0, 0.9, (1, 0, 11, 10))
        c = E.match_and_curve([d, Det("a", 0, 0.5, (2, 0, 12, 10))], gts, 0.5)
        assert c.tp == 2  # second detection still finds GT 1 free

    def test_recall_monotone(self):
        rng = np.random.default_rng(3)
        for _ in range(30):
            dets, gts = random_instance(rng, max_classes=1)
            c = E.match_and_curve(dets, gts, 0.5)
            assert all(a <= b for a, b in zip(c.recall, c.recall[1:]))
            assert all(0 <= p <= 1 and 0 <= r <= 1 for p, r in c.points)

    def test_other_image_never_matches(self):
        c = E.match_and_curve([Det("b", 0, 0.9, (0, 0, 5, 5))], [Gt("a", 0, (0, 0, 5, 5))], 0.5)
        assert c.fp == 1


class TestMeanAp:
    def test_one_class_perfect(self):
        gts = [Gt("a", 3, (0, 0, 40, 40))]
        m = E.mean_ap([Det("a", 3, 0.7, (0, 0, 40, 40))], gts)
        assert m.map50 == m.map50_95 == 1.0
        assert m.map50_medium == 1.0 and math.isnan(m.map50_small) and math.isnan(m.map50_large)

    def test_mean_law(self):
        gts = [Gt("a", 0, (0, 0, 10, 10)), Gt("a", 1, (0, 0, 10, 10))]
        m = E.mean_ap([Det("a", 0, 0.9, (0, 0, 10, 10))], gts)
        assert m.map50 == 0.5 and m.map50_95 == 0.5
        assert m.per_class_ap[1] == (0.0,) * 10

    def test_no_classes(self):
        with pytest.raises(DomainError):
            E.mean_ap([Det("a", 0, 0.9, (0, 0, 1, 1))], [])

    def test_detections_of_absent_class_ignored(self):
        gts = [Gt("a", 0, (0, 0, 10, 10))]
        m = E.mean_ap([Det("a", 0, 0.9, (0, 0, 10, 10)), Det("a", 5, 0.99, (0, 0, 10, 10))], gts)
        assert m.classes == (0,) and m.map50 == 1.0

    def test_iou_threshold_grid(self):
        gts = [Gt("a", 0, (0, 0, 100, 100))]
        m = E.mean_ap([Det("a", 0, 0.9, (0, 0, 100, 72))], gts)  # IoU 0.72
        assert m.per_class_ap[0] == (1.0,) * 5 + (0.0,) * 5
        assert m.map50_95 == 0.5

    def test_size_split(self):
        gts = [Gt("a", 0, (0, 0, 10, 10)), Gt("a", 0, (100, 100, 200, 200))]
        m = E.mean_ap([Det("a", 0, 0.9, (100, 100, 200, 200))], gts)
        assert m.map50_large == 1.0 and m.map50_small == 0.0 and math.isnan(m.map50_medium)

    def test_oracle_random(self):
        rng = np.random.default_rng(1)
        for _ in range(60):
            dets, gts = random_instance(rng)
            got = E.mean_ap(dets, gts).as_dict()
            ref = ref_mean_ap(dets, gts)
            for k, v in ref.items():
                assert (math.isnan(v) and math.isnan(got[k])) or abs(got[k] - v) <= 1e-9, k

    def test_per_class_oracle_ranges(self):
        rng = np.random.default_rng(2)
        for _ in range(40):
            dets, gts = random_instance(rng, max_classes=1)
            for rngs in [None, *E.SIZE_RANGES.values()]:
                ref = ref_ap(dets, gts, 0.5, rngs)
                curve = E.match_and_curve(dets, gts, 0.5, rngs)
                if ref is None:
                    assert curve.n_gt == 0
                else:
                    assert E.average_precision(curve) == pytest.approx(ref, abs=1e-12)


class TestMetricProperties:
    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_relabel_invariance(self, seed):
        rng = np.random.default_rng(seed)
        dets, gts = random_instance(rng)
        perm = rng.permutation(5) + 10
        relabel = lambda b: b.__class__(**{**b.__dict__, "class_id": int(perm[b.class_id])})
        a = E.mean_ap(dets, gts).as_dict()
        b = E.mean_ap([relabel(d) for d in dets], [relabel(g) for g in gts]).as_dict()
        for k in a:
            assert (math.isnan(a[k]) and math.isnan(b[k])) or a[k] == pytest.approx(b[k], abs=1e-12)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        dets, gts = random_instance(rng)
        perm = rng.permutation(len(dets))
        a = E.mean_ap(dets, gts).as_dict()
        b = E.mean_ap([dets[i] for i in perm], gts).as_dict()
        assert str(a) == str(b)

    @settings(max_examples=80, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_lower_duplicate_never_helps(self, seed):
        # ground truth on a grid with gaps, so a box matching one GT cannot match another
        rng = np.random.default_rng(seed)
        cells = rng.choice(16, size=int(rng.integers(1, 8)), replace=False)
        gts = [Gt("i", 0, (60 * (c % 4), 60 * (c // 4), 60 * (c % 4) + 40, 60 * (c // 4) + 40)) for c in cells]
        dets = []
        for g in gts:
            if rng.random() < 0.7:
                j = rng.integers(-5, 6, size=4)
                dets.append(Det("i", 0, float(rng.integers(1, 10)) / 10,
                                tuple(v + float(k) for v, k in zip(g.box, j))))
        for _ in range(int(rng.integers(0, 4))):
            x, y = rng.integers(0, 200, size=2)
            dets.append(Det("i", 0, float(rng.integers(1, 10)) / 10, (float(x), float(y), x + 30.0, y + 30.0)))
        before = E.mean_ap(dets, gts)
        curve = E.match_and_curve(dets, gts, 0.5)
        assume(curve.tp > 0)
        tp_dets = [d for d in sorted(dets, key=E.rank_key)
                   if any(E.iou(d.box, g.box) >= 0.5 for g in gts)]
        src = tp_dets[int(rng.integers(len(tp_dets)))]
        dup = Det("i", 0, src.score * float(rng.uniform(0, 1)), src.box)
        after = E.mean_ap(dets + [dup], gts)
        assert after.map50 <= before.map50 + 1e-12
        assert after.map50_95 <= before.map50_95 + 1e-12


class TestTextFormat:
    def test_parse(self):
        gts = E.parse_boxes("img1 0 1 2 3 4\n# note\n\nimg2 1 0 0 5 5  # trailing\n", with_score=False)
        assert gts == [Gt("img1", 0, (1, 2, 3, 4)), Gt("img2", 1, (0, 0, 5, 5))]

    def test_parse_dets(self):
        (d,) = E.parse_boxes("a 2 0 0 1 1 0.5", with_score=True)
        assert d == Det("a", 2, 0.5, (0, 0, 1, 1))

    @pytest.mark.parametrize("text", ["a 0 0 0 1", "a x 0 0 1 1", "a 0 1 1 0 0", "a 0 0 0 1 1 0.5"])
    def test_malformed(self, text):
        with pytest.raises(FormatError, match=":1:"):
            E.parse_boxes(text, with_score=False, source="f")

    def test_bad_score(self):
        with pytest.raises(FormatError):
            E.parse_boxes("a 0 0 0 1 1 1.5", with_score=True)

    def test_format_round_trip(self):
        dets = [Det("a", 1, 0.5, (1.25, 2.5, 3.0, 4.0))]
        text = E.format_detections(dets)
        assert text == "a 1 1.2500 2.5000 3.0000 4.0000 0.500000\n"
        assert E.parse_boxes(text, with_score=True) == dets
