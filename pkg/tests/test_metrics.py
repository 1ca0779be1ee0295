from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.optimize import linear_sum_assignment

from oracles import brute_assignment_cost
from swgformer.metrics import (Event, FrameEvents, angular_distance, class_dependent_loc, direction, evaluate,
                               frames_from_rows, hungarian, location_dependent_sed, seld_score)

E = lambda c, az, el=0.0, track=0: Event(c, direction(az, el), track)  # noqa: E731


# --- angular distance -------------------------------------------------------------------

def test_angular_distance_examples():
    assert angular_distance([1, 0, 0], [1, 0, 0]) == 0.0
    assert abs(angular_distance([1, 0, 0], [0, 1, 0]) - 90) < 1e-12
    assert abs(angular_distance([1, 0, 0], [-1, 0, 0]) - 180) < 1e-12
    assert abs(angular_distance(direction(10, 0), direction(30, 0)) - 20) < 1e-10
    with pytest.raises(ValueError, match="unit"):
        angular_distance([2, 0, 0], [1, 0, 0])
    with pytest.raises(ValueError, match="unit norm"):
        FrameEvents([[Event(0, np.array([0.5, 0, 0]))]], [])


# --- Hungarian ----------------------------------------------------------------------------

def test_hungarian_examples():
    A = hungarian([[1.0, 2.0], [3.0, 0.0]])
    assert A.tolist() == [[1, 0], [0, 1]]
    D = np.full((4, 4), 10.0) + np.diag([-9.0] * 4)
    np.testing.assert_array_equal(hungarian(D), np.eye(4, dtype=int))
    assert hungarian(np.zeros((0, 3))).shape == (0, 3)
    with pytest.raises(ValueError):
        hungarian([[np.inf, 1.0]])


@given(st.integers(0, 2 ** 32 - 1))
def test_hungarian_matches_brute_force_and_scipy(seed):
    r = np.random.default_rng(seed)
    m, n = int(r.integers(1, 7)), int(r.integers(1, 7))
    D = r.uniform(0, 180, size=(m, n)) if seed % 2 else r.integers(0, 4, size=(m, n)).astype(float)
    A = hungarian(D)
    assert A.sum() == min(m, n)
    assert np.all(A.sum(axis=0) <= 1) and np.all(A.sum(axis=1) <= 1)
    total = (A * D).sum()
    assert abs(total - brute_assignment_cost(D)) < 1e-9
    rows, cols = linear_sum_assignment(D)
    assert abs(total - D[rows, cols].sum()) < 1e-9


# --- class-dependent localization ----------------------------------------------------------

def test_loc_single_pair():
    res = class_dependent_loc(FrameEvents([[E(0, 0)]], [[E(0, 10)]]), 1)
    assert abs(res.le - 10) < 1e-9 and res.lr_cd == 1.0


def test_loc_two_refs_one_pred():
    res = class_dependent_loc(FrameEvents([[E(0, 0), E(0, 45)]], [[E(0, 5)]]), 1)
    assert abs(res.le - 5) < 1e-9 and res.lr_cd == 0.5
    assert res.matched_c.tolist() == [1] and res.n_ref_c.tolist() == [2]


def test_loc_class_tables():
    frames = FrameEvents([[E(0, 0)], [E(0, 0), E(1, 90)]], [[E(0, 4)], [E(0, 8)]])
    res = class_dependent_loc(frames, 3)
    assert abs(res.le - 6) < 1e-9
    assert res.lr_c[0] == 1.0 and res.lr_c[1] == 0.0 and np.isnan(res.lr_c[2])
    assert res.lr_cd == 0.5  # class 2 has no references and is left out
    assert res.le_c[1] == 180.0 and np.isnan(res.le_c[2])


# --- detection ------------------------------------------------------------------------------

def test_hand_counted_segment():
    frames = FrameEvents([[E(0, 0), E(1, 90)]], [[E(0, 10), E(2, -90)]])
    det = location_dependent_sed(frames, 3, segment_frames=10)
    assert (det.TP, det.FP, det.FN, det.S, det.D, det.I) == (1, 1, 1, 1, 0, 0)
    assert det.er == 0.5 and det.f20 == 0.5


def test_threshold_rule():
    det = location_dependent_sed(FrameEvents([[E(0, 0)]], [[E(0, 25)]]), 1)
    assert (det.TP, det.FP, det.FN, det.S, det.er) == (0, 1, 1, 1, 1.0)
    det = location_dependent_sed(FrameEvents([[E(0, 0)]], [[E(0, 19.9)]]), 1)
    assert det.TP == 1 and det.er == 0.0


def test_segments_use_mean_direction():
    # a track sweeping -9 -> 45 degrees symmetrically has mean direction 18 degrees
    ref = [[E(0, 18)] for _ in range(10)]
    pred = [[E(0, 18 + 6 * (i - 4.5))] for i in range(10)]
    det = location_dependent_sed(FrameEvents(ref, pred), 1, segment_frames=10)
    assert det.TP == 1 and det.er == 0.0
    per_frame = location_dependent_sed(FrameEvents(ref, pred), 1, segment_frames=1)
    assert per_frame.TP == 6 and per_frame.n_ref == 10  # offsets 27, 21, 15, 9, 3, ... degrees


def test_perfect_and_empty():
    rows = [(l, c, 0, 20.0 * c - 60, 10.0) for l in range(30) for c in range(3) if (l + c) % 4]
    ref = frames_from_rows(rows, 30)
    rep = evaluate(FrameEvents(ref, ref), 4)
    assert (rep.ER, rep.F20, rep.LE, rep.LR_CD, rep.SELD) == (0.0, 1.0, 0.0, 1.0, 0.0)
    empty = evaluate(FrameEvents(ref, [[] for _ in ref]), 4)
    assert (empty.ER, empty.F20, empty.LE, empty.LR_CD) == (1.0, 0.0, 180.0, 0.0)
    assert empty.le_flagged and not rep.le_flagged


def _random_frames(r, n_frames=20, n_classes=3):
    def events():
        out = []
        for c in range(n_classes):
            for trk in range(int(r.integers(0, 3))):
                v = r.standard_normal(3)
                out.append(Event(c, v / np.linalg.norm(v), trk))
        return out
    return FrameEvents([events() for _ in range(n_frames)], [events() for _ in range(n_frames)])


@given(st.integers(0, 2 ** 32 - 1))
def test_swap_symmetry(seed):
    frames = _random_frames(np.random.default_rng(seed))
    a, b = evaluate(frames, 3), evaluate(frames.swapped(), 3)
    assert abs(a.LE - b.LE) < 1e-9
    assert (a.counts["FP"], a.counts["FN"], a.counts["TP"]) == (b.counts["FN"], b.counts["FP"], b.counts["TP"])
    assert abs(a.F20 - b.F20) < 1e-12


@given(st.integers(0, 2 ** 32 - 1))
def test_within_frame_order_invariance(seed):
    r = np.random.default_rng(seed)
    frames = _random_frames(r)
    shuffled = FrameEvents([[f[i] for i in r.permutation(len(f))] for f in frames.ref],
                           [[f[i] for i in r.permutation(len(f))] for f in frames.pred])
    a, b = evaluate(frames, 3), evaluate(shuffled, 3)
    np.testing.assert_allclose(a.summary_row(), b.summary_row(), atol=1e-9)


# --- score / report -------------------------------------------------------------------------

def test_seld_score_formula():
    assert seld_score(0, 1, 0, 1) == 0.0
    assert abs(seld_score(0.64, 0.452, 24.5, 0.657) - 0.4167777778) < 1e-9
    assert abs(seld_score(0.65, 0.484, 21.5, 0.704) - 0.3953611111) < 1e-9
    assert seld_score(1, 0, 180, 0) == 1.0


@given(st.floats(0, 2), st.floats(0, 1), st.floats(0, 180), st.floats(0, 1), st.floats(0, 0.5))
def test_seld_score_monotone(er, f, le, lr, d):
    base = seld_score(er, f, le, lr)
    assert seld_score(er + d, f, le, lr) >= base
    assert seld_score(er, f, le + d, lr) >= base
    assert seld_score(er, f + d, le, lr) <= base
    assert seld_score(er, f, le, lr + d) <= base


def test_report_formats():
    ref = [[E(0, 0)], [E(0, 0)]]
    rep = evaluate(FrameEvents(ref, [[E(0, 10)], []]), 2)
    text = rep.to_text()
    assert "LE      10.00 deg" in text and "n/a" in text
    csv_text = rep.to_csv()
    assert csv_text.startswith("metric,value\nER,")
    assert "\n1,,,\n" in csv_text


def test_frames_from_rows():
    frames = frames_from_rows([(0, 1, 2, 90.0, 0.0), (2, 0, 0, 0.0, 0.0)])
    assert len(frames) == 3 and frames[1] == []
    assert frames[0][0].cls == 1 and frames[0][0].track == 2
    np.testing.assert_allclose(frames[0][0].doa, [0, 1, 0], atol=1e-15)
