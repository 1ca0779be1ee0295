"""Joint SELD evaluation.

Location-dependent detection (ER, F20) is counted on fixed-length segments of
label frames; class-dependent localization (LE, LR_CD) is computed per frame
with Hungarian association between same-class references and predictions.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

UNIT_TOL = 1e-6


class Event(NamedTuple):
    cls: int
    doa: np.ndarray  # unit 3-vector
    track: int = 0


@dataclass
class FrameEvents:
    """Per-label-frame reference and predicted event lists."""

    ref: list[list[Event]]
    pred: list[list[Event]]

    def __post_init__(self):
        n = max(len(self.ref), len(self.pred))
        self.ref = list(self.ref) + [[] for _ in range(n - len(self.ref))]
        self.pred = list(self.pred) + [[] for _ in range(n - len(self.pred))]
        for frames in (self.ref, self.pred):
            for events in frames:
                for ev in events:
                    norm = float(np.linalg.norm(ev.doa))
                    if abs(norm - 1.0) > UNIT_TOL:
                        raise ValueError(f"DoA vector {ev.doa} of class {ev.cls} is not unit norm ({norm})")

    @property
    def n_frames(self) -> int:
        return len(self.ref)

    def swapped(self) -> "FrameEvents":
        return FrameEvents(self.pred, self.ref)


def direction(az_deg: float, el_deg: float) -> np.ndarray:
    az, el = np.deg2rad(az_deg), np.deg2rad(el_deg)
    return np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])


def angular_distance(u, v) -> float:
    """Great-circle angle in degrees between two unit vectors."""
    u, v = np.asarray(u, dtype=float), np.asarray(v, dtype=float)
    for w in (u, v):
        if abs(np.linalg.norm(w) - 1.0) > UNIT_TOL:
            raise ValueError(f"angular_distance needs unit vectors, got norm {np.linalg.norm(w)}")
    return float(_distance_matrix([u], [v])[0, 0])


def _distance_matrix(a: Sequence[np.ndarray], b: Sequence[np.ndarray]) -> np.ndarray:
    """Pairwise great-circle angles in degrees.

    atan2(|u x v|, u . v) equals arccos(u . v) for unit vectors but stays
    accurate near 0 and 180 degrees, where arccos loses half the digits.
    """
    A, B = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    cross = np.linalg.norm(np.cross(A[:, None, :], B[None, :, :]), axis=-1)
    return np.degrees(np.arctan2(cross, A @ B.T))


# ---------------------------------------------------------------------------
# Hungarian assignment


def _hungarian_square(cost: np.ndarray) -> np.ndarray:
    """Shortest-augmenting-path Hungarian method with row/column potentials.

    Returns ``col_of_row`` for an n x n cost matrix. O(n^3).
    """
    n = cost.shape[0]
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row matched to column j (1-based, 0 = none)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    col_of_row = np.empty(n, dtype=np.int64)
    col_of_row[p[1:] - 1] = np.arange(n)
    return col_of_row


def hungarian(cost) -> np.ndarray:
    """Minimum-cost assignment of an m x n matrix as a binary m x n matrix.

    Rectangular inputs are padded to square with a sentinel larger than every
    real cost; exactly min(m, n) real pairs are assigned.
    """
    D = np.asarray(cost, dtype=float)
    if D.ndim != 2:
        raise ValueError(f"hungarian needs a 2-D cost matrix, got shape {D.shape}")
    m, n = D.shape
    A = np.zeros((m, n), dtype=np.int64)
    if m == 0 or n == 0:
        return A
    if not np.all(np.isfinite(D)):
        raise ValueError("hungarian needs finite costs")
    size = max(m, n)
    sentinel = (np.abs(D).max() + 1.0) * 2.0
    square = np.full((size, size), sentinel)
    square[:m, :n] = D
    cols = _hungarian_square(square)
    for r in range(m):
        if cols[r] < n:
            A[r, cols[r]] = 1
    return A


# ---------------------------------------------------------------------------
# class-dependent localization


@dataclass
class LocalizationResult:
    le: float
    lr_cd: float
    le_flagged: bool
    le_c: np.ndarray
    lr_c: np.ndarray
    le_c_flagged: np.ndarray
    matched_c: np.ndarray
    n_ref_c: np.ndarray


def class_dependent_loc(frames: FrameEvents, n_classes: int) -> LocalizationResult:
    frame_le: list[float] = []
    per_class_le: list[list[float]] = [[] for _ in range(n_classes)]
    matched = np.zeros(n_classes, dtype=np.int64)
    n_ref = np.zeros(n_classes, dtype=np.int64)
    for refs, preds in zip(frames.ref, frames.pred):
        for c in {e.cls for e in refs}:
            r = [e.doa for e in refs if e.cls == c]
            p = [e.doa for e in preds if e.cls == c]
            n_ref[c] += len(r)
            if not p:
                continue
            D = _distance_matrix(p, r)  # M_c x N_c
            A = hungarian(D)
            le = float((A * D).sum() / A.sum())
            frame_le.append(le)
            per_class_le[c].append(le)
            matched[c] += int(A.sum())

    le_flagged = not frame_le
    le = 180.0 if le_flagged else float(np.mean(frame_le))
    # classes without references have no defined LE; referenced but never matched -> 180
    le_c = np.array([np.mean(v) if v else (180.0 if n_ref[c] else np.nan) for c, v in enumerate(per_class_le)])
    le_c_flagged = np.array([not v for v in per_class_le])
    with np.errstate(invalid="ignore", divide="ignore"):
        lr_c = np.where(n_ref > 0, matched / np.maximum(n_ref, 1), np.nan)
    present = n_ref > 0
    lr_cd = float(lr_c[present].mean()) if present.any() else 0.0
    return LocalizationResult(le, lr_cd, le_flagged, le_c, lr_c, le_c_flagged, matched, n_ref)


# ---------------------------------------------------------------------------
# location-dependent detection


@dataclass
class DetectionResult:
    er: float
    f20: float
    D: int
    I: int
    S: int
    TP: int
    FP: int
    FN: int
    n_ref: int
    tp_c: np.ndarray
    fp_c: np.ndarray
    fn_c: np.ndarray

    @property
    def f_c(self) -> np.ndarray:
        """Per-class F-score; NaN for classes never referenced nor predicted."""
        denom = 2 * self.tp_c + self.fp_c + self.fn_c
        return np.where(denom > 0, 2 * self.tp_c / np.maximum(denom, 1), np.nan)


def _segment_tracks(frames: list[list[Event]], cls: int) -> list[np.ndarray]:
    """Mean direction of every (class, track) event present in a segment."""
    acc: dict[int, np.ndarray] = {}
    for events in frames:
        for e in events:
            if e.cls == cls:
                acc[e.track] = acc.get(e.track, 0.0) + np.asarray(e.doa, dtype=float)
    out = []
    for track in sorted(acc):
        s = acc[track]
        norm = np.linalg.norm(s)
        out.append(s / norm if norm > 1e-12 else np.array([1.0, 0.0, 0.0]))
    return out


def location_dependent_sed(frames: FrameEvents, n_classes: int, threshold_deg: float = 20.0,
                           segment_frames: int = 10) -> DetectionResult:
    """Segment-based error rate and F-score counting TP only within ``threshold_deg``.

    Within each segment and class, every distinct (class, track) event is one
    instance located at its mean direction over the segment. Reference and
    predicted instances are paired by the Hungarian method on angular distance.
    """
    if segment_frames < 1:
        raise ValueError(f"segment_frames must be >= 1, got {segment_frames}")
    tp_c = np.zeros(n_classes, dtype=np.int64)
    fp_c = np.zeros(n_classes, dtype=np.int64)
    fn_c = np.zeros(n_classes, dtype=np.int64)
    D = I = S = n_ref_total = 0
    for start in range(0, frames.n_frames, segment_frames):
        seg_ref = frames.ref[start:start + segment_frames]
        seg_pred = frames.pred[start:start + segment_frames]
        classes = {e.cls for fr in seg_ref + seg_pred for e in fr}
        seg_fp = seg_fn = 0
        for c in classes:
            r = _segment_tracks(seg_ref, c)
            p = _segment_tracks(seg_pred, c)
            tp = 0
            if r and p:
                dist = _distance_matrix(r, p)
                A = hungarian(dist)
                tp = int(((A == 1) & (dist <= threshold_deg)).sum())
            fp, fn = len(p) - tp, len(r) - tp
            tp_c[c] += tp
            fp_c[c] += fp
            fn_c[c] += fn
            seg_fp += fp
            seg_fn += fn
            n_ref_total += len(r)
        S += min(seg_fn, seg_fp)
        D += max(0, seg_fn - seg_fp)
        I += max(0, seg_fp - seg_fn)
    TP, FP, FN = int(tp_c.sum()), int(fp_c.sum()), int(fn_c.sum())
    er = (D + I + S) / n_ref_total if n_ref_total else float(D + I + S > 0)
    P = TP / (TP + FP) if TP + FP else 0.0
    R = TP / (TP + FN) if TP + FN else 0.0
    f20 = 2 * P * R / (P + R) if P + R else 0.0
    return DetectionResult(er, f20, D, I, S, TP, FP, FN, n_ref_total, tp_c, fp_c, fn_c)


# ---------------------------------------------------------------------------
# aggregate


def seld_score(er: float, f20: float, le_deg: float, lr_cd: float) -> float:
    return (er + (1.0 - f20) + le_deg / 180.0 + (1.0 - lr_cd)) / 4.0


def _fmt(value: float, places: int) -> str:
    return "" if np.isnan(value) else f"{value:.{places}f}"


@dataclass
class MetricsReport:
    ER: float
    F20: float
    LE: float
    LR_CD: float
    SELD: float
    le_flagged: bool = False
    F_c: np.ndarray = field(default_factory=lambda: np.zeros(0))
    LE_c: np.ndarray = field(default_factory=lambda: np.zeros(0))
    LR_c: np.ndarray = field(default_factory=lambda: np.zeros(0))
    counts: dict = field(default_factory=dict)

    def summary_row(self) -> list:
        return [self.ER, self.F20, self.LE, self.LR_CD, self.SELD]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "value"])
        for name, value in zip(("ER", "F20", "LE", "LR_CD", "SELD"), self.summary_row()):
            w.writerow([name, f"{value:.6f}"])
        w.writerow(["LE_flagged", int(self.le_flagged)])
        w.writerow([])
        w.writerow(["class", "F_c", "LE_c", "LR_c"])
        for c in range(len(self.F_c)):
            w.writerow([c] + [_fmt(v, p) for v, p in ((self.F_c[c], 6), (self.LE_c[c], 2), (self.LR_c[c], 6))])
        return buf.getvalue()

    def to_text(self) -> str:
        flag = " (no matched pairs)" if self.le_flagged else ""
        lines = [
            f"ER      {self.ER:.4f}",
            f"F20     {self.F20:.4f}",
            f"LE      {self.LE:.2f} deg{flag}",
            f"LR_CD   {self.LR_CD:.4f}",
            f"SELD    {self.SELD:.4f}",
            "",
            f"{'class':>5} {'F_c':>7} {'LE_c':>8} {'LR_c':>7}",
        ]
        for c in range(len(self.F_c)):
            f, le, lr = ((_fmt(v, p) or "n/a").rjust(w)
                         for v, p, w in ((self.F_c[c], 3, 7), (self.LE_c[c], 2, 8), (self.LR_c[c], 3, 7)))
            lines.append(f"{c:>5} {f} {le} {lr}")
        return "\n".join(lines) + "\n"


def evaluate(frames: FrameEvents, n_classes: int, threshold_deg: float = 20.0,
             segment_frames: int = 10) -> MetricsReport:
    det = location_dependent_sed(frames, n_classes, threshold_deg, segment_frames)
    loc = class_dependent_loc(frames, n_classes)
    score = seld_score(det.er, det.f20, loc.le, loc.lr_cd)
    counts = dict(TP=det.TP, FP=det.FP, FN=det.FN, D=det.D, I=det.I, S=det.S, N_ref=det.n_ref)
    return MetricsReport(det.er, det.f20, loc.le, loc.lr_cd, score, loc.le_flagged,
                         det.f_c, loc.le_c, loc.lr_c, counts)


def frames_from_rows(rows, n_frames: int | None = None) -> list[list[Event]]:
    """Annotation rows (frame, class, source, az_deg, el_deg) -> per-frame event lists."""
    rows = list(rows)
    if n_frames is None:
        n_frames = max((int(r[0]) for r in rows), default=-1) + 1
    frames: list[list[Event]] = [[] for _ in range(n_frames)]
    for frame, cls, src, az, el in rows:
        frames[int(frame)].append(Event(int(cls), direction(float(az), float(el)), int(src)))
    return frames
