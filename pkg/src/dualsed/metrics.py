"""Event decoding and intersection-criterion detection scoring.

decode_events turns frame posteriors into timestamped events (threshold,
per-class median filter, run merging). psds scores detection sets across
operating points with the intersection criteria (DTC / GTC / CTTC), builds
per-class effective ROC curves, penalizes across-class spread, and returns
the normalized area under the mean curve. psds_reference is a deliberately
slow pair-enumeration implementation kept as the correctness oracle for the
vectorized path.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.signal import medfilt

from .exceptions import ConfigurationError

# detections / ground truth interchange type: {clip_id: [DetectedEvent or
# (class_id, onset, offset) records]}


@dataclass(frozen=True)
class DetectedEvent:
    class_id: int
    onset: float
    offset: float
    threshold: float | None = None

    def __post_init__(self):
        if self.offset <= self.onset:
            raise ConfigurationError("event offset must exceed onset")

    @property
    def length(self) -> float:
        return self.offset - self.onset


def default_thresholds(n: int = 50) -> tuple[float, ...]:
    """n evenly spaced operating points strictly inside (0, 1)."""
    return tuple((np.arange(1, n + 1) / (n + 1)).tolist())


@dataclass(frozen=True)
class PsdsParams:
    dtc: float
    gtc: float
    cttc: float | None
    alpha_ct: float
    alpha_st: float
    e_max: float
    thresholds: tuple[float, ...] = field(default_factory=default_thresholds)

    def __post_init__(self):
        if self.e_max <= 0:
            raise ConfigurationError("e_max must be > 0")
        ths = tuple(self.thresholds)
        if any(not 0 < t < 1 for t in ths):
            raise ConfigurationError("thresholds must lie in (0, 1)")
        if any(b <= a for a, b in zip(ths, ths[1:])):
            raise ConfigurationError("thresholds must be strictly increasing")


def psds_presets() -> tuple[PsdsParams, PsdsParams]:
    """DCASE-convention operating parameters: (localization-heavy, tagging-heavy)."""
    p1 = PsdsParams(dtc=0.7, gtc=0.7, cttc=None, alpha_ct=0.0, alpha_st=1.0, e_max=100.0)
    p2 = PsdsParams(dtc=0.1, gtc=0.1, cttc=0.3, alpha_ct=0.5, alpha_st=1.0, e_max=100.0)
    return p1, p2


def decode_events(
    strong: np.ndarray,
    threshold: float,
    median_len,
    hop: float,
) -> list[DetectedEvent]:
    """Binarize (T, C) posteriors, median-filter per class, merge active runs.

    median_len is a single odd integer or one odd integer per class.
    """
    strong = np.asarray(strong)
    t_out, n_classes = strong.shape
    lens = np.broadcast_to(np.asarray(median_len, dtype=int), (n_classes,))
    for m in lens:
        if m < 1 or m % 2 == 0:
            raise ConfigurationError(f"median filter length must be odd positive, got {m}")
    events: list[DetectedEvent] = []
    for c in range(n_classes):
        active = (strong[:, c] >= threshold).astype(np.float64)
        if lens[c] > 1:
            active = medfilt(active, kernel_size=int(lens[c]))
        active = active > 0.5
        idx = np.flatnonzero(np.diff(np.concatenate(([0], active.view(np.int8), [0]))))
        for start, stop in zip(idx[::2], idx[1::2]):
            events.append(
                DetectedEvent(class_id=c, onset=start * hop, offset=stop * hop, threshold=threshold)
            )
    events.sort(key=lambda e: (e.class_id, e.onset))
    return events


def decode_over_thresholds(
    strong: np.ndarray, thresholds, median_len, hop: float
) -> dict[float, list[DetectedEvent]]:
    return {t: decode_events(strong, t, median_len, hop) for t in thresholds}


def _overlap(a_on, a_off, b_on, b_off):
    return max(0.0, min(a_off, b_off) - max(a_on, b_on))


def _n_truth_per_class(truth_by_clip, n_classes):
    n_truth = np.zeros(n_classes)
    for gts in truth_by_clip.values():
        for g in gts:
            n_truth[g.class_id] += 1
    if n_truth.sum() == 0:
        raise ConfigurationError("scoring requires at least one ground-truth event")
    return n_truth


def _counts_fast(dets_by_clip, truth_by_clip, n_classes, params):
    """Vectorized intersection-criterion TP/FP/cross-trigger counts for one
    operating point (overlap matrices per clip)."""
    tp = np.zeros(n_classes)
    fp = np.zeros(n_classes)
    ct = np.zeros((n_classes, n_classes))
    for clip_id, gts in truth_by_clip.items():
        dets = dets_by_clip.get(clip_id, [])
        if not dets and not gts:
            continue
        d_cls = np.array([d.class_id for d in dets], dtype=int)
        d_on = np.array([d.onset for d in dets])
        d_off = np.array([d.offset for d in dets])
        g_cls = np.array([g.class_id for g in gts], dtype=int)
        g_on = np.array([g.onset for g in gts])
        g_off = np.array([g.offset for g in gts])
        if len(dets) and len(gts):
            ov = np.maximum(
                0.0,
                np.minimum(d_off[:, None], g_off[None, :])
                - np.maximum(d_on[:, None], g_on[None, :]),
            )
        else:
            ov = np.zeros((len(dets), len(gts)))
        same = d_cls[:, None] == g_cls[None, :] if len(dets) and len(gts) else ov.astype(bool)
        d_len = d_off - d_on if len(dets) else d_on
        if len(dets):
            own = (ov * same).sum(axis=1) if len(gts) else np.zeros(len(dets))
            dtc_ok = own / d_len >= params.dtc
            np.add.at(fp, d_cls[~dtc_ok], 1)
            if params.cttc is not None and len(gts):
                cross = np.zeros((len(dets), n_classes))
                for k in range(n_classes):
                    cross[:, k] = (ov * (g_cls[None, :] == k)).sum(axis=1)
                trig = cross / d_len[:, None] >= params.cttc
                for i in np.flatnonzero(~dtc_ok):
                    for k in np.flatnonzero(trig[i]):
                        if k != d_cls[i]:
                            ct[d_cls[i], k] += 1
        else:
            dtc_ok = np.zeros(0, dtype=bool)
        if len(gts):
            if len(dets):
                covered = (ov * same * dtc_ok[:, None]).sum(axis=0)
            else:
                covered = np.zeros(len(gts))
            gtc_ok = covered / (g_off - g_on) >= params.gtc
            np.add.at(tp, g_cls[gtc_ok], 1)
    return tp, fp, ct


def _roc_points_fast(detections, truth_by_clip, total_duration_s, n_classes, params):
    """Per-class (effective FPR per hour, TPR) points, one per operating point."""
    n_truth = _n_truth_per_class(truth_by_clip, n_classes)
    hours = total_duration_s / 3600.0
    points = {c: [] for c in range(n_classes)}
    for thr in params.thresholds:
        tp, fp, ct = _counts_fast(detections.get(thr, {}), truth_by_clip, n_classes, params)
        for c in range(n_classes):
            tpr = tp[c] / n_truth[c] if n_truth[c] > 0 else 0.0
            efpr = fp[c] / hours
            if params.cttc is not None and n_classes > 1:
                efpr = efpr + params.alpha_ct * (ct[c].sum() / (n_classes - 1)) / hours
            points[c].append((efpr, tpr))
    return points


def _curve_breakpoints(points, params):
    return sorted(
        {0.0, params.e_max}
        | {e for pts in points.values() for (e, _) in pts if e <= params.e_max}
    )


def _area_fast(points, n_classes, params) -> float:
    """Normalized area under the spread-penalized mean of the monotonized
    per-class staircase curves over [0, e_max]."""
    grid = np.array(_curve_breakpoints(points, params))
    per_class = np.zeros((n_classes, len(grid)))
    for c in range(n_classes):
        pts = points[c]
        if pts:
            efs = np.array([e for e, _ in pts])
            tprs = np.array([t for _, t in pts])
            vals = np.where(efs[None, :] <= grid[:, None], tprs[None, :], 0.0)
            per_class[c] = vals.max(axis=1)
    mean = per_class.mean(axis=0)
    std = per_class.std(axis=0)
    etpr = np.maximum(0.0, mean - params.alpha_st * std)
    return float((etpr[:-1] * np.diff(grid)).sum() / params.e_max)


@dataclass
class PsdsResult:
    score: float
    per_class_points: dict[int, list[tuple[float, float]]]


def psds(
    detections: dict[float, dict[str, list[DetectedEvent]]],
    truth_by_clip: dict[str, list],
    total_duration_s: float,
    n_classes: int,
    params: PsdsParams,
) -> PsdsResult:
    """Score detections at every operating point against ground truth."""
    for thr in params.thresholds:
        if thr not in detections:
            raise ConfigurationError(f"missing detections for threshold {thr}")
    points = _roc_points_fast(detections, truth_by_clip, total_duration_s, n_classes, params)
    return PsdsResult(score=_area_fast(points, n_classes, params), per_class_points=points)


# --- reference implementation ------------------------------------------------
# Pure-python pair enumeration, written before and independently of the
# vectorized path above; kept as the oracle it is tested against.


def _counts_reference(dets_by_clip, truth_by_clip, n_classes, params):
    tp = [0] * n_classes
    fp = [0] * n_classes
    ct = [[0] * n_classes for _ in range(n_classes)]
    for clip_id, gts in truth_by_clip.items():
        dets = dets_by_clip.get(clip_id, [])
        dtc_ok = {}
        for d in dets:
            inter = 0.0
            for g in gts:
                if g.class_id == d.class_id:
                    inter += _overlap(d.onset, d.offset, g.onset, g.offset)
            ok = inter / (d.offset - d.onset) >= params.dtc
            dtc_ok[id(d)] = ok
            if not ok:
                fp[d.class_id] += 1
                if params.cttc is not None:
                    for k in range(n_classes):
                        if k == d.class_id:
                            continue
                        inter_k = 0.0
                        for g in gts:
                            if g.class_id == k:
                                inter_k += _overlap(d.onset, d.offset, g.onset, g.offset)
                        if inter_k / (d.offset - d.onset) >= params.cttc:
                            ct[d.class_id][k] += 1
        for g in gts:
            covered = 0.0
            for d in dets:
                if d.class_id == g.class_id and dtc_ok[id(d)]:
                    covered += _overlap(d.onset, d.offset, g.onset, g.offset)
            if covered / (g.offset - g.onset) >= params.gtc:
                tp[g.class_id] += 1
    return tp, fp, ct


def psds_reference(
    detections: dict[float, dict[str, list[DetectedEvent]]],
    truth_by_clip: dict[str, list],
    total_duration_s: float,
    n_classes: int,
    params: PsdsParams,
) -> float:
    n_truth = _n_truth_per_class(truth_by_clip, n_classes)
    hours = total_duration_s / 3600.0
    points = {c: [] for c in range(n_classes)}
    for thr in params.thresholds:
        tp, fp, ct = _counts_reference(detections.get(thr, {}), truth_by_clip, n_classes, params)
        for c in range(n_classes):
            tpr = tp[c] / n_truth[c] if n_truth[c] > 0 else 0.0
            efpr = fp[c] / hours
            if params.cttc is not None and n_classes > 1:
                efpr += params.alpha_ct * (sum(ct[c]) / (n_classes - 1)) / hours
            points[c].append((efpr, tpr))
    area = 0.0
    breakpoints = _curve_breakpoints(points, params)
    for left, right in zip(breakpoints, breakpoints[1:]):
        vals = []
        for c in range(n_classes):
            best = 0.0
            for e, t in points[c]:
                if e <= left and t > best:
                    best = t
            vals.append(best)
        mean = sum(vals) / n_classes
        var = sum((v - mean) ** 2 for v in vals) / n_classes
        etpr = max(0.0, mean - params.alpha_st * math.sqrt(var))
        area += etpr * (right - left)
    return area / params.e_max


def event_f1(
    dets_by_clip: dict[str, list[DetectedEvent]],
    truth_by_clip: dict[str, list],
    collar: float = 0.2,
) -> float:
    """Micro-averaged event F1 with onset/offset collar matching.

    Greedy one-to-one matching in onset order; a detection matches an unmatched
    ground truth of the same class when both boundary errors are within the collar.
    """
    if collar < 0:
        raise ConfigurationError("collar must be >= 0")
    n_det = n_truth = n_match = 0
    for clip_id in set(dets_by_clip) | set(truth_by_clip):
        dets = sorted(dets_by_clip.get(clip_id, []), key=lambda d: (d.onset, d.class_id))
        gts = truth_by_clip.get(clip_id, [])
        n_det += len(dets)
        n_truth += len(gts)
        used = [False] * len(gts)
        for d in dets:
            for j, g in enumerate(gts):
                if used[j] or g.class_id != d.class_id:
                    continue
                if abs(g.onset - d.onset) <= collar and abs(g.offset - d.offset) <= collar:
                    used[j] = True
                    n_match += 1
                    break
    if n_det == 0 or n_truth == 0:
        return 0.0
    precision = n_match / n_det
    recall = n_match / n_truth
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)
