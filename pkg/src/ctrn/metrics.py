"""Per-frame mAP, co-occurring-snippet mAP and action-conditional metrics.

All functions take either a single ``T x C`` matrix or a list of per-video
matrices; snippets are pooled across videos before ranking. Optional masks
are length-``T`` binary vectors marking valid snippets.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

AP_VARIANT = "non-interpolated, stable descending sort with ascending-index tie-break"


class MetricError(ValueError):
    """The requested metric is undefined on the given data."""


@dataclass
class EvalResult:
    per_class_ap: list[float | None]
    map: float
    support: list[int]
    variant: str = AP_VARIANT

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ActionConditionalResult:
    tau: int
    P_AC: float | None
    R_AC: float | None
    F1_AC: float | None
    mAP_AC: float | None
    num_pairs: int = 0
    score_threshold: float = 0.5

    def to_dict(self) -> dict:
        return asdict(self)


def average_precision(scores, labels) -> float | None:
    """Non-interpolated AP; ``None`` when there is no positive label."""
    s = np.asarray(scores, dtype=float).reshape(-1)
    y = np.asarray(labels).reshape(-1) > 0
    if s.shape != y.shape:
        raise ValueError(f"scores ({s.size}) and labels ({y.size}) differ in length")
    if s.size == 0:
        raise ValueError("average_precision needs at least one sample")
    npos = int(y.sum())
    if npos == 0:
        return None
    order = np.argsort(-s, kind="stable")
    hits = y[order]
    ranks = np.nonzero(hits)[0] + 1
    precision_at_hits = np.arange(1, npos + 1) / ranks
    return float(precision_at_hits.sum() / npos)


def _pool(S, Y, mask=None) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(S, np.ndarray) and S.ndim == 2:
        S, Y = [S], [np.asarray(Y)]
        mask = None if mask is None else [mask]
    if len(S) != len(Y):
        raise ValueError(f"got {len(S)} score matrices but {len(Y)} label matrices")
    ss, ys = [], []
    for k, (s, y) in enumerate(zip(S, Y)):
        s, y = np.asarray(s, dtype=float), np.asarray(y)
        if s.shape != y.shape:
            raise ValueError(f"video {k}: scores {s.shape} vs labels {y.shape}")
        if mask is not None and mask[k] is not None:
            keep = np.asarray(mask[k]).reshape(-1)[: s.shape[0]] > 0
            s, y = s[keep], y[keep]
        ss.append(s)
        ys.append(y)
    if not ss:
        raise MetricError("no videos to evaluate")
    return np.concatenate(ss, axis=0), (np.concatenate(ys, axis=0) > 0).astype(np.int64)


def _map_pooled(S: np.ndarray, Y: np.ndarray) -> EvalResult:
    aps = [average_precision(S[:, c], Y[:, c]) if S.shape[0] else None for c in range(S.shape[1])]
    valid = [a for a in aps if a is not None]
    if not valid:
        raise MetricError("no class has a positive snippet")
    return EvalResult(aps, float(np.mean(valid)), Y.sum(axis=0).astype(int).tolist())


def per_frame_map(S, Y, mask=None) -> EvalResult:
    """Per-class AP over pooled snippets; absent classes are skipped in the mean."""
    return _map_pooled(*_pool(S, Y, mask))


def cooccurring_map(S, Y, mask=None) -> EvalResult:
    """Per-frame mAP restricted to snippets with two or more true actions."""
    s, y = _pool(S, Y, mask)
    multi = y.sum(axis=1) >= 2
    if not multi.any():
        raise MetricError("no snippet carries more than one action")
    return _map_pooled(s[multi], y[multi])


def _window_any(col: np.ndarray, tau: int) -> np.ndarray:
    if tau == 0:
        return col > 0
    return np.convolve(col.astype(np.int64), np.ones(2 * tau + 1, dtype=np.int64), "same") > 0


def action_conditional(S, Y, tau: int, score_threshold: float = 0.5, mask=None) -> ActionConditionalResult:
    """Action-conditional precision, recall, F1 and mAP within window ``tau``.

    For an ordered pair (i, j), i != j, the conditioned snippets are those
    within ``tau`` snippets of a true occurrence of j. On that set the scores
    of i are compared with the labels of i: precision and recall use
    ``score >= score_threshold``, AP uses the raw ranking. A pair counts when
    its conditioned set holds at least one true i; precision with no
    predicted positive is 0. The four numbers average over counted pairs.
    """
    if tau < 0:
        raise ValueError(f"tau must be non-negative, got {tau}")
    if isinstance(S, np.ndarray) and S.ndim == 2:
        S, Y = [S], [Y]
        mask = None if mask is None else [mask]
    C = np.asarray(Y[0]).shape[1]
    scores, labels, windows = [], [], []
    for k, (s, y) in enumerate(zip(S, Y)):
        s, y = np.asarray(s, dtype=float), np.asarray(y) > 0
        valid = np.ones(len(y), dtype=bool)
        if mask is not None and mask[k] is not None:
            valid = np.asarray(mask[k]).reshape(-1)[: len(y)] > 0
        y = y & valid[:, None]
        win = np.stack([_window_any(y[:, j], tau) for j in range(C)], axis=1) & valid[:, None]
        scores.append(s[valid])
        labels.append(y[valid])
        windows.append(win[valid])
    s = np.concatenate(scores)
    y = np.concatenate(labels)
    w = np.concatenate(windows)
    pred = s >= score_threshold
    precisions, recalls, aps = [], [], []
    for j in range(C):
        sel = w[:, j]
        if not sel.any():
            continue
        for i in range(C):
            if i == j:
                continue
            yi = y[sel, i]
            if not yi.any():
                continue
            pi = pred[sel, i]
            tp = int((pi & yi).sum())
            pp = int(pi.sum())
            precisions.append(tp / pp if pp else 0.0)
            recalls.append(tp / int(yi.sum()))
            aps.append(average_precision(s[sel, i], yi))
    if not precisions:
        return ActionConditionalResult(tau, None, None, None, None, 0, score_threshold)
    P, R = float(np.mean(precisions)), float(np.mean(recalls))
    F1 = 2 * P * R / (P + R) if P + R > 0 else 0.0
    return ActionConditionalResult(tau, P, R, F1, float(np.mean(aps)), len(precisions), score_threshold)
