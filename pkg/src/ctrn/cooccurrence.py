"""Snippet-level label co-occurrence statistics and the G-classifier adjacency."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


@dataclass
class CooccurrenceModel:
    M: np.ndarray
    N: np.ndarray
    P: np.ndarray
    A_S_binary: np.ndarray
    A_S: np.ndarray
    theta: float
    reweight_p: float
    class_names: list[str] | None = None

    @classmethod
    def from_labels(cls, annotations: Iterable[np.ndarray], theta: float = 0.05,
                    p: float = 0.2, C: int | None = None,
                    class_names: Sequence[str] | None = None) -> "CooccurrenceModel":
        M, N = count_stats(annotations, C=C)
        P = conditional_probs(M, N)
        A_bin = binarize(P, theta, N)
        return cls(M, N, P, A_bin, reweight(A_bin, p), theta, p,
                   list(class_names) if class_names is not None else None)

    def links(self) -> list[tuple[int, int]]:
        """Off-diagonal (i, j) pairs kept by the threshold."""
        i, j = np.nonzero(self.A_S_binary)
        return [(int(a), int(b)) for a, b in zip(i, j) if a != b]


def count_stats(annotations: Iterable[np.ndarray], C: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Pairwise co-occurrence counts ``M`` and occurrence counts ``N``.

    Every row of every ``T x C`` label matrix is one snippet. ``M[i, j]``
    counts snippets where i and j are both active, so ``M[i, i] == N[i]``.
    """
    M = None
    for Y in annotations:
        Y = np.asarray(Y)
        if Y.ndim != 2:
            raise ValueError(f"label matrix must be T x C, got shape {Y.shape}")
        if C is None:
            C = Y.shape[1]
        if Y.shape[1] != C:
            raise ValueError(f"inconsistent class count: expected {C}, got {Y.shape[1]}")
        Yi = (Y > 0).astype(np.int64)
        M = Yi.T @ Yi if M is None else M + Yi.T @ Yi
    if M is None:
        C = C or 0
        M = np.zeros((C, C), dtype=np.int64)
    return M, np.diag(M).copy()


def conditional_probs(M: np.ndarray, N: np.ndarray) -> np.ndarray:
    """``P[i, j] = M[i, j] / N[i]``; rows of never-seen classes are zero."""
    M = np.asarray(M, dtype=float)
    N = np.asarray(N, dtype=float)
    P = np.zeros_like(M)
    seen = N > 0
    P[seen] = M[seen] / N[seen, None]
    return P


def binarize(P: np.ndarray, theta: float, N: np.ndarray | None = None) -> np.ndarray:
    """``1`` where ``P >= theta``.

    With occurrence counts ``N`` given, classes never seen in training keep
    no links at all (this only matters for ``theta == 0``).
    """
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must lie in [0, 1], got {theta}")
    A = (np.asarray(P) >= theta).astype(np.int64)
    if N is not None:
        absent = np.asarray(N) == 0
        A[absent, :] = 0
        A[:, absent] = 0
    return A


def reweight(A_binary: np.ndarray, p: float = 0.2) -> np.ndarray:
    """Keep ``1 - p`` on the diagonal and spread ``p`` evenly over neighbours.

    Rows without off-diagonal links become one-hot on the diagonal, so every
    row sums to 1.
    """
    if not 0.0 < p < 1.0:
        raise ValueError(f"reweight p must lie in (0, 1), got {p}")
    A = np.asarray(A_binary, dtype=float).copy()
    C = A.shape[0]
    np.fill_diagonal(A, 0.0)
    deg = A.sum(axis=1)
    out = np.zeros((C, C))
    linked = deg > 0
    out[linked] = p * A[linked] / deg[linked, None]
    out[np.arange(C), np.arange(C)] = np.where(linked, 1.0 - p, 1.0)
    return out


def export_cooccurrence(model: CooccurrenceModel, path) -> None:
    C = model.P.shape[0]
    names = model.class_names or [f"class_{i}" for i in range(C)]
    doc = {
        "theta": model.theta,
        "reweight_p": model.reweight_p,
        "class_names": names,
        "N": model.N.tolist(),
        "M": model.M.tolist(),
        "P": model.P.tolist(),
        "A_S_binary": model.A_S_binary.tolist(),
        "A_S": model.A_S.tolist(),
    }
    path = Path(path)
    try:
        path.write_text(json.dumps(doc, indent=1))
    except OSError as exc:
        raise OSError(f"could not write co-occurrence export to {path}: {exc}") from exc


def load_cooccurrence(path) -> CooccurrenceModel:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise OSError(f"could not read co-occurrence export {path}: {exc}") from exc
    return CooccurrenceModel(
        M=np.asarray(doc["M"], dtype=np.int64),
        N=np.asarray(doc["N"], dtype=np.int64),
        P=np.asarray(doc["P"], dtype=float),
        A_S_binary=np.asarray(doc["A_S_binary"], dtype=np.int64),
        A_S=np.asarray(doc["A_S"], dtype=float),
        theta=doc["theta"],
        reweight_p=doc["reweight_p"],
        class_names=doc["class_names"],
    )
