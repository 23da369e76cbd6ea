"""Synthetic densely-labelled videos and on-disk dataset formats.

Tensor files (``.ctrnt``)::

    b"CTRNT" | u32 rank | rank x u64 extents | float32 values, row-major

all little-endian. Annotation files are JSON documents
``{"id", "T", "C", "intervals": [{"class", "start", "end"}]}`` with ``end``
exclusive, in snippet units.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

TENSOR_MAGIC = b"CTRNT"
MAX_ELEMENTS = 2**31


class FormatError(ValueError):
    """A dataset file does not follow its documented format."""


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class ExtentOverflowError(FormatError):
    pass


class AnnotationError(FormatError):
    pass


@dataclass
class SyntheticSpec:
    """Parameters of the synthetic generator.

    Classes that are the target of a ``co_pairs`` or ``order_pairs`` entry
    never get independent intervals: they only appear through the planted
    relation. Every other class receives ``instances_per_video`` random
    intervals per video on average (Poisson), each ``min_len..max_len``
    snippets long. ``class_scales`` optionally overrides ``prototype_scale``
    per class.
    """
    C: int = 10
    T: int = 64
    D1: int = 64
    num_videos: int = 20
    co_pairs: list = field(default_factory=list)
    order_pairs: list = field(default_factory=list)
    noise_sigma: float = 0.5
    prototype_scale: float = 1.0
    seed: int = 0
    instances_per_video: float = 6.0
    min_len: int = 4
    max_len: int = 16
    class_scales: list | None = None

    def validate(self) -> None:
        for name in ("C", "T", "D1", "num_videos"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"need 1 <= min_len <= max_len, got {self.min_len}, {self.max_len}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if self.instances_per_video < 0:
            raise ValueError("instances_per_video must be non-negative")
        for entry in self.co_pairs:
            i, j, q = entry
            self._check_class(i)
            self._check_class(j)
            if not 0.0 <= q <= 1.0:
                raise ValueError(f"co_pair probability must lie in [0, 1], got {q}")
        for entry in self.order_pairs:
            i, j, lags = entry[0], entry[1], entry[2]
            self._check_class(i)
            self._check_class(j)
            lo, hi = lags
            if not 1 <= lo <= hi:
                raise ValueError(f"order_pair lag range must satisfy 1 <= lo <= hi, got {lags}")
            if len(entry) > 3 and not 0.0 <= entry[3] <= 1.0:
                raise ValueError(f"order_pair probability must lie in [0, 1], got {entry[3]}")
        if self.class_scales is not None and len(self.class_scales) != self.C:
            raise ValueError(f"class_scales needs {self.C} entries")

    def _check_class(self, c) -> None:
        if not 0 <= int(c) < self.C:
            raise ValueError(f"class index {c} out of range for C={self.C}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(**d)


@dataclass
class VideoRecord:
    id: str
    features: np.ndarray
    labels: np.ndarray

    @property
    def T(self) -> int:
        return self.labels.shape[0]

    @property
    def C(self) -> int:
        return self.labels.shape[1]


def generate(spec: SyntheticSpec) -> list[VideoRecord]:
    """Draw ``spec.num_videos`` videos; fully determined by ``spec.seed``.

    Snippet features are the scaled sum of the active classes' unit
    prototypes plus isotropic Gaussian noise. ``co_pairs`` entries
    ``(i, j, q)`` copy each interval of i onto j with probability q;
    ``order_pairs`` entries ``(i, j, (lo, hi)[, q])`` start an interval of j
    ``lo..hi`` snippets after an interval of i ends (probability q, default
    1). Relations are applied once, in list order, to the intervals present
    at that point, and intervals are clipped to the video.
    """
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(spec.seed))
    C, T, D1 = spec.C, spec.T, spec.D1
    protos = rng.standard_normal((C, D1))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    scales = np.full(C, spec.prototype_scale) if spec.class_scales is None else np.asarray(spec.class_scales, float)
    targets = {int(e[1]) for e in spec.co_pairs} | {int(e[1]) for e in spec.order_pairs}
    sources = [c for c in range(C) if c not in targets]
    width = len(str(max(spec.num_videos - 1, 0)))
    videos = []
    for v in range(spec.num_videos):
        intervals: list[tuple[int, int, int]] = []
        if sources:
            for _ in range(rng.poisson(spec.instances_per_video)):
                c = sources[rng.integers(len(sources))]
                length = int(rng.integers(spec.min_len, spec.max_len + 1))
                start = int(rng.integers(0, T))
                intervals.append((c, start, min(start + length, T)))
        for entry in spec.co_pairs:
            i, j, q = int(entry[0]), int(entry[1]), float(entry[2])
            for c, s, e in list(intervals):
                if c == i and rng.random() < q:
                    intervals.append((j, s, e))
        for entry in spec.order_pairs:
            i, j, (lo, hi) = int(entry[0]), int(entry[1]), entry[2]
            q = float(entry[3]) if len(entry) > 3 else 1.0
            for c, s, e in list(intervals):
                if c == i and rng.random() < q:
                    start = e + int(rng.integers(lo, hi + 1))
                    length = int(rng.integers(spec.min_len, spec.max_len + 1))
                    if start < T:
                        intervals.append((j, start, min(start + length, T)))
        labels = np.zeros((T, C), dtype=np.int8)
        for c, s, e in intervals:
            labels[s:e, c] = 1
        feats = labels.astype(float) @ (scales[:, None] * protos)
        if spec.noise_sigma > 0:
            feats = feats + spec.noise_sigma * rng.standard_normal((T, D1))
        videos.append(VideoRecord(f"vid{v:0{width}d}", feats.astype(np.float32), labels))
    return videos


# ------------------------------------------------------------------ tensors

def save_tensor(path, array) -> None:
    a = np.asarray(array, dtype="<f4", order="C")
    header = TENSOR_MAGIC + struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
    Path(path).write_bytes(header + a.tobytes())


def read_tensor(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if blob[: len(TENSOR_MAGIC)] != TENSOR_MAGIC:
        raise BadMagicError(f"{path}: not a CTRNT tensor file")
    off = len(TENSOR_MAGIC)
    if len(blob) < off + 4:
        raise TruncatedFileError(f"{path}: truncated before rank")
    (rank,) = struct.unpack_from("<I", blob, off)
    off += 4
    if rank > 16:
        raise ExtentOverflowError(f"{path}: rank {rank} is implausibly large")
    if len(blob) < off + 8 * rank:
        raise TruncatedFileError(f"{path}: truncated inside the extents")
    shape = struct.unpack_from(f"<{rank}Q", blob, off)
    off += 8 * rank
    n = 1
    for s in shape:
        n *= s
        if n > MAX_ELEMENTS:
            raise ExtentOverflowError(f"{path}: extents {shape} exceed {MAX_ELEMENTS} elements")
    if len(blob) - off < 4 * n:
        raise TruncatedFileError(f"{path}: payload has {len(blob) - off} bytes, need {4 * n}")
    if len(blob) - off > 4 * n:
        raise FormatError(f"{path}: {len(blob) - off - 4 * n} trailing bytes after payload")
    return np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(shape).astype(np.float32)


def load_features(path) -> np.ndarray:
    """A ``T x D1`` feature sequence."""
    a = read_tensor(path)
    if a.ndim != 2:
        raise FormatError(f"{path}: feature file must be rank 2, got shape {a.shape}")
    return a


# -------------------------------------------------------------- annotations

def labels_to_intervals(labels: np.ndarray) -> list[dict]:
    out = []
    for c in range(labels.shape[1]):
        col = np.concatenate([[0], (labels[:, c] > 0).astype(np.int8), [0]])
        edges = np.diff(col)
        for s, e in zip(np.nonzero(edges == 1)[0], np.nonzero(edges == -1)[0]):
            out.append({"class": int(c), "start": int(s), "end": int(e)})
    return out


def save_annotations(path, video_id: str, labels: np.ndarray) -> None:
    T, C = labels.shape
    doc = {"id": video_id, "T": int(T), "C": int(C), "intervals": labels_to_intervals(labels)}
    Path(path).write_text(json.dumps(doc, indent=1))


def parse_annotations(doc: dict) -> np.ndarray:
    try:
        T, C = int(doc["T"]), int(doc["C"])
        intervals = doc["intervals"]
    except (KeyError, TypeError, ValueError) as exc:
        raise AnnotationError(f"annotation document is missing T, C or intervals: {exc}") from exc
    Y = np.zeros((T, C), dtype=np.int8)
    for iv in intervals:
        c, s, e = int(iv["class"]), int(iv["start"]), int(iv["end"])
        if not 0 <= c < C:
            raise AnnotationError(f"unknown class id {c} (C={C})")
        if not (0 <= s < T and s < e <= T):
            raise AnnotationError(f"interval [{s}, {e}) out of range for T={T}")
        Y[s:e, c] = 1
    return Y


def load_annotations(path) -> np.ndarray:
    """Binary ``T x C`` label matrix from an annotation JSON file."""
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: invalid JSON: {exc}") from exc
    try:
        return parse_annotations(doc)
    except AnnotationError as exc:
        raise AnnotationError(f"{path}: {exc}") from exc


# ------------------------------------------------------------------ dataset

def split_ids(ids: Sequence[str], test_fraction: float, seed: int,
              val_fraction: float = 0.0) -> dict[str, list[str]]:
    rng = np.random.Generator(np.random.PCG64(seed))
    order = [ids[i] for i in rng.permutation(len(ids))]
    n_test = int(round(test_fraction * len(ids)))
    n_val = int(round(val_fraction * len(ids)))
    split = {"train": sorted(order[n_test + n_val:]), "test": sorted(order[:n_test])}
    if n_val:
        split["val"] = sorted(order[n_test:n_test + n_val])
    return split


def write_dataset(root, videos: Sequence[VideoRecord], split: dict[str, list[str]]) -> None:
    root = Path(root)
    (root / "features").mkdir(parents=True, exist_ok=True)
    (root / "annotations").mkdir(parents=True, exist_ok=True)
    for v in videos:
        save_tensor(root / "features" / f"{v.id}.ctrnt", v.features)
        save_annotations(root / "annotations" / f"{v.id}.json", v.id, v.labels)
    (root / "split.json").write_text(json.dumps(split, indent=1))


def read_dataset(root) -> tuple[dict[str, VideoRecord], dict[str, list[str]]]:
    root = Path(root)
    split_path = root / "split.json"
    if not split_path.is_file():
        raise FileNotFoundError(f"{root}: no split.json (is this a dataset directory?)")
    split = json.loads(split_path.read_text())
    ids = sorted({i for part in split.values() for i in part})
    videos = {}
    for vid in ids:
        feats = load_features(root / "features" / f"{vid}.ctrnt")
        labels = load_annotations(root / "annotations" / f"{vid}.json")
        if feats.shape[0] != labels.shape[0]:
            raise FormatError(f"{vid}: features have T={feats.shape[0]}, labels T={labels.shape[0]}")
        videos[vid] = VideoRecord(vid, feats, labels)
    return videos, split
