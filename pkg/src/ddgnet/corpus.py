"""Synthetic two-stream untrimmed videos with ground-truth segments.

Every category (and the background) has one unit-norm centroid per
modality.  Action snippets are their category centroid plus Gaussian
noise, background snippets the background centroid plus noise.  Snippets
just outside a segment blend action and background with a weight that
fades with distance, which gives each action a band of ambiguous context.
A small fraction of action snippets have one modality pulled halfway
towards background, so RGB and flow disagree there.

On disk a corpus directory holds::

    manifest.csv      video_id,split
    labels.csv        video_id,cat1|cat2|...
    annotations.csv   video_id,start,end,category   (1-based, inclusive)
    features/<video_id>.ddgf
"""
from __future__ import annotations

import csv
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

FEATURE_MAGIC = b"DDGF"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class SpecError(ValueError):
    """Corpus parameters are invalid or cannot be realised."""


class FormatError(ValueError):
    """A feature file is malformed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass(frozen=True)
class CorpusSpec:
    num_categories: int = 4
    feature_dim: int = 32
    num_train: int = 60
    num_test: int = 30
    snippets_per_video: int = 80
    min_segments: int = 2
    max_segments: int = 4
    min_segment_length: int = 6
    max_segment_length: int = 14
    boundary_width: int = 3
    noise_scale: float = 0.25
    disagreement_prob: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.num_categories < 2:
            raise SpecError("num_categories must be >= 2")
        if self.feature_dim < 4:
            raise SpecError("feature_dim must be >= 4")
        if self.snippets_per_video < 16:
            raise SpecError("snippets_per_video must be >= 16")
        if self.boundary_width < 0:
            raise SpecError("boundary_width must be >= 0")
        if self.min_segments < 1:
            raise SpecError("every video needs at least one segment (min_segments >= 1)")
        if self.max_segments < self.min_segments:
            raise SpecError("max_segments < min_segments")
        if not 1 <= self.min_segment_length <= self.max_segment_length:
            raise SpecError("segment length range is invalid")
        if self.noise_scale < 0 or not 0 <= self.disagreement_prob <= 1:
            raise SpecError("noise_scale must be >= 0 and disagreement_prob in [0, 1]")
        if self.num_train < 0 or self.num_test < 0 or self.num_train + self.num_test == 0:
            raise SpecError("corpus must contain at least one video")
        need = self.max_segments * self.min_segment_length + (self.max_segments - 1) * self._gap
        if need > self.snippets_per_video:
            raise SpecError(
                f"{self.max_segments} segments of length >= {self.min_segment_length} with "
                f"gaps of {self._gap} need {need} snippets, only {self.snippets_per_video} available"
            )

    @property
    def _gap(self) -> int:
        # boundary bands of neighbouring segments never overlap
        return max(1, 2 * self.boundary_width)


@dataclass(frozen=True)
class GroundTruthSegment:
    start: int
    end: int
    category: int


@dataclass
class Video:
    video_id: str
    rgb: np.ndarray
    flow: np.ndarray
    segments: list[GroundTruthSegment] = field(default_factory=list)
    label: np.ndarray | None = None

    @property
    def T(self) -> int:
        return self.rgb.shape[1]


def _unit_centroids(rng, count, dim, max_cos=0.3, tries=10000):
    for _ in range(tries):
        c = rng.standard_normal((count, dim))
        c /= np.linalg.norm(c, axis=1, keepdims=True)
        g = c @ c.T
        np.fill_diagonal(g, -1.0)
        if g.max() < max_cos:
            return c
    raise SpecError(f"could not draw {count} centroids with cosine < {max_cos} in {dim} dims")


def _place_segments(rng, spec: CorpusSpec):
    T = spec.snippets_per_video
    n = int(rng.integers(spec.min_segments, spec.max_segments + 1))
    while True:
        lengths = rng.integers(spec.min_segment_length, spec.max_segment_length + 1, size=n)
        slack = T - int(lengths.sum()) - (n - 1) * spec._gap
        if slack >= 0:
            break
    # split the slack over n+1 gaps
    cuts = np.sort(rng.integers(0, slack + 1, size=n))
    extra = np.diff(np.concatenate([[0], cuts, [slack]]))
    out, pos = [], int(extra[0])
    for i, length in enumerate(lengths):
        out.append((pos, pos + int(length) - 1))
        pos += int(length) + spec._gap + int(extra[i + 1])
    return out


def _make_video(rng, spec: CorpusSpec, video_id: str, centroids) -> Video:
    T, D, C = spec.snippets_per_video, spec.feature_dim, spec.num_categories
    spans = _place_segments(rng, spec)
    cats = rng.integers(0, C, size=len(spans))
    # per snippet: category index (C = background) and action weight alpha
    owner = np.full(T, C)
    alpha = np.zeros(T)
    for (s, e), c in zip(spans, cats):
        owner[s : e + 1] = c
        alpha[s : e + 1] = 1.0
        w = spec.boundary_width
        for d in range(1, w + 1):
            a = 1.0 - d / (w + 1)
            for t in (s - d, e + d):
                if 0 <= t < T:
                    owner[t] = c
                    alpha[t] = a
    streams = []
    for m in range(2):
        cen = centroids[m]
        act = cen[np.minimum(owner, C - 1)].T
        base = alpha * act + (1 - alpha) * cen[C][:, None]
        streams.append(base)
    # one modality drifts towards background on a few action snippets
    inside = np.flatnonzero(alpha == 1.0)
    flip = inside[rng.random(len(inside)) < spec.disagreement_prob]
    which = rng.integers(0, 2, size=len(flip))
    for t, m in zip(flip, which):
        streams[m][:, t] = 0.5 * streams[m][:, t] + 0.5 * centroids[m][C]
    rgb = streams[0] + rng.standard_normal((D, T)) * (spec.noise_scale / np.sqrt(D))
    flow = streams[1] + rng.standard_normal((D, T)) * (spec.noise_scale / np.sqrt(D))
    segments = [GroundTruthSegment(s + 1, e + 1, int(c)) for (s, e), c in zip(spans, cats)]
    label = np.zeros(C)
    label[cats] = 1.0
    return Video(video_id, rgb, flow, segments, label)


def generate_corpus(spec: CorpusSpec) -> tuple[list[Video], list[Video]]:
    """Draw the train and test splits; fully determined by ``spec.seed``."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    centroids = [_unit_centroids(rng, spec.num_categories + 1, spec.feature_dim) for _ in range(2)]
    train = [_make_video(rng, spec, f"train_{i:04d}", centroids) for i in range(spec.num_train)]
    test = [_make_video(rng, spec, f"test_{i:04d}", centroids) for i in range(spec.num_test)]
    return train, test


def corpus_centroids(spec: CorpusSpec):
    """Per-modality centroids (rows: categories then background) for ``spec``."""
    rng = np.random.default_rng(spec.seed)
    return [_unit_centroids(rng, spec.num_categories + 1, spec.feature_dim) for _ in range(2)]


# ---------------------------------------------------------------- files


def write_features(path, rgb: np.ndarray, flow: np.ndarray) -> None:
    rgb = np.ascontiguousarray(rgb, dtype="<f8")
    flow = np.ascontiguousarray(flow, dtype="<f8")
    if rgb.ndim != 2 or rgb.shape != flow.shape:
        raise ValueError(f"streams must be equal-shape matrices, got {rgb.shape} and {flow.shape}")
    D, T = rgb.shape
    Path(path).write_bytes(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, T, D) + rgb.tobytes() + flow.tobytes())


def read_features(path) -> tuple[np.ndarray, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError("truncated header", len(data))
    magic, version, T, D = _HEADER.unpack_from(data)
    if magic != FEATURE_MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != FEATURE_VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    block = 8 * T * D
    expected = _HEADER.size + 2 * block
    if len(data) < expected:
        raise FormatError(f"truncated body: header says {D}x{T} per stream", len(data))
    if len(data) > expected:
        raise FormatError(f"{len(data) - expected} trailing bytes after {D}x{T} streams", expected)
    rgb = np.frombuffer(data, dtype="<f8", count=D * T, offset=_HEADER.size).reshape(D, T)
    flow = np.frombuffer(data, dtype="<f8", count=D * T, offset=_HEADER.size + block).reshape(D, T)
    return rgb.astype(np.float64), flow.astype(np.float64)


def write_corpus(root, train: list[Video], test: list[Video]) -> None:
    root = Path(root)
    (root / "features").mkdir(parents=True, exist_ok=True)
    with open(root / "manifest.csv", "w", newline="") as fm, \
            open(root / "labels.csv", "w", newline="") as fl, \
            open(root / "annotations.csv", "w", newline="") as fa:
        wm, wl, wa = csv.writer(fm), csv.writer(fl), csv.writer(fa)
        for split, videos in (("train", train), ("test", test)):
            for v in videos:
                wm.writerow([v.video_id, split])
                wl.writerow([v.video_id, "|".join(str(c) for c in np.flatnonzero(v.label))])
                for s in v.segments:
                    wa.writerow([v.video_id, s.start, s.end, s.category])
                write_features(root / "features" / f"{v.video_id}.ddgf", v.rgb, v.flow)


def read_manifest(root) -> list[tuple[str, str]]:
    with open(Path(root) / "manifest.csv", newline="") as f:
        return [(row[0], row[1]) for row in csv.reader(f) if row]


def load_split(root, split: str, num_categories: int) -> list[Video]:
    """Load every video of ``split``; a missing feature file raises naming it."""
    root = Path(root)
    ids = [vid for vid, s in read_manifest(root) if s == split]
    labels, segments = {}, {vid: [] for vid in ids}
    with open(root / "labels.csv", newline="") as f:
        for row in csv.reader(f):
            if row and row[0] in segments:
                y = np.zeros(num_categories)
                cats = [int(c) for c in row[1].split("|") if c != ""]
                if any(c >= num_categories for c in cats):
                    raise SpecError(f"{row[0]}: category out of range for {num_categories} categories")
                y[cats] = 1.0
                labels[row[0]] = y
    with open(root / "annotations.csv", newline="") as f:
        for row in csv.reader(f):
            if row and row[0] in segments:
                segments[row[0]].append(GroundTruthSegment(int(row[1]), int(row[2]), int(row[3])))
    videos = []
    for vid in ids:
        path = root / "features" / f"{vid}.ddgf"
        if not path.exists():
            raise FileNotFoundError(f"missing feature file {path}")
        rgb, flow = read_features(path)
        videos.append(Video(vid, rgb, flow, segments[vid], labels.get(vid)))
    return videos


def spec_dict(spec: CorpusSpec) -> dict:
    return asdict(spec)
