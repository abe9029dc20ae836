"""Per-viewer valence tracks, subtitle segments, and the labels derived from them.

A track holds one viewer's continuous valence for one movie, one value every
``sample_period_ms`` (sample i sits at t = i * period). A segment's value for a
viewer is the mean of the samples with start <= t < end; the average viewer is
the mean of those per-viewer means, and both are thresholded at 0.
"""

from __future__ import annotations

import csv
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import read_fvec, segment_visual_feature

POSITIVE, NEGATIVE = 1, 0
DEFAULT_PERIOD_MS = 40
DEFAULT_FPS = 25


class DataError(ValueError):
    """Malformed input file or inconsistent dataset."""


class SegmentRangeError(DataError):
    """A segment reaches past the end of an annotation track."""


class EmptySegmentError(DataError):
    """No annotation sample falls inside a segment."""


@dataclass(frozen=True)
class AnnotationTrack:
    movie_id: str
    viewer_id: int
    values: np.ndarray
    sample_period_ms: int = DEFAULT_PERIOD_MS

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise DataError(f"{self.movie_id}/viewer {self.viewer_id}: track must be a non-empty 1-d sequence")
        if not np.all(np.isfinite(values)) or values.min() < -1.0 or values.max() > 1.0:
            raise DataError(f"{self.movie_id}/viewer {self.viewer_id}: values must lie in [-1, 1]")
        if self.sample_period_ms <= 0:
            raise DataError("sample_period_ms must be positive")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def duration_ms(self) -> int:
        return len(self.values) * self.sample_period_ms


@dataclass(frozen=True)
class SegmentSpec:
    movie_id: str
    start_ms: int
    end_ms: int
    text: str = ""

    def __post_init__(self):
        if not 0 <= self.start_ms < self.end_ms:
            raise DataError(f"{self.movie_id}: bad segment bounds [{self.start_ms}, {self.end_ms})")

    def __str__(self):
        return f"{self.movie_id}[{self.start_ms}-{self.end_ms} ms]"


@dataclass(frozen=True)
class LabeledSample:
    """One subtitle segment with per-viewer and average-viewer targets.

    Absent viewers have ``mask`` False and a NaN mean; their label slot holds 0.
    """

    segment: SegmentSpec
    per_viewer_mean: np.ndarray
    mask: np.ndarray
    avg_viewer_mean: float
    per_viewer_label: np.ndarray
    avg_viewer_label: int
    visual: np.ndarray | None = field(default=None, compare=False)

    @property
    def movie_id(self) -> str:
        return self.segment.movie_id

    @property
    def viewer_count(self) -> int:
        return len(self.mask)

    def target_labels(self) -> np.ndarray:
        """Labels for V1..VV then Vavg."""
        return np.append(self.per_viewer_label, self.avg_viewer_label).astype(np.int64)

    def target_mask(self) -> np.ndarray:
        return np.append(self.mask, self.mask.any())

    def target_means(self) -> np.ndarray:
        return np.append(self.per_viewer_mean, self.avg_viewer_mean)


def sample_indices(start_ms: int, end_ms: int, period_ms: int) -> range:
    """Indices i with start_ms <= i * period_ms < end_ms."""
    first = -(-start_ms // period_ms)
    stop = -(-end_ms // period_ms)
    return range(first, stop)


def segment_mean(track: AnnotationTrack, seg: SegmentSpec) -> float:
    idx = sample_indices(seg.start_ms, seg.end_ms, track.sample_period_ms)
    if len(idx) == 0:
        raise EmptySegmentError(f"segment {seg} contains no annotation sample (period {track.sample_period_ms} ms)")
    if idx.stop > len(track.values):
        raise SegmentRangeError(
            f"segment {seg} extends past the end of viewer {track.viewer_id}'s track "
            f"({track.duration_ms} ms)"
        )
    return float(track.values[idx.start:idx.stop].mean())


def binarize(mean_valence: float, threshold: float = 0.0, tie_positive: bool = False) -> int:
    """1 if the value is above ``threshold``, else 0. Exact ties go negative unless ``tie_positive``."""
    if not np.isfinite(mean_valence):
        raise DataError(f"cannot binarize non-finite value {mean_valence}")
    if tie_positive:
        return POSITIVE if mean_valence >= threshold else NEGATIVE
    return POSITIVE if mean_valence > threshold else NEGATIVE


def average_viewer(per_viewer_means: Sequence[float], mask: Sequence[bool] | None = None) -> float:
    means = np.asarray(per_viewer_means, dtype=np.float64)
    mask = np.ones(means.shape, bool) if mask is None else np.asarray(mask, bool)
    if not mask.any():
        raise DataError("average viewer undefined: no viewer annotated this segment")
    return float(means[mask].mean())


def label_segment(seg: SegmentSpec, tracks: Sequence[AnnotationTrack | None], threshold: float = 0.0,
                  tie_positive: bool = False, visual=None) -> LabeledSample:
    """Build a sample from the tracks of one movie; ``None`` marks an absent viewer."""
    v = len(tracks)
    means = np.full(v, np.nan)
    mask = np.zeros(v, dtype=bool)
    labels = np.zeros(v, dtype=np.int64)
    for i, tr in enumerate(tracks):
        if tr is None:
            continue
        means[i] = segment_mean(tr, seg)
        mask[i] = True
        labels[i] = binarize(means[i], threshold, tie_positive)
    avg = average_viewer(means, mask)
    return LabeledSample(seg, means, mask, avg, labels, binarize(avg, threshold, tie_positive), visual)


# -- file formats ---------------------------------------------------------------

def read_annotation_csv(path, movie_id: str, viewer_id: int, sample_period_ms: int = DEFAULT_PERIOD_MS) -> AnnotationTrack:
    """Read a ``frame_index,valence`` CSV. Frame indices must run 0, 1, 2, ..."""
    path = Path(path)
    values = []
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["frame_index", "valence"]:
            raise DataError(f"{path}:1: expected header 'frame_index,valence', got {header!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or not "".join(row).strip():
                continue
            if len(row) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            try:
                frame, val = int(row[0]), float(row[1])
            except ValueError:
                raise DataError(f"{path}:{lineno}: cannot parse {row!r}") from None
            if frame != len(values):
                raise DataError(f"{path}:{lineno}: expected frame_index {len(values)}, got {frame}")
            if not -1.0 <= val <= 1.0:
                raise DataError(f"{path}:{lineno}: valence {val} outside [-1, 1]")
            values.append(val)
    if not values:
        raise DataError(f"{path}: no annotation rows")
    return AnnotationTrack(movie_id, viewer_id, np.array(values), sample_period_ms)


def write_annotation_csv(path, values) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write("frame_index,valence\n")
        for i, v in enumerate(values):
            f.write(f"{i},{v:.6f}\n")


_TIME = re.compile(r"^(\d+):(\d{2}):(\d{2}),(\d{3})$")


def _parse_time(s: str) -> int:
    m = _TIME.match(s.strip())
    if not m:
        raise ValueError(s)
    h, mi, sec, ms = (int(x) for x in m.groups())
    return ((h * 60 + mi) * 60 + sec) * 1000 + ms


def format_time(ms: int) -> str:
    h, rem = divmod(ms, 3_600_000)
    mi, rem = divmod(rem, 60_000)
    s, ms = divmod(rem, 1000)
    return f"{h:02d}:{mi:02d}:{s:02d},{ms:03d}"


def read_srt(path, movie_id: str) -> list[SegmentSpec]:
    """Parse simplified SRT: index line, ``start --> end`` line, text lines, blank line.

    Multi-line text is joined with single spaces. Segments must be in time
    order and must not overlap.
    """
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    segments: list[SegmentSpec] = []
    i = 0
    while i < len(lines):
        if not lines[i].strip():
            i += 1
            continue
        idx_line = i + 1
        if not lines[i].strip().lstrip("﻿").isdigit():
            raise DataError(f"{path}:{idx_line}: expected a subtitle index, got {lines[i]!r}")
        if i + 1 >= len(lines) or "-->" not in lines[i + 1]:
            raise DataError(f"{path}:{idx_line + 1}: expected 'HH:MM:SS,mmm --> HH:MM:SS,mmm'")
        a, _, b = lines[i + 1].partition("-->")
        try:
            start, end = _parse_time(a), _parse_time(b)
        except ValueError:
            raise DataError(f"{path}:{idx_line + 1}: malformed timestamp line {lines[i + 1]!r}") from None
        j = i + 2
        text = []
        while j < len(lines) and lines[j].strip():
            text.append(lines[j].strip())
            j += 1
        try:
            seg = SegmentSpec(movie_id, start, end, " ".join(text))
        except DataError as e:
            raise DataError(f"{path}:{idx_line + 1}: {e}") from None
        if segments and seg.start_ms < segments[-1].end_ms:
            raise DataError(f"{path}:{idx_line + 1}: segment starts before the previous one ends")
        segments.append(seg)
        i = j
    return segments


def write_srt(path, segments: Sequence[SegmentSpec]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        for k, seg in enumerate(segments, start=1):
            f.write(f"{k}\n{format_time(seg.start_ms)} --> {format_time(seg.end_ms)}\n{seg.text}\n\n")


@dataclass(frozen=True)
class MovieEntry:
    movie_id: str
    annotations: tuple[Path | None, ...]
    subtitles: Path
    features: Path | None = None


@dataclass(frozen=True)
class DatasetManifest:
    movies: tuple[MovieEntry, ...]
    viewer_count: int
    sample_period_ms: int = DEFAULT_PERIOD_MS
    fps: int = DEFAULT_FPS
    threshold: float = 0.0

    @property
    def movie_ids(self) -> list[str]:
        return [m.movie_id for m in self.movies]


def load_manifest(path) -> DatasetManifest:
    """Read and validate a manifest; relative paths resolve against its directory."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{path}:{e.lineno}: invalid JSON ({e.msg})") from None
    except OSError as e:
        raise DataError(f"{path}: cannot read manifest ({e.strerror})") from None
    root = path.parent
    try:
        v = int(doc["viewer_count"])
        movies_doc = doc["movies"]
    except KeyError as e:
        raise DataError(f"{path}: missing key {e}") from None
    if v < 1:
        raise DataError(f"{path}: viewer_count must be >= 1")

    def resolve(p):
        if p is None:
            return None
        full = root / p
        if not full.exists():
            raise DataError(f"{path}: referenced file {p} does not exist")
        return full

    movies = []
    seen = set()
    for m in movies_doc:
        mid = m["movie_id"]
        if mid in seen:
            raise DataError(f"{path}: duplicate movie id {mid}")
        seen.add(mid)
        ann = tuple(resolve(p) for p in m["annotations"])
        if len(ann) != v:
            raise DataError(f"{path}: movie {mid} lists {len(ann)} annotation files, viewer_count is {v}")
        movies.append(MovieEntry(mid, ann, resolve(m["subtitles"]), resolve(m.get("features"))))
    return DatasetManifest(tuple(movies), v, int(doc.get("sample_period_ms", DEFAULT_PERIOD_MS)),
                           int(doc.get("fps", DEFAULT_FPS)), float(doc.get("threshold", 0.0)))


def write_manifest(path, manifest_doc: dict) -> None:
    Path(path).write_text(json.dumps(manifest_doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_movie(entry: MovieEntry, manifest: DatasetManifest):
    tracks = [None if p is None else read_annotation_csv(p, entry.movie_id, i + 1, manifest.sample_period_ms)
              for i, p in enumerate(entry.annotations)]
    segments = read_srt(entry.subtitles, entry.movie_id)
    feats = None if entry.features is None else read_fvec(entry.features, entry.movie_id)
    return tracks, segments, feats


def build_dataset(manifest: DatasetManifest | str | Path, tie_positive: bool = False) -> list[LabeledSample]:
    """One labeled sample per subtitle segment, in manifest movie order then start time."""
    if not isinstance(manifest, DatasetManifest):
        manifest = load_manifest(manifest)
    samples = []
    for entry in manifest.movies:
        tracks, segments, feats = load_movie(entry, manifest)
        for seg in segments:
            visual = None if feats is None else segment_visual_feature(feats, seg, manifest.fps)
            samples.append(label_segment(seg, tracks, manifest.threshold, tie_positive, visual))
    return samples


def movie_samples(samples: Sequence[LabeledSample], movie_ids) -> list[LabeledSample]:
    wanted = set(movie_ids)
    return [s for s in samples if s.movie_id in wanted]


def dataset_stats(samples: Sequence[LabeledSample]) -> dict:
    """Counts per movie plus positive fraction per target."""
    movies: dict[str, int] = {}
    for s in samples:
        movies[s.movie_id] = movies.get(s.movie_id, 0) + 1
    labels = np.array([s.target_labels() for s in samples])
    mask = np.array([s.target_mask() for s in samples])
    pos = (labels * mask).sum(axis=0) / np.maximum(mask.sum(axis=0), 1)
    return {
        "segments": len(samples),
        "movies": movies,
        "viewer_count": samples[0].viewer_count if samples else 0,
        "positive_fraction": [round(float(x), 6) for x in pos],
    }
