"""Model inputs: padded token ids for subtitle text, pooled clip features for video.

Video features are produced elsewhere (a pretrained spatio-temporal network run
over 16-frame windows every 8 frames, spatially average-pooled). They are read
from ``.fvec`` files and max-pooled over the windows a segment touches.
"""

from __future__ import annotations

import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

MAX_TOKENS = 18
PAD, UNK = "<pad>", "<unk>"
PAD_ID, UNK_ID = 0, 1

FVEC_MAGIC = b"FVEC1\n"
CHUNK_WINDOW = 16
CHUNK_STRIDE = 8
DEFAULT_FEATURE_DIM = 1024

_PUNCT = re.compile(r"[^\w\s]")


def tokenize(text: str) -> list[str]:
    """Lowercase, drop punctuation, split on whitespace."""
    return _PUNCT.sub("", text.lower()).split()


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.tokens[:2] != (PAD, UNK):
            raise ValueError("vocabulary must start with the PAD and UNK tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    @property
    def size(self) -> int:
        return len(self.tokens)

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def id(self, token: str) -> int:
        return self.index.get(token, UNK_ID)


def build_vocab(texts: Iterable, min_count: int = 1) -> Vocabulary:
    """Vocabulary over the training texts, most frequent first, ties alphabetical.

    ``texts`` may hold strings or anything with a ``segment.text`` (labeled samples).
    """
    counts: Counter = Counter()
    n = 0
    for item in texts:
        n += 1
        text = item if isinstance(item, str) else item.segment.text
        counts.update(tokenize(text))
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty training set")
    kept = sorted((t for t, c in counts.items() if c >= min_count and t not in (PAD, UNK)),
                  key=lambda t: (-counts[t], t))
    return Vocabulary((PAD, UNK, *kept))


def tokenize_pad(text: str, vocab: Vocabulary, max_len: int = MAX_TOKENS) -> np.ndarray:
    """Token ids of ``text``, truncated to the first ``max_len`` and right-padded."""
    ids = [vocab.id(t) for t in tokenize(text)[:max_len]]
    out = np.full(max_len, PAD_ID, dtype=np.int64)
    out[: len(ids)] = ids
    return out


def encode_texts(texts: Iterable[str], vocab: Vocabulary, max_len: int = MAX_TOKENS) -> np.ndarray:
    rows = [tokenize_pad(t, vocab, max_len) for t in texts]
    if not rows:
        return np.zeros((0, max_len), dtype=np.int64)
    return np.stack(rows)


# -- visual -------------------------------------------------------------------

@dataclass(frozen=True)
class VisualFeatureSet:
    movie_id: str
    features: np.ndarray  # (num_chunks, feature_dim)
    window: int = CHUNK_WINDOW
    stride: int = CHUNK_STRIDE

    def __post_init__(self):
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError(f"{self.movie_id}: need at least one chunk feature row, got shape {self.features.shape}")
        if self.window <= 0 or self.stride <= 0:
            raise ValueError("window and stride must be positive")

    @property
    def num_chunks(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


def chunk_starts(num_frames: int, window: int = CHUNK_WINDOW, stride: int = CHUNK_STRIDE) -> np.ndarray:
    """First frame of every full window that fits in ``num_frames`` frames."""
    if num_frames < window:
        return np.zeros(0, dtype=np.int64)
    return np.arange((num_frames - window) // stride + 1, dtype=np.int64) * stride


def segment_frames(start_ms: int, end_ms: int, fps: int = 25) -> tuple[int, int]:
    """Half-open frame range [first, last) touched by a millisecond interval."""
    first = start_ms * fps // 1000
    last = -(-end_ms * fps // 1000)
    return first, max(last, first + 1)


def overlapping_chunks(fs: VisualFeatureSet, start_ms: int, end_ms: int, fps: int = 25) -> np.ndarray:
    first, last = segment_frames(start_ms, end_ms, fps)
    starts = np.arange(fs.num_chunks) * fs.stride
    hit = (starts < last) & (starts + fs.window > first)
    return np.flatnonzero(hit)


def segment_visual_feature(features: VisualFeatureSet, seg, fps: int = 25) -> np.ndarray:
    """Elementwise max over the chunk vectors whose windows overlap ``seg``."""
    idx = overlapping_chunks(features, seg.start_ms, seg.end_ms, fps)
    if idx.size == 0:
        raise ValueError(
            f"{features.movie_id}: no visual chunk overlaps segment [{seg.start_ms}, {seg.end_ms}) ms"
        )
    return features.features[idx].max(axis=0)


def write_fvec(path, features: np.ndarray, window: int = CHUNK_WINDOW, stride: int = CHUNK_STRIDE) -> None:
    features = np.asarray(features)
    n, d = features.shape
    with open(path, "wb") as f:
        f.write(FVEC_MAGIC)
        f.write(f"{n} {d} {window} {stride}\n".encode("ascii"))
        f.write(np.ascontiguousarray(features, dtype="<f4").tobytes())


def read_fvec(path, movie_id: str | None = None) -> VisualFeatureSet:
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(FVEC_MAGIC):
        raise ValueError(f"{path}: not an FVEC1 file (bad magic)")
    nl = raw.find(b"\n", len(FVEC_MAGIC))
    if nl < 0:
        raise ValueError(f"{path}: missing header line")
    try:
        n, d, window, stride = (int(x) for x in raw[len(FVEC_MAGIC):nl].decode("ascii").split())
    except ValueError:
        raise ValueError(f"{path}: malformed header {raw[len(FVEC_MAGIC):nl]!r}") from None
    body = raw[nl + 1:]
    if len(body) != 4 * n * d:
        raise ValueError(f"{path}: expected {n}x{d} float32 values, found {len(body)} bytes")
    feats = np.frombuffer(body, dtype="<f4").astype(np.float64).reshape(n, d)
    return VisualFeatureSet(movie_id or path.stem, feats, window, stride)


def fvec_header(path) -> tuple[int, int, int, int]:
    with open(path, "rb") as f:
        magic = f.read(len(FVEC_MAGIC))
        if magic != FVEC_MAGIC:
            raise ValueError(f"{path}: not an FVEC1 file (bad magic)")
        return tuple(int(x) for x in f.readline().decode("ascii").split())

