"""Synthetic corpora in the on-disk formats ``build_dataset`` reads.

Each segment j of a movie carries a latent affect value s_j in [-1, 1]. Viewer
i annotates every frame of that segment with

    clip(rho * s_j + (1 - rho) * e_ij + b_i + noise_scale * n_t, -1, 1)

where e_ij is the viewer's private reaction to the segment (uniform in
[-1, 1]), b_i a fixed personal bias and n_t per-frame jitter. Subtitle words and
clip features depend on s_j, so labels are learnable from the inputs, while
each viewer's private reaction is not.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .annotations import SegmentSpec, write_annotation_csv, write_manifest, write_srt
from .features import CHUNK_STRIDE, CHUNK_WINDOW, write_fvec

CORPUS_MOVIES = ("BMI", "CHI", "CRA", "FNE", "GLA", "DEP", "LOR")
PERIOD_MS = 40
FPS = 25


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    movies: int = 7
    segments_per_movie: int = 40
    viewers: int = 7
    correlation: float = 0.6
    noise_scale: float = 0.05
    bias_scale: float = 0.15
    vocab_size: int = 300
    feature_dim: int = 1024
    text_signal: float = 0.15
    visual_signal: float = 0.15

    def __post_init__(self):
        if not 0.0 <= self.correlation <= 1.0:
            raise ValueError(f"correlation must be in [0, 1], got {self.correlation}")
        for name in ("movies", "segments_per_movie", "viewers", "feature_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.vocab_size < 6:
            raise ValueError("vocab_size must be at least 6")
        if self.noise_scale < 0 or self.bias_scale < 0:
            raise ValueError("noise_scale and bias_scale must be non-negative")

    def movie_ids(self) -> list[str]:
        if self.movies <= len(CORPUS_MOVIES):
            return list(CORPUS_MOVIES[: self.movies])
        return [f"M{i + 1:03d}" for i in range(self.movies)]


def _word(k: int) -> str:
    # pronounceable, distinct, lowercase, punctuation-free
    cons, vow = "bdfgklmnprstvz", "aeiou"
    out = []
    k += 1
    while k:
        k, r = divmod(k, len(cons) * len(vow))
        out.append(cons[r // len(vow)] + vow[r % len(vow)])
    return "".join(reversed(out))


def _segment_layout(rng, n):
    """Start/end ms for n segments on the 40 ms grid, separated by short gaps."""
    starts, ends = [], []
    t = 0
    for _ in range(n):
        t += PERIOD_MS * int(rng.integers(0, 16))
        dur = PERIOD_MS * int(rng.integers(30, 100))
        starts.append(t)
        ends.append(t + dur)
        t += dur
    return np.array(starts), np.array(ends), t + PERIOD_MS * 25


def _sentence(rng, s, cfg, words):
    n_sent = (cfg.vocab_size - 2) // 5
    pos_pool, neg_pool, neutral = words[:n_sent], words[n_sent:2 * n_sent], words[2 * n_sent:]
    length = int(rng.integers(3, 23))
    p_sent = cfg.text_signal * abs(s)
    out = []
    for _ in range(length):
        if rng.random() < p_sent:
            pool = pos_pool if s > 0 else neg_pool
        else:
            pool = neutral
        out.append(pool[int(rng.integers(len(pool)))])
    text = " ".join(out)
    return text[0].upper() + text[1:] + "."


def generate(cfg: SynthConfig):
    """Draw a corpus in memory. Returns (movies, truth) where movies maps id to arrays."""
    rng = np.random.default_rng(cfg.seed)
    words = [_word(k) for k in range(cfg.vocab_size - 2)]
    biases = rng.normal(0.0, cfg.bias_scale, size=cfg.viewers) if cfg.bias_scale > 0 else np.zeros(cfg.viewers)
    direction = rng.normal(size=cfg.feature_dim)
    direction /= np.linalg.norm(direction) / np.sqrt(cfg.feature_dim)
    rho = cfg.correlation
    movies = {}
    for mid in cfg.movie_ids():
        starts, ends, total_ms = _segment_layout(rng, cfg.segments_per_movie)
        latent = rng.uniform(-1.0, 1.0, size=cfg.segments_per_movie)
        n_samples = total_ms // PERIOD_MS
        # per-sample latent and segment id (-1 in gaps)
        seg_of = np.full(n_samples, -1)
        for j, (a, b) in enumerate(zip(starts, ends)):
            seg_of[a // PERIOD_MS: b // PERIOD_MS] = j
        s_t = np.where(seg_of >= 0, latent[np.maximum(seg_of, 0)], 0.0)
        tracks = []
        for i in range(cfg.viewers):
            private = rng.uniform(-1.0, 1.0, size=cfg.segments_per_movie)
            gap_private = rng.uniform(-1.0, 1.0)
            e_t = np.where(seg_of >= 0, private[np.maximum(seg_of, 0)], gap_private)
            jitter = rng.normal(size=n_samples) if cfg.noise_scale > 0 else np.zeros(n_samples)
            vals = rho * s_t + (1.0 - rho) * e_t + biases[i] + cfg.noise_scale * jitter
            tracks.append(np.clip(vals, -1.0, 1.0))
        texts = [_sentence(rng, s, cfg, words) for s in latent]
        # one annotation sample per frame (40 ms at 25 fps)
        n_frames = n_samples
        n_chunks = (n_frames - CHUNK_WINDOW) // CHUNK_STRIDE + 1
        centers = np.arange(n_chunks) * CHUNK_STRIDE + CHUNK_WINDOW // 2
        feats = rng.normal(size=(n_chunks, cfg.feature_dim)) + cfg.visual_signal * s_t[centers, None] * direction
        movies[mid] = {
            "segments": [SegmentSpec(mid, int(a), int(b), t) for a, b, t in zip(starts, ends, texts)],
            "latent": latent,
            "tracks": tracks,
            "features": feats.astype(np.float32),
        }
    truth = {"config": asdict(cfg), "biases": [float(b) for b in biases],
             "latent": {m: [round(float(x), 6) for x in d["latent"]] for m, d in movies.items()}}
    return movies, truth


def synth_generate(cfg: SynthConfig, out_dir) -> tuple[Path, dict]:
    """Write a synthetic corpus under ``out_dir``; returns (manifest path, ground truth).

    Output is a pure function of ``cfg``: the same config gives byte-identical files.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    movies, truth = generate(cfg)
    doc = {"viewer_count": cfg.viewers, "sample_period_ms": PERIOD_MS, "fps": FPS, "movies": []}
    for mid, data in movies.items():
        mdir = out / mid
        mdir.mkdir(exist_ok=True)
        ann = []
        for i, tr in enumerate(data["tracks"], start=1):
            name = f"{mid}/valence_v{i}.csv"
            write_annotation_csv(out / name, tr)
            ann.append(name)
        write_srt(mdir / "subtitles.srt", data["segments"])
        write_fvec(mdir / "visual.fvec", data["features"])
        doc["movies"].append({"movie_id": mid, "annotations": ann,
                              "subtitles": f"{mid}/subtitles.srt", "features": f"{mid}/visual.fvec"})
    manifest = out / "manifest.json"
    write_manifest(manifest, doc)
    (out / "ground_truth.json").write_text(json.dumps(truth, sort_keys=True) + "\n", encoding="utf-8")
    return manifest, truth


def corpus_digest(out_dir) -> str:
    """SHA-256 over every file under ``out_dir`` (paths and bytes, sorted)."""
    h = hashlib.sha256()
    root = Path(out_dir)
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()
