"""Accuracy, reference classifiers, movie-level folds, cross-validation and
inter-viewer correlation statistics."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .annotations import LabeledSample, movie_samples
from .features import build_vocab
from .model import BackboneConfig, build_mt, build_st, save_checkpoint
from .training import TrainConfig, encode, model_inputs, train

MOVIES = ("BMI", "CHI", "CRA", "FNE", "GLA", "DEP", "LOR")


@dataclass(frozen=True)
class FoldPlan:
    fold_id: str
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]

    def __post_init__(self):
        sets = [set(self.train), set(self.validation), set(self.test)]
        if sets[0] & sets[1] or sets[0] & sets[2] or sets[1] & sets[2]:
            raise ValueError(f"fold {self.fold_id}: train/validation/test movies overlap")

    @property
    def movies(self) -> set:
        return set(self.train) | set(self.validation) | set(self.test)

    def line(self) -> str:
        return f"{self.fold_id} | {', '.join(self.train)} | {', '.join(self.validation)} | {', '.join(self.test)}"


_TABLE1 = (
    ("F1", "CRA DEP FNE GLA LOR", "CHI", "BMI"),
    ("F2", "BMI DEP FNE GLA LOR", "CRA", "CHI"),
    ("F3", "BMI CHI FNE GLA LOR", "DEP", "CRA"),
    ("F4", "BMI CHI CRA GLA LOR", "FNE", "DEP"),
    ("F5", "BMI CHI CRA DEP LOR", "GLA", "FNE"),
    ("F6", "BMI CHI CRA DEP FNE", "LOR", "GLA"),
    ("F7", "BMI CRA DEP FNE GLA", "CHI", "LOR"),
)


def builtin_folds(protocol: str = "table1") -> list[FoldPlan]:
    """``table1``: the seven leave-one-movie-out folds; ``baseline``: the 5/2 movie split."""
    if protocol == "table1":
        return [FoldPlan(f, tuple(tr.split()), (va,), (te,)) for f, tr, va, te in _TABLE1]
    if protocol == "baseline":
        return [FoldPlan("B", ("BMI", "CHI", "FNE", "GLA", "LOR"), (), ("CRA", "DEP"))]
    raise ValueError(f"unknown fold protocol {protocol!r} (expected 'table1' or 'baseline')")


# -- accuracy -----------------------------------------------------------------------

def accuracy(predictions, labels, mask=None, threshold: float = 0.5) -> float:
    """Percentage of present entries where (p > threshold) matches the label."""
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    m = np.ones(y.shape, bool) if mask is None else np.asarray(mask, bool).reshape(-1)
    if not m.any():
        raise ValueError("accuracy undefined: no labels present")
    correct = ((p[m] > threshold).astype(np.int64) == y[m]).sum()
    return 100.0 * correct / m.sum()


def reference_classifiers(labels, mask=None, seed: int = 0) -> dict:
    """Accuracies of a fair-coin, an always-positive and an always-negative classifier."""
    y = np.asarray(labels).reshape(-1)
    m = np.ones(y.shape, bool) if mask is None else np.asarray(mask, bool).reshape(-1)
    if not m.any():
        raise ValueError("no labels present")
    y = y[m]
    n = y.size
    n_pos = int((y == 1).sum())
    coin = np.random.default_rng(seed).integers(0, 2, size=n)
    return {
        "random": 100.0 * (coin == y).sum() / n,
        "positive": 100.0 * n_pos / n,
        "negative": 100.0 * (n - n_pos) / n,
    }


# -- reports ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    """Per-fold, per-target accuracy (percent); NaN where a target had no test label."""

    model_id: str
    target_names: list
    fold_ids: list
    accuracies: np.ndarray  # (folds, targets)
    metadata: dict = field(default_factory=dict)

    def target_means(self) -> np.ndarray:
        """Mean over folds per target; NaN for targets never evaluated."""
        acc = self.accuracies
        seen = ~np.isnan(acc)
        counts = seen.sum(axis=0)
        totals = np.where(seen, acc, 0.0).sum(axis=0)
        return np.where(counts > 0, totals / np.maximum(counts, 1), np.nan)

    def mean(self) -> float:
        """Mean over the targets that were evaluated (ST runs may cover only some)."""
        m = self.target_means()
        m = m[~np.isnan(m)]
        return float(m.mean()) if m.size else float("nan")

    def row(self) -> dict:
        means = self.target_means()
        out = {n: float(v) for n, v in zip(self.target_names, means)}
        out["Mean"] = self.mean()
        return out

    def to_dict(self) -> dict:
        return {
            "model_id": self.model_id,
            "targets": list(self.target_names),
            "folds": {f: {n: _num(a) for n, a in zip(self.target_names, row)}
                      for f, row in zip(self.fold_ids, self.accuracies)},
            "target_means": {n: _num(v) for n, v in zip(self.target_names, self.target_means())},
            "mean": _num(self.mean()),
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        names = d["targets"]
        folds = list(d["folds"])
        acc = np.array([[np.nan if d["folds"][f][n] is None else d["folds"][f][n] for n in names] for f in folds])
        return cls(d["model_id"], names, folds, acc, d.get("metadata", {}))


def _num(x):
    return None if x is None or not np.isfinite(x) else float(x)


def table_csv(reports: Sequence[EvalReport], digits: int = 2) -> str:
    """Rows = models, columns = targets then Mean, like the results tables."""
    names = list(reports[0].target_names)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", *names, "Mean"])
    for r in reports:
        row = r.row()
        cells = [row[n] for n in names] + [row["Mean"]]
        w.writerow([r.model_id, *("" if np.isnan(v) else f"{v:.{digits}f}" for v in cells)])
    return buf.getvalue()


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


# -- cross-validation ------------------------------------------------------------------

def _fold_data(samples, fold, max_tokens):
    tr = movie_samples(samples, fold.train)
    va = movie_samples(samples, fold.validation)
    te = movie_samples(samples, fold.test)
    if not tr or not te:
        raise ValueError(f"fold {fold.fold_id}: no samples for the training or test movies")
    vocab = build_vocab(tr)
    return vocab, encode(tr, vocab, max_tokens), (encode(va, vocab, max_tokens) if va else None), \
        encode(te, vocab, max_tokens)


def fold_seed(seed: int, fold_id: str) -> int:
    """Per-fold model seed; depends on the fold id, not its position in a list."""
    return seed * 1_000_003 + zlib.crc32(fold_id.encode()) % 100_003 * 16


def train_fold_model(samples, fold: FoldPlan, kind: str, train_cfg: TrainConfig, modalities: str = "both",
                     seed: int = 0, backbone: dict | None = None, target: int | None = None,
                     log_stream=None):
    """Train one model on a fold: MT over all targets, or ST on target index ``target``.

    Returns (model, TrainResult, test split). The model's ``meta`` records the
    training vocabulary, so a saved checkpoint can be evaluated on its own.
    """
    backbone = dict(backbone or {})
    vocab, trd, vad, ted = _fold_data(samples, fold, backbone.get("max_tokens", 18))
    if trd.visual is not None:
        backbone["feature_dim"] = trd.visual.shape[1]
    backbone["vocab_size"] = len(vocab)
    cfg = BackboneConfig(**backbone)
    viewer_count = samples[0].viewer_count
    base = fold_seed(seed, fold.fold_id)
    meta = {"vocab": list(vocab.tokens), "fold": fold.fold_id, "seed": seed}
    if kind == "mt":
        model = build_mt(cfg, viewer_count, base, modalities)
        model.meta = meta
        res = train(model, trd, vad, _reseed(train_cfg, base), log_stream)
    elif kind == "st":
        t = viewer_count if target is None else target
        if not 0 <= t <= viewer_count:
            raise ValueError(f"target index {t} out of range for {viewer_count} viewers")
        model = build_st(cfg, base + t + 1, modalities, target=trd.target_names[t])
        model.meta = dict(meta, target_index=t)
        res = train(model, trd.select_target(t), None if vad is None else vad.select_target(t),
                    _reseed(train_cfg, base + t + 1), log_stream)
    else:
        raise ValueError(f"model kind must be 'st' or 'mt', got {kind!r}")
    return model, res, ted


def evaluate_model(model, test, threshold: float = 0.5) -> np.ndarray:
    """Test accuracy per target (V1..VV, Vavg); NaN for targets the model does not predict."""
    probs = model.predict(*model_inputs(model, test))
    acc = np.full(test.labels.shape[1], np.nan)
    if model.kind == "mt":
        cols = range(test.labels.shape[1])
        pairs = [(t, probs[:, t]) for t in cols]
    else:
        pairs = [(model.meta.get("target_index", test.labels.shape[1] - 1), probs[:, 0])]
    for t, p in pairs:
        if test.mask[:, t].any():
            acc[t] = accuracy(p, test.labels[:, t], test.mask[:, t], threshold)
    return acc


def encode_for_model(model, samples):
    """Arrays for ``samples`` using the vocabulary stored with ``model``."""
    from .features import Vocabulary
    vocab = Vocabulary(tuple(model.meta["vocab"])) if "vocab" in model.meta else None
    if model.uses_text and vocab is None:
        raise ValueError("model has no stored vocabulary")
    return encode(samples, vocab, model.cfg.max_tokens)


def run_fold(samples, fold: FoldPlan, kind: str, train_cfg: TrainConfig, modalities: str = "both",
             seed: int = 0, backbone: dict | None = None, targets=None,
             ckpt_dir=None) -> tuple[np.ndarray, list]:
    """Train on the fold's training movies, select on validation, score on test.

    Returns (per-target test accuracy, training logs). ST trains one model per
    target in ``targets`` (default: all); MT trains one model for all targets.
    """
    n_targets = samples[0].viewer_count + 1
    acc = np.full(n_targets, np.nan)
    logs = []
    common = dict(modalities=modalities, seed=seed, backbone=backbone)
    if kind == "mt":
        model, res, ted = train_fold_model(samples, fold, "mt", train_cfg, **common)
        full = evaluate_model(model, ted, train_cfg.threshold)
        for t in (range(n_targets) if targets is None else targets):
            acc[t] = full[t]
        logs.append({"target": "all", "best_epoch": res.best_epoch, "epochs": res.log})
        if ckpt_dir is not None:
            save_checkpoint(model, Path(ckpt_dir) / f"{fold.fold_id}_mt.ckpt")
    elif kind == "st":
        for t in (range(n_targets) if targets is None else targets):
            model, res, ted = train_fold_model(samples, fold, "st", train_cfg, target=t, **common)
            acc[t] = evaluate_model(model, ted, train_cfg.threshold)[t]
            logs.append({"target": model.target, "best_epoch": res.best_epoch, "epochs": res.log})
            if ckpt_dir is not None:
                save_checkpoint(model, Path(ckpt_dir) / f"{fold.fold_id}_st_{model.target}.ckpt")
    else:
        raise ValueError(f"model kind must be 'st' or 'mt', got {kind!r}")
    return acc, logs


def _reseed(cfg: TrainConfig, seed: int) -> TrainConfig:
    d = cfg.to_dict()
    d["seed"] = seed
    return TrainConfig(**d)


def _run_fold_star(args):
    return run_fold(*args[0], **args[1])


def cross_validate(samples: Sequence[LabeledSample], folds: Sequence[FoldPlan], kind: str,
                   train_cfg: TrainConfig, modalities: str = "both", seed: int = 0,
                   backbone: dict | None = None, targets=None, workers: int = 1, ckpt_dir=None,
                   model_id: str | None = None) -> tuple[EvalReport, list]:
    """Run every fold and collect per-target test accuracies into a report."""
    present = {s.movie_id for s in samples}
    for f in folds:
        missing = f.movies - present
        if missing:
            raise ValueError(f"fold {f.fold_id} references movies not in the dataset: {sorted(missing)}")
    if ckpt_dir is not None:
        Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
    jobs = [((samples, f, kind, train_cfg),
             dict(modalities=modalities, seed=seed, backbone=backbone, targets=targets,
                  ckpt_dir=ckpt_dir)) for f in folds]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_fold_star, jobs))
    else:
        results = [_run_fold_star(j) for j in jobs]
    v = samples[0].viewer_count
    names = [f"V{i + 1}" for i in range(v)] + ["Vavg"]
    acc = np.stack([r[0] for r in results])
    meta = {"kind": kind, "modalities": modalities, "seed": seed, "train": train_cfg.to_dict(),
            "backbone": backbone or {}, "folds": [f.fold_id for f in folds]}
    meta["config_hash"] = config_hash(meta)
    report = EvalReport(model_id or f"{kind.upper()}-{modalities}", names, [f.fold_id for f in folds], acc, meta)
    logs = [{"fold": f.fold_id, "runs": r[1]} for f, r in zip(folds, results)]
    return report, logs


def reference_reports(samples, folds, seed: int = 0) -> list[EvalReport]:
    """Random / Positive / Negative rows over each fold's test movies."""
    v = samples[0].viewer_count
    names = [f"V{i + 1}" for i in range(v)] + ["Vavg"]
    rows = {k: [] for k in ("random", "positive", "negative")}
    for i, f in enumerate(folds):
        te = movie_samples(samples, f.test)
        labels = np.array([s.target_labels() for s in te])
        mask = np.array([s.target_mask() for s in te])
        per = [reference_classifiers(labels[:, t], mask[:, t], seed * 1009 + i * 31 + t) for t in range(v + 1)]
        for k in rows:
            rows[k].append([p[k] for p in per])
    return [EvalReport(k.capitalize(), names, [f.fold_id for f in folds], np.array(rows[k]), {"seed": seed})
            for k in rows]


# -- correlations and label distributions -------------------------------------------------

def pearson(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two 1-d vectors of equal length")
    if x.size < 2:
        raise ValueError("pearson needs at least two observations")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise ValueError("correlation undefined: an input has zero variance")
    r = float(dx @ dy) / np.sqrt(sxx * syy)
    return float(np.clip(r, -1.0, 1.0))


def correlation_matrix(columns: np.ndarray) -> np.ndarray:
    """Pairwise Pearson between the columns of an (n, k) matrix; exact unit diagonal."""
    k = columns.shape[1]
    out = np.eye(k)
    for i in range(k):
        for j in range(i + 1, k):
            out[i, j] = out[j, i] = pearson(columns[:, i], columns[:, j])
    return out


@dataclass
class CorrelationAnalysis:
    target_names: list
    per_movie: dict  # movie -> (V+1, V+1)
    average: np.ndarray
    histograms: dict  # movie -> (V, 2) counts of [positive, negative]

    def mean_viewer_offdiag(self) -> float:
        """Mean correlation over distinct viewer pairs (average-viewer row excluded)."""
        v = len(self.target_names) - 1
        m = self.average[:v, :v]
        iu = np.triu_indices(v, 1)
        return float(m[iu].mean())

    def matrix_csv(self, matrix: np.ndarray | None = None) -> str:
        m = self.average if matrix is None else matrix
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["", *self.target_names])
        for name, row in zip(self.target_names, m):
            w.writerow([name, *(f"{x:.6f}" for x in row)])
        return buf.getvalue()

    def histogram_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["movie", "viewer", "positive", "negative"])
        for movie, counts in self.histograms.items():
            for i, (p, n) in enumerate(counts):
                w.writerow([movie, self.target_names[i], int(p), int(n)])
        return buf.getvalue()


def correlation_analysis(samples: Sequence[LabeledSample], binary: bool = False) -> CorrelationAnalysis:
    """Per-movie viewer/average correlation matrices, their mean, and label counts.

    Correlations use segment-level continuous means by default, binary labels
    with ``binary=True``. Only segments every viewer annotated are used.
    """
    by_movie: dict[str, list] = {}
    for s in samples:
        by_movie.setdefault(s.movie_id, []).append(s)
    v = samples[0].viewer_count
    names = [f"V{i + 1}" for i in range(v)] + ["Vavg"]
    per_movie, hists = {}, {}
    for movie, group in by_movie.items():
        full = [s for s in group if s.mask.all()]
        if len(full) < 2:
            raise ValueError(f"{movie}: need at least 2 fully annotated segments for correlations")
        if binary:
            cols = np.array([s.target_labels() for s in full], dtype=np.float64)
        else:
            cols = np.array([s.target_means() for s in full])
        per_movie[movie] = correlation_matrix(cols)
        labels = np.array([s.per_viewer_label for s in group])
        mask = np.array([s.mask for s in group])
        pos = ((labels == 1) & mask).sum(axis=0)
        neg = ((labels == 0) & mask).sum(axis=0)
        hists[movie] = np.stack([pos, neg], axis=1)
    avg = np.mean(np.stack(list(per_movie.values())), axis=0)
    np.fill_diagonal(avg, 1.0)
    avg = (avg + avg.T) / 2.0
    return CorrelationAnalysis(names, per_movie, avg, hists)
