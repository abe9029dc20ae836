"""Class-weighted log-loss, L1 penalty, Adam, and the training loop.

Multi-task masking falls out of how the loss is built: a branch whose target
has no label in the batch is left out of the graph, receives no gradient, and
Adam skips it, so its weights and moments stay bitwise unchanged.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields

import numba
import numpy as np

from . import autodiff as ad
from .model import Network

log = logging.getLogger(__name__)

PROB_EPS = 1e-12


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    l1_lambda: float = 1e-5
    batch_size: int = 32
    max_epochs: int = 200
    patience: int = 10
    seed: int = 0
    threshold: float = 0.5

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("adam betas must lie in [0, 1)")
        if self.patience < 1 or self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("patience, batch_size and max_epochs must be >= 1")
        if self.l1_lambda < 0:
            raise ValueError("l1_lambda must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ClassWeights:
    w_pos: np.ndarray
    w_neg: np.ndarray

    def for_labels(self, labels: np.ndarray) -> np.ndarray:
        """Per-entry weight for a (N, T) label matrix."""
        return np.where(labels == 1, self.w_pos[None, :], self.w_neg[None, :])


def compute_class_weights(labels, mask=None, names=None) -> ClassWeights:
    """w_pos = N / (2 N_pos), w_neg = N / (2 N_neg) per target column."""
    labels = np.asarray(labels)
    if labels.ndim == 1:
        labels = labels[:, None]
    mask = np.ones(labels.shape, bool) if mask is None else np.asarray(mask, bool).reshape(labels.shape)
    n_pos = ((labels == 1) & mask).sum(axis=0)
    n_neg = ((labels == 0) & mask).sum(axis=0)
    for t in range(labels.shape[1]):
        if n_pos[t] == 0 or n_neg[t] == 0:
            name = names[t] if names is not None else f"target {t}"
            raise ValueError(f"{name} has only one class in the training labels "
                             f"({n_pos[t]} positive, {n_neg[t]} negative)")
    n = n_pos + n_neg
    return ClassWeights(n / (2.0 * n_pos), n / (2.0 * n_neg))


def weighted_bce(pred, labels, weights: ClassWeights, mask=None):
    """Class-weighted log-loss, normalised by the weight mass of present entries.

    ``pred`` is a graph node of shape (N, T), or a list of T nodes of shape
    (N, 1) where ``None`` entries stand for branches that were not run. The
    result averages the per-target losses over targets with at least one
    present label. Probabilities are clipped to [1e-12, 1 - 1e-12] before the log.
    """
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim == 1:
        labels = labels[:, None]
    mask = np.ones(labels.shape, bool) if mask is None else np.asarray(mask, bool).reshape(labels.shape)
    if isinstance(pred, ad.Node):
        cols = [pred] if labels.shape[1] == 1 else None
        if cols is None:
            raise ValueError("pass multi-target predictions as a list of (N, 1) nodes")
    else:
        cols = list(pred)
    if len(cols) != labels.shape[1]:
        raise ValueError(f"{len(cols)} prediction columns for {labels.shape[1]} label columns")
    if not mask.any():
        raise ValueError("mask has no present entries")
    w = weights.for_labels(labels) * mask
    losses = []
    for t, node in enumerate(cols):
        if not mask[:, t].any():
            continue
        if node is None:
            raise ValueError(f"target {t} has labels but its branch was not evaluated")
        if node.shape != (labels.shape[0], 1):
            raise ad.ShapeError(f"weighted_bce: prediction column {t} has shape {node.shape}")
        total = w[:, t].sum()
        c_pos = (-w[:, t] * labels[:, t] / total)[:, None]
        c_neg = (-w[:, t] * (1.0 - labels[:, t]) / total)[:, None]
        log_p = ad.log(node, PROB_EPS, 1.0 - PROB_EPS)
        log_q = ad.log(ad.scale(node, -1.0, 1.0), PROB_EPS, 1.0 - PROB_EPS)
        term = ad.add(ad.mul(ad.constant(c_pos), log_p), ad.mul(ad.constant(c_neg), log_q))
        losses.append(ad.reduce_sum(term))
    return ad.scale(ad.add_all(losses), 1.0 / len(losses))


def weighted_bce_value(probs, labels, weights: ClassWeights, mask=None) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim == 1:
        probs = probs[:, None]
    cols = [ad.constant(probs[:, t:t + 1]) for t in range(probs.shape[1])]
    return float(weighted_bce(cols if len(cols) > 1 else cols[0], labels, weights, mask).value)


def is_penalized(name: str) -> bool:
    """Weight matrices, conv kernels and the embedding; never biases."""
    return name.endswith(".weight")


def l1_penalty(model: Network, lam: float, names=None):
    """lam * sum |w| over weight tensors (biases excluded); ``names`` restricts the set."""
    if lam < 0:
        raise ValueError("l1 coefficient must be non-negative")
    chosen = [p for n, p in model.params.items() if is_penalized(n) and (names is None or n in names)]
    if not chosen:
        return ad.constant(0.0)
    terms = [ad.l1_norm(p.node) for p in chosen]
    return ad.scale(ad.add_all(terms), lam)


@numba.njit(cache=True)
def _adam_kernel(p, g, m, v, lr, b1, b2, eps, bc1, bc2):
    for i in range(p.size):
        mi = b1 * m[i] + (1.0 - b1) * g[i]
        vi = b2 * v[i] + (1.0 - b2) * g[i] * g[i]
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / bc1) / (np.sqrt(vi / bc2) + eps)


class Adam:
    """Adam with bias correction. Parameters whose ``grad`` is None are skipped."""

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    @classmethod
    def from_config(cls, cfg: TrainConfig) -> "Adam":
        return cls(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)

    def step(self, params) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p in params:
            if p.grad is None or not p.trainable:
                continue
            if p.grad.shape != p.shape:
                raise ad.ShapeError(f"gradient of {p.name} has shape {p.grad.shape}, parameter {p.shape}")
            if p.name not in self.m:
                self.m[p.name] = np.zeros(p.shape)
                self.v[p.name] = np.zeros(p.shape)
            elif self.m[p.name].shape != p.shape:
                raise ad.ShapeError(f"optimizer state for {p.name} has shape {self.m[p.name].shape}")
            _adam_kernel(p.value.reshape(-1), np.ascontiguousarray(p.grad).reshape(-1),
                         self.m[p.name].reshape(-1), self.v[p.name].reshape(-1),
                         self.lr, self.beta1, self.beta2, self.eps, bc1, bc2)

    def state(self) -> dict:
        return {"t": self.t, "m": {k: a.copy() for k, a in self.m.items()},
                "v": {k: a.copy() for k, a in self.v.items()}}

    def load(self, state: dict) -> None:
        self.t = state["t"]
        self.m = {k: a.copy() for k, a in state["m"].items()}
        self.v = {k: a.copy() for k, a in state["v"].items()}


def adam_step(params, state: Adam) -> Adam:
    """Functional spelling of ``state.step(params)``; params are updated in place."""
    state.step(params)
    return state


# -- data held as arrays ---------------------------------------------------------

@dataclass
class EncodedSplit:
    tokens: np.ndarray | None  # (N, max_tokens) int
    visual: np.ndarray | None  # (N, feature_dim)
    labels: np.ndarray  # (N, T) int
    mask: np.ndarray  # (N, T) bool
    target_names: list = field(default_factory=list)

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx) -> "EncodedSplit":
        return EncodedSplit(None if self.tokens is None else self.tokens[idx],
                            None if self.visual is None else self.visual[idx],
                            self.labels[idx], self.mask[idx], self.target_names)

    def select_target(self, t: int) -> "EncodedSplit":
        return EncodedSplit(self.tokens, self.visual, self.labels[:, t:t + 1], self.mask[:, t:t + 1],
                            [self.target_names[t]])


def encode(samples, vocab=None, max_tokens: int = 18) -> EncodedSplit:
    """Arrays for a list of labeled samples; targets are V1..VV, Vavg."""
    from .features import encode_texts
    tokens = None if vocab is None else encode_texts([s.segment.text for s in samples], vocab, max_tokens)
    visual = None
    if samples and samples[0].visual is not None:
        visual = np.stack([s.visual for s in samples])
    labels = np.array([s.target_labels() for s in samples], dtype=np.int64)
    mask = np.array([s.target_mask() for s in samples], dtype=bool)
    v = samples[0].viewer_count if samples else 0
    names = [f"V{i + 1}" for i in range(v)] + ["Vavg"]
    return EncodedSplit(tokens, visual, labels.reshape(len(samples), v + 1), mask.reshape(len(samples), v + 1), names)


def accuracy_per_target(probs, labels, mask, threshold=0.5) -> list:
    pred = (probs > threshold).astype(np.int64)
    out = []
    for t in range(labels.shape[1]):
        m = mask[:, t]
        out.append(float(100.0 * (pred[m, t] == labels[m, t]).sum() / m.sum()) if m.any() else None)
    return out


def model_inputs(model: Network, data: EncodedSplit):
    return (data.tokens if model.uses_text else None), (data.visual if model.uses_visual else None)


def train_step(model: Network, batch: EncodedSplit, weights: ClassWeights, opt: Adam, cfg: TrainConfig) -> float:
    """One forward/backward/update. Returns the batch loss (log-loss plus L1)."""
    active = [t for t in range(batch.labels.shape[1]) if batch.mask[:, t].any()]
    if not active:
        raise ValueError("batch has no present labels")
    tokens, visual = model_inputs(model, batch)
    outs = model.output_nodes(tokens, visual, targets=active)
    loss = weighted_bce(outs, batch.labels, weights, batch.mask)
    if cfg.l1_lambda > 0:
        names = None
        if model.kind == "mt":
            skip = tuple(f"branch{b}." for b in range(model.num_targets) if b not in active)
            names = {n for n in model.params if not n.startswith(skip)} if skip else None
        loss = ad.add(loss, l1_penalty(model, cfg.l1_lambda, names))
    params = model.parameters()
    ad.zero_grads(params)
    ad.backward(loss)
    opt.step(params)
    ad.zero_grads(params)
    return float(loss.value)


@dataclass
class TrainResult:
    model: Network
    optimizer: Adam
    best_epoch: int
    best_score: float | None
    log: list


def train(model: Network, train_data: EncodedSplit, val_data: EncodedSplit | None, cfg: TrainConfig,
          log_stream=None) -> TrainResult:
    """Fit ``model`` and restore the parameters of the best validation epoch.

    The selection score is validation accuracy on the last target column (the
    average viewer for MT, the single target for ST); ties keep the earlier
    epoch. Without validation data the last epoch is kept. One JSON line per
    epoch is written to ``log_stream`` when given.
    """
    if len(train_data) == 0:
        raise ValueError("empty training split")
    if train_data.labels.shape[1] != model.num_targets:
        raise ValueError(f"model has {model.num_targets} targets, data has {train_data.labels.shape[1]}")
    weights = compute_class_weights(train_data.labels, train_data.mask, train_data.target_names)
    opt = Adam.from_config(cfg)
    rng = np.random.default_rng(cfg.seed)
    have_val = val_data is not None and len(val_data) > 0
    best = (None, -1, None, None)  # score, epoch, params, optimizer
    history = []
    stale = 0
    n = len(train_data)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        losses = []
        for a in range(0, n, cfg.batch_size):
            batch = train_data.subset(order[a:a + cfg.batch_size])
            if not batch.mask.any():
                continue
            try:
                losses.append(train_step(model, batch, weights, opt, cfg))
            except ad.NonFiniteError as e:
                raise TrainingError(f"non-finite value at epoch {epoch}, batch {a // cfg.batch_size}: {e}") from e
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses)), "events": []}
        if have_val:
            tokens, visual = model_inputs(model, val_data)
            acc = accuracy_per_target(model.predict(tokens, visual), val_data.labels, val_data.mask, cfg.threshold)
            entry["val_accuracy"] = dict(zip(val_data.target_names, acc))
            score = acc[-1]
        else:
            score = None
        improved = best[1] < 0 or (score is not None and best[0] is not None and score > best[0]) or not have_val
        if improved:
            best = (score, epoch, model.state(), opt.state())
            entry["events"].append("best")
            stale = 0
        else:
            stale += 1
        history.append(entry)
        if log_stream is not None:
            log_stream.write(json.dumps(entry, sort_keys=True) + "\n")
        log.debug("epoch %d loss %.5f score %s", epoch, entry["train_loss"], score)
        if have_val and stale >= cfg.patience:
            history[-1]["events"].append("early_stop")
            break
    score, epoch, params, opt_state = best
    model.load_state(params)
    opt.load(opt_state)
    return TrainResult(model, opt, epoch, score, history)
