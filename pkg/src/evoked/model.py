"""Single-task and multi-task valence networks.

Both share the same input side: a trainable word embedding followed by
conv/max-pool stages and a global max over positions for the subtitle text,
and the pooled clip feature vector as-is for video. The two are concatenated.

* ST head: 1024 -> 512 -> 256 -> 1 (sigmoid), one target per model.
* MT: shared trunk 2048 -> 1024, then one 512 -> 256 -> 128 -> 1 branch per
  viewer plus a final branch for the average viewer.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter

ST_HEAD = (1024, 512, 256)
MT_TRUNK = (2048, 1024)
MT_BRANCH = (512, 256, 128)
MODALITIES = ("text", "visual", "both")

CKPT_MAGIC = b"EMTCKPT1"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ArchitectureMismatch(CheckpointError):
    pass


@dataclass(frozen=True)
class BackboneConfig:
    vocab_size: int
    embed_dim: int = 64
    conv_stages: tuple = ((3, 64, 2), (3, 128, 2))  # (kernel width, channels, pool width)
    feature_dim: int = 1024
    max_tokens: int = 18

    def __post_init__(self):
        stages = tuple(tuple(int(x) for x in s) for s in self.conv_stages)
        object.__setattr__(self, "conv_stages", stages)
        if not stages:
            raise ValueError("need at least one conv stage")
        for name in ("vocab_size", "embed_dim", "feature_dim", "max_tokens"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        length = self.max_tokens
        for k, c, p in stages:
            if min(k, c, p) <= 0:
                raise ValueError(f"invalid conv stage {(k, c, p)}")
            if length < k:
                raise ValueError(f"sequence length {length} shorter than kernel {k}")
            length = length - k + 1
            if length < p:
                raise ValueError(f"sequence length {length} shorter than pool {p}")
            length = (length - p) // p + 1

    @property
    def text_dim(self) -> int:
        return self.conv_stages[-1][1]

    def fused_dim(self, modalities: str) -> int:
        return {"text": self.text_dim, "visual": self.feature_dim,
                "both": self.text_dim + self.feature_dim}[modalities]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_stages"] = [list(s) for s in self.conv_stages]
        return d


def glorot(rng, fan_in, fan_out, shape):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Network:
    """Named parameter store plus the shared input backbones."""

    kind = ""

    def __init__(self, cfg: BackboneConfig, modalities: str, seed: int):
        if modalities not in MODALITIES:
            raise ValueError(f"modalities must be one of {MODALITIES}, got {modalities!r}")
        self.cfg = cfg
        self.modalities = modalities
        self.seed = seed
        self.params: dict[str, Parameter] = {}
        self.meta: dict = {}
        self._rng = np.random.default_rng(seed)
        if self.uses_text:
            self._add("embed.weight", glorot(self._rng, cfg.vocab_size, cfg.embed_dim, (cfg.vocab_size, cfg.embed_dim)))
            cin = cfg.embed_dim
            for i, (k, c, _) in enumerate(cfg.conv_stages):
                self._add(f"text.conv{i}.weight", glorot(self._rng, k * cin, k * c, (k, cin, c)))
                self._add(f"text.conv{i}.bias", np.zeros(c))
                cin = c

    @property
    def uses_text(self) -> bool:
        return self.modalities in ("text", "both")

    @property
    def uses_visual(self) -> bool:
        return self.modalities in ("visual", "both")

    def _add(self, name, value):
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name}")
        self.params[name] = Parameter(name, value)

    def _dense(self, prefix, fan_in, fan_out):
        self._add(f"{prefix}.weight", glorot(self._rng, fan_in, fan_out, (fan_in, fan_out)))
        self._add(f"{prefix}.bias", np.zeros(fan_out))

    def _apply_dense(self, prefix, x, act=True):
        out = ad.linear(x, self.params[f"{prefix}.weight"].node, self.params[f"{prefix}.bias"].node)
        return ad.relu(out) if act else out

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def num_parameters(self, prefix: str = "") -> int:
        return sum(p.value.size for n, p in self.params.items() if n.startswith(prefix))

    def fuse(self, tokens, visual):
        """Concatenated backbone features for a batch, as a graph node."""
        parts = []
        n = None
        if self.uses_text:
            if tokens is None:
                raise ad.ShapeError("model uses text but no token ids were given")
            tokens = np.asarray(tokens)
            if tokens.ndim != 2 or tokens.shape[1] != self.cfg.max_tokens:
                raise ad.ShapeError(f"token ids must have shape (batch, {self.cfg.max_tokens}), got {tokens.shape}")
            n = tokens.shape[0]
            h = ad.embedding(self.params["embed.weight"].node, tokens)
            for i, (_, _, pool) in enumerate(self.cfg.conv_stages):
                h = ad.conv1d(h, self.params[f"text.conv{i}.weight"].node, self.params[f"text.conv{i}.bias"].node)
                h = ad.maxpool1d(ad.relu(h), pool)
            parts.append(ad.temporal_max_pool(h))
        if self.uses_visual:
            if visual is None:
                raise ad.ShapeError("model uses visual features but none were given")
            visual = np.asarray(visual, dtype=np.float64)
            if visual.ndim != 2 or visual.shape[1] != self.cfg.feature_dim:
                raise ad.ShapeError(f"visual features must have shape (batch, {self.cfg.feature_dim}), got {visual.shape}")
            if n is not None and visual.shape[0] != n:
                raise ad.ShapeError(f"batch sizes differ: {n} token rows vs {visual.shape[0]} feature rows")
            n = visual.shape[0]
            parts.append(ad.constant(visual))
        if n == 0:
            raise ad.ShapeError("empty batch")
        return parts[0] if len(parts) == 1 else ad.concat(parts)

    def descriptor(self) -> dict:
        raise NotImplementedError

    @property
    def num_targets(self) -> int:
        raise NotImplementedError

    def output_nodes(self, tokens, visual, targets=None) -> list:
        raise NotImplementedError

    def predict(self, tokens, visual, batch_size: int = 256) -> np.ndarray:
        """Probabilities, shape (N, num_targets)."""
        n = len(tokens) if tokens is not None else len(visual)
        rows = []
        for a in range(0, n, batch_size):
            t = None if tokens is None else np.asarray(tokens)[a:a + batch_size]
            v = None if visual is None else np.asarray(visual)[a:a + batch_size]
            outs = self.output_nodes(t if self.uses_text else None, v if self.uses_visual else None)
            rows.append(np.concatenate([o.value for o in outs], axis=1))
        return np.concatenate(rows, axis=0)

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.value.copy() for n, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = set(self.params) - set(state)
            extra = set(state) - set(self.params)
            raise ArchitectureMismatch(f"parameter sets differ (missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
        for n, p in self.params.items():
            if state[n].shape != p.shape:
                raise ArchitectureMismatch(f"{n}: shape {state[n].shape} != {p.shape}")
            p.assign(state[n])


class STModel(Network):
    kind = "st"

    def __init__(self, cfg: BackboneConfig, modalities: str = "both", seed: int = 0, target: str = "Vavg",
                 head=ST_HEAD):
        super().__init__(cfg, modalities, seed)
        self.target = target
        self.head = tuple(int(w) for w in head)
        widths = (cfg.fused_dim(modalities), *self.head)
        for i in range(len(self.head)):
            self._dense(f"head.fc{i}", widths[i], widths[i + 1])
        self._dense("head.out", self.head[-1], 1)

    @property
    def num_targets(self) -> int:
        return 1

    @property
    def target_names(self) -> list[str]:
        return [self.target]

    def output_nodes(self, tokens, visual, targets=None):
        h = self.fuse(tokens, visual)
        for i in range(len(self.head)):
            h = self._apply_dense(f"head.fc{i}", h)
        return [ad.sigmoid(self._apply_dense("head.out", h, act=False))]

    def descriptor(self) -> dict:
        return {"kind": "st", "backbone": self.cfg.to_dict(), "modalities": self.modalities,
                "seed": self.seed, "target": self.target, "head": list(self.head)}


class MTModel(Network):
    kind = "mt"

    def __init__(self, cfg: BackboneConfig, viewer_count: int, modalities: str = "both", seed: int = 0,
                 trunk=MT_TRUNK, branch=MT_BRANCH):
        if viewer_count < 1:
            raise ValueError(f"viewer_count must be >= 1, got {viewer_count}")
        super().__init__(cfg, modalities, seed)
        self.viewer_count = viewer_count
        self.trunk_widths = tuple(int(w) for w in trunk)
        self.branch_widths = tuple(int(w) for w in branch)
        widths = (cfg.fused_dim(modalities), *self.trunk_widths)
        for i in range(len(self.trunk_widths)):
            self._dense(f"trunk.fc{i}", widths[i], widths[i + 1])
        bw = (self.trunk_widths[-1], *self.branch_widths)
        for b in range(self.num_targets):
            for i in range(len(self.branch_widths)):
                self._dense(f"branch{b}.fc{i}", bw[i], bw[i + 1])
            self._dense(f"branch{b}.out", self.branch_widths[-1], 1)

    @property
    def num_targets(self) -> int:
        return self.viewer_count + 1

    @property
    def target_names(self) -> list[str]:
        return [f"V{i + 1}" for i in range(self.viewer_count)] + ["Vavg"]

    def trunk(self, tokens, visual):
        h = self.fuse(tokens, visual)
        for i in range(len(self.trunk_widths)):
            h = self._apply_dense(f"trunk.fc{i}", h)
        return h

    def branch(self, b, h):
        for i in range(len(self.branch_widths)):
            h = self._apply_dense(f"branch{b}.fc{i}", h)
        return ad.sigmoid(self._apply_dense(f"branch{b}.out", h, act=False))

    def output_nodes(self, tokens, visual, targets=None):
        """One (N, 1) node per branch; ``targets`` restricts which branches run (others are None)."""
        h = self.trunk(tokens, visual)
        wanted = range(self.num_targets) if targets is None else set(targets)
        return [self.branch(b, h) if b in wanted else None for b in range(self.num_targets)]

    def descriptor(self) -> dict:
        return {"kind": "mt", "backbone": self.cfg.to_dict(), "modalities": self.modalities,
                "seed": self.seed, "viewer_count": self.viewer_count,
                "trunk": list(self.trunk_widths), "branch": list(self.branch_widths)}


def build_st(cfg: BackboneConfig, seed: int = 0, modalities: str = "both", target: str = "Vavg",
             head=ST_HEAD) -> STModel:
    """ST network; ``head`` overrides the hidden widths (small widths are for gradient checks only)."""
    return STModel(cfg, modalities, seed, target, head)


def build_mt(cfg: BackboneConfig, viewer_count: int, seed: int = 0, modalities: str = "both",
             trunk=MT_TRUNK, branch=MT_BRANCH) -> MTModel:
    """MT network with ``viewer_count`` + 1 branches, the last for the average viewer."""
    return MTModel(cfg, viewer_count, modalities, seed, trunk, branch)


def forward(model: Network, tokens, visual=None) -> np.ndarray:
    """Probabilities: shape (N,) for ST, (N, V + 1) for MT."""
    p = model.predict(tokens, visual)
    return p[:, 0] if model.kind == "st" else p


def from_descriptor(desc: dict) -> Network:
    cfg = BackboneConfig(**desc["backbone"])
    if desc["kind"] == "st":
        model = STModel(cfg, desc["modalities"], desc["seed"], desc.get("target", "Vavg"), desc["head"])
    elif desc["kind"] == "mt":
        model = MTModel(cfg, desc["viewer_count"], desc["modalities"], desc["seed"], desc["trunk"], desc["branch"])
    else:
        raise CheckpointError(f"unknown model kind {desc['kind']!r}")
    return model


# -- checkpoint file ------------------------------------------------------------
#
# magic | u32 version | u32 len + JSON descriptor | u32 count | records | u32 crc32
# record: u32 name len, name, u32 ndim, u32 dims..., float64 LE data

def _records(named: dict[str, np.ndarray]) -> bytes:
    out = [struct.pack("<I", len(named))]
    for name, arr in named.items():
        b = name.encode("utf-8")
        out.append(struct.pack("<I", len(b)) + b)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(out)


def checkpoint_bytes(model: Network, optimizer=None, extra: dict | None = None) -> bytes:
    desc = {"format_version": CKPT_VERSION, "architecture": model.descriptor(), "meta": dict(model.meta)}
    if extra:
        desc["meta"].update(extra)
    named = {n: p.value for n, p in model.params.items()}
    if optimizer is not None:
        desc["training_state"] = {"step": optimizer.t}
        for n in model.params:
            if n in optimizer.m:
                named[f"adam.m/{n}"] = optimizer.m[n]
                named[f"adam.v/{n}"] = optimizer.v[n]
    js = json.dumps(desc, sort_keys=True, separators=(",", ":")).encode("utf-8")
    body = CKPT_MAGIC + struct.pack("<I", CKPT_VERSION) + struct.pack("<I", len(js)) + js + _records(named)
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(model: Network, path, optimizer=None, extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, optimizer, extra))


@dataclass
class Checkpoint:
    descriptor: dict
    tensors: dict[str, np.ndarray] = field(repr=False)

    @property
    def architecture(self) -> dict:
        return self.descriptor["architecture"]

    @property
    def meta(self) -> dict:
        return self.descriptor.get("meta", {})


def read_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < len(CKPT_MAGIC) + 16 or not raw.startswith(CKPT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file or truncated")
    body, (crc,) = raw[:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: corrupt checkpoint (CRC mismatch)")
    pos = len(CKPT_MAGIC)
    (version,) = struct.unpack_from("<I", body, pos)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (jlen,) = struct.unpack_from("<I", body, pos + 4)
    pos += 8
    desc = json.loads(body[pos:pos + jlen])
    pos += jlen
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", body, pos)
        name = body[pos + 4:pos + 4 + nlen].decode("utf-8")
        pos += 4 + nlen
        (ndim,) = struct.unpack_from("<I", body, pos)
        shape = struct.unpack_from(f"<{ndim}I", body, pos + 4)
        pos += 4 + 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        tensors[name] = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
    if pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after parameter records")
    return Checkpoint(desc, tensors)


def load_checkpoint(path, kind: str | None = None, with_optimizer: bool = False):
    """Rebuild the model stored in ``path``.

    ``kind`` ("st" or "mt") asserts the expected architecture. With
    ``with_optimizer`` the return value is ``(model, optimizer_or_None)``.
    """
    ck = read_checkpoint(path)
    arch = ck.architecture
    if kind is not None and arch["kind"] != kind:
        raise ArchitectureMismatch(f"{path}: checkpoint holds a {arch['kind']!r} model, expected {kind!r}")
    model = from_descriptor(arch)
    model.meta = dict(ck.meta)
    model.load_state({n: t for n, t in ck.tensors.items() if not n.startswith("adam.")})
    if not with_optimizer:
        return model
    opt = None
    if "training_state" in ck.descriptor:
        from .training import Adam
        opt = Adam()
        opt.t = ck.descriptor["training_state"]["step"]
        for n, t in ck.tensors.items():
            if n.startswith("adam.m/"):
                opt.m[n[7:]] = t.copy()
            elif n.startswith("adam.v/"):
                opt.v[n[7:]] = t.copy()
    return model, opt


def load_into(model: Network, path) -> None:
    """Load parameters into an existing model, refusing a different architecture."""
    ck = read_checkpoint(path)
    shape_only = lambda d: {k: v for k, v in d.items() if k != "seed"}  # noqa: E731
    if shape_only(ck.architecture) != shape_only(model.descriptor()):
        raise ArchitectureMismatch(f"{path}: architecture differs from the target model")
    model.load_state({n: t for n, t in ck.tensors.items() if not n.startswith("adam.")})
