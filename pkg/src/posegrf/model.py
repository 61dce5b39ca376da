"""Spatial-temporal transformer encoder with interchangeable force and 3D-pose heads."""
from __future__ import annotations

import hashlib
import io
import json
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import NUM_JOINTS

FORCE_HEAD = "force"
POSE_HEAD = "pose"
HEAD_CODES = {FORCE_HEAD: 1, POSE_HEAD: 2}
MODES = ("force", "pose3d", "both")
POS_INIT = 0.02

CHECKPOINT_MAGIC = b"PGRFCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    joints: int = NUM_JOINTS
    channels: int = 2
    receptive_field: int = 81
    embed_dim: int = 32
    num_heads: int = 8
    depth: int = 4
    mlp_ratio: float = 2.0
    force_dim: int = 6
    layer_norm: bool = True
    dropout: float = 0.0
    standardize_input: bool = True

    def __post_init__(self):
        for name in ("joints", "channels", "receptive_field", "embed_dim", "num_heads", "depth", "force_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} is not divisible by num_heads {self.num_heads}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        if self.mlp_ratio <= 0 or self.spatial_hidden < 1:
            raise ValueError("mlp_ratio must give a positive hidden width")

    @property
    def pose_dim(self):
        return self.joints * 3

    @property
    def temporal_dim(self):
        return self.joints * self.embed_dim

    @property
    def spatial_hidden(self):
        return int(round(self.embed_dim * self.mlp_ratio))

    @property
    def temporal_hidden(self):
        return int(round(self.temporal_dim * self.mlp_ratio))

    @property
    def input_dim(self):
        return self.joints * self.channels

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def is_buffer(name):
    """Input statistics are stored with the parameters but never trained."""
    return name.startswith("input.")


class ModelParameters(dict):
    """Named parameter tensors; head tensors live under ``head.<name>.``, buffers under ``input.``."""

    @property
    def heads(self):
        return tuple(sorted({k.split(".")[1] for k in self if k.startswith("head.")}))

    def trunk(self):
        return {k: v for k, v in self.items() if not k.startswith("head.")}

    def arrays(self):
        return {k: v.data for k, v in self.items()}

    def copy(self):
        return ModelParameters({k: _tensor(k, v.data.copy()) for k, v in self.items()})

    def zero_grad(self):
        for v in self.values():
            v.grad = None


def _tensor(name, data):
    return T.Tensor(data, requires_grad=not is_buffer(name))


# -- parameter layout ------------------------------------------------------------

def _linear_spec(name, fan_in, fan_out):
    return [(f"{name}.weight", (fan_in, fan_out), "fan_in", fan_in), (f"{name}.bias", (fan_out,), "fan_in", fan_in)]


def _norm_spec(name, d):
    return [(f"{name}.gamma", (d,), "ones", None), (f"{name}.beta", (d,), "zeros", None)]


def _block_spec(prefix, d, hidden):
    return (_norm_spec(f"{prefix}.ln1", d)
            + _linear_spec(f"{prefix}.attn.qkv", d, 3 * d)
            + _linear_spec(f"{prefix}.attn.proj", d, d)
            + _norm_spec(f"{prefix}.ln2", d)
            + _linear_spec(f"{prefix}.mlp.fc1", d, hidden)
            + _linear_spec(f"{prefix}.mlp.fc2", hidden, d))


def trunk_spec(cfg):
    """(name, shape, init kind, fan_in) for every trunk tensor in initialization order."""
    D, JD, f = cfg.embed_dim, cfg.temporal_dim, cfg.receptive_field
    spec = []
    if cfg.standardize_input:
        spec += [("input.shift", (cfg.joints, cfg.channels), "zeros", None),
                 ("input.gain", (cfg.joints, cfg.channels), "ones", None)]
    spec += _linear_spec("spatial.embed", cfg.channels, D)
    spec.append(("spatial.pos", (cfg.joints, D), "pos", None))
    for layer in range(cfg.depth):
        spec += _block_spec(f"spatial.blocks.{layer}", D, cfg.spatial_hidden)
    spec += _norm_spec("spatial.norm", D)
    spec.append(("temporal.pos", (f, JD), "pos", None))
    for layer in range(cfg.depth):
        spec += _block_spec(f"temporal.blocks.{layer}", JD, cfg.temporal_hidden)
    spec += _norm_spec("temporal.norm", JD)
    spec.append(("reducer.weight", (f,), "mean", None))
    return spec


def head_spec(cfg, head):
    if head == FORCE_HEAD:
        return _linear_spec("head.force", cfg.temporal_dim, cfg.force_dim)
    if head == POSE_HEAD:
        return _linear_spec("head.pose", cfg.temporal_dim, cfg.pose_dim)
    raise ValueError(f"unknown head {head!r}; expected one of {sorted(HEAD_CODES)}")


def _init_tensor(shape, kind, fan_in, rng):
    if kind == "ones":
        return np.ones(shape)
    if kind == "zeros":
        return np.zeros(shape)
    if kind == "mean":
        return np.full(shape, 1.0 / shape[0])
    bound = POS_INIT if kind == "pos" else 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _init_group(spec, rng):
    return {name: _tensor(name, _init_tensor(shape, kind, fan_in, rng)) for name, shape, kind, fan_in in spec}


def init_head(cfg, head, seed):
    # each head draws from its own stream so adding a head never perturbs the others
    return _init_group(head_spec(cfg, head), np.random.default_rng([seed, HEAD_CODES[head]]))


def init_params(cfg, seed=0, heads=(FORCE_HEAD,)):
    params = ModelParameters(_init_group(trunk_spec(cfg), np.random.default_rng(seed)))
    for head in heads:
        params.update(init_head(cfg, head, seed))
    return params


def param_count(cfg, heads=(FORCE_HEAD,)):
    """Number of trainable scalars (input statistics excluded)."""
    spec = trunk_spec(cfg) + [s for h in heads for s in head_spec(cfg, h)]
    return int(sum(np.prod(shape) for name, shape, _, _ in spec if not is_buffer(name)))


def set_input_statistics(params, cfg, X):
    """Fit the per-coordinate input standardization to windows X (N, f, J*C).

    Coordinates that never vary keep unit gain.
    """
    if not cfg.standardize_input:
        return params
    flat = np.asarray(X, dtype=float).reshape(-1, cfg.joints, cfg.channels)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    gain = np.where(std > 1e-8, 1.0 / np.where(std > 1e-8, std, 1.0), 1.0)
    params["input.shift"].data[...] = mean
    params["input.gain"].data[...] = gain
    return params


def check_params(params, cfg):
    """Raise ShapeError unless every trunk and present-head tensor matches ``cfg``."""
    expected = {name: shape for name, shape, _, _ in trunk_spec(cfg)}
    for head in params.heads:
        expected.update({name: shape for name, shape, _, _ in head_spec(cfg, head)})
    missing = set(expected) - set(params)
    extra = set(params) - set(expected)
    if missing or extra:
        raise T.ShapeError(f"parameters do not match config (missing {sorted(missing)[:3]}, extra {sorted(extra)[:3]})")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise T.ShapeError(f"{name}: expected {shape}, got {params[name].shape}")


def swap_head(params, cfg, new_head=FORCE_HEAD, seed=0, drop=None):
    """Copy the trunk bit-exact, initialize ``new_head`` afresh and remove the heads in ``drop``.

    By default every existing head other than ``new_head`` is dropped.
    """
    trunk = ModelParameters(params.trunk())
    check_params(trunk, cfg)
    drop = set(params.heads) - {new_head} if drop is None else set(drop)
    out = ModelParameters({k: _tensor(k, v.data.copy()) for k, v in trunk.items()})
    for head in params.heads:
        if head not in drop and head != new_head:
            out.update({k: _tensor(k, v.data.copy()) for k, v in params.items() if k.startswith(f"head.{head}.")})
    out.update(init_head(cfg, new_head, seed))
    return out


# -- forward -------------------------------------------------------------------

class _Context:
    def __init__(self, params, cfg, attention=None, training=False, rng=None):
        self.p = params
        self.cfg = cfg
        self.attention = attention
        self.dropout = cfg.dropout if training else 0.0
        if self.dropout > 0 and rng is None:
            raise ValueError("dropout during training needs an rng")
        self.rng = rng

    def linear(self, x, name):
        return x @ self.p[f"{name}.weight"] + self.p[f"{name}.bias"]

    def norm(self, x, name):
        if not self.cfg.layer_norm:
            return x
        return T.layer_norm(x, self.p[f"{name}.gamma"], self.p[f"{name}.beta"])

    def drop(self, x):
        if self.dropout == 0.0:
            return x
        keep = (self.rng.random(x.shape) >= self.dropout) / (1.0 - self.dropout)
        return x * keep

    def attention_layer(self, x, name):
        N, S, d = x.shape
        h = self.cfg.num_heads
        dh = d // h
        qkv = T.transpose(T.reshape(self.linear(x, f"{name}.qkv"), (N, S, 3, h, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
        attn = T.softmax(scores, axis=-1)
        if self.attention is not None:
            self.attention.append((name, attn.data))
        out = T.reshape(T.transpose(attn @ v, (0, 2, 1, 3)), (N, S, d))
        return self.linear(out, f"{name}.proj")

    def block(self, x, name):
        x = x + self.drop(self.attention_layer(self.norm(x, f"{name}.ln1"), f"{name}.attn"))
        hidden = T.gelu(self.linear(self.norm(x, f"{name}.ln2"), f"{name}.mlp.fc1"))
        return x + self.drop(self.linear(hidden, f"{name}.mlp.fc2"))


def _spatial(ctx, frames):
    cfg = ctx.cfg
    if cfg.standardize_input:
        frames = (frames - ctx.p["input.shift"]) * ctx.p["input.gain"]
    x = ctx.linear(frames, "spatial.embed") + ctx.p["spatial.pos"]
    for layer in range(cfg.depth):
        x = ctx.block(x, f"spatial.blocks.{layer}")
    return ctx.norm(x, "spatial.norm")


def _temporal(ctx, emb):
    x = emb + ctx.p["temporal.pos"]
    for layer in range(ctx.cfg.depth):
        x = ctx.block(x, f"temporal.blocks.{layer}")
    return ctx.norm(x, "temporal.norm")


def spatial_encode(params, cfg, frames, attention=None):
    """Frames (..., J, C) to per-frame embeddings (..., J*D); tokens are joints."""
    frames = T.as_tensor(frames)
    if frames.shape[-2:] != (cfg.joints, cfg.channels):
        raise T.ShapeError(f"spatial_encode: expected (..., {cfg.joints}, {cfg.channels}), got {frames.shape}")
    lead = frames.shape[:-2]
    n = int(np.prod(lead)) if lead else 1
    x = _spatial(_Context(params, cfg, attention), T.reshape(frames, (n, cfg.joints, cfg.channels)))
    return T.reshape(x, lead + (cfg.temporal_dim,))


def temporal_encode(params, cfg, emb, attention=None):
    """Embeddings (B, f, J*D) to (B, f, J*D); tokens are frames."""
    emb = T.as_tensor(emb)
    if emb.ndim != 3 or emb.shape[1:] != (cfg.receptive_field, cfg.temporal_dim):
        raise T.ShapeError(
            f"temporal_encode: expected (B, {cfg.receptive_field}, {cfg.temporal_dim}), got {emb.shape}")
    return _temporal(_Context(params, cfg, attention), emb)


def encode(params, cfg, x, attention=None, training=False, rng=None):
    """Trunk features (B, J*D) for windows x (B, f, J*C)."""
    x = T.as_tensor(x)
    if x.ndim != 3 or x.shape[1:] != (cfg.receptive_field, cfg.input_dim):
        raise T.ShapeError(
            f"expected windows (B, {cfg.receptive_field}, {cfg.input_dim}), got {x.shape}")
    B, f = x.shape[:2]
    ctx = _Context(params, cfg, attention, training, rng)
    h = _spatial(ctx, T.reshape(x, (B * f, cfg.joints, cfg.channels)))
    h = _temporal(ctx, T.reshape(h, (B, f, cfg.temporal_dim)))
    return T.reshape(T.conv1d_reduce(h, params["reducer.weight"]), (B, cfg.temporal_dim))


def forward(params, cfg, x, mode="force", attention=None, training=False, rng=None):
    """Predict from windows (B, f, J*C) or a single window (f, J*C).

    ``mode="force"`` gives (B, 6) N/kg, ``"pose3d"`` gives (B, J, 3) and ``"both"`` a tuple.
    """
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
    need = {"force": (FORCE_HEAD,), "pose3d": (POSE_HEAD,), "both": (FORCE_HEAD, POSE_HEAD)}[mode]
    for head in need:
        if f"head.{head}.weight" not in params:
            raise ValueError(f"mode {mode!r} needs the {head} head, which is not initialized")
    x = T.as_tensor(x)
    single = x.ndim == 2
    if single:
        x = T.reshape(x, (1,) + x.shape)
    r = encode(params, cfg, x, attention, training, rng)
    outs = []
    if FORCE_HEAD in need:
        force = r @ params["head.force.weight"] + params["head.force.bias"]
        outs.append(force[0] if single else force)
    if POSE_HEAD in need:
        pose = T.reshape(r @ params["head.pose.weight"] + params["head.pose.bias"], (-1, cfg.joints, 3))
        outs.append(pose[0] if single else pose)
    return outs[0] if len(outs) == 1 else tuple(outs)


def predict(params, cfg, X, mode="force", batch_size=256):
    """Batched inference to plain arrays, without recording a tape."""
    X = np.asarray(X, dtype=float)
    chunks = []
    for start in range(0, X.shape[0], batch_size):
        out = forward(params, cfg, X[start:start + batch_size], mode)
        chunks.append(out.data if mode != "both" else tuple(o.data for o in out))
    if mode == "both":
        return tuple(np.concatenate(parts) for parts in zip(*chunks))
    return np.concatenate(chunks) if chunks else np.zeros((0, cfg.force_dim if mode == "force" else cfg.joints))


# -- checkpoints -----------------------------------------------------------------

def save_checkpoint(path, params, cfg, extra=None):
    """Binary container: magic, version, JSON header (config echo), tensor table, sha256."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    header = json.dumps({"config": cfg.to_dict(), "extra": extra or {}}, sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(header)))
    buf.write(header)
    buf.write(struct.pack("<I", len(params)))
    for name in sorted(params):
        data = np.ascontiguousarray(params[name].data, dtype="<f8")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        buf.write(data.tobytes())
    body = buf.getvalue()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(hashlib.sha256(body).digest())


def load_checkpoint(path):
    """Return (params, config, extra); raises CheckpointError on any corruption."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(CHECKPOINT_MAGIC) + 36 or not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    view = memoryview(body)
    pos = len(CHECKPOINT_MAGIC)

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, view, pos)
        pos += struct.calcsize(fmt)
        return vals

    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = take("<I")
    header = json.loads(bytes(view[pos:pos + hlen]).decode("utf-8"))
    pos += hlen
    (count,) = take("<I")
    params = ModelParameters()
    for _ in range(count):
        (nlen,) = take("<H")
        name = bytes(view[pos:pos + nlen]).decode("utf-8")
        pos += nlen
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(body, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
        params[name] = _tensor(name, data)
    cfg = ModelConfig.from_dict(header["config"])
    check_params(params, cfg)
    return params, cfg, header.get("extra", {})


def trunk_digest(params):
    """sha256 over the trunk tensors, for cheap bit-exact comparisons."""
    h = hashlib.sha256()
    for name, t in sorted(params.trunk().items()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return h.hexdigest()
