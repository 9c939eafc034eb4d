"""Attention regressor mapping a (T, 12) cycle-feature sequence to (SBP, DBP).

Layout per forward pass::

    conv1d_k1 embedding (12 -> d_model) + sinusoidal positions
    n_blocks x [multi-head attention -> linear -> dropout -> +residual -> layer norm
                position-wise FFN     -> dropout -> +residual -> layer norm]
    average pooling over groups of ``pool_factor`` steps
    flatten -> affine -> ReLU
"""
from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import tensorgrad as tg
from .errors import CorruptFile, InvalidConfig, IoFailure, OddDimension, ShapeMismatch, VersionMismatch


@dataclass(frozen=True)
class ModelConfig:
    l_in: int = 12
    d_model: int = 128
    T: int = 48
    n_heads: int = 14
    d_head: int = 10
    n_blocks: int = 1
    d_ff: int = 256
    dropout_p: float = 0.15
    pool_factor: int = 4
    # fixed output scaling: prediction = relu(target_mean + target_std * affine(x))
    target_mean: tuple = (0.0, 0.0)
    target_std: tuple = (1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "target_mean", tuple(float(v) for v in self.target_mean))
        object.__setattr__(self, "target_std", tuple(float(v) for v in self.target_std))
        self.validate()

    def validate(self):
        for name in ("l_in", "d_model", "T", "n_heads", "d_head", "n_blocks", "d_ff", "pool_factor"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise InvalidConfig(f"{name} must be a positive integer, got {v}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise InvalidConfig("dropout_p must lie in [0, 1)")
        if self.T % self.pool_factor:
            raise InvalidConfig(f"pool_factor {self.pool_factor} must divide T={self.T}")
        if self.d_model % 2:
            raise InvalidConfig("d_model must be even for the positional encoding")
        if len(self.target_mean) != 2 or len(self.target_std) != 2 or min(self.target_std) <= 0:
            raise InvalidConfig("target_mean/target_std need two entries, std > 0")

    @property
    def flat_dim(self):
        return self.d_model * (self.T // self.pool_factor)

    def to_json(self):
        d = asdict(self)
        d["target_mean"] = list(self.target_mean)
        d["target_std"] = list(self.target_std)
        return d

    @classmethod
    def from_json(cls, obj):
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise InvalidConfig(f"unknown model config keys {sorted(unknown)}")
        return cls(**obj)


def param_shapes(cfg):
    """Parameter names and shapes in declaration (= checkpoint) order."""
    d, h, dh = cfg.d_model, cfg.n_heads, cfg.d_head
    shapes = [("embed_weight", (d, cfg.l_in)), ("embed_bias", (d,))]
    for b in range(cfg.n_blocks):
        p = f"block{b}."
        shapes += [
            (p + "w_q", (h, d, dh)),
            (p + "w_k", (h, d, dh)),
            (p + "w_v", (h, d, dh)),
            (p + "w_o", (h * dh, d)),
            (p + "attn_linear_w", (d, d)),
            (p + "attn_linear_b", (d,)),
            (p + "ln1_gain", (d,)),
            (p + "ln1_bias", (d,)),
            (p + "ffn_w1", (cfg.d_ff, d)),
            (p + "ffn_b1", (cfg.d_ff,)),
            (p + "ffn_w2", (d, cfg.d_ff)),
            (p + "ffn_b2", (d,)),
            (p + "ln2_gain", (d,)),
            (p + "ln2_bias", (d,)),
        ]
    shapes += [("head_weight", (2, cfg.flat_dim)), ("head_bias", (2,))]
    return shapes


class ModelParams:
    """Ordered mapping of parameter name -> Tensor."""

    def __init__(self, cfg, tensors):
        self.cfg = cfg
        expected = param_shapes(cfg)
        if list(tensors) != [n for n, _ in expected]:
            raise ShapeMismatch("parameter names do not match the model config")
        for name, shape in expected:
            if tuple(tensors[name].shape) != shape:
                raise ShapeMismatch(f"{name}: expected {shape}, got {tuple(tensors[name].shape)}")
            if not np.all(np.isfinite(tensors[name].data)):
                raise ShapeMismatch(f"{name} has non-finite values")
        self.tensors = tensors

    def __getitem__(self, name):
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def items(self):
        return self.tensors.items()

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def copy(self):
        return ModelParams(self.cfg, {k: tg.parameter(v.data.copy()) for k, v in self.tensors.items()})


def init_params(cfg, rng):
    """Glorot-uniform weights, zero biases, unit layer-norm gains.

    The regression head starts at zero so the untrained model predicts the
    fixed output offset (the training-target mean when scaling is set).
    """
    tensors = {}
    for name, shape in param_shapes(cfg):
        leaf = name.split(".")[-1]
        if leaf.endswith("gain"):
            arr = np.ones(shape)
        elif len(shape) == 1 or name == "head_weight":
            arr = np.zeros(shape)
        else:
            fan_in, fan_out = shape[-2:] if len(shape) == 3 else (shape[1], shape[0])
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-limit, limit, size=shape)
        tensors[name] = tg.parameter(arr)
    return ModelParams(cfg, tensors)


# ---------------------------------------------------------------- layers


def embed(x, params):
    """(N, l_in, T) -> (N, d_model, T)."""
    return tg.conv1d_k1(x, params["embed_weight"], params["embed_bias"])


_PE_CACHE = {}


def positional_encoding(T, d_model):
    if d_model % 2:
        raise OddDimension(f"d_model must be even, got {d_model}")
    key = (T, d_model)
    if key not in _PE_CACHE:
        pos = np.arange(T, dtype=np.float64)[:, None]
        i = np.arange(0, d_model, 2, dtype=np.float64)[None, :]
        angle = pos / np.power(10000.0, i / d_model)
        pe = np.empty((T, d_model))
        pe[:, 0::2] = np.sin(angle)
        pe[:, 1::2] = np.cos(angle)
        pe.setflags(write=False)
        _PE_CACHE[key] = pe
    return _PE_CACHE[key]


def multi_head_attention(x, params, cfg, block=0, rng=None, training=False, trace=None):
    """Post-norm multi-head self-attention sub-layer on (N, T, d_model)."""
    p = f"block{block}."
    n, t, d = x.shape
    h, dh = cfg.n_heads, cfg.d_head

    def project(w):
        # (H, d, dh) -> (d, H*dh) so all heads come out of one matmul
        w_all = tg.reshape(tg.transpose(params[p + w], (1, 0, 2)), (d, h * dh))
        y = tg.matmul(tg.reshape(x, (n * t, d)), w_all)
        return tg.transpose(tg.reshape(y, (n, t, h, dh)), (0, 2, 1, 3))  # (N, H, T, dh)

    q, k, v = project("w_q"), project("w_k"), project("w_v")
    scores = tg.mul_scalar(tg.matmul(q, tg.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    attn = tg.softmax_lastdim(scores)
    if trace is not None:
        trace.setdefault("attention", []).append(attn.data)
    ctx = tg.matmul(attn, v)  # (N, H, T, dh)
    ctx = tg.reshape(tg.transpose(ctx, (0, 2, 1, 3)), (n, t, h * dh))
    out = tg.matmul(ctx, params[p + "w_o"])
    out = tg.add(tg.matmul(out, tg.transpose(params[p + "attn_linear_w"])), params[p + "attn_linear_b"])
    if trace is not None:
        trace.setdefault("attention_out", []).append(out.data)
    out = tg.dropout(out, 1.0 - cfg.dropout_p, rng, training)
    return tg.layer_norm(tg.add(x, out), params[p + "ln1_gain"], params[p + "ln1_bias"])


def position_wise_ffn(x, params, cfg, block=0, rng=None, training=False):
    p = f"block{block}."
    hidden = tg.relu(tg.add(tg.matmul(x, tg.transpose(params[p + "ffn_w1"])), params[p + "ffn_b1"]))
    out = tg.add(tg.matmul(hidden, tg.transpose(params[p + "ffn_w2"])), params[p + "ffn_b2"])
    out = tg.dropout(out, 1.0 - cfg.dropout_p, rng, training)
    return tg.layer_norm(tg.add(x, out), params[p + "ln2_gain"], params[p + "ln2_bias"])


def time_compressor(x, pool_factor):
    return tg.mean_pool_time(x, pool_factor)


def head(x, params, cfg):
    """(N, T', d_model) -> (N, 2): flatten, affine, fixed target scaling, ReLU."""
    n = x.shape[0]
    flat = tg.reshape(x, (n, -1))
    if flat.shape[1] != params["head_weight"].shape[1]:
        raise ShapeMismatch(f"head expects {params['head_weight'].shape[1]} inputs, got {flat.shape[1]}")
    y = tg.add(tg.matmul(flat, tg.transpose(params["head_weight"])), params["head_bias"])
    if cfg.target_std != (1.0, 1.0):
        y = tg.mul(y, np.asarray(cfg.target_std))
    if cfg.target_mean != (0.0, 0.0):
        y = tg.add(y, np.asarray(cfg.target_mean))
    return tg.relu(y)


def forward(batch, params, cfg=None, mode="eval", rng=None, use_pe=True, trace=None):
    """Predict (N, 2) blood pressures from a (N, T, l_in) batch."""
    cfg = cfg or params.cfg
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    training = mode == "train" and cfg.dropout_p > 0
    if training and rng is None:
        raise ValueError("train mode with dropout needs an rng")
    x = batch if isinstance(batch, tg.Tensor) else tg.Tensor(batch)
    if x.ndim != 3 or x.shape[1:] != (cfg.T, cfg.l_in):
        raise ShapeMismatch(f"expected (N, {cfg.T}, {cfg.l_in}), got {x.shape}")
    h = embed(tg.transpose(x, (0, 2, 1)), params)
    h = tg.transpose(h, (0, 2, 1))  # (N, T, d_model)
    if use_pe:
        h = tg.add(h, positional_encoding(cfg.T, cfg.d_model))
    for b in range(cfg.n_blocks):
        h = multi_head_attention(h, params, cfg, b, rng, training, trace)
        h = position_wise_ffn(h, params, cfg, b, rng, training)
    h = time_compressor(h, cfg.pool_factor)
    return head(h, params, cfg)


def predict(batch, params, batch_size=256):
    """Eval-mode predictions as a plain (N, 2) array."""
    batch = np.asarray(batch, dtype=np.float64)
    out = []
    with tg.no_grad():
        for i in range(0, batch.shape[0], batch_size):
            out.append(forward(batch[i : i + batch_size], params, mode="eval").data)
    return np.concatenate(out) if out else np.empty((0, 2))


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"PFCK"
CKPT_VERSION = 1


def save_params(params, path, extra=None):
    """Write a checkpoint: header, config JSON, tensors in declaration order, CRC32."""
    blob = bytearray()
    blob += CKPT_MAGIC
    blob += struct.pack("<I", CKPT_VERSION)
    meta = {"config": params.cfg.to_json()}
    if extra:
        meta["extra"] = extra
    cfg_json = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    blob += struct.pack("<Q", len(cfg_json))
    blob += cfg_json
    for name, t in params.items():
        raw = name.encode()
        blob += struct.pack("<I", len(raw))
        blob += raw
        blob += struct.pack("<I", t.data.ndim)
        blob += struct.pack(f"<{t.data.ndim}Q", *t.data.shape)
        blob += np.ascontiguousarray(t.data, dtype="<f8").tobytes()
    blob += struct.pack("<I", zlib.crc32(bytes(blob)) & 0xFFFFFFFF)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(bytes(blob))
    except OSError as exc:
        raise IoFailure(str(exc), path=str(path)) from exc


def read_checkpoint(path):
    """Return ``(ModelParams, extra)`` from a checkpoint file."""
    path = Path(path)
    if not path.exists():
        raise IoFailure(f"no such checkpoint: {path}", path=str(path))
    blob = path.read_bytes()
    if len(blob) < 20 or blob[:4] != CKPT_MAGIC:
        raise CorruptFile("not a checkpoint (bad magic or truncated)", path=str(path))
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != crc:
        raise CorruptFile("checksum mismatch", path=str(path))
    (version,) = struct.unpack_from("<I", blob, 4)
    if version != CKPT_VERSION:
        raise VersionMismatch(f"checkpoint version {version}, expected {CKPT_VERSION}", path=str(path))
    (cfg_len,) = struct.unpack_from("<Q", blob, 8)
    off = 16
    meta = json.loads(blob[off : off + cfg_len])
    off += cfg_len
    cfg = ModelConfig.from_json(meta["config"])
    tensors = {}
    end = len(blob) - 4
    try:
        while off < end:
            (nlen,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off : off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<I", blob, off)
            off += 4
            dims = struct.unpack_from(f"<{ndim}Q", blob, off)
            off += 8 * ndim
            count = int(np.prod(dims)) if ndim else 1
            data = np.frombuffer(blob, dtype="<f8", count=count, offset=off).reshape(dims)
            off += 8 * count
            tensors[name] = tg.parameter(data.astype(np.float64))
    except (struct.error, ValueError) as exc:
        raise CorruptFile(f"malformed tensor table: {exc}", path=str(path)) from exc
    return ModelParams(cfg, tensors), meta.get("extra")


def load_params(path, expected_cfg=None):
    """Load parameters; with ``expected_cfg`` the architecture must match it."""
    params, _ = read_checkpoint(path)
    if expected_cfg is not None:
        arch = lambda c: {k: v for k, v in c.to_json().items() if k not in ("target_mean", "target_std", "dropout_p")}
        if arch(params.cfg) != arch(expected_cfg):
            raise ShapeMismatch(
                f"checkpoint architecture {arch(params.cfg)} does not match expected {arch(expected_cfg)}"
            )
    return params
