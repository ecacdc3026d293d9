"""TDNN encoder, projection head and AAM head with hand-written gradients.

Parameters live in a flat ``dict[str, ndarray]`` so that EMA, SGD and
checkpointing can treat every model uniformly.  Forward functions return a
cache consumed by the matching backward function.

Shapes used throughout:
    features  (N, T, D)
    embedding (N, E)
    head out  (N, K)
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from scipy.special import erf

L2_EPS = 1e-12
STD_EPS = 1e-8

_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class NetError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_mels: int = 40
    channels: int = 64
    tdnn: tuple = ((5, 1), (3, 2), (3, 3))
    embed_dim: int = 32
    head_hidden: int = 128
    head_layers: int = 2
    bottleneck: int = 32
    out_dim: int = 256
    activation: str = "gelu"

    def __post_init__(self):
        self.tdnn = tuple(tuple(int(v) for v in kd) for kd in self.tdnn)
        if self.activation not in ("gelu", "relu"):
            raise NetError(f"unknown activation {self.activation!r}")

    @property
    def receptive_field(self) -> int:
        return 1 + sum(d * (k - 1) for k, d in self.tdnn)


@dataclass
class AamConfig:
    margin: float = 0.2
    scale: float = 30.0
    n_classes: int = 2

    def __post_init__(self):
        if not 0.0 <= self.margin <= 0.5:
            raise NetError(f"AAM margin {self.margin} outside [0, 0.5]")
        if self.scale <= 0:
            raise NetError("AAM scale must be positive")


# -- initialization ------------------------------------------------------

def _uniform(rng, fan_in, shape):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg: ModelConfig, seed: int) -> dict:
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0x1A])
    p = {}
    c_in = cfg.n_mels
    for i, (k, _) in enumerate(cfg.tdnn):
        p[f"tdnn{i}.weight"] = _uniform(rng, k * c_in, (k * c_in, cfg.channels))
        p[f"tdnn{i}.bias"] = np.zeros(cfg.channels)
        c_in = cfg.channels
    p["embed.weight"] = _uniform(rng, 2 * c_in, (2 * c_in, cfg.embed_dim)) / np.sqrt(2.0)
    p["embed.bias"] = np.zeros(cfg.embed_dim)
    d_in = cfg.embed_dim
    for i in range(cfg.head_layers):
        p[f"head{i}.weight"] = _uniform(rng, d_in, (d_in, cfg.head_hidden))
        p[f"head{i}.bias"] = np.zeros(cfg.head_hidden)
        d_in = cfg.head_hidden
    p["bottleneck.weight"] = _uniform(rng, d_in, (d_in, cfg.bottleneck)) / np.sqrt(2.0)
    p["bottleneck.bias"] = np.zeros(cfg.bottleneck)
    p["proto.v"] = rng.standard_normal((cfg.bottleneck, cfg.out_dim))
    return p


def data_init(params, feats, cfg: ModelConfig) -> dict:
    """Data-dependent initialization of every affine layer before the prototypes.

    Layer by layer, each output unit is shifted and rescaled so its
    pre-activation over ``feats`` (N, T, D) has zero mean and unit variance.
    Without batch-norm, ReLU outputs pooled over time share a large positive
    common component, and a plain random init maps all utterances to nearly
    the same bottleneck direction.  Returns new params; the input is untouched.
    """
    p = copy_params(params, np.float64)
    x = np.asarray(feats, dtype=np.float64)

    def affine(name, h):
        z = h @ p[f"{name}.weight"] + p[f"{name}.bias"]
        axes = tuple(range(z.ndim - 1))
        sd = z.std(axis=axes) + 1e-6
        p[f"{name}.weight"] = p[f"{name}.weight"] / sd
        p[f"{name}.bias"] = (p[f"{name}.bias"] - z.mean(axis=axes)) / sd
        return h @ p[f"{name}.weight"] + p[f"{name}.bias"]

    for i, (k, d) in enumerate(cfg.tdnn):
        x = np.maximum(affine(f"tdnn{i}", _im2col(x, k, d)), 0.0)
    mu = x.mean(axis=1)
    sd = np.sqrt(((x - mu[:, None]) ** 2).mean(axis=1) + STD_EPS)
    h = affine("embed", np.concatenate([mu, sd], axis=-1))
    for i in range(cfg.head_layers):
        h = _act(affine(f"head{i}", h), cfg.activation)
    affine("bottleneck", h)
    return p


def encoder_keys(params) -> list:
    return [k for k in params if k.startswith(("tdnn", "embed."))]


def head_keys(params) -> list:
    return [k for k in params if k.startswith(("head", "bottleneck.", "proto."))]


def zeros_like(params) -> dict:
    return {k: np.zeros_like(v) for k, v in params.items()}


def copy_params(params, dtype=None) -> dict:
    return {k: v.astype(dtype or v.dtype, copy=True) for k, v in params.items()}


# -- activations ---------------------------------------------------------

def _act(x, kind):
    if kind == "relu":
        return np.maximum(x, 0.0)
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def _act_grad(x, kind):
    if kind == "relu":
        return (x > 0).astype(x.dtype)
    return 0.5 * (1.0 + erf(x / _SQRT2)) + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)


# -- encoder -------------------------------------------------------------

def _im2col(x, k, d):
    t_out = x.shape[1] - d * (k - 1)
    return np.concatenate([x[:, j * d: j * d + t_out] for j in range(k)], axis=-1)


def encoder_forward(params, feats, cfg: ModelConfig):
    """Map (N, T, D) features to (N, E) embeddings."""
    x = np.asarray(feats, dtype=params["tdnn0.weight"].dtype)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1] < cfg.receptive_field:
        raise NetError(
            f"{x.shape[1]} frames is below the encoder receptive field; need T >= {cfg.receptive_field}")
    layers = []
    for i, (k, d) in enumerate(cfg.tdnn):
        cols = _im2col(x, k, d)
        z = cols @ params[f"tdnn{i}.weight"] + params[f"tdnn{i}.bias"]
        layers.append((cols, z, x.shape))
        x = np.maximum(z, 0.0)
    mu = x.mean(axis=1)
    centered = x - mu[:, None]
    sd = np.sqrt((centered ** 2).mean(axis=1) + STD_EPS)
    pooled = np.concatenate([mu, sd], axis=-1)
    emb = pooled @ params["embed.weight"] + params["embed.bias"]
    cache = {"layers": layers, "centered": centered, "sd": sd, "pooled": pooled}
    return emb, cache


def encoder_backward(params, cache, d_emb, cfg: ModelConfig, grads=None):
    grads = {} if grads is None else grads

    def acc(name, g):
        if name in grads:
            grads[name] += g
        else:
            grads[name] = g

    acc("embed.weight", cache["pooled"].T @ d_emb)
    acc("embed.bias", d_emb.sum(axis=0))
    d_pooled = d_emb @ params["embed.weight"].T
    c = cache["centered"]
    n_t = c.shape[1]
    half = c.shape[2]
    d_mu, d_sd = d_pooled[:, :half], d_pooled[:, half:]
    # d var / d x_t = 2 (x_t - mu) / T ; the mu-path of var sums to zero
    dx = d_mu[:, None, :] / n_t + c * (d_sd / (cache["sd"] * n_t))[:, None, :]
    for i in reversed(range(len(cfg.tdnn))):
        k, d = cfg.tdnn[i]
        cols, z, in_shape = cache["layers"][i]
        dz = dx * (z > 0)
        w = params[f"tdnn{i}.weight"]
        acc(f"tdnn{i}.weight", cols.reshape(-1, cols.shape[-1]).T @ dz.reshape(-1, dz.shape[-1]))
        acc(f"tdnn{i}.bias", dz.sum(axis=(0, 1)))
        if i == 0:
            break
        dcols = dz @ w.T
        dx = np.zeros(in_shape, dtype=dz.dtype)
        c_in = in_shape[2]
        t_out = dz.shape[1]
        for j in range(k):
            dx[:, j * d: j * d + t_out] += dcols[..., j * c_in:(j + 1) * c_in]
    return grads


def encode(params, feats, cfg: ModelConfig) -> np.ndarray:
    """Embedding of a single (T, D) feature matrix."""
    frames = getattr(feats, "frames", feats)
    emb, _ = encoder_forward(params, np.asarray(frames)[None], cfg)
    return emb[0]


# -- projection head -----------------------------------------------------

def prototypes(params) -> np.ndarray:
    v = params["proto.v"]
    return v / np.linalg.norm(v, axis=0, keepdims=True)


def head_forward(params, emb, cfg: ModelConfig):
    h = np.atleast_2d(np.asarray(emb, dtype=params["proto.v"].dtype))
    hidden = []
    for i in range(cfg.head_layers):
        a = h @ params[f"head{i}.weight"] + params[f"head{i}.bias"]
        hidden.append((h, a))
        h = _act(a, cfg.activation)
    z = h @ params["bottleneck.weight"] + params["bottleneck.bias"]
    norm = np.maximum(np.linalg.norm(z, axis=1, keepdims=True), L2_EPS)
    zn = z / norm
    vnorm = np.linalg.norm(params["proto.v"], axis=0, keepdims=True)
    w = params["proto.v"] / vnorm
    q = zn @ w
    cache = {"hidden": hidden, "h_last": h, "zn": zn, "norm": norm, "w": w, "vnorm": vnorm}
    return q, cache


def head_backward(params, cache, dq, cfg: ModelConfig, grads=None):
    """Returns (grads, d_embedding)."""
    grads = {} if grads is None else grads

    def acc(name, g):
        if name in grads:
            grads[name] += g
        else:
            grads[name] = g

    zn, w = cache["zn"], cache["w"]
    dw = zn.T @ dq
    acc("proto.v", (dw - w * np.sum(w * dw, axis=0, keepdims=True)) / cache["vnorm"])
    dzn = dq @ w.T
    floored = cache["norm"] <= L2_EPS
    dz = np.where(floored, dzn, dzn - zn * np.sum(zn * dzn, axis=1, keepdims=True)) / cache["norm"]
    acc("bottleneck.weight", cache["h_last"].T @ dz)
    acc("bottleneck.bias", dz.sum(axis=0))
    dh = dz @ params["bottleneck.weight"].T
    for i in reversed(range(cfg.head_layers)):
        h_in, a = cache["hidden"][i]
        da = dh * _act_grad(a, cfg.activation)
        acc(f"head{i}.weight", h_in.T @ da)
        acc(f"head{i}.bias", da.sum(axis=0))
        dh = da @ params[f"head{i}.weight"].T
    return grads, dh


def project(params, embedding, cfg: ModelConfig) -> np.ndarray:
    q, _ = head_forward(params, embedding, cfg)
    return q[0] if np.ndim(embedding) == 1 else q


def forward(params, feats, cfg: ModelConfig):
    """Full student/teacher network F = h(g(x)); returns (q, cache)."""
    emb, enc_cache = encoder_forward(params, feats, cfg)
    q, head_cache = head_forward(params, emb, cfg)
    return q, {"encoder": enc_cache, "head": head_cache, "embedding": emb}


def backward(params, cache, dq, cfg: ModelConfig, grads=None) -> dict:
    """Gradients of every parameter given d loss / d q for a cached forward pass."""
    dq = np.asarray(dq, dtype=params["proto.v"].dtype)
    if not np.all(np.isfinite(dq)):
        raise NetError("non-finite upstream gradient")
    grads = zeros_like(params) if grads is None else grads
    grads, d_emb = head_backward(params, cache["head"], dq, cfg, grads)
    return encoder_backward(params, cache["encoder"], d_emb, cfg, grads)


# -- AAM -----------------------------------------------------------------

def init_aam(embed_dim: int, n_classes: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0xAA])
    return rng.standard_normal((n_classes, embed_dim))


def aam_loss(embedding, labels, weight, cfg: AamConfig):
    """Additive angular margin softmax averaged over a batch.

    ``weight`` rows are class prototypes (normalized internally).  Returns
    ``(loss, d_embedding, d_weight)``.
    """
    e = np.atleast_2d(np.asarray(embedding, dtype=np.float64))
    y = np.atleast_1d(np.asarray(labels))
    if np.any(y >= cfg.n_classes) or np.any(y < 0):
        raise NetError("label outside [0, n_classes)")
    if weight.shape[0] != cfg.n_classes:
        raise NetError(f"prototype matrix has {weight.shape[0]} rows for {cfg.n_classes} classes")
    n = e.shape[0]
    rows = np.arange(n)
    e_norm = np.maximum(np.linalg.norm(e, axis=1, keepdims=True), L2_EPS)
    en = e / e_norm
    w_norm = np.linalg.norm(weight, axis=1, keepdims=True)
    wn = weight / w_norm
    cos = en @ wn.T
    ct = np.clip(cos[rows, y], -1.0, 1.0)
    sin = np.sqrt(np.maximum(1.0 - ct * ct, 0.0))
    cm, sm = np.cos(cfg.margin), np.sin(cfg.margin)
    logits = cfg.scale * cos
    logits[rows, y] = cfg.scale * (ct * cm - sin * sm)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    loss = float(np.mean(log_z - shifted[rows, y]))

    dlogits = np.exp(shifted - log_z[:, None])
    dlogits[rows, y] -= 1.0
    dlogits /= n
    dcos = cfg.scale * dlogits
    dcos[rows, y] *= cm + sm * ct / np.maximum(sin, 1e-6)
    den = dcos @ wn
    dwn = dcos.T @ en
    de = (den - en * np.sum(en * den, axis=1, keepdims=True)) / e_norm
    dw = (dwn - wn * np.sum(wn * dwn, axis=1, keepdims=True)) / w_norm
    return loss, de, dw


# -- optimizer -----------------------------------------------------------

def sgd_step(params, grads, lr, momentum_state, momentum=0.9):
    """In-place SGD with heavy-ball momentum: v <- mu v + g ; p <- p - lr v."""
    updates = {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            continue
        if g.shape != p.shape:
            raise NetError(f"gradient shape {g.shape} does not match parameter {k} {p.shape}")
        v = momentum_state.get(k)
        v = g.copy() if v is None else momentum * v + g
        step = lr * v
        if not np.all(np.isfinite(step)):
            raise FloatingPointError(f"non-finite update for parameter {k}")
        updates[k] = (v, step)
    for k, (v, step) in updates.items():
        momentum_state[k] = v
        params[k] -= step
    return params


# -- checkpoints ---------------------------------------------------------

MAGIC = b"SPKDINO\x00"
SCHEMA_VERSION = 1


def save_checkpoint(path, groups: dict, meta: dict) -> None:
    """Write named groups of arrays plus JSON metadata.

    Layout: magic, u32 schema version, u64 header length, JSON header
    (metadata + layer manifest), then float64 little-endian data in manifest order.
    """
    manifest = []
    blobs = []
    for gname in sorted(groups):
        for name in sorted(groups[gname]):
            arr = np.ascontiguousarray(groups[gname][name], dtype="<f8")
            manifest.append({"group": gname, "name": name, "shape": list(arr.shape)})
            blobs.append(arr.tobytes())
    header = json.dumps({"meta": meta, "layers": manifest}, sort_keys=True).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", SCHEMA_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)
    tmp.replace(path)


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise NetError(f"{path}: not a checkpoint (bad magic)")
    off = len(MAGIC)
    version, hlen = struct.unpack_from("<IQ", data, off)
    if version != SCHEMA_VERSION:
        raise NetError(f"{path}: unsupported schema version {version}")
    off += struct.calcsize("<IQ")
    header = json.loads(data[off:off + hlen])
    off += hlen
    groups = {}
    for entry in header["layers"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        if off + 8 * count > len(data):
            raise NetError(f"{path}: truncated at layer {entry['group']}/{entry['name']}")
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(entry["shape"])
        groups.setdefault(entry["group"], {})[entry["name"]] = arr.astype(np.float64)
        off += 8 * count
    if off != len(data):
        raise NetError(f"{path}: {len(data) - off} trailing bytes")
    return groups, header["meta"]


def model_config_to_dict(cfg: ModelConfig) -> dict:
    d = asdict(cfg)
    d["tdnn"] = [list(kd) for kd in cfg.tdnn]
    return d


def model_config_from_dict(d: dict) -> ModelConfig:
    return ModelConfig(**d)
