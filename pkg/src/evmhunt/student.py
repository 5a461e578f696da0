"""Two-stage student network with hand-written gradients.

Stage A (sequence extractor): a bidirectional LSTM runs over block
embeddings in block-index order; each node's forward and backward hidden
states are concatenated and projected to the score-feature dimension.

Stage B (graph extractor): one multi-head graph attention layer over the
CFG with self-loops, ELU, mean pooling over nodes, then an MLP with a tanh
hidden layer and a sigmoid output.

Parameters live in flat ``dict[str, ndarray]`` containers so optimizers,
checkpoints and gradient checks can treat every tensor the same way.  Each
``*_forward`` returns its output plus a cache that the matching
``*_backward`` consumes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .kernels import (
    gat_attention_backward,
    gat_attention_forward,
    lstm_seq_backward,
    lstm_seq_forward,
)

Params = dict[str, np.ndarray]


@dataclass(frozen=True)
class StudentConfig:
    embed_dim: int = 64
    hidden: int = 64
    feature_dim: int = 64
    heads: int = 4
    head_dim: int = 16
    slope: float = 0.2
    mlp_hidden: int = 32

    def __post_init__(self):
        for name in ("embed_dim", "hidden", "feature_dim", "heads", "head_dim", "mlp_hidden"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def graph_dim(self) -> int:
        return self.heads * self.head_dim


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    r = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-r, r, size=shape)


def iseor_shapes(cfg: StudentConfig) -> dict[str, tuple[int, ...]]:
    shapes = {}
    for d in ("fw", "bw"):
        shapes[f"lstm_{d}.Wx"] = (cfg.embed_dim, 4 * cfg.hidden)
        shapes[f"lstm_{d}.Wh"] = (cfg.hidden, 4 * cfg.hidden)
        shapes[f"lstm_{d}.b"] = (4 * cfg.hidden,)
    shapes["proj.W"] = (2 * cfg.hidden, cfg.feature_dim)
    shapes["proj.b"] = (cfg.feature_dim,)
    return shapes


def gfeor_shapes(cfg: StudentConfig) -> dict[str, tuple[int, ...]]:
    k, dh = cfg.heads, cfg.head_dim
    return {
        "gat.W": (k, cfg.feature_dim, dh),
        "gat.a_src": (k, dh),
        "gat.a_dst": (k, dh),
        "mlp.W1": (cfg.graph_dim, cfg.mlp_hidden),
        "mlp.b1": (cfg.mlp_hidden,),
        "mlp.W2": (cfg.mlp_hidden,),
        "mlp.b2": (),
    }


def _init(shapes: dict[str, tuple[int, ...]], rng: np.random.Generator) -> Params:
    params = {}
    for name, shape in shapes.items():
        if name.endswith((".b", ".b1", ".b2")):
            params[name] = np.zeros(shape)
        elif name.startswith("gat.a_"):
            params[name] = _uniform(rng, shape, shape[-1])
        elif name == "gat.W":
            params[name] = _uniform(rng, shape, shape[1])
        else:
            params[name] = _uniform(rng, shape, shape[0])
    return params


def init_iseor(cfg: StudentConfig, rng: np.random.Generator) -> Params:
    return _init(iseor_shapes(cfg), rng)


def init_gfeor(cfg: StudentConfig, rng: np.random.Generator) -> Params:
    return _init(gfeor_shapes(cfg), rng)


# -- Stage A: Bi-LSTM ---------------------------------------------------------


def _lstm_dir(x: np.ndarray, p: Params, prefix: str):
    xw = x @ p[f"{prefix}.Wx"] + p[f"{prefix}.b"]
    hs, cs, gates = lstm_seq_forward(np.ascontiguousarray(xw), p[f"{prefix}.Wh"])
    return hs, cs, gates


def _lstm_dir_backward(dh: np.ndarray, x: np.ndarray, cache, p: Params, prefix: str, grads: Params):
    hs, cs, gates = cache
    wh = p[f"{prefix}.Wh"]
    dz = lstm_seq_backward(np.ascontiguousarray(dh), hs, cs, gates, np.ascontiguousarray(wh.T))
    grads[f"{prefix}.Wx"] = x.T @ dz
    grads[f"{prefix}.Wh"] = hs[:-1].T @ dz
    grads[f"{prefix}.b"] = dz.sum(axis=0)
    return dz @ p[f"{prefix}.Wx"].T


def iseor_forward(x: np.ndarray, p: Params):
    """Sequence features (n, D) for block embeddings ``x`` (n, D_e)."""
    n = x.shape[0]
    feature_dim = p["proj.b"].shape[0]
    if n == 0:
        return np.zeros((0, feature_dim)), None
    x_rev = np.ascontiguousarray(x[::-1])
    fw = _lstm_dir(x, p, "lstm_fw")
    bw = _lstm_dir(x_rev, p, "lstm_bw")
    h_cat = np.concatenate([fw[0][1:], bw[0][1:][::-1]], axis=1)
    out = h_cat @ p["proj.W"] + p["proj.b"]
    return out, (x, x_rev, fw, bw, h_cat)


def iseor_backward(d_out: np.ndarray, cache, p: Params) -> tuple[Params, np.ndarray]:
    x, x_rev, fw, bw, h_cat = cache
    hidden = p["lstm_fw.Wh"].shape[0]
    grads: Params = {"proj.W": h_cat.T @ d_out, "proj.b": d_out.sum(axis=0)}
    d_cat = d_out @ p["proj.W"].T
    dx = _lstm_dir_backward(d_cat[:, :hidden], x, fw, p, "lstm_fw", grads)
    dx_rev = _lstm_dir_backward(d_cat[:, hidden:][::-1], x_rev, bw, p, "lstm_bw", grads)
    return grads, dx + dx_rev[::-1]


def noise_loss(h_p: np.ndarray, h_s: np.ndarray) -> float:
    """Mean over nodes of the squared Euclidean distance."""
    if h_p.shape != h_s.shape:
        raise ValueError(f"shape mismatch: {h_p.shape} vs {h_s.shape}")
    n = h_p.shape[0]
    if n == 0:
        return 0.0
    return float(np.sum((h_p - h_s) ** 2) / n)


def noise_loss_grad(h_p: np.ndarray, h_s: np.ndarray) -> np.ndarray:
    """Gradient of :func:`noise_loss` w.r.t. ``h_s``."""
    if h_p.shape != h_s.shape:
        raise ValueError(f"shape mismatch: {h_p.shape} vs {h_s.shape}")
    return 2.0 * (h_s - h_p) / max(h_p.shape[0], 1)


# -- Stage B: GAT + pooling + MLP ----------------------------------------------


def edge_arrays(edges: Iterable[tuple[int, int]], n: int) -> tuple[np.ndarray, np.ndarray]:
    """Source/target arrays of ``edges`` plus one self-loop per node."""
    pairs = {(int(i), int(j)) for i, j in edges}
    for i, j in pairs:
        if not (0 <= i < n and 0 <= j < n):
            raise ValueError(f"edge ({i}, {j}) out of range for {n} nodes")
    pairs.update((i, i) for i in range(n))
    ordered = sorted(pairs, key=lambda e: (e[1], e[0]))
    src = np.array([e[0] for e in ordered], dtype=np.int64)
    dst = np.array([e[1] for e in ordered], dtype=np.int64)
    return src, dst


def _elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def gat_forward(h: np.ndarray, src: np.ndarray, dst: np.ndarray, p: Params, slope: float):
    """Node outputs (n, K*Dh) of one attention layer, and its cache."""
    n = h.shape[0]
    w = p["gat.W"]
    z = np.matmul(h, w)  # (K, n, Dh)
    s_src = np.matmul(z, p["gat.a_src"][:, :, None])[:, :, 0]
    s_dst = np.matmul(z, p["gat.a_dst"][:, :, None])[:, :, 0]
    agg, alpha, raw = gat_attention_forward(z, s_src, s_dst, src, dst, n, slope)
    act = _elu(agg)
    out = act.transpose(1, 0, 2).reshape(n, -1)
    return out, (h, z, agg, alpha, raw, src, dst, slope)


def gat_backward(d_out: np.ndarray, cache, p: Params) -> tuple[Params, np.ndarray]:
    h, z, agg, alpha, raw, src, dst, slope = cache
    n = h.shape[0]
    k, dh = p["gat.a_src"].shape
    d_act = d_out.reshape(n, k, dh).transpose(1, 0, 2)
    d_agg = np.ascontiguousarray(d_act * np.where(agg > 0, 1.0, np.exp(np.minimum(agg, 0.0))))
    d_z, d_s_src, d_s_dst = gat_attention_backward(d_agg, z, alpha, raw, src, dst, n, slope)
    grads = {
        "gat.a_src": np.matmul(d_s_src[:, None, :], z)[:, 0, :],
        "gat.a_dst": np.matmul(d_s_dst[:, None, :], z)[:, 0, :],
    }
    d_z = d_z + d_s_src[:, :, None] * p["gat.a_src"][:, None, :]
    d_z = d_z + d_s_dst[:, :, None] * p["gat.a_dst"][:, None, :]
    grads["gat.W"] = np.matmul(h.T, d_z)
    d_h = np.matmul(d_z, p["gat.W"].transpose(0, 2, 1)).sum(axis=0)
    return grads, d_h


def attention_weights(h: np.ndarray, edges, p: Params, slope: float) -> np.ndarray:
    """Dense (K, n, n) attention matrix; row i spans i's in-neighbours and i."""
    n = h.shape[0]
    src, dst = edge_arrays(edges, n)
    _, cache = gat_forward(h, src, dst, p, slope)
    alpha = cache[3]
    dense = np.zeros((alpha.shape[0], n, n))
    dense[:, dst, src] = alpha
    return dense


def gfeor_forward(h_s: np.ndarray, edges, p: Params, slope: float = 0.2):
    """Graph feature: mean over nodes of the attention-layer output."""
    n = h_s.shape[0]
    if n == 0:
        raise ValueError("cannot pool an empty graph")
    src, dst = edge_arrays(edges, n)
    nodes, gat_cache = gat_forward(h_s, src, dst, p, slope)
    return nodes.mean(axis=0), (n, gat_cache)


def gfeor_backward(d_hg: np.ndarray, cache, p: Params) -> tuple[Params, np.ndarray]:
    n, gat_cache = cache
    d_nodes = np.broadcast_to(d_hg / n, (n, d_hg.shape[0]))
    return gat_backward(d_nodes, gat_cache, p)


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def mlp_forward(h_g: np.ndarray, p: Params):
    """Logit of the classifier head."""
    a = h_g @ p["mlp.W1"] + p["mlp.b1"]
    hidden = np.tanh(a)
    logit = hidden @ p["mlp.W2"] + p["mlp.b2"]
    return logit, (h_g, hidden)


def mlp_backward(d_logit, cache, p: Params) -> tuple[Params, np.ndarray]:
    h_g, hidden = cache
    d_logit = np.asarray(d_logit, dtype=np.float64)
    grads = {
        "mlp.W2": hidden * d_logit,
        "mlp.b2": np.array(d_logit),
    }
    d_a = d_logit * p["mlp.W2"] * (1.0 - hidden**2)
    grads["mlp.W1"] = np.outer(h_g, d_a)
    grads["mlp.b1"] = d_a
    return grads, p["mlp.W1"] @ d_a


def predict(h_g: np.ndarray, p: Params) -> float:
    logit, _ = mlp_forward(h_g, p)
    return float(sigmoid(logit))


# -- checkpoints ---------------------------------------------------------------

CKPT_MAGIC = b"EVMHCKPT"
CKPT_VERSION = 1


def save_checkpoint(path: str | Path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write ``{magic, version, config JSON, named float64 tensors}``."""
    meta = json.dumps(config, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<II", CKPT_VERSION, len(meta)))
        fh.write(meta)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype="<f8", order="C")  # keeps 0-d shapes
            key = name.encode()
            fh.write(struct.pack("<H", len(key)))
            fh.write(key)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if data[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a model checkpoint")
    version, meta_len = struct.unpack_from("<II", data, 8)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    config = json.loads(data[pos : pos + meta_len])
    pos += meta_len
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + klen].decode()
        pos += klen
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(data, "<f8", size, pos).reshape(shape).copy()
        pos += 8 * size
    return config, tensors


def config_dict(cfg: StudentConfig) -> dict:
    return asdict(cfg)
