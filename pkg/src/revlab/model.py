"""A small decoder-only transformer in float64 numpy, with exact gradients.

The network is pre-norm: token embedding (plus a learned absolute position
row when ``pos_mode == "learned_absolute"``), ``n_layers`` blocks of
multi-head attention and a GELU MLP, a final LayerNorm and an unembedding
``W`` (or ``E`` itself when embeddings are tied).

Two evaluation directions are supported.

``standard``
    causal mask, slot ``j`` carries position ``j``, row ``k`` predicts the
    token in slot ``k + 1``.
``mirror``
    anti-causal mask (a slot attends to itself and later slots), slot ``j``
    carries position ``m - 1 - j``, row ``k`` predicts the token in slot
    ``k - 1``. Rotary phases use the descending positions, relative biases
    use the (negated) key-minus-query offsets, and the absolute table is
    addressed through the index reversal ``max_len - 1 - position``.

Run in mirror mode on a reversed sequence, the network reproduces the
standard computation on the original sequence slot for slot, except that
the absolute table is read back to front. The ``reparam`` flip undoes that.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .tokenizer import OutOfAlphabetError, encode

POS_MODES = ("rotary", "relative_bias", "learned_absolute")
DIRECTIONS = ("standard", "mirror")
LN_EPS = 1e-5
ROPE_BASE = 10000.0
_GELU_C = math.sqrt(2.0 / math.pi)

Params = dict[str, np.ndarray]


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int = 64
    n_heads: int = 2
    n_layers: int = 2
    max_len: int = 128
    pos_mode: str = "rotary"
    tie_embeddings: bool = False

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_heads", "n_layers", "max_len"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v <= 0:
                raise ModelError(f"{name} must be a positive integer, got {v!r}")
        if self.d_model % 2:
            raise ModelError(f"d_model must be even, got {self.d_model}")
        if self.d_model % self.n_heads:
            raise ModelError(f"n_heads={self.n_heads} does not divide d_model={self.d_model}")
        if self.pos_mode not in POS_MODES:
            raise ModelError(f"pos_mode must be one of {POS_MODES}, got {self.pos_mode!r}")
        if self.pos_mode == "rotary" and self.head_dim % 2:
            raise ModelError(f"rotary encoding needs an even head dimension, got {self.head_dim}")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def d_mlp(self) -> int:
        return 4 * self.d_model

    def replace(self, **kw) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **kw})

    def to_dict(self) -> dict:
        return asdict(self)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, v = cfg.d_model, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {"E": (v, d)}
    if not cfg.tie_embeddings:
        shapes["W"] = (v, d)
    if cfg.pos_mode == "learned_absolute":
        shapes["P"] = (cfg.max_len, d)
    if cfg.pos_mode == "relative_bias":
        shapes["rel_bias"] = (cfg.n_heads, 2 * cfg.max_len + 1)
    for layer in range(cfg.n_layers):
        pre = f"blocks.{layer}."
        shapes[pre + "ln1.g"] = (d,)
        shapes[pre + "ln1.b"] = (d,)
        for w in ("wq", "wk", "wv", "wo"):
            shapes[pre + "attn." + w] = (d, d)
        shapes[pre + "ln2.g"] = (d,)
        shapes[pre + "ln2.b"] = (d,)
        shapes[pre + "mlp.w1"] = (d, cfg.d_mlp)
        shapes[pre + "mlp.b1"] = (cfg.d_mlp,)
        shapes[pre + "mlp.w2"] = (cfg.d_mlp, d)
        shapes[pre + "mlp.b2"] = (d,)
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    return shapes


def _init_range(name: str, shape) -> tuple[float, float]:
    """(center, half-width) of the uniform draw for one tensor."""
    leaf = name.rsplit(".", 1)[-1]
    if name in ("E", "P"):
        return 0.0, 1.0
    if name == "rel_bias":
        return 0.0, 1.0
    if leaf == "g":
        return 1.0, 0.1
    if leaf in ("b", "b1", "b2"):
        return 0.0, 0.1
    # W and block matrices: 1/sqrt(fan_in)
    return 0.0, 1.0 / math.sqrt(shape[-1] if name == "W" else shape[0])


def init_params(cfg: ModelConfig, seed: int) -> Params:
    """Scaled-uniform initialization, drawn tensor by tensor in a fixed order."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        center, half = _init_range(name, shape)
        params[name] = center + rng.uniform(-half, half, size=shape)
    return params


def zero_params(cfg: ModelConfig) -> Params:
    """All-zero weights (unit LayerNorm gains); every output row is uniform."""
    params = {name: np.zeros(shape) for name, shape in param_shapes(cfg).items()}
    for name in params:
        if name.endswith(".g"):
            params[name][:] = 1.0
    return params


def check_params(params: Params, cfg: ModelConfig) -> None:
    shapes = param_shapes(cfg)
    if set(params) != set(shapes):
        missing = sorted(set(shapes) - set(params))
        extra = sorted(set(params) - set(shapes))
        raise ModelError(f"parameter names do not match config (missing {missing}, unexpected {extra})")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ModelError(f"{name} has shape {params[name].shape}, expected {shape}")
        if not np.all(np.isfinite(params[name])):
            raise ModelError(f"{name} has non-finite entries")


def copy_params(params: Params) -> Params:
    return {k: v.copy() for k, v in params.items()}


# --------------------------------------------------------------------------
# building blocks
# --------------------------------------------------------------------------


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd)


def _layernorm_back(dy, g, cache):
    xhat, rstd = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dg, db


def _gelu(u):
    t = np.tanh(_GELU_C * (u + 0.044715 * u**3))
    return 0.5 * u * (1.0 + t), t


def _gelu_back(du_out, u, t):
    dt = _GELU_C * (1.0 + 3 * 0.044715 * u * u)
    return du_out * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dt)


def _rope_tables(pos: np.ndarray, head_dim: int):
    inv = ROPE_BASE ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = pos[:, None].astype(np.float64) * inv[None, :]
    return np.cos(ang), np.sin(ang)


def _rope(x, cos, sin, inverse=False):
    """Rotate interleaved (even, odd) pairs of the last axis; x is (H, m, dh)."""
    if inverse:
        sin = -sin
    x1 = x[..., 0::2]
    x2 = x[..., 1::2]
    out = np.empty_like(x)
    out[..., 0::2] = x1 * cos - x2 * sin
    out[..., 1::2] = x1 * sin + x2 * cos
    return out


def _logsumexp_rows(x):
    """Max-shifted logsumexp per row, summing left to right."""
    mx = x.max(axis=-1, keepdims=True)
    s = np.cumsum(np.exp(x - mx), axis=-1)[..., -1:]
    return mx + np.log(s)


def _layout(cfg: ModelConfig, m: int, direction: str):
    slots = np.arange(m)
    if direction == "standard":
        pos = slots
        allowed = slots[None, :] <= slots[:, None]
    elif direction == "mirror":
        pos = m - 1 - slots
        allowed = slots[None, :] >= slots[:, None]
    else:
        raise ModelError(f"direction must be one of {DIRECTIONS}, got {direction!r}")
    return pos, allowed


def prediction_slots(z: Sequence[int], direction: str) -> tuple[np.ndarray, np.ndarray]:
    """(rows that make a prediction, their target token ids)."""
    z = np.asarray(z, dtype=np.int64)
    m = len(z)
    if direction == "standard":
        return np.arange(0, m - 1), z[1:]
    if direction == "mirror":
        return np.arange(1, m), z[:-1]
    raise ModelError(f"direction must be one of {DIRECTIONS}, got {direction!r}")


def _validate_seq(cfg: ModelConfig, z) -> np.ndarray:
    z = np.asarray(z, dtype=np.int64)
    if z.ndim != 1 or len(z) < 1:
        raise ModelError("sequence must have at least one token")
    if len(z) > cfg.max_len:
        raise ModelError(f"sequence length {len(z)} exceeds max_len {cfg.max_len}")
    if z.min() < 0 or z.max() >= cfg.vocab_size:
        bad = int(z[(z < 0) | (z >= cfg.vocab_size)][0])
        raise ModelError(f"token id {bad} is outside [0, {cfg.vocab_size})")
    return z


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------


def _forward(params: Params, cfg: ModelConfig, z: np.ndarray, direction: str, keep: bool):
    m = len(z)
    H, dh = cfg.n_heads, cfg.head_dim
    pos, allowed = _layout(cfg, m, direction)
    cache = {"z": z, "pos": pos, "allowed": allowed, "layers": []}

    x = params["E"][z]
    if cfg.pos_mode == "learned_absolute":
        abs_idx = cfg.max_len - 1 - pos if direction == "mirror" else pos
        x = x + params["P"][abs_idx]
        cache["abs_idx"] = abs_idx
    if cfg.pos_mode == "rotary":
        cos, sin = _rope_tables(pos, dh)
        cache["rope"] = (cos, sin)
    if cfg.pos_mode == "relative_bias":
        offsets = np.clip(pos[None, :] - pos[:, None], -cfg.max_len, cfg.max_len) + cfg.max_len
        bias = params["rel_bias"][:, offsets]
        cache["rel_idx"] = offsets

    scale = 1.0 / math.sqrt(dh)
    for layer in range(cfg.n_layers):
        pre = f"blocks.{layer}."
        lc = {}
        a, lc["ln1"] = _layernorm(x, params[pre + "ln1.g"], params[pre + "ln1.b"])
        q = (a @ params[pre + "attn.wq"]).reshape(m, H, dh).transpose(1, 0, 2)
        k = (a @ params[pre + "attn.wk"]).reshape(m, H, dh).transpose(1, 0, 2)
        v = (a @ params[pre + "attn.wv"]).reshape(m, H, dh).transpose(1, 0, 2)
        if cfg.pos_mode == "rotary":
            q = _rope(q, cos, sin)
            k = _rope(k, cos, sin)
        s = (q @ k.transpose(0, 2, 1)) * scale
        if cfg.pos_mode == "relative_bias":
            s = s + bias
        s = np.where(allowed[None], s, -np.inf)
        s = s - s.max(axis=-1, keepdims=True)
        e = np.exp(s)
        att = e / e.sum(axis=-1, keepdims=True)
        o = (att @ v).transpose(1, 0, 2).reshape(m, cfg.d_model)
        x_mid = x + o @ params[pre + "attn.wo"]
        a2, lc["ln2"] = _layernorm(x_mid, params[pre + "ln2.g"], params[pre + "ln2.b"])
        u = a2 @ params[pre + "mlp.w1"] + params[pre + "mlp.b1"]
        hmid, t = _gelu(u)
        x_out = x_mid + hmid @ params[pre + "mlp.w2"] + params[pre + "mlp.b2"]
        if keep:
            lc.update(a=a, q=q, k=k, v=v, att=att, o=o, a2=a2, u=u, t=t, hmid=hmid)
            cache["layers"].append(lc)
        x = x_out

    xf, cache["ln_f"] = _layernorm(x, params["ln_f.g"], params["ln_f.b"])
    w_out = params["E"] if cfg.tie_embeddings else params["W"]
    logits = xf @ w_out.T
    logp = logits - _logsumexp_rows(logits)
    if keep:
        cache["xf"] = xf
    return logp, cache


def _backward(params: Params, cfg: ModelConfig, cache, dlogits: np.ndarray, grads: Params) -> None:
    """Accumulate parameter gradients for upstream gradient ``dlogits`` into ``grads``."""
    z = cache["z"]
    m = len(z)
    H, dh = cfg.n_heads, cfg.head_dim
    scale = 1.0 / math.sqrt(dh)
    out_name = "E" if cfg.tie_embeddings else "W"
    w_out = params[out_name]

    grads[out_name] += dlogits.T @ cache["xf"]
    dxf = dlogits @ w_out
    dx, dg, db = _layernorm_back(dxf, params["ln_f.g"], cache["ln_f"])
    grads["ln_f.g"] += dg
    grads["ln_f.b"] += db

    for layer in reversed(range(cfg.n_layers)):
        pre = f"blocks.{layer}."
        lc = cache["layers"][layer]
        # mlp
        grads[pre + "mlp.b2"] += dx.sum(axis=0)
        grads[pre + "mlp.w2"] += lc["hmid"].T @ dx
        dh_mid = dx @ params[pre + "mlp.w2"].T
        du = _gelu_back(dh_mid, lc["u"], lc["t"])
        grads[pre + "mlp.w1"] += lc["a2"].T @ du
        grads[pre + "mlp.b1"] += du.sum(axis=0)
        da2 = du @ params[pre + "mlp.w1"].T
        dln, dg, db = _layernorm_back(da2, params[pre + "ln2.g"], lc["ln2"])
        grads[pre + "ln2.g"] += dg
        grads[pre + "ln2.b"] += db
        dx = dx + dln
        # attention
        grads[pre + "attn.wo"] += lc["o"].T @ dx
        do = (dx @ params[pre + "attn.wo"].T).reshape(m, H, dh).transpose(1, 0, 2)
        att = lc["att"]
        datt = do @ lc["v"].transpose(0, 2, 1)
        dv = att.transpose(0, 2, 1) @ do
        ds = att * (datt - (datt * att).sum(axis=-1, keepdims=True))
        if cfg.pos_mode == "relative_bias":
            np.add.at(grads["rel_bias"], (slice(None), cache["rel_idx"]), ds)
        dq = (ds @ lc["k"]) * scale
        dk = (ds.transpose(0, 2, 1) @ lc["q"]) * scale
        if cfg.pos_mode == "rotary":
            cos, sin = cache["rope"]
            dq = _rope(dq, cos, sin, inverse=True)
            dk = _rope(dk, cos, sin, inverse=True)
        dq = dq.transpose(1, 0, 2).reshape(m, cfg.d_model)
        dk = dk.transpose(1, 0, 2).reshape(m, cfg.d_model)
        dv = dv.transpose(1, 0, 2).reshape(m, cfg.d_model)
        a = lc["a"]
        grads[pre + "attn.wq"] += a.T @ dq
        grads[pre + "attn.wk"] += a.T @ dk
        grads[pre + "attn.wv"] += a.T @ dv
        da = dq @ params[pre + "attn.wq"].T + dk @ params[pre + "attn.wk"].T + dv @ params[pre + "attn.wv"].T
        dln, dg, db = _layernorm_back(da, params[pre + "ln1.g"], lc["ln1"])
        grads[pre + "ln1.g"] += dg
        grads[pre + "ln1.b"] += db
        dx = dx + dln

    np.add.at(grads["E"], z, dx)
    if cfg.pos_mode == "learned_absolute":
        np.add.at(grads["P"], cache["abs_idx"], dx)


def all_logprobs(params: Params, cfg: ModelConfig, z, direction: str = "standard") -> np.ndarray:
    """Log-probability rows for every slot, including the one with no target."""
    z = _validate_seq(cfg, z)
    logp, _ = _forward(params, cfg, z, direction, keep=False)
    return logp


def forward_logprobs(params: Params, cfg: ModelConfig, z, direction: str = "standard") -> np.ndarray:
    """Next-token (standard) or previous-token (mirror) log-probability rows.

    Returns an array of shape ``(m - 1, vocab_size)``. In standard mode row
    ``k`` is ``log p(. | z[:k+1])`` and predicts ``z[k+1]``; in mirror mode
    row ``k`` comes from slot ``k + 1`` and predicts ``z[k]``.
    """
    z = _validate_seq(cfg, z)
    rows, _ = prediction_slots(z, direction)
    logp, _ = _forward(params, cfg, z, direction, keep=False)
    return logp[rows]


def sequence_nll(params: Params, cfg: ModelConfig, z, direction: str = "standard") -> float:
    if len(z) < 2:
        raise ModelError("nothing to predict: sequence needs at least two tokens")
    lp = forward_logprobs(params, cfg, z, direction)
    _, targets = prediction_slots(z, direction)
    picked = lp[np.arange(len(targets)), targets]
    total = 0.0
    for v in picked:
        total -= float(v)
    return total


def sequence_nll_and_grad(params: Params, cfg: ModelConfig, z, direction: str = "standard", weight: float = 1.0,
                          grads: Params | None = None) -> tuple[float, Params]:
    """NLL of one sequence and ``weight`` times its gradient (accumulated into ``grads``)."""
    z = _validate_seq(cfg, z)
    if len(z) < 2:
        raise ModelError("nothing to predict: sequence needs at least two tokens")
    if grads is None:
        grads = {k: np.zeros_like(v) for k, v in params.items()}
    logp, cache = _forward(params, cfg, z, direction, keep=True)
    rows, targets = prediction_slots(z, direction)
    picked = logp[rows, targets]
    nll = 0.0
    for v in picked:
        nll -= float(v)
    dlogits = np.zeros_like(logp)
    dlogits[rows] = np.exp(logp[rows])
    dlogits[rows, targets] -= 1.0
    _backward(params, cfg, cache, dlogits * weight, grads)
    return nll, grads


def batch_loss_and_grad(params: Params, cfg: ModelConfig, seqs, direction: str = "standard") -> tuple[float, Params]:
    """Mean NLL per predicted token over ``seqs`` and its gradient."""
    n_pred = sum(len(z) - 1 for z in seqs)
    if n_pred <= 0:
        raise ModelError("batch has nothing to predict")
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    total = 0.0
    for z in seqs:
        nll, _ = sequence_nll_and_grad(params, cfg, z, direction, weight=1.0 / n_pred, grads=grads)
        total += nll
    return total / n_pred, grads


def batch_loss(params: Params, cfg: ModelConfig, seqs, direction: str = "standard") -> float:
    n_pred = sum(len(z) - 1 for z in seqs)
    if n_pred <= 0:
        raise ModelError("batch has nothing to predict")
    total = 0.0
    for z in seqs:
        total += sequence_nll(params, cfg, z, direction)
    return total / n_pred


def corpus_nll(params: Params, cfg: ModelConfig, t, d, direction: str = "standard") -> float:
    """Mean per-document NLL over the corpus multiset, in corpus order."""
    nlls = document_nlls(params, cfg, t, d, direction)
    if not nlls:
        raise ModelError("corpus is empty")
    total = 0.0
    for v in nlls:
        total += v
    return total / len(nlls)


def document_nlls(params: Params, cfg: ModelConfig, t, d, direction: str = "standard") -> list[float]:
    out = []
    for i, doc in enumerate(d.docs):
        try:
            z = encode(t, doc)
        except OutOfAlphabetError as exc:
            raise ModelError(f"document {i}: {exc}") from None
        if not 2 <= len(z) <= cfg.max_len:
            raise ModelError(f"document {i} encodes to {len(z)} tokens; need between 2 and {cfg.max_len}")
        out.append(sequence_nll(params, cfg, z, direction))
    return out


# --------------------------------------------------------------------------
# serialization
# --------------------------------------------------------------------------


def save_params(params: Params, cfg: ModelConfig, path: str | Path) -> tuple[Path, Path]:
    """Write ``<path>.bin`` (little-endian float64, tensors back to back) and a JSON sidecar."""
    check_params(params, cfg)
    base = Path(path)
    bin_path = base.with_suffix(".bin")
    meta_path = base.with_suffix(".json")
    tensors = []
    offset = 0
    chunks = []
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        tensors.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += arr.size
        chunks.append(arr.tobytes())
    bin_path.write_bytes(b"".join(chunks))
    meta = {"dtype": "<f8", "config": cfg.to_dict(), "tensors": tensors}
    meta_path.write_text(json.dumps(meta, indent=2), encoding="utf-8")
    return bin_path, meta_path


def load_params(path: str | Path) -> tuple[Params, ModelConfig]:
    base = Path(path)
    meta = json.loads(base.with_suffix(".json").read_text(encoding="utf-8"))
    if meta.get("dtype") != "<f8":
        raise ModelError(f"unsupported dtype {meta.get('dtype')!r}")
    flat = np.frombuffer(base.with_suffix(".bin").read_bytes(), dtype="<f8")
    params = {}
    for t in meta["tensors"]:
        chunk = flat[t["offset"] : t["offset"] + t["count"]]
        params[t["name"]] = chunk.reshape(t["shape"]).astype(np.float64)
    cfg = ModelConfig(**meta["config"])
    check_params(params, cfg)
    return params, cfg
