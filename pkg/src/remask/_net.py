"""Tiny attention trunk shared by the generator and the selector.

Hand-written float64 forward/backward so gradients can be checked against
finite differences. A sequence is N grid tokens (token + position embedding),
one condition-id token, then one token per condition component; the output
head reads the grid rows only.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .grid import MASK, Condition, TokenGrid

LN_EPS = 1e-5


def init_params(
    rng: np.random.Generator,
    *,
    n_cells: int,
    codebook_size: int,
    n_conditions: int,
    n_components: int,
    d_model: int,
    n_heads: int,
    n_layers: int,
    out_dim: int,
) -> dict[str, np.ndarray]:
    if d_model % n_heads != 0:
        raise ShapeError(f"d_model={d_model} not divisible by n_heads={n_heads}")
    d = d_model
    scale = 1.0 / np.sqrt(d)
    p: dict[str, np.ndarray] = {}
    p["tok_emb"] = rng.normal(0.0, 0.3, size=(codebook_size + 1, d))
    p["pos_emb"] = rng.normal(0.0, 0.3, size=(n_cells, d))
    p["cond_emb"] = rng.normal(0.0, 0.3, size=(n_conditions + 1, d))  # row 0 = null
    p["comp_emb"] = rng.normal(0.0, 0.3, size=(max(n_components, 1), d))
    for layer in range(n_layers):
        p[f"ln1_g_{layer}"] = np.ones(d)
        p[f"ln1_b_{layer}"] = np.zeros(d)
        for name in ("wq", "wk", "wv", "wo"):
            p[f"{name}_{layer}"] = rng.normal(0.0, scale, size=(d, d))
        p[f"ln2_g_{layer}"] = np.ones(d)
        p[f"ln2_b_{layer}"] = np.zeros(d)
        p[f"w1_{layer}"] = rng.normal(0.0, scale, size=(d, 4 * d))
        p[f"b1_{layer}"] = np.zeros(4 * d)
        p[f"w2_{layer}"] = rng.normal(0.0, scale / 2.0, size=(4 * d, d))
        p[f"b2_{layer}"] = np.zeros(d)
    p["lnf_g"] = np.ones(d)
    p["lnf_b"] = np.zeros(d)
    p["head_w"] = np.zeros((d, out_dim))  # zero head => uniform / 0.5 outputs at init
    p["head_b"] = np.zeros(out_dim)
    return p


def _layer_norm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    sigma = np.sqrt(var + LN_EPS)
    xhat = (x - mu) / sigma
    return xhat * g + b, (xhat, sigma, g)


def _layer_norm_backward(dy, ctx):
    xhat, sigma, g = ctx
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    ) / sigma
    return dx, dg, db


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def embed_sequence(params, cells: np.ndarray, cond: Condition | None, cond_row: int, comp_rows):
    """Input embeddings: grid rows, condition-id row, component rows."""
    n = cells.shape[0]
    tok_rows = np.where(cells == MASK, params["tok_emb"].shape[0] - 1, cells)
    x_grid = params["tok_emb"][tok_rows] + params["pos_emb"][:n]
    parts = [x_grid, params["cond_emb"][cond_row][None, :]]
    if comp_rows:
        parts.append(params["comp_emb"][np.asarray(comp_rows)])
    x = np.concatenate(parts, axis=0)
    return x, tok_rows


def forward_seq(params, x: np.ndarray, n_layers: int, n_heads: int):
    """Trunk forward; returns (z, logits, cache)."""
    d = x.shape[1]
    dh = d // n_heads
    n_seq = x.shape[0]
    cache = {"x0": x, "layers": [], "n_heads": n_heads, "dh": dh, "n_seq": n_seq}
    for layer in range(n_layers):
        a, ln1_ctx = _layer_norm(x, params[f"ln1_g_{layer}"], params[f"ln1_b_{layer}"])
        q = a @ params[f"wq_{layer}"]
        k = a @ params[f"wk_{layer}"]
        v = a @ params[f"wv_{layer}"]
        qh = q.reshape(n_seq, n_heads, dh).transpose(1, 0, 2)
        kh = k.reshape(n_seq, n_heads, dh).transpose(1, 0, 2)
        vh = v.reshape(n_seq, n_heads, dh).transpose(1, 0, 2)
        scores = qh @ kh.transpose(0, 2, 1) / np.sqrt(dh)
        attn = _softmax(scores)
        ctx = attn @ vh
        ctx_flat = ctx.transpose(1, 0, 2).reshape(n_seq, d)
        attn_out = ctx_flat @ params[f"wo_{layer}"]
        x_attn = x + attn_out
        m, ln2_ctx = _layer_norm(x_attn, params[f"ln2_g_{layer}"], params[f"ln2_b_{layer}"])
        u = m @ params[f"w1_{layer}"] + params[f"b1_{layer}"]
        r = np.maximum(u, 0.0)
        f = r @ params[f"w2_{layer}"] + params[f"b2_{layer}"]
        x_out = x_attn + f
        cache["layers"].append(
            {
                "a": a, "ln1": ln1_ctx, "qh": qh, "kh": kh, "vh": vh,
                "attn": attn, "ctx_flat": ctx_flat, "x_in": x, "x_attn": x_attn,
                "m": m, "ln2": ln2_ctx, "u": u, "r": r,
            }
        )
        x = x_out
    z, lnf_ctx = _layer_norm(x, params["lnf_g"], params["lnf_b"])
    cache["x_final"] = x
    cache["lnf"] = lnf_ctx
    cache["z"] = z
    return z, cache


def backward_seq(params, cache, dz, n_layers: int, grads: dict[str, np.ndarray]):
    """Backprop through the trunk given dL/dz; accumulates into grads, returns dx0."""
    n_heads = cache["n_heads"]
    dh = cache["dh"]
    n_seq = cache["n_seq"]
    d = dz.shape[1]
    dx, dg, db = _layer_norm_backward(dz, cache["lnf"])
    grads["lnf_g"] += dg
    grads["lnf_b"] += db
    for layer in range(n_layers - 1, -1, -1):
        c = cache["layers"][layer]
        # feed-forward
        df = dx
        grads[f"w2_{layer}"] += c["r"].T @ df
        grads[f"b2_{layer}"] += df.sum(axis=0)
        dr = df @ params[f"w2_{layer}"].T
        du = dr * (c["u"] > 0.0)
        grads[f"w1_{layer}"] += c["m"].T @ du
        grads[f"b1_{layer}"] += du.sum(axis=0)
        dm = du @ params[f"w1_{layer}"].T
        dxa, dg2, db2 = _layer_norm_backward(dm, c["ln2"])
        grads[f"ln2_g_{layer}"] += dg2
        grads[f"ln2_b_{layer}"] += db2
        dx_attn = dx + dxa
        # attention
        dattn_out = dx_attn
        grads[f"wo_{layer}"] += c["ctx_flat"].T @ dattn_out
        dctx_flat = dattn_out @ params[f"wo_{layer}"].T
        dctx = dctx_flat.reshape(n_seq, n_heads, dh).transpose(1, 0, 2)
        dP = dctx @ c["vh"].transpose(0, 2, 1)
        dvh = c["attn"].transpose(0, 2, 1) @ dctx
        attn = c["attn"]
        dS = attn * (dP - (dP * attn).sum(axis=-1, keepdims=True))
        dS = dS / np.sqrt(dh)
        dqh = dS @ c["kh"]
        dkh = dS.transpose(0, 2, 1) @ c["qh"]
        dq = dqh.transpose(1, 0, 2).reshape(n_seq, d)
        dk = dkh.transpose(1, 0, 2).reshape(n_seq, d)
        dv = dvh.transpose(1, 0, 2).reshape(n_seq, d)
        a = c["a"]
        grads[f"wq_{layer}"] += a.T @ dq
        grads[f"wk_{layer}"] += a.T @ dk
        grads[f"wv_{layer}"] += a.T @ dv
        da = dq @ params[f"wq_{layer}"].T + dk @ params[f"wk_{layer}"].T + dv @ params[f"wv_{layer}"].T
        dxi, dg1, db1 = _layer_norm_backward(da, c["ln1"])
        grads[f"ln1_g_{layer}"] += dg1
        grads[f"ln1_b_{layer}"] += db1
        dx = dx_attn + dxi
    return dx


def scatter_embedding_grads(grads, dx0, tok_rows, n_cells, cond_row, comp_rows):
    np.add.at(grads["tok_emb"], tok_rows, dx0[:n_cells])
    grads["pos_emb"][:n_cells] += dx0[:n_cells]
    grads["cond_emb"][cond_row] += dx0[n_cells]
    for offset, row in enumerate(comp_rows):
        grads["comp_emb"][row] += dx0[n_cells + 1 + offset]


def zero_grads(params) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(value) for name, value in params.items()}


def sgd_momentum_step(params, grads, velocity, lr: float, momentum: float):
    for name, g in grads.items():
        velocity[name] = momentum * velocity[name] - lr * g
        params[name] += velocity[name]


def self_attention_map(q_heads, k_heads, kind: str = "sigmoid") -> np.ndarray:
    """Per-location attention scalar map in [0, 1].

    ``sigmoid`` (default): elementwise sigmoid of Q K^T / sqrt(d_head), mean
    over the key axis, then global average pooling over heads. ``softmax``:
    softmax over keys, mean of the attention *received* by each location
    (mean over queries), then head pooling.
    """
    q = np.asarray(q_heads, dtype=np.float64)
    k = np.asarray(k_heads, dtype=np.float64)
    if q.ndim == 2:
        q = q[None]
    if k.ndim == 2:
        k = k[None]
    if q.shape != k.shape:
        raise ShapeError(f"Q and K shapes differ: {q.shape} vs {k.shape}")
    dh = q.shape[-1]
    scores = q @ k.transpose(0, 2, 1) / np.sqrt(dh)
    if kind == "sigmoid":
        per_head = 1.0 / (1.0 + np.exp(-scores))
        per_loc = per_head.mean(axis=2)  # mean over keys
    elif kind == "softmax":
        per_head = _softmax(scores)
        per_loc = per_head.mean(axis=1)  # attention received: mean over queries
    else:
        raise ValueError(f"unknown attention map kind {kind!r}")
    return per_loc.mean(axis=0)  # GAP over heads


def grid_cells(grid: TokenGrid, n_cells: int, height: int, width: int) -> np.ndarray:
    if grid.height != height or grid.width != width:
        raise ShapeError(
            f"grid is {grid.height}x{grid.width}, model expects {height}x{width}"
        )
    return grid.cells
