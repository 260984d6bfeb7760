"""HSTU forward pass, losses and exact manual backpropagation.

All arrays are float64. A batch is right-padded to its longest chunk;
with causal attention padded positions never influence real ones, and
they carry zero loss weight, so their gradients are exactly zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.special import expit, logsumexp

from . import kernels
from .flops import COUNTER
from .model import TIME_BUCKETS, HstuModel, SequenceChunk


class NumericalError(FloatingPointError):
    pass


def silu(x):
    return x * expit(x)


def silu_grad(x):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def time_buckets(ts: np.ndarray) -> np.ndarray:
    """``floor(log2(1 + dt / 60s))`` capped to the bucket table; ``ts`` is ``[..., N]``."""
    dt = np.maximum(ts[..., :, None] - ts[..., None, :], 0)
    b = np.floor(np.log2(1.0 + dt / 60.0))
    return np.minimum(b, TIME_BUCKETS - 1).astype(np.int32)


@dataclass
class Batch:
    users: np.ndarray
    items: np.ndarray
    reasons: np.ndarray
    itypes: np.ndarray
    ts: np.ndarray
    lengths: np.ndarray
    time_bucket: np.ndarray

    @property
    def size(self) -> int:
        return len(self.users)

    @property
    def n(self) -> int:
        return self.items.shape[1]

    def actions(self, num_itype: int) -> np.ndarray:
        return self.reasons * num_itype + self.itypes

    def valid(self) -> np.ndarray:
        """``[B, n]`` mask of positions that have a next-event target."""
        return np.arange(self.n)[None, :] < self.lengths[:, None]


def make_batch(chunks: list[SequenceChunk], max_len: int | None = None) -> Batch:
    if not chunks:
        raise ValueError("empty batch")
    lengths = np.array([len(c) for c in chunks])
    n = int(lengths.max())
    if max_len is not None and n > max_len:
        raise ValueError(f"chunk of {n} events exceeds max_len={max_len}")
    B = len(chunks)
    items = np.zeros((B, n), dtype=np.int64)
    reasons = np.zeros((B, n), dtype=np.int64)
    itypes = np.zeros((B, n), dtype=np.int64)
    ts = np.empty((B, n + 1), dtype=np.int64)
    for b, c in enumerate(chunks):
        m = len(c)
        items[b, :m], reasons[b, :m], itypes[b, :m] = c.items, c.reasons, c.itypes
        ts[b, 0] = c.timestamps[0]
        ts[b, 1:m + 1] = c.timestamps
        ts[b, m + 1:] = c.timestamps[-1]
    users = np.array([c.user for c in chunks], dtype=np.int64)
    return Batch(users, items, reasons, itypes, ts, lengths, time_buckets(ts))


def _check_ids(batch: Batch, model: HstuModel) -> None:
    h = model.hyper
    checks = (("user", batch.users, model.num_users), ("item", batch.items, model.vocab),
              ("reason_end", batch.reasons, h.num_reason), ("interaction_type", batch.itypes, h.num_itype))
    for name, ids, bound in checks:
        if ids.size and (ids.min() < 0 or ids.max() >= bound):
            raise IndexError(f"{name} id out of range [0, {bound}): max={ids.max()}")


def _scatter_rows(idx: np.ndarray, vals: np.ndarray, n_rows: int) -> np.ndarray:
    m = len(idx)
    if m == 0:
        return np.zeros((n_rows, vals.shape[1]))
    sel = sparse.csr_matrix((np.ones(m), (idx, np.arange(m))), shape=(n_rows, m))
    return np.asarray(sel @ vals)


def layer_norm(x, g, b, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xh = xc * rstd
    return xh * g + b, (xh, rstd)


def layer_norm_backward(dy, g, cache):
    xh, rstd = cache
    dxh = dy * g
    dg = (dy * xh).sum(axis=(0, 1))
    db = dy.sum(axis=(0, 1))
    dx = rstd * (dxh - dxh.mean(axis=-1, keepdims=True) - xh * (dxh * xh).mean(axis=-1, keepdims=True))
    return dx, dg, db


# -- forward -----------------------------------------------------------------


def embed_batch(batch: Batch, model: HstuModel) -> np.ndarray:
    _check_ids(batch, model)
    p = model.params
    B, n = batch.items.shape
    E = np.empty((B, n + 1, model.hyper.d))
    E[:, 0] = p["user_emb"][batch.users]
    E[:, 1:] = p["item_emb"][batch.items] + p["reason_emb"][batch.reasons] + p["itype_emb"][batch.itypes]
    COUNTER.add("fwd", 2 * B * n * model.hyper.d)
    return E


def block_forward(X: np.ndarray, batch: Batch, model: HstuModel, l: int):
    """One HSTU block; returns ``(S_hat, cache)`` where ``S_hat`` excludes the residual."""
    p, d = model.params, model.hyper.d
    pre = f"blocks.{l}."
    B, N, _ = X.shape
    if N - 1 > model.hyper.max_len:
        raise ValueError(f"sequence of {N - 1} events exceeds max_len={model.hyper.max_len}")
    F = X @ p[pre + "w1"] + p[pre + "b1"]
    sg = expit(F)
    P = F * sg
    U = P[..., :d]
    V, Q, K = (np.ascontiguousarray(P[..., k * d:(k + 1) * d]) for k in (1, 2, 3))
    Y, S = kernels.attention_forward(Q, K, V, p[pre + "rab_pos"], p[pre + "rab_time"], batch.time_bucket)
    Z, ln = layer_norm(Y, p[pre + "ln_g"], p[pre + "ln_b"], model.hyper.ln_eps)
    G = Z * U
    S_hat = G @ p[pre + "w2"] + p[pre + "b2"]
    if not np.isfinite(S_hat).all():
        raise NumericalError(f"non-finite activation in block {l}")
    COUNTER.add("fwd", B * N * d * 4 * d + 2 * B * N * N * d + B * N * d + B * N * d * d)
    return S_hat, dict(X=X, F=F, sg=sg, U=U, V=V, Q=Q, K=K, S=S, Z=Z, G=G, ln=ln)


@dataclass
class ForwardState:
    E: np.ndarray
    blocks: list
    out: np.ndarray
    H: np.ndarray
    final_ln: tuple


def forward_batch(batch: Batch, model: HstuModel) -> ForwardState:
    E = embed_batch(batch, model)
    X = E
    caches = []
    for l in range(model.hyper.depth):
        S_hat, cache = block_forward(X, batch, model, l)
        caches.append(cache)
        X = X + S_hat if model.hyper.residual else S_hat
    p = model.params
    H, final_ln = layer_norm(X, p["final_ln_g"], p["final_ln_b"], model.hyper.ln_eps)
    return ForwardState(E, caches, X, H, final_ln)


@dataclass
class ForwardOutput:
    hidden: np.ndarray
    item_logits: np.ndarray
    action_logits: np.ndarray


def forward(chunk: SequenceChunk, model: HstuModel) -> ForwardOutput:
    """Hidden states and next-event logits at every position of one chunk.

    Row ``p`` of either logit matrix scores the event at position ``p + 1``.
    """
    st = forward_batch(make_batch([chunk], model.hyper.max_len), model)
    H = st.H[0]
    N, d = H.shape
    COUNTER.add("fwd", N * d * (model.vocab + model.hyper.num_actions))
    return ForwardOutput(H, H @ model.item_head(), H @ model.params["action_head"])


def embed(chunk: SequenceChunk, model: HstuModel) -> np.ndarray:
    return embed_batch(make_batch([chunk], model.hyper.max_len), model)[0]


def hstu_block(X: np.ndarray, timestamps: np.ndarray, model: HstuModel, block_index: int) -> np.ndarray:
    """Apply block ``block_index`` to a single ``[N, d]`` sequence with ``N`` timestamps."""
    ts = np.asarray(timestamps, dtype=np.int64)[None, :]
    if np.any(np.diff(ts) < 0):
        raise ValueError("timestamps must be non-decreasing")
    batch = Batch(np.zeros(1, np.int64), np.zeros((1, X.shape[0] - 1), np.int64), None, None,
                  ts, np.array([X.shape[0] - 1]), time_buckets(ts))
    return block_forward(np.ascontiguousarray(X[None], dtype=np.float64), batch, model, block_index)[0][0]


# -- losses and gradients ------------------------------------------------------


def draw_negatives(rng: np.random.Generator, targets: np.ndarray, vocab: int, k: int) -> np.ndarray:
    """Uniform item ids excluding the aligned target, shape ``targets.shape + (k,)``."""
    if k < 1:
        raise ValueError("negatives must be >= 1")
    if vocab < 2:
        raise ValueError("need at least two items to draw negatives")
    neg = rng.integers(0, vocab - 1, size=targets.shape + (k,))
    return neg + (neg >= targets[..., None])


@dataclass
class LossValue:
    total: float
    item: float
    action: float


def loss_and_grad(batch: Batch, model: HstuModel, *, negatives: np.ndarray | None = None,
                  rng: np.random.Generator | None = None, k: int = 64, final_item: bool = False,
                  need_grad: bool = True, scale: float = 1.0):
    """Loss (and gradient record) for a batch.

    Training mode averages each chunk's per-position sampled-softmax item
    loss and full-softmax action loss, then averages over the batch. In
    ``final_item`` mode the loss is the full-softmax item loss of each
    chunk's last event, summed over the batch so that per-chunk gradients
    stay separable.
    """
    h, p = model.hyper, model.params
    st = forward_batch(batch, model)
    H = st.H
    B, N, d = H.shape
    n = N - 1
    Wi = model.item_head()
    dH = np.zeros_like(H) if need_grad else None
    grads: dict[str, np.ndarray] = {}

    if final_item:
        last = batch.lengths - 1
        tgt = batch.items[np.arange(B), last]
        h_last = H[np.arange(B), last]
        logits = h_last @ Wi
        lse = logsumexp(logits, axis=1)
        ce = lse - logits[np.arange(B), tgt]
        item_loss, action_loss = float(ce.sum()), 0.0
        total = item_loss
        COUNTER.add("fwd", B * d * model.vocab)
        if need_grad:
            dlog = np.exp(logits - lse[:, None])
            dlog[np.arange(B), tgt] -= 1.0
            dlog *= scale
            dH[np.arange(B), last] = dlog @ Wi.T
            dWi = h_last.T @ dlog
            grads["action_head"] = np.zeros_like(p["action_head"])
            COUNTER.add("bwd", 2 * B * d * model.vocab)
    else:
        valid = batch.valid()
        w = valid / batch.lengths[:, None] / B
        tgt = batch.items
        if negatives is None:
            if rng is None:
                raise ValueError("need negatives or an rng to draw them")
            negatives = draw_negatives(rng, tgt, model.vocab, k)
        cand = np.ascontiguousarray(np.concatenate([tgt[..., None], negatives], axis=-1), dtype=np.int64)
        kk = cand.shape[-1]
        WiT = np.ascontiguousarray(Wi.T)
        Hn = H[:, :n]
        logits = kernels.sampled_logits(H, WiT, cand)
        lse = logsumexp(logits, axis=-1)
        ce = lse - logits[..., 0]
        Wa = p["action_head"]
        la = Hn @ Wa
        lse_a = logsumexp(la, axis=-1)
        act = batch.actions(h.num_itype)
        ce_a = lse_a - np.take_along_axis(la, act[..., None], axis=-1)[..., 0]
        item_loss = float((ce * w).sum())
        action_loss = float((ce_a * w).sum())
        total = item_loss + h.action_weight * action_loss
        COUNTER.add("fwd", B * n * kk * d + B * n * d * Wa.shape[1])
        if need_grad:
            dlog = np.exp(logits - lse[..., None])
            dlog[..., 0] -= 1.0
            dlog *= (w * scale)[..., None]
            dla = np.exp(la - lse_a[..., None])
            np.put_along_axis(dla, act[..., None], np.take_along_axis(dla, act[..., None], -1) - 1.0, -1)
            dla *= (w * scale * h.action_weight)[..., None]
            dHn, dWiT = kernels.sampled_backward(dlog, H, WiT, cand, model.vocab)
            dH[:, :n] = dHn + dla @ Wa.T
            dWi = dWiT.T
            grads["action_head"] = Hn.reshape(B * n, d).T @ dla.reshape(B * n, -1)
            COUNTER.add("bwd", 2 * B * n * kk * d + 2 * B * n * d * Wa.shape[1])

    value = LossValue(total * scale, item_loss * scale, action_loss * scale)
    if not np.isfinite(value.total):
        raise NumericalError("non-finite loss")
    if not need_grad:
        return value, None
    grads.update(_backward_trunk(dH, st, batch, model))
    if h.tie_item_head:
        grads["item_emb"] = grads["item_emb"] + dWi.T
    else:
        grads["item_head"] = dWi
    return value, grads


def _backward_trunk(dH, st: ForwardState, batch: Batch, model: HstuModel, stop_block: int | None = None):
    h, p = model.hyper, model.params
    B, N, d = dH.shape
    g: dict[str, np.ndarray] = {}
    dX, g["final_ln_g"], g["final_ln_b"] = layer_norm_backward(dH, p["final_ln_g"], st.final_ln)
    for l in reversed(range(h.depth)):
        c = st.blocks[l]
        pre = f"blocks.{l}."
        dS_hat = dX
        dG = dS_hat @ p[pre + "w2"].T
        g[pre + "w2"] = c["G"].reshape(-1, d).T @ dS_hat.reshape(-1, d)
        g[pre + "b2"] = dS_hat.sum(axis=(0, 1))
        dZ = dG * c["U"]
        dU = dG * c["Z"]
        dY, g[pre + "ln_g"], g[pre + "ln_b"] = layer_norm_backward(dZ, p[pre + "ln_g"], c["ln"])
        dQ, dK, dV, g[pre + "rab_pos"], g[pre + "rab_time"] = kernels.attention_backward(
            np.ascontiguousarray(dY), c["Q"], c["K"], c["V"], c["S"], batch.time_bucket,
            h.max_len + 1, TIME_BUCKETS)
        sg = c["sg"]
        dF = np.concatenate([dU, dV, dQ, dK], axis=-1)
        dF *= sg * (1.0 + c["F"] * (1.0 - sg))
        g[pre + "w1"] = c["X"].reshape(-1, d).T @ dF.reshape(-1, 4 * d)
        g[pre + "b1"] = dF.sum(axis=(0, 1))
        COUNTER.add("bwd", 2 * B * N * d * 4 * d + 4 * B * N * N * d + 2 * B * N * d + 2 * B * N * d * d)
        if stop_block == l:
            g["_dF"] = dF
            return g
        dX_in = dF @ p[pre + "w1"].T
        dX = dX + dX_in if h.residual else dX_in

    dE = dX
    n = batch.n
    valid = batch.valid()
    g["user_emb"] = _scatter_rows(batch.users, dE[:, 0], model.num_users)
    ev = dE[:, 1:][valid]
    g["item_emb"] = _scatter_rows(batch.items[valid], ev, model.vocab)
    g["reason_emb"] = _scatter_rows(batch.reasons[valid], ev, h.num_reason)
    g["itype_emb"] = _scatter_rows(batch.itypes[valid], ev, h.num_itype)
    COUNTER.add("bwd", 3 * int(valid.sum()) * d + B * d)
    return g


def gradsim_vectors(batch: Batch, model: HstuModel) -> np.ndarray:
    """Per-chunk final-item gradient of the last block's ``w1``, mean-pooled over its input axis.

    Returns ``[B, 4d]``.
    """
    h = model.hyper
    if h.depth < 1:
        raise ValueError("gradient representations need at least one block")
    if np.any(batch.lengths < 2):
        raise ValueError("gradient representations need chunks of >= 2 events")
    st = forward_batch(batch, model)
    H = st.H
    B = H.shape[0]
    last = batch.lengths - 1
    tgt = batch.items[np.arange(B), last]
    Wi = model.item_head()
    h_last = H[np.arange(B), last]
    logits = h_last @ Wi
    lse = logsumexp(logits, axis=1)
    dlog = np.exp(logits - lse[:, None])
    dlog[np.arange(B), tgt] -= 1.0
    dH = np.zeros_like(H)
    dH[np.arange(B), last] = dlog @ Wi.T
    COUNTER.add("fwd", B * h.d * model.vocab)
    COUNTER.add("bwd", 2 * B * h.d * model.vocab)
    g = _backward_trunk(dH, st, batch, model, stop_block=h.depth - 1)
    X = st.blocks[-1]["X"]
    return np.einsum("bn,bnk->bk", X.sum(axis=-1), g["_dF"]) / h.d


# -- single-chunk conveniences ---------------------------------------------------


def loss(chunk: SequenceChunk, model: HstuModel, negatives: int, rng: np.random.Generator) -> LossValue:
    batch = make_batch([chunk], model.hyper.max_len)
    return loss_and_grad(batch, model, rng=rng, k=negatives, need_grad=False)[0]


def backward(chunk: SequenceChunk, model: HstuModel, negatives: int, rng: np.random.Generator | None = None,
             final_item: bool = False, scale: float = 1.0) -> dict[str, np.ndarray]:
    batch = make_batch([chunk], model.hyper.max_len)
    return loss_and_grad(batch, model, rng=rng, k=negatives, final_item=final_item, scale=scale)[1]
