"""Pure-NumPy hot kernels: SiLU attention with relative position/time bias
and the sampled-softmax item head.

Reference implementation of what ``_kernels_c`` compiles.
Arrays are batched: ``Q, K, V`` are ``[B, N, d]``, ``time_bucket`` is
``[B, N, N]`` of int32 and the position bucket of ``(i, j)`` is ``i - j``.
Entries with ``j > i`` are masked to zero after the activation.
"""

import numpy as np
from scipy import sparse
from scipy.special import expit


def _causal(n):
    return np.tril(np.ones((n, n), dtype=bool))


def _pos_bucket(n):
    idx = np.arange(n)
    return np.maximum(idx[:, None] - idx[None, :], 0)


def attention_forward(Q, K, V, rab_pos, rab_time, time_bucket):
    """Return ``(Y, S)`` with ``S`` the pre-activation scores."""
    n = Q.shape[1]
    S = Q @ K.transpose(0, 2, 1)
    S += rab_pos[_pos_bucket(n)]
    S += rab_time[time_bucket]
    A = S * expit(S)
    A *= _causal(n)
    return A @ V, S


def attention_backward(dY, Q, K, V, S, time_bucket, n_pos, n_time):
    n = Q.shape[1]
    mask = _causal(n)
    sig = expit(S)
    A = S * sig * mask
    dA = dY @ V.transpose(0, 2, 1)
    dV = A.transpose(0, 2, 1) @ dY
    dS = dA * (sig * (1.0 + S * (1.0 - sig)))
    dS *= mask
    dQ = dS @ K
    dK = dS.transpose(0, 2, 1) @ Q
    d_pos = np.bincount(_pos_bucket(n)[mask], weights=dS.sum(axis=0)[mask], minlength=n_pos)
    d_time = np.bincount(time_bucket.ravel(), weights=dS.ravel(), minlength=n_time)
    return dQ, dK, dV, d_pos[:n_pos], d_time[:n_time]


def sampled_logits(H, WT, cand):
    n = cand.shape[1]
    return np.einsum("bpd,bpcd->bpc", H[:, :n], WT[cand])


def sampled_backward(dlog, H, WT, cand, vocab):
    B, n, C = cand.shape
    d = H.shape[2]
    dH = np.einsum("bpc,bpcd->bpd", dlog, WT[cand])
    rows = np.repeat(np.arange(B * n), C)
    sel = sparse.csr_matrix((dlog.ravel(), (cand.ravel(), rows)), shape=(vocab, B * n))
    dW = np.asarray(sel @ np.ascontiguousarray(H[:, :n]).reshape(B * n, d))
    return dH, dW
