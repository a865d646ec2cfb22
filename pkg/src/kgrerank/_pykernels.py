"""Pure-numpy implementations of the hot kernels.

Used when the compiled extension is unavailable or ``KGRERANK_PURE=1``.
Signatures and outputs are identical to ``_ckernels``.
"""
import numpy as np


def hinge_rank_batch(p, s, scale):
    """Pairwise hinge between predicted and target scaled scores.

    For every row, sums ``max(0, p_i - p_j)`` over pairs with ``s_i < s_j``
    and multiplies by ``scale``. Returns ``(loss[B], dloss/dp[B, K])``.
    """
    p = np.ascontiguousarray(p, dtype=np.float64)
    s = np.ascontiguousarray(s, dtype=np.float64)
    pairs = s[:, :, None] < s[:, None, :]
    diff = p[:, :, None] - p[:, None, :]
    active = pairs & (diff > 0)
    loss = scale * np.where(active, diff, 0.0).sum(axis=(1, 2))
    act = active.astype(np.float64)
    grad = scale * (act.sum(axis=2) - act.sum(axis=1))
    return loss, grad


def pl_nll_batch(z, order):
    """Plackett-Luce negative log-likelihood of ``order`` under logits ``z``.

    ``order[b, t]`` is the position emitted at slot ``t``. Returns
    ``(nll[B], dnll/dz[B, K])``.
    """
    z = np.ascontiguousarray(z, dtype=np.float64)
    order = np.ascontiguousarray(order, dtype=np.int64)
    B, K = z.shape
    rows = np.arange(B)
    remaining = np.ones((B, K), dtype=bool)
    nll = np.zeros(B)
    grad = np.zeros((B, K))
    for t in range(K):
        masked = np.where(remaining, z, -np.inf)
        top = masked.max(axis=1, keepdims=True)
        ex = np.where(remaining, np.exp(masked - top), 0.0)
        tot = ex.sum(axis=1, keepdims=True)
        lse = top[:, 0] + np.log(tot[:, 0])
        chosen = order[:, t]
        nll += lse - z[rows, chosen]
        grad += ex / tot
        remaining[rows, chosen] = False
    grad -= 1.0
    return nll, grad


def masked_greedy(logits):
    """Sequential argmax over not-yet-emitted positions, ties to lowest index."""
    logits = np.asarray(logits, dtype=np.float64)
    K = logits.shape[0]
    # stable sort on negated logits is the same as repeated masked argmax
    return np.argsort(-logits, kind="stable").astype(np.int64)[:K]


def filtered_ranks(orderings, gold, filt):
    """1-based rank of ``gold[n]`` in ``orderings[n]`` ignoring filtered entities.

    ``filt[n, e]`` is nonzero for known-true entities other than the gold one.
    """
    orderings = np.asarray(orderings, dtype=np.int64)
    gold = np.asarray(gold, dtype=np.int64)
    filt = np.asarray(filt).astype(bool)
    N = orderings.shape[0]
    ranks = np.empty(N, dtype=np.int64)
    for n in range(N):
        pos = np.flatnonzero(orderings[n] == gold[n])
        if pos.size == 0:
            raise ValueError(f"gold entity {gold[n]} missing from ordering {n}")
        ahead = orderings[n, : pos[0]]
        ranks[n] = pos[0] + 1 - int(filt[n, ahead].sum())
    return ranks
