"""Pure numpy embedding-bag kernels (fallback for the compiled extension)."""
import numpy as np


def bag_forward(emb, ids, weights):
    # sequential over positions so the summation order matches the compiled kernel
    B, L = ids.shape
    out = np.zeros((B, emb.shape[1]), dtype=np.float64)
    for pos in range(L):
        w = weights[:, pos]
        live = w != 0.0
        if live.any():
            out[live] += w[live, None] * emb[ids[live, pos]]
    return out


def bag_backward(grad_out, ids, weights, vocab_size):
    out = np.zeros((vocab_size, grad_out.shape[1]), dtype=np.float64)
    live = weights != 0.0
    b_idx, _ = np.nonzero(live)
    contrib = weights[live][:, None] * grad_out[b_idx]
    np.add.at(out, ids[live], contrib)
    return out
