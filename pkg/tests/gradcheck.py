"""Finite-difference gradient checking for small random models."""
import numpy as np

from xlst import model as M
from xlst.corpus import MASK_ID, RESERVED, MaskedBatch

STEP = 1e-5
REL_TOL = 1e-6
MAG_FLOOR = 1e-8


def random_model(rng, scale=0.5):
    """Model with d <= 8, C <= 4, M <= 3, |V| <= 20, plus a batch for each loss."""
    dim = int(rng.integers(2, 9))
    C = int(rng.integers(2, 5))
    n_voters = int(rng.integers(1, 4))
    V = int(rng.integers(len(RESERVED) + 3, 21))
    hidden = M.voter_hidden_sizes(n_voters, int(rng.integers(2, 6)), int(rng.integers(0, 3)))
    vocab = list(RESERVED) + [f"w{i}" for i in range(V - len(RESERVED))]
    params = M.init_params(vocab, dim, C, hidden, int(rng.integers(1 << 30)), scale)
    for name in params.arrays:  # non-zero biases exercise every path
        if name.endswith("b1") or name.endswith("b2") or name == "mlm_bias":
            params.arrays[name] = rng.uniform(-scale, scale, size=params.arrays[name].shape)
    B, L = int(rng.integers(1, 5)), int(rng.integers(2, 7))
    ids = rng.integers(len(RESERVED), V, size=(B, L))
    for b in range(B):  # ragged rows with trailing padding
        ids[b, int(rng.integers(1, L + 1)):] = 0
    labels = rng.integers(0, C, size=B)
    targets = rng.dirichlet(np.ones(C), size=(B, n_voters))
    masked = ids.copy()
    picks = []
    for b in range(B):
        live = np.flatnonzero(ids[b] != 0)
        for pos in rng.choice(live, size=int(rng.integers(1, len(live) + 1)), replace=False):
            picks.append((b, int(pos), int(ids[b, pos])))
            masked[b, pos] = MASK_ID
    batches = {
        "hard": M.ClassBatch(ids, labels=labels),
        "soft": M.ClassBatch(ids, targets=targets),
        "mlm": MaskedBatch(masked, tuple(sorted(picks))),
    }
    return params, batches


def numeric_grad(params, batch, kind, name, index):
    arr = params.arrays[name]
    old = arr[index]
    arr[index] = old + STEP
    up = M.loss_value(params, batch, kind)
    arr[index] = old - STEP
    down = M.loss_value(params, batch, kind)
    arr[index] = old
    return (up - down) / (2 * STEP)


def check_model(params, batches):
    """Compare every gradient entry; returns (n_checked, failures, worst relative error)."""
    checked, failures, worst = 0, [], 0.0
    for kind, batch in batches.items():
        _, grads = M.loss_and_grad(params, batch, kind)
        for name, g in grads.items():
            for index in np.ndindex(g.shape):
                analytic = g[index]
                if abs(analytic) <= MAG_FLOOR:
                    continue
                fd = numeric_grad(params, batch, kind, name, index)
                rel = abs(analytic - fd) / abs(analytic)
                checked += 1
                worst = max(worst, rel)
                if rel > REL_TOL:
                    failures.append((kind, name, index, analytic, fd, rel))
    return checked, failures, worst


def run_suite(n_models=20, seed=0, scale=0.5):
    rng = np.random.default_rng(seed)
    total, all_failures, worst = 0, [], 0.0
    for _ in range(n_models):
        params, batches = random_model(rng, scale)
        n, failures, w = check_model(params, batches)
        total += n
        all_failures += failures
        worst = max(worst, w)
    return total, all_failures, worst


def reference_derivative(params, batch, kind, name, index, dps=40):
    """d(loss)/d(param[index]) from the mpmath reference forward pass."""
    import mpmath as mp

    from oracles import mp_losses

    with mp.workdps(dps):
        arrays = {k: [[mp.mpf(float(v)) for v in row] for row in np.atleast_2d(a)]
                  if a.ndim == 2 else [mp.mpf(float(v)) for v in a]
                  for k, a in params.arrays.items()}
        if kind == "mlm":
            data = (np.asarray(batch.input_ids).tolist(), [tuple(t) for t in batch.targets])
        elif kind == "hard":
            data = (np.asarray(batch.ids).tolist(), [int(y) for y in batch.labels])
        else:
            data = (np.asarray(batch.ids).tolist(), np.asarray(batch.targets).tolist())
        base = arrays[name]
        i, j = (index + (None,))[:2] if len(index) == 1 else index

        def f(value):
            if j is None:
                old = base[i]
                base[i] = value
            else:
                old = base[i][j]
                base[i][j] = value
            try:
                return mp_losses(arrays, params.hidden, data, kind)
            finally:
                if j is None:
                    base[i] = old
                else:
                    base[i][j] = old

        return float(mp.diff(f, mp.mpf(float(params.arrays[name][index]))))
