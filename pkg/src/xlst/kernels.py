"""Embedding-bag kernels with an import-time backend choice.

``bag_forward(emb, ids, weights)`` returns ``sum_l weights[b, l] * emb[ids[b, l]]``
per row ``b``; ``bag_backward`` is its adjoint with respect to ``emb``.
Both backends accumulate in the same (row, position) order, so results are
bit-identical.
"""
import numpy as np

from . import _pykernels

try:
    from . import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKEND = "compiled" if _ckernels is not None else "python"
_impl = _ckernels if _ckernels is not None else _pykernels


def available_backends():
    return ["compiled", "python"] if _ckernels is not None else ["python"]


def use_backend(name):
    """Switch the active backend ("compiled" or "python")."""
    global BACKEND, _impl
    if name == "compiled":
        if _ckernels is None:
            raise RuntimeError("compiled kernels are not built")
        _impl = _ckernels
    elif name == "python":
        _impl = _pykernels
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = name


def _prep(ids, weights):
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    weights = np.ascontiguousarray(weights, dtype=np.float64)
    if ids.shape != weights.shape or ids.ndim != 2:
        raise ValueError(f"ids {ids.shape} and weights {weights.shape} must be equal 2-D shapes")
    return ids, weights


def bag_forward(emb, ids, weights):
    ids, weights = _prep(ids, weights)
    return _impl.bag_forward(np.ascontiguousarray(emb, dtype=np.float64), ids, weights)


def bag_backward(grad_out, ids, weights, vocab_size):
    ids, weights = _prep(ids, weights)
    return _impl.bag_backward(np.ascontiguousarray(grad_out, dtype=np.float64), ids, weights,
                              int(vocab_size))
