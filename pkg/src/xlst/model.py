"""Toy differentiable classifier: mean-of-embeddings encoder, MLM head and an
ensemble of small tanh voter networks, with exact gradients, AdamW and
checksummed checkpoints."""
from __future__ import annotations

import base64
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .corpus import MASK_ID, PAD_ID, MaskedBatch

FORMAT_VERSION = 1


class NumericError(FloatingPointError):
    """A non-finite value appeared in a forward or backward pass."""


class CheckpointError(ValueError):
    """Unreadable, corrupted or incompatible checkpoint."""


@dataclass
class ModelParams:
    """Named float64 arrays plus the vocabulary they index.

    Keys: ``embeddings`` (V, d), ``mlm_proj`` (d, V), ``mlm_bias`` (V,), and per
    voter ``voter{i}.W1`` (h_i, d), ``.b1`` (h_i,), ``.W2`` (C, h_i), ``.b2`` (C,).
    """
    arrays: dict[str, np.ndarray]
    vocab: list[str]
    num_classes: int
    hidden: tuple[int, ...]

    @property
    def dim(self):
        return self.arrays["embeddings"].shape[1]

    @property
    def num_voters(self):
        return len(self.hidden)

    @property
    def vocab_size(self):
        return len(self.vocab)

    def voter(self, i):
        a = self.arrays
        p = f"voter{i}."
        return a[p + "W1"], a[p + "b1"], a[p + "W2"], a[p + "b2"]

    def copy(self):
        return ModelParams({k: v.copy() for k, v in self.arrays.items()}, list(self.vocab),
                           self.num_classes, tuple(self.hidden))

    def fingerprint(self):
        """SHA-256 over names, shapes and raw bytes of every array."""
        h = hashlib.sha256()
        for name in sorted(self.arrays):
            arr = np.ascontiguousarray(self.arrays[name], dtype="<f8")
            h.update(name.encode())
            h.update(repr(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def check(self):
        if self.num_voters < 1:
            raise ValueError("need at least one voter")
        for name, arr in self.arrays.items():
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"parameter {name} has non-finite entries")
        for i in range(self.num_voters):
            if self.voter(i)[3].shape != (self.num_classes,):
                raise ValueError(f"voter {i} output size differs from {self.num_classes} classes")


ENCODER_KEYS = ("embeddings", "mlm_proj", "mlm_bias")


def voter_hidden_sizes(num_voters, base_hidden=32, hidden_step=4):
    return tuple(base_hidden + i * hidden_step for i in range(num_voters))


def init_voters(dim, num_classes, hidden, rng, scale=0.05):
    arrays = {}
    for i, h in enumerate(hidden):
        arrays[f"voter{i}.W1"] = rng.uniform(-scale, scale, size=(h, dim))
        arrays[f"voter{i}.b1"] = np.zeros(h)
        arrays[f"voter{i}.W2"] = rng.uniform(-scale, scale, size=(num_classes, h))
        arrays[f"voter{i}.b2"] = np.zeros(num_classes)
    return arrays


def init_params(vocab, dim, num_classes, hidden, seed, scale=0.05):
    """Uniform(-scale, scale) weights from a seeded generator, zero biases."""
    rng = np.random.default_rng(seed)
    tokens = list(vocab.tokens) if hasattr(vocab, "tokens") else list(vocab)
    V = len(tokens)
    arrays = {
        "embeddings": rng.uniform(-scale, scale, size=(V, dim)),
        "mlm_proj": rng.uniform(-scale, scale, size=(dim, V)),
        "mlm_bias": np.zeros(V),
    }
    arrays.update(init_voters(dim, num_classes, hidden, rng, scale))
    return ModelParams(arrays, tokens, num_classes, tuple(hidden))


def with_fresh_voters(params, seed, scale=0.05):
    """Copy of ``params`` keeping the encoder and MLM head, re-initialising the voters."""
    out = params.copy()
    rng = np.random.default_rng(seed)
    out.arrays.update(init_voters(params.dim, params.num_classes, params.hidden, rng, scale))
    return out


# --------------------------------------------------------------------------
# forward pieces

def _finite(name, arr):
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")
    return arr


def bag_weights(ids, exclude_mask=False):
    """Per-position weights 1/count over non-PAD (and optionally non-MASK) tokens.

    Rows with no counted token get all-zero weights.
    """
    keep = ids != PAD_ID
    if exclude_mask:
        keep &= ids != MASK_ID
    counts = keep.sum(axis=1, keepdims=True)
    with np.errstate(divide="ignore", invalid="ignore"):
        w = np.where(keep, 1.0 / np.maximum(counts, 1), 0.0)
    return w


def encode(params, ids):
    """Mean embedding of the non-PAD tokens of one id sequence (or each row of a matrix)."""
    ids = np.asarray(ids, dtype=np.int64)
    single = ids.ndim == 1
    ids2 = ids[None, :] if single else ids
    if ids2.shape[1] == 0 or np.any((ids2 != PAD_ID).sum(axis=1) == 0):
        raise ValueError("cannot encode a sequence made only of [PAD]")
    out = kernels.bag_forward(params.arrays["embeddings"], ids2, bag_weights(ids2))
    return out[0] if single else out


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def _voter_logits(params, x):
    """x: (B, d). Returns per-voter hidden activations and logits (B, M, C)."""
    acts, logits = [], []
    for i in range(params.num_voters):
        W1, b1, W2, b2 = params.voter(i)
        a = np.tanh(x @ W1.T + b1)
        acts.append(a)
        logits.append(a @ W2.T + b2)
    return acts, np.stack(logits, axis=1)


def voters_forward(params, feature):
    """Voter distributions for a feature vector (d,) -> (M, C), or batch (B, d) -> (B, M, C)."""
    x = np.asarray(feature, dtype=np.float64)
    single = x.ndim == 1
    _, logits = _voter_logits(params, x[None, :] if single else x)
    probs = softmax(logits)
    return probs[0] if single else probs


def predict_proba(params, ids, batch_size=1024):
    """Voter distributions (n, M, C) for a padded id matrix."""
    out = []
    for lo in range(0, ids.shape[0], batch_size):
        chunk = ids[lo:lo + batch_size]
        out.append(voters_forward(params, encode(params, chunk)))
    if not out:
        return np.zeros((0, params.num_voters, params.num_classes))
    return np.concatenate(out, axis=0)


# --------------------------------------------------------------------------
# losses

def soft_loss(teacher, student):
    """Mean squared difference between paired voter distributions."""
    teacher = np.asarray(teacher, dtype=np.float64)
    student = np.asarray(student, dtype=np.float64)
    if teacher.shape != student.shape:
        raise ValueError(f"teacher {teacher.shape} and student {student.shape} shapes differ")
    return float(np.mean((student - teacher) ** 2))


def hard_loss(y, student):
    """Mean over voters (and batch) of -log p[y]."""
    student = np.asarray(student, dtype=np.float64)
    C = student.shape[-1]
    y = np.asarray(y)
    if np.any(y >= C) or np.any(y < 0):
        raise ValueError(f"label out of range for {C} classes")
    if student.ndim == 2:
        return float(-np.mean(np.log(student[:, int(y)])))
    picked = np.take_along_axis(student, y.reshape(-1, 1, 1).astype(np.int64), axis=2)
    return float(-np.mean(np.log(picked)))


def _mlm_pieces(params, batch):
    if batch.n_targets == 0:
        raise ValueError("masked batch has no prediction targets")
    ids = np.asarray(batch.input_ids, dtype=np.int64)
    tg = np.asarray(batch.targets, dtype=np.int64)
    rows, gold = tg[:, 0], tg[:, 2]
    w = bag_weights(ids, exclude_mask=True)
    ctx = kernels.bag_forward(params.arrays["embeddings"], ids, w)
    logits = ctx[rows] @ params.arrays["mlm_proj"] + params.arrays["mlm_bias"]
    return ids, w, rows, gold, ctx, logits


def mlm_forward_loss(params, batch):
    """Mean cross-entropy of the masked originals given each row's unmasked context mean.

    A row whose tokens are all masked has a zero context vector.
    """
    *_, gold, _, logits = _mlm_pieces(params, batch)
    logp = log_softmax(logits)
    return float(-np.mean(logp[np.arange(len(gold)), gold]))


# --------------------------------------------------------------------------
# gradients

@dataclass
class ClassBatch:
    """Padded ids with either hard labels (n,) or soft targets (n, M, C)."""
    ids: np.ndarray
    labels: np.ndarray | None = None
    targets: np.ndarray | None = None


def _zeros_like(params):
    return {k: np.zeros_like(v) for k, v in params.arrays.items()}


def loss_and_grad(params, batch, kind, freeze_embeddings=False):
    """Loss value and gradients for ``kind`` in {"mlm", "soft", "hard"}.

    Parameters the loss does not touch, and the embeddings when frozen, get
    exactly-zero gradients.
    """
    grads = _zeros_like(params)
    E = params.arrays["embeddings"]
    if kind == "mlm":
        ids, w, rows, gold, ctx, logits = _mlm_pieces(params, batch)
        _finite("mlm logits", logits)
        T = len(gold)
        logp = log_softmax(logits)
        loss = float(-np.mean(logp[np.arange(T), gold]))
        dlogits = np.exp(logp)
        dlogits[np.arange(T), gold] -= 1.0
        dlogits /= T
        grads["mlm_proj"] = _finite("grad mlm_proj", ctx[rows].T @ dlogits)
        grads["mlm_bias"] = dlogits.sum(axis=0)
        if not freeze_embeddings:
            dctx_t = dlogits @ params.arrays["mlm_proj"].T
            dctx = np.zeros_like(ctx)
            np.add.at(dctx, rows, dctx_t)
            grads["embeddings"] = _finite("grad embeddings",
                                          kernels.bag_backward(dctx, ids, w, len(E)))
        return loss, grads

    if kind not in ("soft", "hard"):
        raise ValueError(f"unknown loss kind {kind!r}")
    ids = np.asarray(batch.ids, dtype=np.int64)
    w = bag_weights(ids)
    if np.any(w.sum(axis=1) == 0):
        raise ValueError("batch contains an all-[PAD] row")
    x = _finite("encoder output", kernels.bag_forward(E, ids, w))
    acts, logits = _voter_logits(params, x)
    _finite("voter logits", logits)
    B, M, C = logits.shape
    if kind == "soft":
        probs = softmax(logits)
        targets = np.asarray(batch.targets, dtype=np.float64)
        if targets.shape != probs.shape:
            raise ValueError(f"soft targets {targets.shape} do not match student {probs.shape}")
        diff = probs - targets
        loss = float(np.mean(diff ** 2))
        dp = 2.0 * diff / diff.size
        dz = probs * (dp - np.sum(dp * probs, axis=-1, keepdims=True))
    else:
        labels = np.asarray(batch.labels, dtype=np.int64)
        if np.any(labels >= C) or np.any(labels < 0):
            raise ValueError(f"label out of range for {C} classes")
        logp = log_softmax(logits)
        loss = float(-np.mean(logp[np.arange(B), :, labels]))
        dz = np.exp(logp)
        dz[np.arange(B), :, labels] -= 1.0
        dz /= B * M
    _finite("grad logits", dz)
    dx = np.zeros_like(x)
    for i in range(M):
        W1, _, W2, _ = params.voter(i)
        g = dz[:, i, :]
        a = acts[i]
        grads[f"voter{i}.W2"] = g.T @ a
        grads[f"voter{i}.b2"] = g.sum(axis=0)
        dpre = (g @ W2) * (1.0 - a * a)
        grads[f"voter{i}.W1"] = dpre.T @ x
        grads[f"voter{i}.b1"] = dpre.sum(axis=0)
        dx += dpre @ W1
    _finite("grad encoder output", dx)
    if not freeze_embeddings:
        grads["embeddings"] = _finite("grad embeddings", kernels.bag_backward(dx, ids, w, len(E)))
    return loss, grads


def backward(params, batch, kind, freeze_embeddings=False):
    return loss_and_grad(params, batch, kind, freeze_embeddings)[1]


def loss_value(params, batch, kind):
    """Forward-only loss for the same batch types ``loss_and_grad`` accepts."""
    if kind == "mlm":
        return mlm_forward_loss(params, batch)
    probs = voters_forward(params, encode(params, batch.ids))
    if kind == "soft":
        return soft_loss(batch.targets, probs)
    if kind == "hard":
        return hard_loss(batch.labels, probs)
    raise ValueError(f"unknown loss kind {kind!r}")


# --------------------------------------------------------------------------
# optimiser

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params, grads, state, names=None, lr=None):
    """One AdamW step, in place on ``params`` and ``state``.

    Only ``names`` are updated (all parameters by default); ``lr`` overrides
    ``state.lr`` for schedules such as warm-up.
    """
    lr = state.lr if lr is None else lr
    state.step += 1
    bc1 = 1.0 - state.beta1 ** state.step
    bc2 = 1.0 - state.beta2 ** state.step
    for name in (names if names is not None else params.arrays):
        p = params.arrays[name]
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        if state.weight_decay:
            update = update + state.weight_decay * p
        p -= lr * update
    return params, state


# --------------------------------------------------------------------------
# checkpoints

def _arrays_section(params):
    out = {}
    for name in sorted(params.arrays):
        arr = np.ascontiguousarray(params.arrays[name], dtype="<f8")
        out[name] = {"shape": list(arr.shape), "dtype": "f64",
                     "data": base64.b64encode(arr.tobytes()).decode("ascii")}
    return out


def _digest(arrays_section):
    blob = json.dumps(arrays_section, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def save_checkpoint(params, metadata, path):
    arrays = _arrays_section(params)
    meta = dict(metadata)
    meta.update(num_classes=params.num_classes, hidden=list(params.hidden), dim=params.dim)
    envelope = {"format_version": FORMAT_VERSION, "metadata": meta, "vocab": list(params.vocab),
                "arrays": arrays, "checksum": _digest(arrays)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(envelope, fh, sort_keys=True, separators=(",", ":"))
    return path


def load_checkpoint(path, with_metadata=False):
    try:
        with open(path, encoding="utf-8") as fh:
            envelope = json.load(fh)
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: truncated or malformed checkpoint ({exc.msg})") from None
    version = envelope.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format_version {version!r} "
                              f"(expected {FORMAT_VERSION})")
    try:
        arrays_section, meta = envelope["arrays"], envelope["metadata"]
        vocab, checksum = envelope["vocab"], envelope["checksum"]
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing field {exc.args[0]!r}") from None
    if _digest(arrays_section) != checksum:
        raise CheckpointError(f"{path}: checksum mismatch, file is corrupted")
    arrays = {}
    for name, spec in arrays_section.items():
        if spec.get("dtype") != "f64":
            raise CheckpointError(f"{path}: array {name} has unsupported dtype {spec.get('dtype')!r}")
        raw = base64.b64decode(spec["data"])
        shape = tuple(spec["shape"])
        if len(raw) != 8 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{path}: array {name} has the wrong byte length")
        arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    params = ModelParams(arrays, list(vocab), int(meta["num_classes"]), tuple(meta["hidden"]))
    return (params, meta) if with_metadata else params
