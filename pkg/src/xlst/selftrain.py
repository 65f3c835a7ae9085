"""Bilingual task fitting, source fine-tuning and the soft/hard self-training rounds."""
from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from .corpus import (Document, LabeledExample, balanced_resample, build_vocab, encode_batch,
                     load_labeled, load_unlabeled, mask_batch)
from .metrics import accuracy
from .thresholding import (ABSTAIN, default_min_recalled, records_from_probs, select_alpha,
                           threshold_curve)

log = logging.getLogger(__name__)

# seed-stream tags so each phase draws from an independent generator
_BTF, _FINETUNE, _SOFT, _HARD, _HEADS = 1, 2, 3, 4, 5


class PipelineError(RuntimeError):
    """A phase cannot proceed (e.g. nothing left to train on)."""


def phase_rng(seed, tag, round_index=0):
    return np.random.default_rng([int(seed), tag, int(round_index)])


@dataclass
class PhaseConfig:
    epochs: int
    lr: float
    batch_size: int = 32
    freeze_embeddings: bool = False
    weight_decay: float = 0.0
    warmup: float = 0.0
    schedule: str = "linear"


def _lr_schedule(phase, total_steps):
    """Linear warm-up over the first ``warmup`` fraction, then constant or linear decay to 0."""
    if phase.schedule not in ("linear", "constant"):
        raise ValueError(f"unknown learning-rate schedule {phase.schedule!r}")
    ramp = int(round(phase.warmup * total_steps))

    def lr_at(step):  # step counts from 1
        if ramp and step <= ramp:
            return phase.lr * step / ramp
        if phase.schedule == "constant":
            return phase.lr
        return phase.lr * max(total_steps - step + 1, 0) / max(total_steps - ramp, 1)
    return lr_at


def trainable_names(params, kind, freeze_embeddings):
    if kind == "mlm":
        names = ["mlm_proj", "mlm_bias"]
    else:
        names = [k for k in params.arrays if k.startswith("voter")]
    if not freeze_embeddings:
        names.append("embeddings")
    return names


def _train(params, make_batches, kind, phase, n_batches_per_epoch):
    """Generic epoch loop: ``make_batches(epoch)`` yields batches for ``loss_and_grad``."""
    names = trainable_names(params, kind, phase.freeze_embeddings)
    state = M.OptimizerState(lr=phase.lr, weight_decay=phase.weight_decay)
    lr_at = _lr_schedule(phase, phase.epochs * n_batches_per_epoch)
    losses = []
    for epoch in range(phase.epochs):
        total, count = 0.0, 0
        for batch in make_batches(epoch):
            loss, grads = M.loss_and_grad(params, batch, kind, phase.freeze_embeddings)
            M.optimizer_step(params, grads, state, names=names, lr=lr_at(state.step + 1))
            total += loss
            count += 1
        losses.append(total / max(count, 1))
    return params, losses


def _chunks(n, batch_size, rng):
    order = rng.permutation(n)
    return [order[lo:lo + batch_size] for lo in range(0, n, batch_size)]


# --------------------------------------------------------------------------
# bilingual task fitting

def run_btf(params, src_docs, tgt_docs, phase, mask_rate=0.15, seed=0):
    """Continued MLM training on a per-epoch balanced bilingual mix."""
    vocab = _vocab_of(params)
    rng = phase_rng(seed, _BTF)
    k = min(len(src_docs), len(tgt_docs))
    n_batches = -(-2 * k // phase.batch_size)

    def batches(epoch):
        docs = balanced_resample(src_docs, tgt_docs, seed, epoch)
        ids = encode_batch(docs, vocab)
        for lo in range(0, len(docs), phase.batch_size):
            mb = mask_batch(ids[lo:lo + phase.batch_size], mask_rate, rng)
            if mb.n_targets:
                yield mb
    return _train(params, batches, "mlm", phase, n_batches)


# --------------------------------------------------------------------------
# classification phases

def _class_batches(ids, rng, batch_size, labels=None, targets=None):
    def batches(epoch):
        for idx in _chunks(len(ids), batch_size, rng):
            yield M.ClassBatch(ids[idx],
                               labels=None if labels is None else labels[idx],
                               targets=None if targets is None else targets[idx])
    return batches


def train_hard(params, ids, labels, phase, rng):
    if len(ids) == 0:
        raise PipelineError("no training data for cross-entropy fine-tuning "
                            "(the confidence threshold may be too high)")
    labels = np.asarray(labels, dtype=np.int64)
    return _train(params, _class_batches(ids, rng, phase.batch_size, labels=labels), "hard",
                  phase, -(-len(ids) // phase.batch_size))


def finetune_source(base, ids, labels, phase, seed=0, init_scale=0.05):
    """Fresh voter heads on top of ``base``, trained with CE on source labels."""
    params = M.with_fresh_voters(base, [seed, _HEADS, 0], init_scale)
    return train_hard(params, ids, labels, phase, phase_rng(seed, _FINETUNE))


def teacher_targets(teacher, ids, mode="paired"):
    probs = M.predict_proba(teacher, ids)
    if mode == "mean":
        probs = np.broadcast_to(probs.mean(axis=1, keepdims=True), probs.shape).copy()
    return probs


def distill_soft(teacher, student, ids, phase, rng, mode="paired"):
    """Train ``student`` to match the teacher's voter distributions under MSE.

    The teacher is only read; its distributions are computed once up front.
    """
    if len(ids) == 0:
        raise PipelineError("soft distillation needs unlabeled target documents")
    if teacher.hidden != student.hidden or teacher.num_classes != student.num_classes:
        raise ValueError("teacher and student dimensions differ")
    targets = teacher_targets(teacher, ids, mode)
    return _train(student, _class_batches(ids, rng, phase.batch_size, targets=targets), "soft",
                  phase, -(-len(ids) // phase.batch_size))


def finetune_hard(student, ids, labels, phase, rng):
    return train_hard(student, ids, labels, phase, rng)


# --------------------------------------------------------------------------
# decision policy

def predict_records(params, ids, gold=None):
    return records_from_probs(M.predict_proba(params, ids), gold)


def ensemble_predict(params, ids):
    """Class with the highest voter-averaged probability (used for evaluation)."""
    return M.predict_proba(params, ids).mean(axis=1).argmax(axis=1)


def generate_pseudo_labels(params, docs, ids, alpha):
    """(doc, label) for every doc whose voters agree with all confidences > alpha."""
    out = []
    for doc, rec in zip(docs, predict_records(params, ids)):
        if rec.recalled(alpha):
            out.append((doc, rec.agreed_label))
    return out


def filter_consistent_source(params, examples, ids, alpha, mode="threshold"):
    """Source examples the model still gets right.

    ``mode="threshold"`` applies the full recall condition at ``alpha``;
    ``mode="argmax"`` only requires the ensemble's prediction to match.
    """
    gold = np.array([e.label for e in examples], dtype=np.int64)
    if mode == "argmax":
        pred = ensemble_predict(params, ids) if len(examples) else np.zeros(0, dtype=np.int64)
        return [e for e, p, g in zip(examples, pred, gold) if p == g]
    recs = predict_records(params, ids, gold)
    return [e for e, r in zip(examples, recs) if r.recalled(alpha) and r.agreed_label == e.label]


# --------------------------------------------------------------------------
# pipeline

@dataclass
class TaskData:
    source: list[LabeledExample]
    target_unlabeled: list[Document]
    target_test: list[LabeledExample] = field(default_factory=list)
    btf_source: list[Document] = field(default_factory=list)
    btf_target: list[Document] = field(default_factory=list)

    @classmethod
    def from_config(cls, config):
        if not config.source_labeled or not config.target_unlabeled:
            raise PipelineError("source_labeled and target_unlabeled paths are required")
        src = load_labeled(config.source_labeled, num_classes=config.num_classes)
        tgt = load_unlabeled(config.target_unlabeled)
        test = (load_labeled(config.target_test, num_classes=config.num_classes)
                if config.target_test else [])
        data = cls(src, tgt, test)
        if config.btf_corpus:
            data.split_btf(load_unlabeled(config.btf_corpus))
        return data

    @property
    def source_lang(self):
        return self.source[0].doc.lang

    def split_btf(self, docs):
        lang = self.source_lang
        self.btf_source = [d for d in docs if d.lang == lang]
        self.btf_target = [d for d in docs if d.lang != lang]

    def btf_sides(self):
        src = self.btf_source or [e.doc for e in self.source]
        tgt = self.btf_target or list(self.target_unlabeled)
        return src, tgt

    def all_docs(self):
        return ([e.doc for e in self.source], self.target_unlabeled,
                [e.doc for e in self.target_test], self.btf_source, self.btf_target)


def _vocab_of(params):
    from .corpus import Vocab
    return Vocab(list(params.vocab))


@dataclass
class RoundState:
    base: M.ModelParams
    teacher: M.ModelParams
    student: M.ModelParams | None = None
    round_index: int = 0
    source: list[LabeledExample] = field(default_factory=list)
    alphas: list[float] = field(default_factory=list)
    removed_ids: list[list[str]] = field(default_factory=list)
    set_sizes: list[dict] = field(default_factory=list)
    history: list[dict] = field(default_factory=list)
    base_fingerprint: str = ""


class Pipeline:
    """Runs BTF, source fine-tuning and the self-training schedule for one config.

    With ``run_dir`` set, checkpoints, ``config.txt`` and ``manifest.json`` are
    written there; otherwise everything stays in memory.
    """

    def __init__(self, config, data=None, run_dir=None):
        self.config = config.validate()
        self.data = data if data is not None else TaskData.from_config(config)
        if not self.data.source or not self.data.target_unlabeled:
            raise PipelineError("need non-empty source and target data")
        self.run_dir = Path(run_dir) if run_dir else None
        self.manifest = {
            "config_hash": config.config_hash(),
            "seed": config.seed,
            "phases": [],
            "alphas": [],
            "removed_source_ids": [],
            "set_sizes": [],
            "metrics": [],
            "timestamps": {},
        }
        self._vocab = None
        if self.run_dir:
            (self.run_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
            (self.run_dir / "config.txt").write_text(config.dump(), encoding="utf-8")

    # -- helpers -----------------------------------------------------------
    def phase(self, kind):
        c = self.config
        epochs, lr, freeze, wd = {
            "btf": (c.btf_epochs, c.btf_lr, False, c.btf_weight_decay),
            "finetune": (c.finetune_epochs, c.finetune_lr, c.freeze_finetune,
                         c.finetune_weight_decay),
            "soft": (c.soft_epochs, c.soft_lr, c.freeze_soft, c.soft_weight_decay),
            "hard": (c.hard_epochs, c.hard_lr, c.freeze_hard, c.hard_weight_decay),
        }[kind]
        return PhaseConfig(epochs, lr, c.batch_size, freeze, wd, c.warmup, c.lr_schedule)

    @property
    def vocab(self):
        if self._vocab is None:
            self._vocab = build_vocab(self.data.all_docs())
        return self._vocab

    def ids(self, docs):
        return encode_batch(docs, self.vocab)

    def evaluate(self, params, name, round_index):
        entry = {"phase": name, "round": round_index, "dataset": "target_test", "values": {}}
        if self.data.target_test:
            ids = self.ids([e.doc for e in self.data.target_test])
            gold = [e.label for e in self.data.target_test]
            entry["values"]["accuracy"] = accuracy(ensemble_predict(params, ids), gold)
        self.manifest["metrics"].append(entry)
        return entry

    def checkpoint(self, params, name, stage, round_index):
        rec = {"name": name, "stage": stage, "round": round_index,
               "fingerprint": params.fingerprint(), "checkpoint": None}
        if self.run_dir:
            path = self.run_dir / "checkpoints" / f"{name}.ckpt.json"
            M.save_checkpoint(params, {"stage": stage, "round": round_index,
                                       "seed": self.config.seed,
                                       "config_hash": self.manifest["config_hash"]}, path)
            rec["checkpoint"] = str(path.relative_to(self.run_dir))
        self.manifest["phases"].append(rec)
        self.manifest["timestamps"][name] = time.time()
        self._write_manifest()

    def _write_manifest(self):
        if not self.run_dir:
            return
        path = self.run_dir / "manifest.json"
        tmp = path.with_suffix(".json.tmp")
        tmp.write_text(json.dumps(self.manifest, indent=2, sort_keys=True), encoding="utf-8")
        os.replace(tmp, path)

    # -- stages ------------------------------------------------------------
    def base_model(self):
        c = self.config
        if c.base_checkpoint:
            base = M.load_checkpoint(c.base_checkpoint)
            self._vocab = _vocab_of(base)
            if base.num_classes != c.num_classes:
                raise PipelineError("base checkpoint class count differs from num_classes")
            return base
        hidden = M.voter_hidden_sizes(c.voters, c.base_hidden, c.hidden_step)
        base = M.init_params(self.vocab, c.dim, c.num_classes, hidden, c.seed, c.init_scale)
        if c.btf:
            src, tgt = self.data.btf_sides()
            base, losses = run_btf(base, src, tgt, self.phase("btf"), c.mask_rate, c.seed)
            self.manifest["btf_losses"] = losses
        self.checkpoint(base, "base", "base", 0)
        return base

    def finetune(self, base):
        src = self.data.source
        params, _ = finetune_source(base, self.ids([e.doc for e in src]),
                                    [e.label for e in src], self.phase("finetune"),
                                    self.config.seed, self.config.init_scale)
        self.evaluate(params, "finetuned", 0)
        self.checkpoint(params, "finetuned", "finetuned", 0)
        return params

    def start(self, base=None, teacher=None):
        base = base if base is not None else self.base_model()
        teacher = teacher if teacher is not None else self.finetune(base)
        return RoundState(base=base, teacher=teacher, source=list(self.data.source),
                          base_fingerprint=base.fingerprint())

    def soft_phase(self, state, round_index):
        c = self.config
        student = M.with_fresh_voters(state.base, [c.seed, _HEADS, round_index], c.init_scale)
        before = state.teacher.fingerprint()
        student, losses = distill_soft(state.teacher, student, self.ids(self.data.target_unlabeled),
                                       self.phase("soft"), phase_rng(c.seed, _SOFT, round_index),
                                       c.soft_target)
        if state.teacher.fingerprint() != before:
            raise PipelineError("teacher parameters changed during soft distillation")
        name = f"round{round_index}-soft"
        self.evaluate(student, name, round_index)
        self.checkpoint(student, name, "soft", round_index)
        return student, losses

    def run_round(self, state):
        """One soft phase then one hard phase; the hard student becomes the next teacher."""
        c = self.config
        r = state.round_index + 1
        student, _ = self.soft_phase(state, r)

        src_ids = self.ids([e.doc for e in state.source])
        gold = np.array([e.label for e in state.source], dtype=np.int64)
        if c.fixed_alpha is not None:
            alpha = c.fixed_alpha
        else:
            records = predict_records(student, src_ids, gold)
            floor = c.min_recalled or default_min_recalled(len(records))
            alpha = select_alpha(threshold_curve(records, c.grid), floor)

        pseudo = generate_pseudo_labels(student, self.data.target_unlabeled,
                                        self.ids(self.data.target_unlabeled), alpha)
        kept = filter_consistent_source(student, state.source, src_ids, alpha, c.consistency)
        kept_ids = {e.doc.id for e in kept}
        removed = sorted({e.doc.id for e in state.source if e.doc.id not in kept_ids})
        if not pseudo and not kept:
            raise PipelineError(f"round {r}: no pseudo labels and no consistent source samples "
                                f"at alpha={alpha} (threshold too high?)")
        if not pseudo:
            log.warning("round %d: no target document passed alpha=%s; training on source only",
                        r, alpha)
        docs = [e.doc for e in kept] + [d for d, _ in pseudo]
        labels = [e.label for e in kept] + [y for _, y in pseudo]
        student, _ = finetune_hard(student, self.ids(docs), labels, self.phase("hard"),
                                   phase_rng(c.seed, _HARD, r))
        name = f"round{r}-hard"
        self.evaluate(student, name, r)

        state.alphas.append(float(alpha))
        state.removed_ids.append(removed)
        sizes = {"round": r, "alpha": float(alpha), "pseudo": len(pseudo),
                 "source_kept": len(kept), "source_removed": len(removed)}
        state.set_sizes.append(sizes)
        self.manifest["alphas"].append(float(alpha))
        self.manifest["removed_source_ids"].append(removed)
        self.manifest["set_sizes"].append(sizes)
        self.checkpoint(student, name, "hard", r)
        log.info("round %d: alpha=%s pseudo=%d kept=%d removed=%d", r, alpha, len(pseudo),
                 len(kept), len(removed))

        state.source = kept
        state.teacher = student
        state.student = student
        state.round_index = r
        return state

    def run(self, base=None, teacher=None):
        state = self.start(base, teacher)
        for _ in range(self.config.full_rounds):
            state = self.run_round(state)
        if self.config.trailing_soft:
            student, _ = self.soft_phase(state, state.round_index + 1)
            state.student = student
        final = state.student if state.student is not None else state.teacher
        self.manifest["final_fingerprint"] = final.fingerprint()
        self._write_manifest()
        return final, state


def run_pipeline(config, data=None, run_dir=None, base=None, teacher=None):
    """Full schedule; returns ``(final_params, manifest)``."""
    pipe = Pipeline(config, data, run_dir)
    final, _ = pipe.run(base, teacher)
    return final, pipe.manifest
