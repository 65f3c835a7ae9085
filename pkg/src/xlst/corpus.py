"""Data ingestion, vocabulary, bilingual resampling, entity corpora, MLM masking
and the synthetic bilingual task generator."""
from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAD, UNK, MASK = "[PAD]", "[UNK]", "[MASK]"
PAD_ID, UNK_ID, MASK_ID = 0, 1, 2
RESERVED = (PAD, UNK, MASK)

_BIO_RE = re.compile(r"^(O|[BI]-\S+)$")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class Document:
    id: str
    lang: str
    tokens: tuple[str, ...]

    def __post_init__(self):
        if not self.tokens:
            raise DataError(f"document {self.id!r} has no tokens")
        if not self.lang:
            raise DataError(f"document {self.id!r} has an empty language tag")
        if not isinstance(self.tokens, tuple):
            object.__setattr__(self, "tokens", tuple(self.tokens))


@dataclass(frozen=True)
class LabeledExample:
    doc: Document
    label: int


def check_bio(tags):
    """Return ``tags`` as a tuple, raising DataError on anything outside O|B-X|I-X."""
    tags = tuple(tags)
    for i, tag in enumerate(tags):
        if not isinstance(tag, str) or not _BIO_RE.match(tag):
            raise DataError(f"tag {tag!r} at position {i} is not valid BIO")
    return tags


# --------------------------------------------------------------------------
# JSONL io

def _doc_from_record(rec, lineno):
    if not isinstance(rec, dict):
        raise DataError(f"line {lineno}: expected a JSON object")
    for key in ("id", "lang", "tokens"):
        if key not in rec:
            raise DataError(f"line {lineno}: missing {key!r}")
    tokens = rec["tokens"]
    if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
        raise DataError(f"line {lineno}: 'tokens' must be a list of strings")
    try:
        return Document(str(rec["id"]), str(rec["lang"]), tuple(tokens))
    except DataError as exc:
        raise DataError(f"line {lineno}: {exc}") from None


def _iter_records(path):
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield lineno, json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}: line {lineno}: malformed JSON ({exc.msg})") from None


def load_labeled(path, task="classification", num_classes=None):
    """Load labeled JSONL.

    ``task="classification"`` returns LabeledExample objects; ``task="bio"``
    returns ``(Document, tags)`` pairs with tags checked against the tokens.
    """
    if task not in ("classification", "bio"):
        raise ValueError(f"unknown task {task!r}")
    out = []
    for lineno, rec in _iter_records(path):
        doc = _doc_from_record(rec, lineno)
        if task == "classification":
            label = rec.get("label")
            if not isinstance(label, int) or isinstance(label, bool) or label < 0:
                raise DataError(f"{path}: line {lineno}: missing or invalid 'label'")
            if num_classes is not None and label >= num_classes:
                raise DataError(f"{path}: line {lineno}: label {label} out of range for "
                                f"{num_classes} classes")
            out.append(LabeledExample(doc, label))
        else:
            if "tags" not in rec:
                raise DataError(f"{path}: line {lineno}: missing 'tags'")
            try:
                tags = check_bio(rec["tags"])
            except DataError as exc:
                raise DataError(f"{path}: line {lineno}: {exc}") from None
            if len(tags) != len(doc.tokens):
                raise DataError(f"{path}: line {lineno}: {len(tags)} tags for "
                                f"{len(doc.tokens)} tokens")
            out.append((doc, tags))
    return out


def load_unlabeled(path):
    return [_doc_from_record(rec, lineno) for lineno, rec in _iter_records(path)]


def doc_record(doc, label=None, tags=None):
    rec = {"id": doc.id, "lang": doc.lang, "tokens": list(doc.tokens)}
    if label is not None:
        rec["label"] = int(label)
    if tags is not None:
        rec["tags"] = list(tags)
    return rec


def write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False, separators=(",", ":")) + "\n")


def load_translation_table(path):
    """Two-column UTF-8 TSV (source form, target form), no header."""
    table = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise DataError(f"{path}: line {lineno}: expected 2 tab-separated columns")
            table[parts[0]] = parts[1]
    return table


# --------------------------------------------------------------------------
# vocabulary

@dataclass
class Vocab:
    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:3]) != RESERVED:
            raise DataError("vocabulary must start with [PAD], [UNK], [MASK]")
        self.index = {t: i for i, t in enumerate(self.tokens)}
        if len(self.index) != len(self.tokens):
            raise DataError("vocabulary contains duplicate tokens")

    def __len__(self):
        return len(self.tokens)

    def id(self, token):
        return self.index.get(token, UNK_ID)

    def encode(self, tokens):
        return [self.index.get(t, UNK_ID) for t in tokens]


def build_vocab(corpora):
    """Reserved tokens first, then the sorted union of all surface forms.

    A literal "[MASK]" (or other reserved string) in text maps to its reserved id.
    """
    seen = set()
    for docs in corpora:
        for doc in docs:
            seen.update(doc.tokens)
    seen.difference_update(RESERVED)
    return Vocab(list(RESERVED) + sorted(seen))


def encode_batch(docs, vocab, max_len=None):
    """Pad token ids into an (n, L) int64 matrix."""
    rows = [vocab.encode(d.tokens) for d in docs]
    if max_len is not None:
        rows = [r[:max_len] for r in rows]
    L = max((len(r) for r in rows), default=0)
    ids = np.zeros((len(rows), L), dtype=np.int64)
    for i, r in enumerate(rows):
        ids[i, :len(r)] = r
    return ids


# --------------------------------------------------------------------------
# bilingual resampling

def balanced_resample(src, tgt, seed, epoch=0):
    """Downsample the larger side to ``min(|src|, |tgt|)`` and shuffle the union.

    Different ``epoch`` values give fresh draws from the same seed.
    """
    if not src or not tgt:
        raise DataError("balanced_resample needs both languages non-empty")
    rng = np.random.default_rng([int(seed), int(epoch)])
    k = min(len(src), len(tgt))

    def draw(docs):
        if len(docs) == k:
            return list(docs)
        pick = np.sort(rng.choice(len(docs), size=k, replace=False))
        return [docs[i] for i in pick]

    mixed = draw(src) + draw(tgt)
    order = rng.permutation(len(mixed))
    return [mixed[i] for i in order]


# --------------------------------------------------------------------------
# entity corpora

def extract_entity_surface_forms(data):
    """Space-joined surface forms of all maximal B-X (I-X)* spans."""
    found = set()
    for doc, tags in data:
        tags = check_bio(tags)
        if len(tags) != len(doc.tokens):
            raise DataError(f"document {doc.id!r}: {len(tags)} tags for {len(doc.tokens)} tokens")
        start = etype = None
        for i, tag in enumerate(tuple(tags) + ("O",)):
            continues = tag.startswith("I-") and start is not None and tag[2:] == etype
            if start is not None and not continues:
                found.add(" ".join(doc.tokens[start:i]))
                start = etype = None
            if tag.startswith("B-"):
                start, etype = i, tag[2:]
    return found


def _contains(tokens, pattern):
    n = len(pattern)
    first = pattern[0]
    for i in range(len(tokens) - n + 1):
        if tokens[i] == first and tokens[i:i + n] == pattern:
            return True
    return False


def build_entity_corpus(entities, translation_table, target_corpus, cap):
    """Target documents containing a translated entity as a contiguous token run.

    Matching is case-sensitive; untranslated entities are skipped. Returns at
    most ``cap`` documents in corpus order.
    """
    patterns = sorted({tuple(translation_table[e].split())
                       for e in entities if e in translation_table and translation_table[e].split()})
    out = []
    if not patterns or cap <= 0:
        return out
    for doc in target_corpus:
        if any(_contains(doc.tokens, p) for p in patterns):
            out.append(doc)
            if len(out) >= cap:
                break
    return out


# --------------------------------------------------------------------------
# MLM masking

@dataclass(frozen=True)
class MaskedBatch:
    """Masked ids for one or more documents.

    ``input_ids`` is (n, L); ``targets`` holds ``(row, position, original_id)``.
    """
    input_ids: np.ndarray
    targets: tuple[tuple[int, int, int], ...]

    @property
    def n_targets(self):
        return len(self.targets)


def mask_positions(ids, rate, rng):
    """Choose ``ceil(rate * len)`` maskable positions of one unpadded id row.

    Positions holding reserved ids are never chosen; if fewer maskable positions
    exist than requested, all of them are taken.
    """
    eligible = np.flatnonzero(ids >= len(RESERVED))
    k = min(math.ceil(rate * len(ids)), len(eligible))
    return np.sort(rng.choice(eligible, size=k, replace=False))


def mask_tokens(doc, vocab, rate=0.15, seed=0):
    if not 0.0 < rate < 1.0:
        raise ValueError(f"mask rate must lie in (0, 1), got {rate}")
    if len(doc.tokens) == 0:
        raise DataError("cannot mask an empty document")
    rng = np.random.default_rng(seed)
    ids = np.asarray(vocab.encode(doc.tokens), dtype=np.int64)
    masked = ids.copy()
    targets = []
    for pos in mask_positions(ids, rate, rng):
        targets.append((0, int(pos), int(ids[pos])))
        masked[pos] = MASK_ID
    return MaskedBatch(masked[None, :], tuple(targets))


def mask_batch(id_rows, rate, rng):
    """Mask every row of a right-padded (n, L) id matrix."""
    masked = id_rows.copy()
    targets = []
    for row in range(id_rows.shape[0]):
        length = int(np.count_nonzero(id_rows[row]))
        for pos in mask_positions(id_rows[row, :length], rate, rng):
            targets.append((row, int(pos), int(id_rows[row, pos])))
            masked[row, pos] = MASK_ID
    return MaskedBatch(masked, tuple(targets))


# --------------------------------------------------------------------------
# synthetic bilingual task

@dataclass(frozen=True)
class SyntheticSpec:
    vocab_per_language: int = 200
    num_classes: int = 2
    n_source_labeled: int = 500
    n_target_unlabeled: int = 2000
    n_target_test: int = 500
    signal: float = 0.5
    n_btf_per_language: int = 2000
    signal_tokens_per_class: int = 40
    purity: float = 0.9
    n_anchors_per_class: int = 4
    anchor_rate: float = 0.1
    btf_coverage: float = 0.5
    min_len: int = 8
    max_len: int = 16
    source_lang: str = "src"
    target_lang: str = "tgt"

    def validate(self):
        counts = (self.vocab_per_language, self.num_classes, self.n_source_labeled,
                  self.n_target_unlabeled, self.n_target_test, self.n_btf_per_language)
        if min(counts) <= 0:
            raise ValueError("all synthetic task counts must be positive")
        if not 0.0 < self.signal <= 1.0:
            raise ValueError(f"signal strength must lie in (0, 1], got {self.signal}")
        if self.num_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.signal_tokens_per_class * self.num_classes > self.vocab_per_language:
            raise ValueError("signal tokens exceed the per-language vocabulary")
        if self.signal < 1.0 and self.signal_tokens_per_class * self.num_classes == self.vocab_per_language:
            raise ValueError("signal < 1 needs noise tokens in the vocabulary")
        if not 0.5 <= self.purity <= 1.0:
            raise ValueError("purity must lie in [0.5, 1]")
        if not 0.0 <= self.anchor_rate < 1.0:
            raise ValueError("anchor_rate must lie in [0, 1)")
        if not 0.0 < self.btf_coverage <= 1.0:
            raise ValueError("btf_coverage must lie in (0, 1]")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")


@dataclass
class SyntheticTask:
    source_labeled: list[LabeledExample]
    target_unlabeled: list[Document]
    target_test: list[LabeledExample]
    btf_corpus: list[Document]
    dictionary: dict[str, str]

    def write(self, out_dir):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_jsonl(out / "source_labeled.jsonl", (doc_record(e.doc, e.label) for e in self.source_labeled))
        write_jsonl(out / "target_unlabeled.jsonl", (doc_record(d) for d in self.target_unlabeled))
        write_jsonl(out / "target_test.jsonl", (doc_record(e.doc, e.label) for e in self.target_test))
        write_jsonl(out / "btf_corpus.jsonl", (doc_record(d) for d in self.btf_corpus))
        with open(out / "dictionary.tsv", "w", encoding="utf-8") as fh:
            for s, t in self.dictionary.items():
                fh.write(f"{s}\t{t}\n")
        return out


def generate_synthetic_task(spec, seed):
    """Two disjoint vocabularies tied by a hidden 1:1 dictionary.

    Documents are drawn in an abstract word space: each position is a class
    signal word with probability ``spec.signal`` (from the document's class with
    probability ``purity``), otherwise a noise word; a fraction ``anchor_rate`` of
    positions is replaced by class-associated anchor tokens spelled identically in
    both languages (think shared named entities). The label is the majority class
    among signal words and anchors. Target-side BTF documents only use the first
    ``btf_coverage`` share of each class's signal words as signal; the remaining
    signal words appear there in noise positions only. Source documents spell abstract word ``w`` as
    ``{src}_{w}``, target documents as ``{tgt}_{perm[w]}``.
    """
    spec.validate()
    rng = np.random.default_rng(seed)
    V, C = spec.vocab_per_language, spec.num_classes
    S = spec.signal_tokens_per_class
    perm = rng.permutation(V)
    word_roles = rng.permutation(V)  # abstract word ids; first C*S are signal words
    signal_words = word_roles[:C * S].reshape(C, S)
    noise_words = word_roles[C * S:]
    width = len(str(V - 1))
    src_form = [f"{spec.source_lang}_{w:0{width}d}" for w in range(V)]
    tgt_form = [f"{spec.target_lang}_{perm[w]:0{width}d}" for w in range(V)]
    anchors = [[f"@ent{c}_{j}" for j in range(spec.n_anchors_per_class)] for c in range(C)]

    def other_class(c):
        o = int(rng.integers(C - 1))
        return o if o < c else o + 1

    n_covered = max(1, int(round(spec.btf_coverage * S)))
    # words whose class role the BTF corpus never shows; there they act as noise
    uncovered = signal_words[:, n_covered:].ravel()
    btf_noise = np.concatenate([noise_words, uncovered])

    def sample(lang, restricted=False):
        forms = src_form if lang == spec.source_lang else tgt_form
        n_sig = n_covered if restricted else S
        noise = btf_noise if restricted else noise_words
        while True:
            c = int(rng.integers(C))
            length = int(rng.integers(spec.min_len, spec.max_len + 1))
            votes = np.zeros(C, dtype=np.int64)
            toks = []
            for _ in range(length):
                cls = c if rng.random() < spec.purity else other_class(c)
                if spec.n_anchors_per_class and rng.random() < spec.anchor_rate:
                    toks.append(anchors[cls][int(rng.integers(spec.n_anchors_per_class))])
                    votes[cls] += 1
                elif rng.random() < spec.signal:
                    toks.append(forms[signal_words[cls, int(rng.integers(n_sig))]])
                    votes[cls] += 1
                elif len(noise):
                    toks.append(forms[noise[int(rng.integers(len(noise)))]])
                else:
                    toks.append(forms[signal_words[cls, int(rng.integers(n_sig))]])
                    votes[cls] += 1
            top = votes.max()
            if top > 0 and np.count_nonzero(votes == top) == 1:
                return toks, int(votes.argmax())

    def make(n, lang, prefix, restricted=False):
        out = []
        for i in range(n):
            toks, label = sample(lang, restricted)
            out.append(LabeledExample(Document(f"{prefix}-{i}", lang, tuple(toks)), label))
        return out

    source_labeled = make(spec.n_source_labeled, spec.source_lang, "src-train")
    target_unlabeled = [e.doc for e in make(spec.n_target_unlabeled, spec.target_lang, "tgt-unl")]
    target_test = make(spec.n_target_test, spec.target_lang, "tgt-test")
    btf = [e.doc for e in make(spec.n_btf_per_language, spec.source_lang, "btf-src")]
    btf += [e.doc for e in make(spec.n_btf_per_language, spec.target_lang, "btf-tgt",
                                restricted=True)]
    dictionary = {src_form[w]: tgt_form[w] for w in range(V)}
    return SyntheticTask(source_labeled, target_unlabeled, target_test, btf, dictionary)
