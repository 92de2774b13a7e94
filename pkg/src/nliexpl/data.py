"""Corpus ingestion, tokenization, vocabulary, embeddings, and batching.

Corpora are UTF-8 CSV files with a header; the default column names
(gold_label, Sentence1, Sentence2, Explanation_1..3, plus optional
highlight columns of comma-separated token indices) can be remapped via
:class:`ColumnMap` to adapt other NLI exports.

Tokenizer rule table (deterministic, pinned by tests):
  1. lowercase the text;
  2. split "n't" off its stem (doesn't -> does n't);
  3. split trailing clitics 's 're 've 'd 'll 'm;
  4. runs of [a-z0-9] form one token;
  5. any other non-space character is its own token;
  6. whitespace only separates (runs collapse, never emitted).
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
LABELS = ("entailment", "neutral", "contradiction")
RESERVED = (PAD, UNK, BOS, EOS) + LABELS

SENTENCE_LIMIT = 84
EXPLANATION_LIMIT = 40

_TOKEN_RE = re.compile(r"[a-z0-9]+(?=n't)|n't|'(?:s|re|ve|d|ll|m)|[a-z0-9]+|[^\sa-z0-9]")


class CorpusFormatError(ValueError):
    """Input file violates the documented corpus/embedding format."""


def tokenize(text: str) -> list[str]:
    """Lowercase and split `text` per the module rule table."""
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: list[str]) -> str:
    return " ".join(tokens)


def label_to_class(label: str) -> int:
    """entailment -> 0, neutral -> 1, contradiction -> 2."""
    try:
        return LABELS.index(label)
    except ValueError:
        raise ValueError(f"unknown label {label!r}") from None


# ---------------------------------------------------------------------------
# Vocabulary


class Vocabulary:
    """Token <-> id maps with reserved entries at the lowest ids.

    Reserved order: <pad>=0, <unk>=1, <bos>=2, <eos>=3, then the three
    label words (entailment, neutral, contradiction) at 4..6. Label
    words are ordinary vocabulary entries; their embedding rows are
    trained by the models.
    """

    def __init__(self, tokens: list[str]):
        for t in tokens:
            if t in RESERVED:
                raise ValueError(f"reserved token {t!r} in vocabulary body")
        self.id_to_token: list[str] = list(RESERVED) + list(tokens)
        self.token_to_id: dict[str, int] = {
            t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    pad_id = 0
    unk_id = 1
    bos_id = 2
    eos_id = 3
    label_ids = (4, 5, 6)
    reserved_size = len(RESERVED)

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def encode(self, tokens: list[str]) -> list[int]:
        return [self.token_to_id.get(t, self.unk_id) for t in tokens]

    def decode(self, ids, skip_special: bool = True) -> list[str]:
        out = []
        for i in ids:
            if skip_special and i in (self.pad_id, self.bos_id, self.eos_id):
                continue
            out.append(self.id_to_token[int(i)])
        return out

    def label_vocab_id(self, label_class: int) -> int:
        return self.label_ids[label_class]

    def sha256(self) -> str:
        return hashlib.sha256("\n".join(self.id_to_token).encode()).hexdigest()

    def to_json(self) -> str:
        return json.dumps({"tokens": self.id_to_token[self.reserved_size:]})

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        return cls(json.loads(text)["tokens"])


def build_vocab(corpus, min_count: int = 15) -> Vocabulary:
    """Vocabulary over token lists; tokens seen < min_count map to <unk>.

    Ordering is stable: by descending count, then lexicographic.
    """
    counts: Counter[str] = Counter()
    n_lists = 0
    for tokens in corpus:
        n_lists += 1
        counts.update(tokens)
    if n_lists == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = [t for t, c in counts.items() if c >= min_count and t not in RESERVED]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


# ---------------------------------------------------------------------------
# Embeddings


@dataclass
class EmbeddingTable:
    """Fixed pretrained word vectors, one row per vocabulary id."""

    matrix: np.ndarray
    frozen: bool = True

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def random(cls, vocab: Vocabulary, dim: int, rng: np.random.Generator,
               scale: float = 0.5) -> "EmbeddingTable":
        """Frozen random vectors for synthetic/toy corpora that have no
        pretrained vector file. <pad> stays zero."""
        m = rng.uniform(-scale, scale, size=(len(vocab), dim)).astype(np.float32)
        m[vocab.pad_id] = 0.0
        return cls(matrix=m, frozen=True)


def load_embeddings(path, vocab: Vocabulary, dim: int = 300) -> EmbeddingTable:
    """Read a "token v1 ... v_dim" text file into a |V| x dim table.

    In-vocab tokens get their file rows verbatim; everything else,
    including all reserved tokens, gets the zero vector (label words are
    shadowed by trainable rows inside the models).
    """
    matrix = np.zeros((len(vocab), dim), dtype=np.float32)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split(" ")
            if len(parts) != dim + 1:
                raise CorpusFormatError(
                    f"{path}:{lineno}: expected token + {dim} floats, "
                    f"got {len(parts)} fields")
            token = parts[0]
            idx = vocab.token_to_id.get(token)
            if idx is None or idx < vocab.reserved_size:
                continue
            try:
                matrix[idx] = np.array(parts[1:], dtype=np.float32)
            except ValueError:
                raise CorpusFormatError(
                    f"{path}:{lineno}: unparsable float") from None
    return EmbeddingTable(matrix=matrix, frozen=True)


# ---------------------------------------------------------------------------
# Corpus records


@dataclass
class Example:
    """One NLI instance with explanations and optional highlights."""

    id: str
    premise: list[str]
    hypothesis: list[str]
    label: str
    explanations: list[list[str]]
    premise_text: str = ""
    hypothesis_text: str = ""
    explanation_texts: list[str] = field(default_factory=list)
    premise_highlights: list[set[int] | None] = field(default_factory=list)
    hypothesis_highlights: list[set[int] | None] = field(default_factory=list)
    split: str = "train"


@dataclass
class ColumnMap:
    """Maps corpus CSV column names onto Example fields."""

    gold_label: str = "gold_label"
    premise: str = "Sentence1"
    hypothesis: str = "Sentence2"
    explanations: tuple[str, ...] = ("Explanation_1", "Explanation_2",
                                     "Explanation_3")
    premise_highlights: tuple[str, ...] = ("Sentence1_Highlighted_1",
                                           "Sentence1_Highlighted_2",
                                           "Sentence1_Highlighted_3")
    hypothesis_highlights: tuple[str, ...] = ("Sentence2_Highlighted_1",
                                              "Sentence2_Highlighted_2",
                                              "Sentence2_Highlighted_3")
    id: str = "pairID"


def _parse_highlights(cell: str | None, where: str) -> set[int] | None:
    if cell is None:
        return None
    cell = cell.strip().strip("{}")
    if not cell:
        return None
    try:
        return {int(part) for part in cell.split(",")}
    except ValueError:
        raise CorpusFormatError(f"{where}: bad highlight indices {cell!r}") from None


def load_corpus(path, split: str = "train",
                colmap: ColumnMap | None = None) -> tuple[list[Example], int]:
    """Parse a corpus CSV. Returns (examples, skipped_row_count).

    Rows whose gold label is outside the 3-way set are skipped and
    counted rather than rejected, so transfer corpora with extra labels
    load cleanly.
    """
    colmap = colmap or ColumnMap()
    examples: list[Example] = []
    skipped = 0
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        for col in (colmap.gold_label, colmap.premise, colmap.hypothesis):
            if col not in header:
                raise CorpusFormatError(f"{path}: missing required column {col!r}")
        for rownum, row in enumerate(reader, start=2):
            label = (row.get(colmap.gold_label) or "").strip().lower()
            if label not in LABELS:
                skipped += 1
                continue
            premise_text = (row.get(colmap.premise) or "").strip()
            hypothesis_text = (row.get(colmap.hypothesis) or "").strip()
            expl_texts = []
            for col in colmap.explanations:
                cell = (row.get(col) or "").strip()
                if cell:
                    expl_texts.append(cell)
            p_high = [_parse_highlights(row.get(c), f"{path}:{rownum}")
                      for c in colmap.premise_highlights[:max(1, len(expl_texts))]]
            h_high = [_parse_highlights(row.get(c), f"{path}:{rownum}")
                      for c in colmap.hypothesis_highlights[:max(1, len(expl_texts))]]
            examples.append(Example(
                id=(row.get(colmap.id) or "").strip() or f"row{rownum}",
                premise=tokenize(premise_text),
                hypothesis=tokenize(hypothesis_text),
                label=label,
                explanations=[tokenize(t) for t in expl_texts],
                premise_text=premise_text,
                hypothesis_text=hypothesis_text,
                explanation_texts=expl_texts,
                premise_highlights=p_high,
                hypothesis_highlights=h_high,
                split=split,
            ))
    if split in ("valid", "test"):
        short = sum(1 for e in examples if len(e.explanations) < 3)
        if short:
            log.warning("%s: %d %s examples have fewer than 3 explanations",
                        path, short, split)
    elif split == "train":
        missing = sum(1 for e in examples if not e.explanations)
        if missing:
            log.warning("%s: %d train examples have no explanation", path, missing)
    return examples, skipped


# ---------------------------------------------------------------------------
# Encoding and batching


@dataclass
class EncodedExample:
    id: str
    premise: np.ndarray
    hypothesis: np.ndarray
    label: int
    explanations: list[np.ndarray]  # each [<bos> ... <eos>]


def encode_example(e: Example, vocab: Vocabulary,
                   sentence_limit: int = SENTENCE_LIMIT,
                   explanation_limit: int = EXPLANATION_LIMIT) -> EncodedExample | None:
    """Map an Example onto ids; head-keep truncation at the limits.

    Returns None (with a warning) for an empty premise or hypothesis.
    """
    if not e.premise or not e.hypothesis:
        log.warning("skipping %s: empty premise or hypothesis", e.id)
        return None
    prem = np.array(vocab.encode(e.premise[:sentence_limit]), dtype=np.int64)
    hyp = np.array(vocab.encode(e.hypothesis[:sentence_limit]), dtype=np.int64)
    expls = []
    for tokens in e.explanations:
        ids = vocab.encode(tokens[:explanation_limit])
        expls.append(np.array([vocab.bos_id] + ids + [vocab.eos_id], dtype=np.int64))
    return EncodedExample(id=e.id, premise=prem, hypothesis=hyp,
                          label=label_to_class(e.label), explanations=expls)


def encode_corpus(examples: list[Example], vocab: Vocabulary,
                  sentence_limit: int = SENTENCE_LIMIT,
                  explanation_limit: int = EXPLANATION_LIMIT) -> list[EncodedExample]:
    out = []
    for e in examples:
        enc = encode_example(e, vocab, sentence_limit, explanation_limit)
        if enc is not None:
            out.append(enc)
    return out


@dataclass
class Batch:
    """Padded id matrices for one batch; pad id is 0 everywhere."""

    ids: list[str]
    premise: np.ndarray
    premise_len: np.ndarray
    hypothesis: np.ndarray
    hypothesis_len: np.ndarray
    labels: np.ndarray
    explanation: np.ndarray | None = None   # includes <bos>/<eos>
    explanation_len: np.ndarray | None = None

    @property
    def size(self) -> int:
        return len(self.ids)

    @staticmethod
    def _pad_mask(lengths: np.ndarray, width: int) -> np.ndarray:
        return np.arange(width)[None, :] >= lengths[:, None]

    @property
    def premise_pad_mask(self) -> np.ndarray:
        """True exactly on pad positions."""
        return self._pad_mask(self.premise_len, self.premise.shape[1])

    @property
    def hypothesis_pad_mask(self) -> np.ndarray:
        return self._pad_mask(self.hypothesis_len, self.hypothesis.shape[1])


def _pad_rows(rows: list[np.ndarray], pad_id: int = 0) -> tuple[np.ndarray, np.ndarray]:
    lengths = np.array([len(r) for r in rows], dtype=np.int64)
    width = int(lengths.max())
    out = np.full((len(rows), width), pad_id, dtype=np.int64)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out, lengths


def make_batch(chunk: list[EncodedExample], with_explanations: bool) -> Batch:
    prem, prem_len = _pad_rows([e.premise for e in chunk])
    hyp, hyp_len = _pad_rows([e.hypothesis for e in chunk])
    labels = np.array([e.label for e in chunk], dtype=np.int64)
    expl = expl_len = None
    if with_explanations:
        expl, expl_len = _pad_rows([e.explanations[0] for e in chunk])
    return Batch(ids=[e.id for e in chunk], premise=prem, premise_len=prem_len,
                 hypothesis=hyp, hypothesis_len=hyp_len, labels=labels,
                 explanation=expl, explanation_len=expl_len)


def iterate_batches(encoded: list[EncodedExample], batch_size: int = 64,
                    seed: int = 0, epoch: int = 0, shuffle: bool = False,
                    with_explanations: bool | None = None):
    """Deterministic batch stream; the final partial batch is emitted.

    Shuffled order mixes the epoch index into the seed so every epoch
    permutes differently yet reproducibly.
    """
    if with_explanations is None:
        with_explanations = all(e.explanations for e in encoded)
    order = np.arange(len(encoded))
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(len(encoded))
    for start in range(0, len(encoded), batch_size):
        chunk = [encoded[i] for i in order[start:start + batch_size]]
        yield make_batch(chunk, with_explanations)
