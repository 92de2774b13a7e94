"""Evaluation protocol: accuracy, perplexity, multi-reference BLEU,
inter-annotator BLEU, partial-score aggregation, and transfer runs.

Conventions pinned here so numbers are comparable across runs:
  * perplexity = exp(total teacher-forced NLL / token count) over the
    FIRST gold explanation, <eos> counted, <bos> not;
  * BLEU is corpus-level BLEU-4 in [0, 1] with add-one smoothing on
    n >= 2 whenever a clipped count is zero, brevity penalty from the
    closest reference length (ties to the shorter);
  * generated explanations are scored against gold explanations 1-2,
    the same two references the inter-annotator score uses.
"""

from __future__ import annotations

import csv
import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .data import (Batch, ColumnMap, EncodedExample, Example, encode_corpus,
                   iterate_batches, load_corpus)

BLEU_MAX_N = 4


class EvaluationError(ValueError):
    pass


def label_accuracy(preds, golds) -> float:
    """Percentage of matching labels."""
    preds = np.asarray(preds)
    golds = np.asarray(golds)
    if preds.shape != golds.shape or preds.size == 0:
        raise EvaluationError(f"bad prediction/gold shapes {preds.shape} vs "
                              f"{golds.shape}")
    return 100.0 * float((preds == golds).sum()) / preds.size


# ---------------------------------------------------------------------------
# BLEU


def _ngrams(tokens, n) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(cand_len: int, refs) -> int:
    return min((abs(len(r) - cand_len), len(r)) for r in refs)[1]


def bleu(candidates, reference_sets) -> float:
    """Corpus-level BLEU-4 in [0, 1].

    `candidates` is a list of token lists; `reference_sets[i]` is the
    list of reference token lists for candidate i (at least one
    non-empty reference each).
    """
    if not candidates:
        raise EvaluationError("empty candidate corpus")
    if len(candidates) != len(reference_sets):
        raise EvaluationError("candidate/reference length mismatch")
    clipped = [0] * (BLEU_MAX_N + 1)
    totals = [0] * (BLEU_MAX_N + 1)
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, reference_sets):
        refs = [r for r in refs if r]
        if not refs:
            raise EvaluationError("candidate with no non-empty reference")
        cand_len += len(cand)
        ref_len += _closest_ref_len(len(cand), refs)
        for n in range(1, BLEU_MAX_N + 1):
            counts = _ngrams(cand, n)
            if not counts:
                continue
            max_ref = Counter()
            for r in refs:
                for gram, c in _ngrams(r, n).items():
                    if c > max_ref[gram]:
                        max_ref[gram] = c
            clipped[n] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[n] += sum(counts.values())
    log_sum = 0.0
    for n in range(1, BLEU_MAX_N + 1):
        num, den = clipped[n], totals[n]
        if n >= 2 and num == 0:
            num += 1
            den += 1
        if num == 0 or den == 0:
            return 0.0
        log_sum += math.log(num / den) / BLEU_MAX_N
    if cand_len == 0:
        return 0.0
    bp = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_sum)


def inter_annotator_bleu(examples: list[Example]) -> tuple[float, int, int]:
    """BLEU of explanation 3 against explanations 1-2.

    Returns (score, examples used, examples skipped for lacking three
    explanations).
    """
    cands, refs = [], []
    skipped = 0
    for e in examples:
        if len(e.explanations) >= 3:
            cands.append(e.explanations[2])
            refs.append([e.explanations[0], e.explanations[1]])
        else:
            skipped += 1
    if not cands:
        raise EvaluationError("no examples with three explanations")
    return bleu(cands, refs), len(cands), skipped


# ---------------------------------------------------------------------------
# Perplexity


@dataclass
class PerplexityResult:
    perplexity: float
    total_nll: float
    n_tokens: int
    token_accuracy: float


def perplexity(model, encoded: list[EncodedExample],
               batch_size: int = 64) -> PerplexityResult:
    """Teacher-forced perplexity over the first gold explanations."""
    total_nll = 0.0
    n_tokens = 0
    n_correct = 0
    for batch in iterate_batches(encoded, batch_size, with_explanations=True):
        nll, tokens, correct = model.explanation_nll(batch)
        total_nll += nll
        n_tokens += tokens
        n_correct += correct
    if n_tokens == 0:
        raise EvaluationError("no explanation tokens to score")
    return PerplexityResult(perplexity=math.exp(total_nll / n_tokens),
                            total_nll=total_nll, n_tokens=n_tokens,
                            token_accuracy=n_correct / n_tokens)


# ---------------------------------------------------------------------------
# Human partial-score aggregation


@dataclass
class AnnotationRecord:
    """One manually graded explanation.

    Entailment grades are k-of-n partial scores; neutral/contradiction
    grades are 0-or-1 (n = 1).
    """

    example_id: str
    predicted_label_correct: bool
    k: int
    n: int

    def __post_init__(self):
        if not 0 <= self.k <= self.n or self.n < 1:
            raise EvaluationError(
                f"{self.example_id}: bad partial score {self.k}/{self.n}")

    @property
    def score(self) -> float:
        return self.k / self.n


def load_annotations(path) -> list[AnnotationRecord]:
    """Annotation CSV columns: id, predicted_label_correct, k, n."""
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(AnnotationRecord(
                example_id=row["id"],
                predicted_label_correct=row["predicted_label_correct"].strip()
                .lower() in ("1", "true", "yes"),
                k=int(row["k"]), n=int(row["n"])))
    return records


def expl_at_k(records: list[AnnotationRecord],
              mode: str = "partial") -> float | None:
    """Explanation correctness over the label-correct subset, x100.

    "partial" averages the k/n scores (fractional values come out, e.g.
    34.68); "strict" counts only full scores. Returns None when no
    record has a correct label (undefined).
    """
    if mode not in ("partial", "strict"):
        raise EvaluationError(f"unknown mode {mode!r}")
    subset = [r for r in records if r.predicted_label_correct]
    if not subset:
        return None
    if mode == "strict":
        return 100.0 * sum(1 for r in subset if r.score >= 1.0) / len(subset)
    return 100.0 * sum(r.score for r in subset) / len(subset)


# ---------------------------------------------------------------------------
# Reports


@dataclass
class EvalReport:
    """Metric bundle with provenance of how each number was computed."""

    accuracy: float | None = None
    perplexity: float | None = None
    bleu: float | None = None
    expl_at_k: float | None = None
    counts: dict = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps({
            "accuracy": self.accuracy, "perplexity": self.perplexity,
            "bleu": self.bleu, "expl_at_k": self.expl_at_k,
            "counts": self.counts, "provenance": self.provenance}, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def table(self) -> str:
        def fmt(v, scale=1.0):
            return "-" if v is None else f"{v * scale:.4f}"

        lines = [
            f"{'metric':<18}{'value':>12}",
            f"{'accuracy %':<18}{fmt(self.accuracy):>12}",
            f"{'perplexity':<18}{fmt(self.perplexity):>12}",
            f"{'bleu':<18}{fmt(self.bleu):>12}",
            f"{'bleu x100':<18}{fmt(self.bleu, 100.0):>12}",
            f"{'expl@k %':<18}{fmt(self.expl_at_k):>12}",
        ]
        for key, val in sorted(self.counts.items()):
            lines.append(f"{key:<18}{val:>12}")
        return "\n".join(lines)


def predict_all(model, encoded, batch_size=64, expl_classifier=None,
                with_explanations=None):
    """Labels for every example; uses the explain-then-predict pipeline
    when the model itself has no classifier."""
    from .models import ExplainThenPredict  # local import to avoid a cycle

    preds = []
    golds = []
    if with_explanations is None:
        with_explanations = all(e.explanations for e in encoded)
    pipe = None
    if not model.has_classifier:
        if expl_classifier is None:
            raise EvaluationError(f"{model.variant} needs an explanation "
                                  "classifier to predict labels")
        pipe = ExplainThenPredict(model, expl_classifier)
    for batch in iterate_batches(encoded, batch_size,
                                 with_explanations=with_explanations):
        if pipe is not None:
            labels, _, _ = pipe.predict(batch)
        else:
            labels = model.predict_labels(batch)
        preds.extend(int(x) for x in labels)
        golds.extend(int(x) for x in batch.labels)
    return np.array(preds), np.array(golds)


def generate_all(model, encoded, batch_size=64):
    """Greedy explanations for every example, as token-id lists."""
    out = []
    flags = []
    for batch in iterate_batches(encoded, batch_size,
                                 with_explanations=all(e.explanations
                                                       for e in encoded)):
        result = model.generate(batch)
        expl, empty = result[0], result[1]
        out.extend(expl)
        flags.extend(empty)
    return out, flags


def evaluate_model(model, encoded: list[EncodedExample],
                   examples: list[Example] | None = None, split: str = "valid",
                   batch_size: int = 64, expl_classifier=None) -> EvalReport:
    """Full metric sweep for one model on one split.

    Accuracy comes from the model's own classifier, or from the
    explain-then-predict pipeline for generator-only variants (when an
    explanation classifier is supplied). BLEU scores greedy generations
    against gold explanations 1-2 of the raw examples.
    """
    report = EvalReport(provenance={
        "split": split, "variant": model.variant,
        "reference_policy": "gold explanations 1-2",
        "vocab_sha256": model.vocab.sha256()})
    report.counts["examples"] = len(encoded)
    can_label = model.has_classifier or expl_classifier is not None
    if can_label:
        preds, golds = predict_all(model, encoded, batch_size, expl_classifier)
        report.accuracy = label_accuracy(preds, golds)
    if model.explains and all(e.explanations for e in encoded):
        ppl = perplexity(model, encoded, batch_size)
        report.perplexity = ppl.perplexity
        report.counts["explanation_tokens"] = ppl.n_tokens
        report.provenance["perplexity_total_nll"] = ppl.total_nll
        if examples:
            by_id = {e.id: e for e in examples}
            generated, _ = generate_all(model, encoded, batch_size)
            cands, refs = [], []
            for enc, gen in zip(encoded, generated):
                raw = by_id.get(enc.id)
                if raw is None or not raw.explanations:
                    continue
                cands.append(model.vocab.decode(gen))
                refs.append(raw.explanations[:2])
            if cands:
                report.bleu = bleu(cands, refs)
                report.counts["bleu_candidates"] = len(cands)
    return report


def transfer_eval(model, corpus_path, colmap: ColumnMap | None = None,
                  split: str = "transfer", batch_size: int = 64,
                  expl_classifier=None):
    """Out-of-domain evaluation without fine-tuning.

    Returns (EvalReport, dump rows); dump rows carry one generated
    explanation per example for explanation-capable variants, ready for
    human annotation. No parameter is updated.
    """
    examples, skipped = load_corpus(corpus_path, split=split, colmap=colmap)
    encoded = encode_corpus(examples, model.vocab)
    report = EvalReport(provenance={
        "split": split, "variant": model.variant, "corpus": str(corpus_path),
        "vocab_sha256": model.vocab.sha256()})
    report.counts["examples"] = len(encoded)
    report.counts["skipped_rows"] = skipped
    if model.has_classifier or expl_classifier is not None:
        preds, golds = predict_all(model, encoded, batch_size, expl_classifier,
                                   with_explanations=False)
        report.accuracy = label_accuracy(preds, golds)
    else:
        preds = None
    dumps = []
    if model.explains:
        generated, _ = generate_all(model, encoded, batch_size)
        by_id = {e.id: e for e in examples}
        for i, (enc, gen) in enumerate(zip(encoded, generated)):
            raw = by_id[enc.id]
            label = int(preds[i]) if preds is not None else None
            dumps.append({
                "id": enc.id,
                "premise": raw.premise_text,
                "hypothesis": raw.hypothesis_text,
                "predicted_label": label,
                "explanation": " ".join(model.vocab.decode(gen)),
            })
    return report, dumps
