"""The architecture zoo.

Every variant is built from the same components: a per-direction LSTM
sentence encoder with max-pooling over real timesteps, the pairwise
feature vector [u, v, |u-v|, u*v], a 3-layer affine classifier, and a
conditioned LSTM decoder over the output vocabulary (optionally with
one attention head per input sentence).

Variants:
  bilstm-max          premise + hypothesis -> label
  hyp-to-label        hypothesis only -> label
  hyp-to-expl         hypothesis only -> explanation
  pred-expl           label first, then explanation conditioned on it
  expl-pred-seq2seq   explanation only (no classifier, no label token)
  expl-pred-att       same with premise/hypothesis attention heads
  expl-to-label       explanation -> label
  autoenc             classifier + shared decoder reconstructing both
                      input sentences from their own representations
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Batch, EmbeddingTable, Vocabulary

ATTENTION_WIDTH = 84  # sentences are pre-truncated to this many tokens


class ModelError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    variant: str
    embed_dim: int = 300
    encoder_hidden: int = 2048
    classifier_width: int = 512
    decoder_hidden: int = 512
    max_decode_len: int = 40
    dropout: float = 0.5

    @property
    def sentence_dim(self) -> int:
        return 2 * self.encoder_hidden   # bidirectional

    @property
    def feature_dim(self) -> int:
        return 4 * self.sentence_dim


@dataclass
class FeatureVector:
    """f = [u, v, |u-v|, u*v] with the constituents kept for inspection."""

    f: ad.Tensor
    u: ad.Tensor
    v: ad.Tensor


def feature_vector(u: ad.Tensor, v: ad.Tensor) -> FeatureVector:
    if u.shape != v.shape:
        raise ad.ShapeError(f"feature_vector: {u.shape} vs {v.shape}")
    f = ad.concat([u, v, ad.abs_(ad.sub(u, v)), ad.mul(u, v)])
    return FeatureVector(f=f, u=u, v=v)


def _real_mask(lengths: np.ndarray, width: int) -> np.ndarray:
    return np.arange(width)[None, :] < lengths[:, None]


def _reverse_rows(ids: np.ndarray, lengths: np.ndarray) -> np.ndarray:
    out = ids.copy()
    for i, ln in enumerate(lengths):
        out[i, :ln] = ids[i, :ln][::-1]
    return out


class WordEmbedding:
    """Frozen pretrained rows plus trainable rows for the label words."""

    def __init__(self, table: EmbeddingTable, vocab: Vocabulary,
                 rng: np.random.Generator):
        if table.matrix.shape[0] != len(vocab):
            raise ModelError("embedding table does not match vocabulary size")
        self.frozen = table.matrix.astype(np.float32)
        self.dim = table.matrix.shape[1]
        self.slots = np.full(len(vocab), -1, dtype=np.int64)
        for slot, vid in enumerate(vocab.label_ids):
            self.slots[vid] = slot
        self.label_rows = ad.uniform_param(
            rng, (len(vocab.label_ids), self.dim), self.dim,
            "embedding.label_rows")

    def lookup(self, ids: np.ndarray) -> ad.Tensor:
        return ad.embedding_lookup(self.frozen, ids, self.label_rows, self.slots)

    def params(self) -> dict[str, ad.Tensor]:
        return {self.label_rows.name: self.label_rows}

    def cast_(self, dtype) -> None:
        self.frozen = self.frozen.astype(dtype)
        self.label_rows.data = self.label_rows.data.astype(dtype)


class BiLstmEncoder:
    """Bidirectional LSTM over token ids with masked max-pooling.

    States at pad positions are forced to zero after every step, so the
    backward direction starts each row's real suffix from a zero state
    and padding can never leak into real timesteps.
    """

    def __init__(self, rng: np.random.Generator, embed_dim: int, hidden: int,
                 prefix: str):
        self.hidden = hidden
        self.prefix = prefix
        self.fwd = ad.init_lstm(rng, embed_dim, hidden, f"{prefix}.fwd")
        self.bwd = ad.init_lstm(rng, embed_dim, hidden, f"{prefix}.bwd")

    def _scan(self, embedding: WordEmbedding, ids: np.ndarray,
              lengths: np.ndarray, cell: ad.LstmParams) -> ad.Tensor:
        B, T = ids.shape
        dtype = embedding.frozen.dtype
        h = ad.tensor(np.zeros((B, self.hidden)), dtype=dtype)
        c = ad.tensor(np.zeros((B, self.hidden)), dtype=dtype)
        steps = []
        for t in range(T):
            x = embedding.lookup(ids[:, t])
            h, c = ad.lstm_cell(x, h, c, cell)
            m = (t < lengths).astype(dtype)[:, None]
            h = ad.mul_const(h, m)
            c = ad.mul_const(c, m)
            steps.append(h)
        return ad.stack_steps(steps)

    def encode(self, embedding: WordEmbedding, ids: np.ndarray,
               lengths: np.ndarray) -> tuple[ad.Tensor, ad.Tensor]:
        """Returns (u, states): u is (B, 2H); states is (T, B, 2H) with
        forward/backward halves aligned per original position."""
        lengths = np.asarray(lengths, dtype=np.int64)
        if (lengths < 1).any():
            raise ad.EmptySequenceError(f"{self.prefix}: all-pad input row")
        fwd_states = self._scan(embedding, ids, lengths, self.fwd)
        rev_states = self._scan(embedding, _reverse_rows(ids, lengths),
                                lengths, self.bwd)
        bwd_states = ad.reverse_steps(rev_states, lengths)
        states = ad.concat([fwd_states, bwd_states])
        u = ad.max_over_time(states, lengths=lengths)
        return u, states

    def params(self) -> dict[str, ad.Tensor]:
        return {**self.fwd.named(f"{self.prefix}.fwd"),
                **self.bwd.named(f"{self.prefix}.bwd")}


class MlpClassifier:
    """Three affine layers, no nonlinearities, 3 output logits."""

    def __init__(self, rng: np.random.Generator, in_dim: int, width: int,
                 prefix: str = "classifier"):
        self.prefix = prefix
        self.w1 = ad.uniform_param(rng, (width, in_dim), in_dim, f"{prefix}.l1.w")
        self.b1 = ad.param(np.zeros(width, dtype=np.float32), f"{prefix}.l1.b")
        self.w2 = ad.uniform_param(rng, (width, width), width, f"{prefix}.l2.w")
        self.b2 = ad.param(np.zeros(width, dtype=np.float32), f"{prefix}.l2.b")
        self.w3 = ad.uniform_param(rng, (3, width), width, f"{prefix}.l3.w")
        self.b3 = ad.param(np.zeros(3, dtype=np.float32), f"{prefix}.l3.b")

    def logits(self, f: ad.Tensor) -> ad.Tensor:
        a1 = ad.linear(f, self.w1, self.b1)
        a2 = ad.linear(a1, self.w2, self.b2)
        return ad.linear(a2, self.w3, self.b3)

    def params(self) -> dict[str, ad.Tensor]:
        return {t.name: t for t in (self.w1, self.b1, self.w2, self.b2,
                                    self.w3, self.b3)}


def classify(clf: MlpClassifier, f: ad.Tensor) -> tuple[ad.Tensor, np.ndarray]:
    """Logits plus argmax labels (ties resolve to the lowest class id)."""
    logits = clf.logits(f)
    return logits, logits.data.argmax(axis=1)


class AttentionHead:
    """One projection head attending over encoder states.

    proj1/proj2 transform the states once per sequence; the decoder
    state is projected per step and dotted against proj1 to produce the
    masked softmax weights; the context is the weighted sum of proj2.
    Pads are masked, so scoring behaves exactly as if every sentence
    were padded out to the fixed attention width.
    """

    def __init__(self, rng: np.random.Generator, state_dim: int, dec_dim: int,
                 attn_dim: int, prefix: str):
        self.prefix = prefix
        self.w1 = ad.uniform_param(rng, (attn_dim, state_dim), state_dim,
                                   f"{prefix}.w1")
        self.b1 = ad.param(np.zeros(attn_dim, dtype=np.float32), f"{prefix}.b1")
        self.wc = ad.uniform_param(rng, (attn_dim, dec_dim), dec_dim,
                                   f"{prefix}.wc")
        self.bc = ad.param(np.zeros(attn_dim, dtype=np.float32), f"{prefix}.bc")
        self.w2 = ad.uniform_param(rng, (attn_dim, state_dim), state_dim,
                                   f"{prefix}.w2")
        self.b2 = ad.param(np.zeros(attn_dim, dtype=np.float32), f"{prefix}.b2")

    def precompute(self, states: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
        proj1 = ad.tanh_(ad.linear(states, self.w1, self.b1))
        proj2 = ad.tanh_(ad.linear(states, self.w2, self.b2))
        return proj1, proj2

    def step(self, h_dec: ad.Tensor, proj1: ad.Tensor, proj2: ad.Tensor,
             real_mask: np.ndarray) -> tuple[ad.Tensor, ad.Tensor]:
        projc = ad.tanh_(ad.linear(h_dec, self.wc, self.bc))
        scores = ad.attn_scores(projc, proj1)
        weights = ad.softmax(scores, mask=real_mask)
        return ad.attn_combine(weights, proj2), weights

    def params(self) -> dict[str, ad.Tensor]:
        return {t.name: t for t in (self.w1, self.b1, self.wc, self.bc,
                                    self.w2, self.b2)}


def attention_step(proj_p: tuple, proj_h: tuple, h_dec: ad.Tensor,
                   head_p: AttentionHead, head_h: AttentionHead,
                   p_mask: np.ndarray, h_mask: np.ndarray):
    """One dual-head attention step; returns (p_ctx, h_ctx, w_p, w_h)."""
    p_ctx, w_p = head_p.step(h_dec, proj_p[0], proj_p[1], p_mask)
    h_ctx, w_h = head_h.step(h_dec, proj_h[0], proj_h[1], h_mask)
    return p_ctx, h_ctx, w_p, w_h


@dataclass
class DecodeResult:
    nll_sum: ad.Tensor          # summed over batch rows and timesteps
    n_tokens: int
    n_correct: int


class LstmDecoder:
    """LSTM decoder conditioned on a source vector.

    h0/c0 are affine projections of the source; in the non-attention
    configuration a third projection of the source is concatenated to
    the word embedding at every timestep. In the attention
    configuration the per-step input is [p_ctx, h_ctx, embedding].
    Recurrent (variational) dropout draws one mask per sequence and
    applies it to the hidden state entering each step, training only.
    """

    def __init__(self, rng: np.random.Generator, cfg: ModelConfig,
                 source_dim: int, vocab_size: int, attention: bool,
                 prefix: str = "decoder"):
        self.prefix = prefix
        self.hidden = cfg.decoder_hidden
        self.max_len = cfg.max_decode_len
        self.dropout = cfg.dropout
        self.attention = attention
        H, E = self.hidden, cfg.embed_dim
        self.w_h0 = ad.uniform_param(rng, (H, source_dim), source_dim,
                                     f"{prefix}.h0.w")
        self.b_h0 = ad.param(np.zeros(H, dtype=np.float32), f"{prefix}.h0.b")
        self.w_c0 = ad.uniform_param(rng, (H, source_dim), source_dim,
                                     f"{prefix}.c0.w")
        self.b_c0 = ad.param(np.zeros(H, dtype=np.float32), f"{prefix}.c0.b")
        if attention:
            in_dim = 2 * H + E   # [p_ctx, h_ctx, embedding]
        else:
            self.w_cond = ad.uniform_param(rng, (H, source_dim), source_dim,
                                           f"{prefix}.cond.w")
            self.b_cond = ad.param(np.zeros(H, dtype=np.float32),
                                   f"{prefix}.cond.b")
            in_dim = E + H       # [embedding, source projection]
        self.cell = ad.init_lstm(rng, in_dim, H, f"{prefix}.cell")
        self.w_out = ad.uniform_param(rng, (vocab_size, H), H, f"{prefix}.out.w")
        self.b_out = ad.param(np.zeros(vocab_size, dtype=np.float32),
                              f"{prefix}.out.b")

    def params(self) -> dict[str, ad.Tensor]:
        named = [self.w_h0, self.b_h0, self.w_c0, self.b_c0]
        if not self.attention:
            named += [self.w_cond, self.b_cond]
        named += [self.w_out, self.b_out]
        out = {t.name: t for t in named}
        out.update(self.cell.named(f"{self.prefix}.cell"))
        return out

    def _init_state(self, source: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
        return (ad.linear(source, self.w_h0, self.b_h0),
                ad.linear(source, self.w_c0, self.b_c0))

    def _step_input(self, emb: ad.Tensor, cond: ad.Tensor | None,
                    attn_ctx=None, h=None) -> ad.Tensor:
        if self.attention:
            heads, p_mask, h_mask = attn_ctx
            head_p, head_h, proj_p, proj_h = heads
            p_ctx, h_ctx, _, _ = attention_step(proj_p, proj_h, h, head_p,
                                                head_h, p_mask, h_mask)
            return ad.concat([p_ctx, h_ctx, emb])
        return ad.concat([emb, cond])

    def teacher_forced(self, embedding: WordEmbedding, source: ad.Tensor,
                       inputs: np.ndarray, targets: np.ndarray,
                       target_mask: np.ndarray, train: bool,
                       rng: np.random.Generator | None = None,
                       attn_ctx=None) -> DecodeResult:
        B, S = inputs.shape
        h, c = self._init_state(source)
        cond = None
        if not self.attention:
            cond = ad.linear(source, self.w_cond, self.b_cond)
        rmask = None
        if train and self.dropout > 0.0:
            rmask = ad.dropout_mask(rng, (B, self.hidden), self.dropout,
                                    embedding.frozen.dtype)
        total = None
        n_correct = 0
        for s in range(S):
            emb = embedding.lookup(inputs[:, s])
            x = self._step_input(emb, cond, attn_ctx, h)
            h_in = ad.mul_const(h, rmask) if rmask is not None else h
            h, c = ad.lstm_cell(x, h_in, c, self.cell)
            probs = ad.softmax(ad.linear(h, self.w_out, self.b_out))
            step_nll = ad.nll_rows(probs, targets[:, s], mask=target_mask[:, s])
            total = step_nll if total is None else ad.add(total, step_nll)
            hits = probs.data.argmax(axis=1) == targets[:, s]
            n_correct += int((hits & target_mask[:, s]).sum())
        return DecodeResult(nll_sum=ad.sum_(total),
                            n_tokens=int(target_mask.sum()),
                            n_correct=n_correct)

    def greedy(self, embedding: WordEmbedding, source: ad.Tensor,
               start_ids: np.ndarray, eos_id: int,
               attn_ctx=None) -> tuple[list[list[int]], list[bool]]:
        """Argmax decoding until <eos> or the length cap; eval mode.

        Returns per-row emitted token ids (exclusive of <eos>) and a
        flag marking rows that emitted nothing before <eos>.
        """
        B = start_ids.shape[0]
        h, c = self._init_state(source)
        cond = None
        if not self.attention:
            cond = ad.linear(source, self.w_cond, self.b_cond)
        current = np.asarray(start_ids, dtype=np.int64)
        emitted: list[list[int]] = [[] for _ in range(B)]
        done = np.zeros(B, dtype=bool)
        for _ in range(self.max_len):
            emb = embedding.lookup(current)
            x = self._step_input(emb, cond, attn_ctx, h)
            h, c = ad.lstm_cell(x, h, c, self.cell)
            logits = ad.linear(h, self.w_out, self.b_out)
            nxt = logits.data.argmax(axis=1)
            for i in range(B):
                if done[i]:
                    continue
                if nxt[i] == eos_id:
                    done[i] = True
                else:
                    emitted[i].append(int(nxt[i]))
            if done.all():
                break
            current = nxt
        return emitted, [len(e) == 0 for e in emitted]


# ---------------------------------------------------------------------------
# Variants


class BaseModel:
    variant = "base"
    has_classifier = False
    has_decoder = False
    explains = False   # decoder emits explanations (vs reconstructions)

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary,
                 table: EmbeddingTable, rng: np.random.Generator):
        if cfg.embed_dim != table.dim:
            raise ModelError(f"embed_dim {cfg.embed_dim} != table dim {table.dim}")
        self.cfg = cfg
        self.vocab = vocab
        self.embedding = WordEmbedding(table, vocab, rng)
        self._parts: list = [self.embedding]

    # -- parameter bookkeeping

    def params(self) -> dict[str, ad.Tensor]:
        out: dict[str, ad.Tensor] = {}
        for part in self._parts:
            out.update(part.params())
        return out

    def manifest(self) -> dict:
        return {
            "variant": self.variant,
            "config": asdict(self.cfg),
            "vocab_sha256": self.vocab.sha256(),
            "parameters": [{"name": n, "shape": list(p.shape)}
                           for n, p in self.params().items()],
        }

    def cast_(self, dtype) -> None:
        self.embedding.cast_(dtype)
        for p in self.params().values():
            p.data = p.data.astype(dtype)

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.params().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def save(self, path, extra_meta: dict | None = None) -> None:
        arrays = {n: p.data for n, p in self.params().items()}
        arrays["embedding.frozen"] = self.embedding.frozen
        meta = {"model": self.manifest(),
                "vocab_tokens": self.vocab.id_to_token[self.vocab.reserved_size:]}
        meta.update(extra_meta or {})
        save_checkpoint(path, arrays, trainable=set(self.params()), meta=meta)

    # -- shared forward pieces

    def _label_loss(self, logits: ad.Tensor, labels: np.ndarray) -> ad.Tensor:
        probs = ad.softmax(logits)
        per_row = ad.nll_rows(probs, labels)
        return ad.scale(ad.sum_(per_row), 1.0 / labels.shape[0])

    def _teacher_inputs(self, batch: Batch, label_ids: np.ndarray | None):
        expl = batch.explanation
        if expl is None:
            raise ModelError("batch carries no explanations")
        inputs = expl[:, :-1].copy()
        if label_ids is not None:
            inputs[:, 0] = label_ids
        targets = expl[:, 1:]
        width = targets.shape[1]
        mask = np.arange(width)[None, :] < (batch.explanation_len - 1)[:, None]
        return inputs, targets, mask

    def _label_vocab_ids(self, label_classes: np.ndarray) -> np.ndarray:
        return np.array([self.vocab.label_vocab_id(int(c))
                         for c in label_classes], dtype=np.int64)

    # -- interface stubs

    def loss(self, batch: Batch, train: bool = True,
             rng: np.random.Generator | None = None,
             alpha: float | None = None) -> tuple[ad.Tensor, dict]:
        raise NotImplementedError

    def predict_labels(self, batch: Batch) -> np.ndarray:
        raise NotImplementedError


class PairClassifier(BaseModel):
    """Premise/hypothesis encoder pair with the feature-vector MLP."""

    variant = "bilstm-max"
    has_classifier = True

    def __init__(self, cfg, vocab, table, rng):
        super().__init__(cfg, vocab, table, rng)
        self.premise_encoder = BiLstmEncoder(rng, cfg.embed_dim,
                                             cfg.encoder_hidden, "premise_encoder")
        self.hypothesis_encoder = BiLstmEncoder(rng, cfg.embed_dim,
                                                cfg.encoder_hidden,
                                                "hypothesis_encoder")
        self.classifier = MlpClassifier(rng, cfg.feature_dim, cfg.classifier_width)
        self._parts += [self.premise_encoder, self.hypothesis_encoder,
                        self.classifier]

    def features(self, batch: Batch):
        u, p_states = self.premise_encoder.encode(self.embedding, batch.premise,
                                                  batch.premise_len)
        v, h_states = self.hypothesis_encoder.encode(self.embedding,
                                                     batch.hypothesis,
                                                     batch.hypothesis_len)
        return feature_vector(u, v), p_states, h_states

    def loss(self, batch, train=True, rng=None, alpha=None):
        fv, _, _ = self.features(batch)
        logits, preds = classify(self.classifier, fv.f)
        return self._label_loss(logits, batch.labels), {"preds": preds}

    def predict_labels(self, batch):
        fv, _, _ = self.features(batch)
        _, preds = classify(self.classifier, fv.f)
        return preds


class HypClassifier(BaseModel):
    """Hypothesis-only label baseline."""

    variant = "hyp-to-label"
    has_classifier = True

    def __init__(self, cfg, vocab, table, rng):
        super().__init__(cfg, vocab, table, rng)
        self.hypothesis_encoder = BiLstmEncoder(rng, cfg.embed_dim,
                                                cfg.encoder_hidden,
                                                "hypothesis_encoder")
        self.classifier = MlpClassifier(rng, cfg.sentence_dim,
                                        cfg.classifier_width)
        self._parts += [self.hypothesis_encoder, self.classifier]

    def loss(self, batch, train=True, rng=None, alpha=None):
        v, _ = self.hypothesis_encoder.encode(self.embedding, batch.hypothesis,
                                              batch.hypothesis_len)
        logits, preds = classify(self.classifier, v)
        return self._label_loss(logits, batch.labels), {"preds": preds}

    def predict_labels(self, batch):
        v, _ = self.hypothesis_encoder.encode(self.embedding, batch.hypothesis,
                                              batch.hypothesis_len)
        return classify(self.classifier, v)[1]


class HypExplainer(BaseModel):
    """Hypothesis-only explanation generator."""

    variant = "hyp-to-expl"
    has_decoder = True
    explains = True

    def __init__(self, cfg, vocab, table, rng):
        super().__init__(cfg, vocab, table, rng)
        self.hypothesis_encoder = BiLstmEncoder(rng, cfg.embed_dim,
                                                cfg.encoder_hidden,
                                                "hypothesis_encoder")
        self.decoder = LstmDecoder(rng, cfg, cfg.sentence_dim, len(vocab),
                                   attention=False)
        self._parts += [self.hypothesis_encoder, self.decoder]

    def _source(self, batch):
        v, _ = self.hypothesis_encoder.encode(self.embedding, batch.hypothesis,
                                              batch.hypothesis_len)
        return v

    def loss(self, batch, train=True, rng=None, alpha=None):
        inputs, targets, mask = self._teacher_inputs(batch, None)
        res = self.decoder.teacher_forced(self.embedding, self._source(batch),
                                          inputs, targets, mask, train, rng)
        loss = ad.scale(res.nll_sum, 1.0 / batch.size)
        return loss, {"tokens": res.n_tokens, "correct": res.n_correct,
                      "nll_sum": float(res.nll_sum.data)}

    def explanation_nll(self, batch, use_gold_label=False):
        inputs, targets, mask = self._teacher_inputs(batch, None)
        res = self.decoder.teacher_forced(self.embedding, self._source(batch),
                                          inputs, targets, mask, train=False)
        return float(res.nll_sum.data), res.n_tokens, res.n_correct

    def generate(self, batch):
        start = np.full(batch.size, self.vocab.bos_id, dtype=np.int64)
        return self.decoder.greedy(self.embedding, self._source(batch), start,
                                   self.vocab.eos_id)


class PredictExplain(PairClassifier):
    """Classify from f, then decode an explanation conditioned on the
    label word (gold at training time, predicted at test time)."""

    variant = "pred-expl"
    has_decoder = True
    explains = True

    def __init__(self, cfg, vocab, table, rng):
        super().__init__(cfg, vocab, table, rng)
        self.decoder = LstmDecoder(rng, cfg, cfg.feature_dim, len(vocab),
                                   attention=False)
        self._parts.append(self.decoder)

    def loss(self, batch, train=True, rng=None, alpha=0.6):
        if alpha is None or not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must be in [0,1], got {alpha}")
        fv, _, _ = self.features(batch)
        logits, preds = classify(self.classifier, fv.f)
        label_loss = self._label_loss(logits, batch.labels)
        label_ids = self._label_vocab_ids(batch.labels)  # gold at train
        inputs, targets, mask = self._teacher_inputs(batch, label_ids)
        res = self.decoder.teacher_forced(self.embedding, fv.f, inputs,
                                          targets, mask, train, rng)
        expl_loss = ad.scale(res.nll_sum, 1.0 / batch.size)
        total = ad.add(ad.scale(label_loss, alpha),
                       ad.scale(expl_loss, 1.0 - alpha))
        return total, {"preds": preds, "tokens": res.n_tokens,
                       "correct": res.n_correct,
                       "label_loss": float(label_loss.data),
                       "expl_loss": float(expl_loss.data)}

    def explanation_nll(self, batch, use_gold_label=False):
        """Teacher-forced NLL for perplexity; conditions on the
        predicted label unless told otherwise."""
        fv, _, _ = self.features(batch)
        if use_gold_label:
            classes = batch.labels
        else:
            _, classes = classify(self.classifier, fv.f)
        inputs, targets, mask = self._teacher_inputs(
            batch, self._label_vocab_ids(classes))
        res = self.decoder.teacher_forced(self.embedding, fv.f, inputs,
                                          targets, mask, train=False)
        return float(res.nll_sum.data), res.n_tokens, res.n_correct

    def generate(self, batch):
        """Predict the label first, then decode conditioned on it."""
        fv, _, _ = self.features(batch)
        _, preds = classify(self.classifier, fv.f)
        start = self._label_vocab_ids(preds)
        expl, empty = self.decoder.greedy(self.embedding, fv.f, start,
                                          self.vocab.eos_id)
        return expl, empty, preds


class ExplainSeq2Seq(BaseModel):
    """pred-expl without the classifier and without the label token."""

    variant = "expl-pred-seq2seq"
    has_decoder = True
    explains = True

    def __init__(self, cfg, vocab, table, rng):
        super().__init__(cfg, vocab, table, rng)
        self.premise_encoder = BiLstmEncoder(rng, cfg.embed_dim,
                                             cfg.encoder_hidden, "premise_encoder")
        self.hypothesis_encoder = BiLstmEncoder(rng, cfg.embed_dim,
                                                cfg.encoder_hidden,
                                                "hypothesis_encoder")
        self.decoder = LstmDecoder(rng, cfg, cfg.feature_dim, len(vocab),
                                   attention=False)
        self._parts += [self.premise_encoder, self.hypothesis_encoder,
                        self.decoder]

    def _source(self, batch):
        u, p_states = self.premise_encoder.encode(self.embedding, batch.premise,
                                                  batch.premise_len)
        v, h_states = self.hypothesis_encoder.encode(self.embedding,
                                                     batch.hypothesis,
                                                     batch.hypothesis_len)
        return feature_vector(u, v), p_states, h_states

    def loss(self, batch, train=True, rng=None, alpha=None):
        fv, _, _ = self._source(batch)
        inputs, targets, mask = self._teacher_inputs(batch, None)
        res = self.decoder.teacher_forced(self.embedding, fv.f, inputs,
                                          targets, mask, train, rng)
        loss = ad.scale(res.nll_sum, 1.0 / batch.size)
        return loss, {"tokens": res.n_tokens, "correct": res.n_correct,
                      "nll_sum": float(res.nll_sum.data)}

    def explanation_nll(self, batch, use_gold_label=False):
        fv, _, _ = self._source(batch)
        inputs, targets, mask = self._teacher_inputs(batch, None)
        res = self.decoder.teacher_forced(self.embedding, fv.f, inputs,
                                          targets, mask, train=False)
        return float(res.nll_sum.data), res.n_tokens, res.n_correct

    def generate(self, batch):
        fv, _, _ = self._source(batch)
        start = np.full(batch.size, self.vocab.bos_id, dtype=np.int64)
        return self.decoder.greedy(self.embedding, fv.f, start,
                                   self.vocab.eos_id)


class ExplainAttention(ExplainSeq2Seq):
    """Attention variant: two separate, structurally identical heads
    attend over premise and hypothesis states while decoding."""

    variant = "expl-pred-att"

    def __init__(self, cfg, vocab, table, rng):
        BaseModel.__init__(self, cfg, vocab, table, rng)
        self.premise_encoder = BiLstmEncoder(rng, cfg.embed_dim,
                                             cfg.encoder_hidden, "premise_encoder")
        self.hypothesis_encoder = BiLstmEncoder(rng, cfg.embed_dim,
                                                cfg.encoder_hidden,
                                                "hypothesis_encoder")
        attn_dim = cfg.decoder_hidden
        self.head_p = AttentionHead(rng, cfg.sentence_dim, cfg.decoder_hidden,
                                    attn_dim, "attention.premise")
        self.head_h = AttentionHead(rng, cfg.sentence_dim, cfg.decoder_hidden,
                                    attn_dim, "attention.hypothesis")
        self.decoder = LstmDecoder(rng, cfg, cfg.feature_dim, len(vocab),
                                   attention=True)
        self._parts += [self.premise_encoder, self.hypothesis_encoder,
                        self.head_p, self.head_h, self.decoder]

    def _attn_ctx(self, batch, p_states, h_states):
        proj_p = self.head_p.precompute(p_states)
        proj_h = self.head_h.precompute(h_states)
        p_mask = _real_mask(batch.premise_len, batch.premise.shape[1])
        h_mask = _real_mask(batch.hypothesis_len, batch.hypothesis.shape[1])
        heads = (self.head_p, self.head_h, proj_p, proj_h)
        return (heads, p_mask, h_mask)

    def loss(self, batch, train=True, rng=None, alpha=None):
        fv, p_states, h_states = self._source(batch)
        ctx = self._attn_ctx(batch, p_states, h_states)
        inputs, targets, mask = self._teacher_inputs(batch, None)
        res = self.decoder.teacher_forced(self.embedding, fv.f, inputs,
                                          targets, mask, train, rng,
                                          attn_ctx=ctx)
        loss = ad.scale(res.nll_sum, 1.0 / batch.size)
        return loss, {"tokens": res.n_tokens, "correct": res.n_correct,
                      "nll_sum": float(res.nll_sum.data)}

    def explanation_nll(self, batch, use_gold_label=False):
        fv, p_states, h_states = self._source(batch)
        ctx = self._attn_ctx(batch, p_states, h_states)
        inputs, targets, mask = self._teacher_inputs(batch, None)
        res = self.decoder.teacher_forced(self.embedding, fv.f, inputs,
                                          targets, mask, train=False,
                                          attn_ctx=ctx)
        return float(res.nll_sum.data), res.n_tokens, res.n_correct

    def generate(self, batch):
        fv, p_states, h_states = self._source(batch)
        ctx = self._attn_ctx(batch, p_states, h_states)
        start = np.full(batch.size, self.vocab.bos_id, dtype=np.int64)
        return self.decoder.greedy(self.embedding, fv.f, start,
                                   self.vocab.eos_id, attn_ctx=ctx)


class ExplanationClassifier(BaseModel):
    """Label prediction from the explanation text alone."""

    variant = "expl-to-label"
    has_classifier = True

    def __init__(self, cfg, vocab, table, rng):
        super().__init__(cfg, vocab, table, rng)
        self.explanation_encoder = BiLstmEncoder(rng, cfg.embed_dim,
                                                 cfg.encoder_hidden,
                                                 "explanation_encoder")
        self.classifier = MlpClassifier(rng, cfg.sentence_dim,
                                        cfg.classifier_width)
        self._parts += [self.explanation_encoder, self.classifier]

    def _encode(self, batch):
        if batch.explanation is None:
            raise ModelError("batch carries no explanations")
        u, _ = self.explanation_encoder.encode(self.embedding, batch.explanation,
                                               batch.explanation_len)
        return u

    def loss(self, batch, train=True, rng=None, alpha=None):
        logits, preds = classify(self.classifier, self._encode(batch))
        return self._label_loss(logits, batch.labels), {"preds": preds}

    def predict_labels(self, batch):
        return classify(self.classifier, self._encode(batch))[1]

    def classify_token_ids(self, token_ids: list[int]) -> int:
        """Label one raw explanation (ids without <bos>/<eos>)."""
        if not token_ids:
            raise ModelError("empty explanation")
        return self._classify_wrapped(token_ids)

    def _classify_wrapped(self, token_ids: list[int]) -> int:
        row = np.array([[self.vocab.bos_id] + list(token_ids)
                        + [self.vocab.eos_id]], dtype=np.int64)
        u, _ = self.explanation_encoder.encode(
            self.embedding, row, np.array([row.shape[1]], dtype=np.int64))
        return int(classify(self.classifier, u)[1][0])


class AutoEncoder(PairClassifier):
    """Classifier trunk plus one shared decoder that reconstructs the
    premise from u and the hypothesis from v."""

    variant = "autoenc"
    has_decoder = True

    def __init__(self, cfg, vocab, table, rng):
        super().__init__(cfg, vocab, table, rng)
        self.decoder = LstmDecoder(rng, cfg, cfg.sentence_dim, len(vocab),
                                   attention=False)
        self._parts.append(self.decoder)

    def _reconstruction_rows(self, ids: np.ndarray, lengths: np.ndarray):
        cap = self.cfg.max_decode_len
        rows = []
        for i in range(ids.shape[0]):
            body = ids[i, :min(int(lengths[i]), cap)]
            rows.append(np.concatenate(([self.vocab.bos_id], body,
                                        [self.vocab.eos_id])))
        width = max(len(r) for r in rows)
        mat = np.zeros((len(rows), width), dtype=np.int64)
        lens = np.zeros(len(rows), dtype=np.int64)
        for i, r in enumerate(rows):
            mat[i, :len(r)] = r
            lens[i] = len(r)
        inputs = mat[:, :-1]
        targets = mat[:, 1:]
        mask = np.arange(width - 1)[None, :] < (lens - 1)[:, None]
        return inputs, targets, mask

    def loss(self, batch, train=True, rng=None, alpha=0.6):
        if alpha is None or not 0.0 <= alpha <= 1.0:
            raise ValueError(f"alpha must be in [0,1], got {alpha}")
        fv, _, _ = self.features(batch)
        logits, preds = classify(self.classifier, fv.f)
        label_loss = self._label_loss(logits, batch.labels)
        rec_total = None
        for source, ids, lengths in ((fv.u, batch.premise, batch.premise_len),
                                     (fv.v, batch.hypothesis,
                                      batch.hypothesis_len)):
            inputs, targets, mask = self._reconstruction_rows(ids, lengths)
            res = self.decoder.teacher_forced(self.embedding, source, inputs,
                                              targets, mask, train, rng)
            rec_total = (res.nll_sum if rec_total is None
                         else ad.add(rec_total, res.nll_sum))
        rec_loss = ad.scale(rec_total, 1.0 / batch.size)
        total = ad.add(ad.scale(label_loss, alpha),
                       ad.scale(rec_loss, 1.0 - alpha))
        return total, {"preds": preds,
                       "label_loss": float(label_loss.data),
                       "expl_loss": float(rec_loss.data)}


class ExplainThenPredict:
    """Pipeline: generate an explanation, then label it in isolation."""

    def __init__(self, generator, expl_classifier: ExplanationClassifier):
        if not generator.has_decoder:
            raise ModelError("generator must be a decoding variant")
        self.generator = generator
        self.expl_classifier = expl_classifier

    def predict(self, batch: Batch):
        """Returns (labels, explanation ids, empty-explanation flags).

        The label depends only on the generated explanation; an empty
        generation is still classified (from the bare <bos><eos> pair)
        and flagged.
        """
        expl, empty = self.generator.generate(batch)
        labels = np.array([self.expl_classifier._classify_wrapped(e)
                           for e in expl], dtype=np.int64)
        return labels, expl, empty


VARIANTS: dict[str, type[BaseModel]] = {
    cls.variant: cls for cls in (
        PairClassifier, HypClassifier, HypExplainer, PredictExplain,
        ExplainSeq2Seq, ExplainAttention, ExplanationClassifier, AutoEncoder)
}


def build_model(cfg: ModelConfig, vocab: Vocabulary, table: EmbeddingTable,
                rng: np.random.Generator) -> BaseModel:
    try:
        cls = VARIANTS[cfg.variant]
    except KeyError:
        raise ModelError(f"unknown variant {cfg.variant!r}; "
                         f"choose from {sorted(VARIANTS)}") from None
    return cls(cfg, vocab, table, rng)


def load_model(path) -> BaseModel:
    """Rebuild a model from a self-contained checkpoint directory."""
    arrays, manifest = load_checkpoint(path)
    meta = manifest["meta"]
    cfg = ModelConfig(**meta["model"]["config"])
    vocab = Vocabulary(meta["vocab_tokens"])
    if vocab.sha256() != meta["model"]["vocab_sha256"]:
        raise ModelError(f"vocabulary hash mismatch in {path}")
    table = EmbeddingTable(matrix=arrays.pop("embedding.frozen"), frozen=True)
    model = build_model(cfg, vocab, table, np.random.default_rng(0))
    params = model.params()
    missing = set(params) - set(arrays)
    if missing:
        raise ModelError(f"checkpoint missing parameters: {sorted(missing)}")
    for name, p in params.items():
        if tuple(arrays[name].shape) != p.shape:
            raise ModelError(f"shape mismatch for {name}")
        p.data = arrays[name]
    return model
