"""Training loops, the weighted joint loss, model selection, grids.

One run: per epoch, shuffle with the epoch index mixed into the seed,
take SGD steps on the variant's loss, measure validation metrics, keep
the checkpoint that is best under the variant's selection criterion
(label accuracy for classifier-led variants, explanation perplexity for
generator-led ones), then decay the learning rate once.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import EmbeddingTable, EncodedExample, Vocabulary, iterate_batches
from .evaluation import label_accuracy, perplexity, predict_all
from .models import ModelConfig, build_model

log = logging.getLogger(__name__)

ACCURACY_VARIANTS = ("bilstm-max", "hyp-to-label", "pred-expl",
                     "expl-to-label", "autoenc")
PERPLEXITY_VARIANTS = ("hyp-to-expl", "expl-pred-seq2seq", "expl-pred-att")
ALPHA_VARIANTS = ("pred-expl", "autoenc")
ALPHA_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))
DECODER_GRID = (512, 1024, 2048, 4096)


class TrainingError(RuntimeError):
    pass


def joint_loss(l_label, l_expl, alpha: float):
    """alpha * label loss + (1 - alpha) * explanation loss.

    Accepts scalars or Tensors; alpha outside [0, 1] is an error.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0,1], got {alpha}")
    if isinstance(l_label, ad.Tensor):
        return ad.add(ad.scale(l_label, alpha), ad.scale(l_expl, 1.0 - alpha))
    return alpha * l_label + (1.0 - alpha) * l_expl


@dataclass
class TrainConfig:
    variant: str
    alpha: float | None = None
    epochs: int = 20
    seed: int = 0
    batch_size: int = 64
    lr: float = 0.1
    decay: float = 0.99
    dropout: float = 0.5
    embed_dim: int = 300
    encoder_hidden: int = 2048
    classifier_width: int = 512
    decoder_hidden: int = 512
    max_decode_len: int = 40
    clip_norm: float | None = None     # off unless configured
    weight_decay: float = 0.0          # off unless configured
    criterion: str = ""                # resolved per variant when empty

    def __post_init__(self):
        if self.variant in ALPHA_VARIANTS:
            if self.alpha is None:
                raise TrainingError(f"{self.variant} requires alpha")
            if not 0.0 <= self.alpha <= 1.0:
                raise TrainingError(f"alpha must be in [0,1], got {self.alpha}")
        elif self.alpha is not None:
            raise TrainingError(f"{self.variant} takes no alpha")
        if not self.criterion:
            self.criterion = ("val-accuracy" if self.variant in ACCURACY_VARIANTS
                              else "val-perplexity")
        if self.criterion not in ("val-accuracy", "val-perplexity"):
            raise TrainingError(f"unknown criterion {self.criterion!r}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(variant=self.variant, embed_dim=self.embed_dim,
                           encoder_hidden=self.encoder_hidden,
                           classifier_width=self.classifier_width,
                           decoder_hidden=self.decoder_hidden,
                           max_decode_len=self.max_decode_len,
                           dropout=self.dropout)


@dataclass
class TrainData:
    train: list[EncodedExample]
    valid: list[EncodedExample]
    vocab: Vocabulary
    table: EmbeddingTable


@dataclass
class RunRecord:
    """Append-only trace of one training run."""

    config: dict
    seed: int
    criterion: str
    epochs: list[dict] = field(default_factory=list)
    best_epoch: int | None = None
    best_value: float | None = None
    checkpoint_path: str | None = None
    aborted: bool = False
    note: str = ""

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RunRecord":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _better(value: float, best: float | None, criterion: str) -> bool:
    if best is None:
        return True
    if criterion == "val-accuracy":
        return value > best
    return value < best


def _needs_explanations(variant: str) -> bool:
    return variant in ("hyp-to-expl", "pred-expl", "expl-pred-seq2seq",
                       "expl-pred-att", "expl-to-label")


def _validation_metrics(model, valid, batch_size) -> dict:
    metrics: dict = {}
    if model.has_classifier:
        preds, golds = predict_all(model, valid, batch_size,
                                   with_explanations=_needs_explanations(
                                       model.variant))
        metrics["val_accuracy"] = label_accuracy(preds, golds)
    if model.explains:
        ppl = perplexity(model, valid, batch_size)
        metrics["val_perplexity"] = ppl.perplexity
        metrics["val_token_accuracy"] = ppl.token_accuracy
    return metrics


def train(config: TrainConfig, data: TrainData, out_dir) -> RunRecord:
    """Run one training configuration; returns its RunRecord.

    All randomness derives from config.seed: stream 0 initializes
    weights, stream (1, epoch) drives dropout, and the batch shuffle
    mixes the epoch index into the seed. Divergence (non-finite loss or
    gradients) aborts the run, keeping the last good checkpoint.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    record = RunRecord(config=asdict(config), seed=config.seed,
                       criterion=config.criterion)
    model = build_model(config.model_config(), data.vocab, data.table,
                        np.random.default_rng([config.seed, 0]))
    params = model.params()
    state = ad.SgdState(base_lr=config.lr, decay=config.decay)
    needs_expl = _needs_explanations(config.variant)
    ckpt_dir = out_dir / "checkpoints" / "best"

    for epoch in range(config.epochs):
        drop_rng = np.random.default_rng([config.seed, 1, epoch])
        epoch_losses = []
        arrived = True
        for batch in iterate_batches(data.train, config.batch_size,
                                     seed=config.seed, epoch=epoch,
                                     shuffle=True,
                                     with_explanations=needs_expl):
            with ad.Tape() as tape:
                loss, _ = model.loss(batch, train=True, rng=drop_rng,
                                     alpha=config.alpha)
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                record.aborted = True
                record.note = f"non-finite loss at epoch {epoch}"
                log.error("%s; keeping last good checkpoint", record.note)
                arrived = False
                break
            ad.backward(tape, loss)
            try:
                ad.sgd_step(params, state, clip_norm=config.clip_norm,
                            weight_decay=config.weight_decay)
            except ad.GradientError as err:
                record.aborted = True
                record.note = f"epoch {epoch}: {err}"
                log.error("%s; keeping last good checkpoint", record.note)
                arrived = False
                break
            epoch_losses.append(loss_val)
        if not arrived:
            break
        entry = {"epoch": epoch, "lr": state.lr,
                 "train_loss": float(np.mean(epoch_losses))}
        entry.update(_validation_metrics(model, data.valid, config.batch_size))
        record.epochs.append(entry)
        value = entry["val_accuracy" if config.criterion == "val-accuracy"
                      else "val_perplexity"]
        if _better(value, record.best_value, config.criterion):
            record.best_value = value
            record.best_epoch = epoch
            model.save(ckpt_dir, extra_meta={"epoch": epoch,
                                             "criterion": config.criterion,
                                             "criterion_value": value})
            record.checkpoint_path = str(ckpt_dir)
        state.advance_epoch()   # decay once per completed epoch
    record.save(out_dir / "run.json")
    return record


def grid_select(configs: list[TrainConfig], data: TrainData,
                out_root) -> tuple[RunRecord, list[RunRecord]]:
    """Train every config and return (best record, all records).

    All configs must share a selection criterion. Ties break toward the
    smaller decoder size, then the lower alpha.
    """
    if not configs:
        raise TrainingError("empty grid")
    criteria = {c.criterion for c in configs}
    if len(criteria) != 1:
        raise TrainingError(f"grid mixes selection criteria: {criteria}")
    criterion = criteria.pop()
    out_root = Path(out_root)
    records = []
    for i, cfg in enumerate(configs):
        records.append(train(cfg, data, out_root / f"grid{i:02d}"))

    def sort_key(item):
        rec, cfg = item
        value = rec.best_value
        if value is None:   # aborted before any epoch finished
            value = -math.inf if criterion == "val-accuracy" else math.inf
        primary = -value if criterion == "val-accuracy" else value
        alpha = cfg.alpha if cfg.alpha is not None else math.inf
        return (primary, cfg.decoder_hidden, alpha)

    best_rec, _ = min(zip(records, configs), key=sort_key)
    return best_rec, records
