"""Command-line entry point.

Subcommands: filter, validate, train, grid, eval, generate, bleu,
repr-export. Every invocation creates a run directory named by
timestamp and seed containing a reproducibility manifest (resolved
config, argv, and sha256 of every input file); artifacts land in
checkpoints/, reports/, and dumps/ underneath unless an explicit output
path is given.

Exit codes: 0 success, 1 input/validation failure, 2 runtime error
(argparse itself exits 2 on unknown flags).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import CheckpointError
from .config import (ConfigError, apply_override, empty_config, load_config,
                     resolve_path)
from .data import (ColumnMap, CorpusFormatError, EmbeddingTable, build_vocab,
                   encode_corpus, load_corpus, load_embeddings, tokenize)
from .evaluation import (EvaluationError, EvalReport, bleu, evaluate_model,
                         expl_at_k, inter_annotator_bleu, load_annotations,
                         transfer_eval)
from .models import ModelError, load_model
from .quality import filter_example, validate_annotation
from .training import (ALPHA_GRID, ALPHA_VARIANTS, DECODER_GRID, TrainConfig,
                       TrainData, TrainingError, grid_select, train)

INPUT_ERRORS = (ConfigError, CorpusFormatError, TrainingError, ModelError,
                CheckpointError, EvaluationError, FileNotFoundError)


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _start_run(args, config: dict, inputs: list[Path]) -> Path:
    seed = config["training"]["seed"] or 0
    stamp = time.strftime("%Y%m%d-%H%M%S")
    run_dir = Path(args.out_root) / f"{stamp}-seed{seed}"
    suffix = 0
    while run_dir.exists():
        suffix += 1
        run_dir = Path(args.out_root) / f"{stamp}-seed{seed}.{suffix}"
    for sub in ("checkpoints", "reports", "dumps"):
        (run_dir / sub).mkdir(parents=True, exist_ok=True)
    hashed = {}
    for p in inputs:
        if p is None or not Path(p).exists():
            continue
        p = Path(p)
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
        for f in files:
            hashed[str(f)] = _sha256(f)
    manifest = {
        "version": __version__,
        "command": args.command,
        "argv": sys.argv[1:],
        "config": config,
        "inputs": hashed,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=1),
                                           encoding="utf-8")
    return run_dir


def _resolved_config(args) -> dict:
    config = load_config(args.config) if args.config else empty_config()
    for dotted, raw in args.set or []:
        apply_override(config, dotted, raw)
    direct = {
        "variant": ("model", "variant"),
        "decoder": ("model", "decoder_hidden"),
        "encoder": ("model", "encoder_hidden"),
        "alpha": ("training", "alpha"),
        "epochs": ("training", "epochs"),
        "seed": ("training", "seed"),
        "batch_size": ("training", "batch_size"),
    }
    for attr, (section, key) in direct.items():
        value = getattr(args, attr, None)
        if value is not None:
            config[section][key] = value
    return config


def _colmap(config: dict) -> ColumnMap:
    data = config["data"]
    kw = {}
    mapping = {
        "col_gold_label": "gold_label", "col_premise": "premise",
        "col_hypothesis": "hypothesis", "col_explanations": "explanations",
        "col_premise_highlights": "premise_highlights",
        "col_hypothesis_highlights": "hypothesis_highlights", "col_id": "id",
    }
    for cfg_key, field in mapping.items():
        if data.get(cfg_key):
            kw[field] = data[cfg_key]
    return ColumnMap(**kw)


def _load_bundle(config: dict):
    """Corpora -> vocabulary -> embeddings -> encoded splits."""
    data_cfg = config["data"]
    colmap = _colmap(config)
    train_path = resolve_path(data_cfg.get("train"))
    valid_path = resolve_path(data_cfg.get("valid"))
    if train_path is None or valid_path is None:
        raise ConfigError("training needs [data] train and valid paths")
    train_ex, _ = load_corpus(train_path, split="train", colmap=colmap)
    valid_ex, _ = load_corpus(valid_path, split="valid", colmap=colmap)
    if not train_ex:
        raise CorpusFormatError(f"{train_path}: no usable training rows")
    vocab = build_vocab([e.explanations[0] for e in train_ex if e.explanations],
                        min_count=data_cfg["min_count"])
    emb_path = resolve_path(data_cfg.get("embeddings"))
    dim = data_cfg["embedding_dim"]
    if emb_path is not None:
        table = load_embeddings(emb_path, vocab, dim=dim)
    else:
        seed = config["training"]["seed"] or 0
        table = EmbeddingTable.random(vocab, dim,
                                      np.random.default_rng([seed, 99]))
    limits = dict(sentence_limit=data_cfg["sentence_limit"],
                  explanation_limit=data_cfg["explanation_limit"])
    bundle = TrainData(train=encode_corpus(train_ex, vocab, **limits),
                       valid=encode_corpus(valid_ex, vocab, **limits),
                       vocab=vocab, table=table)
    return bundle, valid_ex, [train_path, valid_path] + (
        [emb_path] if emb_path else [])


def _train_config(config: dict) -> TrainConfig:
    model_cfg = config["model"]
    train_cfg = config["training"]
    if not model_cfg.get("variant"):
        raise ConfigError("[model] variant is required")
    return TrainConfig(
        variant=model_cfg["variant"],
        alpha=train_cfg.get("alpha"),
        epochs=train_cfg["epochs"],
        seed=train_cfg["seed"],
        batch_size=train_cfg["batch_size"],
        lr=train_cfg["lr"],
        decay=train_cfg["decay"],
        dropout=train_cfg["dropout"],
        embed_dim=config["data"]["embedding_dim"],
        encoder_hidden=model_cfg["encoder_hidden"],
        classifier_width=model_cfg["classifier_width"],
        decoder_hidden=model_cfg["decoder_hidden"],
        max_decode_len=model_cfg["max_decode_len"],
        clip_norm=train_cfg.get("clip_norm"),
        weight_decay=train_cfg["weight_decay"] or 0.0,
        criterion=train_cfg.get("criterion") or "",
    )


# ---------------------------------------------------------------------------
# Commands


def cmd_filter(args) -> int:
    config = _resolved_config(args)
    path = resolve_path(args.input)
    run_dir = _start_run(args, config, [path])
    colmap = _colmap(config)
    examples, skipped = load_corpus(path, split="all", colmap=colmap)
    report_path = Path(args.out) if args.out else run_dir / "reports" / "filter_report.csv"
    survivors_path = (Path(args.survivors) if args.survivors
                      else run_dir / "reports" / "survivors.csv")
    survivor_ids = set()
    with open(report_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "explanation_index", "filtered",
                         "nearest_template", "distance", "violation_codes"])
        for e in examples:
            rows = filter_example(e, threshold=args.threshold)
            codes = ";".join(validate_annotation(e).codes())
            if not any(r.filtered for r in rows):
                survivor_ids.add(e.id)
            for r in rows:
                writer.writerow([r.example_id, r.explanation_index,
                                 int(r.filtered), r.nearest_template,
                                 r.distance, codes])
    with open(path, encoding="utf-8", newline="") as src, \
            open(survivors_path, "w", newline="", encoding="utf-8") as dst:
        reader = csv.DictReader(src)
        writer = csv.DictWriter(dst, fieldnames=reader.fieldnames)
        writer.writeheader()
        id_col = colmap.id
        for rownum, row in enumerate(reader, start=2):
            row_id = (row.get(id_col) or "").strip() or f"row{rownum}"
            if row_id in survivor_ids:
                writer.writerow(row)
    print(f"filtered report: {report_path}")
    print(f"survivors: {survivors_path} ({len(survivor_ids)} of "
          f"{len(examples)} examples; {skipped} rows skipped)")
    return 0


def cmd_validate(args) -> int:
    config = _resolved_config(args)
    path = resolve_path(args.input)
    run_dir = _start_run(args, config, [path])
    examples, skipped = load_corpus(path, split="all", colmap=_colmap(config))
    out_path = Path(args.out) if args.out else run_dir / "reports" / "validation.csv"
    n_failed = 0
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "passed", "violation_codes", "unverifiable",
                         "messages"])
        for e in examples:
            report = validate_annotation(e)
            n_failed += 0 if report.passed else 1
            writer.writerow([report.example_id, int(report.passed),
                             ";".join(report.codes()),
                             ";".join(report.unverifiable),
                             " | ".join(v.message for v in report.violations)])
    print(f"validation report: {out_path} ({n_failed} failing of "
          f"{len(examples)}; {skipped} rows skipped)")
    return 0


def cmd_train(args) -> int:
    config = _resolved_config(args)
    bundle, valid_ex, inputs = _load_bundle(config)
    run_dir = _start_run(args, config, inputs)
    cfg = _train_config(config)
    record = train(cfg, bundle, run_dir)
    print(f"run dir: {run_dir}")
    for entry in record.epochs:
        metrics = " ".join(f"{k}={v:.4f}" for k, v in entry.items()
                           if k != "epoch")
        print(f"epoch {entry['epoch']}: {metrics}")
    if record.aborted:
        print(f"aborted: {record.note}", file=sys.stderr)
        return 2
    model = load_model(record.checkpoint_path)
    report = evaluate_model(model, bundle.valid, valid_ex, split="valid",
                            batch_size=cfg.batch_size)
    (run_dir / "reports" / "valid_report.json").write_text(report.to_json())
    print(report.table())
    return 0


def cmd_grid(args) -> int:
    config = _resolved_config(args)
    bundle, _, inputs = _load_bundle(config)
    run_dir = _start_run(args, config, inputs)
    base = _train_config(config)
    decoders = ([int(x) for x in args.decoders.split(",")] if args.decoders
                else list(DECODER_GRID))
    alphas: list[float | None]
    if args.alphas:
        alphas = [float(x) for x in args.alphas.split(",")]
    elif base.variant in ALPHA_VARIANTS:
        alphas = list(ALPHA_GRID)
    else:
        alphas = [None]
    configs = []
    for dec in decoders:
        for alpha in alphas:
            kw = {**base.__dict__, "decoder_hidden": dec, "alpha": alpha,
                  "criterion": base.criterion}
            configs.append(TrainConfig(**kw))
    best, records = grid_select(configs, bundle, run_dir / "grid")
    summary = {
        "criterion": best.criterion,
        "best": {"value": best.best_value, "epoch": best.best_epoch,
                 "checkpoint": best.checkpoint_path,
                 "config": best.config},
        "runs": [{"config": r.config, "best_value": r.best_value,
                  "aborted": r.aborted} for r in records],
    }
    (run_dir / "reports" / "grid.json").write_text(json.dumps(summary, indent=1))
    print(f"grid summary: {run_dir / 'reports' / 'grid.json'}")
    print(f"best {best.criterion}={best.best_value} "
          f"decoder={best.config['decoder_hidden']} alpha={best.config['alpha']}")
    return 0


def cmd_eval(args) -> int:
    config = _resolved_config(args)
    corpus = resolve_path(args.corpus)
    run_dir = _start_run(args, config, [corpus, Path(args.checkpoint)])
    model = load_model(args.checkpoint)
    expl_clf = None
    clf_path = args.expl_classifier or config["eval"].get("expl_classifier")
    if clf_path:
        expl_clf = load_model(clf_path)
    colmap = _colmap(config)
    examples, skipped = load_corpus(corpus, split=args.split, colmap=colmap)
    encoded = encode_corpus(examples, model.vocab,
                            sentence_limit=config["data"]["sentence_limit"],
                            explanation_limit=config["data"]["explanation_limit"])
    report = evaluate_model(model, encoded, examples, split=args.split,
                            batch_size=config["eval"]["batch_size"],
                            expl_classifier=expl_clf)
    report.counts["skipped_rows"] = skipped
    ann_path = args.annotations or config["eval"].get("annotations")
    if ann_path:
        records = load_annotations(resolve_path(ann_path))
        report.expl_at_k = expl_at_k(records, config["eval"]["expl_at_k_mode"])
        report.provenance["expl_at_k_mode"] = config["eval"]["expl_at_k_mode"]
    if args.inter_annotator:
        score, used, skipped_ia = inter_annotator_bleu(examples)
        report.counts["inter_annotator_bleu_x100"] = round(100 * score, 2)
        report.counts["inter_annotator_examples"] = used
        report.counts["inter_annotator_skipped"] = skipped_ia
    out_path = run_dir / "reports" / "eval_report.json"
    out_path.write_text(report.to_json())
    print(report.table())
    print(f"report: {out_path}")
    return 0


def cmd_generate(args) -> int:
    config = _resolved_config(args)
    corpus = resolve_path(args.corpus)
    run_dir = _start_run(args, config, [corpus, Path(args.checkpoint)])
    model = load_model(args.checkpoint)
    report, dumps = transfer_eval(model, corpus, colmap=_colmap(config),
                                  split=args.split,
                                  batch_size=config["eval"]["batch_size"])
    out_path = Path(args.out) if args.out else run_dir / "dumps" / "generated.csv"
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "premise", "hypothesis", "predicted_label",
                         "explanation"])
        for row in dumps:
            writer.writerow([row["id"], row["premise"], row["hypothesis"],
                             row["predicted_label"], row["explanation"]])
    (run_dir / "reports" / "generate_report.json").write_text(report.to_json())
    print(f"generated explanations: {out_path} ({len(dumps)} rows)")
    return 0


def cmd_bleu(args) -> int:
    config = _resolved_config(args)
    cand_path = resolve_path(args.candidates)
    ref_paths = [resolve_path(p) for p in args.references]
    _start_run(args, config, [cand_path] + ref_paths)
    cands = [line.split() for line in
             Path(cand_path).read_text(encoding="utf-8").splitlines()]
    ref_files = [Path(p).read_text(encoding="utf-8").splitlines()
                 for p in ref_paths]
    if any(len(lines) != len(cands) for lines in ref_files):
        raise EvaluationError("reference files must align with candidates")
    refs = [[lines[i].split() for lines in ref_files]
            for i in range(len(cands))]
    score = bleu(cands, refs)
    print(f"bleu {score:.6f} (x100: {100 * score:.2f})")
    return 0


def cmd_repr_export(args) -> int:
    config = _resolved_config(args)
    sent_path = resolve_path(args.sentences)
    run_dir = _start_run(args, config, [sent_path, Path(args.checkpoint)])
    model = load_model(args.checkpoint)
    encoder = None
    for attr in ("premise_encoder", "hypothesis_encoder", "explanation_encoder"):
        encoder = getattr(model, attr, None)
        if encoder is not None:
            break
    if encoder is None:
        raise ModelError(f"{model.variant} has no sentence encoder")
    lines = Path(sent_path).read_text(encoding="utf-8").splitlines()
    sentences = [tokenize(line) for line in lines if line.strip()]
    if not sentences:
        raise EvaluationError(f"{sent_path}: no sentences to encode")
    rows = []
    for tokens in sentences:
        ids = np.array([model.vocab.encode(tokens)], dtype=np.int64)
        u, _ = encoder.encode(model.embedding, ids,
                              np.array([ids.shape[1]], dtype=np.int64))
        rows.append(u.data[0])
    matrix = np.stack(rows)
    out_path = Path(args.out) if args.out else run_dir / "dumps" / "representations.txt"
    header = f"sentence representations rows={matrix.shape[0]} cols={matrix.shape[1]}"
    np.savetxt(out_path, matrix, header=header)
    print(f"representations: {out_path} shape={matrix.shape}")
    return 0


# ---------------------------------------------------------------------------
# Parser


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="sectioned key=value config file")
    p.add_argument("--set", nargs=2, action="append", metavar=("KEY", "VALUE"),
                   help="override a config entry, e.g. --set training.lr 0.05")
    p.add_argument("--out-root", default="runs",
                   help="directory that receives run directories")
    p.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nliexpl",
        description="NLI with natural language explanations: data quality, "
                    "training, evaluation")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("filter", help="template-filter uninformative explanations")
    _add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--out", help="report CSV path")
    p.add_argument("--survivors", help="survivors CSV path")
    p.add_argument("--threshold", type=int, default=10)
    p.set_defaults(fn=cmd_filter)

    p = sub.add_parser("validate", help="check annotation constraints")
    _add_common(p)
    p.add_argument("--input", required=True)
    p.add_argument("--out", help="report CSV path")
    p.set_defaults(fn=cmd_validate)

    p = sub.add_parser("train", help="train one configuration")
    _add_common(p)
    p.add_argument("--variant")
    p.add_argument("--alpha", type=float)
    p.add_argument("--decoder", type=int)
    p.add_argument("--encoder", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("grid", help="train a hyperparameter grid and select")
    _add_common(p)
    p.add_argument("--variant")
    p.add_argument("--alpha", type=float)
    p.add_argument("--decoder", type=int)
    p.add_argument("--encoder", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--decoders", help="comma-separated decoder sizes "
                   "(default: the canonical 512,1024,2048,4096 sweep)")
    p.add_argument("--alphas", help="comma-separated alpha values (default "
                   "for weighted variants: 0.1..0.9 step 0.1)")
    p.set_defaults(fn=cmd_grid)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a corpus")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--expl-classifier", dest="expl_classifier",
                   help="checkpoint for explain-then-predict labeling")
    p.add_argument("--annotations", help="partial-score CSV for expl@k")
    p.add_argument("--inter-annotator", action="store_true",
                   help="also report inter-annotator BLEU")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("generate", help="dump generated explanations")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--out", help="dump CSV path")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("bleu", help="corpus BLEU of line-aligned token files")
    _add_common(p)
    p.add_argument("--candidates", required=True)
    p.add_argument("--references", nargs="+", required=True)
    p.set_defaults(fn=cmd_bleu)

    p = sub.add_parser("repr-export", help="export sentence representations")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--sentences", required=True)
    p.add_argument("--out", help="matrix file path")
    p.set_defaults(fn=cmd_repr_export)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except INPUT_ERRORS as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except Exception as err:   # anything unexpected
        print(f"runtime error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
