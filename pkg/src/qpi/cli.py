"""``qpi`` command line: train, eval, predict, params, gradcheck, overlap.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import MATCHED, SIAMESE, TINY_MAX_LEN, RunConfig, load_run_config
from .data_io import load_checkpoint, load_pairs_tsv, load_standard_splits, save_checkpoint
from .errors import ConfigError, DataError, NumericError, QPIError, UsageError
from .pipelines import ParaphraseModel, QuestionPair, predict
from .tokenizer import Vocab, build_vocab
from .training import (cross_entropy, error_overlap, evaluate, train, trainable_param_table)

log = logging.getLogger("qpi")

GRADCHECK_PAIRS = [
    QuestionPair("How can I be a good geologist?", "What should I do to be a great geologist?", 1),
    QuestionPair("What are some good rap songs to dance to?", "What are some of the best rap songs?", 0),
]


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _overrides(args) -> dict:
    return {
        "pipeline.setup": getattr(args, "setup", None),
        "pipeline.head": getattr(args, "head", None),
        "pipeline.trainable_encoders": getattr(args, "trainable_encoders", None),
        "model.precision": getattr(args, "precision", None),
        "train.seed": getattr(args, "seed", None),
        "data.data_dir": getattr(args, "data_dir", None),
        "data.out_dir": getattr(args, "out", None),
        "data.strict_split": True if getattr(args, "strict_split", False) else None,
    }


def _out_dir(path: str | None) -> Path:
    out = Path(path or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_jsonl(path: Path, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def cmd_train(args) -> int:
    run: RunConfig = load_run_config(args.config, _overrides(args))
    if not run.data_dir:
        raise ConfigError("data_dir is required (--data-dir or [data] data_dir)")
    train_set, dev_set, test_set = load_standard_splits(run.data_dir, run.strict_split)
    if run.vocab_file:
        vocab = Vocab.load(run.vocab_file)
    else:
        vocab = build_vocab((q for p in train_set for q in (p.question_a, p.question_b)), run.min_freq)
    cfg = run.model
    if not run.vocab_file or len(vocab) > cfg.encoder.vocab_size:
        cfg = cfg.replace(vocab_size=len(vocab))
    out = _out_dir(run.out_dir)
    history_path = out / "history.jsonl"
    history_path.write_text("")

    def on_epoch(record):
        with open(history_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record.as_dict(with_time=False), sort_keys=True) + "\n")

    start = time.perf_counter()
    model, history = train(cfg, run.train, train_set.pairs, dev_set.pairs, vocab, on_epoch=on_epoch)
    summary = {
        "seed": run.train.seed,
        "best_epoch": history.best_epoch,
        "epochs_run": len(history),
        "epoch_wall_times": [r.wall_time for r in history.records],
        "total_wall_time": time.perf_counter() - start,
    }
    if len(test_set):
        test = evaluate(model, test_set.pairs)
        summary.update(test_accuracy=test.accuracy, test_f1=test.f1, test_confusion=test.confusion)
        print(f"test accuracy {test.accuracy:.4f}  f1 {test.f1:.4f}")
    if history.records:
        last = history.records[-1]
        summary.update(final_train_accuracy=last.train_accuracy, final_val_accuracy=last.val_accuracy)
    save_checkpoint(model, {"best_epoch": history.best_epoch, "seed": run.train.seed}, out / "model.ckpt")
    vocab.save(out / "vocab.txt")
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(f"wrote {out / 'model.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    dataset = load_pairs_tsv(args.data)
    if len(dataset) == 0:
        raise UsageError(f"{args.data} contains no pairs")
    result = evaluate(model, dataset.pairs)
    print(f"accuracy {result.accuracy:.4f}")
    print(f"f1 {result.f1:.4f}")
    out = _out_dir(args.out)
    _write_jsonl(out / "predictions.jsonl", (
        {"index": i, "label": p.label, "prediction": int(result.predictions[i]),
         "p_duplicate": float(result.probabilities[i, 1])}
        for i, p in enumerate(dataset.pairs)))
    (out / "metrics.json").write_text(json.dumps(
        {"accuracy": result.accuracy, "f1": result.f1, "confusion": result.confusion}, indent=2) + "\n")
    return 0


def cmd_predict(args) -> int:
    model = load_checkpoint(args.checkpoint)
    label, prob = predict(QuestionPair(args.question_a, args.question_b), model)
    print(f"{label}\t{prob:.4f}")
    return 0


def cmd_params(args) -> int:
    run = load_run_config(args.config, _overrides(args))
    cfg = run.model
    print(f"# setup={cfg.pipeline.setup} head={cfg.pipeline.head} layers={cfg.encoder.num_layers} "
          f"d={cfg.encoder.embed_dim}")
    print("k\ttrainable_params")
    for k, count in trainable_param_table(cfg):
        print(f"{k}\t{count}\t({count / 1e6:.2f}M)")
    return 0


def run_gradcheck(run: RunConfig, seed: int, corrupt: str | None = None, tol: float = 1e-4,
                  init_std: float = 0.2, stream=None) -> bool:
    stream = stream or sys.stdout
    base = run.model
    if base.encoder.embed_dim > 16:
        raise ConfigError(f"gradcheck needs a tiny config (d <= 16), got d={base.encoder.embed_dim}")
    vocab = build_vocab(q for p in GRADCHECK_PAIRS for q in (p.question_a, p.question_b))
    ok = True
    for setup in (MATCHED, SIAMESE):
        max_len = TINY_MAX_LEN[setup]
        cfg = base.replace(setup=setup, max_len=max_len, max_position=max_len, vocab_size=len(vocab),
                           precision="f64", init_std=init_std)
        model = ParaphraseModel(cfg, vocab, seed=seed).eval()
        prepared = model.prepare(GRADCHECK_PAIRS)

        def loss():
            return cross_entropy(model.forward(prepared), prepared.labels)

        if corrupt:
            with ad.fault_injection(corrupt):
                report = ad.finite_diff_check(loss, model.params, tol=tol)
        else:
            report = ad.finite_diff_check(loss, model.params, tol=tol)
        print(f"## {setup}: {len(report.errors)} parameters, tol {tol:g}", file=stream)
        for name, err in report.errors.items():
            print(f"{'ok  ' if err <= tol else 'FAIL'} {err:.3e} {name}", file=stream)
        if not report.passed:
            worst = ", ".join(f"{n} ({e:.2e})" for n, e in report.worst(5))
            print(f"FAILED {setup}: worst {worst}", file=stream)
            ok = False
    return ok


def cmd_gradcheck(args) -> int:
    preset = args.preset or (None if args.config else "tiny")
    run = load_run_config(args.config, _overrides(args) | {"model.preset": preset})
    seed = args.seed if args.seed is not None else run.train.seed
    if not run_gradcheck(run, seed, corrupt=args.corrupt_backward, tol=args.tol, init_std=args.init_std):
        raise NumericError("gradient check failed")
    print("gradient check passed")
    return 0


def _read_predictions(path) -> tuple[np.ndarray, np.ndarray]:
    preds, labels = [], []
    try:
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    preds.append(row["prediction"])
                    labels.append(row["label"])
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot read predictions from {path}: {exc}") from exc
    return np.array(preds), np.array(labels)


def cmd_overlap(args) -> int:
    preds_a, labels_a = _read_predictions(args.preds_a)
    preds_b, labels_b = _read_predictions(args.preds_b)
    if labels_a.shape != labels_b.shape or not np.array_equal(labels_a, labels_b):
        raise UsageError("prediction files do not cover the same labelled examples")
    frac = error_overlap(preds_a, preds_b, labels_a)
    wrong = int(np.sum(preds_a != labels_a))
    if frac is None:
        print("n/a (system A made no errors)")
    else:
        print(f"{frac:.4f} of {wrong} errors by A are classified correctly by B")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run config")
    common.add_argument("--seed", type=int)
    common.add_argument("--setup", choices=["siamese", "ma", "matched_aggregation"])
    common.add_argument("--head", choices=["cnn", "mean"])
    common.add_argument("--trainable-encoders", type=int, metavar="K")
    common.add_argument("--precision", choices=["f32", "f64"])
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="qpi", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", parents=[common], help="train and keep the best-validation checkpoint")
    p.add_argument("--data-dir", help="directory with train.tsv, dev.tsv, test.tsv")
    p.add_argument("--strict-split", action="store_true", help="require 10000-pair dev/test splits")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="accuracy/F1 of a checkpoint on a TSV file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="TSV file of question pairs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="classify one question pair")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("question_a")
    p.add_argument("question_b")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("params", parents=[common], help="trainable parameter count per k")
    p.set_defaults(func=cmd_params)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of both pipelines")
    p.add_argument("--preset", choices=["tiny", "base"], help="defaults to tiny without --config")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--init-std", type=float, default=0.2,
                   help="weight init std for the check (larger than training init so gradients are not vanishing)")
    p.add_argument("--corrupt-backward", metavar="OP",
                   help="negative control: scale the backward rule of OP (e.g. gelu) by 1.5")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("overlap", help="share of A's errors that B classifies correctly")
    p.add_argument("--preds-a", required=True)
    p.add_argument("--preds-b", required=True)
    p.set_defaults(func=cmd_overlap)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except QPIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
