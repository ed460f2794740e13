"""Command-line entry point: ``cliniseq <command> [flags]``.

Exit codes: 0 ok, 2 input error, 3 compatibility error, 4 numeric failure.
Settings may come from an INI file (``--config``) with one section per
command; command-line flags win over the file.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import F32_MAX, Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from .corpus import (DEFAULT_VOCAB_CAP, MIN_TRAIN_TOKENS, TASKS, CorpusFormatError, build_corpus, build_patients,
                     load_stopwords, read_corpus_dir, read_meta_csv, read_notes_csv, write_corpus_dir)
from .evaluation import (default_horizon, eval_per_time_point, format_topics, knn_overlap, write_auc_csv)
from .lda import DEFAULT_BETA, LdaModel, log_likelihood_per_token
from .models import NumericError, TrainConfig
from . import pipeline as pl

EXIT_OK, EXIT_INPUT, EXIT_COMPAT, EXIT_NUMERIC = 0, 2, 3, 4
METRICS_HEADER = ["step", "train_loss", "val_auc"]
SPLITS = ("train", "validation", "test")
COMMANDS = ("synth", "preprocess", "train", "eval", "topics", "latents", "knn")

log = logging.getLogger("cliniseq")


class InputError(ValueError):
    """Bad user input (files, flags, config)."""


def _cell(value) -> str:
    return "" if value is None else repr(float(value))


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_HEADER)
        for step, loss, val in rows:
            w.writerow([step, _cell(loss), _cell(val)])


# --------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    from .synth import SynthConfig, gen_corpus, write_synth

    cfg = SynthConfig(n_patients=args.n_patients, vocab_size=args.vocab_size, n_topics=args.n_topics,
                      n_risk_topics=args.n_risk_topics, mean_seq_len=args.mean_seq_len, doc_len=args.doc_len,
                      empty_rate=args.empty_rate, risk_strength=args.risk_strength, seed=args.seed,
                      positive_rate=args.positive_rate)
    try:
        cfg.validate()
    except ValueError as exc:
        raise InputError(str(exc)) from exc
    write_synth(args.out, gen_corpus(cfg))
    return EXIT_OK


def cmd_preprocess(args) -> int:
    notes = read_notes_csv(args.notes)
    metas = read_meta_csv(args.meta)
    stop = load_stopwords(args.stopwords) if args.stopwords else None
    patients = build_patients(notes, metas, stop)
    if not patients:
        raise InputError("no patients: no patient has both metadata and usable notes")
    try:
        corpus = build_corpus(patients, args.seed, vocab_cap=args.vocab_cap, min_train_tokens=args.min_train_tokens)
    except ValueError as exc:
        raise InputError(f"no patients usable after filtering: {exc}") from exc
    write_corpus_dir(args.out, corpus)
    return EXIT_OK


def _lda_for_run(args, corpus):
    """LDA model and its metrics rows: loaded from --lda or fitted on the train split."""
    if args.lda:
        ck = load_checkpoint(args.lda)
        pl.check_vocab(ck, corpus)
        return pl.lda_from_checkpoint(ck), []
    rows = []
    every = max(1, args.lda_iterations // 20)

    def callback(sweep, state):
        if sweep % every == 0 or sweep == args.lda_iterations:
            model = LdaModel(args.K, len(corpus.vocab), alpha, args.beta,
                             state["topic_word_counts"], state["topic_totals"])
            ll = log_likelihood_per_token(model, state["doc_topic_counts"], state["words"], state["doc_of"])
            rows.append((sweep, -ll, None))

    alpha = args.alpha if args.alpha is not None else 50.0 / args.K
    lda = pl.fit_corpus_lda(corpus, K=args.K, iterations=args.lda_iterations, seed=args.seed,
                            alpha=alpha, beta=args.beta, callback=callback)
    return lda, rows


def cmd_train(args) -> int:
    corpus = read_corpus_dir(args.corpus)
    out = Path(args.out)
    vocab = corpus.vocab.id_to_word
    base = {"V": str(len(vocab)), "task": args.task, "seed": str(args.seed), "vocab": " ".join(vocab)}
    if args.model in pl.LDA_KINDS:
        lda, lda_rows = _lda_for_run(args, corpus)
    if args.model == "lda":
        ck = pl.lda_to_checkpoint(lda, Checkpoint({"kind": "lda", "K": str(lda.K), **base}))
        rows = lda_rows
    elif args.model == "svm_lda":
        grid = {}
        if args.svm_c:
            grid["C_grid"] = args.svm_c
        if args.svm_pos_weight:
            grid["pos_grid"] = args.svm_pos_weight
        run = pl.train_svm_baseline(corpus, lda, args.task, seed=args.seed, horizon=args.horizon,
                                    epochs=args.svm_epochs, **grid)
        ck = Checkpoint({"kind": "svm_lda", "K": str(lda.K), **base})
        ck = pl.svm_to_checkpoint(run, pl.lda_to_checkpoint(lda, ck))
        rows = pl.svm_metrics_rows(run, corpus, lda, args.task, args.seed)
    else:
        try:
            config = TrainConfig(lambda1=args.lambda1, lambda2=args.lambda2, lambda3=args.lambda3, cfn=args.cfn,
                                 lr=args.lr, batch_size=args.batch_size, steps=args.steps, seed=args.seed,
                                 task=args.task, K=args.K, H=args.H, log_every=args.log_every,
                                 val_every=args.val_every, decoder_l1=args.decoder_l1)
        except ValueError as exc:
            raise InputError(str(exc)) from exc
        run = pl.train_lstm(args.model, corpus, config, lda=lda if args.model == "lstm_lda" else None,
                            cfn_grid=args.cfn_grid)
        extra = {"best_step": run.result.best_step}
        if run.cfn_scores:
            extra["cfn"] = max(run.cfn_scores, key=lambda c: (np.nan_to_num(run.cfn_scores[c], nan=-1.0), -c))
        ck = pl.model_to_checkpoint(run.result.model, config, vocab, **extra)
        if args.model == "lstm_lda":
            ck = pl.lda_to_checkpoint(lda, ck)
        rows = run.result.log_rows
    for name, arr in ck.tensors.items():
        if not np.all(np.abs(arr) <= F32_MAX):
            raise NumericError(f"{name} left the float32 range of the checkpoint format")
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.clnt", ck)
    write_metrics_csv(out / "metrics.csv", rows)
    return EXIT_OK


def cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    corpus = read_corpus_dir(args.corpus)
    ids = corpus.ids(args.split)
    if not ids:
        raise InputError(f"split {args.split!r} is empty")
    scores = pl.sequence_scores(ck, corpus, ids)
    horizon = args.horizon or default_horizon([len(s) for s in scores])
    report = eval_per_time_point(scores, corpus.task_labels(ids, args.task), horizon)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_auc_csv(out, [(args.task, ck.metadata.get("kind", "?"), p) for p in report])
    return EXIT_OK


def cmd_topics(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    if "vocab" not in ck.metadata:
        raise pl.CompatibilityError("checkpoint has no vocabulary")
    vocab = ck.metadata["vocab"].split(" ")
    name, word_major = {"encoder": ("encoder.W", False), "decoder": ("decoder.W", True),
                        "lda": ("phi", False)}[args.source]
    if name not in ck.tensors:
        raise pl.CompatibilityError(f"checkpoint has no {args.source} weights ({name})")
    M = ck.tensors[name].astype(float)
    if (M.shape[0] if word_major else M.shape[1]) != len(vocab):
        raise pl.CompatibilityError(f"{name} shape {M.shape} does not match vocabulary size {len(vocab)}")
    text = format_topics(M, vocab, args.n, word_major)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    return EXIT_OK


def cmd_latents(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    corpus = read_corpus_dir(args.corpus)
    ids = sorted(corpus.sequences) if args.split == "all" else corpus.ids(args.split)
    latents = pl.sequence_latents(ck, corpus, ids)
    labels = corpus.task_labels(ids, args.task)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", encoding="utf-8", newline="\n") as fh:
        for pid, y, Z in zip(ids, labels, latents):
            for t, bow in enumerate(corpus.sequences[pid].counts, start=1):
                if not bow:
                    continue
                fh.write("\t".join([pid, str(t), str(int(y))] + [repr(float(v)) for v in Z[t - 1]]) + "\n")
    return EXIT_OK


def read_latents(path) -> tuple[list[tuple[str, int]], np.ndarray]:
    keys, rows = [], []
    try:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                parts = line.rstrip("\n").split("\t")
                if len(parts) < 4:
                    raise InputError(f"{path}:{lineno}: expected pid, t, label and at least one value")
                keys.append((parts[0], int(parts[1])))
                rows.append([float(v) for v in parts[3:]])
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise InputError(f"{path}: {exc}") from exc
    if len({len(r) for r in rows}) > 1:
        raise InputError(f"{path}: rows differ in width")
    order = sorted(range(len(keys)), key=lambda i: keys[i])
    return [keys[i] for i in order], np.array([rows[i] for i in order]).reshape(len(rows), -1)


def cmd_knn(args) -> int:
    keys, Z = read_latents(args.latents)
    if len(keys) < args.k + 1:
        raise InputError(f"need at least k+1={args.k + 1} latent vectors, got {len(keys)}")
    if args.gold == "patient":
        value = knn_overlap(Z, args.k, groups=[pid for pid, _ in keys])
    else:
        gkeys, G = read_latents(args.gold)
        if gkeys != keys:
            raise pl.CompatibilityError("candidate and gold latents cover different documents")
        value = knn_overlap(Z, args.k, reference=G)
    print(repr(value))
    return EXIT_OK


# ------------------------------------------------------------------ parser


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cliniseq", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="INI file with one [section] per command")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted synthetic corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--n-patients", type=int, default=500)
    p.add_argument("--vocab-size", type=int, default=200)
    p.add_argument("--n-topics", type=int, default=8)
    p.add_argument("--n-risk-topics", type=int, default=2)
    p.add_argument("--mean-seq-len", type=float, default=10.0)
    p.add_argument("--doc-len", type=int, default=50)
    p.add_argument("--empty-rate", type=float, default=0.2)
    p.add_argument("--risk-strength", type=float, default=6.0)
    p.add_argument("--positive-rate", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="notes + metadata CSV -> corpus directory")
    p.add_argument("notes")
    p.add_argument("meta")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--vocab-cap", type=int, default=DEFAULT_VOCAB_CAP)
    p.add_argument("--min-train-tokens", type=int, default=MIN_TRAIN_TOKENS)
    p.add_argument("--stopwords", help="stop-word file (one per line); default: bundled list")
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a model on a corpus directory")
    p.add_argument("--model", required=True, choices=pl.ALL_MODELS)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--task", choices=TASKS, default="hospital")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--K", type=int, default=50, help="topics")
    p.add_argument("--H", type=int, default=128, help="LSTM hidden units")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch-size", type=int, default=10)
    p.add_argument("--steps", type=int, default=100_000)
    p.add_argument("--lambda1", type=float, default=1e-2)
    p.add_argument("--lambda2", type=float, default=0.0)
    p.add_argument("--lambda3", type=float, default=1.0)
    p.add_argument("--cfn", type=float, default=1.0, help="false-negative cost")
    p.add_argument("--cfn-grid", type=_float_list, help="comma-separated costs to select from on validation")
    p.add_argument("--decoder-l1", type=_bool, default=True, help="L1 on decoder weights for lstm_ed")
    p.add_argument("--log-every", type=int, default=100)
    p.add_argument("--val-every", type=int, default=1000)
    p.add_argument("--lda", help="existing LDA checkpoint for svm_lda / lstm_lda")
    p.add_argument("--lda-iterations", type=int, default=200)
    p.add_argument("--alpha", type=float, default=None, help="LDA alpha (default 50/K)")
    p.add_argument("--beta", type=float, default=DEFAULT_BETA)
    p.add_argument("--horizon", type=int, default=None, help="SVM time points (default: 90th percentile length)")
    p.add_argument("--svm-epochs", type=int, default=50)
    p.add_argument("--svm-c", type=_float_list)
    p.add_argument("--svm-pos-weight", type=_float_list)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-time-point AUC on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=SPLITS, default="test")
    p.add_argument("--task", choices=TASKS, default="hospital")
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("topics", help="top words per topic")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", choices=("encoder", "decoder", "lda"), required=True)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_topics)

    p = sub.add_parser("latents", help="export topic-layer vectors per non-empty time point")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--split", choices=SPLITS + ("all",), default="test")
    p.add_argument("--task", choices=TASKS, default="hospital")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_latents)

    p = sub.add_parser("knn", help="kNN overlap of latents against gold latents or patient identity")
    p.add_argument("latents")
    p.add_argument("--gold", required=True, help="gold latents.tsv, or 'patient'")
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(func=cmd_knn)
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def apply_config(parser: argparse.ArgumentParser, path: str, command: str) -> None:
    """Install [command] settings from an INI file as defaults of that subcommand."""
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str  # keys are case-sensitive (K, H)
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise InputError(f"cannot read config {path}: {exc}") from exc
    if not cp.has_section(command):
        return
    sub = _subparser(parser, command)
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "func")}
    defaults = {}
    for key, raw in cp.items(command):
        dest = key.replace("-", "_")
        if dest not in actions:
            raise InputError(f"unknown key {key!r} in [{command}] of {path}")
        action = actions[dest]
        try:
            defaults[dest] = action.type(raw) if action.type else raw
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise InputError(f"bad value for {key!r} in [{command}]: {exc}") from exc
        if action.choices is not None and defaults[dest] not in action.choices:
            raise InputError(f"{key}={raw!r} not one of {sorted(action.choices)}")
        # a config value satisfies a required flag
        action.required = False
    sub.set_defaults(**defaults)


def _preparse(argv) -> argparse.Namespace:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    pre.add_argument("-v", "--verbose", action="store_true")
    pre.add_argument("command", nargs="?")
    return pre.parse_known_args(argv)[0]


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    pre = _preparse(argv)
    logging.basicConfig(level=logging.DEBUG if pre.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        parser = build_parser()
        if pre.config and pre.command in COMMANDS:
            apply_config(parser, pre.config, pre.command)
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except NumericError as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (pl.CompatibilityError, CheckpointError) as exc:
        print(f"error: incompatible input: {exc}", file=sys.stderr)
        return EXIT_COMPAT
    except (InputError, CorpusFormatError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
