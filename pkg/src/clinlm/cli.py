"""Command-line interface.

One subcommand per pipeline stage, from corpus preparation through
pretraining, fine-tuning, evaluation, and probing. Every command reads and
writes UTF-8, takes all randomness from an explicit --seed, and produces
byte-identical output when rerun with the same inputs and flags. Failures
exit nonzero with a one-line diagnostic on stderr.

Numeric defaults for pretrain/finetune can come from a flat key-value
config file (one "key = value" per line, # comments); explicit flags win
over file values.
"""

from __future__ import annotations

import argparse
import sys

from . import corpus, finetune, metrics, pretrain, probe, wordpiece
from .encoder import EncoderConfig, load_checkpoint, save_checkpoint


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise SystemExit(_fail(f"{self.prog}: {message}"))


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


def read_config(path, allowed: set[str]) -> dict[str, str]:
    """Flat key-value config: "key = value" lines, # comments. Keys outside
    the command's vocabulary are rejected so typos cannot silently vanish."""
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{line_no}: expected key = value, got {line!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in allowed:
                raise ValueError(f"{path}:{line_no}: unknown config key {key!r}")
            values[key] = value
    return values


def _read_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as handle:
        return [line.rstrip("\n") for line in handle]


def _write_lines(path, lines) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        for line in lines:
            handle.write(line)
            handle.write("\n")


def _parse_plan(text: str) -> pretrain.PhasePlan:
    phases = []
    for part in text.split(","):
        try:
            length, steps = part.split(":")
            phases.append((int(length), int(steps)))
        except ValueError as exc:
            raise ValueError(f"bad plan entry {part!r}, expected LENGTH:STEPS") from exc
    return pretrain.PhasePlan(tuple(phases))


def _parse_ratios(text: str) -> tuple[float, float, float]:
    parts = text.split(":")
    if len(parts) != 3:
        raise ValueError(f"ratios must be TRAIN:DEV:TEST, got {text!r}")
    return tuple(float(p) for p in parts)


def _parse_seeds(text: str) -> list[int]:
    if "," in text:
        return [int(p) for p in text.split(",")]
    return list(range(int(text)))


def _parse_named_paths(pairs) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ValueError(f"expected NAME=PATH, got {pair!r}")
        name, path = pair.split("=", 1)
        out[name] = path
    return out


def _cmd_normalize(args) -> int:
    _write_lines(args.output, (wordpiece.normalize(l) for l in _read_lines(args.input)))
    return 0


def _cmd_train_vocab(args) -> int:
    lines = [wordpiece.normalize(l) for l in _read_lines(args.corpus)]
    vocab = wordpiece.train_wordpiece(lines, args.size, args.min_frequency)
    wordpiece.write_vocab(args.output, vocab)
    return 0


def _cmd_encode(args) -> int:
    vocab = wordpiece.read_vocab(args.vocab)
    out = []
    for line in _read_lines(args.input):
        enc = wordpiece.encode(vocab, wordpiece.normalize(line))
        out.append(" ".join(str(i) for i in enc.ids) if args.ids else " ".join(enc.tokens))
    _write_lines(args.output, out)
    return 0


def _cmd_compress_report(args) -> int:
    datasets = {name: _read_lines(path)
                for name, path in _parse_named_paths(args.dataset).items()}
    vocabularies = {name: wordpiece.read_vocab(path)
                    for name, path in _parse_named_paths(args.vocab).items()}
    report = wordpiece.compression_report(datasets, vocabularies, args.baseline)
    text = report.format()
    if args.output:
        _write_lines(args.output, text.splitlines())
    else:
        print(text)
    return 0


def _cmd_filter_discharge(args) -> int:
    notes = corpus.read_notes(args.notes)
    corpus.write_notes(args.output, corpus.filter_discharge_summaries(notes))
    return 0


def _cmd_split(args) -> int:
    notes = corpus.read_notes(args.notes)
    assignment = corpus.split_by_patient(
        (n.patient_id for n in notes), _parse_ratios(args.ratios), args.seed
    )
    corpus.write_split_manifest(args.output, assignment)
    return 0


def _cmd_stats(args) -> int:
    texts = [l for l in _read_lines(args.input) if l.strip()]
    stats = corpus.dataset_stats(texts)
    print("dataset\tn\tmin\tmax\tmedian\tmean")
    print(corpus.format_stats_row(args.name, stats))
    return 0


def _cmd_top_labels(args) -> int:
    occurrences: list[str] = []
    for line in _read_lines(args.input):
        if not line.strip():
            continue
        if "\t" in line:
            _, labels = line.split("\t", 1)
            occurrences.extend(sorted(set(labels.split("|"))))
        else:
            occurrences.append(line.strip())
    _write_lines(args.output, corpus.select_top_k_labels(occurrences, args.k))
    return 0


_PRETRAIN_KEYS = {
    "hidden_dim", "n_layers", "n_heads", "ff_dim", "max_positions", "dropout",
    "lr", "schedule", "warmup_fraction", "mask_prob",
}


def _cmd_pretrain(args) -> int:
    file_values = read_config(args.config, _PRETRAIN_KEYS) if args.config else {}

    def setting(name, cast, default):
        flag = getattr(args, name)
        if flag is not None:
            return flag
        if name in file_values:
            return cast(file_values[name])
        return default

    vocab = wordpiece.read_vocab(args.vocab)
    plan = _parse_plan(args.plan)
    config = EncoderConfig(
        vocab_size=len(vocab),
        hidden_dim=setting("hidden_dim", int, 64),
        n_layers=setting("n_layers", int, 2),
        n_heads=setting("n_heads", int, 2),
        ff_dim=setting("ff_dim", int, 128),
        max_positions=max(setting("max_positions", int, plan.max_length()),
                          plan.max_length()),
        dropout=setting("dropout", float, 0.0),
    )
    result = pretrain.run_pretraining(
        corpus=_read_lines(args.corpus),
        vocab=vocab,
        config=config,
        plan=plan,
        policy=pretrain.MaskingPolicy(mask_prob=setting("mask_prob", float, 0.15)),
        accum=pretrain.AccumulationConfig(
            micro_batch_size=args.micro_batch,
            accumulation_steps=args.accum,
            effective_batch=args.micro_batch * args.accum,
        ),
        adam=pretrain.AdamConfig(lr=setting("lr", float, 1e-3)),
        seed=args.seed,
        schedule=setting("schedule", str, "constant"),
        warmup_fraction=setting("warmup_fraction", float, 0.01),
    )
    save_checkpoint(args.out, config, result.params)
    if args.loss_log:
        pretrain.write_loss_log(args.loss_log, result.loss_log)
    print(f"pretrained {plan.total_steps} steps; final loss {result.loss_log[-1].loss:.4f}")
    return 0


_FINETUNE_KEYS = {"epochs", "batch_size", "lr", "max_steps", "max_positions"}


def _load_task_data(task, path, vocab, tag_to_id, max_positions):
    if task.kind == "ner":
        sentences = finetune.read_ner_file(path)
        return [finetune.encode_ner_example(w, t, vocab, tag_to_id, max_positions)
                for w, t in sentences]
    label_index = {label: i for i, label in enumerate(task.labels)}
    if task.kind == "pair" and task.concept_types:
        rows = []
        for rec in finetune.read_record_file(
                path, ["words", "span_a", "type_a", "span_b", "type_b", "label"]):
            marked = finetune.mark_concepts(
                rec["words"], tuple(rec["span_a"]), rec["type_a"],
                tuple(rec["span_b"]), rec["type_b"])
            rows.append((finetune.prepare_marked_sentence(marked, vocab, max_positions),
                         label_index[rec["label"]]))
        return rows
    if task.kind == "pair":
        return [
            (finetune.prepare_pair(rec["premise"], rec["hypothesis"], vocab, max_positions),
             label_index[rec["label"]])
            for rec in finetune.read_record_file(path, ["premise", "hypothesis", "label"])
        ]
    return [
        (finetune.prepare_document(rec["text"], vocab, max_positions),
         {label_index[l] for l in rec["labels"]})
        for rec in finetune.read_record_file(path, ["text", "labels"])
    ]


def _cmd_finetune(args) -> int:
    file_values = read_config(args.config, _FINETUNE_KEYS) if args.config else {}

    def setting(name, cast, default):
        flag = getattr(args, name)
        if flag is not None:
            return flag
        if name in file_values:
            return cast(file_values[name])
        return default

    task = finetune.builtin_task(args.task)
    config, params = load_checkpoint(args.checkpoint)
    vocab = wordpiece.read_vocab(args.vocab)
    if task.concept_types:
        vocab, params, config = finetune.extend_for_markers(
            vocab, params, config, task.concept_types, seed=0)
    max_positions = setting("max_positions", int, config.max_positions)
    tag_to_id = None
    if task.kind == "ner":
        tag_to_id = {t: i for i, t in enumerate(task.bio_tags())}
    train_rows = _load_task_data(task, args.train, vocab, tag_to_id, max_positions)
    dev_rows = _load_task_data(task, args.dev, vocab, tag_to_id, max_positions)
    hyper = finetune.FinetuneConfig(
        epochs=setting("epochs", int, 3),
        batch_size=setting("batch_size", int, 8),
        lr=setting("lr", float, 1e-3),
        max_steps=setting("max_steps", int, None),
        max_positions=max_positions,
    )
    runs = finetune.finetune_task(config, params, task, train_rows, dev_rows,
                                  _parse_seeds(args.seeds), hyper)
    report = metrics.aggregate_seeds([r.dev_metric for r in runs], task.selection_metric)
    if args.out_prefix:
        for run in runs:
            save_checkpoint(f"{args.out_prefix}.seed{run.seed}.ckpt", config, run.params)
    for run in runs:
        print(f"seed {run.seed}\t{task.selection_metric} {run.dev_metric:.4f}"
              f"\tbest epoch {run.best_epoch}")
    print(f"median {report.median:.4f}\tstddev {report.stddev:.4f}")
    return 0


def _read_label_sets(path) -> list[set[str]]:
    return [set(l.split("|")) if l else set() for l in _read_lines(path)]


def _cmd_evaluate(args) -> int:
    if args.aggregate:
        values = [float(v) for v in args.aggregate.split(",")]
        report = metrics.aggregate_seeds(values, args.metric)
        print(f"median {report.median:.4f}\tstddev {report.stddev:.4f}\tn {len(values)}")
        return 0
    if not args.gold or not args.pred:
        raise ValueError("evaluate needs --gold and --pred (or --aggregate)")
    if args.metric in ("entity-f1", "token-f1"):
        gold = [tags for _, tags in finetune.read_ner_file(args.gold)]
        pred = [tags for _, tags in finetune.read_ner_file(args.pred)]
        p, r, f1 = metrics.corpus_entity_f1(gold, pred,
                                            token_level=args.metric == "token-f1")
        print(f"precision {p:.4f}\trecall {r:.4f}\tf1 {f1:.4f}")
        return 0
    if args.metric == "micro-f1":
        p, r, f1 = metrics.micro_f1(_read_label_sets(args.gold), _read_label_sets(args.pred))
        print(f"precision {p:.4f}\trecall {r:.4f}\tf1 {f1:.4f}")
        return 0
    acc = metrics.accuracy(_read_lines(args.gold), _read_lines(args.pred))
    print(f"accuracy {acc:.4f}")
    return 0


def _cmd_probe(args) -> int:
    suite = probe.load_probe_suite(args.suite)
    if not args.predictions:
        counts = {c: 0 for c in probe.CATEGORIES}
        covered = 0
        for inst in suite:
            counts[inst.category] += 1
            covered += inst.oracle_covered
        print(f"suite verified: {len(suite)} instances, {covered} oracle-covered")
        for category in probe.CATEGORIES:
            print(f"{category}\t{counts[category]}")
        return 0
    predictions = _read_lines(args.predictions)
    if len(predictions) != len(suite):
        raise ValueError(
            f"{len(predictions)} predictions for {len(suite)} instances"
        )
    rows = iter(predictions)
    report = probe.run_probes(lambda premise, hypothesis: next(rows), suite)
    print(report.format())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="clinlm", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("normalize", help="punctuation-separate text, line by line")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(run=_cmd_normalize)

    p = sub.add_parser("train-vocab", help="learn a wordpiece vocabulary")
    p.add_argument("--corpus", required=True)
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--min-frequency", type=int, default=2)
    p.add_argument("--output", required=True)
    p.set_defaults(run=_cmd_train_vocab)

    p = sub.add_parser("encode", help="wordpiece-encode text, line by line")
    p.add_argument("--vocab", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--ids", action="store_true", help="emit token ids instead of pieces")
    p.set_defaults(run=_cmd_encode)

    p = sub.add_parser("compress-report",
                       help="mean/median encoded lengths per dataset and vocabulary")
    p.add_argument("--dataset", action="append", required=True, metavar="NAME=PATH")
    p.add_argument("--vocab", action="append", required=True, metavar="NAME=PATH")
    p.add_argument("--baseline", required=True)
    p.add_argument("--output")
    p.set_defaults(run=_cmd_compress_report)

    p = sub.add_parser("filter-discharge",
                       help="keep long non-nursing notes, one per encounter")
    p.add_argument("--notes", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(run=_cmd_filter_discharge)

    p = sub.add_parser("split", help="patient-wise train/dev/test manifest")
    p.add_argument("--notes", required=True)
    p.add_argument("--ratios", default="8:1:1")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(run=_cmd_split)

    p = sub.add_parser("stats", help="word-count summary of a text file")
    p.add_argument("--input", required=True)
    p.add_argument("--name", default="dataset")
    p.set_defaults(run=_cmd_stats)

    p = sub.add_parser("top-labels", help="most frequent label codes")
    p.add_argument("--input", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(run=_cmd_top_labels)

    p = sub.add_parser("pretrain", help="masked-LM pretraining with a phase plan")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--plan", required=True, metavar="LEN:STEPS[,LEN:STEPS...]")
    p.add_argument("--micro-batch", type=int, required=True)
    p.add_argument("--accum", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--loss-log")
    p.add_argument("--config", help="flat key-value defaults file")
    for flag, cast in (("hidden-dim", int), ("n-layers", int), ("n-heads", int),
                       ("ff-dim", int), ("max-positions", int), ("dropout", float),
                       ("lr", float), ("warmup-fraction", float), ("mask-prob", float)):
        p.add_argument(f"--{flag}", type=cast)
    p.add_argument("--schedule", choices=("constant", "linear"))
    p.set_defaults(run=_cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint on a task")
    p.add_argument("--task", required=True,
                   choices=("ner-2010", "ner-2012", "re-2010", "mednli",
                            "icd9-top50", "therapeutic-class"))
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--dev", required=True)
    p.add_argument("--seeds", required=True,
                   help="a count (5 means seeds 0..4) or a comma list")
    p.add_argument("--config", help="flat key-value defaults file")
    p.add_argument("--out-prefix", help="write per-seed checkpoints with this prefix")
    for flag, cast in (("epochs", int), ("batch-size", int), ("lr", float),
                       ("max-steps", int), ("max-positions", int)):
        p.add_argument(f"--{flag}", type=cast)
    p.set_defaults(run=_cmd_finetune)

    p = sub.add_parser("evaluate", help="score predictions against gold")
    p.add_argument("--metric", required=True,
                   choices=("entity-f1", "token-f1", "micro-f1", "accuracy"))
    p.add_argument("--gold")
    p.add_argument("--pred")
    p.add_argument("--aggregate", help="comma list of per-seed values to summarize")
    p.set_defaults(run=_cmd_evaluate)

    p = sub.add_parser("probe", help="verify the probe suite or score predictions on it")
    p.add_argument("--suite", help="alternative suite file (defaults to the packaged one)")
    p.add_argument("--predictions", help="one label per suite row")
    p.set_defaults(run=_cmd_probe)

    return parser


def dispatch(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.run(args)
    except (ValueError, OSError, KeyError) as exc:
        return _fail(str(exc))


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
