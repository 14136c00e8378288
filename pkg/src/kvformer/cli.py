# -*- coding: utf-8 -*-
# vim: set ft=python ts=4 sw=4 expandtab:

"""
Command-line interface.

Exit status is 0 on success, 1 when validation fails or a command raises an error,
and 2 for usage errors.
"""
import argparse
import json
import logging
import logging.config
import sys
from typing import Any, Callable, Dict, List, Optional, Sequence, TextIO

import attrs
import yaml
from dotenv import load_dotenv
from importlib_resources import files

import kvformer.data
from kvformer.automaton import accepts
from kvformer.checkpoint import load_checkpoint, save_checkpoint
from kvformer.config import KvformerConfig, config, reset
from kvformer.converter import CONVERTER
from kvformer.datagen import csv_to_jsonl, dungeons_preset, write_dungeons
from kvformer.document import Bool, Null, Object, load_jsonl, serialize_json, write_jsonl
from kvformer.encoding import PositionEncodingKind
from kvformer.evaluation import Task, evaluate
from kvformer.experiment import preset_names, run_experiment
from kvformer.inference import ClassifyResult, DecodeOptions, Prompt, autocomplete, predict_fields
from kvformer.pipeline import split
from kvformer.tokenizer import Grammar, TokenizerError, build_vocabulary, decode, encode, load_vocabulary, save_vocabulary, tokenize
from kvformer.training import TrainConfig, train

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2

_LOGGING_FILE = "logging.yaml"


def _configure_logging(path: Optional[str], verbose: bool) -> None:
    """Configure logging from a dictConfig YAML file, or from the packaged default."""
    if path:
        with open(path, "r", encoding="utf8") as fp:
            source = fp.read()
    else:
        source = files(kvformer.data).joinpath(_LOGGING_FILE).read_text()
    logging.config.dictConfig(yaml.safe_load(source))
    if verbose:
        root = logging.getLogger()
        root.setLevel(logging.DEBUG)
        for handler in root.handlers:
            handler.setLevel(logging.DEBUG)


def _overrides(args: argparse.Namespace, names: Dict[str, str]) -> Dict[str, Any]:
    """Map argument names to config attribute names, keeping only options that were given."""
    return {attribute: getattr(args, arg) for arg, attribute in names.items() if getattr(args, arg, None) is not None}


_TRAINING_ARGS = {
    "dim": "dim",
    "heads": "heads",
    "layers": "layers",
    "pe": "pe_kind",
    "dropout": "dropout",
    "batch_size": "batch_size",
    "lr": "lr",
    "batches": "num_batches",
    "guardrails": "guardrails",
    "eval_every": "eval_every",
    "upscale": "upscale",
    "shuffle": "shuffle",
    "seed": "seed",
    "max_length": "max_length",
    "max_vocab": "max_vocab",
    "target_key": "target_key",
    "test_fraction": "test_fraction",
}

_DECODING_ARGS = {
    "greedy": "greedy",
    "temperature": "temperature",
    "seed": "seed",
    "max_new_tokens": "max_new_tokens",
}


def _training_config(args: argparse.Namespace, defaults: KvformerConfig) -> TrainConfig:
    overrides = _overrides(args, _TRAINING_ARGS)
    if "pe_kind" in overrides:
        overrides["pe_kind"] = PositionEncodingKind(overrides["pe_kind"])
    return attrs.evolve(defaults.training, **overrides)


def _decode_options(args: argparse.Namespace, defaults: KvformerConfig) -> DecodeOptions:
    return attrs.evolve(defaults.decoding, **_overrides(args, _DECODING_ARGS))


def _open_output(path: Optional[str]) -> TextIO:
    return open(path, "w", encoding="utf-8", newline="\n") if path else sys.stdout


def _write_lines(path: Optional[str], lines: Sequence[str]) -> None:
    fp = _open_output(path)
    try:
        for line in lines:
            fp.write(line)
            fp.write("\n")
    finally:
        if fp is not sys.stdout:
            fp.close()


def _build_vocab(args: argparse.Namespace, _: KvformerConfig) -> int:
    corpus = load_jsonl(args.input)
    vocab = build_vocabulary(corpus, max_size=args.max_size)
    save_vocabulary(args.out, vocab)
    logging.info("Wrote vocabulary of %d tokens to %s (sha256 %s)", len(vocab), args.out, vocab.checksum())
    return EXIT_OK


def _tokenize(args: argparse.Namespace, _: KvformerConfig) -> int:
    vocab = load_vocabulary(args.vocab)
    corpus = load_jsonl(args.input)
    _write_lines(args.out, [json.dumps(encode(tokenize(doc), vocab)) for doc in corpus])
    return EXIT_OK


def _validate(args: argparse.Namespace, _: KvformerConfig) -> int:
    """Check that each line of the input, a JSON array of token ids, is a complete object."""
    vocab = load_vocabulary(args.vocab)
    results = []
    rejected = 0
    with open(args.input, "r", encoding="utf-8") as fp:
        for line_no, line in enumerate(fp, start=1):
            if not line.strip():
                continue
            try:
                ids = json.loads(line)
                valid = isinstance(ids, list) and accepts(decode(ids, vocab))
            except (ValueError, TypeError, TokenizerError):
                valid = False
            if not valid:
                rejected += 1
                logging.warning("Line %d is not a valid token sequence", line_no)
            results.append(json.dumps({"line": line_no, "accepted": valid}))
    _write_lines(args.out, results)
    logging.info("Validated %d sequences, %d rejected", len(results), rejected)
    return EXIT_FAILED if rejected else EXIT_OK


def _train(args: argparse.Namespace, defaults: KvformerConfig) -> int:
    training = _training_config(args, defaults)
    corpus = load_jsonl(args.input)
    test = load_jsonl(args.test) if args.test else None
    if test is None and args.holdout:
        data = split(corpus, 1.0 - training.test_fraction, training.seed)
        corpus, test = data.train, data.test
    if args.metrics:
        with open(args.metrics, "w", encoding="utf-8", newline="") as fp:
            result = train(corpus, training, test=test, metrics_fp=fp)
    else:
        result = train(corpus, training, test=test)
    save_checkpoint(args.out, result.checkpoint)
    logging.info("Saved checkpoint to %s", args.out)
    return EXIT_OK


def _predict(args: argparse.Namespace, defaults: KvformerConfig) -> int:
    """Predict the target key of each input document, writing prediction and truth records."""
    checkpoint = load_checkpoint(args.checkpoint)
    options = _decode_options(args, defaults)
    docs = [doc for doc in load_jsonl(args.input) if isinstance(doc, Object)]
    prompts = [Prompt(doc.without(args.target_key), args.target_key, options) for doc in docs]
    predictions = predict_fields(checkpoint.model, checkpoint.vocab, prompts, options, args.batch_size)
    lines = []
    for index, (doc, prediction) in enumerate(zip(docs, predictions)):
        if prediction is None:
            logging.warning("No prediction for document %d", index + 1)
        truth = doc.get(args.target_key)
        record = (("prediction", Null() if prediction is None else prediction), ("truth", Null() if truth is None else truth))
        lines.append(serialize_json(Object(record)))
    _write_lines(args.out, lines)
    return EXIT_OK


def _generate(args: argparse.Namespace, defaults: KvformerConfig) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    options = _decode_options(args, defaults)
    docs = []
    for index in range(args.n):
        seeded = attrs.evolve(options, seed=options.seed + index)
        docs.append(serialize_json(autocomplete(checkpoint.model, checkpoint.vocab, [Grammar.START], seeded)))
    _write_lines(args.out, docs)
    return EXIT_OK


def _result_document(result: ClassifyResult) -> Object:
    prediction = result.prediction if result.prediction is not None else Null()
    return Object((("truth", result.truth), ("prediction", prediction), ("correct", Bool(result.correct))))


def _evaluate(args: argparse.Namespace, defaults: KvformerConfig) -> int:
    checkpoint = load_checkpoint(args.checkpoint)
    docs = load_jsonl(args.input)
    report, results = evaluate(
        checkpoint.model,
        checkpoint.vocab,
        docs,
        args.target_key,
        Task(args.task),
        _decode_options(args, defaults),
        args.batch_size,
    )
    if args.predictions:
        _write_lines(args.predictions, [serialize_json(_result_document(result)) for result in results])
    _write_lines(args.out, [CONVERTER.to_json(report)])
    logging.info("Accuracy %.4f over %d documents", report.accuracy, report.count)
    return EXIT_OK


def _gen_dungeons(args: argparse.Namespace, _: KvformerConfig) -> int:
    overrides = _overrides(args, {"n": "n_instances", "seed": "seed"})
    dungeons = attrs.evolve(dungeons_preset("dungeons-%s" % args.preset), **overrides)
    docs = write_dungeons(args.out, dungeons)
    logging.info("Wrote %d dungeons to %s", len(docs), args.out)
    return EXIT_OK


def _type_hints(values: Optional[List[str]]) -> Dict[str, str]:
    hints = {}
    for value in values or []:
        name, _, kind = value.partition("=")
        if not name or kind not in ("int", "float", "bool", "str"):
            raise argparse.ArgumentTypeError("Type hint must look like column=int|float|bool|str: %s" % value)
        hints[name] = kind
    return hints


def _csv2jsonl(args: argparse.Namespace, _: KvformerConfig) -> int:
    docs = csv_to_jsonl(args.input, _type_hints(args.type))
    write_jsonl(args.out, docs)  # type: ignore[arg-type]
    logging.info("Wrote %d documents to %s", len(docs), args.out)
    return EXIT_OK


def _seeds(value: str) -> List[int]:
    try:
        return [int(seed) for seed in value.split(",") if seed.strip()]
    except ValueError as e:
        raise argparse.ArgumentTypeError("Seeds must be a comma-separated list of integers: %s" % value) from e


def _experiment(args: argparse.Namespace, _: KvformerConfig) -> int:
    report = run_experiment(args.preset, seeds=args.seeds, num_batches=args.batches, instances=args.instances, out_dir=args.out)
    for summary in report.summary:
        std = "" if summary.std is None else " ± %.4f" % summary.std
        logging.info("[%s] %s %s: %.4f%s (n=%d)", report.preset, summary.group, summary.metric, summary.mean, std, summary.count)
    return EXIT_OK


def _add_decoding(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--greedy", action=argparse.BooleanOptionalAction, default=None, help="Greedy decoding instead of sampling")
    parser.add_argument("--temperature", type=float, help="Sampling temperature")
    parser.add_argument("--seed", type=int, help="Sampling seed")
    parser.add_argument("--max-new-tokens", type=int, help="Maximum number of generated tokens per document")


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvformer", description="Generative transformer modeling of JSON documents")
    parser.add_argument("--config", help="Configuration YAML file (default: $KVFORMER_CONFIG_PATH)")
    parser.add_argument("--log-config", help="Logging configuration YAML file")
    parser.add_argument("-v", "--verbose", action="store_true", help="Log at DEBUG level")
    commands = parser.add_subparsers(dest="command", required=True)

    command = commands.add_parser("build-vocab", help="Build a vocabulary from a JSONL corpus")
    command.add_argument("--input", required=True)
    command.add_argument("--out", required=True)
    command.add_argument("--max-size", type=int)
    command.set_defaults(handler=_build_vocab)

    command = commands.add_parser("tokenize", help="Encode a JSONL corpus as token id arrays")
    command.add_argument("--input", required=True)
    command.add_argument("--vocab", required=True)
    command.add_argument("--out")
    command.set_defaults(handler=_tokenize)

    command = commands.add_parser("validate", help="Check token id arrays against the grammar")
    command.add_argument("--input", required=True)
    command.add_argument("--vocab", required=True)
    command.add_argument("--out")
    command.set_defaults(handler=_validate)

    command = commands.add_parser("train", help="Train a model on a JSONL corpus")
    command.add_argument("--input", required=True)
    command.add_argument("--out", required=True, help="Checkpoint directory")
    command.add_argument("--test", help="Held-out JSONL corpus")
    command.add_argument("--holdout", action="store_true", help="Hold out testFraction of the input when --test is not given")
    command.add_argument("--metrics", help="Metrics CSV file")
    command.add_argument("--dim", type=int)
    command.add_argument("--heads", type=int)
    command.add_argument("--layers", type=int)
    command.add_argument("--pe", choices=[kind.value for kind in PositionEncodingKind])
    command.add_argument("--dropout", type=float)
    command.add_argument("--batch-size", type=int)
    command.add_argument("--lr", type=float)
    command.add_argument("--batches", type=int)
    command.add_argument("--guardrails", action=argparse.BooleanOptionalAction, default=None)
    command.add_argument("--eval-every", type=int)
    command.add_argument("--upscale", type=int)
    command.add_argument("--shuffle", action=argparse.BooleanOptionalAction, default=None)
    command.add_argument("--seed", type=int)
    command.add_argument("--max-length", type=int)
    command.add_argument("--max-vocab", type=int)
    command.add_argument("--target-key")
    command.add_argument("--test-fraction", type=float)
    command.set_defaults(handler=_train)

    command = commands.add_parser("predict", help="Predict a target key for each document")
    command.add_argument("--checkpoint", required=True)
    command.add_argument("--input", required=True)
    command.add_argument("--target-key", required=True)
    command.add_argument("--out")
    command.add_argument("--batch-size", type=int, default=64)
    _add_decoding(command)
    command.set_defaults(handler=_predict)

    command = commands.add_parser("generate", help="Generate new documents")
    command.add_argument("--checkpoint", required=True)
    command.add_argument("--n", type=int, default=1)
    command.add_argument("--out")
    _add_decoding(command)
    command.set_defaults(handler=_generate)

    command = commands.add_parser("evaluate", help="Score target key predictions on a test corpus")
    command.add_argument("--checkpoint", required=True)
    command.add_argument("--input", required=True)
    command.add_argument("--target-key", required=True)
    command.add_argument("--task", choices=[task.value for task in Task], default=Task.SINGLE.value)
    command.add_argument("--out", help="JSON report file")
    command.add_argument("--predictions", help="JSONL file of per-document results")
    command.add_argument("--batch-size", type=int, default=64)
    _add_decoding(command)
    command.set_defaults(handler=_evaluate)

    command = commands.add_parser("gen-dungeons", help="Generate a Dungeons corpus")
    command.add_argument("--preset", choices=["hard", "easy"], default="hard")
    command.add_argument("--n", type=int)
    command.add_argument("--seed", type=int)
    command.add_argument("--out", required=True)
    command.set_defaults(handler=_gen_dungeons)

    command = commands.add_parser("csv2jsonl", help="Convert a CSV file to a JSONL corpus")
    command.add_argument("--input", required=True)
    command.add_argument("--out", required=True)
    command.add_argument("--type", action="append", metavar="COLUMN=KIND", help="Column type (int, float, bool or str)")
    command.set_defaults(handler=_csv2jsonl)

    command = commands.add_parser("experiment", help="Run an experiment preset")
    command.add_argument("preset", choices=preset_names())
    command.add_argument("--seeds", type=_seeds)
    command.add_argument("--batches", type=int)
    command.add_argument("--instances", type=int)
    command.add_argument("--out", help="Output directory for metrics and reports")
    command.set_defaults(handler=_experiment)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run the command line and return its exit status."""
    load_dotenv()
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    try:
        reset()
        defaults = config(args.config)
        _configure_logging(args.log_config or defaults.logging, args.verbose)
        handler: Callable[[argparse.Namespace, KvformerConfig], int] = args.handler
        return handler(args, defaults)
    except argparse.ArgumentTypeError as e:
        parser.print_usage(sys.stderr)
        print("kvformer: error: %s" % e, file=sys.stderr)
        return EXIT_USAGE
    except Exception:  # pylint: disable=broad-except
        logging.exception("Command %s failed", args.command)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
