import argparse
import logging
import os
import sys
from dataclasses import fields

from tkan.clips import (
    CASIA_TEST_SUBJECTS,
    CASIA_TRAIN_SUBJECTS,
    load_manifest,
    load_silhouette_dir,
    split_by_subject,
    write_silhouette_dir,
)
from tkan.errors import (
    CheckpointMismatchError,
    ContractError,
    FormatError,
    NumericalError,
    ProtocolError,
)
from tkan.synth import synth_gait_dataset

from . import config as settings
from .checkpoint import load_checkpoint
from .comparison import compare_heads
from .db import ensure_embedding_index
from .evaluator import EvalProtocol, EvalReport, comparison_table, embed_records, evaluate, pixel_mean_report
from .gradcheck import SUITES, format_report, run_suites
from .trainer import train

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERICAL = 3


class UsageError(Exception):
    pass


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def parse_subject_range(text):
    """``"1-74"`` or ``"1,3,10-12"`` -> list of ints."""
    subjects = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            if "-" in part:
                low, high = (int(value) for value in part.split("-", 1))
                subjects.extend(range(low, high + 1))
            else:
                subjects.append(int(part))
        except ValueError as exc:
            raise UsageError(f"bad subject range {text!r}") from exc
    return subjects


def _add_config_flags(parser):
    group = parser.add_argument_group("training configuration")
    group.add_argument("--preset", default="full", choices=sorted(settings.PRESETS))
    group.add_argument("--config", dest="config_file", help="key=value configuration file")
    for item in fields(settings.TrainConfig):
        group.add_argument(f"--{item.name.replace('_', '-')}", dest=f"cfg_{item.name}", default=None)


def _add_data_flags(parser):
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--data", help="silhouette tree root/<subject>/<cond>-<seq>/<view>/")
    source.add_argument("--manifest", help="subject,cond,seq,view,path lines")
    source.add_argument("--synthetic", action="store_true", help="generate a synthetic gait dataset")
    parser.add_argument("--subjects", type=int, default=10, help="synthetic subjects")
    parser.add_argument("--clips-per-subject", type=int, default=8)
    parser.add_argument("--train-subjects", default=f"{CASIA_TRAIN_SUBJECTS.start}-{CASIA_TRAIN_SUBJECTS.stop - 1}")
    parser.add_argument("--test-subjects", default=f"{CASIA_TEST_SUBJECTS.start}-{CASIA_TEST_SUBJECTS.stop - 1}")


def build_parser():
    parser = ArgumentParser(prog="tkan", description="Temporal KAN gait recognition")
    parser.add_argument("--log-level", default=None, help=f"default {settings.LOG_LEVEL}")
    commands = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    train_cmd = commands.add_parser("train", help="train a head and evaluate it on the test split")
    _add_config_flags(train_cmd)
    _add_data_flags(train_cmd)
    train_cmd.add_argument("--output", default=settings.OUTPUT_DIR)
    train_cmd.add_argument("--compare", action="store_true", help="train all three heads and tabulate")

    eval_cmd = commands.add_parser("evaluate", help="gallery/probe evaluation of a checkpoint")
    eval_cmd.add_argument("--checkpoint", required=True)
    _add_data_flags(eval_cmd)
    eval_cmd.add_argument("--seed", type=int, default=None, help="synthetic data seed (default: the checkpoint's)")
    eval_cmd.add_argument("--keep-same-view", action="store_true", help="do not exclude identical views")
    eval_cmd.add_argument("--baseline", action="store_true", help="also score the pixel-mean baseline")
    eval_cmd.add_argument("--output", help="report path (stdout when omitted)")

    embed_cmd = commands.add_parser("embed", help="store clip embeddings in the sqlite index")
    embed_cmd.add_argument("--checkpoint", required=True)
    _add_data_flags(embed_cmd)
    embed_cmd.add_argument("--seed", type=int, default=None, help="synthetic data seed (default: the checkpoint's)")
    embed_cmd.add_argument("--db", default=settings.EMBED_DB_PATH)
    embed_cmd.add_argument("--tsv", help="also write embeddings as tab-separated rows")

    synth_cmd = commands.add_parser("synth-data", help="write a synthetic silhouette tree")
    synth_cmd.add_argument("--output", required=True)
    synth_cmd.add_argument("--subjects", type=int, default=10)
    synth_cmd.add_argument("--clips-per-subject", type=int, default=8)
    synth_cmd.add_argument("--test-subjects", type=int, default=None)
    synth_cmd.add_argument("--seed", type=int, default=settings.SEED)

    grad_cmd = commands.add_parser("gradcheck", help="finite-difference check of every backward pass")
    grad_cmd.add_argument("--suite", action="append", choices=list(SUITES))
    grad_cmd.add_argument("--tolerance", type=float, default=1e-5)
    grad_cmd.add_argument("--seed", type=int, default=0)

    report_cmd = commands.add_parser("report", help="comparison table from saved reports")
    report_cmd.add_argument("reports", nargs="+")
    report_cmd.add_argument("--output")
    return parser


def resolve_config(args):
    overrides = {}
    for item in fields(settings.TrainConfig):
        value = getattr(args, f"cfg_{item.name}", None)
        if value is not None:
            overrides[item.name] = settings.coerce_value(item.name, value)
    return settings.build_config(args.preset, args.config_file, overrides)


def load_dataset(args, seed, clip_length=50, frame_size=64):
    if args.synthetic:
        return synth_gait_dataset(
            args.subjects,
            args.clips_per_subject,
            seed=seed,
            clip_length=clip_length,
            frame_size=frame_size,
        )
    if args.data:
        if not os.path.isdir(args.data):
            raise FileNotFoundError(f"no such data directory: {args.data}")
        records, report = load_silhouette_dir(args.data, clip_length, frame_size, include_report=True)
    else:
        records, report = load_manifest(args.manifest, clip_length, frame_size, include_report=True)
    for error in report.errors:
        logger.warning("load error: %s", error)
    return split_by_subject(
        records,
        parse_subject_range(args.train_subjects),
        parse_subject_range(args.test_subjects),
    )


def _emit(text, path=None):
    if path:
        with open(path, "w", encoding="utf-8") as handle:
            handle.write(text)
    else:
        sys.stdout.write(text)


def cmd_train(args):
    config = resolve_config(args)
    dataset = load_dataset(args, config.seed, config.clip_length, config.frame_size)
    if args.compare:
        _, table = compare_heads(config, dataset, args.output)
        _emit(table)
        return EXIT_OK
    result = train(config, dataset.train, args.output, test_records=dataset.test)
    if dataset.test:
        report = evaluate(result.model, dataset.test, config=config, curves=result.curves)
        report.write(os.path.join(args.output, "report.txt"))
        _emit(report.to_text())
    return EXIT_OK


def _data_seed(args, checkpoint):
    return checkpoint.header["seed"] if args.seed is None else args.seed


def cmd_evaluate(args):
    model, checkpoint = load_checkpoint(args.checkpoint)
    config = checkpoint.config
    dataset = load_dataset(args, _data_seed(args, checkpoint), config.clip_length, config.frame_size)
    records = dataset.test
    if not records:
        raise ProtocolError("no test subjects to evaluate; check --test-subjects against the data")
    seen = sorted(dataset.test_subjects & set(checkpoint.class_subjects), key=str)
    if seen:
        raise ProtocolError(f"test subjects {seen} were training identities of this checkpoint")
    protocol = EvalProtocol(exclude_same_view=not args.keep_same_view)
    report = evaluate(model, records, protocol, config=config)
    text = report.to_text()
    if args.baseline:
        text += "\n" + comparison_table({config.head: report, "pixel-mean": pixel_mean_report(records, protocol)})
    _emit(text, args.output)
    return EXIT_OK


def cmd_embed(args):
    model, checkpoint = load_checkpoint(args.checkpoint)
    config = checkpoint.config
    dataset = load_dataset(args, _data_seed(args, checkpoint), config.clip_length, config.frame_size)
    records = dataset.train + dataset.test
    ensure_embedding_index(model, records, args.db, checkpoint.header["config_hash"] + f":{checkpoint.epoch}")
    if args.tsv:
        rows = []
        for clip in embed_records(model, records):
            values = "\t".join(f"{value:.8g}" for value in clip.embedding)
            rows.append(f"{clip.subject}\t{clip.condition}\t{clip.seq}\t{clip.view or ''}\t{values}\n")
        _emit("".join(rows), args.tsv)
    return EXIT_OK


def cmd_synth_data(args):
    dataset = synth_gait_dataset(
        args.subjects,
        args.clips_per_subject,
        seed=args.seed,
        num_test_subjects=args.test_subjects,
    )
    manifest = write_silhouette_dir(dataset.train + dataset.test, args.output)
    sys.stdout.write(f"{manifest}\n")
    return EXIT_OK


def cmd_gradcheck(args):
    results = run_suites(args.suite, tolerance=args.tolerance, seed=args.seed)
    sys.stdout.write(format_report(results))
    return EXIT_OK if all(result.passed for result in results) else EXIT_NUMERICAL


def cmd_report(args):
    reports = {}
    for path in args.reports:
        report = EvalReport.read(path)
        reports[report.head or os.path.basename(path)] = report
    _emit(comparison_table(reports), args.output)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "embed": cmd_embed,
    "synth-data": cmd_synth_data,
    "gradcheck": cmd_gradcheck,
    "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        sys.stderr.write(f"{parser.prog}: error: {exc}\n")
        return EXIT_USAGE
    logging.basicConfig(
        level=(args.log_level or settings.LOG_LEVEL).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ContractError) as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except NumericalError as exc:
        logger.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (FormatError, ProtocolError, CheckpointMismatchError, OSError) as exc:
        logger.error("data error: %s", exc)
        return EXIT_DATA
