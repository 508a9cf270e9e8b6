"""``openlid`` command-line entry point.

Logs go to stderr as JSON lines; ``identify`` writes its decision records
to stdout as JSON lines. Every error class has its own exit code (see
``openlid --help``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from . import __version__
from .config import ENV_DATASET_ROOT, load_config
from .corpus.synth import SynthSpec, generate_synthetic_corpus
from .errors import EXIT_CODES, LidError
from .pipeline import (
    cmd_enroll,
    cmd_evaluate,
    cmd_fit_backend,
    cmd_identify,
    cmd_prepare,
    cmd_train,
    error_record,
)


class JsonLineFormatter(logging.Formatter):
    """One JSON object per record; no timestamps, so logs are reproducible."""

    def format(self, record: logging.LogRecord) -> str:
        doc = {"level": record.levelname.lower(), "logger": record.name, "event": record.getMessage()}
        extra = getattr(record, "record", None)
        if isinstance(extra, dict):
            doc.update(extra)
        return json.dumps(doc, sort_keys=True, default=str)


def setup_logging(verbose: bool = False) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLineFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(logging.DEBUG if verbose else logging.INFO)


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t]


def _setting(text: str) -> tuple[str, object]:
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


# flag -> dotted config key
_CONFIG_FLAGS = {
    "dataset_root": "dataset_root",
    "seed": "seed",
    "tau": "tau",
    "segment_s": "segment_s",
    "hidden_dims": "hidden_dims",
    "epochs": "train.epochs",
    "batch_size": "train.batch_size",
    "lr": "train.lr",
    "batch_segments": "backend.batch_segments",
    "k": "backend.k",
    "novelty_threshold": "backend.novelty_threshold",
    "pooling": "backend.pooling",
    "min_enroll": "backend.min_enroll",
}


def _config_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("configuration (flags override the config file)")
    g.add_argument("--config", help="JSON pipeline configuration")
    g.add_argument("--work", "-w", default="work", help="work directory holding all artifacts")
    g.add_argument("--dataset-root", help=f"dataset root (default: ${ENV_DATASET_ROOT})")
    g.add_argument("--seed", type=int)
    g.add_argument("--tau", type=float)
    g.add_argument("--segment-s", type=float)
    g.add_argument("--hidden-dims", type=_ints, help="comma-separated hidden layer widths")
    g.add_argument("--epochs", type=int)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--lr", type=float)
    g.add_argument("--batch-segments", type=int)
    g.add_argument("--k", type=int)
    g.add_argument("--novelty-threshold", type=float)
    g.add_argument("--pooling", choices=["concat", "mean"])
    g.add_argument("--min-enroll", type=int)
    g.add_argument("--set", type=_setting, action="append", default=[], metavar="KEY=VALUE",
                   help="any config field, dotted for nested ones (e.g. train.weight_decay=0)")


def _config(args):
    overrides = {key: getattr(args, flag) for flag, key in _CONFIG_FLAGS.items()}
    overrides.update(dict(args.set))
    return load_config(args.config, overrides)


def build_parser() -> argparse.ArgumentParser:
    table = "\n".join(f"  {code:>3}  {name}" for name, code in sorted(EXIT_CODES.items(), key=lambda kv: kv[1]))
    parser = argparse.ArgumentParser(
        prog="openlid", description="Open-set spoken language identification.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog=f"exit codes:\n    0  success\n    1  unexpected error\n{table}")
    parser.add_argument("--version", action="version", version=f"openlid {__version__}")
    parser.add_argument("--verbose", "-v", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="segment, featurize and split the dataset")
    _config_args(p)

    p = sub.add_parser("train", help="train the TDNN on the prepared split")
    _config_args(p)

    p = sub.add_parser("fit-backend", help="fit the LDA/pLDA ensemble on out-of-set data")
    _config_args(p)
    p.add_argument("--model", help="model file (default: <work>/model.lidm)")

    p = sub.add_parser("evaluate", help="compute the metric report on the test split")
    _config_args(p)
    p.add_argument("--model")
    p.add_argument("--ensemble")
    p.add_argument("--out", help="report directory (default: <work>/report)")

    p = sub.add_parser("identify", help="identify the language of one audio file")
    p.add_argument("audio")
    p.add_argument("--model", required=True)
    p.add_argument("--ensemble", required=True)
    p.add_argument("--tau", type=float, help="threshold (default: the one the model was trained with)")

    p = sub.add_parser("enroll", help="add a new out-of-set language to the ensemble")
    p.add_argument("code")
    p.add_argument("audio_dir")
    p.add_argument("--model", required=True)
    p.add_argument("--ensemble", required=True)
    p.add_argument("--work", "-w", default="work")
    p.add_argument("--out", help="new ensemble file (default: <ensemble>+<code>.lide)")

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("out")
    p.add_argument("--languages", type=int, default=4)
    p.add_argument("--speakers", type=int, default=5)
    p.add_argument("--minutes", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=0)
    return parser


def run(args) -> int:
    cmd = args.command
    if cmd == "prepare":
        cmd_prepare(_config(args), args.work)
    elif cmd == "train":
        cmd_train(_config(args), args.work)
    elif cmd == "fit-backend":
        cmd_fit_backend(_config(args), args.work, args.model)
    elif cmd == "evaluate":
        report = cmd_evaluate(_config(args), args.work, args.model, args.ensemble, args.out)
        print(json.dumps({"eer": report["eer"], "argmax_threshold": report["argmax_threshold"],
                          "in_set_accuracy": report["in_set"]["accuracy"],
                          "out_of_set_accuracy": report["out_of_set"]["accuracy"]}, sort_keys=True))
    elif cmd == "identify":
        for rec in cmd_identify(args.audio, args.model, args.ensemble, args.tau):
            print(json.dumps(rec, sort_keys=True))
    elif cmd == "enroll":
        _, registry, path = cmd_enroll(args.work, args.code, args.audio_dir, args.model, args.ensemble, args.out)
        print(json.dumps({"ensemble": path, "registry": registry.to_dict()}, sort_keys=True))
    elif cmd == "synth":
        spec = SynthSpec(args.languages, args.speakers, args.minutes, seed=args.seed)
        generate_synthetic_corpus(spec, args.out)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        return run(args)
    except LidError as exc:
        logging.getLogger("openlid").error("failed", extra={"record": error_record(exc)})
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
