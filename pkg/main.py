import argparse
import logging
import sys

from src.config import (
    DEFAULT_BATCH_SIZE,
    DEFAULT_EPOCHS,
    DEFAULT_LEARNING_RATE,
    DEFAULT_MODELS_PER_PROCESS,
    DEFAULT_NUM_SAMPLES,
)
from src.errors import (
    ContextConfigError,
    InsufficientSamplesError,
    UnknownQuantifierError,
    UqwizError,
    ValidationError,
)
from src.utils import (
    configure_logging,
    parse_arch,
    parse_bool,
    parse_dataset_spec,
    parse_processes_list,
    parse_slots,
)
from views.benchmark import cmd_benchmark
from views.predict import cmd_evaluate, cmd_predict
from views.train import cmd_train_ensemble, cmd_train_stochastic

logger = logging.getLogger("uqwiz")

EXIT_FAILURE = 1
EXIT_USAGE = 2

# Raised after argument parsing but still the caller's fault.
USAGE_ERRORS = (UnknownQuantifierError, InsufficientSamplesError, ContextConfigError)

# Shared flags each subcommand cannot run without.
REQUIRED_FLAGS = {
    "train-stochastic": ("model", "dataset"),
    "predict": ("model", "dataset"),
    "evaluate": ("model", "dataset"),
    "train-ensemble": ("dataset",),
}


def _checked(parse):
    """
    argparse type wrapper that keeps the parser's own diagnostic.
    """
    def convert(value):
        try:
            return parse(value)
        except ValidationError as e:
            raise argparse.ArgumentTypeError(str(e))
    convert.__name__ = parse.__name__
    return convert


def dataset_spec(value):
    parse_dataset_spec(value)
    return value


def _common_flags():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="Base seed for data, weights and workers")
    common.add_argument("--model", help="Model file (.uwm) or ensemble directory")
    common.add_argument("--dataset", type=_checked(dataset_spec), help='CSV path or "blobs:<N>,<C>,<spread>"')
    common.add_argument("--output", help="Output path (default: stdout)")
    common.add_argument("--format", choices=("csv", "json"), default="csv")
    return common


def _train_flags(parser, arch_required=True):
    parser.add_argument("--arch", type=_checked(parse_arch), required=arch_required,
                        default=None if arch_required else parse_arch("dense:16"),
                        help='e.g. "dense:16,8 dropout:0.1"')
    parser.add_argument("--epochs", type=int, default=DEFAULT_EPOCHS)
    parser.add_argument("--batch-size", type=int, default=DEFAULT_BATCH_SIZE)
    parser.add_argument("--lr", type=float, default=DEFAULT_LEARNING_RATE)


def _pool_flags(parser, num_models_default=None):
    parser.add_argument("--num-models", type=int, default=num_models_default, required=num_models_default is None)
    parser.add_argument("--context", choices=("none", "dynamic", "device"))
    parser.add_argument("--slots", type=_checked(parse_slots), help='Device slots for --context device, e.g. "A:1,B:1"')
    parser.add_argument("--models-per-process", type=int, default=DEFAULT_MODELS_PER_PROCESS,
                        help="Atomic models a worker handles before it is replaced")


def _quantify_flags(parser, with_conversion):
    parser.add_argument("--quantifier", action="append", required=True,
                        help="Quantifier alias; repeat for several, order is kept")
    parser.add_argument("--num-samples", type=int, default=DEFAULT_NUM_SAMPLES)
    parser.add_argument("--batch-size", type=int, default=DEFAULT_BATCH_SIZE)
    parser.add_argument("--num-processes", type=int, default=0, help="Workers for ensemble prediction")
    parser.add_argument("--context", choices=("none", "dynamic", "device"))
    parser.add_argument("--slots", type=_checked(parse_slots))
    if with_conversion:
        parser.add_argument("--as-confidence", type=_checked(parse_bool), default=None)


def build_parser():
    common = _common_flags()
    parser = argparse.ArgumentParser(prog="uqwiz", description="Uncertainty quantification for feed-forward networks")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train-stochastic", parents=[common], help="Train and save an MC-dropout model")
    _train_flags(train)
    train.set_defaults(handler=cmd_train_stochastic)

    ensemble = commands.add_parser("train-ensemble", parents=[common], help="Train a lazily persisted ensemble")
    _train_flags(ensemble)
    _pool_flags(ensemble)
    ensemble.add_argument("--num-processes", type=int, default=0)
    ensemble.add_argument("--model-dir", required=True)
    ensemble.set_defaults(handler=cmd_train_ensemble)

    predict = commands.add_parser("predict", parents=[common], help="Quantified predictions")
    _quantify_flags(predict, with_conversion=True)
    predict.set_defaults(handler=cmd_predict)

    evaluate = commands.add_parser("evaluate", parents=[common], help="Misprediction detection AUROC")
    _quantify_flags(evaluate, with_conversion=False)
    evaluate.set_defaults(handler=cmd_evaluate, as_confidence=None)

    bench = commands.add_parser("benchmark", parents=[common], help="Sequential vs parallel ensemble creation")
    _train_flags(bench, arch_required=False)
    _pool_flags(bench, num_models_default=8)
    bench.add_argument("--processes-list", type=_checked(parse_processes_list), default=[0, 2, 4])
    bench.set_defaults(handler=cmd_benchmark, dataset="blobs:200,2,0.5")

    return parser, commands.choices


def parse_args(argv=None):
    parser, subparsers = build_parser()
    args = parser.parse_args(argv)
    for flag in REQUIRED_FLAGS.get(args.command, ()):
        if getattr(args, flag) is None:
            subparsers[args.command].error(f"the following arguments are required: --{flag}")
    if getattr(args, "context", None) == "device" and not args.slots:
        subparsers[args.command].error("--context device needs --slots")
    return args


def main(argv=None):
    configure_logging()
    try:
        args = parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE

    try:
        return args.handler(args)
    except USAGE_ERRORS as e:
        print(f"uqwiz {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (UqwizError, OSError) as e:
        logger.debug("Command failed", exc_info=True)
        print(f"uqwiz {args.command}: error: {e}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
