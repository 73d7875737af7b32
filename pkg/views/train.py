import functools
import logging
import os

import numpy as np

from src.ensemble import LazyEnsemble, PoolConfig, create, default_context, make_context
from src.errors import EnsembleError
from src.metrics import accuracy
from src.nnengine import forward, iter_batches
from src.persist import resolve_dataset, save_model
from src.quantifiers import ProblemType
from src.tasks import train_supplier
from views.reports import write_lines

logger = logging.getLogger(__name__)


def _format_loss(losses):
    return f"{losses[-1]:.6f}" if losses else "n/a"


def build_context(args, num_processes):
    """
    Context from --context/--slots; without --context the default for the process count.
    """
    if not args.context:
        return default_context(num_processes)
    return make_context(args.context, args.slots)


def training_supplier(args):
    hidden_sizes, dropout_rate = args.arch
    return functools.partial(
        train_supplier,
        arch=(hidden_sizes, dropout_rate),
        dataset=args.dataset,
        dataset_seed=args.seed,
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
    )


def cmd_train_stochastic(args):
    model, losses = train_supplier(
        0, args.seed, args.arch, args.dataset,
        dataset_seed=args.seed, epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr,
    )
    save_model(model, args.model)

    lines = [f"model: {args.model}", f"final loss: {_format_loss(losses)}"]
    data = resolve_dataset(args.dataset, seed=args.seed)
    if data.problem_type == ProblemType.CLASSIFICATION and len(data):
        predictions = np.concatenate([
            forward(model, batch).argmax(axis=1) for batch in iter_batches(data.features, args.batch_size)
        ])
        train_accuracy = accuracy(predictions, data.labels)
        lines.append(f"training accuracy: {train_accuracy:.4f}")
    write_lines(lines, args.output)
    logger.info("Saved stochastic model to %s", args.model)
    return 0


def cmd_train_ensemble(args):
    if os.path.isdir(args.model_dir) and os.listdir(args.model_dir):
        raise EnsembleError(f"{args.model_dir} is not empty, refusing to overwrite")

    pool = PoolConfig(
        num_processes=args.num_processes,
        models_per_process_before_respawn=args.models_per_process,
        base_seed=args.seed,
    )
    ensemble = LazyEnsemble(args.model_dir, args.num_models)
    histories = create(ensemble, training_supplier(args), pool, context=build_context(args, args.num_processes))

    lines = [f"ensemble: {args.model_dir} ({args.num_models} models)"]
    lines += [f"model {model_id}: final loss {_format_loss(losses)}" for model_id, losses in enumerate(histories)]
    write_lines(lines, args.output)
    return 0
