import logging
import os

from src.config import MANIFEST_NAME
from src.ensemble import PoolConfig, ensemble_predict_quantified, open_ensemble
from src.errors import ValidationError
from src.metrics import accuracy, as_uncertainty, misprediction_auroc
from src.nnengine import predict_quantified
from src.persist import load_model, resolve_dataset
from src.quantifiers import ProblemType
from views.reports import EVALUATE_FIELDS, PREDICT_FIELDS, predict_rows, write_report
from views.train import build_context

logger = logging.getLogger(__name__)


def is_ensemble_path(path):
    return os.path.isdir(path) and os.path.exists(os.path.join(path, MANIFEST_NAME))


def run_quantifiers(args, features, as_confidence=None):
    """
    Quantifies with a single model file or an ensemble directory, whichever --model points to.
    """
    if is_ensemble_path(args.model):
        ensemble = open_ensemble(args.model)
        pool = PoolConfig(num_processes=args.num_processes, base_seed=args.seed)
        logger.info("Predicting with ensemble %s (%d models)", args.model, ensemble.num_models)
        return ensemble_predict_quantified(
            ensemble, features, list(args.quantifier), pool,
            as_confidence=as_confidence,
            context=build_context(args, args.num_processes),
            batch_size=args.batch_size,
        )
    model = load_model(args.model, seed=args.seed)
    return predict_quantified(
        model, features, list(args.quantifier),
        num_samples=args.num_samples,
        as_confidence=as_confidence,
        batch_size=args.batch_size,
    )


def cmd_predict(args):
    data = resolve_dataset(args.dataset, seed=args.seed)
    results = run_quantifiers(args, data.features, as_confidence=args.as_confidence)
    write_report(predict_rows(results, args.quantifier), PREDICT_FIELDS, args.output, args.format)
    return 0


def cmd_evaluate(args):
    data = resolve_dataset(args.dataset, seed=args.seed)
    if data.problem_type != ProblemType.CLASSIFICATION:
        raise ValidationError("evaluate needs a labeled classification dataset")
    results = run_quantifiers(args, data.features)

    rows = []
    for alias, result in zip(args.quantifier, results):
        wrong = result.predictions != data.labels
        auroc = misprediction_auroc(as_uncertainty(result), wrong)
        if auroc is None:
            logger.warning("AUROC for %s is undefined: predictions are all correct or all wrong", alias)
        rows.append({
            "quantifier": alias,
            "accuracy": accuracy(result.predictions, data.labels),
            "auroc": "n/a" if auroc is None else auroc,
            "num_inputs": len(result),
            "num_wrong": int(wrong.sum()),
        })
    write_report(rows, EVALUATE_FIELDS, args.output, args.format)
    return 0
