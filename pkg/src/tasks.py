"""
Task functions for lazy ensembles.

Workers are fresh processes, so tasks must be module-level functions (bind
arguments with functools.partial). Suppliers are called as fn(model_id, seed)
and return (model, result); consumers as fn(model_id, model) and return a result.
"""
import numpy as np

from src.config import DEFAULT_BATCH_SIZE
from src.errors import ValidationError
from src.nnengine import (
    CROSS_ENTROPY,
    MEAN_SQUARED_ERROR,
    TrainConfig,
    architecture_specs,
    build_sequential,
    fit,
    forward,
    iter_batches,
)
from src.persist import resolve_dataset
from src.quantifiers import ProblemType


def train_supplier(model_id, seed, arch, dataset, dataset_seed=0, epochs=50, batch_size=32, learning_rate=0.05):
    """
    Builds and trains one atomic model; the dataset is loaded inside the worker.
    """
    hidden_sizes, dropout_rate = arch
    data = resolve_dataset(dataset, seed=dataset_seed)
    specs = architecture_specs(data.num_features, data.num_outputs, hidden_sizes, dropout_rate, data.problem_type)
    model = build_sequential(specs, seed=seed)
    loss = CROSS_ENTROPY if data.problem_type == ProblemType.CLASSIFICATION else MEAN_SQUARED_ERROR
    config = TrainConfig(epochs=epochs, batch_size=min(batch_size, len(data)), learning_rate=learning_rate,
                         loss=loss, seed=seed)
    history = fit(model, data.features, data.labels, config)
    return model, history.losses


def forward_consumer(model_id, model, inputs_path, batch_size=DEFAULT_BATCH_SIZE, problem_type=None):
    if problem_type is not None and model.problem_type != ProblemType(problem_type):
        raise ValidationError(
            f"Model {model_id} is a {model.problem_type.value} model, "
            f"the quantifiers expect {ProblemType(problem_type).value}"
        )
    x = np.load(inputs_path)
    return np.concatenate([forward(model, batch) for batch in iter_batches(x, batch_size)], axis=0)
