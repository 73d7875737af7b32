"""
Minimal sequential feed-forward networks with a per-model Stochastic Mode.

Dropout layers are active while training, and at prediction time only when the
owning model's stochastic mode is enabled. `predict_quantified` switches the
mode on for sampling-based quantifiers and always switches it off again.
There is no global learning phase: every model carries its own state, so a
model must be used by one thread at a time.
"""
import logging
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from src.config import DEFAULT_BATCH_SIZE, DEFAULT_NUM_SAMPLES
from src.errors import InsufficientSamplesError, ModelBuildError, TrainingError, ValidationError
from src.quantifiers import ProblemType, convert_score, resolve_quantifiers

logger = logging.getLogger(__name__)

DENSE = "dense"
RELU = "relu"
SOFTMAX = "softmax"
DROPOUT = "dropout"
LAYER_KINDS = (DENSE, RELU, SOFTMAX, DROPOUT)

CROSS_ENTROPY = "cross_entropy"
MEAN_SQUARED_ERROR = "mean_squared_error"
LOSSES = (CROSS_ENTROPY, MEAN_SQUARED_ERROR)

# spawn_key prefixes keep weight-init and dropout streams apart
_INIT_STREAM = 0
_DROPOUT_STREAM = 1
_LOG_CLIP = 1e-12


@dataclass
class LayerSpec:
    kind: str
    in_dim: Optional[int] = None
    out_dim: Optional[int] = None
    weights: Optional[np.ndarray] = None
    biases: Optional[np.ndarray] = None
    rate: float = 0.0


def dense(in_dim, out_dim, weights=None, biases=None):
    return LayerSpec(DENSE, in_dim=in_dim, out_dim=out_dim, weights=weights, biases=biases)


def relu():
    return LayerSpec(RELU)


def softmax():
    return LayerSpec(SOFTMAX)


def dropout(rate):
    return LayerSpec(DROPOUT, rate=rate)


@dataclass
class StochasticMode:
    enabled: bool = False


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 0.05
    loss: str = CROSS_ENTROPY
    seed: int = 0

    def validate(self, num_examples):
        if self.epochs < 0:
            raise ValidationError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be positive, got {self.batch_size}")
        if num_examples < 1:
            raise ValidationError("Training needs at least one example")
        if self.batch_size > num_examples:
            raise ValidationError(f"batch_size {self.batch_size} exceeds dataset size {num_examples}")
        if self.learning_rate < 0:
            raise ValidationError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if self.loss not in LOSSES:
            raise ValidationError(f"Unknown loss '{self.loss}', expected one of {', '.join(LOSSES)}")


@dataclass
class TrainingHistory:
    losses: List[float] = field(default_factory=list)

    @property
    def final_loss(self):
        return self.losses[-1] if self.losses else None

    def __len__(self):
        return len(self.losses)


class SequentialModel:
    """
    Ordered layer stack. `stochastic_mode` is None for plain models, whose
    dropout layers never fire outside training.
    """

    def __init__(self, layers, rng_seed=0, problem_type=ProblemType.CLASSIFICATION, stochastic_mode=None):
        self.layers = layers
        self.rng_seed = rng_seed
        self.problem_type = ProblemType(problem_type)
        self.stochastic_mode = stochastic_mode
        self._dropout_calls = 0

    @property
    def is_stochastic(self):
        return self.stochastic_mode is not None

    @property
    def dense_layers(self):
        return [layer for layer in self.layers if layer.kind == DENSE]

    @property
    def randomized_layers(self):
        return [layer for layer in self.layers if layer.kind == DROPOUT]

    @property
    def input_dim(self):
        return self.dense_layers[0].in_dim

    @property
    def output_dim(self):
        return self.dense_layers[-1].out_dim

    @property
    def dropout_enabled(self):
        return self.stochastic_mode is not None and self.stochastic_mode.enabled

    def next_dropout_rng(self):
        sequence = np.random.SeedSequence(
            entropy=self.rng_seed, spawn_key=(_DROPOUT_STREAM, self._dropout_calls)
        )
        self._dropout_calls += 1
        return np.random.default_rng(sequence)

    def __repr__(self):
        kinds = ",".join(layer.kind for layer in self.layers)
        return f"SequentialModel([{kinds}], problem_type={self.problem_type.value}, stochastic={self.is_stochastic})"


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def _glorot(in_dim, out_dim, seed, index):
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(_INIT_STREAM, index)))
    limit = np.sqrt(6.0 / (in_dim + out_dim))
    return rng.uniform(-limit, limit, size=(out_dim, in_dim))


def build_sequential(layer_specs, seed=0, problem_type=None, stochastic=True):
    """
    Builds a model from layer specs. Dense layers without weights get
    Glorot-uniform weights and zero biases from a PRNG seeded by (seed, layer index).
    With stochastic=True every dropout layer is bound to the model's StochasticMode.
    """
    seed = int(seed)
    if seed < 0:
        raise ModelBuildError(f"seed must be non-negative, got {seed}")
    if not layer_specs:
        raise ModelBuildError("A model needs at least one layer")

    layers = []
    width = None
    for index, spec in enumerate(layer_specs):
        if spec.kind not in LAYER_KINDS:
            raise ModelBuildError(f"Layer {index}: unknown kind '{spec.kind}'")

        if spec.kind == DENSE:
            if not spec.in_dim or not spec.out_dim or spec.in_dim < 1 or spec.out_dim < 1:
                raise ModelBuildError(f"Layer {index}: dense dimensions must be positive integers")
            if width is not None and spec.in_dim != width:
                raise ModelBuildError(
                    f"Layer {index}: dense in_dim {spec.in_dim} does not match previous width {width}"
                )
            if spec.weights is None:
                weights = _glorot(spec.in_dim, spec.out_dim, seed, index)
            else:
                weights = np.array(spec.weights, dtype=np.float64)
            if weights.shape != (spec.out_dim, spec.in_dim):
                raise ModelBuildError(
                    f"Layer {index}: weights have shape {weights.shape}, expected {(spec.out_dim, spec.in_dim)}"
                )
            if spec.biases is None:
                biases = np.zeros(spec.out_dim)
            else:
                biases = np.array(spec.biases, dtype=np.float64).reshape(-1)
            if biases.shape != (spec.out_dim,):
                raise ModelBuildError(f"Layer {index}: biases have length {biases.size}, expected {spec.out_dim}")
            layers.append(LayerSpec(DENSE, spec.in_dim, spec.out_dim, weights, biases))
            width = spec.out_dim

        elif spec.kind == DROPOUT:
            rate = float(spec.rate)
            if not 0.0 <= rate < 1.0:
                raise ModelBuildError(f"Layer {index}: dropout rate must be in [0, 1), got {rate}")
            layers.append(LayerSpec(DROPOUT, rate=rate))

        else:
            layers.append(LayerSpec(spec.kind))

    if width is None:
        raise ModelBuildError("A model needs at least one dense layer")

    ends_with_softmax = layers[-1].kind == SOFTMAX
    if problem_type is None:
        problem_type = ProblemType.CLASSIFICATION if ends_with_softmax else ProblemType.REGRESSION
    problem_type = ProblemType(problem_type)
    if problem_type == ProblemType.CLASSIFICATION and not ends_with_softmax:
        raise ModelBuildError("Classification models must end with a softmax layer")

    mode = StochasticMode() if stochastic else None
    return SequentialModel(layers, rng_seed=seed, problem_type=problem_type, stochastic_mode=mode)


def architecture_specs(in_dim, out_dim, hidden_sizes, dropout_rate=None, problem_type=ProblemType.CLASSIFICATION):
    """
    dense -> relu [-> dropout] per hidden layer, then the output layer.
    """
    specs = []
    width = in_dim
    for hidden in hidden_sizes:
        specs.extend([dense(width, hidden), relu()])
        if dropout_rate is not None:
            specs.append(dropout(dropout_rate))
        width = hidden
    specs.append(dense(width, out_dim))
    if ProblemType(problem_type) == ProblemType.CLASSIFICATION:
        specs.append(softmax())
    return specs


def _copy_layers(layers):
    return [
        LayerSpec(
            layer.kind,
            layer.in_dim,
            layer.out_dim,
            None if layer.weights is None else layer.weights.copy(),
            None if layer.biases is None else layer.biases.copy(),
            layer.rate,
        )
        for layer in layers
    ]


def stochastic_from_plain(model):
    """
    Returns (model, degenerate). Randomized layers of the returned model are
    bound to its own StochasticMode. A model without randomized layers comes
    back unchanged with degenerate=True, since sampling it yields no spread.
    """
    if not model.randomized_layers:
        logger.warning("Model has no randomized layers; sampling-based quantifiers will be degenerate")
        return model, True
    converted = SequentialModel(
        _copy_layers(model.layers),
        rng_seed=model.rng_seed,
        problem_type=model.problem_type,
        stochastic_mode=StochasticMode(),
    )
    logger.info("Converted plain model with %d randomized layer(s)", len(converted.randomized_layers))
    return converted, False


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------

def _check_inputs(model, inputs):
    x = np.asarray(inputs, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValidationError(f"Inputs have shape {x.shape}, expected (batch, {model.input_dim})")
    return x


def _dense_rows(x, layer):
    # Each output row is reduced on its own, so it does not depend on the batch it came in.
    return (x[:, None, :] * layer.weights[None, :, :]).sum(axis=-1) + layer.biases


def _softmax_rows(x):
    shifted = x - x.max(axis=1, keepdims=True)
    exps = np.exp(shifted)
    return exps / exps.sum(axis=1, keepdims=True)


def _propagate(model, x, dropout_rng, row_exact):
    """
    Runs all layers; returns the output and per-layer caches for backprop.
    """
    caches = []
    for layer in model.layers:
        if layer.kind == DENSE:
            out = _dense_rows(x, layer) if row_exact else x @ layer.weights.T + layer.biases
            caches.append(x)
        elif layer.kind == RELU:
            out = np.maximum(x, 0.0)
            caches.append(x)
        elif layer.kind == SOFTMAX:
            out = _softmax_rows(x)
            caches.append(out)
        else:
            if dropout_rng is None:
                out = x
                caches.append(None)
            else:
                scale = (dropout_rng.random(x.shape) >= layer.rate) / (1.0 - layer.rate)
                out = x * scale
                caches.append(scale)
        x = out
    return x, caches


def forward(model, inputs):
    x = _check_inputs(model, inputs)
    rng = model.next_dropout_rng() if model.dropout_enabled and model.randomized_layers else None
    output, _ = _propagate(model, x, rng, row_exact=True)
    return output


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _prepare_targets(model, y, loss, num_examples):
    if loss == CROSS_ENTROPY:
        if model.problem_type != ProblemType.CLASSIFICATION:
            raise ValidationError("cross_entropy needs a classification model ending in softmax")
        labels = np.asarray(y)
        if labels.ndim != 1 or len(labels) != num_examples:
            raise ValidationError(f"Expected {num_examples} integer labels, got shape {labels.shape}")
        if not np.all(np.equal(np.mod(labels, 1), 0)):
            raise ValidationError("Labels must be integers")
        labels = labels.astype(np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= model.output_dim):
            raise ValidationError(f"Labels must be in [0, {model.output_dim})")
        return np.eye(model.output_dim)[labels]

    targets = np.asarray(y, dtype=np.float64)
    if targets.ndim == 1:
        targets = targets.reshape(-1, 1)
    if targets.shape != (num_examples, model.output_dim):
        raise ValidationError(f"Targets have shape {targets.shape}, expected {(num_examples, model.output_dim)}")
    return targets


def _loss_and_gradients(model, x, targets, loss, dropout_rng):
    output, caches = _propagate(model, x, dropout_rng, row_exact=False)
    batch = len(x)
    layers = model.layers

    if loss == CROSS_ENTROPY:
        true_probs = np.clip((output * targets).sum(axis=1), _LOG_CLIP, 1.0)
        value = float(-np.mean(np.log(true_probs)))
        grad = (output - targets) / batch
        # gradient starts at the softmax input
        stop = len(layers) - 1
    else:
        diff = output - targets
        value = float(np.mean(diff ** 2))
        grad = 2.0 * diff / diff.size
        stop = len(layers)

    gradients = {}
    for index in reversed(range(stop)):
        layer = layers[index]
        cache = caches[index]
        if layer.kind == DENSE:
            gradients[index] = (grad.T @ cache, grad.sum(axis=0))
            grad = grad @ layer.weights
        elif layer.kind == RELU:
            grad = grad * (cache > 0)
        elif layer.kind == SOFTMAX:
            grad = cache * (grad - (grad * cache).sum(axis=1, keepdims=True))
        elif cache is not None:
            grad = grad * cache

    ordered = [gradients[i] for i in sorted(gradients)]
    return value, ordered


def loss_and_gradients(model, x, y, loss=CROSS_ENTROPY):
    """
    Loss and per-dense-layer (dW, db) gradients with dropout inactive.
    """
    x = _check_inputs(model, x)
    targets = _prepare_targets(model, y, loss, len(x))
    return _loss_and_gradients(model, x, targets, loss, None)


def evaluate_loss(model, x, y, loss=CROSS_ENTROPY):
    return loss_and_gradients(model, x, y, loss)[0]


def fit(model, x, y, config):
    """
    Minibatch SGD. Dropout is active during training whatever the stochastic
    mode says. Shuffling and dropout masks come from config.seed only.
    """
    x = _check_inputs(model, x)
    config.validate(len(x))
    targets = _prepare_targets(model, y, config.loss, len(x))
    if config.loss == CROSS_ENTROPY and model.layers[-1].kind != SOFTMAX:
        raise ValidationError("cross_entropy needs a model ending in softmax")

    rng = np.random.default_rng(np.random.SeedSequence(int(config.seed)))
    dense_layers = model.dense_layers
    history = TrainingHistory()

    for epoch in range(config.epochs):
        order = rng.permutation(len(x))
        total = 0.0
        for start in range(0, len(x), config.batch_size):
            batch = order[start:start + config.batch_size]
            dropout_rng = rng if model.randomized_layers else None
            value, gradients = _loss_and_gradients(model, x[batch], targets[batch], config.loss, dropout_rng)
            if not np.isfinite(value):
                raise TrainingError(
                    f"Loss became {value} at epoch {epoch}, batch starting at {start}; "
                    f"try a smaller learning rate than {config.learning_rate}"
                )
            for layer, (d_weights, d_biases) in zip(dense_layers, gradients):
                layer.weights -= config.learning_rate * d_weights
                layer.biases -= config.learning_rate * d_biases
            total += value * len(batch)
        history.losses.append(total / len(x))
        logger.debug("epoch %d loss %.6f", epoch, history.losses[-1])

    if history.losses:
        logger.info("Trained %d epochs, final loss %.6f", config.epochs, history.final_loss)
    return history


# ---------------------------------------------------------------------------
# Quantified prediction
# ---------------------------------------------------------------------------

@contextmanager
def stochastic_mode(model, enabled):
    """
    Sets the model's stochastic mode for the block; it is always false afterwards.
    """
    if model.stochastic_mode is None:
        yield model
        return
    model.stochastic_mode.enabled = bool(enabled)
    try:
        yield model
    finally:
        model.stochastic_mode.enabled = False


def iter_batches(x, batch_size):
    for start in range(0, len(x), batch_size):
        yield x[start:start + batch_size]


def iter_replicated_batches(x, num_samples, batch_size):
    """
    Streams the N*S replicated rows in batches of at most batch_size rows.
    Row r of the stream is input r // num_samples, so samples of one input are contiguous.
    """
    total = len(x) * num_samples
    for start in range(0, total, batch_size):
        rows = np.arange(start, min(start + batch_size, total)) // num_samples
        yield x[rows]


def _collect(model, batches):
    return np.concatenate([forward(model, batch) for batch in batches], axis=0)


def predict_quantified(model, x, quantifiers, num_samples=DEFAULT_NUM_SAMPLES, as_confidence=None,
                       batch_size=DEFAULT_BATCH_SIZE, registry=None):
    """
    Predicts and quantifies. Point-predictor quantifiers get one deterministic
    pass; sampling-based ones get num_samples stochastic passes per input.
    A single quantifier returns one QuantifiedResult, a list returns a list in the same order.
    """
    descriptors, single = resolve_quantifiers(quantifiers, registry)
    x = _check_inputs(model, x)
    if len(x) == 0:
        raise ValidationError("At least one input is required")
    if batch_size < 1:
        raise ValidationError(f"batch_size must be positive, got {batch_size}")
    for descriptor in descriptors:
        if descriptor.problem_type != model.problem_type:
            raise ValidationError(
                f"Quantifier {descriptor.canonical_name} is for {descriptor.problem_type.value} "
                f"but the model is {model.problem_type.value}"
            )

    needs_point = any(not d.is_sampling_based for d in descriptors)
    needs_samples = any(d.is_sampling_based for d in descriptors)
    if needs_samples and num_samples < 2:
        raise InsufficientSamplesError(f"Sampling-based quantifiers need num_samples >= 2, got {num_samples}")

    single_outputs = None
    sampled_outputs = None
    with stochastic_mode(model, False):
        if needs_point:
            single_outputs = _collect(model, iter_batches(x, batch_size))

    if needs_samples:
        if not model.is_stochastic or not model.randomized_layers:
            logger.warning("Sampling a model without active randomized layers; all samples will be identical")
        with stochastic_mode(model, True):
            stream = iter_replicated_batches(x, num_samples, batch_size)
            sampled_outputs = _collect(model, stream).reshape(len(x), num_samples, -1)

    results = []
    for descriptor in descriptors:
        outputs = sampled_outputs if descriptor.is_sampling_based else single_outputs
        results.append(convert_score(descriptor(outputs), as_confidence))
    return results[0] if single else results
