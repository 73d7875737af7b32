"""
Quantifiers turn network outputs into a final prediction and a confidence or
uncertainty score per input.

Point-predictor quantifiers (PPQ) take the softmax rows of one deterministic
forward pass, shape (N, C). Sampling-based quantifiers (SBQ) take sampled
outputs, shape (N, S, C), where the samples of one input are contiguous along
axis 1. Entropies use the natural logarithm. Ties between classes always
resolve to the lowest class index.

All functions here are pure and thread-safe.
"""
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, FrozenSet

import numpy as np
from scipy.special import entr

from src.config import PROB_TOLERANCE
from src.errors import (
    InsufficientSamplesError,
    UnknownQuantifierError,
    UnsupportedShapeError,
    ValidationError,
)


class ScoreKind(str, Enum):
    CONFIDENCE = "confidence"
    UNCERTAINTY = "uncertainty"


class ProblemType(str, Enum):
    CLASSIFICATION = "classification"
    REGRESSION = "regression"


@dataclass(frozen=True)
class QuantifiedResult:
    predictions: np.ndarray
    scores: np.ndarray
    score_kind: ScoreKind

    def __post_init__(self):
        if len(self.predictions) != len(self.scores):
            raise ValidationError(
                f"predictions ({len(self.predictions)}) and scores ({len(self.scores)}) differ in length"
            )

    def __iter__(self):
        # Unpacks as `pred, score = result`.
        yield self.predictions
        yield self.scores

    def __len__(self):
        return len(self.scores)

    @property
    def is_confidence(self):
        return self.score_kind == ScoreKind.CONFIDENCE


@dataclass(frozen=True)
class QuantifierDescriptor:
    canonical_name: str
    aliases: FrozenSet[str]
    is_sampling_based: bool
    native_kind: ScoreKind
    problem_type: ProblemType
    function: Callable[[np.ndarray], QuantifiedResult] = field(compare=False, repr=False)

    def __call__(self, outputs):
        return self.function(outputs)


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def _as_array(values, ndim, what):
    array = np.asarray(values, dtype=np.float64)
    if array.ndim != ndim:
        raise UnsupportedShapeError(f"{what} must have {ndim} axes, got shape {array.shape}")
    if array.shape[0] < 1:
        raise ValidationError(f"{what} must contain at least one input")
    if not np.all(np.isfinite(array)):
        bad = np.argwhere(~np.isfinite(array))[0]
        raise ValidationError(f"{what} contains a non-finite value at index {tuple(int(i) for i in bad)}")
    return array


def _check_probability_rows(array, what):
    # Works for (N, C) and (N, S, C): the class axis is last.
    out_of_range = (array < -PROB_TOLERANCE) | (array > 1.0 + PROB_TOLERANCE)
    if np.any(out_of_range):
        bad = np.argwhere(out_of_range)[0][:-1]
        raise ValidationError(f"{what} row {_format_index(bad)} has entries outside [0, 1]")
    sums = array.sum(axis=-1)
    off = np.abs(sums - 1.0) > PROB_TOLERANCE
    if np.any(off):
        bad = np.argwhere(off)[0]
        raise ValidationError(
            f"{what} row {_format_index(bad)} sums to {float(sums[tuple(bad)]):.9f}, expected 1"
        )


def _format_index(index):
    index = tuple(int(i) for i in index)
    return str(index[0]) if len(index) == 1 else str(index)


def validate_single_outputs(outputs):
    array = _as_array(outputs, 2, "SingleOutputs")
    if array.shape[1] < 2:
        raise UnsupportedShapeError(f"SingleOutputs need at least 2 classes, got {array.shape[1]}")
    _check_probability_rows(array, "SingleOutputs")
    return array


def validate_sampled_outputs(samples, min_samples=2):
    array = _as_array(samples, 3, "SampledOutputs")
    if array.shape[1] < min_samples:
        raise InsufficientSamplesError(
            f"At least {min_samples} samples per input are required, got {array.shape[1]}"
        )
    if array.shape[2] < 2:
        raise UnsupportedShapeError(f"SampledOutputs need at least 2 classes, got {array.shape[2]}")
    _check_probability_rows(array, "SampledOutputs")
    return array


def validate_regression_samples(samples):
    array = _as_array(samples, 3, "RegressionSamples")
    if array.shape[1] < 2:
        raise InsufficientSamplesError(f"At least 2 samples per input are required, got {array.shape[1]}")
    if array.shape[2] < 1:
        raise UnsupportedShapeError("RegressionSamples need at least one output dimension")
    return array


def _sample_mean(values):
    """
    Mean over axis 1; inputs whose samples are all identical get that sample back exactly.
    """
    means = values.mean(axis=1)
    first = values[:, 0]
    identical = (values == values[:, :1]).reshape(len(values), -1).all(axis=1)
    means[identical] = first[identical]
    return means


def _entropy(distributions):
    return entr(distributions).sum(axis=-1)


# ---------------------------------------------------------------------------
# Point-predictor quantifiers
# ---------------------------------------------------------------------------

def max_softmax(outputs):
    values = validate_single_outputs(outputs)
    predictions = values.argmax(axis=1)
    scores = values[np.arange(len(values)), predictions]
    return QuantifiedResult(predictions, scores, ScoreKind.CONFIDENCE)


def prediction_confidence_score(outputs):
    """
    Difference between the highest and the second highest softmax value.
    """
    values = np.asarray(outputs, dtype=np.float64)
    if values.ndim == 2 and values.shape[1] < 2:
        raise UnsupportedShapeError(
            f"prediction_confidence_score needs at least 2 classes, got {values.shape[1]}"
        )
    values = validate_single_outputs(values)
    predictions = values.argmax(axis=1)
    top_two = np.sort(values, axis=1)[:, -2:]
    scores = top_two[:, 1] - top_two[:, 0]
    return QuantifiedResult(predictions, scores, ScoreKind.CONFIDENCE)


# ---------------------------------------------------------------------------
# Sampling-based quantifiers
# ---------------------------------------------------------------------------

def variation_ratio(samples):
    values = validate_sampled_outputs(samples)
    num_inputs, num_samples, num_classes = values.shape
    sample_predictions = values.argmax(axis=2)
    votes = (sample_predictions[:, :, None] == np.arange(num_classes)).sum(axis=1)
    predictions = votes.argmax(axis=1)
    mode_counts = votes[np.arange(num_inputs), predictions]
    scores = 1.0 - mode_counts / num_samples
    return QuantifiedResult(predictions, scores, ScoreKind.UNCERTAINTY)


def predictive_entropy(samples):
    values = validate_sampled_outputs(samples)
    mean_distribution = _sample_mean(values)
    return QuantifiedResult(mean_distribution.argmax(axis=1), _entropy(mean_distribution), ScoreKind.UNCERTAINTY)


def mutual_information(samples):
    values = validate_sampled_outputs(samples)
    mean_distribution = _sample_mean(values)
    expected_entropy = _sample_mean(_entropy(values))
    scores = np.maximum(_entropy(mean_distribution) - expected_entropy, 0.0)
    return QuantifiedResult(mean_distribution.argmax(axis=1), scores, ScoreKind.UNCERTAINTY)


def mean_softmax(samples):
    values = validate_sampled_outputs(samples, min_samples=1)
    mean_distribution = _sample_mean(values)
    predictions = mean_distribution.argmax(axis=1)
    scores = mean_distribution[np.arange(len(values)), predictions]
    return QuantifiedResult(predictions, scores, ScoreKind.CONFIDENCE)


def standard_deviation(samples):
    """
    Population standard deviation per output dimension, averaged over dimensions.
    """
    values = validate_regression_samples(samples)
    predictions = _sample_mean(values)
    deviations = values - predictions[:, None, :]
    per_dimension = np.sqrt(np.mean(deviations ** 2, axis=1))
    return QuantifiedResult(predictions, per_dimension.mean(axis=1), ScoreKind.UNCERTAINTY)


# ---------------------------------------------------------------------------
# Conversion and lookup
# ---------------------------------------------------------------------------

def convert_score(result, as_confidence=None):
    """
    None leaves the result untouched. Otherwise the score is negated when its
    kind differs from the requested one; negation keeps the ranking and works
    for unbounded scores.
    """
    if as_confidence is None:
        return result
    wanted = ScoreKind.CONFIDENCE if as_confidence else ScoreKind.UNCERTAINTY
    if result.score_kind == wanted:
        return result
    return replace(result, scores=-result.scores, score_kind=wanted)


def _descriptor(name, aliases, sampling, kind, function, problem_type=ProblemType.CLASSIFICATION):
    return QuantifierDescriptor(
        canonical_name=name,
        aliases=frozenset(aliases),
        is_sampling_based=sampling,
        native_kind=kind,
        problem_type=problem_type,
        function=function,
    )


BUILTIN_QUANTIFIERS = (
    _descriptor("max_softmax", {"max_softmax", "softmax", "sm"}, False, ScoreKind.CONFIDENCE, max_softmax),
    _descriptor("prediction_confidence_score", {"pcs"}, False, ScoreKind.CONFIDENCE, prediction_confidence_score),
    _descriptor("variation_ratio", {"var_ratio", "variation_ratio", "vr"}, True, ScoreKind.UNCERTAINTY,
                variation_ratio),
    _descriptor("predictive_entropy", {"pred_entropy", "predictive_entropy", "pe"}, True, ScoreKind.UNCERTAINTY,
                predictive_entropy),
    _descriptor("mutual_information", {"mutu_info", "mutual_information", "mi"}, True, ScoreKind.UNCERTAINTY,
                mutual_information),
    _descriptor("mean_softmax", {"mean_softmax", "ensembling", "ms"}, True, ScoreKind.CONFIDENCE, mean_softmax),
    _descriptor("standard_deviation", {"std", "stddev", "standard_deviation"}, True, ScoreKind.UNCERTAINTY,
                standard_deviation, problem_type=ProblemType.REGRESSION),
)


class QuantifierRegistry:
    """
    Immutable alias table; `with_quantifier` returns an extended copy.
    """

    def __init__(self, descriptors):
        self._descriptors = tuple(descriptors)
        self._by_alias = {}
        for descriptor in self._descriptors:
            for alias in descriptor.aliases:
                key = alias.lower()
                if key in self._by_alias:
                    owner = self._by_alias[key].canonical_name
                    raise ValidationError(
                        f"Alias '{alias}' of {descriptor.canonical_name} is already owned by {owner}"
                    )
                self._by_alias[key] = descriptor

    @property
    def descriptors(self):
        return self._descriptors

    def aliases(self):
        return sorted(self._by_alias)

    def lookup(self, alias):
        descriptor = self._by_alias.get(str(alias).lower())
        if descriptor is None:
            raise UnknownQuantifierError(
                f"Unknown quantifier '{alias}'. Known aliases: {', '.join(self.aliases())}"
            )
        return descriptor

    def with_quantifier(self, descriptor):
        return QuantifierRegistry(self._descriptors + (descriptor,))

    def __len__(self):
        return len(self._descriptors)


BUILTIN_REGISTRY = QuantifierRegistry(BUILTIN_QUANTIFIERS)


def lookup_quantifier(alias, registry=None):
    return (registry or BUILTIN_REGISTRY).lookup(alias)


def resolve_quantifiers(quantifiers, registry=None):
    """
    Normalizes one alias/descriptor or a list of them.
    Returns (descriptors, was_single).
    """
    single = isinstance(quantifiers, (str, QuantifierDescriptor))
    items = [quantifiers] if single else list(quantifiers)
    if not items:
        raise ValidationError("At least one quantifier is required")
    descriptors = [
        item if isinstance(item, QuantifierDescriptor) else lookup_quantifier(item, registry)
        for item in items
    ]
    return descriptors, single
