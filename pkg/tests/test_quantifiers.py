import math

import numpy as np
import pytest

from src.errors import (
    InsufficientSamplesError,
    UnknownQuantifierError,
    UnsupportedShapeError,
    ValidationError,
)
from src.quantifiers import (
    BUILTIN_QUANTIFIERS,
    BUILTIN_REGISTRY,
    ProblemType,
    QuantifiedResult,
    QuantifierDescriptor,
    ScoreKind,
    convert_score,
    lookup_quantifier,
    max_softmax,
    mean_softmax,
    mutual_information,
    prediction_confidence_score,
    predictive_entropy,
    resolve_quantifiers,
    standard_deviation,
    variation_ratio,
)


def one_hot(cls, num_classes):
    row = [0.0] * num_classes
    row[cls] = 1.0
    return row


# -----------------------------------------------------------------------
# Brute-force references: explicit loops, first maximum wins
# -----------------------------------------------------------------------

def _first_argmax(values):
    best = 0
    for index, value in enumerate(values):
        if value > values[best]:
            best = index
    return best


def _h(distribution):
    return -sum(p * math.log(p) for p in distribution if p > 0)


def _mean_rows(rows):
    return [sum(column) / len(rows) for column in zip(*rows)]


def brute_variation_ratio(samples):
    predictions, scores = [], []
    for rows in samples:
        votes = [0] * len(rows[0])
        for row in rows:
            votes[_first_argmax(row)] += 1
        mode = _first_argmax(votes)
        predictions.append(mode)
        scores.append(1.0 - votes[mode] / len(rows))
    return predictions, scores


def brute_predictive_entropy(samples):
    means = [_mean_rows(rows) for rows in samples]
    return [_first_argmax(m) for m in means], [_h(m) for m in means]


def brute_mutual_information(samples):
    predictions, scores = [], []
    for rows in samples:
        mean = _mean_rows(rows)
        predictions.append(_first_argmax(mean))
        scores.append(max(_h(mean) - sum(_h(r) for r in rows) / len(rows), 0.0))
    return predictions, scores


def brute_mean_softmax(samples):
    means = [_mean_rows(rows) for rows in samples]
    predictions = [_first_argmax(m) for m in means]
    return predictions, [m[p] for m, p in zip(means, predictions)]


def brute_standard_deviation(samples):
    predictions, scores = [], []
    for rows in samples:
        mean = _mean_rows(rows)
        stds = [
            math.sqrt(sum((row[d] - mean[d]) ** 2 for row in rows) / len(rows))
            for d in range(len(mean))
        ]
        predictions.append(mean)
        scores.append(sum(stds) / len(stds))
    return predictions, scores


def brute_max_softmax(outputs):
    predictions = [_first_argmax(row) for row in outputs]
    return predictions, [row[p] for row, p in zip(outputs, predictions)]


def brute_pcs(outputs):
    predictions, scores = [], []
    for row in outputs:
        ordered = sorted(row, reverse=True)
        predictions.append(_first_argmax(row))
        scores.append(ordered[0] - ordered[1])
    return predictions, scores


# -----------------------------------------------------------------------
# Point predictors
# -----------------------------------------------------------------------

class TestMaxSoftmax:

    @pytest.mark.parametrize("outputs, prediction, confidence", [
        ([[0.0, 1.0]], 1, 1.0),
        ([[0.5, 0.5]], 0, 0.5),
        ([[0.7, 0.2, 0.1]], 0, 0.7),
    ])
    def test_examples(self, outputs, prediction, confidence):
        result = max_softmax(np.array(outputs))
        assert result.predictions.tolist() == [prediction]
        assert result.scores[0] == pytest.approx(confidence, abs=1e-15)
        assert result.score_kind == ScoreKind.CONFIDENCE

    def test_rejects_row_not_summing_to_one(self):
        with pytest.raises(ValidationError, match="row 1"):
            max_softmax(np.array([[0.5, 0.5], [0.6, 0.6]]))

    def test_rejects_negative_entries(self):
        with pytest.raises(ValidationError, match="row 0"):
            max_softmax(np.array([[-0.5, 1.5]]))

    def test_rejects_wrong_rank(self):
        with pytest.raises(UnsupportedShapeError):
            max_softmax(np.array([0.5, 0.5]))


class TestPredictionConfidenceScore:

    @pytest.mark.parametrize("outputs, prediction, confidence", [
        ([[0.5, 0.5]], 0, 0.0),
        ([[1.0, 0.0]], 0, 1.0),
        ([[0.7, 0.2, 0.1]], 0, 0.5),
    ])
    def test_examples(self, outputs, prediction, confidence):
        result = prediction_confidence_score(np.array(outputs))
        assert result.predictions.tolist() == [prediction]
        assert result.scores[0] == pytest.approx(confidence, abs=1e-15)
        assert result.is_confidence

    def test_single_class_is_unsupported(self):
        with pytest.raises(UnsupportedShapeError):
            prediction_confidence_score(np.array([[1.0]]))


# -----------------------------------------------------------------------
# Sampling-based quantifiers
# -----------------------------------------------------------------------

class TestVariationRatio:

    def test_unanimous_samples(self):
        samples = np.array([[one_hot(2, 3)] * 4])
        result = variation_ratio(samples)
        assert result.predictions.tolist() == [2]
        assert result.scores[0] == 0.0
        assert result.score_kind == ScoreKind.UNCERTAINTY

    def test_vote_counting(self):
        samples = np.array([[one_hot(0, 2), one_hot(0, 2), one_hot(0, 2), one_hot(1, 2)]])
        result = variation_ratio(samples)
        assert result.predictions.tolist() == [0]
        assert result.scores[0] == 0.25

    def test_mode_tie_goes_to_lowest_class(self):
        samples = np.array([[one_hot(1, 2), one_hot(0, 2)]])
        result = variation_ratio(samples)
        assert result.predictions.tolist() == [0]
        assert result.scores[0] == 0.5

    def test_needs_two_samples(self):
        with pytest.raises(InsufficientSamplesError):
            variation_ratio(np.array([[[0.3, 0.7]]]))


class TestPredictiveEntropy:

    def test_point_mass_has_zero_entropy(self):
        result = predictive_entropy(np.array([[one_hot(0, 3)] * 3]))
        assert result.predictions.tolist() == [0]
        assert result.scores[0] == 0.0

    def test_uniform_mean_is_ln_c(self):
        samples = np.array([[one_hot(c, 4) for c in range(4)]])
        result = predictive_entropy(samples)
        assert abs(result.scores[0] - math.log(4)) <= 1e-12

    def test_hand_computed_mean(self):
        result = predictive_entropy(np.array([[[0.8, 0.2], [0.6, 0.4]]]))
        assert result.predictions.tolist() == [0]
        assert result.scores[0] == pytest.approx(-(0.7 * math.log(0.7) + 0.3 * math.log(0.3)), abs=1e-12)
        assert result.scores[0] == pytest.approx(0.6109, abs=1e-4)


class TestMutualInformation:

    def test_identical_samples(self):
        result = mutual_information(np.array([[[0.2, 0.3, 0.5]] * 5]))
        assert result.scores[0] == 0.0

    def test_opposite_one_hots(self):
        result = mutual_information(np.array([[one_hot(0, 2), one_hot(1, 2)]]))
        assert abs(result.scores[0] - math.log(2)) <= 1e-12

    def test_two_term_evaluation(self):
        result = mutual_information(np.array([[[0.8, 0.2], [0.6, 0.4]]]))
        assert result.scores[0] == pytest.approx(0.0242, abs=1e-4)
        assert result.predictions.tolist() == [0]

    def test_never_negative(self):
        rng = np.random.default_rng(5)
        samples = rng.dirichlet(np.ones(3), size=(50, 6))
        assert np.all(mutual_information(samples).scores >= 0.0)


class TestMeanSoftmax:

    def test_single_sample_equals_max_softmax(self):
        outputs = np.array([[0.1, 0.6, 0.3], [0.5, 0.25, 0.25]])
        ensembled = mean_softmax(outputs[:, None, :])
        single = max_softmax(outputs)
        np.testing.assert_array_equal(ensembled.predictions, single.predictions)
        np.testing.assert_array_equal(ensembled.scores, single.scores)

    def test_symmetric_tie(self):
        result = mean_softmax(np.array([[one_hot(0, 2), one_hot(1, 2)]]))
        assert result.predictions.tolist() == [0]
        assert result.scores[0] == 0.5

    def test_hand_computed_mean(self):
        result = mean_softmax(np.array([[[0.8, 0.2], [0.6, 0.4]]]))
        assert result.predictions.tolist() == [0]
        assert result.scores[0] == pytest.approx(0.7, abs=1e-15)

    def test_identical_samples_are_exact(self):
        row = [0.1, 0.2, 0.7]
        result = mean_softmax(np.array([[row] * 7]))
        assert result.scores[0] == max_softmax(np.array([row])).scores[0]


class TestStandardDeviation:

    def test_constant_samples(self):
        result = standard_deviation(np.array([[[1.5, -2.0]] * 4]))
        np.testing.assert_array_equal(result.predictions, [[1.5, -2.0]])
        assert result.scores[0] == 0.0

    def test_population_std(self):
        result = standard_deviation(np.array([[[1.0], [3.0]]]))
        np.testing.assert_array_equal(result.predictions, [[2.0]])
        assert result.scores[0] == 1.0

    def test_mean_over_dimensions(self):
        result = standard_deviation(np.array([[[0.0, 0.0], [2.0, 0.0]]]))
        np.testing.assert_array_equal(result.predictions, [[1.0, 0.0]])
        assert result.scores[0] == 0.5

    def test_needs_two_samples(self):
        with pytest.raises(InsufficientSamplesError):
            standard_deviation(np.array([[[1.0]]]))


class TestConvertScore:

    def test_uncertainty_to_confidence_negates(self):
        result = QuantifiedResult(np.array([0]), np.array([0.25]), ScoreKind.UNCERTAINTY)
        converted = convert_score(result, as_confidence=True)
        assert converted.score_kind == ScoreKind.CONFIDENCE
        assert converted.scores.tolist() == [-0.25]

    def test_matching_kind_is_unchanged(self):
        result = QuantifiedResult(np.array([1]), np.array([0.9]), ScoreKind.CONFIDENCE)
        assert convert_score(result, as_confidence=True) is result

    def test_unset_passes_through(self):
        result = QuantifiedResult(np.array([1]), np.array([0.3]), ScoreKind.UNCERTAINTY)
        assert convert_score(result) is result

    def test_double_conversion_is_identity(self):
        result = QuantifiedResult(np.array([0, 1]), np.array([0.1, 0.7]), ScoreKind.UNCERTAINTY)
        back = convert_score(convert_score(result, True), False)
        assert back.score_kind == ScoreKind.UNCERTAINTY
        np.testing.assert_array_equal(back.scores, result.scores)

    def test_result_unpacks_as_pair(self):
        predictions, scores = max_softmax(np.array([[0.2, 0.8]]))
        assert predictions.tolist() == [1]
        assert scores.tolist() == [0.8]

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValidationError):
            QuantifiedResult(np.array([0, 1]), np.array([0.5]), ScoreKind.CONFIDENCE)


# -----------------------------------------------------------------------
# Registry
# -----------------------------------------------------------------------

class TestRegistry:

    def test_seven_builtins_two_point_predictors(self):
        assert len(BUILTIN_REGISTRY) == 7
        assert sum(not d.is_sampling_based for d in BUILTIN_QUANTIFIERS) == 2
        assert sum(d.is_sampling_based for d in BUILTIN_QUANTIFIERS) == 5

    def test_alias_table(self):
        table = {d.canonical_name: set(d.aliases) for d in BUILTIN_QUANTIFIERS}
        assert table == {
            "max_softmax": {"max_softmax", "softmax", "sm"},
            "prediction_confidence_score": {"pcs"},
            "variation_ratio": {"var_ratio", "variation_ratio", "vr"},
            "predictive_entropy": {"pred_entropy", "predictive_entropy", "pe"},
            "mutual_information": {"mutu_info", "mutual_information", "mi"},
            "mean_softmax": {"mean_softmax", "ensembling", "ms"},
            "standard_deviation": {"std", "stddev", "standard_deviation"},
        }

    def test_aliases_are_disjoint(self):
        all_aliases = [a for d in BUILTIN_QUANTIFIERS for a in d.aliases]
        assert len(all_aliases) == len(set(all_aliases))

    @pytest.mark.parametrize("alias, name", [
        ("var_ratio", "variation_ratio"),
        ("ensembling", "mean_softmax"),
        ("PCS", "prediction_confidence_score"),
        ("Pred_Entropy", "predictive_entropy"),
    ])
    def test_lookup(self, alias, name):
        assert lookup_quantifier(alias).canonical_name == name

    def test_unknown_alias_lists_known_aliases(self):
        with pytest.raises(UnknownQuantifierError) as info:
            lookup_quantifier("no_such")
        message = str(info.value)
        assert "no_such" in message
        for alias in ("pcs", "var_ratio", "ensembling", "stddev"):
            assert alias in message

    def test_custom_quantifier(self):
        def least_likely(outputs):
            values = np.asarray(outputs)
            return QuantifiedResult(values.argmin(axis=1), values.min(axis=1), ScoreKind.CONFIDENCE)

        custom = QuantifierDescriptor("least_likely", frozenset({"ll"}), False, ScoreKind.CONFIDENCE,
                                      ProblemType.CLASSIFICATION, least_likely)
        registry = BUILTIN_REGISTRY.with_quantifier(custom)
        assert registry.lookup("LL") is custom
        assert len(BUILTIN_REGISTRY) == 7
        with pytest.raises(UnknownQuantifierError):
            lookup_quantifier("ll")

    def test_custom_alias_must_be_new(self):
        clash = QuantifierDescriptor("other", frozenset({"pcs"}), False, ScoreKind.CONFIDENCE,
                                     ProblemType.CLASSIFICATION, max_softmax)
        with pytest.raises(ValidationError, match="pcs"):
            BUILTIN_REGISTRY.with_quantifier(clash)

    def test_resolve_keeps_order_and_arity(self):
        descriptors, single = resolve_quantifiers(["pcs", "var_ratio"])
        assert [d.canonical_name for d in descriptors] == ["prediction_confidence_score", "variation_ratio"]
        assert not single
        _, single = resolve_quantifiers("pcs")
        assert single


# -----------------------------------------------------------------------
# Brute-force oracle equivalence
# -----------------------------------------------------------------------

SAMPLED = [
    (variation_ratio, brute_variation_ratio),
    (predictive_entropy, brute_predictive_entropy),
    (mutual_information, brute_mutual_information),
    (mean_softmax, brute_mean_softmax),
]


def _grid_rows(num_classes, steps=4):
    """Every probability row whose entries are multiples of 1/steps."""
    def compositions(total, parts):
        if parts == 1:
            yield (total,)
            return
        for first in range(total + 1):
            for rest in compositions(total - first, parts - 1):
                yield (first,) + rest
    return np.array(list(compositions(steps, num_classes)), dtype=np.float64) / steps


class TestOracleEquivalence:

    def test_random_instances(self):
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            n, s, c = rng.integers(1, 6), rng.integers(2, 9), rng.integers(2, 5)
            samples = rng.dirichlet(np.ones(c), size=(n, s))
            for quantifier, brute in SAMPLED:
                result = quantifier(samples)
                predictions, scores = brute(samples.tolist())
                assert result.predictions.tolist() == predictions
                np.testing.assert_allclose(result.scores, scores, rtol=0, atol=1e-12)

            regression = rng.normal(size=(n, s, c))
            result = standard_deviation(regression)
            predictions, scores = brute_standard_deviation(regression.tolist())
            np.testing.assert_allclose(result.predictions, predictions, rtol=0, atol=1e-12)
            np.testing.assert_allclose(result.scores, scores, rtol=0, atol=1e-12)

            single = samples[:, 0, :]
            for quantifier, brute in ((max_softmax, brute_max_softmax), (prediction_confidence_score, brute_pcs)):
                result = quantifier(single)
                predictions, scores = brute(single.tolist())
                assert result.predictions.tolist() == predictions
                np.testing.assert_allclose(result.scores, scores, rtol=0, atol=1e-12)

    def test_rational_grid_ties(self):
        rng = np.random.default_rng(11)
        for c in (2, 3):
            rows = _grid_rows(c)
            for _ in range(400):
                n, s = rng.integers(1, 4), rng.integers(2, 5)
                samples = rows[rng.integers(0, len(rows), size=(n, s))]
                for quantifier, brute in SAMPLED:
                    result = quantifier(samples)
                    predictions, scores = brute(samples.tolist())
                    assert result.predictions.tolist() == predictions
                    np.testing.assert_allclose(result.scores, scores, rtol=0, atol=1e-12)
                single = samples[:, 0, :]
                for quantifier, brute in ((max_softmax, brute_max_softmax), (prediction_confidence_score, brute_pcs)):
                    result = quantifier(single)
                    predictions, scores = brute(single.tolist())
                    assert result.predictions.tolist() == predictions
                    np.testing.assert_allclose(result.scores, scores, rtol=0, atol=1e-12)


class TestProperties:

    @pytest.fixture
    def samples(self):
        return np.random.default_rng(3).dirichlet(np.full(4, 0.5), size=(40, 6))

    def test_predictions_ignore_sample_order(self, samples):
        shuffled = samples[:, np.random.default_rng(4).permutation(samples.shape[1]), :]
        for quantifier, _ in SAMPLED:
            np.testing.assert_array_equal(quantifier(samples).predictions, quantifier(shuffled).predictions)

    def test_bounds(self, samples):
        s, c = samples.shape[1], samples.shape[2]
        vr = variation_ratio(samples).scores
        pe = predictive_entropy(samples).scores
        mi = mutual_information(samples).scores
        assert np.all((vr >= 0) & (vr <= 1 - 1 / s))
        assert np.all((pe >= 0) & (pe <= math.log(c) + 1e-12))
        assert np.all(mi <= pe + 1e-9)
        for quantifier in (mean_softmax,):
            scores = quantifier(samples).scores
            assert np.all((scores >= 0) & (scores <= 1))
