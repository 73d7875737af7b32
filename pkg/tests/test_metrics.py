import itertools

import numpy as np
import pytest
from scipy.stats import binomtest

from src.errors import ValidationError
from src.metrics import accuracy, as_uncertainty, misprediction_auroc
from src.nnengine import TrainConfig, architecture_specs, build_sequential, fit, predict_quantified
from src.persist import generate_blobs


def pair_counting_auroc(scores, wrong):
    wins = 0.0
    pairs = 0
    for (score_a, wrong_a), (score_b, wrong_b) in itertools.product(zip(scores, wrong), repeat=2):
        if wrong_a and not wrong_b:
            pairs += 1
            wins += 1.0 if score_a > score_b else 0.5 if score_a == score_b else 0.0
    return wins / pairs


class TestMispredictionAuroc:

    def test_perfect_separation(self):
        scores = [0.9, 0.8, 0.1, 0.2]
        wrong = [True, True, False, False]
        assert misprediction_auroc(scores, wrong) == 1.0

    def test_all_equal_scores(self):
        assert misprediction_auroc([0.3] * 6, [True, False, True, False, False, False]) == 0.5

    def test_undefined_without_both_outcomes(self):
        assert misprediction_auroc([0.1, 0.2], [False, False]) is None
        assert misprediction_auroc([0.1, 0.2], [True, True]) is None

    def test_matches_pair_counting_with_ties(self):
        rng = np.random.default_rng(8)
        for _ in range(50):
            n = int(rng.integers(2, 30))
            scores = rng.integers(0, 5, size=n).astype(float)
            wrong = rng.random(n) < 0.4
            if wrong.all() or not wrong.any():
                continue
            assert misprediction_auroc(scores, wrong) == pytest.approx(pair_counting_auroc(scores, wrong), abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            misprediction_auroc([0.1, 0.2], [True])


class TestAccuracy:

    def test_fraction_correct(self):
        assert accuracy([0, 1, 1, 2], [0, 1, 0, 2]) == 0.75

    def test_empty(self):
        assert accuracy([], []) is None


@pytest.mark.slow
class TestMispredictionDetection:

    def test_quantifiers_flag_wrong_predictions(self):
        quantifiers = ["var_ratio", "pred_entropy", "pcs"]
        aurocs = {q: [] for q in quantifiers}
        for seed in range(10):
            data = generate_blobs(400, 2, 3.5, seed=seed)
            x_train, y_train = data.features[:200], data.labels[:200]
            x_test, y_test = data.features[200:], data.labels[200:]
            model = build_sequential(architecture_specs(2, 2, [16], dropout_rate=0.2), seed=seed)
            fit(model, x_train, y_train, TrainConfig(epochs=50, seed=seed))
            results = predict_quantified(model, x_test, quantifiers, num_samples=32)
            for quantifier, result in zip(quantifiers, results):
                aurocs[quantifier].append(misprediction_auroc(as_uncertainty(result), result.predictions != y_test))

        for quantifier, values in aurocs.items():
            defined = [v for v in values if v is not None]
            assert np.mean(defined) > 0.5, quantifier
            above = sum(v is not None and v > 0.5 for v in values)
            assert binomtest(above, len(values), 0.5, alternative="greater").pvalue < 0.05, quantifier
