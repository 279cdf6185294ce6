import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pedca.baselines import (
    DtwConfig,
    KnnDtwLearner,
    KnnLearner,
    LastFeaturizer,
    LogisticLearner,
    dtw_distance,
    knn_predict,
    knn_scores,
    logistic_predict,
    logistic_regression,
)
from pedca.cohort import EARLY_WARNING_SCORE, GeneratorConfig, Observation, PatientRecord, generate_synthetic_cohort
from pedca.evaluation import auroc
from pedca.numerics import TrainingError

from .micro import SCHEMA, make_records
from .oracles import enumerated_dtw, full_dp_dtw

# -- DTW -------------------------------------------------------------------------------


def random_pair(rng):
    a = rng.integers(-3, 4, size=int(rng.integers(1, 9))) * rng.choice([1.0, 0.5, 0.37])
    b = rng.normal(size=int(rng.integers(1, 9)))
    return a.tolist(), b.tolist()


def test_dtw_matches_full_dp_on_500_pairs():
    rng = np.random.default_rng(99)
    for _ in range(500):
        a, b = random_pair(rng)
        assert dtw_distance(a, b) == full_dp_dtw(a, b)


def test_dtw_matches_path_enumeration_on_short_pairs():
    rng = np.random.default_rng(5)
    for _ in range(100):
        a = rng.normal(size=int(rng.integers(1, 5))).tolist()
        b = rng.normal(size=int(rng.integers(1, 5))).tolist()
        assert dtw_distance(a, b) == pytest.approx(enumerated_dtw(a, b), rel=1e-12)
        r = int(rng.integers(0, 3))
        assert dtw_distance(a, b, r) == pytest.approx(enumerated_dtw(a, b, r), rel=1e-12)


def test_dtw_examples():
    assert dtw_distance([0.0], [3.0]) == 3.0
    assert dtw_distance([1, 2, 3], [1, 2, 2, 3]) == 0.0
    assert dtw_distance([1, 2, 3, 4], [1]) == math.sqrt(1 + 4 + 9)


def test_band_that_cannot_reach_the_corner_is_infinite():
    assert dtw_distance([1, 2, 3, 4], [1], band_radius=1) == math.inf


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-10, 10), min_size=1, max_size=8), st.lists(st.floats(-10, 10), min_size=1, max_size=8))
def test_dtw_symmetric_and_self_zero(a, b):
    assert dtw_distance(a, b) == pytest.approx(dtw_distance(b, a), rel=1e-12, abs=1e-12)
    assert dtw_distance(a, a) == 0.0


def test_banded_never_below_unbanded():
    rng = np.random.default_rng(1)
    for _ in range(100):
        a, b = random_pair(rng)
        assert dtw_distance(a, b, band_radius=int(rng.integers(0, 4))) >= dtw_distance(a, b)


def test_dtw_errors():
    with pytest.raises(ValueError):
        dtw_distance([], [1.0])
    with pytest.raises(ValueError):
        DtwConfig(band_radius=-1)


# -- KNN -----------------------------------------------------------------------------------


def test_knn_examples():
    x = np.array([[0.0], [1.0], [2.0], [10.0]])
    y = np.array([1, 1, 0, 0])
    assert knn_predict(x, y, np.array([0.4]), k=3) == pytest.approx(2 / 3)
    assert knn_predict(x, y, np.array([10.0]), k=1) == 0.0
    assert knn_predict(x, y, np.array([5.0]), k=4) == 0.5


def test_knn_ties_go_to_lower_index():
    assert knn_scores(np.array([[1.0, 1.0, 1.0]]), np.array([0, 1, 1]), 1)[0] == 0.0


def test_knn_k_out_of_range():
    with pytest.raises(ValueError):
        knn_scores(np.zeros((1, 3)), np.zeros(3), 4)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6))
def test_knn_invariant_to_training_order(seed, k):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(12, 3))
    y = rng.integers(0, 2, size=12)
    q = rng.normal(size=3)
    perm = rng.permutation(12)
    assert knn_predict(x, y, q, k) == knn_predict(x[perm], y[perm], q, k)


# -- logistic regression -------------------------------------------------------------------------


def test_zero_epochs_give_one_half():
    w, b = logistic_regression(np.ones((4, 2)), [0, 1, 0, 1], epochs=0)
    assert np.array_equal(w, np.zeros(2)) and b == 0.0
    assert np.all(logistic_predict(np.ones((4, 2)), w, b) == 0.5)


def test_separable_data_fit_perfectly():
    x = np.linspace(-2, 2, 40)[:, None]
    y = (x[:, 0] > 0.1).astype(int)
    w, b = logistic_regression(x, y, l2=0.0, epochs=3000, lr=1.0)
    assert np.all((logistic_predict(x, w, b) >= 0.5) == (y == 1))


def test_stronger_l2_never_grows_weights():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(60, 3))
    y = (x @ [1.0, -2.0, 0.5] + rng.normal(size=60) > 0).astype(int)
    norms = [np.linalg.norm(logistic_regression(x, y, l2=l2, epochs=3000)[0]) for l2 in (0.01, 0.02, 0.04, 0.08)]
    assert all(b <= a + 1e-12 for a, b in zip(norms, norms[1:]))


def test_logistic_is_deterministic_and_rejects_one_class():
    x = np.random.default_rng(0).normal(size=(20, 2))
    y = (x[:, 0] > 0).astype(int)
    a = logistic_regression(x, y, epochs=20, batch_size=4, seed=3)
    b = logistic_regression(x, y, epochs=20, batch_size=4, seed=3)
    assert np.array_equal(a[0], b[0]) and a[1] == b[1]
    with pytest.raises(TrainingError):
        logistic_regression(x, np.zeros(20))


def test_rescaled_feature_keeps_predicted_classes():
    records = make_records(80, seed=2)
    learner = LogisticLearner(epochs=300)
    model = learner.fit(records, SCHEMA)
    scaled = []
    for r in records:
        hr = tuple(Observation(o.time_hours, 3.0 * o.value + 7.0) for o in r.series("Heart Rate"))
        scaled.append(PatientRecord(r.patient_id, r.admission_id, r.static_values,
                                    {**r.temporal_series, "Heart Rate": hr}, r.label))
    other = learner.fit(scaled, SCHEMA)
    a = model.predict_proba(records) >= 0.5
    b = other.predict_proba(scaled) >= 0.5
    assert np.array_equal(a, b)


# -- featurizer and learners --------------------------------------------------------------------


def test_last_features_carry_missingness_indicators():
    records = make_records(8)
    feats = LastFeaturizer(SCHEMA).fit(records).transform(records)
    # 3 numeric values + 3 indicators + one-hot (2+1, 3+1, 2+1)
    assert feats.shape == (8, 3 + 3 + 3 + 4 + 3)
    milrinone_missing = feats[:, -1]
    assert np.array_equal(milrinone_missing, [0.0 if i % 4 == 0 else 1.0 for i in range(8)])


@pytest.fixture(scope="module")
def cohort():
    return generate_synthetic_cohort(GeneratorConfig(n_admissions=160, prevalence=0.2), seed=3)


@pytest.mark.parametrize("learner", [LogisticLearner(epochs=200), KnnLearner(k=5), KnnDtwLearner(k=5)])
def test_learners_beat_chance_on_planted_signal(cohort, learner):
    train, test = cohort.records[:110], cohort.records[110:]
    scores = learner.fit(train, cohort.schema).predict_proba(test)
    assert scores.shape == (len(test),)
    assert auroc(scores, [r.label for r in test]) > 0.6


def test_knn_dtw_record_without_scores_sees_only_global_vote(cohort):
    model = KnnDtwLearner(k=3).fit(cohort.records[:20], cohort.schema)
    r = cohort.records[30]
    empty = PatientRecord(r.patient_id, r.admission_id, r.static_values, r.temporal_series, r.label,
                          {EARLY_WARNING_SCORE: ()})
    labels = np.array([x.label for x in cohort.records[:20]])
    assert model.predict_proba([empty])[0] == labels[:3].mean()


def test_knn_with_k_equal_n_returns_prevalence(cohort):
    train = cohort.records[:50]
    model = KnnLearner(k=50).fit(train, cohort.schema)
    prevalence = np.mean([r.label for r in train])
    assert np.allclose(model.predict_proba(cohort.records[50:60]), prevalence)
