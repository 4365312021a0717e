import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fseb import nn
from fseb.errors import DimensionError, UsageError
from fseb.metrics import (
    PredictiveBatch, accuracy, auroc, auroc_bruteforce, ece, ece_bins, entropy, evaluate, nll, ood_scores, predictive,
    roc_curve,
)
from fseb.data import Dataset


def _pb(probs, samples=None):
    probs = np.asarray(probs, dtype=np.float64)
    return PredictiveBatch(probs, None if samples is None else np.asarray(samples, dtype=np.float64))


def _random_probs(rng, S, n, K):
    z = rng.normal(scale=2.0, size=(S, n, K))
    p = np.exp(z - z.max(axis=-1, keepdims=True))
    return p / p.sum(axis=-1, keepdims=True)


class TestHandCases:
    def test_accuracy_three_of_four(self):
        pb = _pb([[0.9, 0.1], [0.2, 0.8], [0.6, 0.4], [0.3, 0.7]])
        assert accuracy(pb, [0, 1, 0, 0]) == 0.75

    def test_accuracy_tie_takes_lowest_index(self):
        pb = _pb([[0.5, 0.5]])
        assert accuracy(pb, [0]) == 1.0
        assert accuracy(pb, [1]) == 0.0

    def test_nll_uniform_ten_classes(self):
        pb = _pb(np.full((7, 10), 0.1))
        assert abs(nll(pb, np.arange(7)) - np.log(10.0)) <= 1e-12

    def test_nll_clamps_zero_probability(self):
        pb = _pb([[1.0, 0.0]])
        assert nll(pb, [1]) == pytest.approx(-np.log(1e-12))

    def test_ece_single_bin(self):
        pb = _pb([[0.8, 0.2], [0.8, 0.2]])
        assert abs(ece(pb, [0, 1]) - 0.3) <= 1e-12

    def test_ece_boundary_goes_up(self):
        # confidence exactly 0.6 = 9/15 sits in bin 9, not 8
        count, _, _ = ece_bins(_pb([[0.6, 0.4]]), [0], bins=15)
        assert count[9] == 1 and count.sum() == 1
        count, _, _ = ece_bins(_pb([[1.0, 0.0]]), [0], bins=15)
        assert count[14] == 1

    def test_perfect_confident_predictions_have_zero_ece(self):
        pb = _pb(np.eye(4))
        assert ece(pb, np.arange(4)) == 0.0

    def test_entropy_uniform(self):
        assert entropy(np.full(10, 0.1)) == pytest.approx(np.log(10.0), abs=1e-12)
        assert entropy(np.array([1.0, 0.0])) == 0.0

    def test_auroc_hand_case(self):
        assert auroc([0.1, 0.6], [0.4, 0.7]) == 0.75
        assert auroc_bruteforce([0.1, 0.6], [0.4, 0.7]) == 0.75

    def test_auroc_ties_count_half(self):
        assert auroc([0.5], [0.5]) == 0.5
        assert auroc([0.0, 1.0], [1.0]) == 0.75

    def test_ood_score_orientation(self):
        # confident rows score low on both, flat rows score high
        pb = _pb([[0.98, 0.01, 0.01], [1 / 3, 1 / 3, 1 / 3]])
        for m in ("msp", "entropy"):
            s = ood_scores(pb, m)
            assert s[0] < s[1]


def test_auroc_matches_pairwise_oracle():
    rng = np.random.default_rng(5)
    for i in range(50):
        n_in, n_ood = int(rng.integers(1, 201)), int(rng.integers(1, 201))
        if i % 2:  # heavy ties
            a, b = rng.integers(0, 5, n_in) / 4, rng.integers(0, 5, n_ood) / 4
        else:
            a, b = rng.normal(size=n_in), rng.normal(0.5, 1.0, size=n_ood)
        assert auroc(a, b) == auroc_bruteforce(a, b)


def test_binary_msp_and_entropy_auroc_agree():
    rng = np.random.default_rng(6)
    for _ in range(20):
        pin = _pb(_random_probs(rng, 1, int(rng.integers(2, 100)), 2)[0])
        pood = _pb(_random_probs(rng, 1, int(rng.integers(2, 100)), 2)[0] * 0.2 + 0.4)
        a = auroc(ood_scores(pin, "msp"), ood_scores(pood, "msp"))
        b = auroc(ood_scores(pin, "entropy"), ood_scores(pood, "entropy"))
        assert a == b


@given(st.integers(1, 8), st.integers(1, 30), st.integers(2, 6), st.integers(0, 2 ** 31 - 1))
def test_entropy_of_mean_bounds_expected_entropy(S, n, K, seed):
    samples = _random_probs(np.random.default_rng(seed), S, n, K)
    pb = _pb(samples.mean(axis=0), samples)
    assert np.all(ood_scores(pb, "entropy") >= ood_scores(pb, "expected_entropy") - 1e-9)


@given(st.integers(1, 40), st.integers(2, 8), st.integers(0, 2 ** 31 - 1))
def test_metric_ranges(n, K, seed):
    rng = np.random.default_rng(seed)
    pb = _pb(_random_probs(rng, 1, n, K)[0])
    y = rng.integers(0, K, n)
    assert 0.0 <= accuracy(pb, y) <= 1.0
    assert 0.0 <= ece(pb, y) <= 1.0
    assert nll(pb, y) >= 0.0
    e = entropy(pb.mean_probs)
    assert np.all((e >= -1e-12) & (e <= np.log(K) + 1e-12))


@given(arrays(np.float64, st.integers(1, 30), elements=st.floats(-5, 5)),
       arrays(np.float64, st.integers(1, 30), elements=st.floats(-5, 5)))
def test_auroc_complement_symmetry(a, b):
    assert auroc(a, b) + auroc(b, a) == pytest.approx(1.0, abs=1e-12)


@given(st.permutations(list(range(6))))
def test_entropy_ignores_class_order(perm):
    p = np.array([0.05, 0.1, 0.15, 0.2, 0.22, 0.28])
    assert entropy(p[perm]) == entropy(p)


def test_roc_curve_endpoints():
    fpr, tpr = roc_curve(np.array([0.1, 0.2, 0.3]), np.array([0.25, 0.9]))
    assert (fpr[0], tpr[0]) == (0.0, 0.0)
    assert (fpr[-1], tpr[-1]) == (1.0, 1.0)
    assert np.all(np.diff(fpr) >= 0) and np.all(np.diff(tpr) >= 0)
    assert np.trapezoid(tpr, fpr) == pytest.approx(auroc([0.1, 0.2, 0.3], [0.25, 0.9]))


def test_errors():
    pb = _pb([[0.5, 0.5]])
    with pytest.raises(DimensionError):
        accuracy(pb, [0, 1])
    with pytest.raises(UsageError):
        ood_scores(pb, "energy")
    with pytest.raises(UsageError):
        ood_scores(pb, "expected_entropy")
    with pytest.raises(UsageError):
        auroc([], [0.1])


def test_empty_batch_ece_warns():
    pb = _pb(np.zeros((0, 3)))
    with pytest.warns(UserWarning):
        assert ece(pb, np.zeros(0, dtype=int)) == 0.0


def test_predictive_and_evaluate_on_small_network():
    net = nn.build_network("desk_mlp", 3, seed=0, input_shape=(1, 4, 4), hidden=16)
    x = np.random.default_rng(0).random((10, 1, 4, 4))
    pb = predictive(net, x, 5, np.random.default_rng(1))
    assert pb.mean_probs.shape == (10, 3) and pb.sample_probs.shape == (5, 10, 3)
    np.testing.assert_allclose(pb.mean_probs.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(pb.sample_probs.mean(axis=0), pb.mean_probs, atol=1e-15)
    # dropout is active: the passes differ
    assert not np.allclose(pb.sample_probs[0], pb.sample_probs[1])

    ds = Dataset(x, np.arange(10) % 3, 3, "toy")
    noise = Dataset(np.random.default_rng(2).random((8, 1, 4, 4)), np.zeros(8, dtype=np.int64), 3, "noise")
    report, _, obs = evaluate(net, ds, 4, np.random.default_rng(3), seed=7, ood_sets=[noise])
    assert report.n == 10 and report.seed == 7 and report.n_classes == 3
    assert set(report.auroc["noise"]) == {"msp", "entropy", "expected_entropy"}
    assert set(obs) == {"noise"}
