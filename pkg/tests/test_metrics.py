import numpy as np
import pytest

from diffaudio.metrics import accuracy, average_precision, mean_average_precision


def brute_ap(scores, labels):
    items = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    precisions = []
    for pos, i in enumerate(items, start=1):
        if labels[i]:
            above = items[:pos]
            precisions.append(sum(labels[j] for j in above) / pos)
    return sum(precisions) / len(precisions)


def brute_map(scores, labels):
    aps = [brute_ap(list(scores[:, c]), list(labels[:, c])) for c in range(scores.shape[1]) if labels[:, c].any()]
    return sum(aps) / len(aps)


def random_instance(rng):
    n, c = rng.integers(1, 9), rng.integers(1, 4)
    labels = rng.integers(0, 2, size=(n, c))
    labels[rng.integers(0, n), rng.integers(0, c)] = 1
    # coarse scores so ties actually occur
    scores = rng.integers(0, 4, size=(n, c)) / 4.0
    return scores, labels


def test_accuracy_examples():
    assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0
    assert accuracy([0, 0], [1, 1]) == 0.0
    assert accuracy([1, 2, 3, 4], [1, 2, 3, 0]) == 0.75


def test_accuracy_errors():
    with pytest.raises(ValueError):
        accuracy([], [])
    with pytest.raises(ValueError):
        accuracy([1, 2], [1])


def test_perfect_ranking():
    assert average_precision([0.9, 0.8, 0.1, 0.0], [1, 1, 0, 0]) == 1.0
    assert mean_average_precision(np.eye(3), np.eye(3)) == 1.0


def test_hand_enumerated_ap():
    assert average_precision([0.9, 0.8, 0.7], [0, 1, 1]) == pytest.approx(7 / 12, abs=1e-15)


def test_tie_break_is_stable_index_order():
    # tie between index 0 (negative) and index 1 (positive): index 0 ranks first
    assert average_precision([0.5, 0.5], [0, 1]) == 0.5
    assert average_precision([0.5, 0.5], [1, 0]) == 1.0


def test_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(300):
        s, y = random_instance(rng)
        assert mean_average_precision(s, y) == pytest.approx(brute_map(s, y), abs=1e-15)


def test_monotone_transform_invariance():
    rng = np.random.default_rng(1)
    for _ in range(50):
        s, y = random_instance(rng)
        assert mean_average_precision(np.exp(3 * s) - 7, y) == mean_average_precision(s, y)


def test_permutation_invariance_without_ties():
    rng = np.random.default_rng(2)
    s = rng.standard_normal((8, 3))
    y = rng.integers(0, 2, size=(8, 3))
    y[0] = 1
    perm = rng.permutation(8)
    assert mean_average_precision(s[perm], y[perm]) == pytest.approx(mean_average_precision(s, y), abs=1e-12)


def test_ap_bounds():
    rng = np.random.default_rng(3)
    for _ in range(100):
        s, y = random_instance(rng)
        assert 0.0 <= mean_average_precision(s, y) <= 1.0


def test_skipped_classes_reported():
    s = np.array([[0.9, 0.1, 0.3], [0.2, 0.8, 0.4]])
    y = np.array([[1, 0, 0], [0, 1, 0]])
    m, skipped = mean_average_precision(s, y, return_skipped=True)
    assert m == 1.0 and skipped == [2]


def test_no_positives_anywhere():
    with pytest.raises(ValueError):
        mean_average_precision(np.zeros((3, 2)), np.zeros((3, 2)))
    with pytest.raises(ValueError):
        mean_average_precision(np.zeros((3, 2)), np.zeros((2, 2)))
