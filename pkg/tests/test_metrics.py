import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lakeplankton.confidence import ConfidenceMatrix
from lakeplankton.metrics import (
    EmptyEvaluation, MisalignedIds, UnknownLabel, confusion_matrix, evaluate, top_k_hits,
)


def _cm(probs, labels, classes=None):
    probs = np.asarray(probs, float)
    classes = classes or tuple("ABCDEFGHIJ"[: probs.shape[1]])
    return ConfidenceMatrix(tuple(f"s{i}" for i in range(len(probs))), classes, probs, tuple(labels))


def brute_force_report(pred, true, n_c):
    """Plain-Python confusion counts and derived metrics."""
    counts = [[0] * n_c for _ in range(n_c)]
    for p, t in zip(pred, true):
        counts[t][p] += 1
    f1s, recalls = [], []
    for c in range(n_c):
        tp = counts[c][c]
        fn = sum(counts[c]) - tp
        fp = sum(counts[r][c] for r in range(n_c)) - tp
        if tp + fn == 0:
            continue
        r = tp / (tp + fn)
        p = tp / (tp + fp) if tp + fp else 0.0
        f1s.append(2 * r * p / (r + p) if r + p else 0.0)
        recalls.append(r)
    acc = sum(counts[i][i] for i in range(n_c)) / len(true)
    return counts, acc, sum(f1s) / len(f1s), sum(recalls) / len(recalls)


def test_hand_example():
    rep = evaluate(_cm([[1, 0], [0, 1], [0, 1]], "AAB"))
    assert [c.f1 for c in rep.per_class] == pytest.approx([2 / 3, 2 / 3])
    assert rep.macro_f1 == pytest.approx(2 / 3)
    assert rep.accuracy == pytest.approx(2 / 3)
    assert rep.confusion.tolist() == [[1, 1], [0, 1]]


def test_perfect_predictions():
    rep = evaluate(_cm(np.eye(3)[[0, 1, 2, 2]], "ABCC"))
    assert rep.accuracy == 1 and rep.macro_f1 == 1
    assert np.array_equal(rep.confusion, np.diag([1, 1, 2]))


def test_top_k_definition_and_ties():
    rep = evaluate(_cm([[0.5, 0.3, 0.2]], "B"), k_list=(1, 2))
    assert rep.top_k[1][0] == 0 and rep.top_k[2][0] == 1
    # three-way tie: lowest indices win the top slots
    probs = np.full((1, 3), 1 / 3)
    assert top_k_hits(probs, np.array([1]), 2)[0]
    assert not top_k_hits(probs, np.array([2]), 2)[0]
    assert evaluate(_cm(probs, "A")).accuracy == 1.0


def test_argmax_tie_goes_to_lowest_index():
    rep = evaluate(_cm([[0.4, 0.4, 0.2]], "B"))
    assert rep.confusion[1, 0] == 1


def test_zero_support_class_dropped_from_macro():
    rep = evaluate(_cm([[1, 0, 0], [0, 1, 0]], "AB"))
    assert rep.macro_f1 == 1.0
    assert rep.per_class[2].support == 0


def test_supported_class_never_predicted_has_f1_zero():
    rep = evaluate(_cm([[1, 0], [1, 0]], "AB"))
    assert rep.per_class[1].f1 == 0.0
    assert rep.macro_f1 == pytest.approx((2 / 3 + 0) / 2)


def test_confusion_examples():
    assert confusion_matrix([2], [0], 3).tolist() == [[0, 0, 1], [0, 0, 0], [0, 0, 0]]
    with pytest.raises(UnknownLabel):
        confusion_matrix([3], [0], 3)
    with pytest.raises(MisalignedIds):
        confusion_matrix([0, 1], [0], 3)


def test_errors():
    with pytest.raises(UnknownLabel):
        evaluate(_cm([[1, 0]], "A"), labels=["Z"])
    with pytest.raises(MisalignedIds):
        evaluate(_cm([[1, 0]], "A"), labels=["A", "B"])
    with pytest.raises(EmptyEvaluation):
        evaluate(_cm([[1, 0]], "A"), exclude=["A"])
    with pytest.raises(ValueError):
        evaluate(_cm([[1, 0]], "A"), k_list=(3,))


def _random_case(seed, n=200, n_c=6):
    rng = np.random.default_rng(seed)
    probs = rng.dirichlet(np.ones(n_c) * 0.5, n)
    true = rng.integers(0, n_c, n)
    return probs, true


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_matches_brute_force(seed):
    probs, true = _random_case(seed)
    rep = evaluate(_cm(probs, [chr(65 + t) for t in true]), k_list=range(1, 7))
    counts, acc, mf1, mrec = brute_force_report(probs.argmax(1).tolist(), true.tolist(), 6)
    assert rep.confusion.tolist() == counts
    assert rep.accuracy == pytest.approx(acc, abs=1e-12)
    assert rep.macro_f1 == pytest.approx(mf1, abs=1e-12)
    assert rep.macro_recall == pytest.approx(mrec, abs=1e-12)
    tops = [rep.top_k[k][0] for k in range(1, 7)]
    assert all(b >= a for a, b in zip(tops, tops[1:])) and tops[-1] == 1.0
    assert rep.top_k[1][0] == rep.accuracy
    # accuracy is the support-weighted mean of per-class recall
    w = sum(c.recall * c.support for c in rep.per_class) / rep.n_samples
    assert rep.accuracy == pytest.approx(w, abs=1e-12)
    assert (rep.confusion.sum(1) == [c.support for c in rep.per_class]).all()
    for c in rep.per_class:
        assert 0 <= c.precision <= 1 and 0 <= c.recall <= 1 and 0 <= c.f1 <= 1


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_macro_f1_invariant_under_class_relabeling(seed):
    probs, true = _random_case(seed, n=80, n_c=5)
    names = tuple("ABCDE")
    perm = np.random.default_rng(seed + 1).permutation(5)
    inv = np.argsort(perm)
    a = evaluate(_cm(probs, [names[t] for t in true], names))
    new_names = tuple(names[i] for i in perm)
    b = evaluate(_cm(probs[:, perm], [names[t] for t in true], new_names))
    # break argmax ties identically: with continuous dirichlet draws ties do not occur
    assert b.macro_f1 == pytest.approx(a.macro_f1, abs=1e-12)
    assert [b.per_class[inv[i]].f1 for i in range(5)] == pytest.approx([c.f1 for c in a.per_class])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), drop=st.sets(st.sampled_from("ABCDEF"), min_size=1, max_size=3))
def test_exclusion_keeps_retained_recall(seed, drop):
    probs, true = _random_case(seed)
    labels = [chr(65 + t) for t in true]
    full = evaluate(_cm(probs, labels))
    sub = evaluate(_cm(probs, labels), exclude=drop)
    assert sub.exclusions == tuple(sorted(drop))
    for a, b in zip(full.per_class, sub.per_class):
        if a.name in drop:
            assert b.support == 0
        else:
            assert b.recall == a.recall and b.support == a.support


def test_report_serialization(tmp_path):
    rep = evaluate(_cm([[1, 0], [0, 1], [0, 1]], "AAB"), k_list=(1, 2))
    rep.save(tmp_path / "m.json", tmp_path / "m.csv")
    import json
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["top_k"]["2"]["accuracy"] == 1.0
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "class,precision,recall,f1,support"
    assert len(lines) == 3
