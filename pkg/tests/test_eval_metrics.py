import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bodycorr import correspond as C
from bodycorr import eval_metrics as E


def matches(src, tgt):
    return C.CorrespondenceSet(np.asarray(src), np.asarray(tgt), np.zeros(len(src)))


def test_perfect_matching():
    pos = np.random.default_rng(0).normal(size=(20, 3))
    err = E.match_errors(matches(np.arange(20), np.arange(20)), np.arange(20), pos)
    assert (err == 0).all()
    assert E.summarize([err]).ae == 0


def test_constant_five_cm():
    pos = np.array([[0.0, 0, 0], [0.05, 0, 0], [0.2, 0, 0], [0.25, 0, 0]])
    err = E.match_errors(matches([0, 2], [1, 3]), np.array([0, 1, 2, 3]), pos)
    assert E.summarize([err]).ae == pytest.approx(5.0, abs=1e-12)


def test_random_matching_recomputed():
    rng = np.random.default_rng(1)
    pos = rng.normal(size=(300, 3))
    src, tgt = rng.permutation(300)[:200], rng.integers(0, 300, 200)
    gt = rng.permutation(300)
    err = E.match_errors(matches(src, tgt), gt, pos)
    brute = [100 * np.sqrt(sum((pos[t][k] - pos[gt[s]][k]) ** 2 for k in range(3))) for s, t in zip(src, tgt)]
    assert abs(err.mean() - np.mean(brute)) < 1e-9


def test_geodesic_mode():
    err = E.match_errors(matches([0, 1], [1, 1]), np.array([0, 1]), geodesic=lambda i, j: np.abs(i - j) * 0.3)
    np.testing.assert_allclose(err, [30.0, 0.0])


def test_missing_ground_truth():
    with pytest.raises(KeyError):
        E.match_errors(matches([0, 1], [0, 0]), {0: 0}, np.zeros((2, 3)))
    with pytest.raises(KeyError):
        E.match_errors(matches([0, 1], [0, 0]), np.array([0, -1]), np.zeros((2, 3)))


def test_summarize_examples():
    rep = E.summarize([[0.0, 10.0]], radii=(10.0,))
    assert rep.ae == 5.0 and rep.recall(10.0) == 1.0
    assert E.summarize([[2.0, 2.0], [9.0]]).worst_ae == 9.0


def test_empty():
    with pytest.raises(ValueError):
        E.summarize([])
    with pytest.raises(ValueError):
        E.summarize([[1.0], []])


def test_curve_matches_sort_oracle():
    err = np.random.default_rng(2).exponential(5.0, 1000)
    radii, frac = E.cumulative_curve(err)
    s = np.sort(err)
    for r, f in zip(radii, frac):
        rank = 0
        while rank < len(s) and s[rank] <= r:
            rank += 1
        assert f == rank / len(s)
    assert np.all(np.diff(radii) == 1.0) and frac[-1] == 1.0


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(0, 100, allow_nan=False), min_size=1, max_size=200))
def test_recall_properties(errs):
    errs = np.array(errs)
    vals = [E.recall(errs, r) for r in (0, 1, 5, 10, 50, np.inf)]
    assert vals == sorted(vals) and vals[-1] == 1.0
    assert vals[0] == np.mean(errs == 0)
    _, frac = E.cumulative_curve(errs)
    assert np.all(np.diff(frac) >= 0) and frac[-1] == 1.0


def test_ae_order_invariant():
    err = np.random.default_rng(3).random(100)
    assert E.summarize([err]).ae == pytest.approx(E.summarize([err[::-1]]).ae, rel=1e-15)


def test_report_files(tmp_path):
    rep = E.summarize([[0.0, 3.0], [9.0, 9.0]], names=["a", "b"])
    E.write_errors_csv(tmp_path / "e.csv", rep)
    E.write_curve_csv(tmp_path / "c.csv", rep)
    assert (tmp_path / "e.csv").read_text().splitlines()[1] == "a,0,0.000000"
    lines = (tmp_path / "c.csv").read_text().splitlines()
    assert lines[0] == "radius_cm,fraction" and lines[-1] == "9.0,1.000000"
    text = E.summary_text(rep)
    assert "worst AE = 9.00" in text and "recall@10cm" in text


def test_reference_values():
    assert E.REFERENCE["CNN-S intra"]["AE"] == 2.00
    assert E.REFERENCE["CNN intra"]["10cm-recall"] == 0.918
