from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from oracles import tercile_oracle, welch_oracle
from sar.errors import DataError
from sar.evaluation import (
    STUDY_FRACTIONS,
    CaseResult,
    dice_score,
    export_curves,
    fraction_table,
    read_metrics_csv,
    size_stratified_report,
    stratify_by_size,
    two_sample_ttest,
    write_table,
)


def test_dice_fixed_cases():
    a = np.array([1, 1, 0, 0], bool)
    assert dice_score(a, a) == 1.0
    assert dice_score(a, ~a) == 0.0
    assert dice_score(a, np.array([1, 0, 1, 0], bool)) == 0.5
    assert dice_score(np.zeros(4, bool), np.zeros(4, bool)) == 1.0
    with pytest.raises(ValueError):
        dice_score(np.zeros(3), np.zeros(4))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_dice_symmetric_and_bounded(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random(50) > 0.5, rng.random(50) > 0.6
    assert dice_score(a, b) == dice_score(b, a)
    assert 0 <= dice_score(a, b) <= 1


def _results(sizes):
    return [CaseResult(f"c{i:02d}", {1: 0.5}, int(s)) for i, s in enumerate(sizes)]


@settings(max_examples=60, deadline=None)
@given(sizes=st.lists(st.integers(0, 30), min_size=3, max_size=25))
def test_terciles_match_sort_oracle(sizes):
    strat = stratify_by_size(_results(sizes))
    if len(set(sizes)) == 1:
        assert strat.degenerate and set(strat.buckets.values()) == {"M"}
        return
    got = [strat.buckets[f"c{i:02d}"] for i in range(len(sizes))]
    assert got == tercile_oracle(sizes)


def test_terciles_remainder_and_errors():
    strat = stratify_by_size(_results([5, 1, 3, 2, 4]))
    assert [strat.buckets[f"c{i:02d}"] for i in range(5)] == ["L", "S", "M", "S", "M"]
    with pytest.raises(ValueError):
        stratify_by_size(_results([1, 2]))


def test_size_report_means():
    trials = []
    for t in range(2):
        trials.append([CaseResult(f"c{i}", {1: 0.1 * i + t * 0.1}, i) for i in range(6)])
    report = size_stratified_report(trials, 1)
    assert report.n_trials == 2
    assert report.buckets["S"][0] == pytest.approx(0.1)
    assert report.buckets["L"][0] == pytest.approx(0.5)
    assert report.overall[0] == pytest.approx(0.30)
    assert len(report.rows) == 12
    with pytest.raises(DataError):
        size_stratified_report([], 1)


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31), na=st.integers(2, 12), nb=st.integers(2, 12))
def test_welch_matches_oracles(seed, na, nb):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(0, 1, na), rng.normal(0.5, 2, nb)
    t, p = two_sample_ttest(a, b)
    t_ref, dof = welch_oracle(a.tolist(), b.tolist())
    assert abs(t - t_ref) < 1e-6
    ref = stats.ttest_ind(a, b, equal_var=False)
    assert abs(t - ref.statistic) < 1e-6
    assert p == pytest.approx(ref.pvalue, abs=1e-9)
    assert p == pytest.approx(2 * stats.t.sf(abs(t_ref), dof), abs=1e-9)


def test_welch_edge_cases():
    assert two_sample_ttest([1.0, 1.0], [1.0, 1.0]) == (0.0, 1.0)
    t, p = two_sample_ttest([1.0, 1.0], [2.0, 2.0])
    assert t < -1e100 and p == 0.0
    with pytest.raises(ValueError):
        two_sample_ttest([1.0], [1.0, 2.0])


def test_fraction_header_verbatim():
    assert STUDY_FRACTIONS == tuple(Fraction(1, d) for d in (2, 5, 10, 20, 50))
    header = [f"{f.numerator}/{f.denominator}" for f in STUDY_FRACTIONS]
    rows = [{"fraction": h, "init": name, "dice_mean": 0.5} for name in ("scratch", "sar") for h in header]
    table = fraction_table(rows, header)
    assert table[0] == ["init", "1/2", "1/5", "1/10", "1/20", "1/50"]
    assert table[1] == ["scratch", *["50.00"] * 5]
    assert [r[0] for r in table[1:]] == ["scratch", "sar"]


def test_write_table_and_sidecar(tmp_path):
    path = write_table([{"a": 1, "b": 2.5}, {"a": 3, "b": 4.0}], tmp_path / "t.csv", {"cfg": "abc"})
    assert path.read_text().splitlines() == ["a,b", "1,2.5", "3,4.0"]
    assert '"cfg": "abc"' in (tmp_path / "t.csv.json").read_text()


def test_export_curves(tmp_path):
    for name in ("scratch", "sar"):
        d = tmp_path / name
        d.mkdir()
        (d / "m.csv").write_text("epoch,split,dice_loss\n1,train,0.9\n2,train,0.5\n1,val,0.8\n")
    fig, merged = export_curves([tmp_path / "scratch/m.csv", tmp_path / "sar/m.csv"], tmp_path / "out/curves.png")
    assert fig.stat().st_size > 0
    lines = merged.read_text().splitlines()
    assert lines[0] == "series,epoch,split,dice_loss"
    assert len(lines) == 7


def test_malformed_metrics_csv(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("foo,bar\n1,2\n")
    with pytest.raises(DataError, match="malformed"):
        read_metrics_csv(bad)
    (tmp_path / "empty.csv").write_text("")
    with pytest.raises(DataError):
        read_metrics_csv(tmp_path / "empty.csv")
    ok = tmp_path / "ok.csv"
    ok.write_text("epoch,split,dice_score\n1,train,0.5\n")
    with pytest.raises(DataError, match="dice_loss"):
        export_curves([ok], tmp_path / "c.png")
