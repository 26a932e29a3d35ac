import numpy as np
import pytest
from hypothesis import given, strategies as st

from selfcensor.patterns import (DimensionError, PatternSet, as_pattern,
                                 complete_pattern, enumerate_patterns,
                                 int_to_pattern, pattern_leq, pattern_to_int,
                                 validate_positivity)

patterns_st = st.lists(st.integers(0, 1), min_size=1, max_size=8).map(tuple)


def test_as_pattern_rejects_bad_entries():
    with pytest.raises(ValueError):
        as_pattern((0, 2))
    with pytest.raises(DimensionError):
        as_pattern(())
    with pytest.raises(DimensionError):
        as_pattern((1,) * 17)


@given(patterns_st)
def test_int_round_trip(r):
    assert int_to_pattern(pattern_to_int(r), len(r)) == r


@given(patterns_st)
def test_partial_order_reflexive_and_top(r):
    assert pattern_leq(r, r)
    assert pattern_leq(r, complete_pattern(len(r)))


@given(patterns_st, patterns_st)
def test_partial_order_antisymmetry(a, b):
    if len(a) == len(b) and pattern_leq(a, b) and pattern_leq(b, a):
        assert a == b


def test_pattern_leq_dimension_mismatch():
    with pytest.raises(DimensionError):
        pattern_leq((1, 0), (1, 0, 1))


def test_enumerate_patterns_counts():
    r = np.array([[1, 1], [1, 0], [1, 1], [0, 1]])
    ps = enumerate_patterns(r)
    assert ps.counts == {(1, 1): 2, (1, 0): 1, (0, 1): 1}
    assert ps.n == 4
    assert (1, 1) in ps and (0, 0) not in ps


def test_full_lattice_size():
    ps = PatternSet.full_lattice(3)
    assert len(ps.patterns) == 8
    assert ps.patterns[0] == (1, 1, 1)


def test_validate_positivity_complete_lattice_valid():
    ps = PatternSet.from_patterns([(1, 1), (1, 0), (0, 1), (0, 0)])
    report = validate_positivity(ps)
    assert report.valid
    # unit counts trip the low-count warning only
    assert set(report.low_count) == set(ps.patterns) and report.warnings


def test_validate_positivity_missing_upward():
    # (0,0) occurs but (1,0) does not: upward closure fails
    ps = PatternSet.from_patterns([(1, 1), (0, 1), (0, 0)])
    report = validate_positivity(ps)
    assert not report.valid
    assert (1, 0) in report.missing_upward


def test_validate_positivity_concurrent_missingness():
    # R1 = R2 always: monotone two-pattern set misses (1,0) and (0,1)
    ps = PatternSet.from_patterns([(1, 1), (0, 0)])
    report = validate_positivity(ps)
    assert not report.valid
    assert set(report.missing_upward) == {(1, 0), (0, 1)}


def test_validate_positivity_no_complete():
    ps = PatternSet.from_patterns([(1, 0), (0, 1)])
    report = validate_positivity(ps)
    assert not report.valid and not report.has_complete


@given(st.lists(patterns_st.filter(lambda r: len(r) == 3),
                min_size=1, max_size=8))
def test_upward_closure_property(pats):
    ps = PatternSet.from_patterns(pats, p=3)
    report = validate_positivity(ps)
    observed = set(ps.counts)
    if report.valid:
        # every pattern above an observed one must itself be observed
        for r in observed:
            for k in range(3):
                if r[k] == 0:
                    up = tuple(1 if j == k else r[j] for j in range(3))
                    assert up in observed
    else:
        assert report.missing_upward or not report.has_complete


def test_report_to_dict_round_trip_keys():
    ps = PatternSet.from_patterns([(1, 1), (0, 1)])
    d = validate_positivity(ps).to_dict()
    assert set(d) == {"valid", "has_complete", "missing_upward", "low_count",
                      "min_count", "min_propensity"}
