"""Missingness-pattern algebra.

A pattern is a tuple of p binary indicators, 1 meaning "observed".
Patterns are canonically encoded as unsigned integers (bit i = indicator
of outcome i) for hashing and enumeration; p <= 16 is enforced so the
full lattice of 2**p patterns can always be enumerated directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

MAX_P = 16

DEFAULT_MIN_COUNT = 5
DEFAULT_MIN_PROPENSITY = 1e-3

Pattern = tuple[int, ...]


class DimensionError(ValueError):
    """Raised when pattern or dataset dimensions are inconsistent."""


def as_pattern(bits) -> Pattern:
    """Canonicalize a sequence of 0/1 indicators into a Pattern tuple."""
    t = tuple(int(b) for b in bits)
    if not t:
        raise DimensionError("pattern must have length >= 1")
    if len(t) > MAX_P:
        raise DimensionError(f"pattern length {len(t)} exceeds maximum {MAX_P}")
    if any(b not in (0, 1) for b in t):
        raise ValueError(f"pattern entries must be 0 or 1, got {bits!r}")
    return t


def pattern_to_int(r: Pattern) -> int:
    """Encode a pattern as an integer with bit i equal to r[i]."""
    code = 0
    for i, b in enumerate(r):
        code |= int(b) << i
    return code


def int_to_pattern(code: int, p: int) -> Pattern:
    """Inverse of :func:`pattern_to_int` for dimension p."""
    return tuple((code >> i) & 1 for i in range(p))


def complete_pattern(p: int) -> Pattern:
    return (1,) * p


def pattern_leq(a, b) -> bool:
    """Partial order on patterns: a <= b iff a[i] <= b[i] for all i."""
    a = as_pattern(a)
    b = as_pattern(b)
    if len(a) != len(b):
        raise DimensionError(f"pattern lengths differ: {len(a)} vs {len(b)}")
    return all(ai <= bi for ai, bi in zip(a, b))


def _supersets(r: Pattern):
    """All patterns r' with r <= r', including r itself."""
    p = len(r)
    zero_positions = [i for i in range(p) if r[i] == 0]
    base = pattern_to_int(r)
    for mask in range(1 << len(zero_positions)):
        code = base
        for k, pos in enumerate(zero_positions):
            if (mask >> k) & 1:
                code |= 1 << pos
        yield int_to_pattern(code, p)


@dataclass(frozen=True)
class ValidationReport:
    """Outcome of checking a pattern set against the positivity assumption.

    ``missing_upward`` lists patterns r' that are above some observed
    pattern in the partial order but do not occur; ``low_count`` lists
    observed patterns with fewer than ``min_count`` records.  Estimation
    refuses to run when ``valid`` is False; low counts only warn.
    """

    missing_upward: tuple[Pattern, ...]
    low_count: tuple[Pattern, ...]
    has_complete: bool
    min_count: int
    min_propensity: float

    @property
    def valid(self) -> bool:
        return self.has_complete and not self.missing_upward

    @property
    def warnings(self) -> tuple[str, ...]:
        msgs = []
        if not self.has_complete:
            msgs.append("complete pattern (all outcomes observed) is absent")
        for r in self.missing_upward:
            msgs.append(f"pattern {r} is implied by an observed pattern but absent")
        for r in self.low_count:
            msgs.append(f"pattern {r} has fewer than {self.min_count} records")
        return tuple(msgs)

    def to_dict(self) -> dict:
        return {
            "valid": self.valid,
            "has_complete": self.has_complete,
            "missing_upward": [list(r) for r in self.missing_upward],
            "low_count": [list(r) for r in self.low_count],
            "min_count": self.min_count,
            "min_propensity": self.min_propensity,
        }


@dataclass(frozen=True)
class PatternSet:
    """The set of observed missingness patterns with empirical counts."""

    p: int
    counts: dict[Pattern, int] = field(default_factory=dict)

    def __post_init__(self):
        if not 1 <= self.p <= MAX_P:
            raise DimensionError(f"outcome dimension must be in [1, {MAX_P}]")
        for r, c in self.counts.items():
            if len(r) != self.p:
                raise DimensionError(f"pattern {r} does not have length {self.p}")
            if c <= 0:
                raise ValueError(f"pattern {r} has nonpositive count {c}")

    @property
    def patterns(self) -> tuple[Pattern, ...]:
        return tuple(sorted(self.counts, key=pattern_to_int, reverse=True))

    @property
    def n(self) -> int:
        return sum(self.counts.values())

    def __contains__(self, r) -> bool:
        return as_pattern(r) in self.counts

    @classmethod
    def from_patterns(cls, patterns, p: int | None = None) -> "PatternSet":
        """Build a set with unit counts from an iterable of patterns."""
        pats = [as_pattern(r) for r in patterns]
        if p is None:
            if not pats:
                raise ValueError("cannot infer dimension from empty pattern list")
            p = len(pats[0])
        counts: dict[Pattern, int] = {}
        for r in pats:
            counts[r] = counts.get(r, 0) + 1
        return cls(p=p, counts=counts)

    @classmethod
    def full_lattice(cls, p: int) -> "PatternSet":
        return cls.from_patterns([int_to_pattern(c, p) for c in range(1 << p)], p=p)


def enumerate_patterns(r_matrix) -> PatternSet:
    """Count the missingness patterns occurring in an n-by-p indicator matrix."""
    r_matrix = np.asarray(r_matrix)
    if r_matrix.ndim != 2 or r_matrix.shape[0] == 0:
        raise ValueError("need a nonempty n-by-p indicator matrix")
    p = r_matrix.shape[1]
    codes = (r_matrix.astype(np.int64) << np.arange(p)).sum(axis=1)
    uniq, cnt = np.unique(codes, return_counts=True)
    counts = {int_to_pattern(int(c), p): int(k) for c, k in zip(uniq, cnt)}
    return PatternSet(p=p, counts=counts)


def validate_positivity(
    ps: PatternSet,
    min_count: int = DEFAULT_MIN_COUNT,
    min_propensity: float = DEFAULT_MIN_PROPENSITY,
) -> ValidationReport:
    """Check a pattern set against the positivity assumption.

    The pattern set must contain, for every observed pattern, all patterns
    above it in the partial order (in particular the complete pattern).
    Patterns observed fewer than ``min_count`` times are reported as
    warnings.  ``min_propensity`` is recorded as the runtime floor used by
    the estimation pipelines.
    """
    if not ps.counts:
        raise ValueError("pattern set is empty")
    observed = set(ps.counts)
    missing = set()
    for r in observed:
        for sup in _supersets(r):
            if sup not in observed:
                missing.add(sup)
    low = tuple(sorted((r for r, c in ps.counts.items() if c < min_count),
                       key=pattern_to_int))
    return ValidationReport(
        missing_upward=tuple(sorted(missing, key=pattern_to_int)),
        low_count=low,
        has_complete=complete_pattern(ps.p) in observed,
        min_count=min_count,
        min_propensity=min_propensity,
    )
