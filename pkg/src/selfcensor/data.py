"""Dataset container and CSV ingestion.

A dataset holds fully observed covariates x (n, d), partially observed
outcomes y (n, p) with NaN in masked cells, and the derived missingness
indicator matrix r (n, p).  The indicator matrix is always derived from
the masked cells, never read from a file.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd

from .patterns import PatternSet, enumerate_patterns

DEFAULT_MISSING_TOKENS = ("", "NA")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray                       # (n, d), fully observed
    y: np.ndarray                       # (n, p), NaN where masked
    covariate_names: tuple[str, ...] = ()
    outcome_names: tuple[str, ...] = ()
    y_full: np.ndarray | None = None    # simulation sidecar, never serialized

    def __post_init__(self):
        x = np.asarray(self.x, float)
        y = np.asarray(self.y, float)
        if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
            raise DataError("x and y must be 2-d with matching row counts")
        if y.shape[0] == 0:
            raise DataError("dataset is empty")
        if not np.isfinite(x).all():
            raise DataError("covariates must be fully observed and finite")
        if np.isinf(y).any():
            raise DataError("outcome values must be finite where observed")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)
        if not self.covariate_names:
            object.__setattr__(self, "covariate_names",
                               tuple(f"x{j+1}" for j in range(x.shape[1])))
        if not self.outcome_names:
            object.__setattr__(self, "outcome_names",
                               tuple(f"y{j+1}" for j in range(y.shape[1])))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def d(self) -> int:
        return self.x.shape[1]

    @property
    def p(self) -> int:
        return self.y.shape[1]

    @property
    def r(self) -> np.ndarray:
        return (~np.isnan(self.y)).astype(np.int8)

    def pattern_set(self) -> PatternSet:
        return enumerate_patterns(self.r)

    def take(self, indices) -> "Dataset":
        idx = np.asarray(indices, int)
        return replace(
            self, x=self.x[idx], y=self.y[idx],
            y_full=None if self.y_full is None else self.y_full[idx])


def read_csv(path_or_buf, covariates, outcomes,
             missing_tokens=DEFAULT_MISSING_TOKENS) -> Dataset:
    """Load a dataset from CSV.

    ``missing_tokens`` in outcome columns become masked cells; a missing
    token in a covariate column is an error.
    """
    tokens = list(missing_tokens)
    try:
        frame = pd.read_csv(path_or_buf, dtype=str, keep_default_na=False,
                            skipinitialspace=True)
    except Exception as exc:
        raise DataError(f"cannot read CSV: {exc}") from exc
    for col in list(covariates) + list(outcomes):
        if col not in frame.columns:
            raise DataError(f"column '{col}' not found in CSV header")

    def parse(col: str, allow_missing: bool) -> np.ndarray:
        raw = frame[col].to_numpy()
        out = np.empty(len(raw))
        for k, v in enumerate(raw):
            if v.strip() in tokens:
                if not allow_missing:
                    raise DataError(f"missing value in covariate column '{col}', row {k}")
                out[k] = np.nan
                continue
            try:
                out[k] = float(v)
            except ValueError as exc:
                raise DataError(f"unparseable value {v!r} in column '{col}', row {k}") from exc
        return out

    x = np.stack([parse(c, False) for c in covariates], axis=1) if covariates \
        else np.zeros((len(frame), 0))
    y = np.stack([parse(c, True) for c in outcomes], axis=1)
    return Dataset(x=x, y=y, covariate_names=tuple(covariates),
                   outcome_names=tuple(outcomes))


def write_csv(dataset: Dataset, path_or_buf, missing_token: str = "NA") -> None:
    """Write a dataset with masked cells as the canonical missing token."""
    cols: dict[str, object] = {}
    for j, name in enumerate(dataset.covariate_names):
        cols[name] = dataset.x[:, j]
    for j, name in enumerate(dataset.outcome_names):
        col = np.array([repr(float(v)) if np.isfinite(v) else missing_token
                        for v in dataset.y[:, j]], dtype=object)
        cols[name] = col
    pd.DataFrame(cols).to_csv(path_or_buf, index=False)


def round_trip(dataset: Dataset) -> Dataset:
    """write_csv followed by read_csv; used for the identity contract."""
    buf = io.StringIO()
    write_csv(dataset, buf)
    buf.seek(0)
    return read_csv(buf, dataset.covariate_names, dataset.outcome_names)
