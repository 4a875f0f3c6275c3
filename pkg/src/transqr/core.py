"""Shared data model, the check loss and estimation metrics."""

from __future__ import annotations

import csv
import enum
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class StudyFormatError(ValueError):
    """Malformed study input (CSV layout, non-numeric or non-finite cells)."""


class Role(str, enum.Enum):
    TARGET = "Target"
    SOURCE = "Source"


def validate_tau(tau: float) -> float:
    tau = float(tau)
    if not 0.0 < tau < 1.0:
        raise ValueError(f"quantile level must lie in (0, 1), got {tau}")
    return tau


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class Study:
    """One dataset: an ``n x p`` design, responses and its role.

    Arrays are copied and made read-only on construction, so a study can be
    shared between workers without defensive copies.
    """

    id: str
    X: np.ndarray
    y: np.ndarray
    role: Role = Role.SOURCE
    _fingerprint: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        X = _frozen(self.X)
        y = _frozen(self.y)
        if X.ndim != 2:
            raise ValueError(f"study {self.id!r}: X must be 2-D, got shape {X.shape}")
        if y.ndim != 1:
            raise ValueError(f"study {self.id!r}: y must be 1-D, got shape {y.shape}")
        n, p = X.shape
        if n < 1 or p < 1:
            raise ValueError(f"study {self.id!r}: need n >= 1 and p >= 1, got {X.shape}")
        if y.shape[0] != n:
            raise ValueError(f"study {self.id!r}: X has {n} rows but y has {y.shape[0]} entries")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValueError(f"study {self.id!r}: all entries must be finite")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "role", Role(self.role))

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def fingerprint(self) -> int:
        """64-bit content hash of (X, y); independent of ``id`` and ``role``."""
        if not self._fingerprint:
            h = hashlib.blake2b(digest_size=8)
            h.update(np.int64(self.X.shape).tobytes())
            h.update(self.X.tobytes())
            h.update(self.y.tobytes())
            self._fingerprint.append(int.from_bytes(h.digest(), "little"))
        return self._fingerprint[0]

    def take(self, rows, id: str | None = None) -> "Study":
        rows = np.asarray(rows)
        return Study(self.id if id is None else id, self.X[rows], self.y[rows], self.role)

    def with_role(self, role: Role) -> "Study":
        return Study(self.id, self.X, self.y, role)


def check_loss(x, tau: float):
    """Quantile check loss ``x * (tau - 1{x <= 0})``, elementwise."""
    tau = validate_tau(tau)
    x = np.asarray(x, dtype=np.float64)
    out = x * (tau - (x <= 0.0))
    return float(out) if out.ndim == 0 else out


def quantile_objective(study: Study, beta, tau: float) -> float:
    beta = np.asarray(beta, dtype=np.float64)
    if beta.shape != (study.p,):
        raise ValueError(f"beta has shape {beta.shape}, study has p={study.p}")
    return float(np.sum(check_loss(study.y - study.X @ beta, tau)))


@dataclass(frozen=True)
class ErrorMetrics:
    l1_error: float
    l2_error: float
    prediction_error: float

    def as_dict(self) -> dict:
        return {"l1_error": self.l1_error, "l2_error": self.l2_error,
                "prediction_error": self.prediction_error}


def compute_metrics(beta_hat, beta_true, X_test) -> ErrorMetrics:
    """l1 / l2 coefficient error and mean squared prediction error on ``X_test``."""
    beta_hat = np.asarray(beta_hat, dtype=np.float64)
    beta_true = np.asarray(beta_true, dtype=np.float64)
    X_test = np.atleast_2d(np.asarray(X_test, dtype=np.float64))
    if beta_hat.shape != beta_true.shape or beta_hat.ndim != 1:
        raise ValueError(f"shape mismatch: {beta_hat.shape} vs {beta_true.shape}")
    if X_test.shape[1] != beta_hat.shape[0]:
        raise ValueError(f"X_test has {X_test.shape[1]} columns, expected {beta_hat.shape[0]}")
    d = beta_hat - beta_true
    return ErrorMetrics(
        l1_error=float(np.sum(np.abs(d))),
        l2_error=float(np.sqrt(np.sum(d * d))),
        prediction_error=float(np.mean((X_test @ d) ** 2)),
    )


def read_study_csv(path, id: str | None = None, role: Role = Role.SOURCE) -> Study:
    """Read a study from CSV: header row, first column ``y``, then covariates.

    Raises :class:`StudyFormatError` naming the offending row/column.
    """
    path = Path(path)
    if id is None:
        id = path.stem
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise StudyFormatError(f"{path}: cannot open ({exc.strerror})") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise StudyFormatError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if not header or header[0] != "y":
            raise StudyFormatError(f"{path}: first header column must be 'y', got {header[:1]}")
        if len(header) < 2:
            raise StudyFormatError(f"{path}: no covariate columns")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise StudyFormatError(
                    f"{path}: row {lineno} has {len(row)} fields, header has {len(header)}")
            vals = []
            for col, cell in zip(header, row):
                try:
                    v = float(cell)
                except ValueError:
                    raise StudyFormatError(
                        f"{path}: row {lineno}, column {col!r}: not a number: {cell!r}") from None
                if not np.isfinite(v):
                    raise StudyFormatError(f"{path}: row {lineno}, column {col!r}: non-finite value")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise StudyFormatError(f"{path}: no data rows")
    data = np.array(rows)
    return Study(id, data[:, 1:], data[:, 0], role)


def write_study_csv(study: Study, path) -> None:
    path = Path(path)
    header = ["y"] + [f"x{j + 1}" for j in range(study.p)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for yi, xi in zip(study.y, study.X):
            w.writerow([repr(float(yi))] + [repr(float(v)) for v in xi])
