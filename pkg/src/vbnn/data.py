"""Dataset ingestion, normalization, splits, evaluation metrics, and the
synthetic benchmark generator."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .state import Dataset

logger = logging.getLogger("vbnn")


class ParseError(ValueError):
    pass


@dataclass
class MetricsReport:
    rmse: float
    nll: float
    ec: dict      # CI level -> coverage fraction
    n_test: int

    def to_json(self) -> dict:
        return {
            "rmse": self.rmse,
            "nll": self.nll,
            "ec": {str(k): v for k, v in self.ec.items()},
            "n_test": self.n_test,
        }


def _normalize(x_raw: np.ndarray):
    mean = x_raw.mean(axis=0)
    sd = x_raw.std(axis=0)
    flat = sd == 0.0
    if flat.any():
        logger.warning("constant feature column(s) %s; using sd = 1", np.nonzero(flat)[0])
        sd = np.where(flat, 1.0, sd)
    return (x_raw - mean) / sd, mean, sd


def make_dataset(x_raw: np.ndarray, y: np.ndarray, feature_names, target_names,
                 stats=None) -> Dataset:
    """Normalize inputs (optionally with supplied statistics); targets stay raw."""
    x_raw = np.asarray(x_raw, dtype=float)
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if stats is None:
        x, mean, sd = _normalize(x_raw)
    else:
        mean, sd = stats
        x = (x_raw - mean) / sd
    return Dataset(
        x=x, y=y, feature_names=list(feature_names), target_names=list(target_names),
        x_mean=mean, x_sd=sd, x_raw=x_raw,
    )


def load_dataset(path: str, target_columns, delimiter: str = ",") -> Dataset:
    """Parse a delimited text file with a header row into a normalized Dataset.

    Every cell must be numeric and present; failures report the offending
    row and column.
    """
    if isinstance(target_columns, str):
        target_columns = [target_columns]
    with open(path, newline="") as f:
        reader = csv.reader(f, delimiter=delimiter)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        for t in target_columns:
            if t not in header:
                raise ParseError(f"{path}: target column {t!r} not in header {header}")
        rows = []
        for r, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(f"{path}:{r}: expected {len(header)} fields, got {len(row)}")
            vals = []
            for c, cell in enumerate(row):
                cell = cell.strip()
                if cell == "":
                    raise ParseError(f"{path}:{r}: missing value in column {header[c]!r}")
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(
                        f"{path}:{r}: non-numeric value {cell!r} in column {header[c]!r}"
                    ) from None
                if not math.isfinite(v):
                    raise ParseError(f"{path}:{r}: non-finite value in column {header[c]!r}")
                vals.append(v)
            rows.append(vals)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    arr = np.array(rows, dtype=float)
    t_idx = [header.index(t) for t in target_columns]
    f_idx = [j for j in range(len(header)) if j not in t_idx]
    if not f_idx:
        raise ParseError(f"{path}: no feature columns left after removing targets")
    return make_dataset(
        arr[:, f_idx], arr[:, t_idx],
        [header[j] for j in f_idx], [header[j] for j in t_idx],
    )


def save_dataset(path: str, data: Dataset, delimiter: str = ",") -> None:
    """Raw features and targets back to delimited text (round-trips load_dataset)."""
    from .state import atomic_write_text

    header = list(data.feature_names) + list(data.target_names)
    lines = [delimiter.join(header)]
    for xr, yr in zip(data.x_raw, data.y):
        lines.append(delimiter.join(repr(v) for v in list(xr) + list(yr)))
    atomic_write_text(path, "\n".join(lines) + "\n")


def split(data: Dataset, train_frac: float = 0.9, seed: int = 0):
    """Seeded permutation split; normalization stats come from train only."""
    if not (0.0 < train_frac < 1.0):
        raise ValueError("train_frac must lie in (0, 1)")
    n = data.n_obs
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(n * train_frac)
    tr, te = perm[:n_train], perm[n_train:]
    train = make_dataset(
        data.x_raw[tr], data.y[tr], data.feature_names, data.target_names
    )
    test = make_dataset(
        data.x_raw[te], data.y[te], data.feature_names, data.target_names,
        stats=(train.x_mean, train.x_sd),
    )
    return train, test


def metrics(y_true: np.ndarray, summaries, ci_levels=(0.95,)) -> MetricsReport:
    """RMSE, predictive NLL (lower is better) and empirical coverage.

    Intervals use the Gaussian approximation N(mean, variance), so the
    level-q interval is mean +/- z_q * sd.
    """
    y = np.asarray(y_true, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    mean = np.stack([s.mean for s in summaries])
    var = np.stack([s.variance for s in summaries])
    if mean.shape != y.shape:
        raise ValueError(f"shape mismatch: y {y.shape}, predictions {mean.shape}")
    err = y - mean
    rmse = float(np.sqrt(np.mean(err**2)))
    nll = float(np.mean(0.5 * math.log(2.0 * math.pi) + 0.5 * np.log(var) + 0.5 * err**2 / var))
    ec = {}
    sd = np.sqrt(var)
    for level in ci_levels:
        z = ndtri(0.5 + level / 2.0)
        ec[level] = float(np.mean(np.abs(err) <= z * sd))
    return MetricsReport(rmse=rmse, nll=nll, ec=ec, n_test=y.shape[0])


def simulate_toy(n: int, seed: int = 0) -> Dataset:
    """Two uniform features on [-2, 2]; only the first drives the response
    y = 0.1 x1^2 + 10 sin(x1) + eps with eps ~ N(0, 0.5) (variance 0.5)."""
    if n < 1:
        raise ValueError("need n >= 1")
    rng = np.random.default_rng(seed)
    x = rng.uniform(-2.0, 2.0, size=(n, 2))
    eps = rng.normal(0.0, math.sqrt(0.5), size=n)
    y = 0.1 * x[:, 0] ** 2 + 10.0 * np.sin(x[:, 0]) + eps
    return make_dataset(x, y, ["x1", "x2"], ["y"])


def toy_signal(x1):
    """Noise-free toy regression function."""
    x1 = np.asarray(x1, dtype=float)
    return 0.1 * x1**2 + 10.0 * np.sin(x1)
