"""Evaluation metrics: R^2, MAE, MSE and the 1-D Wasserstein distance."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np


def _pair(y, y_hat) -> tuple[np.ndarray, np.ndarray]:
    y = np.asarray(y, dtype=np.float64)
    y_hat = np.asarray(y_hat, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {y_hat.shape}")
    return y, y_hat


def r_squared(y, y_hat) -> float:
    """1 - SS_res / SS_tot about the mean of y; NaN when y is constant."""
    y, y_hat = _pair(y, y_hat)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    if ss_tot == 0.0:
        return math.nan
    return 1.0 - float(np.sum((y - y_hat) ** 2)) / ss_tot


def mae(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean(np.abs(y - y_hat)))


def mse(y, y_hat) -> float:
    y, y_hat = _pair(y, y_hat)
    return float(np.mean((y - y_hat) ** 2))


def wasserstein(y, y_hat, bin_width: float = 1.0) -> float:
    """bin_width * sum_k |CDF_y(k) - CDF_yhat(k)| after scaling both to unit mass.

    NaN when either side has zero total mass.
    """
    y, y_hat = _pair(y, y_hat)
    if np.any(y < 0) or np.any(y_hat < 0):
        raise ValueError("wasserstein needs non-negative inputs")
    sy, sh = y.sum(), y_hat.sum()
    if sy == 0 or sh == 0:
        return math.nan
    return bin_width * float(np.sum(np.abs(np.cumsum(y / sy) - np.cumsum(y_hat / sh))))


def _nanmean(values: list[float]) -> float:
    vals = [v for v in values if not math.isnan(v)]
    return math.fsum(vals) / len(vals) if vals else math.nan


@dataclass
class MetricReport:
    """Per-sample metrics and their means.

    Undefined per-sample values (R^2 of a constant target, WD of an all-zero
    spectrum) are NaN, counted in ``flagged`` and left out of the means.
    """

    ids: list[str]
    per_sample: dict[str, list[float]]
    flagged: dict[str, int] = field(default_factory=dict)

    def aggregate(self, name: str) -> float:
        return _nanmean(self.per_sample[name])

    @property
    def r2(self) -> float:
        return self.aggregate("r2")

    @property
    def mae(self) -> float:
        return self.aggregate("mae")

    @property
    def mse(self) -> float:
        return self.aggregate("mse")

    @property
    def wd(self) -> float:
        return self.aggregate("wd")

    def to_dict(self) -> dict:
        def clean(v):
            return None if math.isnan(v) else v

        rows = []
        for i, sid in enumerate(self.ids):
            rows.append({"id": sid, **{k: clean(v[i]) for k, v in self.per_sample.items()}})
        return {
            "r2": clean(self.r2),
            "mae": clean(self.mae),
            "mse": clean(self.mse),
            "wd": clean(self.wd),
            "n": len(self.ids),
            "flagged": dict(self.flagged),
            "per_sample": rows,
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent, sort_keys=True)


def metric_report(ids, targets: np.ndarray, predictions: np.ndarray, bin_width: float = 1.0) -> MetricReport:
    targets = np.asarray(targets, dtype=np.float64)
    predictions = np.asarray(predictions, dtype=np.float64)
    per = {"r2": [], "mae": [], "mse": [], "wd": []}
    for y, p in zip(targets, predictions):
        per["r2"].append(r_squared(y, p))
        per["mae"].append(mae(y, p))
        per["mse"].append(mse(y, p))
        # raw (mse-head) predictions can dip below zero; transport needs mass >= 0
        per["wd"].append(wasserstein(y, np.maximum(p, 0.0), bin_width))
    flagged = {k: sum(math.isnan(v) for v in vals) for k, vals in per.items()}
    return MetricReport(list(ids), per, {k: v for k, v in flagged.items() if v})
