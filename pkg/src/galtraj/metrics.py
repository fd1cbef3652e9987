"""Long-tail evaluation metrics over per-agent error tables.

An error table is a :class:`pandas.DataFrame` with columns
``scenario_id, agent_id, minade6, minfde6, model, split`` and one row per
agent. All reductions use :func:`math.fsum` so results are correctly rounded
and independent of summation order.
"""
from __future__ import annotations

import math
from fractions import Fraction
from pathlib import Path

import numpy as np
import pandas as pd

from .exceptions import EvaluationError

COLUMNS = ["scenario_id", "agent_id", "minade6", "minfde6", "model", "split"]
KEY = ["scenario_id", "agent_id"]


def _displacements(modes, truth, mask):
    modes = np.asarray(modes, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if mask is None:
        mask = np.ones(truth.shape[0], dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if modes.shape[-2:] != truth.shape:
        raise EvaluationError(f"mode shape {modes.shape} does not match truth {truth.shape}")
    diff = modes[:, mask] - truth[mask]
    return np.sqrt(diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1])  # (K, T_valid)


def min_ade(modes, truth, mask=None) -> float:
    """Min over modes of the mean L2 distance over valid steps; NaN if none are valid."""
    dist = _displacements(modes, truth, mask)
    n = dist.shape[1]
    if n == 0:
        return math.nan
    return min(math.fsum(row) / n for row in dist.tolist())


def min_fde(modes, truth, mask=None) -> float:
    """Min over modes of the L2 distance at the last valid step; NaN if none are valid."""
    dist = _displacements(modes, truth, mask)
    if dist.shape[1] == 0:
        return math.nan
    return float(dist[:, -1].min())


per_agent_error = min_ade


def make_error_table(records, model: str = "", split: str = "") -> pd.DataFrame:
    """Build a table from ``(scenario_id, agent_id, minade6, minfde6)`` tuples."""
    df = pd.DataFrame(list(records), columns=COLUMNS[:4])
    df["scenario_id"] = df["scenario_id"].astype(np.int64)
    df["agent_id"] = df["agent_id"].astype(np.int64)
    df["minade6"] = df["minade6"].astype(float)
    df["minfde6"] = df["minfde6"].astype(float)
    df["model"] = model
    df["split"] = split
    return df


def check_error_table(table: pd.DataFrame) -> pd.DataFrame:
    missing = set(COLUMNS[:4]) - set(table.columns)
    if missing:
        raise EvaluationError(f"error table lacks columns {sorted(missing)}")
    keys = KEY + (["model"] if "model" in table.columns else [])
    if table.duplicated(keys).any():
        raise EvaluationError("error table has duplicate (scenario_id, agent_id, model) keys")
    vals = table[["minade6", "minfde6"]].to_numpy(dtype=float)
    if not np.isfinite(vals).all():
        raise EvaluationError("error table contains non-finite values")
    return table


def _values(errors, column: str) -> np.ndarray:
    if isinstance(errors, pd.DataFrame):
        return errors[column].to_numpy(dtype=float)
    return np.asarray(errors, dtype=float).ravel()


def top_k_percent(reference: pd.DataFrame, current: pd.DataFrame, k: float, column: str = "minade6") -> float:
    """Mean current error over the ceil(k% * n) agents the reference model found hardest.

    Ties in the reference error are broken by ascending (scenario_id, agent_id).
    """
    if not 0 < k <= 100:
        raise EvaluationError(f"k must be in (0, 100], got {k}")
    ref_s, ref_a = reference["scenario_id"].to_numpy(), reference["agent_id"].to_numpy()
    cur_s, cur_a = current["scenario_id"].to_numpy(), current["agent_id"].to_numpy()
    ref_order, cur_order = np.lexsort((ref_a, ref_s)), np.lexsort((cur_a, cur_s))
    if not (len(ref_s) == len(cur_s) and np.array_equal(ref_s[ref_order], cur_s[cur_order])
            and np.array_equal(ref_a[ref_order], cur_a[cur_order])):
        ref_keys = set(zip(ref_s.tolist(), ref_a.tolist()))
        cur_keys = set(zip(cur_s.tolist(), cur_a.tolist()))
        missing = sorted(ref_keys ^ cur_keys)
        raise EvaluationError(f"key mismatch between tables; differing keys: {missing[:10]}"
                              + (" ..." if len(missing) > 10 else ""))
    n = len(ref_s)
    if n == 0:
        raise EvaluationError("empty error table")
    aligned = np.empty(n)
    aligned[ref_order] = current[column].to_numpy(dtype=float)[cur_order]  # current values in reference row order
    n_sel = math.ceil(Fraction(k) * n / 100)
    order = np.lexsort((ref_a, ref_s, -reference[column].to_numpy(dtype=float)))
    return math.fsum(aligned[order[:n_sel]].tolist()) / n_sel


def value_at_risk(errors, alpha_permille: int, column: str = "minade6") -> float:
    """Nearest-rank ``alpha/1000`` quantile of the per-agent errors."""
    vals = _values(errors, column)
    if len(vals) == 0:
        raise EvaluationError("empty error table")
    if not 0 < alpha_permille < 1000:
        raise EvaluationError(f"alpha must be in (0, 1000), got {alpha_permille}")
    rank = -(-alpha_permille * len(vals) // 1000)
    return float(np.sort(vals, kind="stable")[rank - 1])


def false_prediction_ratio(errors, threshold: float, column: str = "minade6") -> float:
    """Percentage (0-100) of agents whose error exceeds ``threshold``."""
    vals = _values(errors, column)
    if len(vals) == 0:
        raise EvaluationError("empty error table")
    return 100.0 * int((vals > threshold).sum()) / len(vals)


def mean_error(errors, column: str = "minade6") -> float:
    vals = _values(errors, column)
    if len(vals) == 0:
        raise EvaluationError("empty error table")
    return math.fsum(vals.tolist()) / len(vals)


def summarize(current: pd.DataFrame, reference: pd.DataFrame | None = None,
              top_ks=(1, 3, 5), var_alpha: int = 999, fpr_thresholds=(1.0, 2.0)) -> dict:
    """The metric row reported per model."""
    row: dict = {}
    for k in top_ks:
        row[f"top{k}"] = top_k_percent(reference, current, k) if reference is not None else math.nan
    row[f"var{var_alpha}"] = value_at_risk(current, var_alpha)
    for th in fpr_thresholds:
        row[f"fpr{th:g}"] = false_prediction_ratio(current, th)
    row["minade6"] = mean_error(current, "minade6")
    row["minfde6"] = mean_error(current, "minfde6")
    return row


def write_error_table(table: pd.DataFrame, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    table[COLUMNS].to_csv(path, index=False)
    return path


def read_error_table(path) -> pd.DataFrame:
    try:
        df = pd.read_csv(path, float_precision="round_trip", keep_default_na=False,
                         dtype={"model": str, "split": str})
    except (OSError, pd.errors.ParserError) as exc:
        raise EvaluationError(f"cannot read error table {path}: {exc}") from exc
    return check_error_table(df)
