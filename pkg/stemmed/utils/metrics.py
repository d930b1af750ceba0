from typing import Iterable, List, Sequence, Tuple

import numpy as np
import pandas as pd

from stemmed.utils.errors import InvalidInputError


def compute_mspe(predictions, references):
    """Mean squared prediction error of counts, plus the per-item squared errors."""
    predictions = np.asarray(predictions, dtype=float)
    references = np.asarray(references, dtype=float)
    if predictions.shape != references.shape:
        raise InvalidInputError("predictions and references must align")
    if predictions.size == 0:
        raise InvalidInputError("cannot score an empty set of predictions")
    squared = (predictions - references) ** 2
    return float(squared.mean()), squared.tolist()


def mspe_table(log: pd.DataFrame, keys: Sequence[str] = ("drug",)) -> pd.DataFrame:
    """MSPE per (variant, horizon, *keys); groups without rows simply do not appear."""
    if log is None or len(log) == 0:
        raise InvalidInputError("evaluation log is empty")
    by = ["variant", "horizon", *keys]
    missing = [k for k in by if k not in log.columns]
    if missing:
        raise InvalidInputError(f"evaluation log lacks columns {missing}")
    scored = log.assign(squared_error=(log["predicted"] - log["realized"]) ** 2)
    table = (
        scored.groupby(by, sort=True)["squared_error"]
        .agg(mspe="mean", n="count")
        .reset_index()
    )
    return table


def param_items(params) -> List[Tuple[str, float]]:
    """Flat (name, value) pairs; vector blocks of length 1 keep their bare name."""
    items = [("gamma", params.gamma)]
    items += _vector("beta", params.beta)
    items += [("alpha", params.alpha), ("delta_g", params.delta_g)]
    items += _vector("omega", params.omega)
    items.append(("delta_k", params.delta_k))
    return items


def _vector(name: str, values: Iterable[float]) -> List[Tuple[str, float]]:
    values = list(values)
    if len(values) == 1:
        return [(name, float(values[0]))]
    return [(f"{name}[{k}]", float(v)) for k, v in enumerate(values)]


def recovery_summary(estimates: pd.DataFrame, gt) -> pd.DataFrame:
    """Mean and empirical 2.5/97.5 percentiles per (n_nodes, cutoff, parameter)."""
    columns = ["n_nodes", "cutoff", "parameter", "gt", "mean", "p2_5", "p97_5", "n_fits"]
    if len(estimates) == 0:
        return pd.DataFrame(columns=columns)
    truth = dict(param_items(gt))
    order = {name: k for k, (name, _) in enumerate(param_items(gt))}
    grouped = estimates.groupby(["n_nodes", "cutoff", "parameter"])["value"]
    summary = grouped.agg(
        mean="mean",
        p2_5=lambda v: float(np.percentile(v, 2.5)),
        p97_5=lambda v: float(np.percentile(v, 97.5)),
        n_fits="count",
    ).reset_index()
    summary["gt"] = summary["parameter"].map(truth)
    summary["_order"] = summary["parameter"].map(order)
    summary = summary.sort_values(["n_nodes", "cutoff", "_order"]).drop(columns="_order")
    return summary[columns].reset_index(drop=True)
