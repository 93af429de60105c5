#!/usr/bin/env python3

import numpy as np
from typing import Dict, List, Optional, Sequence, Tuple

from dataset import ColumnKind, DataFrame, require_binary_treatment
from utils import StratamatchError, make_rng


class PilotSplit:
    """
    pilot_set: controls set aside to fit the prognostic model
    analysis_set: every other row, including all treated rows
    """

    def __init__(self, pilot_set: DataFrame, analysis_set: DataFrame, fraction: float,
                 balance_covariates: List[str], seed: int):
        self.pilot_set: DataFrame = pilot_set
        self.analysis_set: DataFrame = analysis_set
        self.fraction: float = fraction
        self.balance_covariates: List[str] = list(balance_covariates)
        self.seed: int = seed

    def __repr__(self):
        return f"PilotSplit(pilot {self.pilot_set.dimensions()}, analysis {self.analysis_set.dimensions()})"


def _check_fraction(fraction: float):
    if not 0.0 < fraction < 1.0:
        raise BadFraction(f"The pilot fraction must lie strictly between 0 and 1, got {fraction}")


def _grouping_cells(df: DataFrame, covariates: Sequence[str]) -> Dict[Tuple, np.ndarray]:
    """
    Map from each observed combination of the covariates to the positions of its
    rows. A single cell holding every row when no covariates are given.
    """
    for name in covariates:
        if df.schema(name).kind is ColumnKind.Numeric:
            raise ContinuousGroupingCovariate(f"Cannot balance the pilot set on continuous covariate {name}")
    if not covariates:
        return {(): np.arange(df.n_rows)}

    keys = list(zip(*[df.column(name).tolist() for name in covariates]))
    cells: Dict[Tuple, List[int]] = {}
    for i, key in enumerate(keys):
        cells.setdefault(key, []).append(i)
    return {key: np.array(cells[key]) for key in sorted(cells, key=lambda k: tuple(str(v) for v in k))}


def _bernoulli_pick(df: DataFrame, candidates: np.ndarray, covariates: Sequence[str], fraction: float,
                    seed: int) -> np.ndarray:
    """
    Positions (into df) of the candidate rows selected independently with
    probability fraction, drawing cell by cell in sorted cell order.
    """
    rng = make_rng(seed)
    is_candidate = np.zeros(df.n_rows, dtype=bool)
    is_candidate[candidates] = True
    picked = []
    for rows in _grouping_cells(df, covariates).values():
        rows = rows[is_candidate[rows]]
        if len(rows) == 0:
            continue
        picked.append(rows[rng.random(len(rows)) < fraction])
    if not picked:
        return np.array([], dtype=np.int64)
    return np.sort(np.concatenate(picked))


def split_pilot_set(df: DataFrame, treat: str, pilot_fraction: float = 0.1,
                    group_by_covariates: Optional[Sequence[str]] = None, seed: int = 0,
                    print_debug_messages: bool = True) -> PilotSplit:
    """
    Each control row goes into the pilot set independently with probability
    pilot_fraction. Selection runs within every cross classification cell of
    group_by_covariates, so the pilot set mirrors the analysis set on them.
    Treated rows always stay in the analysis set.
    """
    treatment = require_binary_treatment(df, treat)
    _check_fraction(pilot_fraction)
    covariates = list(group_by_covariates or [])

    if print_debug_messages:
        print(f"Constructing a pilot set by subsampling {pilot_fraction * 100:g}% of controls.")
        if covariates:
            print("Subsampling while balancing on:")
            print(" ".join(covariates))

    controls = np.flatnonzero(treatment == 0)
    pilot_rows = _bernoulli_pick(df, controls, covariates, pilot_fraction, seed)
    in_pilot = np.zeros(df.n_rows, dtype=bool)
    in_pilot[pilot_rows] = True
    return PilotSplit(df.filter(in_pilot), df.filter(~in_pilot), pilot_fraction, covariates, seed)


def grow_pilot_set(split: PilotSplit, treat: str, additional_fraction: float, seed: int,
                   print_debug_messages: bool = True) -> PilotSplit:
    """
    Move a further subsample of the analysis set controls into the pilot set.
    Rows only ever move from the analysis set to the pilot set.
    """
    analysis = split.analysis_set
    treatment = require_binary_treatment(analysis, treat)
    _check_fraction(additional_fraction)

    controls = np.flatnonzero(treatment == 0)
    moved_rows = _bernoulli_pick(analysis, controls, split.balance_covariates, additional_fraction, seed)
    if print_debug_messages:
        print(f"Moving {len(moved_rows)} analysis set controls into the pilot set.")

    moving = np.zeros(analysis.n_rows, dtype=bool)
    moving[moved_rows] = True
    moved = analysis.filter(moving)

    pilot = split.pilot_set
    columns = [np.concatenate([a, b]) for a, b in zip(pilot.columns(), moved.columns())]
    row_id = np.concatenate([pilot.row_id, moved.row_id])
    order = np.argsort(row_id, kind='stable')
    grown = DataFrame(pilot.schemas, [c[order] for c in columns], row_id[order])
    return PilotSplit(grown, analysis.filter(~moving), split.fraction, split.balance_covariates, split.seed)


class ContinuousGroupingCovariate(StratamatchError):
    pass


class BadFraction(StratamatchError):
    pass
