#!/usr/bin/env python3

from dataclasses import dataclass
from enum import Enum
import numpy as np
import pandas as pd
from typing import List, Optional, Sequence, Union

from dataset import ROW_ID_COLUMN, DataFrame, require_binary_treatment
from glm import FittedGlm, ResidualKind, predict, residuals
from matcher import PropensityInput, Strata, fit_propensity
from plot_helpers import add_stacked_histogram_data_to_axis, add_titles_to_axis, add_zone_shading, new_figure, \
                         save_svg
from stratifier import IssueFlag, Thresholds, issue_table, stratum_labels
from utils import CSV_FLOAT_FORMAT, StratamatchError, make_rng


DEGENERATE_BIN_WIDTH = 1e-9


class Zone(Enum):
    Ok = 'ok'
    Yellow = 'yellow'
    Red = 'red'


class Group(Enum):
    Treated = 'treated'
    Control = 'control'


@dataclass(frozen=True)
class SizeRatioPoint:
    stratum: int
    total: int
    control_proportion: float
    zone: Zone


@dataclass
class HistogramData:
    stratum: int
    bin_edges: np.ndarray
    treated_counts: np.ndarray
    control_counts: np.ndarray


@dataclass(frozen=True)
class FisherMillPoint:
    row_id: int
    group: Group
    propensity: float
    prognosis: float


class ResidualTable:
    def __init__(self, row_id: np.ndarray, fitted: np.ndarray, response: np.ndarray, pearson: np.ndarray,
                 deviance: np.ndarray):
        self.row_id = row_id
        self.fitted = fitted
        self.response = response
        self.pearson = pearson
        self.deviance = deviance

    def __len__(self):
        return len(self.row_id)


def classify_zone(total: int, control_proportion: float, thresholds: Optional[Thresholds] = None) -> Zone:
    thresholds = thresholds or Thresholds()
    if total < thresholds.too_few or total > thresholds.too_many:
        return Zone.Red
    ratio = thresholds.ratio
    if control_proportion >= ratio / (1.0 + ratio) or control_proportion <= 1.0 / (1.0 + ratio):
        return Zone.Yellow
    return Zone.Ok


def size_ratio_data(strata: Strata, thresholds: Optional[Thresholds] = None) -> List[SizeRatioPoint]:
    """
    One point per stratum, zoned from its issue flags: red for a size problem,
    yellow for treated / control imbalance.
    """
    rows = strata.issue_table if thresholds is None else issue_table(strata.analysis_set, strata.treat, thresholds)
    points = []
    for row in rows:
        flags = set(row.potential_issues)
        if flags & {IssueFlag.TooFewSamples, IssueFlag.TooManySamples}:
            zone = Zone.Red
        elif flags & {IssueFlag.NotEnoughTreated, IssueFlag.NotEnoughControl}:
            zone = Zone.Yellow
        else:
            zone = Zone.Ok
        points.append(SizeRatioPoint(row.stratum, row.total, row.control_proportion, zone))
    return points


def _propensity_scores(strata: Strata, propensity: Union[PropensityInput, np.ndarray]) -> np.ndarray:
    if isinstance(propensity, PropensityInput):
        return fit_propensity(strata, propensity, print_debug_messages=False)
    return fit_propensity(strata, PropensityInput.from_scores(propensity), print_debug_messages=False)


def _stratum_rows(strata: Strata, stratum: Optional[int]) -> np.ndarray:
    labels = stratum_labels(strata.analysis_set)
    if stratum is None:
        return np.arange(len(labels))
    rows = np.flatnonzero(labels == stratum)
    if len(rows) == 0:
        raise UnknownStratum(f"There is no stratum {stratum}, strata run from 1 to {int(labels.max())}")
    return rows


def propensity_hist_data(strata: Strata, propensity: Union[PropensityInput, np.ndarray], stratum: int,
                         n_bins: int = 20) -> HistogramData:
    """
    Treated and control counts of the stratum's propensity scores over n_bins
    equal width bins spanning the scores observed in the stratum.
    """
    if n_bins < 1:
        raise ValueError(f"Need at least one histogram bin, got {n_bins}")
    rows = _stratum_rows(strata, stratum)
    scores = _propensity_scores(strata, propensity)[rows]
    treated = require_binary_treatment(strata.analysis_set, strata.treat)[rows] == 1

    lo, hi = float(scores.min()), float(scores.max())
    if hi <= lo:
        hi = lo + DEGENERATE_BIN_WIDTH
    edges = np.linspace(lo, hi, n_bins + 1)
    treated_counts, _ = np.histogram(scores[treated], bins=edges)
    control_counts, _ = np.histogram(scores[~treated], bins=edges)
    return HistogramData(stratum, edges, treated_counts, control_counts)


def fisher_mill_data(strata: Strata, propensity: Union[PropensityInput, np.ndarray], stratum: Optional[int],
                     jitter_prognosis: float = 0.0, jitter_propensity: float = 0.0,
                     seed: int = 0) -> List[FisherMillPoint]:
    """
    Propensity against prognostic score for each row of the stratum (every row
    when stratum is None). A positive jitter adds uniform noise on [-a, a] to that
    axis, drawn from a generator seeded with seed.
    """
    if strata.prognostic_scores is None:
        raise NoPrognosticScores("Fisher-Mill plots need prognostic scores, which manual strata do not have")
    if jitter_prognosis < 0.0 or jitter_propensity < 0.0:
        raise ValueError("Jitter amplitudes must be non negative")
    rows = _stratum_rows(strata, stratum)
    propensity_scores = _propensity_scores(strata, propensity)[rows]
    prognostic_scores = strata.prognostic_scores[rows]
    treated = require_binary_treatment(strata.analysis_set, strata.treat)[rows] == 1

    rng = make_rng(seed)
    if jitter_prognosis > 0.0:
        prognostic_scores = prognostic_scores + rng.uniform(-jitter_prognosis, jitter_prognosis, len(rows))
    if jitter_propensity > 0.0:
        propensity_scores = propensity_scores + rng.uniform(-jitter_propensity, jitter_propensity, len(rows))

    row_ids = strata.analysis_set.row_id[rows]
    return [FisherMillPoint(int(r), Group.Treated if t else Group.Control, float(p), float(g))
            for r, t, p, g in zip(row_ids, treated, propensity_scores, prognostic_scores)]


def residual_data(model: FittedGlm, df: DataFrame) -> ResidualTable:
    return ResidualTable(df.row_id.copy(), predict(model, df),
                         residuals(model, df, ResidualKind.Response),
                         residuals(model, df, ResidualKind.Pearson),
                         residuals(model, df, ResidualKind.Deviance))


## Rendering

PlotData = Union[List[SizeRatioPoint], HistogramData, List[FisherMillPoint], ResidualTable]


def _render_size_ratio(ax, points: List[SizeRatioPoint], thresholds: Thresholds):
    totals = np.array([p.total for p in points], dtype=float)
    x_max = max(float(totals.max()) * 1.2, thresholds.too_few * 2.0)
    add_zone_shading(ax, x_max, thresholds.too_few, thresholds.too_many, thresholds.ratio)
    ax.scatter(totals, [p.control_proportion for p in points], color='black', s=12, zorder=3)
    for p in points:
        ax.annotate(str(p.stratum), (p.total, p.control_proportion), textcoords='offset points', xytext=(3, 3),
                    fontsize=7)
    add_titles_to_axis(ax, "Stratum size vs. control proportion", "Control proportion", "Stratum size",
                       legend=False)


def _render_histogram(ax, data: HistogramData):
    add_stacked_histogram_data_to_axis(ax, data.bin_edges, ['treated', 'control'],
                                       {'treated': data.treated_counts, 'control': data.control_counts})
    add_titles_to_axis(ax, f"Propensity scores in stratum {data.stratum}", "Count", "Propensity score")


def _render_fisher_mill(ax, points: List[FisherMillPoint]):
    for group, colour in ((Group.Control, 'tab:blue'), (Group.Treated, 'tab:orange')):
        members = [p for p in points if p.group is group]
        ax.scatter([p.prognosis for p in members], [p.propensity for p in members], s=6, color=colour,
                   label=group.value)
    add_titles_to_axis(ax, "Fisher-Mill plot", "Propensity score", "Prognostic score")


def _render_residuals(ax, table: ResidualTable):
    ax.scatter(table.fitted, table.deviance, s=6, color='black')
    ax.axhline(0.0, color='grey', linewidth=0.8)
    add_titles_to_axis(ax, "Residuals vs. fitted", "Deviance residual", "Fitted value", legend=False)


def render_svg(plot: PlotData, filename: str, thresholds: Optional[Thresholds] = None):
    """
    Write a static svg of any of the plot data kinds. The same data always gives
    the same bytes.
    """
    if isinstance(plot, HistogramData):
        fig, ax = new_figure()
        _render_histogram(ax, plot)
    elif isinstance(plot, ResidualTable):
        fig, ax = new_figure()
        _render_residuals(ax, plot)
    elif plot and isinstance(plot[0], SizeRatioPoint):
        fig, ax = new_figure()
        _render_size_ratio(ax, plot, thresholds or Thresholds())
    elif plot and isinstance(plot[0], FisherMillPoint):
        fig, ax = new_figure()
        _render_fisher_mill(ax, plot)
    else:
        raise ValueError(f"Nothing to render in {type(plot).__name__}")
    try:
        save_svg(fig, filename)
    except OSError as e:
        raise IoError(f"Could not write {filename}: {e}")


## CSV export

def write_size_ratio_csv(points: Sequence[SizeRatioPoint], filename: str):
    pd.DataFrame({'stratum': [p.stratum for p in points],
                  'total': [p.total for p in points],
                  'control_proportion': np.array([p.control_proportion for p in points], dtype=np.float64),
                  'zone': [p.zone.value for p in points]}).to_csv(filename, index=False,
                                                                 float_format=CSV_FLOAT_FORMAT)


def write_histogram_csv(data: HistogramData, filename: str):
    pd.DataFrame({'stratum': np.full(len(data.treated_counts), data.stratum),
                  'bin_lo': np.asarray(data.bin_edges[:-1], dtype=np.float64),
                  'bin_hi': np.asarray(data.bin_edges[1:], dtype=np.float64),
                  'treated': np.asarray(data.treated_counts, dtype=np.int64),
                  'control': np.asarray(data.control_counts, dtype=np.int64)}).to_csv(
        filename, index=False, float_format=CSV_FLOAT_FORMAT)


def write_fisher_mill_csv(points: Sequence[FisherMillPoint], filename: str):
    pd.DataFrame({ROW_ID_COLUMN: [p.row_id for p in points],
                  'group': [p.group.value for p in points],
                  'propensity': np.array([p.propensity for p in points], dtype=np.float64),
                  'prognosis': np.array([p.prognosis for p in points], dtype=np.float64)}).to_csv(
        filename, index=False, float_format=CSV_FLOAT_FORMAT)


def write_residual_csv(table: ResidualTable, filename: str):
    pd.DataFrame({ROW_ID_COLUMN: np.asarray(table.row_id, dtype=np.int64),
                  'fitted': table.fitted,
                  'response_residual': table.response,
                  'pearson_residual': table.pearson,
                  'deviance_residual': table.deviance}).to_csv(filename, index=False, float_format=CSV_FLOAT_FORMAT)


class UnknownStratum(StratamatchError):
    pass


class NoPrognosticScores(StratamatchError):
    pass


class IoError(StratamatchError):
    pass
