#!/usr/bin/env python3

from collections import deque
from concurrent.futures import ThreadPoolExecutor
from enum import Enum
from fractions import Fraction
import json
import warnings
import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment
from typing import Dict, List, Optional, Sequence, Tuple, Union

from dataset import ColumnKind, ColumnSchema, DataFrame, Formula, FormulaSyntaxError, ROW_ID_COLUMN, parse_formula, \
                    require_binary_treatment
from glm import FittedGlm, fit_logistic, predict
from stratifier import STRATUM_COLUMN, AutoStrata, ManualStrata, ScoreLengthMismatch, Thresholds, stratum_labels
from utils import CSV_FLOAT_FORMAT, StratamatchError, clamped_logit


Strata = Union[AutoStrata, ManualStrata]

LOGIT_RESOLUTION = 1e-10
UNREACHED = -2
TAKES_COLUMN = -1


class PropensityMode(Enum):
    Formula = 1
    FittedModel = 2
    Scores = 3


class PropensityInput:
    """
    How propensity scores are obtained: a logistic model formula fit on the
    analysis set, an already fitted model, or the scores themselves.
    """

    def __init__(self, mode: PropensityMode, payload):
        self.mode = mode
        self.payload = payload

    def __repr__(self):
        if self.mode is PropensityMode.Scores:
            return f"PropensityInput(Scores, {len(self.payload)} values)"
        return f"PropensityInput({self.mode.name}, {self.payload})"

    @staticmethod
    def from_formula(formula: Union[Formula, str]) -> 'PropensityInput':
        if isinstance(formula, str):
            formula = parse_formula(formula)
        if formula.lhs is None:
            raise FormulaSyntaxError(f"Propensity formula '{formula}' must name the treatment on the left hand side")
        return PropensityInput(PropensityMode.Formula, formula)

    @staticmethod
    def from_model(model: FittedGlm) -> 'PropensityInput':
        return PropensityInput(PropensityMode.FittedModel, model)

    @staticmethod
    def from_scores(scores: Sequence[float]) -> 'PropensityInput':
        return PropensityInput(PropensityMode.Scores, np.asarray(scores, dtype=np.float64).reshape(-1))


def _with_stratum_factor(strata: Strata) -> DataFrame:
    """
    The analysis set with its stratum column recoded as a categorical, for fixed effects.
    """
    labels = stratum_labels(strata.analysis_set)
    levels = tuple(str(s) for s in np.unique(labels))
    return strata.analysis_set.with_column(ColumnSchema(STRATUM_COLUMN, ColumnKind.Categorical, levels),
                                           [str(s) for s in labels])


def propensity_model(strata: Strata, formula: Union[Formula, str], stratum_effects: bool = True,
                     thresholds: Optional[Thresholds] = None, print_debug_messages: bool = True) -> FittedGlm:
    """
    Logistic propensity model fit on the analysis set. With stratum_effects the
    stratum enters as a categorical term, adding one column per stratum after the first.
    """
    thresholds = thresholds or Thresholds()
    if isinstance(formula, str):
        formula = parse_formula(formula)
    if formula.lhs != strata.treat:
        raise FormulaSyntaxError(f"Propensity formula '{formula}' must have the treatment {strata.treat} "
                                 f"on the left hand side")
    if stratum_effects:
        if print_debug_messages:
            print(f"Fitting propensity model: {formula} + strata({STRATUM_COLUMN})")
        return fit_logistic(_with_stratum_factor(strata), formula.with_terms([STRATUM_COLUMN]),
                            thresholds.glm_tol, thresholds.glm_max_iter)
    if print_debug_messages:
        print(f"Fitting propensity model: {formula}")
    return fit_logistic(strata.analysis_set, formula, thresholds.glm_tol, thresholds.glm_max_iter)


def fit_propensity(strata: Strata, propensity: PropensityInput, stratum_effects: bool = True,
                   thresholds: Optional[Thresholds] = None, print_debug_messages: bool = True) -> np.ndarray:
    """
    Propensity scores for the rows of the analysis set.
    """
    n_rows = strata.analysis_set.n_rows
    if propensity.mode is PropensityMode.Scores:
        scores = propensity.payload
        if len(scores) != n_rows:
            raise ScoreLengthMismatch(f"Got {len(scores)} propensity scores for {n_rows} analysis set rows")
        if not np.all((scores >= 0.0) & (scores <= 1.0)):
            raise ValueError("Propensity scores must lie in [0, 1]")
        return scores

    if propensity.mode is PropensityMode.FittedModel:
        model = propensity.payload
        frame = _with_stratum_factor(strata) if STRATUM_COLUMN in model.formula.rhs_terms else strata.analysis_set
        return predict(model, frame)

    model = propensity_model(strata, propensity.payload, stratum_effects, thresholds, print_debug_messages)
    frame = _with_stratum_factor(strata) if stratum_effects else strata.analysis_set
    return predict(model, frame)


def matching_costs(treated_scores: Sequence[float], control_scores: Sequence[float]) -> np.ndarray:
    """
    Distance |logit(p_t) - logit(p_c)| between every treated and control score.
    """
    treated_logit = clamped_logit(treated_scores)
    control_logit = clamped_logit(control_scores)
    return np.abs(treated_logit[:, None] - control_logit[None, :])


def _grid_costs(treated_scores: Sequence[float], control_scores: Sequence[float]) -> np.ndarray:
    """
    matching_costs in units of LOGIT_RESOLUTION, with the logits rounded to that
    grid first. All costs are integers, so sums are exact and matchings that tie
    on the line of logits (|a - b| + |b - c| = |a - c|) tie exactly.
    """
    treated = np.rint(clamped_logit(treated_scores) / LOGIT_RESOLUTION)
    controls = np.rint(clamped_logit(control_scores) / LOGIT_RESOLUTION)
    return np.abs(treated[:, None] - controls[None, :])


def _tight_edges(cost: np.ndarray, assigned: np.ndarray) -> np.ndarray:
    """
    Edges of zero reduced cost under an optimal dual of the square assignment
    problem with integer costs, given an optimal assignment. The optimal
    assignments are exactly the perfect matchings made of these edges.
    """
    n = len(assigned)
    own = cost[np.arange(n), assigned]
    # handover[a, b]: change in cost when row b takes the column of row a
    handover = cost[:, assigned].T - own[:, None]
    potential = np.zeros(n)
    for _ in range(n):
        relaxed = np.minimum(potential, (potential[:, None] + handover).min(axis=0))
        if np.array_equal(relaxed, potential):
            break
        potential = relaxed
    column_potential = np.empty(n)
    column_potential[assigned] = own - potential
    return cost - potential[:, None] - column_potential[None, :] < 0.5


def _rows_reaching(column: int, row: int, assigned: np.ndarray, tight: np.ndarray, fixed: np.ndarray) -> np.ndarray:
    """
    Rows which can give up their column and set off a chain of moves along
    tight edges ending in some row taking `column`. For each such row the next
    row of its chain, or TAKES_COLUMN when it takes `column` itself; UNREACHED
    for the rest. `row` and fixed rows never move.
    """
    successor = np.full(len(assigned), UNREACHED, dtype=np.int64)
    blocked = fixed.copy()
    blocked[row] = True
    queue = deque()
    first = np.flatnonzero(tight[:, column] & ~blocked)
    successor[first] = TAKES_COLUMN
    blocked[first] = True
    queue.extend(first)
    while queue:
        x = queue.popleft()
        takers = np.flatnonzero(tight[:, assigned[x]] & ~blocked)
        successor[takers] = x
        blocked[takers] = True
        queue.extend(takers)
    return successor


def _lexicographic_assignment(cost: np.ndarray, group_size: int = 1) -> np.ndarray:
    """
    Minimal cost assignment of the rows of an integer cost matrix to distinct
    columns: every row is assigned when there are no more rows than columns,
    every column otherwise. Among all minimal assignments it returns the one
    whose columns, read row by row, are lexicographically smallest, an
    assigned row coming before an unassigned one. Rows come in consecutive
    groups of group_size copies of one unit, and a unit's columns are read in
    increasing order.

    Returns the column of every row, -1 for unassigned rows.
    """
    n_rows, n_cols = cost.shape
    n = max(n_rows, n_cols)
    square = np.zeros((n, n))
    square[:n_rows, :n_cols] = cost
    rows, cols = linear_sum_assignment(square)
    assigned = np.empty(n, dtype=np.int64)
    assigned[rows] = cols
    holder = np.empty(n, dtype=np.int64)
    holder[assigned] = np.arange(n)
    tight = _tight_edges(square, assigned)
    fixed = np.zeros(n, dtype=bool)

    for row in range(n_rows):
        group = np.arange(row - row % group_size, row - row % group_size + group_size)
        loose = group[~fixed[group]]
        assigned[loose] = np.sort(assigned[loose])
        holder[assigned[loose]] = loose

        # any dummy column (index n_cols and up) stands for leaving the row unassigned
        target = assigned[row]
        candidates = np.flatnonzero(tight[row, :min(target, n_cols)])
        if len(candidates):
            successor = _rows_reaching(target, row, assigned, tight, fixed)
            for column in candidates:
                x = holder[column]
                if successor[x] == UNREACHED:
                    continue
                moves = [(row, column)]
                while True:
                    following = successor[x]
                    moves.append((x, target if following == TAKES_COLUMN else assigned[following]))
                    if following == TAKES_COLUMN:
                        break
                    x = following
                for r, c in moves:
                    assigned[r] = c
                    holder[c] = r
                break
        fixed[row] = True

    result = assigned[:n_rows].copy()
    result[result >= n_cols] = -1
    return result


def optimal_k_match(treated_scores: Sequence[float], control_scores: Sequence[float], k: int) -> List[Tuple[int, int]]:
    """
    Give every treated unit exactly k distinct controls so that the total
    propensity logit distance over matched pairs is minimal.

    Solved exactly as an assignment problem in which each treated unit appears
    k times. Logits are compared on a grid of LOGIT_RESOLUTION. Among the
    minimal matchings the one returned is the lexicographically smallest list
    of (treated index, control index) pairs, which is how the pairs come back
    sorted.
    """
    if k < 1:
        raise ValueError(f"Need k >= 1, got {k}")
    n_treated, n_control = len(treated_scores), len(control_scores)
    if n_treated == 0:
        return []
    if n_control < k * n_treated:
        raise Infeasible(f"Cannot match {n_treated} treated units to {k} controls each with only {n_control} controls")

    cost = np.repeat(_grid_costs(treated_scores, control_scores), k, axis=0)
    columns = _lexicographic_assignment(cost, k)
    return sorted((r // k, int(c)) for r, c in enumerate(columns))


def _partial_match(treated_scores: np.ndarray, control_scores: np.ndarray) -> List[Tuple[int, int]]:
    """
    Minimal cost 1:1 matching of as many treated units as there are controls,
    ties broken as in optimal_k_match.
    """
    if len(control_scores) == 0:
        return []
    columns = _lexicographic_assignment(_grid_costs(treated_scores, control_scores))
    return [(r, int(c)) for r, c in enumerate(columns) if c >= 0]


def effective_sample_size(set_structure: Dict[str, int]) -> float:
    """
    Equivalent number of matched pairs: a set with t treated and c controls
    counts as 2 / (1/t + 1/c). Shapes with no treated or no controls count 0.
    """
    total = Fraction(0)
    for shape, count in set_structure.items():
        t, c = (int(x) for x in shape.split(':'))
        if t == 0 or c == 0:
            continue
        total += Fraction(2 * t * c * count, t + c)
    return float(total)


def match_summary_text(set_structure: Dict[str, int]) -> str:
    shapes = list(set_structure)
    counts = [str(set_structure[s]) for s in shapes]
    widths = [max(len(s), len(c)) for s, c in zip(shapes, counts)]
    return "\n".join(["Structure of matched sets:",
                      " ".join(s.rjust(w) for s, w in zip(shapes, widths)) + " ",
                      " ".join(c.rjust(w) for c, w in zip(counts, widths)) + " ",
                      f"Effective Sample Size:  {effective_sample_size(set_structure):.7g} ",
                      "(equivalent number of matched pairs)."])


class _StratumMatch:
    def __init__(self, stratum: int, sets: List[Tuple[int, List[int]]], unmatched_treated: int,
                 unmatched_controls: int, messages: List[Tuple[type, str]]):
        self.stratum = stratum
        self.sets = sets
        self.unmatched_treated = unmatched_treated
        self.unmatched_controls = unmatched_controls
        self.messages = messages


def _match_stratum(stratum: int, rows: np.ndarray, treatment: np.ndarray, scores: np.ndarray,
                   k: int) -> _StratumMatch:
    """
    rows: positions of the stratum's rows, in row_id order.
    Returns matched sets as (treated position, control positions).
    """
    treated = rows[treatment[rows] == 1]
    controls = rows[treatment[rows] == 0]
    t_s, c_s = len(treated), len(controls)
    messages = []
    if t_s == 0:
        return _StratumMatch(stratum, [], 0, c_s, messages)

    k_s = min(k, c_s // t_s)
    if k_s >= 1:
        if k_s < k:
            messages.append((DegradedRatioWarning,
                             f"Stratum {stratum}: {c_s} controls for {t_s} treated, matching 1:{k_s} instead of 1:{k}"))
        pairs = optimal_k_match(scores[treated], scores[controls], k_s)
    else:
        messages.append((InsufficientControlsWarning,
                         f"Stratum {stratum}: {c_s} controls for {t_s} treated, "
                         f"{t_s - c_s} treated units left unmatched"))
        pairs = _partial_match(scores[treated], scores[controls])

    grouped: Dict[int, List[int]] = {}
    for t, c in pairs:
        grouped.setdefault(t, []).append(int(controls[c]))
    sets = [(int(treated[t]), sorted(grouped[t])) for t in sorted(grouped)]
    n_matched_controls = sum(len(c) for _, c in sets)
    return _StratumMatch(stratum, sets, t_s - len(sets), c_s - n_matched_controls, messages)


class MatchResult:
    """
    set_labels: for every analysis set row its matched set label "<stratum>.<n>", or None
    set_structure: number of sets of each "treated:controls" shape, with unmatched
                   controls counted as "0:1" and unmatched treated units as "1:0"
    """

    def __init__(self, row_id: np.ndarray, strata: np.ndarray, treatment: np.ndarray, propensity_scores: np.ndarray,
                 set_labels: List[Optional[str]], k: int, set_structure: Dict[str, int], warnings: List[str]):
        self.row_id = row_id
        self.strata = strata
        self.treatment = treatment
        self.propensity_scores = propensity_scores
        self.set_labels = set_labels
        self.k = k
        self.set_structure = set_structure
        self.effective_pairs = effective_sample_size(set_structure)
        self.warnings = warnings

    def matched_sets(self) -> Dict[str, Tuple[int, List[int]]]:
        """
        Map from set label to (treated row_id, control row_ids).
        """
        sets: Dict[str, Tuple[int, List[int]]] = {}
        for i, label in enumerate(self.set_labels):
            if label is None:
                continue
            treated, controls = sets.get(label, (None, []))
            if self.treatment[i] == 1:
                treated = int(self.row_id[i])
            else:
                controls = controls + [int(self.row_id[i])]
            sets[label] = (treated, controls)
        return sets

    def summary(self) -> str:
        return match_summary_text(self.set_structure)

    def to_json(self) -> str:
        return json.dumps({'k': self.k, 'set_structure': self.set_structure,
                           'effective_pairs': self.effective_pairs, 'warnings': self.warnings}, indent=2)


def _shape_order(shape: str) -> Tuple[int, int]:
    t, c = (int(x) for x in shape.split(':'))
    if t == 1 and c > 0:
        return 0, c
    return (1, 0) if t == 1 else (2, 0)


def strata_match(strata: Strata, propensity: PropensityInput, k: int = 1, stratum_effects: bool = True,
                 threads: int = 1, thresholds: Optional[Thresholds] = None,
                 print_debug_messages: bool = True) -> MatchResult:
    """
    Optimal 1:k propensity score matching within each stratum.

    A stratum with fewer than k controls per treated unit is matched at the
    largest feasible ratio, and one with more treated units than controls
    matches as many treated units 1:1 as it can. Both cases raise a warning
    naming the stratum. Strata are matched independently on `threads` threads.
    """
    if k < 1:
        raise ValueError(f"Need k >= 1, got {k}")
    if threads < 1:
        raise ValueError(f"Need at least one thread, got {threads}")
    analysis_set = strata.analysis_set
    labels = stratum_labels(analysis_set)
    treatment = require_binary_treatment(analysis_set, strata.treat)
    scores = fit_propensity(strata, propensity, stratum_effects, thresholds, print_debug_messages)

    order = np.argsort(analysis_set.row_id, kind='stable')
    stratum_ids = [int(s) for s in np.unique(labels)]
    tasks = [(s, order[labels[order] == s]) for s in stratum_ids]
    with ThreadPoolExecutor(max_workers=threads) as executor:
        results = list(executor.map(lambda task: _match_stratum(task[0], task[1], treatment, scores, k), tasks))

    set_labels: List[Optional[str]] = [None] * analysis_set.n_rows
    structure: Dict[str, int] = {}
    recorded_warnings = []
    unmatched_treated = unmatched_controls = 0
    for result in results:
        for n, (treated, controls) in enumerate(result.sets, start=1):
            label = f"{result.stratum}.{n}"
            set_labels[treated] = label
            for c in controls:
                set_labels[c] = label
            shape = f"1:{len(controls)}"
            structure[shape] = structure.get(shape, 0) + 1
        unmatched_treated += result.unmatched_treated
        unmatched_controls += result.unmatched_controls
        for category, message in result.messages:
            warnings.warn(message, category, stacklevel=2)
            recorded_warnings.append(f"{category.__name__[:-len('Warning')]}: {message}")

    if unmatched_treated:
        structure['1:0'] = unmatched_treated
    if unmatched_controls:
        structure['0:1'] = unmatched_controls
    structure = {shape: structure[shape] for shape in sorted(structure, key=_shape_order)}

    result = MatchResult(analysis_set.row_id, labels, treatment, scores, set_labels, k, structure, recorded_warnings)
    if print_debug_messages:
        print(f"n_sets={sum(n for s, n in structure.items() if s.startswith('1:') and s != '1:0')} "
              f"effective_pairs={result.effective_pairs:.7g}")
    return result


def write_matches_csv(result: MatchResult, filename: str):
    order = np.argsort(result.row_id, kind='stable')
    pd.DataFrame({ROW_ID_COLUMN: np.asarray(result.row_id, dtype=np.int64)[order],
                  STRATUM_COLUMN: np.asarray(result.strata, dtype=np.int64)[order],
                  'treat': np.asarray(result.treatment, dtype=np.int64)[order],
                  'propensity_score': np.asarray(result.propensity_scores, dtype=np.float64)[order],
                  'set_label': [result.set_labels[i] or '' for i in order]}).to_csv(
        filename, index=False, float_format=CSV_FLOAT_FORMAT)


def write_match_summary_json(result: MatchResult, filename: str):
    with open(filename, 'w') as file:
        file.write(result.to_json())


class DegradedRatioWarning(UserWarning):
    pass


class InsufficientControlsWarning(UserWarning):
    pass


class Infeasible(StratamatchError):
    pass
