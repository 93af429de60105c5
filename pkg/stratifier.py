#!/usr/bin/env python3

from dataclasses import dataclass
from enum import Enum
import json
import math
import os
import warnings
import numpy as np
import pandas as pd
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

from dataset import ColumnKind, ColumnSchema, DataFrame, Formula, NonBinaryTreatment, ROW_ID_COLUMN, load_csv, \
                    parse_formula, require_binary_treatment, write_csv
from glm import DEFAULT_MAX_ITERATIONS, DEFAULT_TOLERANCE, FittedGlm, fit_logistic, fit_ols, load_glm, predict, \
                save_glm
from sampler import split_pilot_set
from utils import CSV_FLOAT_FORMAT, StratamatchError


STRATUM_COLUMN = 'stratum'
BIN_LABEL_DIGITS = 5


class Thresholds:
    """
    too_few: strata with fewer rows than this are flagged
    too_many: strata with more rows than this are flagged
    ratio: a stratum with ratio or more controls per treated row (or vice versa) is flagged
    glm_tol, glm_max_iter: logistic regression convergence settings
    n_bins: default number of propensity histogram bins
    """

    # config file variable name -> (attribute, converter)
    config_names = {
        'too few samples': ('too_few', int),
        'too many samples': ('too_many', int),
        'imbalance ratio': ('ratio', float),
        'glm tolerance': ('glm_tol', float),
        'glm max iterations': ('glm_max_iter', int),
        'histogram bins': ('n_bins', int),
    }

    def __init__(self, too_few: int = 75, too_many: int = 5000, ratio: float = 4.0,
                 glm_tol: float = DEFAULT_TOLERANCE, glm_max_iter: int = DEFAULT_MAX_ITERATIONS, n_bins: int = 20):
        if ratio <= 1.0:
            raise ValueError(f"The imbalance ratio must exceed 1, got {ratio}")
        if too_few < 0 or too_many < too_few:
            raise ValueError(f"Need 0 <= too_few <= too_many, got {too_few} and {too_many}")
        self.too_few = too_few
        self.too_many = too_many
        self.ratio = ratio
        self.glm_tol = glm_tol
        self.glm_max_iter = glm_max_iter
        self.n_bins = n_bins

    def __repr__(self):
        return (f"Thresholds(too_few={self.too_few}, too_many={self.too_many}, ratio={self.ratio}, "
                f"glm_tol={self.glm_tol}, glm_max_iter={self.glm_max_iter}, n_bins={self.n_bins})")

    def __eq__(self, other):
        return isinstance(other, Thresholds) and vars(self) == vars(other)

    def with_overrides(self, **overrides) -> 'Thresholds':
        values = dict(vars(self))
        values.update({k: v for k, v in overrides.items() if v is not None})
        return Thresholds(**values)

    @staticmethod
    def from_config(config: Dict[str, Dict[str, Any]], section: str = 'all') -> 'Thresholds':
        """
        Entries of the named section take precedence over those of section 'all'.
        """
        entries = dict(config.get('all', {}))
        entries.update(config.get(section.lower(), {}))
        overrides = {}
        for name, value in entries.items():
            if name not in Thresholds.config_names:
                raise ValueError(f"Unrecognised threshold '{name}' in config")
            attribute, convert = Thresholds.config_names[name]
            overrides[attribute] = convert(value)
        return Thresholds().with_overrides(**overrides)


class IssueFlag(Enum):
    TooFewSamples = "Too few samples"
    TooManySamples = "Too many samples"
    NotEnoughTreated = "Not enough treated samples"
    NotEnoughControl = "Not enough control samples"


def issue_flags(treat: int, control: int, total: int, thresholds: Optional[Thresholds] = None) -> Tuple[IssueFlag, ...]:
    """
    The flags of one stratum, in rendering order.
    """
    thresholds = thresholds or Thresholds()
    flags = []
    if total < thresholds.too_few:
        flags.append(IssueFlag.TooFewSamples)
    if total > thresholds.too_many:
        flags.append(IssueFlag.TooManySamples)
    if control >= thresholds.ratio * treat:
        flags.append(IssueFlag.NotEnoughTreated)
    if treat >= thresholds.ratio * control:
        flags.append(IssueFlag.NotEnoughControl)
    return tuple(flags)


def render_issues(flags: Sequence[IssueFlag]) -> str:
    if not flags:
        return "none"
    return "; ".join(f.value for f in flags)


@dataclass(frozen=True)
class StrataTableRow:
    """
    Auto strata carry a prognostic score bin [bin_lo, bin_hi), closed on the right
    when bin_closed. Manual strata carry the covariate values defining the stratum.
    """
    stratum: int
    size: int
    bin_lo: Optional[float] = None
    bin_hi: Optional[float] = None
    bin_closed: bool = False
    covariate_values: Optional[Tuple[Tuple[str, str], ...]] = None

    @property
    def quantile_bin(self) -> str:
        if self.covariate_values is not None:
            return ", ".join(f"{name}={value}" for name, value in self.covariate_values)
        close = ']' if self.bin_closed else ')'
        return f"[{self.bin_lo:.{BIN_LABEL_DIGITS}g},{self.bin_hi:.{BIN_LABEL_DIGITS}g}{close}"

    def contains(self, score: float) -> bool:
        if score < self.bin_lo:
            return False
        return score <= self.bin_hi if self.bin_closed else score < self.bin_hi


@dataclass(frozen=True)
class IssueTableRow:
    stratum: int
    treat: int
    control: int
    total: int
    control_proportion: float
    potential_issues: Tuple[IssueFlag, ...]

    @property
    def potential_issues_text(self) -> str:
        return render_issues(self.potential_issues)


def quantile_bin(scores: Sequence[float], n_strata: int, print_debug_messages: bool = False) \
        -> Tuple[np.ndarray, List[StrataTableRow]]:
    """
    Cut scores at their empirical quantiles i / n_strata, i = 1 .. n_strata - 1
    (linear interpolation between order statistics). A score equal to a cut point
    goes into the lower bin, so equal scores always share a stratum, and with
    distinct scores every bin holds floor(n / n_strata) or ceil(n / n_strata).

    The interpolated quantile at i / n_strata lies between the order statistics
    of rank r = floor((n - 1) i / n_strata) and r + 1, so a score falls at or
    below it exactly when it is at most the rank r score. Cutting at that order
    statistic in integer arithmetic keeps rounding out of the bin sizes.

    When ties make cut points coincide the empty bins are dropped and the strata
    renumbered 1 .. m, with a DegenerateScoresWarning.

    Returns the stratum of every score and the table of bins, where stratum k's
    bin runs from the smallest score in k up to the smallest score in k + 1.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if n_strata < 1:
        raise ValueError(f"Need at least one stratum, got {n_strata}")
    if not np.all(np.isfinite(scores)):
        raise ValueError("Scores must be finite")
    n = len(scores)
    if n < n_strata:
        raise TooManyStrata(f"Cannot cut {n} scores into {n_strata} strata")

    ranks = (n - 1) * np.arange(1, n_strata, dtype=np.int64) // n_strata
    cuts = np.sort(scores)[ranks]
    raw = np.searchsorted(cuts, scores, side='left')
    used, assignments = np.unique(raw, return_inverse=True)
    assignments = assignments.reshape(-1).astype(np.int64) + 1
    m = len(used)
    if m < n_strata:
        warnings.warn(f"Tied prognostic scores collapse {n_strata} requested strata into {m}",
                      DegenerateScoresWarning, stacklevel=2)
        if print_debug_messages:
            print(f"degenerate_scores requested={n_strata} strata={m}")
    return assignments, _bin_table(scores, assignments)


def _bin_table(scores: np.ndarray, assignments: np.ndarray) -> List[StrataTableRow]:
    n_strata = int(assignments.max()) if len(assignments) else 0
    lows = [float(scores[assignments == k].min()) for k in range(1, n_strata + 1)]
    rows = []
    for k in range(1, n_strata + 1):
        size = int(np.sum(assignments == k))
        if k < n_strata:
            rows.append(StrataTableRow(k, size, lows[k - 1], lows[k], False))
        else:
            rows.append(StrataTableRow(k, size, lows[k - 1], float(scores.max()), True))
    return rows


def issue_table(analysis_set: DataFrame, treat: str, thresholds: Optional[Thresholds] = None) -> List[IssueTableRow]:
    if not analysis_set.has_column(STRATUM_COLUMN):
        raise NoStratumColumn(f"The analysis set has no '{STRATUM_COLUMN}' column")
    thresholds = thresholds or Thresholds()
    treatment = require_binary_treatment(analysis_set, treat)
    strata = stratum_labels(analysis_set)

    rows = []
    for s in np.unique(strata):
        in_stratum = strata == s
        total = int(np.sum(in_stratum))
        n_treat = int(np.sum(treatment[in_stratum]))
        n_control = total - n_treat
        rows.append(IssueTableRow(int(s), n_treat, n_control, total, n_control / total,
                                  issue_flags(n_treat, n_control, total, thresholds)))
    return rows


def stratum_labels(analysis_set: DataFrame) -> np.ndarray:
    if not analysis_set.has_column(STRATUM_COLUMN):
        raise NoStratumColumn(f"The analysis set has no '{STRATUM_COLUMN}' column")
    return np.asarray(analysis_set.column(STRATUM_COLUMN)).astype(np.int64)


def _with_strata(df: DataFrame, assignments: np.ndarray) -> DataFrame:
    return df.with_column(ColumnSchema(STRATUM_COLUMN, ColumnKind.Numeric), assignments.astype(np.float64))


def _size_summary(strata_table: List[StrataTableRow]) -> str:
    sizes = [r.size for r in strata_table]
    return f"Number of strata: {len(sizes)} \n\n\tMin size: {min(sizes)} \tMax size: {max(sizes)}"


def _call_text(function: str, call_record: Dict[str, Any]) -> str:
    unquoted = ('data', 'prognosis', 'strata_formula', 'pilot_sample')
    arguments = ", ".join(f'{k} = "{v}"' if isinstance(v, str) and k not in unquoted else f"{k} = {v}"
                          for k, v in call_record.items())
    return f"{function}({arguments})"


class AutoStrata:
    """
    analysis_set: the input rows outside the pilot set, with the stratum column appended last
    pilot_set: rows used to fit the prognostic model, None when scores were supplied
    prognostic_model: None when scores were supplied
    prognostic_scores: aligned with the rows of analysis_set
    """

    kind = 'auto'

    def __init__(self, analysis_set: DataFrame, pilot_set: Optional[DataFrame], prognostic_model: Optional[FittedGlm],
                 prognostic_scores: np.ndarray, strata_table: List[StrataTableRow], issue_table: List[IssueTableRow],
                 call_record: Dict[str, Any], treat: str, outcome: Optional[str],
                 prognosis_formula: Optional[Formula] = None, warnings: Optional[List[str]] = None):
        self.analysis_set = analysis_set
        self.pilot_set = pilot_set
        self.prognostic_model = prognostic_model
        self.prognostic_scores = np.asarray(prognostic_scores, dtype=np.float64)
        self.strata_table = strata_table
        self.issue_table = issue_table
        self.call_record = call_record
        self.treat = treat
        self.outcome = outcome
        self.prognosis_formula = prognosis_formula
        self.warnings = list(warnings or [])

    @property
    def n_strata(self) -> int:
        return len(self.strata_table)

    def report(self) -> str:
        lines = ["auto_strata object from package stratamatch.", "",
                 "Function call:", _call_text('auto_stratify', self.call_record), "",
                 f"Analysis set dimensions: {self.analysis_set.dimensions()}", ""]
        if self.pilot_set is not None:
            lines += [f"Pilot set dimensions: {self.pilot_set.dimensions()}", ""]
        if self.prognosis_formula is not None:
            lines += ["Prognostic Score Formula:", self.prognosis_formula.to_text(), ""]
        lines.append(_size_summary(self.strata_table))
        return "\n".join(lines)


class ManualStrata:
    kind = 'manual'
    pilot_set = None
    prognostic_model = None
    prognostic_scores = None

    def __init__(self, analysis_set: DataFrame, strata_table: List[StrataTableRow], issue_table: List[IssueTableRow],
                 call_record: Dict[str, Any], treat: str, strata_formula: Optional[Formula]):
        self.analysis_set = analysis_set
        self.strata_table = strata_table
        self.issue_table = issue_table
        self.call_record = call_record
        self.treat = treat
        self.strata_formula = strata_formula
        self.warnings: List[str] = []

    @property
    def n_strata(self) -> int:
        return len(self.strata_table)

    def report(self) -> str:
        lines = ["manual_strata object from package stratamatch.", "",
                 "Function call:", _call_text('manual_stratify', self.call_record), "",
                 f"Analysis set dimensions: {self.analysis_set.dimensions()}", "",
                 _size_summary(self.strata_table)]
        return "\n".join(lines)


def strata_from_analysis_set(analysis_set: DataFrame, treat: str, thresholds: Optional[Thresholds] = None) -> ManualStrata:
    """
    Wrap an analysis set which already carries a stratum column, e.g. one read
    back from a file written by an earlier run.
    """
    assignments = stratum_labels(analysis_set)
    strata_table = [StrataTableRow(int(s), int(np.sum(assignments == s)), covariate_values=())
                    for s in np.unique(assignments)]
    return ManualStrata(analysis_set, strata_table, issue_table(analysis_set, treat, thresholds),
                        {'data': 'analysis_set'}, treat, None)


def _fit_prognostic_model(pilot_set: DataFrame, treat: str, formula: Formula, thresholds: Thresholds,
                          print_debug_messages: bool) -> FittedGlm:
    if pilot_set.has_column(treat):
        pilot_set = pilot_set.filter(require_binary_treatment(pilot_set, treat) == 0)
    if pilot_set.schema(formula.lhs).kind is ColumnKind.Binary:
        if print_debug_messages:
            print(f"Fitting prognostic model via logistic regression: {formula}")
        return fit_logistic(pilot_set, formula, thresholds.glm_tol, thresholds.glm_max_iter)
    if print_debug_messages:
        print(f"Fitting prognostic model via linear regression: {formula}")
    return fit_ols(pilot_set, formula)


def auto_stratify(df: DataFrame, treat: str, prognosis: Union[Formula, str, Sequence[float]],
                  outcome: Optional[str] = None, size: int = 2500, pilot_fraction: float = 0.1,
                  pilot_sample: Optional[DataFrame] = None, group_by_covariates: Optional[Sequence[str]] = None,
                  seed: int = 0, thresholds: Optional[Thresholds] = None,
                  print_debug_messages: bool = True) -> AutoStrata:
    """
    Stratify on prognostic score quantiles into strata of about size rows.

    prognosis is either a formula, in which case the prognostic model is fit on
    the controls of a pilot set (pilot_sample, or a pilot_fraction subsample of
    the controls of df), or a vector of prognostic scores for the rows of df,
    in which case outcome must name the outcome column.
    """
    thresholds = thresholds or Thresholds()
    require_binary_treatment(df, treat)
    if isinstance(size, bool) or int(size) != size or size < 1:
        raise BadSize(f"Stratum size must be a positive integer, got {size}")
    size = int(size)
    recorded_warnings = []

    if isinstance(prognosis, str):
        prognosis = parse_formula(prognosis)

    if isinstance(prognosis, Formula):
        if prognosis.lhs is None:
            raise MissingOutcome(f"Prognostic formula '{prognosis}' names no outcome")
        outcome = prognosis.lhs
        call_record = {'data': 'data', 'treat': treat, 'prognosis': prognosis.to_text()}
        if pilot_sample is not None:
            if print_debug_messages:
                print("Using user-specified set for prognostic score modeling.")
            analysis_set, pilot_set = df, pilot_sample
            call_record['pilot_sample'] = 'pilot_sample'
        else:
            split = split_pilot_set(df, treat, pilot_fraction, group_by_covariates, seed, print_debug_messages)
            analysis_set, pilot_set = split.analysis_set, split.pilot_set
            call_record['pilot_fraction'] = pilot_fraction
            call_record['seed'] = seed
            if group_by_covariates:
                call_record['group_by_covariates'] = list(group_by_covariates)
        model = _fit_prognostic_model(pilot_set, treat, prognosis, thresholds, print_debug_messages)
        scores = predict(model, analysis_set)
    else:
        if outcome is None:
            raise MissingOutcome("Supplying prognostic scores requires naming the outcome column")
        scores = np.asarray(prognosis, dtype=np.float64).reshape(-1)
        if len(scores) != df.n_rows:
            raise ScoreLengthMismatch(f"Got {len(scores)} prognostic scores for {df.n_rows} analysis set rows")
        if not np.all(np.isfinite(scores)):
            raise ValueError("Prognostic scores must be finite")
        analysis_set, pilot_set, model, prognosis = df, None, None, None
        call_record = {'data': 'data', 'treat': treat, 'prognosis': 'prognostic_scores', 'outcome': outcome}
    call_record['size'] = size

    n_analysis = analysis_set.n_rows
    if size >= n_analysis:
        message = f"Stratum size {size} is at least the {n_analysis} analysis set rows, using a single stratum"
        warnings.warn(message, SizeTooLargeWarning, stacklevel=2)
        recorded_warnings.append(f"SizeTooLarge: {message}")
    n_strata = max(1, math.ceil(n_analysis / size))

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter('always', DegenerateScoresWarning)
        assignments, strata_table = quantile_bin(scores, n_strata, print_debug_messages)
    for w in caught:
        if not issubclass(w.category, DegenerateScoresWarning):
            continue
        recorded_warnings.append(f"DegenerateScores: {w.message}")
        warnings.warn(w.message, w.category, stacklevel=2)

    analysis_set = _with_strata(analysis_set, assignments)
    issues = issue_table(analysis_set, treat, thresholds)
    if print_debug_messages:
        print(f"n_analysis={n_analysis} n_strata={len(strata_table)}")
    return AutoStrata(analysis_set, pilot_set, model, scores, strata_table, issues, call_record, treat, outcome,
                      prognosis, recorded_warnings)


def _category_codes(df: DataFrame, term: str) -> np.ndarray:
    schema = df.schema(term)
    values = df.column(term)
    if schema.kind is ColumnKind.Numeric:
        raise ContinuousStratifyingCovariate(f"Cannot stratify on continuous covariate {term}, "
                                             f"bin it into a categorical column first")
    if schema.kind is ColumnKind.Binary:
        return values.astype(np.int64)
    index = {level: i for i, level in enumerate(schema.levels)}
    return np.array([index[v] for v in values], dtype=np.int64)


def _manual_strata_table(df: DataFrame, terms: Sequence[str], assignments: np.ndarray) -> List[StrataTableRow]:
    rows = []
    for k in range(1, int(assignments.max()) + 1):
        members = np.flatnonzero(assignments == k)
        first = members[0]
        values = tuple((term, str(df.column(term)[first])) for term in terms)
        rows.append(StrataTableRow(k, len(members), covariate_values=values))
    return rows


def manual_stratify(df: DataFrame, strata_formula: Union[Formula, str], thresholds: Optional[Thresholds] = None,
                    print_debug_messages: bool = True) -> ManualStrata:
    """
    One stratum per observed combination of the (binary or categorical) right
    hand side covariates, numbered in sorted order of the combination. The left
    hand side names the treatment column. Every row is kept.
    """
    if isinstance(strata_formula, str):
        strata_formula = parse_formula(strata_formula)
    if strata_formula.lhs is None:
        raise NonBinaryTreatment(f"Strata formula '{strata_formula}' must name the treatment on the left hand side")
    treat = strata_formula.lhs
    require_binary_treatment(df, treat)

    codes = np.column_stack([_category_codes(df, term) for term in strata_formula.rhs_terms])
    _, assignments = np.unique(codes, axis=0, return_inverse=True)
    assignments = assignments.reshape(-1).astype(np.int64) + 1
    if print_debug_messages:
        print(f"n_rows={df.n_rows} n_strata={int(assignments.max())}")

    analysis_set = _with_strata(df, assignments)
    strata_table = _manual_strata_table(df, strata_formula.rhs_terms, assignments)
    issues = issue_table(analysis_set, treat, thresholds)
    call_record = {'data': 'data', 'strata_formula': strata_formula.to_text()}
    return ManualStrata(analysis_set, strata_table, issues, call_record, treat, strata_formula)


## Persistence

STRATA_RECORD = 'strata.json'
ANALYSIS_FILE = 'analysis.csv'
PILOT_FILE = 'pilot.csv'
STRATA_TABLE_FILE = 'strata_table.csv'
ISSUE_TABLE_FILE = 'issue_table.csv'
MODEL_FILE = 'prognostic_model.json'
SCORES_FILE = 'prognostic_scores.csv'


def write_strata_table(strata: Union[AutoStrata, ManualStrata], filename: str):
    rows = strata.strata_table
    table = {STRATUM_COLUMN: [row.stratum for row in rows]}
    if isinstance(strata, ManualStrata):
        terms = list(strata.strata_formula.rhs_terms) if strata.strata_formula else []
        for j, term in enumerate(terms):
            table[term] = [row.covariate_values[j][1] for row in rows]
    else:
        table['quantile_bin'] = [row.quantile_bin for row in rows]
    table['size'] = [row.size for row in rows]
    pd.DataFrame(table).to_csv(filename, index=False)


def write_issue_table(rows: List[IssueTableRow], filename: str):
    pd.DataFrame({'Stratum': [row.stratum for row in rows],
                  'Treat': [row.treat for row in rows],
                  'Control': [row.control for row in rows],
                  'Total': [row.total for row in rows],
                  'Control_Proportion': np.array([row.control_proportion for row in rows], dtype=np.float64),
                  'Potential_Issues': [row.potential_issues_text for row in rows]}).to_csv(
        filename, index=False, float_format=CSV_FLOAT_FORMAT)


def write_prognostic_scores(strata: AutoStrata, filename: str):
    pd.DataFrame({ROW_ID_COLUMN: strata.analysis_set.row_id,
                  'prognostic_score': np.asarray(strata.prognostic_scores, dtype=np.float64)}).to_csv(
        filename, index=False, float_format=CSV_FLOAT_FORMAT)


def write_strata(strata: Union[AutoStrata, ManualStrata], out_dir: str):
    os.makedirs(out_dir, exist_ok=True)
    write_csv(strata.analysis_set, os.path.join(out_dir, ANALYSIS_FILE))
    write_strata_table(strata, os.path.join(out_dir, STRATA_TABLE_FILE))
    write_issue_table(strata.issue_table, os.path.join(out_dir, ISSUE_TABLE_FILE))

    record = {'kind': strata.kind, 'treat': strata.treat, 'call_record': strata.call_record,
              'warnings': strata.warnings}
    if isinstance(strata, ManualStrata):
        record['strata_formula'] = strata.strata_formula.to_text() if strata.strata_formula else None
    else:
        record['outcome'] = strata.outcome
        record['prognosis'] = strata.prognosis_formula.to_text() if strata.prognosis_formula else None
        if strata.pilot_set is not None:
            write_csv(strata.pilot_set, os.path.join(out_dir, PILOT_FILE))
        if strata.prognostic_model is not None:
            save_glm(strata.prognostic_model, os.path.join(out_dir, MODEL_FILE))
        write_prognostic_scores(strata, os.path.join(out_dir, SCORES_FILE))

    with open(os.path.join(out_dir, STRATA_RECORD), 'w') as file:
        json.dump(record, file, indent=2)


def load_scores_csv(filename: str, analysis_set: DataFrame) -> np.ndarray:
    """
    Read a row_id,prognostic_score file and align it with the rows of analysis_set.
    A file without a row_id column must list the scores in analysis set order.
    """
    scores = load_csv(filename)
    if scores.n_columns != 1 or scores.schemas[0].kind is ColumnKind.Categorical:
        raise ScoreLengthMismatch(f"{filename} must hold a single numeric score column")
    values = scores.columns()[0].astype(np.float64)
    if len(values) != analysis_set.n_rows:
        raise ScoreLengthMismatch(f"{filename} has {len(values)} scores for {analysis_set.n_rows} analysis set rows")
    position = {int(r): i for i, r in enumerate(scores.row_id)}
    if set(position) == set(int(r) for r in analysis_set.row_id):
        return values[[position[int(r)] for r in analysis_set.row_id]]
    return values


def load_strata(in_dir: str, thresholds: Optional[Thresholds] = None) -> Union[AutoStrata, ManualStrata]:
    with open(os.path.join(in_dir, STRATA_RECORD)) as file:
        record = json.load(file)
    analysis_set = load_csv(os.path.join(in_dir, ANALYSIS_FILE))
    treat = record['treat']
    assignments = stratum_labels(analysis_set)
    issues = issue_table(analysis_set, treat, thresholds)

    if record['kind'] == 'manual':
        if not record.get('strata_formula'):
            return strata_from_analysis_set(analysis_set, treat, thresholds)
        formula = parse_formula(record['strata_formula'])
        strata_table = _manual_strata_table(analysis_set, formula.rhs_terms, assignments)
        return ManualStrata(analysis_set, strata_table, issues, record['call_record'], treat, formula)

    pilot_path = os.path.join(in_dir, PILOT_FILE)
    model_path = os.path.join(in_dir, MODEL_FILE)
    pilot_set = load_csv(pilot_path) if os.path.exists(pilot_path) else None
    model = load_glm(model_path) if os.path.exists(model_path) else None
    scores = load_scores_csv(os.path.join(in_dir, SCORES_FILE), analysis_set)
    prognosis = parse_formula(record['prognosis']) if record.get('prognosis') else None
    return AutoStrata(analysis_set, pilot_set, model, scores, _bin_table(scores, assignments), issues,
                      record['call_record'], treat, record.get('outcome'), prognosis, record.get('warnings'))


class SizeTooLargeWarning(UserWarning):
    pass


class DegenerateScoresWarning(UserWarning):
    pass


class TooManyStrata(StratamatchError):
    pass


class ScoreLengthMismatch(StratamatchError):
    pass


class MissingOutcome(StratamatchError):
    pass


class BadSize(StratamatchError):
    pass


class ContinuousStratifyingCovariate(StratamatchError):
    pass


class NoStratumColumn(StratamatchError):
    pass
