#!/usr/bin/env python3

from enum import Enum
import json
import warnings
import numpy as np
from scipy.linalg import qr, solve_triangular
from scipy.special import expit, log_expit
from typing import Dict, List, Union

from dataset import ColumnKind, DataFrame, DesignMatrix, Formula, design_matrix, parse_formula
from utils import PROBABILITY_CLAMP, StratamatchError


DEFAULT_TOLERANCE = 1e-8
DEFAULT_MAX_ITERATIONS = 25
RANK_TOLERANCE = 1e-7
SEPARATION_LINEAR_PREDICTOR = 30.0
SATURATION = 1e-10
MIN_IRLS_WEIGHT = 1e-12


class GlmFamily(Enum):
    Linear = 1
    Logistic = 2


class ResidualKind(Enum):
    Response = 1
    Pearson = 2
    Deviance = 3


class FittedGlm:
    """
    A fitted linear or logistic regression.
    coefficients: aligned with column_labels, the labels of the design matrix
                  implied by the formula and level_catalog.
    level_catalog: for each categorical term, the levels seen at fit time. The first
                   is the reference level.
    deviance: residual sum of squares (linear) or binomial deviance (logistic).
    """

    def __init__(self, family: GlmFamily, formula: Formula, coefficients: np.ndarray, column_labels: List[str],
                 level_catalog: Dict[str, List[str]], iterations: int, converged: bool, deviance: float,
                 null_deviance: float, n_obs: int):
        if len(coefficients) != len(column_labels):
            raise ValueError("Need one coefficient per design matrix column")
        self._family = family
        self._formula = formula
        self._coefficients = np.array(coefficients, dtype=np.float64)
        self._coefficients.setflags(write=False)
        self._column_labels = list(column_labels)
        self._level_catalog = {k: list(v) for k, v in level_catalog.items()}
        self._iterations = iterations
        self._converged = converged
        self._deviance = deviance
        self._null_deviance = null_deviance
        self._n_obs = n_obs

    def __repr__(self):
        return f"FittedGlm({self._family.name}, {self._formula}, converged={self._converged})"

    @property
    def family(self) -> GlmFamily:
        return self._family

    @property
    def formula(self) -> Formula:
        return self._formula

    @property
    def coefficients(self) -> np.ndarray:
        return self._coefficients

    @property
    def column_labels(self) -> List[str]:
        return list(self._column_labels)

    @property
    def level_catalog(self) -> Dict[str, List[str]]:
        return {k: list(v) for k, v in self._level_catalog.items()}

    @property
    def iterations(self) -> int:
        return self._iterations

    @property
    def converged(self) -> bool:
        return self._converged

    @property
    def deviance(self) -> float:
        return self._deviance

    @property
    def null_deviance(self) -> float:
        return self._null_deviance

    @property
    def n_obs(self) -> int:
        return self._n_obs

    def labeled_coefficients(self) -> Dict[str, float]:
        return {label: float(c) for label, c in zip(self._column_labels, self._coefficients)}

    def summary(self) -> str:
        family_name = "binomial" if self._family is GlmFamily.Logistic else "gaussian"
        s = "Call:\n"
        s += f"glm(formula = {self._formula}, family = \"{family_name}\")\n\n"
        s += "Coefficients:\n"
        width = max(len(label) for label in self._column_labels)
        s += f"{'':<{width}}  Estimate\n"
        for label, c in zip(self._column_labels, self._coefficients):
            s += f"{label:<{width}}  {c:.6g}\n"
        s += "\n"
        s += f"    Null deviance: {self._null_deviance:.2f}  on {self._n_obs - 1}  degrees of freedom\n"
        s += f"Residual deviance: {self._deviance:.2f}  on {self._n_obs - len(self._coefficients)}  degrees of freedom\n"
        if self._family is GlmFamily.Logistic:
            s += f"\nNumber of Fisher Scoring iterations: {self._iterations}\n"
        if not self._converged:
            s += "Warning: the fit did not converge.\n"
        return s

    def to_json(self) -> str:
        record = {
            'family': self._family.name.lower(),
            'formula': self._formula.to_text(),
            'coefficients': self.labeled_coefficients(),
            'level_catalog': self._level_catalog,
            'iterations': self._iterations,
            'converged': self._converged,
            'deviance': self._deviance,
            'null_deviance': self._null_deviance,
            'n_obs': self._n_obs,
        }
        return json.dumps(record, indent=2)

    @staticmethod
    def from_json(text: str) -> 'FittedGlm':
        record = json.loads(text)
        family = GlmFamily[record['family'].capitalize()]
        labels = list(record['coefficients'].keys())
        coefficients = np.array([record['coefficients'][label] for label in labels])
        return FittedGlm(family, parse_formula(record['formula']), coefficients, labels, record['level_catalog'],
                         record['iterations'], record['converged'], record['deviance'],
                         record['null_deviance'], record['n_obs'])


def save_glm(model: FittedGlm, filename: str):
    with open(filename, 'w') as file:
        file.write(model.to_json())


def load_glm(filename: str) -> FittedGlm:
    with open(filename) as file:
        return FittedGlm.from_json(file.read())


def _response(df: DataFrame, formula: Formula) -> np.ndarray:
    if formula.lhs is None:
        raise UnsupportedOutcome(f"Formula '{formula}' has no response variable")
    schema = df.schema(formula.lhs)
    if schema.kind is ColumnKind.Categorical:
        raise UnsupportedOutcome(f"Response {formula.lhs} is categorical, expected numeric or binary")
    return df.column(formula.lhs).astype(np.float64)


def _training_design(df: DataFrame, formula: Formula) -> DesignMatrix:
    # Only the levels which occur in the training rows are coded, so an absent
    # level never produces an all zero indicator column.
    catalog = {term: df.observed_levels(term) for term in formula.rhs_terms
               if df.has_column(term) and df.schema(term).kind is ColumnKind.Categorical}
    return design_matrix(df, formula.rhs_terms, True, catalog)


def _model_matrix(model: FittedGlm, df: DataFrame) -> np.ndarray:
    return design_matrix(df, model.formula.rhs_terms, True, model.level_catalog).values


def _check_full_rank(design: DesignMatrix):
    n, p = design.values.shape
    if n <= p:
        raise TooFewRows(f"Need more rows than the {p} model columns, got {n}")
    _, r, pivot = qr(design.values, mode='economic', pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > RANK_TOLERANCE * diag.max())) if diag.size else 0
    if rank < p:
        dropped = [design.column_labels[j] for j in pivot[rank:]]
        raise RankDeficient(f"Design matrix has rank {rank} < {p} columns, aliased columns: {dropped}")


def _least_squares(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    q, r = qr(x, mode='economic')
    return solve_triangular(r, q.T @ y)


def fit_ols(df: DataFrame, formula: Formula) -> FittedGlm:
    """
    Ordinary least squares via a QR decomposition of the design matrix.
    """
    y = _response(df, formula)
    design = _training_design(df, formula)
    _check_full_rank(design)

    beta = _least_squares(design.values, y)
    residual = y - design.values @ beta
    deviance = float(residual @ residual)
    null_deviance = float(np.sum((y - y.mean()) ** 2))
    return FittedGlm(GlmFamily.Linear, formula, beta, design.column_labels, design.level_catalog,
                     1, True, deviance, null_deviance, df.n_rows)


def _binomial_deviance(y: np.ndarray, eta: np.ndarray) -> float:
    return float(-2.0 * np.sum(y * log_expit(eta) + (1.0 - y) * log_expit(-eta)))


def _separation_detected(y: np.ndarray, eta: np.ndarray, beta_old: np.ndarray, beta_new: np.ndarray,
                         deviance_old: float, deviance_new: float) -> bool:
    if np.max(np.abs(eta)) <= SEPARATION_LINEAR_PREDICTOR:
        return False
    mu = expit(eta)
    saturated = ((mu < SATURATION) & (y == 0.0)) | ((mu > 1.0 - SATURATION) & (y == 1.0))
    if not np.any(saturated):
        return False
    diverging = np.linalg.norm(beta_new) > np.linalg.norm(beta_old)
    return diverging and deviance_new <= deviance_old


def fit_logistic(df: DataFrame, formula: Formula, tol: float = DEFAULT_TOLERANCE,
                 max_iter: int = DEFAULT_MAX_ITERATIONS) -> FittedGlm:
    """
    Logistic regression by iteratively reweighted least squares, starting from
    zero coefficients. Stops when the largest absolute coefficient update is
    below tol. Hitting max_iter returns an unconverged fit with a warning.
    """
    y = _response(df, formula)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise UnsupportedOutcome(f"Response {formula.lhs} must be binary for logistic regression")
    if len(y) == 0:
        raise TooFewRows("Cannot fit a logistic regression to an empty frame")
    if y.min() == y.max():
        raise SingleClassOutcome(f"Response {formula.lhs} only takes the value {int(y[0])}")

    design = _training_design(df, formula)
    _check_full_rank(design)
    x = design.values

    beta = np.zeros(x.shape[1])
    eta = x @ beta
    deviance = _binomial_deviance(y, eta)
    converged = False
    iterations = 0
    while iterations < max_iter:
        iterations += 1
        mu = expit(eta)
        w = np.maximum(mu * (1.0 - mu), MIN_IRLS_WEIGHT)
        z = eta + (y - mu) / w
        sqrt_w = np.sqrt(w)
        beta_new = _least_squares(x * sqrt_w[:, None], z * sqrt_w)
        eta_new = x @ beta_new
        deviance_new = _binomial_deviance(y, eta_new)

        if _separation_detected(y, eta_new, beta, beta_new, deviance, deviance_new):
            raise SeparationDetected(f"Fitted probabilities of {formula.lhs} saturate at 0 or 1 and the coefficients "
                                     f"diverge: the model '{formula}' perfectly separates the outcome")

        step = np.max(np.abs(beta_new - beta))
        beta, eta, deviance = beta_new, eta_new, deviance_new
        if step < tol:
            converged = True
            break

    if not converged:
        warnings.warn(f"Logistic regression '{formula}' did not converge in {max_iter} iterations",
                      NotConvergedWarning, stacklevel=2)

    null_deviance = _binomial_deviance(y, np.full(len(y), np.log(y.mean() / (1.0 - y.mean()))))
    return FittedGlm(GlmFamily.Logistic, formula, beta, design.column_labels, design.level_catalog,
                     iterations, converged, deviance, null_deviance, df.n_rows)


def linear_predictor(model: FittedGlm, df: DataFrame) -> np.ndarray:
    return _model_matrix(model, df) @ model.coefficients


def predict(model: FittedGlm, df: DataFrame) -> np.ndarray:
    """
    Fitted means for the rows of df. Logistic predictions are kept inside
    [PROBABILITY_CLAMP, 1 - PROBABILITY_CLAMP], so they stay strictly between 0
    and 1 however large the linear predictor.
    """
    eta = linear_predictor(model, df)
    if model.family is GlmFamily.Logistic:
        return np.clip(expit(eta), PROBABILITY_CLAMP, 1.0 - PROBABILITY_CLAMP)
    return eta


def residuals(model: FittedGlm, df: DataFrame, kind: Union[ResidualKind, str] = ResidualKind.Response) -> np.ndarray:
    if isinstance(kind, str):
        kind = ResidualKind[kind.capitalize()]
    y = _response(df, model.formula)
    eta = linear_predictor(model, df)

    if model.family is GlmFamily.Linear:
        return y - eta

    mu = expit(eta)
    response = y - mu
    if kind is ResidualKind.Response:
        return response
    if kind is ResidualKind.Pearson:
        return response / np.sqrt(mu * (1.0 - mu))
    unit_deviance = -2.0 * (y * log_expit(eta) + (1.0 - y) * log_expit(-eta))
    return np.sign(response) * np.sqrt(np.maximum(unit_deviance, 0.0))


def logistic_log_likelihood(beta: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    eta = x @ beta
    return float(np.sum(y * log_expit(eta) + (1.0 - y) * log_expit(-eta)))


def logistic_score(beta: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """
    Gradient of the logistic log likelihood with respect to beta.
    """
    return x.T @ (y - expit(x @ beta))


class NotConvergedWarning(UserWarning):
    pass


class RankDeficient(StratamatchError):
    pass


class TooFewRows(StratamatchError):
    pass


class SingleClassOutcome(StratamatchError):
    pass


class SeparationDetected(StratamatchError):
    pass


class UnsupportedOutcome(StratamatchError):
    pass
