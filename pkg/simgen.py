#!/usr/bin/env python3

import numpy as np

from dataset import ColumnKind, ColumnSchema, DataFrame
from utils import make_rng, sigmoid


# Generating process for the sample data. The constants were calibrated by
# simulation: at n = 10000 the treated fraction is ~0.20 and a logistic fit of
# outcome ~ X1 + X2 on the controls gives an X1 coefficient of about -1.08.
TREAT_INTERCEPT = -1.55
TREAT_X1 = 0.4
TREAT_X2 = 0.3
TREAT_B1 = 0.2
OUTCOME_X1 = -1.1
OUTCOME_X2 = 0.1
OUTCOME_B2 = 0.3
OUTCOME_TREAT = 0.25
C1_LEVELS = ('a', 'b', 'c')


class SimConfig:
    def __init__(self, n: int, seed: int = 0):
        if n < 1:
            raise ValueError(f"Need at least one row of sample data, got n = {n}")
        self.n: int = int(n)
        self.seed: int = int(seed)

    def __repr__(self):
        return f"SimConfig(n={self.n}, seed={self.seed})"


def make_sample_data(cfg: SimConfig) -> DataFrame:
    """
    A simulated observational data set with columns
    X1, X2 (numeric), B1, B2 (binary), C1 (categorical a/b/c), treat and outcome (binary).

    X1, X2 ~ N(0, 1); B1, B2 ~ Bernoulli(0.5); C1 uniform on {a, b, c}
    treat ~ Bernoulli(sigmoid(-1.55 + 0.4 X1 + 0.3 X2 + 0.2 B1))
    outcome ~ Bernoulli(sigmoid(-1.1 X1 + 0.1 X2 + 0.3 B2 + 0.25 treat))

    Draws come from a Philox generator seeded with cfg.seed, in a fixed order, so
    the same (n, seed) always gives the same frame.
    """
    rng = make_rng(cfg.seed)
    n = cfg.n
    x1 = rng.standard_normal(n)
    x2 = rng.standard_normal(n)
    b1 = (rng.random(n) < 0.5).astype(np.int64)
    b2 = (rng.random(n) < 0.5).astype(np.int64)
    c1 = np.array(C1_LEVELS, dtype=object)[rng.integers(0, len(C1_LEVELS), n)]

    treat_p = sigmoid(TREAT_INTERCEPT + TREAT_X1 * x1 + TREAT_X2 * x2 + TREAT_B1 * b1)
    treat = (rng.random(n) < treat_p).astype(np.int64)
    outcome_p = sigmoid(OUTCOME_X1 * x1 + OUTCOME_X2 * x2 + OUTCOME_B2 * b2 + OUTCOME_TREAT * treat)
    outcome = (rng.random(n) < outcome_p).astype(np.int64)

    schemas = [ColumnSchema('X1', ColumnKind.Numeric),
               ColumnSchema('X2', ColumnKind.Numeric),
               ColumnSchema('B1', ColumnKind.Binary),
               ColumnSchema('B2', ColumnKind.Binary),
               ColumnSchema('C1', ColumnKind.Categorical, C1_LEVELS),
               ColumnSchema('treat', ColumnKind.Binary),
               ColumnSchema('outcome', ColumnKind.Binary)]
    return DataFrame(schemas, [x1, x2, b1, b2, c1, treat, outcome])
