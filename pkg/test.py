#!/usr/bin/env python3

from contextlib import redirect_stderr, redirect_stdout
import csv
from functools import lru_cache
import io
import itertools
import json
import math
from pathlib import Path
from tempfile import TemporaryDirectory
from unittest import TestCase, main
import warnings

import numpy as np

import dataset
import diagnostics
import glm
import matcher
import sampler
import simgen
import stratamatch_main
import stratifier
import utils
from dataset import ColumnKind, ColumnSchema, DataFrame


def make_frame(numeric=None, binary=None, categorical=None, row_id=None) -> DataFrame:
    schemas, columns = [], []
    for kind, group in ((ColumnKind.Numeric, numeric), (ColumnKind.Binary, binary),
                        (ColumnKind.Categorical, categorical)):
        for name, values in (group or {}).items():
            schemas.append(ColumnSchema(name, kind))
            columns.append(values)
    return DataFrame(schemas, columns, row_id)


def scored_strata(strata_labels, treat, row_id=None) -> stratifier.ManualStrata:
    df = make_frame(numeric={'stratum': np.asarray(strata_labels, dtype=float)},
                    binary={'treat': np.asarray(treat)}, row_id=row_id)
    return stratifier.strata_from_analysis_set(df, 'treat')


class UtilsTest(TestCase):
    def test_clamped_logit(self):
        self.assertAlmostEqual(float(utils.clamped_logit(0.5)), 0.0)
        self.assertTrue(np.isfinite(utils.clamped_logit(np.array([0.0, 1.0]))).all())
        self.assertAlmostEqual(float(utils.clamped_logit(1.0)), -float(utils.clamped_logit(0.0)), places=6)

    def test_central_difference_gradient(self):
        grad = utils.central_difference_gradient(lambda x: x[0] ** 2 + 3.0 * x[1], np.array([2.0, -1.0]))
        np.testing.assert_allclose(grad, [4.0, 3.0], atol=1e-6)

    def test_rng_is_replayable(self):
        a = utils.make_rng(11).random(5)
        b = utils.make_rng(11).random(5)
        np.testing.assert_array_equal(a, b)
        self.assertFalse(np.array_equal(a, utils.make_rng(12).random(5)))


class DatasetTest(TestCase):
    def setUp(self):
        self.temp_dir = TemporaryDirectory()
        self.temp_dir_path = Path(self.temp_dir.name)

    def tearDown(self):
        self.temp_dir.cleanup()

    def write_text(self, name: str, text: str) -> str:
        path = self.temp_dir_path / name
        path.write_text(text)
        return str(path)

    def test_load_csv_infers_column_kinds(self):
        path = self.write_text('d.csv', "x,b,c\n1.5,0,a\n-2,1,b\n3e2,1,a\n")
        df = dataset.load_csv(path)
        self.assertEqual(df.dimensions(), "3 X 3")
        self.assertIs(df.schema('x').kind, ColumnKind.Numeric)
        self.assertIs(df.schema('b').kind, ColumnKind.Binary)
        self.assertIs(df.schema('c').kind, ColumnKind.Categorical)
        self.assertEqual(df.schema('c').levels, ('a', 'b'))
        np.testing.assert_array_equal(df.column('x'), [1.5, -2.0, 300.0])
        np.testing.assert_array_equal(df.row_id, [0, 1, 2])

    def test_load_csv_errors(self):
        with self.assertRaises(dataset.RaggedRow):
            dataset.load_csv(self.write_text('ragged.csv', "x,y\n1,2\n3\n"))
        with self.assertRaises(dataset.TypeMismatch):
            dataset.load_csv(self.write_text('missing.csv', "x,y\n1,2\nNA,3\n"))
        with self.assertRaises(dataset.EmptyFile):
            dataset.load_csv(self.write_text('empty.csv', ""))
        with self.assertRaises(dataset.DuplicateColumn):
            dataset.load_csv(self.write_text('dup.csv', "x,x\n1,2\n"))
        with self.assertRaises(dataset.TypeMismatch):
            dataset.load_csv(self.write_text('typed.csv', "x\nabc\n"), [ColumnSchema('x', ColumnKind.Numeric)])

    def test_written_csv_keeps_row_ids(self):
        df = make_frame(numeric={'x': [0.1, 1.0 / 3.0, 2.0]}, binary={'t': [0, 1, 1]},
                        categorical={'c': ['u', 'v', 'u']}, row_id=[10, 20, 30])
        subset = df.take([2, 0, 1])
        path = str(self.temp_dir_path / 'subset.csv')
        dataset.write_csv(subset, path)
        loaded = dataset.load_csv(path)
        np.testing.assert_array_equal(loaded.row_id, [30, 10, 20])
        np.testing.assert_array_equal(loaded.column('x'), [2.0, 0.1, 1.0 / 3.0])
        self.assertTrue(loaded.equals(subset))

    def test_csv_round_trip_keeps_schema(self):
        schemas = [ColumnSchema('C1', ColumnKind.Categorical, ('a', 'b', 'c', 'unused')),
                   ColumnSchema('w', ColumnKind.Numeric),
                   ColumnSchema('code', ColumnKind.Categorical, ('2', '1')),
                   ColumnSchema('t', ColumnKind.Binary)]
        df = DataFrame(schemas, [['c', 'a', 'b'], [0.0, 1.0, 1.0], ['1', '2', '1'], [1, 0, 1]], row_id=[7, 3, 5])
        path = str(self.temp_dir_path / 'typed.csv')
        dataset.write_csv(df, path)
        loaded = dataset.load_csv(path)
        self.assertTrue(loaded.equals(df))
        self.assertEqual(loaded.schema('C1').levels, ('a', 'b', 'c', 'unused'))
        self.assertIs(loaded.schema('w').kind, ColumnKind.Numeric)
        self.assertEqual(loaded.schema('code').levels, ('2', '1'))
        self.assertEqual(dataset.design_matrix(loaded, ['C1']).column_labels,
                         ['(Intercept)', 'C1=b', 'C1=c', 'C1=unused'])

        # without the schema file kinds are inferred again
        Path(dataset.schema_path(path)).unlink()
        inferred = dataset.load_csv(path)
        self.assertEqual(inferred.schema('C1').levels, ('c', 'a', 'b'))
        self.assertIs(inferred.schema('w').kind, ColumnKind.Binary)
        self.assertIs(inferred.schema('code').kind, ColumnKind.Numeric)
        self.assertFalse(inferred.equals(df))

    def test_frame_is_backed_by_pandas(self):
        df = make_frame(numeric={'x': [0.5, 1.5, 2.5]}, categorical={'c': ['u', 'v', 'u']}, row_id=[4, 8, 6])
        frame = df.to_pandas()
        self.assertEqual(frame.index.name, 'row_id')
        self.assertEqual(list(frame.index), [4, 8, 6])
        self.assertEqual(list(frame['c'].cat.categories), ['u', 'v'])
        self.assertTrue(frame['c'].cat.ordered)
        subset = df.take([2, 0])
        np.testing.assert_array_equal(subset.row_id, [6, 4])
        self.assertEqual(subset.column('c').tolist(), ['u', 'u'])
        self.assertEqual(subset.schema('c').levels, ('u', 'v'))
        with self.assertRaises(dataset.TypeMismatch):
            DataFrame([ColumnSchema('c', ColumnKind.Categorical, ('u',))], [['u', 'w']])

    def test_frame_is_immutable(self):
        df = make_frame(numeric={'x': [1.0, 2.0]})
        with self.assertRaises(ValueError):
            df.column('x')[0] = 5.0

    def test_with_column_appends_last(self):
        df = make_frame(numeric={'x': [1.0, 2.0]}, binary={'t': [0, 1]})
        extended = df.with_column(ColumnSchema('s', ColumnKind.Numeric), [1.0, 2.0])
        self.assertEqual(extended.column_names, ['x', 't', 's'])
        replaced = extended.with_column(ColumnSchema('x', ColumnKind.Numeric), [5.0, 6.0])
        self.assertEqual(replaced.column_names, ['x', 't', 's'])
        np.testing.assert_array_equal(replaced.column('x'), [5.0, 6.0])

    def test_parse_formula(self):
        formula = dataset.parse_formula("outcome ~ X1 + X2")
        self.assertEqual(formula.lhs, 'outcome')
        self.assertEqual(formula.rhs_terms, ('X1', 'X2'))
        self.assertEqual(formula.to_text(), "outcome ~ X1 + X2")
        self.assertEqual(formula.with_terms(['stratum']).rhs_terms, ('X1', 'X2', 'stratum'))
        self.assertIsNone(dataset.parse_formula("~ a").lhs)

    def test_parse_formula_errors(self):
        for text in ["outcome X1", "y ~ ", "y ~ a +", "y ~ a * b"]:
            with self.assertRaises(dataset.FormulaSyntaxError):
                dataset.parse_formula(text)
        with self.assertRaises(dataset.DuplicateTerm):
            dataset.parse_formula("y ~ a + a")

    def test_design_matrix_dummy_codes_categoricals(self):
        df = make_frame(numeric={'x': [1.0, 2.0, 3.0]}, categorical={'c': ['a', 'b', 'c']})
        design = dataset.design_matrix(df, ['x', 'c'])
        self.assertEqual(design.column_labels, ['(Intercept)', 'x', 'c=b', 'c=c'])
        np.testing.assert_array_equal(design.values[:, 2], [0.0, 1.0, 0.0])
        np.testing.assert_array_equal(design.values[:, 3], [0.0, 0.0, 1.0])

    def test_design_matrix_unseen_level(self):
        df = make_frame(categorical={'C1': ['a', 'd']})
        with self.assertRaises(dataset.UnseenLevel) as context:
            dataset.design_matrix(df, ['C1'], level_catalog={'C1': ['a', 'b', 'c']})
        self.assertEqual(str(context.exception), "C1=d")
        with self.assertRaises(dataset.UnknownColumn):
            dataset.design_matrix(df, ['C2'])

    def test_require_binary_treatment(self):
        df = make_frame(numeric={'z': [0.0, 1.0], 'w': [0.5, 1.0]}, categorical={'c': ['x', 'y']})
        np.testing.assert_array_equal(dataset.require_binary_treatment(df, 'z'), [0, 1])
        for name in ['w', 'c']:
            with self.assertRaises(dataset.NonBinaryTreatment):
                dataset.require_binary_treatment(df, name)


class SimgenTest(TestCase):
    def test_sample_data_shape_and_determinism(self):
        a = simgen.make_sample_data(simgen.SimConfig(100, 7))
        b = simgen.make_sample_data(simgen.SimConfig(100, 7))
        self.assertEqual(a.dimensions(), "100 X 7")
        self.assertEqual(a.column_names, ['X1', 'X2', 'B1', 'B2', 'C1', 'treat', 'outcome'])
        self.assertTrue(a.equals(b))
        self.assertFalse(a.equals(simgen.make_sample_data(simgen.SimConfig(100, 8))))

    def test_treated_fraction(self):
        df = simgen.make_sample_data(simgen.SimConfig(10000, 1))
        fraction = float(np.mean(df.column('treat')))
        self.assertGreaterEqual(fraction, 0.18)
        self.assertLessEqual(fraction, 0.22)
        self.assertEqual(set(df.column('C1')), {'a', 'b', 'c'})


class SamplerTest(TestCase):
    def setUp(self):
        self.df = simgen.make_sample_data(simgen.SimConfig(5000, 3))

    def test_pilot_set_holds_only_controls(self):
        split = sampler.split_pilot_set(self.df, 'treat', 0.1, seed=1, print_debug_messages=False)
        self.assertTrue(np.all(split.pilot_set.column('treat') == 0))
        pilot_ids = set(split.pilot_set.row_id.tolist())
        analysis_ids = set(split.analysis_set.row_id.tolist())
        self.assertEqual(len(pilot_ids & analysis_ids), 0)
        self.assertEqual(pilot_ids | analysis_ids, set(self.df.row_id.tolist()))
        n_controls = int(np.sum(self.df.column('treat') == 0))
        self.assertAlmostEqual(split.pilot_set.n_rows / n_controls, 0.1, delta=0.02)
        self.assertEqual(int(np.sum(split.analysis_set.column('treat'))), int(np.sum(self.df.column('treat'))))

    def test_split_is_deterministic(self):
        a = sampler.split_pilot_set(self.df, 'treat', 0.1, seed=5, print_debug_messages=False)
        b = sampler.split_pilot_set(self.df, 'treat', 0.1, seed=5, print_debug_messages=False)
        self.assertTrue(a.pilot_set.equals(b.pilot_set))
        self.assertTrue(a.analysis_set.equals(b.analysis_set))

    def test_grouped_split_balances_each_cell(self):
        split = sampler.split_pilot_set(self.df, 'treat', 0.2, ['B1', 'C1'], seed=2, print_debug_messages=False)
        controls = self.df.filter(self.df.column('treat') == 0)
        for level in ['a', 'b', 'c']:
            in_cell = np.sum(controls.column('C1') == level)
            in_pilot = np.sum(split.pilot_set.column('C1') == level)
            self.assertAlmostEqual(in_pilot / in_cell, 0.2, delta=0.05)

    def test_split_errors(self):
        with self.assertRaises(sampler.ContinuousGroupingCovariate):
            sampler.split_pilot_set(self.df, 'treat', 0.1, ['X1'], print_debug_messages=False)
        for fraction in [0.0, 1.0, -0.5]:
            with self.assertRaises(sampler.BadFraction):
                sampler.split_pilot_set(self.df, 'treat', fraction, print_debug_messages=False)
        with self.assertRaises(dataset.NonBinaryTreatment):
            sampler.split_pilot_set(self.df, 'X1', 0.1, print_debug_messages=False)

    def test_grow_pilot_set_only_moves_controls(self):
        split = sampler.split_pilot_set(self.df, 'treat', 0.1, seed=1, print_debug_messages=False)
        grown = sampler.grow_pilot_set(split, 'treat', 0.1, seed=9, print_debug_messages=False)
        self.assertGreater(grown.pilot_set.n_rows, split.pilot_set.n_rows)
        self.assertTrue(set(split.pilot_set.row_id.tolist()) <= set(grown.pilot_set.row_id.tolist()))
        self.assertTrue(np.all(grown.pilot_set.column('treat') == 0))
        self.assertEqual(grown.pilot_set.n_rows + grown.analysis_set.n_rows, self.df.n_rows)
        self.assertTrue(np.all(np.diff(grown.pilot_set.row_id) > 0))


def newton_logistic(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    beta = np.zeros(x.shape[1])
    for _ in range(100):
        mu = 1.0 / (1.0 + np.exp(-(x @ beta)))
        gradient = x.T @ (y - mu)
        hessian = x.T @ (x * (mu * (1.0 - mu))[:, None])
        step = np.linalg.solve(hessian, gradient)
        beta = beta + step
        if np.max(np.abs(step)) < 1e-13:
            break
    return beta


class GlmTest(TestCase):
    def random_logistic_problem(self, seed: int):
        rng = utils.make_rng(seed)
        n = 80
        x1 = rng.standard_normal(n)
        x2 = rng.standard_normal(n)
        beta = rng.normal(0.0, 0.6, 3)
        p = 1.0 / (1.0 + np.exp(-(beta[0] + beta[1] * x1 + beta[2] * x2)))
        y = (rng.random(n) < p).astype(int)
        df = make_frame(numeric={'x1': x1, 'x2': x2}, binary={'y': y})
        return df, np.column_stack([np.ones(n), x1, x2]), y.astype(float)

    def test_logistic_matches_direct_likelihood_maximisation(self):
        for seed in range(50):
            df, x, y = self.random_logistic_problem(seed)
            model = glm.fit_logistic(df, dataset.parse_formula("y ~ x1 + x2"))
            self.assertTrue(model.converged)
            np.testing.assert_allclose(model.coefficients, newton_logistic(x, y), atol=1e-6)

    def test_ols_matches_normal_equations(self):
        rng = utils.make_rng(4)
        x1, x2 = rng.standard_normal(30), rng.standard_normal(30)
        y = 1.0 + 2.0 * x1 - 0.5 * x2 + rng.normal(0.0, 0.3, 30)
        df = make_frame(numeric={'x1': x1, 'x2': x2, 'y': y})
        model = glm.fit_ols(df, dataset.parse_formula("y ~ x1 + x2"))
        x = np.column_stack([np.ones(30), x1, x2])
        np.testing.assert_allclose(model.coefficients, np.linalg.solve(x.T @ x, x.T @ y), atol=1e-8)
        self.assertIs(model.family, glm.GlmFamily.Linear)

    def test_score_matches_finite_differences(self):
        df, x, y = self.random_logistic_problem(99)
        model = glm.fit_logistic(df, dataset.parse_formula("y ~ x1 + x2"))
        np.testing.assert_allclose(glm.logistic_score(model.coefficients, x, y), 0.0, atol=1e-6)

        beta = model.coefficients + np.array([0.3, -0.2, 0.1])
        analytic = glm.logistic_score(beta, x, y)
        numeric = utils.central_difference_gradient(lambda b: glm.logistic_log_likelihood(b, x, y), beta)
        np.testing.assert_allclose(numeric, analytic, rtol=1e-4, atol=1e-6)

    def test_symmetric_data_gives_one_half(self):
        df = make_frame(numeric={'x': [0.0, 0.0, 1.0, 1.0]}, binary={'y': [0, 1, 0, 1]})
        model = glm.fit_logistic(df, dataset.parse_formula("y ~ x"))
        np.testing.assert_allclose(glm.predict(model, df), 0.5, atol=1e-12)

    def test_logistic_predictions_stay_inside_unit_interval(self):
        model = glm.FittedGlm(glm.GlmFamily.Logistic, dataset.parse_formula("y ~ x"), np.array([0.0, 1.0]),
                              ['(Intercept)', 'x'], {}, 1, True, 0.0, 0.0, 3)
        df = make_frame(numeric={'x': [-800.0, 0.0, 800.0]}, binary={'y': [0, 1, 1]})
        p = glm.predict(model, df)
        self.assertTrue(np.all(p > 0.0))
        self.assertTrue(np.all(p < 1.0))
        self.assertEqual(p[0], utils.PROBABILITY_CLAMP)
        self.assertEqual(p[2], 1.0 - utils.PROBABILITY_CLAMP)
        self.assertAlmostEqual(p[1], 0.5, places=12)
        self.assertTrue(np.all(np.isfinite(utils.clamped_logit(p))))

    def test_separation_detected(self):
        x = np.linspace(-3.0, 3.0, 60)
        df = make_frame(numeric={'x': x}, binary={'y': (x > 0.0).astype(int)})
        with self.assertRaises(glm.SeparationDetected):
            glm.fit_logistic(df, dataset.parse_formula("y ~ x"))

    def test_fit_errors(self):
        x = np.arange(10.0)
        df = make_frame(numeric={'x': x, 'x2': 2.0 * x}, binary={'y': [0, 1] * 5, 'ones': [1] * 10},
                        categorical={'c': ['a', 'b'] * 5})
        with self.assertRaises(glm.RankDeficient):
            glm.fit_logistic(df, dataset.parse_formula("y ~ x + x2"))
        with self.assertRaises(glm.SingleClassOutcome):
            glm.fit_logistic(df, dataset.parse_formula("ones ~ x"))
        with self.assertRaises(glm.UnsupportedOutcome):
            glm.fit_logistic(df, dataset.parse_formula("x ~ x2"))
        with self.assertRaises(glm.UnsupportedOutcome):
            glm.fit_ols(df, dataset.parse_formula("c ~ x"))
        with self.assertRaises(glm.TooFewRows):
            glm.fit_ols(df.take([0, 1]), dataset.parse_formula("x ~ y + c"))

    def test_not_converged_warning(self):
        df, _, _ = self.random_logistic_problem(3)
        with self.assertWarns(glm.NotConvergedWarning):
            model = glm.fit_logistic(df, dataset.parse_formula("y ~ x1 + x2"), max_iter=1)
        self.assertFalse(model.converged)

    def test_predict_unseen_level(self):
        rng = utils.make_rng(8)
        train = make_frame(numeric={'x': rng.standard_normal(40)}, binary={'y': [0, 1, 1, 0] * 10},
                           categorical={'C1': ['a', 'b'] * 20})
        model = glm.fit_logistic(train, dataset.parse_formula("y ~ x + C1"))
        self.assertEqual(model.level_catalog, {'C1': ['a', 'b']})
        test = make_frame(numeric={'x': [0.0]}, binary={'y': [0]}, categorical={'C1': ['d']})
        with self.assertRaises(dataset.UnseenLevel) as context:
            glm.predict(model, test)
        self.assertEqual(str(context.exception), "C1=d")

    def test_model_json(self):
        df, _, _ = self.random_logistic_problem(12)
        model = glm.fit_logistic(df, dataset.parse_formula("y ~ x1 + x2"))
        restored = glm.FittedGlm.from_json(model.to_json())
        np.testing.assert_array_equal(glm.predict(restored, df), glm.predict(model, df))
        self.assertEqual(restored.column_labels, ['(Intercept)', 'x1', 'x2'])
        self.assertIn("Residual deviance", model.summary())

    def test_residual_identities(self):
        df, _, _ = self.random_logistic_problem(21)
        model = glm.fit_logistic(df, dataset.parse_formula("y ~ x1 + x2"))
        deviance_residuals = glm.residuals(model, df, 'deviance')
        self.assertAlmostEqual(float(np.sum(deviance_residuals ** 2)), model.deviance, places=8)

        x = np.arange(8.0)
        exact = make_frame(numeric={'x': x, 'y': 3.0 - 2.0 * x})
        linear = glm.fit_ols(exact, dataset.parse_formula("y ~ x"))
        np.testing.assert_allclose(glm.residuals(linear, exact), 0.0, atol=1e-10)


# (treat, control, total, printed Potential_Issues)
SIMULATED_ISSUE_TABLE = [
    (167, 319, 486, "none"), (149, 337, 486, "none"), (160, 326, 486, "none"), (132, 354, 486, "none"),
    (123, 363, 486, "none"), (122, 364, 486, "none"), (146, 340, 486, "none"), (109, 377, 486, "none"),
    (131, 355, 486, "none"), (132, 354, 486, "none"), (111, 375, 486, "none"), (108, 378, 486, "none"),
    (112, 374, 486, "none"), (122, 364, 486, "none"), (100, 386, 486, "none"), (109, 377, 486, "none"),
    (114, 372, 486, "none"), (107, 379, 486, "none"), (85, 401, 486, "Not enough treated samples"),
]

ICU_ISSUE_TABLE = [
    (761, 2553, 3314, "none"),
    (212, 672, 884, "none"),
    (1, 17, 18, "Too few samples; Not enough treated samples"),
    (13, 67, 80, "Not enough treated samples"),
    (56, 205, 261, "none"),
    (65, 286, 351, "Not enough treated samples"),
    (29, 226, 255, "Not enough treated samples"),
    (174, 563, 737, "none"),
    (508, 1842, 2350, "none"),
    (158, 470, 628, "none"),
    (4, 13, 17, "Too few samples"),
    (15, 54, 69, "Too few samples"),
    (37, 194, 231, "Not enough treated samples"),
    (46, 195, 241, "Not enough treated samples"),
    (16, 173, 189, "Not enough treated samples"),
    (131, 401, 532, "none"),
]

ICU_RACE_COLUMNS = ['RaceAsian', 'RaceUnknown', 'RaceOther', 'RaceBlack', 'RacePacificIslander',
                    'RaceNativeAmerican', 'all_latinos']


def icu_shaped_frame(seed: int = 0) -> DataFrame:
    """
    Rows whose (Female, race indicator) cells, taken in sorted order, have the
    treated and control counts of ICU_ISSUE_TABLE.
    """
    # race indicator set in each cell, in sorted order of the indicator vector
    race_order = [None, 6, 5, 4, 3, 2, 1, 0]
    cells = [(female, race) for female in (0, 1) for race in race_order]
    female, races, treat = [], [], []
    for (cell_female, cell_race), (n_treat, n_control, _, _) in zip(cells, ICU_ISSUE_TABLE):
        for t in [1] * n_treat + [0] * n_control:
            female.append(cell_female)
            races.append(cell_race)
            treat.append(t)
    order = utils.make_rng(seed).permutation(len(treat))
    binary = {'surgicalTeam': np.array(treat)[order], 'Female': np.array(female)[order]}
    races = [races[i] for i in order]
    for j, name in enumerate(ICU_RACE_COLUMNS):
        binary[name] = np.array([1 if r == j else 0 for r in races])
    age = utils.make_rng(seed + 1).uniform(18.0, 90.0, len(treat))
    return make_frame(numeric={'age': age}, binary=binary)


def type7_quantile(sorted_scores: np.ndarray, p: float) -> float:
    h = (len(sorted_scores) - 1) * p
    lo = int(math.floor(h))
    hi = min(lo + 1, len(sorted_scores) - 1)
    return sorted_scores[lo] + (h - lo) * (sorted_scores[hi] - sorted_scores[lo])


class StratifierTest(TestCase):
    def setUp(self):
        self.temp_dir = TemporaryDirectory()
        self.temp_dir_path = Path(self.temp_dir.name)

    def tearDown(self):
        self.temp_dir.cleanup()

    def test_simulated_issue_table_flags(self):
        for n_treat, n_control, total, printed in SIMULATED_ISSUE_TABLE:
            flags = stratifier.issue_flags(n_treat, n_control, total)
            self.assertEqual(stratifier.render_issues(flags), printed)

    def test_icu_issue_table_flags(self):
        for n_treat, n_control, total, printed in ICU_ISSUE_TABLE:
            flags = stratifier.issue_flags(n_treat, n_control, total)
            self.assertEqual(stratifier.render_issues(flags), printed)

    def test_issue_flags_control_side_and_size(self):
        flags = stratifier.issue_flags(5000, 1001, 6001)
        self.assertEqual(stratifier.render_issues(flags), "Too many samples; Not enough control samples")
        self.assertEqual(stratifier.issue_flags(20, 60, 80), ())

    def test_quantile_bin_median_split(self):
        assignments, table = stratifier.quantile_bin(np.arange(1.0, 11.0), 2)
        np.testing.assert_array_equal(assignments, [1] * 5 + [2] * 5)
        self.assertEqual([r.size for r in table], [5, 5])
        self.assertEqual(table[0].quantile_bin, "[1,6)")
        self.assertEqual(table[1].quantile_bin, "[6,10]")

    def test_quantile_bin_equal_sizes(self):
        for n_analysis, sizes in [(9234, {486}), (9364, {492, 493})]:
            n_strata = math.ceil(n_analysis / 500)
            self.assertEqual(n_strata, 19)
            scores = utils.make_rng(n_analysis).random(n_analysis)
            assignments, table = stratifier.quantile_bin(scores, n_strata)
            self.assertEqual(len(table), 19)
            self.assertEqual({r.size for r in table}, sizes)
            self.assertEqual(sum(r.size for r in table), n_analysis)

    def test_quantile_bin_ties_match_rank_oracle(self):
        for seed in range(10):
            scores = utils.make_rng(seed).integers(0, 12, 100).astype(float)
            with warnings.catch_warnings():
                warnings.simplefilter('ignore', stratifier.DegenerateScoresWarning)
                assignments, table = stratifier.quantile_bin(scores, 4)
            ordered = np.sort(scores)
            cuts = [type7_quantile(ordered, i / 4) for i in range(1, 4)]
            raw = np.array([sum(1 for c in cuts if c < s) for s in scores])
            expected = np.searchsorted(np.unique(raw), raw) + 1
            np.testing.assert_array_equal(assignments, expected)

            for s in np.unique(scores):
                self.assertEqual(len(set(assignments[scores == s])), 1)
            order = np.argsort(scores, kind='stable')
            self.assertTrue(np.all(np.diff(assignments[order]) >= 0))
            for score, stratum in zip(scores, assignments):
                self.assertTrue(table[stratum - 1].contains(score))

    def test_quantile_bin_sizes_differ_by_at_most_one(self):
        rng = utils.make_rng(77)
        cases = [(44, 43), (10, 3), (7, 7), (1000, 19)]
        cases += [(n, int(rng.integers(1, n + 1))) for n in rng.integers(2, 400, 200)]
        for n, n_strata in cases:
            scores = rng.standard_normal(n)
            self.assertEqual(len(np.unique(scores)), n)
            with warnings.catch_warnings():
                warnings.simplefilter('error', stratifier.DegenerateScoresWarning)
                assignments, table = stratifier.quantile_bin(scores, n_strata)
            self.assertEqual(len(table), n_strata, (n, n_strata))
            self.assertLessEqual({r.size for r in table}, {n // n_strata, math.ceil(n / n_strata)}, (n, n_strata))
            self.assertEqual(sum(r.size for r in table), n)
            np.testing.assert_array_equal(np.bincount(assignments)[1:], [r.size for r in table])

    def test_quantile_bin_degenerate_and_errors(self):
        with self.assertWarns(stratifier.DegenerateScoresWarning):
            assignments, table = stratifier.quantile_bin(np.full(50, 0.3), 5)
        self.assertEqual(len(table), 1)
        self.assertTrue(np.all(assignments == 1))
        with self.assertRaises(stratifier.TooManyStrata):
            stratifier.quantile_bin(np.arange(3.0), 4)

    def test_auto_stratify_with_scores(self):
        n = 9234
        rng = utils.make_rng(1)
        df = make_frame(binary={'treat': (rng.random(n) < 0.2).astype(int), 'outcome': rng.integers(0, 2, n)})
        strata = stratifier.auto_stratify(df, 'treat', rng.random(n), outcome='outcome', size=500,
                                          print_debug_messages=False)
        self.assertEqual(strata.n_strata, 19)
        self.assertIsNone(strata.pilot_set)
        self.assertEqual(strata.analysis_set.column_names[-1], 'stratum')
        report = strata.report()
        self.assertIn("Analysis set dimensions: 9234 X 3", report)
        self.assertIn("Number of strata: 19", report)
        self.assertIn("Min size: 486 \tMax size: 486", report)
        self.assertEqual(sum(r.total for r in strata.issue_table), n)

    def test_auto_stratify_with_constant_scores(self):
        df = make_frame(binary={'treat': [0, 1] * 50, 'outcome': [1, 0] * 50})
        with self.assertWarns(stratifier.DegenerateScoresWarning):
            strata = stratifier.auto_stratify(df, 'treat', np.zeros(100), outcome='outcome', size=10,
                                              print_debug_messages=False)
        self.assertEqual(strata.n_strata, 1)
        self.assertTrue(any(w.startswith("DegenerateScores") for w in strata.warnings))

    def test_auto_stratify_with_formula(self):
        df = simgen.make_sample_data(simgen.SimConfig(3000, 2))
        strata = stratifier.auto_stratify(df, 'treat', "outcome ~ X1 + X2", size=500, pilot_fraction=0.1, seed=4,
                                          print_debug_messages=False)
        self.assertTrue(np.all(strata.pilot_set.column('treat') == 0))
        self.assertEqual(strata.pilot_set.n_rows + strata.analysis_set.n_rows, 3000)
        self.assertEqual(strata.n_strata, math.ceil(strata.analysis_set.n_rows / 500))
        np.testing.assert_array_equal(strata.prognostic_scores,
                                      glm.predict(strata.prognostic_model, strata.analysis_set))
        self.assertIs(strata.prognostic_model.family, glm.GlmFamily.Logistic)
        labels = stratifier.stratum_labels(strata.analysis_set)
        self.assertEqual(set(labels.tolist()), set(range(1, strata.n_strata + 1)))
        order = np.argsort(strata.prognostic_scores, kind='stable')
        self.assertTrue(np.all(np.diff(labels[order]) >= 0))
        for row in strata.strata_table:
            self.assertEqual(row.size, int(np.sum(labels == row.stratum)))

    def test_auto_stratify_linear_prognosis_and_pilot_sample(self):
        df = simgen.make_sample_data(simgen.SimConfig(1000, 5))
        pilot = simgen.make_sample_data(simgen.SimConfig(300, 6))
        stdout = io.StringIO()
        with redirect_stdout(stdout):
            strata = stratifier.auto_stratify(df, 'treat', "X2 ~ X1 + B1", size=250, pilot_sample=pilot)
        self.assertIn("Using user-specified set for prognostic score modeling.", stdout.getvalue())
        self.assertIn("Fitting prognostic model via linear regression: X2 ~ X1 + B1", stdout.getvalue())
        self.assertIs(strata.prognostic_model.family, glm.GlmFamily.Linear)
        self.assertEqual(strata.analysis_set.n_rows, 1000)
        self.assertEqual(strata.prognostic_model.n_obs, int(np.sum(pilot.column('treat') == 0)))

    def test_auto_stratify_errors(self):
        df = simgen.make_sample_data(simgen.SimConfig(500, 1))
        with self.assertRaises(stratifier.MissingOutcome):
            stratifier.auto_stratify(df, 'treat', np.zeros(500), print_debug_messages=False)
        with self.assertRaises(stratifier.ScoreLengthMismatch):
            stratifier.auto_stratify(df, 'treat', np.zeros(10), outcome='outcome', print_debug_messages=False)
        with self.assertRaises(stratifier.BadSize):
            stratifier.auto_stratify(df, 'treat', "outcome ~ X1", size=0, print_debug_messages=False)
        with self.assertRaises(dataset.NonBinaryTreatment):
            stratifier.auto_stratify(df, 'X1', "outcome ~ X2", print_debug_messages=False)
        with self.assertWarns(stratifier.SizeTooLargeWarning):
            strata = stratifier.auto_stratify(df, 'treat', "outcome ~ X1", size=5000, print_debug_messages=False)
        self.assertEqual(strata.n_strata, 1)

    def test_unseen_level_in_prognostic_model(self):
        df = simgen.make_sample_data(simgen.SimConfig(600, 3))
        pilot = df.filter((df.column('C1') != 'c') & (df.column('treat') == 0))
        with self.assertRaises(dataset.UnseenLevel) as context:
            stratifier.auto_stratify(df, 'treat', "outcome ~ X1 + C1", pilot_sample=pilot, print_debug_messages=False)
        self.assertEqual(str(context.exception), "C1=c")

    def test_separated_prognostic_model(self):
        df = simgen.make_sample_data(simgen.SimConfig(400, 4))
        x1 = df.column('X1')
        separated = df.with_column(ColumnSchema('outcome', ColumnKind.Binary), (x1 > 0.0).astype(int))
        pilot = separated.filter(separated.column('treat') == 0)
        with self.assertRaises(glm.SeparationDetected):
            stratifier.auto_stratify(separated, 'treat', "outcome ~ X1", pilot_sample=pilot,
                                     print_debug_messages=False)

    def test_manual_stratify_icu_table(self):
        df = icu_shaped_frame()
        formula = "surgicalTeam ~ Female + " + " + ".join(ICU_RACE_COLUMNS)
        strata = stratifier.manual_stratify(df, formula, print_debug_messages=False)
        self.assertEqual(strata.n_strata, 16)
        self.assertEqual(strata.analysis_set.n_rows, 10157)
        self.assertIn("Min size: 17 \tMax size: 3314", strata.report())
        printed = [(t, c, n, issues) for t, c, n, issues in ICU_ISSUE_TABLE]
        computed = [(r.treat, r.control, r.total, r.potential_issues_text) for r in strata.issue_table]
        self.assertEqual(computed, printed)
        self.assertEqual(strata.strata_table[0].covariate_values[0], ('Female', '0'))

    def test_manual_stratify_partitions_rows(self):
        df = simgen.make_sample_data(simgen.SimConfig(300, 2))
        strata = stratifier.manual_stratify(df, "treat ~ B1", print_debug_messages=False)
        self.assertEqual(strata.n_strata, 2)
        labels = stratifier.stratum_labels(strata.analysis_set)
        np.testing.assert_array_equal(labels, df.column('B1') + 1)

        two_way = stratifier.manual_stratify(df, "treat ~ B2 + C1", print_debug_messages=False)
        self.assertEqual(two_way.n_strata, 6)
        self.assertEqual(sum(r.size for r in two_way.strata_table), 300)

    def test_manual_stratify_errors(self):
        df = icu_shaped_frame()
        with self.assertRaises(stratifier.ContinuousStratifyingCovariate):
            stratifier.manual_stratify(df, "surgicalTeam ~ Female + age", print_debug_messages=False)
        with self.assertRaises(dataset.NonBinaryTreatment):
            stratifier.manual_stratify(df, "age ~ Female", print_debug_messages=False)

    def test_thresholds_change_flags(self):
        df = scored_strata([1] * 60 + [2] * 100, [1] * 10 + [0] * 50 + [1] * 30 + [0] * 70)
        default_rows = stratifier.issue_table(df.analysis_set, 'treat')
        self.assertEqual(default_rows[0].potential_issues_text, "Too few samples; Not enough treated samples")
        relaxed = stratifier.Thresholds(too_few=50, ratio=6.0)
        self.assertEqual(stratifier.issue_table(df.analysis_set, 'treat', relaxed)[0].potential_issues_text, "none")

    def test_strata_persist(self):
        df = simgen.make_sample_data(simgen.SimConfig(2000, 9))
        strata = stratifier.auto_stratify(df, 'treat', "outcome ~ X1 + X2", size=400, seed=1,
                                          print_debug_messages=False)
        stratifier.write_strata(strata, str(self.temp_dir_path))
        for name in ['analysis.csv', 'pilot.csv', 'strata_table.csv', 'issue_table.csv', 'prognostic_model.json',
                     'prognostic_scores.csv']:
            self.assertTrue((self.temp_dir_path / name).exists(), name)
        loaded = stratifier.load_strata(str(self.temp_dir_path))
        self.assertEqual([r.quantile_bin for r in loaded.strata_table], [r.quantile_bin for r in strata.strata_table])
        self.assertEqual(loaded.issue_table, strata.issue_table)
        np.testing.assert_array_equal(loaded.prognostic_scores, strata.prognostic_scores)
        self.assertEqual(loaded.report(), strata.report())

        issue_lines = (self.temp_dir_path / 'issue_table.csv').read_text().splitlines()
        self.assertEqual(issue_lines[0], "Stratum,Treat,Control,Total,Control_Proportion,Potential_Issues")


@lru_cache(maxsize=None)
def _oracle(costs: tuple, j: int, capacities: tuple) -> float:
    if j == len(costs[0]):
        return 0.0 if not any(capacities) else math.inf
    best = _oracle(costs, j + 1, capacities)
    for t, capacity in enumerate(capacities):
        if capacity:
            reduced = capacities[:t] + (capacity - 1,) + capacities[t + 1:]
            best = min(best, costs[t][j] + _oracle(costs, j + 1, reduced))
    return best


def exhaustive_min_cost(cost: np.ndarray, k: int) -> float:
    """
    Minimum total cost over every way of giving each treated row k distinct controls,
    deciding the fate of one control at a time.
    """
    costs = tuple(tuple(float(v) for v in row) for row in cost)
    _oracle.cache_clear()
    return _oracle(costs, 0, (k,) * cost.shape[0])


def lexicographic_min_matching(treated, controls, k: int) -> list:
    """
    Among every way of giving each treated row k distinct controls, the
    lexicographically smallest sorted pair list of minimal total cost, with
    logits counted in whole steps of LOGIT_RESOLUTION.
    """
    treated_steps = [round(float(utils.clamped_logit(p)) / matcher.LOGIT_RESOLUTION) for p in treated]
    control_steps = [round(float(utils.clamped_logit(p)) / matcher.LOGIT_RESOLUTION) for p in controls]
    results = []
    for chosen in itertools.permutations(range(len(controls)), k * len(treated)):
        pairs = sorted((i // k, c) for i, c in enumerate(chosen))
        results.append((sum(abs(treated_steps[t] - control_steps[c]) for t, c in pairs), pairs))
    return min(results)[1]


class MatcherTest(TestCase):
    def setUp(self):
        self.temp_dir = TemporaryDirectory()
        self.temp_dir_path = Path(self.temp_dir.name)

    def tearDown(self):
        self.temp_dir.cleanup()

    def test_trivial_matches(self):
        self.assertEqual(matcher.optimal_k_match([0.5], [0.5], 1), [(0, 0)])
        self.assertEqual(matcher.optimal_k_match([0.2, 0.8], [0.21, 0.79, 0.5], 1), [(0, 0), (1, 1)])
        self.assertEqual(matcher.optimal_k_match([], [0.3], 2), [])
        with self.assertRaises(matcher.Infeasible):
            matcher.optimal_k_match([0.2, 0.4], [0.3, 0.5, 0.6], 2)

    def test_matching_is_optimal(self):
        rng = utils.make_rng(2024)
        for instance in range(200):
            k = 1 if instance % 2 == 0 else 2
            n_treated = int(rng.integers(1, 9 if k == 1 else 7))
            n_control = int(rng.integers(k * n_treated, 13))
            treated = rng.uniform(0.02, 0.98, n_treated)
            controls = rng.uniform(0.02, 0.98, n_control)
            pairs = matcher.optimal_k_match(treated, controls, k)

            used = [c for _, c in pairs]
            self.assertEqual(len(used), len(set(used)))
            self.assertEqual(sorted(t for t, _ in pairs), sorted(list(range(n_treated)) * k))
            cost = matcher.matching_costs(treated, controls)
            total = sum(cost[t, c] for t, c in pairs)
            self.assertAlmostEqual(total, exhaustive_min_cost(cost, k), delta=1e-8)

    def test_equal_cost_optima_break_ties_lexicographically(self):
        self.assertEqual(matcher.optimal_k_match([0.6, 0.8, 0.2], [0.4, 0.6, 0.2], 1), [(0, 0), (1, 1), (2, 2)])
        self.assertEqual(matcher.optimal_k_match([0.5, 0.5], [0.5, 0.5, 0.5], 1), [(0, 0), (1, 1)])
        self.assertEqual(matcher.optimal_k_match([0.5], [0.3, 0.7, 0.5], 2), [(0, 0), (0, 2)])

        rng = utils.make_rng(31)
        grid = np.round(np.arange(0.1, 1.0, 0.1), 1)
        for instance in range(300):
            k = 1 if instance % 3 else 2
            n_treated = int(rng.integers(1, 4 if k == 1 else 3))
            n_control = int(rng.integers(k * n_treated, 7))
            treated = rng.choice(grid, n_treated)
            controls = rng.choice(grid, n_control)
            self.assertEqual(matcher.optimal_k_match(treated, controls, k),
                             lexicographic_min_matching(treated, controls, k),
                             (treated.tolist(), controls.tolist(), k))

    def test_effective_sample_size(self):
        self.assertEqual(matcher.effective_sample_size({'1:1': 2339, '0:1': 4556}), 2339.0)
        self.assertEqual(matcher.effective_sample_size({'1:2': 2226, '0:1': 2686}), 2968.0)
        self.assertEqual(matcher.effective_sample_size({}), 0.0)
        self.assertEqual(matcher.effective_sample_size({'1:0': 3}), 0.0)

    def test_summary_text(self):
        lines = matcher.match_summary_text({'1:1': 2339, '0:1': 4556}).splitlines()
        self.assertEqual(lines, ["Structure of matched sets:", " 1:1  0:1 ", "2339 4556 ",
                                 "Effective Sample Size:  2339 ", "(equivalent number of matched pairs)."])

    def test_vector_propensity_is_identity(self):
        strata = scored_strata([1, 1, 2, 2], [1, 0, 1, 0])
        scores = np.array([0.1, 0.2, 0.3, 0.4])
        np.testing.assert_array_equal(matcher.fit_propensity(strata, matcher.PropensityInput.from_scores(scores)),
                                      scores)
        with self.assertRaises(stratifier.ScoreLengthMismatch):
            matcher.fit_propensity(strata, matcher.PropensityInput.from_scores([0.5]))

    def test_stratum_effects_add_columns(self):
        df = simgen.make_sample_data(simgen.SimConfig(2000, 5))
        strata = stratifier.auto_stratify(df, 'treat', "outcome ~ X1 + X2", size=300, print_debug_messages=False)
        formula = "treat ~ X1 + X2 + B1"
        with_effects = matcher.propensity_model(strata, formula, True, print_debug_messages=False)
        without = matcher.propensity_model(strata, formula, False, print_debug_messages=False)
        self.assertEqual(len(with_effects.column_labels) - len(without.column_labels), strata.n_strata - 1)

        direct = glm.predict(glm.fit_logistic(strata.analysis_set, dataset.parse_formula(formula)),
                             strata.analysis_set)
        scores = matcher.fit_propensity(strata, matcher.PropensityInput.from_formula(formula), stratum_effects=False,
                                        print_debug_messages=False)
        np.testing.assert_allclose(scores, direct, atol=1e-12)
        with self.assertRaises(dataset.FormulaSyntaxError):
            matcher.propensity_model(strata, "outcome ~ X1", print_debug_messages=False)

    def test_degraded_and_insufficient_strata(self):
        # stratum 1: 3 treated 4 controls, stratum 2: 3 treated 2 controls, stratum 3: controls only
        strata = scored_strata([1] * 7 + [2] * 5 + [3] * 2, [1, 1, 1, 0, 0, 0, 0] + [1, 1, 1, 0, 0] + [0, 0])
        scores = matcher.PropensityInput.from_scores(np.linspace(0.1, 0.9, 14))
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter('always')
            result = matcher.strata_match(strata, scores, k=2, print_debug_messages=False)
        categories = {w.category for w in caught}
        self.assertIn(matcher.DegradedRatioWarning, categories)
        self.assertIn(matcher.InsufficientControlsWarning, categories)
        self.assertEqual(result.set_structure, {'1:1': 5, '1:0': 1, '0:1': 3})
        self.assertTrue(any(w.startswith("DegradedRatio: Stratum 1:") for w in result.warnings))
        self.assertTrue(any(w.startswith("InsufficientControls: Stratum 2:") for w in result.warnings))
        self.assertEqual(result.effective_pairs, 5.0)
        self.assertEqual(result.set_labels[0], '1.1')

    def test_strata_match_invariants(self):
        df = simgen.make_sample_data(simgen.SimConfig(3000, 6))
        strata = stratifier.auto_stratify(df, 'treat', "outcome ~ X1 + X2", size=500, seed=2,
                                          print_debug_messages=False)
        propensity = matcher.PropensityInput.from_formula("treat ~ X1 + X2 + B1 + B2")
        with warnings.catch_warnings():
            warnings.simplefilter('ignore')
            result = matcher.strata_match(strata, propensity, k=2, print_debug_messages=False)
            threaded = matcher.strata_match(strata, propensity, k=2, threads=4, print_debug_messages=False)
        self.assertEqual(result.set_labels, threaded.set_labels)

        labels = stratifier.stratum_labels(strata.analysis_set)
        position = {int(r): i for i, r in enumerate(strata.analysis_set.row_id)}
        seen_controls = set()
        for label, (treated, controls) in result.matched_sets().items():
            self.assertIsNotNone(treated)
            self.assertGreaterEqual(len(controls), 1)
            self.assertLessEqual(len(controls), 2)
            members = [treated] + controls
            self.assertEqual(len({int(labels[position[m]]) for m in members}), 1)
            self.assertEqual(int(label.split('.')[0]), int(labels[position[treated]]))
            self.assertTrue(seen_controls.isdisjoint(controls))
            seen_controls.update(controls)

        path = str(self.temp_dir_path / 'matches.csv')
        matcher.write_matches_csv(result, path)
        with open(path, newline='') as file:
            rows = list(csv.reader(file))
        self.assertEqual(rows[0], ['row_id', 'stratum', 'treat', 'propensity_score', 'set_label'])
        self.assertEqual(len(rows) - 1, strata.analysis_set.n_rows)
        unmatched = sum(1 for row in rows[1:] if row[4] == '')
        self.assertEqual(unmatched, sum(1 for label in result.set_labels if label is None))


class DiagnosticsTest(TestCase):
    @classmethod
    def setUpClass(cls):
        df = simgen.make_sample_data(simgen.SimConfig(3000, 10))
        cls.strata = stratifier.auto_stratify(df, 'treat', "outcome ~ X1 + X2", size=500, seed=3,
                                              print_debug_messages=False)
        cls.propensity = matcher.fit_propensity(cls.strata,
                                                matcher.PropensityInput.from_formula("treat ~ X1 + X2 + B1"),
                                                print_debug_messages=False)

    def setUp(self):
        self.temp_dir = TemporaryDirectory()
        self.temp_dir_path = Path(self.temp_dir.name)

    def tearDown(self):
        self.temp_dir.cleanup()

    def test_classify_zone(self):
        self.assertIs(diagnostics.classify_zone(486, 0.825), diagnostics.Zone.Yellow)
        self.assertIs(diagnostics.classify_zone(486, 0.656), diagnostics.Zone.Ok)
        self.assertIs(diagnostics.classify_zone(17, 0.765), diagnostics.Zone.Red)
        self.assertIs(diagnostics.classify_zone(100, 0.8), diagnostics.Zone.Yellow)
        self.assertIs(diagnostics.classify_zone(6000, 0.5), diagnostics.Zone.Red)

    def test_size_ratio_zones_agree_with_flags(self):
        strata = stratifier.manual_stratify(icu_shaped_frame(), "surgicalTeam ~ Female + " +
                                            " + ".join(ICU_RACE_COLUMNS), print_debug_messages=False)
        points = diagnostics.size_ratio_data(strata)
        self.assertEqual(len(points), 16)
        for point, (n_treat, n_control, total, _) in zip(points, ICU_ISSUE_TABLE):
            self.assertEqual(point.total, total)
            self.assertIs(point.zone, diagnostics.classify_zone(total, n_control / total))
        self.assertIs(points[2].zone, diagnostics.Zone.Red)
        self.assertIs(points[3].zone, diagnostics.Zone.Yellow)
        self.assertIs(points[0].zone, diagnostics.Zone.Ok)

    def test_histogram_counts(self):
        data = diagnostics.propensity_hist_data(self.strata, self.propensity, 2, n_bins=20)
        row = self.strata.issue_table[1]
        self.assertEqual(int(data.treated_counts.sum()), row.treat)
        self.assertEqual(int(data.control_counts.sum()), row.control)
        self.assertEqual(len(data.bin_edges), 21)
        self.assertTrue(np.all(np.diff(data.bin_edges) > 0))

        with self.assertRaises(diagnostics.UnknownStratum):
            diagnostics.propensity_hist_data(self.strata, self.propensity, 99)

    def test_histogram_direct_tabulation(self):
        # no score lies near an interior bin edge
        scores = (np.arange(100) + 0.5) / 100.0
        strata = scored_strata([1] * 100, [1, 0] * 50)
        data = diagnostics.propensity_hist_data(strata, scores, 1, n_bins=10)
        lo, width = scores.min(), (scores.max() - scores.min()) / 10.0
        expected = np.zeros(10, dtype=int)
        for s in scores[::2]:
            expected[min(int((s - lo) / width), 9)] += 1
        np.testing.assert_array_equal(data.treated_counts, expected)
        self.assertEqual(int(data.control_counts.sum()), 50)

    def test_histogram_constant_scores(self):
        strata = scored_strata([1] * 6, [1, 0, 1, 0, 0, 0])
        data = diagnostics.propensity_hist_data(strata, np.full(6, 0.4), 1, n_bins=5)
        self.assertEqual(int(np.count_nonzero(data.treated_counts + data.control_counts)), 1)
        self.assertEqual(int(data.control_counts.sum()), 4)

    def test_fisher_mill_points(self):
        points = diagnostics.fisher_mill_data(self.strata, self.propensity, 1)
        row = self.strata.strata_table[0]
        labels = stratifier.stratum_labels(self.strata.analysis_set)
        np.testing.assert_array_equal([p.prognosis for p in points], self.strata.prognostic_scores[labels == 1])
        np.testing.assert_array_equal([p.propensity for p in points], self.propensity[labels == 1])
        for p in points:
            self.assertTrue(row.contains(p.prognosis))

        jittered = diagnostics.fisher_mill_data(self.strata, self.propensity, 1, 0.01, 0.02, seed=7)
        replay = diagnostics.fisher_mill_data(self.strata, self.propensity, 1, 0.01, 0.02, seed=7)
        self.assertEqual(jittered, replay)
        for original, moved in zip(points, jittered):
            self.assertLessEqual(abs(moved.prognosis - original.prognosis), 0.01)
            self.assertLessEqual(abs(moved.propensity - original.propensity), 0.02)

    def test_fisher_mill_errors(self):
        manual = stratifier.manual_stratify(simgen.make_sample_data(simgen.SimConfig(200, 1)), "treat ~ B1",
                                            print_debug_messages=False)
        with self.assertRaises(diagnostics.NoPrognosticScores):
            diagnostics.fisher_mill_data(manual, np.full(200, 0.5), 1)
        with self.assertRaises(diagnostics.UnknownStratum):
            diagnostics.fisher_mill_data(self.strata, self.propensity, 0)

    def test_residual_data(self):
        model = self.strata.prognostic_model
        table = diagnostics.residual_data(model, self.strata.pilot_set)
        self.assertEqual(len(table), self.strata.pilot_set.n_rows)
        self.assertAlmostEqual(float(np.sum(table.deviance ** 2)), model.deviance, places=6)
        np.testing.assert_allclose(table.response, self.strata.pilot_set.column('outcome') - table.fitted)

    def test_svg_rendering_is_deterministic(self):
        plots = {'size_ratio': diagnostics.size_ratio_data(self.strata),
                 'hist': diagnostics.propensity_hist_data(self.strata, self.propensity, 1),
                 'fisher_mill': diagnostics.fisher_mill_data(self.strata, self.propensity, None),
                 'residuals': diagnostics.residual_data(self.strata.prognostic_model, self.strata.pilot_set)}
        for name, plot in plots.items():
            first = self.temp_dir_path / f"{name}_1.svg"
            second = self.temp_dir_path / f"{name}_2.svg"
            diagnostics.render_svg(plot, str(first))
            diagnostics.render_svg(plot, str(second))
            self.assertIn("<svg", first.read_text())
            self.assertEqual(first.read_bytes(), second.read_bytes(), name)
        with self.assertRaises(diagnostics.IoError):
            diagnostics.render_svg(plots['hist'], str(self.temp_dir_path / 'missing' / 'hist.svg'))

    def test_csv_exports(self):
        path = str(self.temp_dir_path / 'size_ratio.csv')
        diagnostics.write_size_ratio_csv(diagnostics.size_ratio_data(self.strata), path)
        exported = dataset.load_csv(path)
        self.assertEqual(exported.n_rows, self.strata.n_strata)
        self.assertEqual(exported.column_names, ['stratum', 'total', 'control_proportion', 'zone'])


class TestFileIO(TestCase):
    def test_load_config_from_csv(self):
        config = stratamatch_main.load_config_from_csv("config/unittest_config.csv")
        self.assertEqual(len(config), 3)
        self.assertEqual(len(config["all"]), 2)
        self.assertAlmostEqual(config["all"]["imbalance ratio"], 3.0)

    def test_thresholds_from_config(self):
        config = stratamatch_main.load_config_from_csv("config/unittest_config.csv")
        match_thresholds = stratifier.Thresholds.from_config(config, 'match')
        self.assertEqual(match_thresholds.too_few, 50)
        self.assertEqual(match_thresholds.too_many, 1000)
        self.assertAlmostEqual(match_thresholds.ratio, 3.0)
        diagnose_thresholds = stratifier.Thresholds.from_config(config, 'diagnose')
        self.assertEqual(diagnose_thresholds.n_bins, 10)
        self.assertEqual(diagnose_thresholds.too_many, 5000)

        defaults = stratifier.Thresholds.from_config(stratamatch_main.load_config_from_csv(
            "config/default_config.csv"), 'stratify')
        self.assertEqual(defaults, stratifier.Thresholds())


class CliTest(TestCase):
    def setUp(self):
        self.temp_dir = TemporaryDirectory()
        self.temp_dir_path = Path(self.temp_dir.name)

    def tearDown(self):
        self.temp_dir.cleanup()

    def run_cli(self, argv):
        stdout, stderr = io.StringIO(), io.StringIO()
        with redirect_stdout(stdout), redirect_stderr(stderr), warnings.catch_warnings():
            warnings.simplefilter('ignore')
            code = stratamatch_main.run(argv)
        return code, stdout.getvalue(), stderr.getvalue()

    def test_generate(self):
        out = str(self.temp_dir_path / 'd.csv')
        code, _, _ = self.run_cli(['generate', '--n', '100', '--seed', '7', '--out', out])
        self.assertEqual(code, 0)
        self.assertEqual(dataset.load_csv(out).n_rows, 100)
        with open(self.temp_dir_path / 'call_record.json') as file:
            self.assertEqual(json.load(file)[0]['command'], 'generate')

    def test_usage_errors(self):
        code, _, _ = self.run_cli(['generate', '--n', '10', '--out', 'x.csv', '--bogus'])
        self.assertEqual(code, 2)
        code, _, _ = self.run_cli(['frobnicate'])
        self.assertEqual(code, 2)

    def test_domain_error_exit_code(self):
        data = str(self.temp_dir_path / 'd.csv')
        self.run_cli(['generate', '--n', '200', '--out', data])
        code, _, stderr = self.run_cli(['stratify', '--mode', 'manual', '--in', data,
                                        '--strata-formula', 'treat ~ B1 + X1', '--out-dir', str(self.temp_dir_path)])
        self.assertEqual(code, 1)
        self.assertTrue(stderr.startswith("ContinuousStratifyingCovariate: "))

    def test_split(self):
        data = str(self.temp_dir_path / 'd.csv')
        self.run_cli(['generate', '--n', '500', '--out', data])
        pilot_file = str(self.temp_dir_path / 'split' / 'my_pilot.csv')
        analysis_file = str(self.temp_dir_path / 'other' / 'my_analysis.csv')
        code, _, stderr = self.run_cli(['split', '--in', data, '--treat', 'treat', '--group-by', 'B1,C1',
                                        '--out-pilot', pilot_file, '--out-analysis', analysis_file])
        self.assertEqual(code, 0, stderr)
        pilot = dataset.load_csv(pilot_file)
        analysis = dataset.load_csv(analysis_file)
        self.assertEqual(pilot.n_rows + analysis.n_rows, 500)
        self.assertEqual(set(pilot.row_id) & set(analysis.row_id), set())
        self.assertTrue(np.all(pilot.column('treat') == 0))
        self.assertEqual(analysis.schemas, dataset.load_csv(data).schemas)
        with open(self.temp_dir_path / 'other' / 'call_record.json') as file:
            self.assertEqual(json.load(file)[-1]['out_pilot'], pilot_file)

        code, _, _ = self.run_cli(['split', '--in', data, '--treat', 'treat',
                                   '--out-dir', str(self.temp_dir_path / 'split_dir')])
        self.assertEqual(code, 0)
        self.assertTrue((self.temp_dir_path / 'split_dir' / 'pilot.csv').exists())
        self.assertTrue((self.temp_dir_path / 'split_dir' / 'analysis.csv').exists())

    def test_split_needs_destinations(self):
        data = str(self.temp_dir_path / 'd.csv')
        self.run_cli(['generate', '--n', '100', '--out', data])
        code, _, _ = self.run_cli(['split', '--in', data, '--treat', 'treat'])
        self.assertEqual(code, 2)
        code, _, _ = self.run_cli(['split', '--in', data, '--treat', 'treat',
                                   '--out-pilot', str(self.temp_dir_path / 'p.csv')])
        self.assertEqual(code, 2)
        self.assertFalse((self.temp_dir_path / 'p.csv').exists())

    def run_pipeline(self, run_dir: Path):
        data = str(run_dir / 'data.csv')
        pilot, analysis = str(run_dir / 'split' / 'pilot.csv'), str(run_dir / 'split' / 'analysis.csv')
        steps = [
            ['generate', '--n', '10000', '--seed', '42', '--out', data],
            ['split', '--in', data, '--treat', 'treat', '--pilot-fraction', '0.1', '--group-by', 'B1,C1',
             '--seed', '1', '--out-pilot', pilot, '--out-analysis', analysis],
            ['stratify', '--mode', 'auto', '--in', analysis, '--pilot-in', pilot, '--treat', 'treat',
             '--prognosis', 'outcome ~ X1 + X2', '--size', '500', '--out-dir', str(run_dir / 'run')],
            ['match', '--in-dir', str(run_dir / 'run'), '--propensity', 'treat ~ X1 + X2 + B1 + B2', '--k', '1',
             '--threads', '2'],
            ['diagnose', '--in-dir', str(run_dir / 'run'), '--plot', 'sr'],
            ['diagnose', '--in-dir', str(run_dir / 'run'), '--plot', 'fm', '--stratum', '3',
             '--propensity', 'treat ~ X1 + X2', '--jitter-prog', '0.01', '--seed', '5'],
        ]
        for argv in steps:
            code, _, stderr = self.run_cli(argv)
            self.assertEqual(code, 0, stderr)

    def test_pipeline_is_reproducible(self):
        first, second = self.temp_dir_path / 'first', self.temp_dir_path / 'second'
        self.run_pipeline(first)
        self.run_pipeline(second)
        for name in ['data.csv', 'split/pilot.csv', 'split/analysis.csv', 'split/analysis.csv.schema.json',
                     'run/analysis.csv','run/pilot.csv', 'run/strata_table.csv', 'run/issue_table.csv',
                     'run/prognostic_scores.csv', 'run/matches.csv', 'run/matches_summary.json',
                     'run/size_ratio.csv', 'run/fisher_mill_3.csv']:
            self.assertEqual((first / name).read_bytes(), (second / name).read_bytes(), name)

        code, stdout, _ = self.run_cli(['summary', '--in-dir', str(first / 'run'),
                                        '--matches', str(first / 'run' / 'matches_summary.json')])
        self.assertEqual(code, 0)
        self.assertIn("auto_strata object from package stratamatch.", stdout)
        self.assertIn("Structure of matched sets:", stdout)
        with open(first / 'run' / 'call_record.json') as file:
            records = json.load(file)
        self.assertEqual([r['command'] for r in records], ['stratify', 'match', 'diagnose', 'diagnose', 'summary'])

        split_pilot = dataset.load_csv(str(first / 'split' / 'pilot.csv'))
        strata = stratifier.load_strata(str(first / 'run'))
        self.assertEqual(set(split_pilot.row_id) & set(strata.analysis_set.row_id), set())


class EndToEndTest(TestCase):
    def test_desk_scale_pipeline(self):
        df = simgen.make_sample_data(simgen.SimConfig(10000, 42))
        treated_fraction = float(np.mean(df.column('treat')))
        self.assertGreaterEqual(treated_fraction, 0.18)
        self.assertLessEqual(treated_fraction, 0.22)

        strata = stratifier.auto_stratify(df, 'treat', "outcome ~ X1 + X2", size=500, pilot_fraction=0.1, seed=1,
                                          print_debug_messages=False)
        self.assertTrue(np.all(strata.pilot_set.column('treat') == 0))
        pilot_ids = set(strata.pilot_set.row_id.tolist())
        analysis_ids = set(strata.analysis_set.row_id.tolist())
        self.assertTrue(pilot_ids.isdisjoint(analysis_ids))
        self.assertEqual(len(pilot_ids) + len(analysis_ids), 10000)
        self.assertGreaterEqual(strata.n_strata, 18)
        self.assertLessEqual(strata.n_strata, 20)

        with warnings.catch_warnings():
            warnings.simplefilter('ignore')
            result = matcher.strata_match(strata, matcher.PropensityInput.from_formula("treat ~ X1 + X2 + B1 + B2"),
                                          k=1, print_debug_messages=False)
        labels = stratifier.stratum_labels(strata.analysis_set)
        for i in np.flatnonzero(result.treatment == 1):
            if result.set_labels[i] is None:
                self.assertTrue(any(w.split(': ', 1)[1].startswith(f"Stratum {labels[i]}:") for w in result.warnings))

        position = {int(r): i for i, r in enumerate(strata.analysis_set.row_id)}
        for treated, controls in result.matched_sets().values():
            self.assertTrue(all(labels[position[c]] == labels[position[treated]] for c in controls))
        n_sets = result.set_structure.get('1:1', 0)
        self.assertEqual(result.effective_pairs, float(n_sets))


if __name__ == '__main__':
    main()
