#!/usr/bin/env python3

import argparse
import csv
import json
import os
import sys
from typing import Any, Dict, List, Optional

from dataset import load_csv, parse_formula, write_csv
from diagnostics import fisher_mill_data, propensity_hist_data, render_svg, residual_data, size_ratio_data, \
                        write_fisher_mill_csv, write_histogram_csv, write_residual_csv, write_size_ratio_csv, \
                        NoPrognosticScores
from matcher import PropensityInput, fit_propensity, match_summary_text, strata_match, write_match_summary_json, \
                    write_matches_csv
from sampler import split_pilot_set
from simgen import SimConfig, make_sample_data
from stratifier import STRATA_RECORD, Thresholds, auto_stratify, load_scores_csv, load_strata, manual_stratify, \
                       stratum_labels, strata_from_analysis_set, write_strata
from utils import StratamatchError


THREADS_ENVIRONMENT_VARIABLE = 'STRATMATCH_THREADS'
CALL_RECORD_FILE = 'call_record.json'


def main():
    sys.exit(run(sys.argv[1:]))


def run(argv: List[str]) -> int:
    """
    Exit code 0 on success, 1 on a domain error and 2 on a usage error.
    """
    try:
        args = parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else 2

    try:
        thresholds = load_thresholds(args)
        out_dir = args.command_func(args, thresholds)
        if out_dir is not None:
            append_call_record(args, out_dir)
    except StratamatchError as e:
        print(f"{type(e).__name__}: {e}", file=sys.stderr)
        return 1
    except ValueError as e:
        print(f"ValueError: {e}", file=sys.stderr)
        return 1
    except OSError as e:
        print(f"IoError: {e}", file=sys.stderr)
        return 1
    return 0


def parse_args(argv: List[str]) -> argparse.Namespace:
    parser = argparse.ArgumentParser(description='stratify an observational data set on prognostic scores and '
                                                 'match treated to control individuals within strata.')
    subparsers = parser.add_subparsers(dest='command', required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('-c', '--config', help='path to the csv file containing threshold settings.', default=None)
    common.add_argument('--too-few', help='strata smaller than this are flagged.', type=int, default=None)
    common.add_argument('--too-many', help='strata larger than this are flagged.', type=int, default=None)
    common.add_argument('--ratio', help='treated to control imbalance ratio which is flagged.', type=float,
                        default=None)
    common.add_argument('-v', '--verbose', help='when enabled, print / log debug messages.', action='store_true')

    generate = subparsers.add_parser('generate', parents=[common], help='write simulated sample data.')
    generate.add_argument('--n', help='number of rows.', type=int, required=True)
    generate.add_argument('--seed', type=int, default=0)
    generate.add_argument('--out', help='path of the csv file to write.', required=True)
    generate.set_defaults(command_func=generate_command)

    split = subparsers.add_parser('split', parents=[common], help='split off a pilot set of controls.')
    split.add_argument('--in', dest='in_file', required=True)
    split.add_argument('--treat', required=True)
    split.add_argument('--pilot-fraction', type=float, default=0.1)
    split.add_argument('--group-by', help='comma separated covariates to balance the pilot set on.', default=None)
    split.add_argument('--seed', type=int, default=0)
    split.add_argument('--out-pilot', help='path of the pilot set csv.', default=None)
    split.add_argument('--out-analysis', help='path of the analysis set csv.', default=None)
    split.add_argument('--out-dir', help='directory for pilot.csv and analysis.csv when their paths are not given.',
                       default=None)
    split.set_defaults(command_func=split_command)

    stratify = subparsers.add_parser('stratify', parents=[common], help='stratify the data set.')
    stratify.add_argument('--mode', choices=['auto', 'manual'], default='auto')
    stratify.add_argument('--in', dest='in_file', required=True)
    stratify.add_argument('--treat', default=None)
    stratify.add_argument('--prognosis', help='prognostic model formula, e.g. "outcome ~ X1 + X2".', default=None)
    stratify.add_argument('--prognosis-scores', help='csv of prognostic scores for the input rows.', default=None)
    stratify.add_argument('--outcome', default=None)
    stratify.add_argument('--strata-formula', help='manual strata formula, e.g. "treat ~ B1 + C1".', default=None)
    stratify.add_argument('--size', type=int, default=2500)
    stratify.add_argument('--pilot-fraction', type=float, default=0.1)
    stratify.add_argument('--pilot-in', help='csv of a user specified pilot set.', default=None)
    stratify.add_argument('--group-by', default=None)
    stratify.add_argument('--seed', type=int, default=0)
    stratify.add_argument('--out-dir', required=True)
    stratify.set_defaults(command_func=stratify_command)

    diagnose = subparsers.add_parser('diagnose', parents=[common], help='write diagnostic plot data.')
    diagnose.add_argument('--in-dir', required=True)
    diagnose.add_argument('--plot', choices=['sr', 'hist', 'fm', 'residual'], required=True)
    diagnose.add_argument('--propensity', help='propensity model formula.', default=None)
    diagnose.add_argument('--propensity-scores', help='csv of propensity scores for the analysis set.', default=None)
    diagnose.add_argument('--no-stratum-effects', action='store_true')
    diagnose.add_argument('--stratum', type=int, default=None)
    diagnose.add_argument('--bins', type=int, default=None)
    diagnose.add_argument('--jitter-prog', type=float, default=0.0)
    diagnose.add_argument('--jitter-prop', type=float, default=0.0)
    diagnose.add_argument('--seed', type=int, default=0)
    diagnose.add_argument('--svg', action='store_true')
    diagnose.add_argument('--out-dir', default=None)
    diagnose.set_defaults(command_func=diagnose_command)

    match = subparsers.add_parser('match', parents=[common], help='match within strata.')
    source = match.add_mutually_exclusive_group(required=True)
    source.add_argument('--in', dest='in_file', help='analysis set csv with a stratum column.')
    source.add_argument('--in-dir', help='directory written by stratify.')
    match.add_argument('--propensity', required=True)
    match.add_argument('--k', type=int, default=1)
    match.add_argument('--no-stratum-effects', action='store_true')
    match.add_argument('--threads', type=int, default=None)
    match.add_argument('--out', default=None)
    match.set_defaults(command_func=match_command)

    summary = subparsers.add_parser('summary', parents=[common], help='print a stratification report.')
    summary.add_argument('--in-dir', required=True)
    summary.add_argument('--matches', help='matches_summary.json written by match.', default=None)
    summary.set_defaults(command_func=summary_command)

    args = parser.parse_args(argv)
    if args.command == 'split' and args.out_dir is None and (args.out_pilot is None or args.out_analysis is None):
        split.error('give --out-pilot and --out-analysis, or --out-dir')
    return args


def load_config_from_csv(filename: str) -> Dict[str, Dict[str, Any]]:
    config = {}
    with open(filename, newline='') as csvfile:
        reader = csv.reader(csvfile)
        next(reader)  # skip the title row
        for row in reader:
            if not row:
                continue
            section = row[0].strip().lower()
            variable_name = row[1].strip()
            variable_value = row[2].strip()
            variable_type = row[3].strip().lower()
            if variable_type == "string":
                pass
            elif variable_type == "number":
                variable_value = float(variable_value)
            elif variable_type == "boolean":
                variable_value = variable_value.lower() == "true"
            else:
                raise ValueError(f"Unrecognised variable type {variable_type} in config file {filename}.")

            config.setdefault(section, {})[variable_name] = variable_value

    return config


def load_thresholds(args: argparse.Namespace) -> Thresholds:
    thresholds = Thresholds()
    if args.config:
        thresholds = Thresholds.from_config(load_config_from_csv(args.config), args.command)
    return thresholds.with_overrides(too_few=args.too_few, too_many=args.too_many, ratio=args.ratio)


def thread_count(args: argparse.Namespace) -> int:
    if args.threads is not None:
        return args.threads
    return int(os.environ.get(THREADS_ENVIRONMENT_VARIABLE, 1))


def append_call_record(args: argparse.Namespace, out_dir: str):
    path = os.path.join(out_dir, CALL_RECORD_FILE)
    records = []
    if os.path.exists(path):
        with open(path) as file:
            records = json.load(file)
    records.append({k: v for k, v in vars(args).items() if k != 'command_func'})
    with open(path, 'w') as file:
        json.dump(records, file, indent=2)


def _covariate_list(text: Optional[str]) -> List[str]:
    return [c.strip() for c in text.split(',') if c.strip()] if text else []


## Subcommands

def generate_command(args: argparse.Namespace, thresholds: Thresholds) -> str:
    df = make_sample_data(SimConfig(args.n, args.seed))
    out_dir = os.path.dirname(os.path.abspath(args.out))
    os.makedirs(out_dir, exist_ok=True)
    write_csv(df, args.out)
    if args.verbose:
        print(f"rows={df.n_rows} out={args.out}")
    return out_dir


def split_command(args: argparse.Namespace, thresholds: Thresholds) -> str:
    df = load_csv(args.in_file)
    split = split_pilot_set(df, args.treat, args.pilot_fraction, _covariate_list(args.group_by), args.seed,
                            args.verbose)
    pilot_file = args.out_pilot or os.path.join(args.out_dir, 'pilot.csv')
    analysis_file = args.out_analysis or os.path.join(args.out_dir, 'analysis.csv')
    for filename in (pilot_file, analysis_file):
        os.makedirs(os.path.dirname(os.path.abspath(filename)), exist_ok=True)
    write_csv(split.pilot_set, pilot_file)
    write_csv(split.analysis_set, analysis_file)
    if args.verbose:
        print(f"Pilot set dimensions: {split.pilot_set.dimensions()}")
        print(f"Analysis set dimensions: {split.analysis_set.dimensions()}")
    return args.out_dir or os.path.dirname(os.path.abspath(analysis_file))


def stratify_command(args: argparse.Namespace, thresholds: Thresholds) -> str:
    df = load_csv(args.in_file)
    if args.mode == 'manual':
        if not args.strata_formula:
            raise ValueError("Manual stratification needs --strata-formula")
        strata = manual_stratify(df, args.strata_formula, thresholds, args.verbose)
    else:
        if args.treat is None:
            raise ValueError("Automatic stratification needs --treat")
        if args.prognosis_scores:
            prognosis = load_scores_csv(args.prognosis_scores, df)
        elif args.prognosis:
            prognosis = parse_formula(args.prognosis)
        else:
            raise ValueError("Automatic stratification needs --prognosis or --prognosis-scores")
        pilot_sample = load_csv(args.pilot_in) if args.pilot_in else None
        strata = auto_stratify(df, args.treat, prognosis, args.outcome, args.size, args.pilot_fraction, pilot_sample,
                               _covariate_list(args.group_by), args.seed, thresholds, args.verbose)
    write_strata(strata, args.out_dir)
    if args.verbose:
        print(strata.report())
    return args.out_dir


def _propensity_input(args: argparse.Namespace, strata) -> PropensityInput:
    if args.propensity_scores:
        return PropensityInput.from_scores(load_scores_csv(args.propensity_scores, strata.analysis_set))
    if args.propensity:
        return PropensityInput.from_formula(args.propensity)
    raise ValueError("This plot needs --propensity or --propensity-scores")


def diagnose_command(args: argparse.Namespace, thresholds: Thresholds) -> str:
    strata = load_strata(args.in_dir, thresholds)
    out_dir = args.out_dir or args.in_dir
    os.makedirs(out_dir, exist_ok=True)

    def write(plot, stem: str, write_csv_func):
        write_csv_func(plot, os.path.join(out_dir, f"{stem}.csv"))
        if args.svg:
            render_svg(plot, os.path.join(out_dir, f"{stem}.svg"), thresholds)

    if args.plot == 'sr':
        write(size_ratio_data(strata, thresholds), 'size_ratio', write_size_ratio_csv)
    elif args.plot == 'residual':
        if strata.prognostic_model is None or strata.pilot_set is None:
            raise NoPrognosticScores("Residual plots need a prognostic model fit on a pilot set")
        pilot_controls = strata.pilot_set
        if pilot_controls.has_column(strata.treat):
            pilot_controls = pilot_controls.filter(pilot_controls.column(strata.treat) == 0)
        write(residual_data(strata.prognostic_model, pilot_controls), 'residuals', write_residual_csv)
    else:
        # fit once, shared by every stratum
        propensity = PropensityInput.from_scores(fit_propensity(strata, _propensity_input(args, strata),
                                                                not args.no_stratum_effects, thresholds, args.verbose))
        if args.plot == 'hist':
            n_bins = args.bins or thresholds.n_bins
            strata_ids = [args.stratum] if args.stratum is not None else \
                sorted({int(s) for s in stratum_labels(strata.analysis_set)})
            for s in strata_ids:
                write(propensity_hist_data(strata, propensity, s, n_bins), f"propensity_hist_{s}", write_histogram_csv)
        else:
            stem = 'fisher_mill' if args.stratum is None else f"fisher_mill_{args.stratum}"
            write(fisher_mill_data(strata, propensity, args.stratum, args.jitter_prog, args.jitter_prop, args.seed),
                  stem, write_fisher_mill_csv)
    return out_dir


def match_command(args: argparse.Namespace, thresholds: Thresholds) -> str:
    propensity = PropensityInput.from_formula(args.propensity)
    if args.in_dir:
        strata = load_strata(args.in_dir, thresholds)
        out_dir = args.in_dir
    else:
        in_dir = os.path.dirname(os.path.abspath(args.in_file))
        if os.path.exists(os.path.join(in_dir, STRATA_RECORD)) and \
                os.path.basename(args.in_file) == 'analysis.csv':
            strata = load_strata(in_dir, thresholds)
        else:
            strata = strata_from_analysis_set(load_csv(args.in_file), propensity.payload.lhs, thresholds)
        out_dir = in_dir

    result = strata_match(strata, propensity, args.k, not args.no_stratum_effects, thread_count(args), thresholds,
                          args.verbose)
    out_file = args.out or os.path.join(out_dir, 'matches.csv')
    out_dir = os.path.dirname(os.path.abspath(out_file))
    os.makedirs(out_dir, exist_ok=True)
    write_matches_csv(result, out_file)
    write_match_summary_json(result, os.path.join(out_dir, 'matches_summary.json'))
    if args.verbose:
        print(result.summary())
    return out_dir


def summary_command(args: argparse.Namespace, thresholds: Thresholds) -> str:
    strata = load_strata(args.in_dir, thresholds)
    print(strata.report())
    if args.matches:
        with open(args.matches) as file:
            record = json.load(file)
        print()
        print(match_summary_text(record['set_structure']))
    return args.in_dir


if __name__ == '__main__':
    main()
