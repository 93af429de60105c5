#!/usr/bin/env python3

from dataclasses import dataclass
from enum import Enum
import json
import os
import re
import numpy as np
import pandas as pd
from typing import Dict, List, Optional, Sequence, Tuple

from utils import CSV_FLOAT_FORMAT, StratamatchError


ROW_ID_COLUMN = 'row_id'
INTERCEPT_LABEL = '(Intercept)'
SCHEMA_SUFFIX = '.schema.json'
_IDENT = r"[A-Za-z_.][A-Za-z0-9_.]*"
_IDENT_PATTERN = re.compile(_IDENT)
_FORMULA_PATTERN = re.compile(rf"^\s*(?P<lhs>{_IDENT})?\s*~(?P<rhs>.*)$", re.DOTALL)


class ColumnKind(Enum):
    Numeric = 1
    Binary = 2
    Categorical = 3


@dataclass(frozen=True)
class ColumnSchema:
    """
    name: column name, unique within a frame
    kind: numeric, binary (0/1) or categorical
    levels: ordered level list for categorical columns. The first level is the
            reference level when dummy coding. None means "first appearance order".
    """
    name: str
    kind: ColumnKind
    levels: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        if self.levels is not None:
            object.__setattr__(self, "levels", tuple(self.levels))
            if self.kind is not ColumnKind.Categorical:
                raise ValueError(f"Only categorical columns carry levels, {self.name} is {self.kind.name}")
            if len(set(self.levels)) != len(self.levels):
                raise ValueError(f"Levels of categorical column {self.name} are not distinct: {self.levels}")


class DataFrame:
    """
    An immutable typed table on top of a pandas DataFrame. Every row carries a
    stable integer row_id (the pandas index) which survives subsetting, so the
    pilot and analysis sets always point back at the rows of the frame they
    were split from.

    numeric columns are stored as float64, binary as int64 (0/1) and
    categorical columns as ordered pandas Categoricals with the schema levels
    as categories. column() hands out read only numpy arrays, categorical
    values as object arrays of str.
    """

    def __init__(self, schemas: Sequence[ColumnSchema], columns: Sequence[Sequence], row_id: Optional[Sequence[int]] = None):
        if len(schemas) != len(columns):
            raise ValueError("Need exactly one value vector per column schema")

        names = [s.name for s in schemas]
        if len(set(names)) != len(names):
            duplicates = sorted({n for n in names if names.count(n) > 1})
            raise DuplicateColumn(f"Column names must be unique, found duplicates {duplicates}")
        if ROW_ID_COLUMN in names:
            raise DuplicateColumn(f"'{ROW_ID_COLUMN}' is reserved for row identity")

        n_rows = len(columns[0]) if columns else (0 if row_id is None else len(row_id))
        checked = []
        data = {}
        for schema, values in zip(schemas, columns):
            if len(values) != n_rows:
                raise RaggedRow(f"Column {schema.name} has {len(values)} values, expected {n_rows}")
            schema, data[schema.name] = _validate_column(schema, values)
            checked.append(schema)

        if row_id is None:
            row_id = np.arange(n_rows, dtype=np.int64)
        row_id = np.array(row_id, dtype=np.int64)
        if len(row_id) != n_rows:
            raise ValueError(f"row_id has {len(row_id)} entries, expected {n_rows}")
        if len(np.unique(row_id)) != n_rows:
            raise TypeMismatch("row_id values must be unique")
        self._wrap(checked, pd.DataFrame(data, index=pd.Index(row_id, name=ROW_ID_COLUMN)))

    def _wrap(self, schemas: Sequence[ColumnSchema], frame: pd.DataFrame):
        self._schemas: List[ColumnSchema] = list(schemas)
        self._frame = frame
        self._arrays: Dict[str, np.ndarray] = {}
        self._row_id = frame.index.to_numpy(dtype=np.int64, copy=True)
        self._row_id.setflags(write=False)

    @classmethod
    def _from_frame(cls, schemas: Sequence[ColumnSchema], frame: pd.DataFrame) -> 'DataFrame':
        df = cls.__new__(cls)
        df._wrap(schemas, frame)
        return df

    def __repr__(self):
        return f"DataFrame({self.dimensions()}, columns={self.column_names})"

    def __len__(self):
        return self.n_rows

    @property
    def n_rows(self) -> int:
        return len(self._frame)

    @property
    def n_columns(self) -> int:
        return len(self._schemas)

    @property
    def row_id(self) -> np.ndarray:
        return self._row_id

    @property
    def schemas(self) -> List[ColumnSchema]:
        return list(self._schemas)

    @property
    def column_names(self) -> List[str]:
        return [s.name for s in self._schemas]

    def dimensions(self) -> str:
        return f"{self.n_rows} X {self.n_columns}"

    def has_column(self, name: str) -> bool:
        return name in self._frame.columns

    def schema(self, name: str) -> ColumnSchema:
        for s in self._schemas:
            if s.name == name:
                return s
        raise UnknownColumn(f"No column named {name}")

    def column(self, name: str) -> np.ndarray:
        if name not in self._arrays:
            series = self._frame[self.schema(name).name]
            if isinstance(series.dtype, pd.CategoricalDtype):
                array = series.astype(object).to_numpy()
            else:
                array = series.to_numpy(copy=True)
            array.setflags(write=False)
            self._arrays[name] = array
        return self._arrays[name]

    def columns(self) -> List[np.ndarray]:
        return [self.column(s.name) for s in self._schemas]

    def to_pandas(self) -> pd.DataFrame:
        """
        A copy of the underlying pandas frame, indexed by row_id.
        """
        return self._frame.copy()

    def take(self, indices: Sequence[int]) -> 'DataFrame':
        """
        Subset by positional indices, keeping the row ids of the selected rows.
        """
        return DataFrame._from_frame(self._schemas, self._frame.iloc[np.asarray(indices, dtype=np.int64)])

    def filter(self, mask: np.ndarray) -> 'DataFrame':
        return self.take(np.flatnonzero(np.asarray(mask, dtype=bool)))

    def with_column(self, schema: ColumnSchema, values: Sequence) -> 'DataFrame':
        """
        Returns a new frame with the column replaced, or appended as the last column
        if no column of that name exists.
        """
        schemas = list(self._schemas)
        columns = self.columns()
        for i, s in enumerate(schemas):
            if s.name == schema.name:
                schemas[i] = schema
                columns[i] = values
                break
        else:
            schemas.append(schema)
            columns.append(values)
        return DataFrame(schemas, columns, self._row_id)

    def without_column(self, name: str) -> 'DataFrame':
        self.schema(name)
        return DataFrame._from_frame([s for s in self._schemas if s.name != name], self._frame.drop(columns=[name]))

    def equals(self, other: 'DataFrame') -> bool:
        if self._schemas != other._schemas or not np.array_equal(self._row_id, other._row_id):
            return False
        return all(np.array_equal(a, b) for a, b in zip(self.columns(), other.columns()))

    def observed_levels(self, name: str) -> List[str]:
        """
        Levels of a categorical column which actually occur, in schema order.
        """
        schema = self.schema(name)
        if schema.kind is not ColumnKind.Categorical:
            raise TypeMismatch(f"Column {name} is not categorical")
        present = set(self.column(name))
        return [lv for lv in schema.levels if lv in present]


def _validate_column(schema: ColumnSchema, values: Sequence) -> Tuple[ColumnSchema, object]:
    if schema.kind is ColumnKind.Numeric:
        try:
            array = np.array(values, dtype=np.float64)
        except (TypeError, ValueError):
            raise TypeMismatch(f"Column {schema.name} declared numeric but contains non numeric values")
        if not np.all(np.isfinite(array)):
            raise TypeMismatch(f"Column {schema.name} contains missing or non finite values")
        return schema, array

    if schema.kind is ColumnKind.Binary:
        try:
            as_float = np.array(values, dtype=np.float64)
        except (TypeError, ValueError):
            raise TypeMismatch(f"Column {schema.name} declared binary but contains non numeric values")
        if not np.all((as_float == 0.0) | (as_float == 1.0)):
            raise TypeMismatch(f"Column {schema.name} declared binary but contains values other than 0 and 1")
        return schema, as_float.astype(np.int64)

    strings = np.array([str(v) for v in values], dtype=object)
    if schema.levels is None:
        schema = ColumnSchema(schema.name, ColumnKind.Categorical, tuple(pd.unique(strings)))
    categorical = pd.Categorical(strings, categories=list(schema.levels), ordered=True)
    outside = categorical.codes < 0
    if np.any(outside):
        raise TypeMismatch(f"Column {schema.name} contains values {sorted(set(strings[outside]))} outside its "
                           f"levels {list(schema.levels)}")
    return schema, categorical


def require_binary_treatment(df: DataFrame, treat: str) -> np.ndarray:
    """
    Returns the treatment indicator as an int array, or raises NonBinaryTreatment.
    """
    schema = df.schema(treat)
    values = df.column(treat)
    if schema.kind is ColumnKind.Binary:
        return values
    if schema.kind is ColumnKind.Numeric and np.all((values == 0.0) | (values == 1.0)):
        return values.astype(np.int64)
    raise NonBinaryTreatment(f"Treatment column {treat} must be binary (0/1), found {schema.kind.name.lower()}")


## CSV

def schema_path(filename: str) -> str:
    """
    Where write_csv keeps the column schema of a data file.
    """
    return filename + SCHEMA_SUFFIX


def write_schema_json(schemas: Sequence[ColumnSchema], filename: str):
    columns = []
    for s in schemas:
        entry = {'name': s.name, 'kind': s.kind.name.lower()}
        if s.levels is not None:
            entry['levels'] = list(s.levels)
        columns.append(entry)
    with open(filename, 'w') as file:
        json.dump({'columns': columns}, file, indent=2)


def load_schema_json(filename: str) -> List[ColumnSchema]:
    with open(filename) as file:
        record = json.load(file)
    try:
        return [ColumnSchema(c['name'], ColumnKind[c['kind'].capitalize()], c.get('levels'))
                for c in record['columns']]
    except (KeyError, TypeError, AttributeError) as e:
        raise TypeMismatch(f"{filename} is not a column schema file: {e!r}")


def _parse_floats(column: pd.Series) -> Optional[np.ndarray]:
    # float() per value, so 17 significant digits read back bit for bit
    try:
        return column.to_numpy(dtype=object).astype(np.float64)
    except ValueError:
        return None


def _parse_column(column: pd.Series, schema: Optional[ColumnSchema]) -> Tuple[ColumnSchema, object]:
    name = column.name
    if schema is None:
        numbers = _parse_floats(column)
        if numbers is None:
            return ColumnSchema(name, ColumnKind.Categorical), column.to_numpy(dtype=object)
        if len(numbers) and np.all((numbers == 0.0) | (numbers == 1.0)):
            return ColumnSchema(name, ColumnKind.Binary), numbers
        return ColumnSchema(name, ColumnKind.Numeric), numbers

    if schema.kind is ColumnKind.Categorical:
        return schema, column.to_numpy(dtype=object)
    numbers = _parse_floats(column)
    if numbers is None:
        raise TypeMismatch(f"Column {name} declared {schema.kind.name.lower()} but contains non numeric values")
    return schema, numbers


def _parse_row_id(column: pd.Series, filename: str) -> np.ndarray:
    if len(column) == 0:
        return np.zeros(0, dtype=np.int64)
    try:
        row_id = pd.to_numeric(column, errors='raise')
    except (TypeError, ValueError):
        row_id = None
    if row_id is None or row_id.dtype.kind not in 'iu':
        raise TypeMismatch(f"{column.name} column of {filename} must hold integers")
    return row_id.to_numpy(dtype=np.int64)


def load_csv(filename: str, schema: Optional[Sequence[ColumnSchema]] = None,
             row_id_column: Optional[str] = ROW_ID_COLUMN) -> DataFrame:
    """
    Load a comma separated file with a header row. A column's kind comes from
    schema if it names the column, else from the schema file write_csv left next
    to the data (see schema_path), else it is inferred: all values in {0, 1} ->
    binary, all numeric -> numeric, anything else -> categorical with levels in
    order of first appearance. A header column named row_id_column is taken as
    the row identity instead of data.
    """
    try:
        raw = pd.read_csv(filename, header=None, dtype=str, keep_default_na=False, skip_blank_lines=True)
    except pd.errors.EmptyDataError:
        raise EmptyFile(f"{filename} has no header row")
    except pd.errors.ParserError as e:
        raise RaggedRow(f"{filename}: {e}")

    header = [h.strip() for h in raw.iloc[0]]
    if all(not h for h in header):
        raise EmptyFile(f"{filename} has no header row")
    body = raw.iloc[1:].reset_index(drop=True)
    body.columns = header if len(set(header)) == len(header) else range(len(header))
    short_rows = np.flatnonzero(body.isna().any(axis=1).to_numpy())
    if len(short_rows):
        raise RaggedRow(f"{filename} data row {short_rows[0] + 1}: expected {len(header)} fields")

    declared = {}
    if os.path.exists(schema_path(filename)):
        declared.update((s.name, s) for s in load_schema_json(schema_path(filename)))
    declared.update((s.name, s) for s in (schema or []))
    unknown = set(declared) - set(header)
    if unknown:
        raise UnknownColumn(f"Schema names columns {sorted(unknown)} which are not in {filename}")

    row_id = None
    schemas, columns = [], []
    for j, name in enumerate(header):
        column = body.iloc[:, j].str.strip().rename(name)
        missing = np.flatnonzero(((column == '') | (column.str.upper() == 'NA')).to_numpy())
        if len(missing):
            raise TypeMismatch(f"Missing value in column {name} at data row {missing[0] + 1}")
        if row_id_column is not None and name == row_id_column:
            row_id = _parse_row_id(column, filename)
            continue
        column_schema, values = _parse_column(column, declared.get(name))
        schemas.append(column_schema)
        columns.append(values)

    return DataFrame(schemas, columns, row_id)


def write_csv(df: DataFrame, filename: str, include_row_id: bool = True):
    """
    Numeric values go out at 17 significant digits, so they read back bit for
    bit. The column schema goes to schema_path(filename), where load_csv picks
    it up again, so kinds and level order survive the round trip.
    """
    df.to_pandas().to_csv(filename, index=include_row_id, float_format=CSV_FLOAT_FORMAT)
    write_schema_json(df.schemas, schema_path(filename))


## Formulas

@dataclass(frozen=True)
class Formula:
    """
    An additive model formula: lhs ~ t1 + t2 + ...
    """
    lhs: Optional[str]
    rhs_terms: Tuple[str, ...]

    def __post_init__(self):
        if not self.rhs_terms:
            raise FormulaSyntaxError("A formula needs at least one term on the right hand side")
        seen = set()
        for term in self.rhs_terms:
            if term in seen:
                raise DuplicateTerm(f"Term {term} appears more than once")
            seen.add(term)

    def __str__(self):
        return self.to_text()

    def to_text(self) -> str:
        rhs = ' + '.join(self.rhs_terms)
        return f"{self.lhs} ~ {rhs}" if self.lhs is not None else f"~ {rhs}"

    def with_terms(self, extra_terms: Sequence[str]) -> 'Formula':
        return Formula(self.lhs, tuple(self.rhs_terms) + tuple(extra_terms))


def parse_formula(text: str) -> Formula:
    match = _FORMULA_PATTERN.match(text)
    if match is None:
        raise FormulaSyntaxError(f"Could not parse formula '{text}', expected 'lhs ~ a + b'")
    terms = [t.strip() for t in match.group('rhs').split('+')]
    for term in terms:
        if not _IDENT_PATTERN.fullmatch(term):
            raise FormulaSyntaxError(f"Could not parse formula '{text}', bad term '{term}'")
    return Formula(match.group('lhs'), tuple(terms))


## Design matrices

class DesignMatrix:
    def __init__(self, values: np.ndarray, column_labels: List[str], intercept: bool,
                 level_catalog: Dict[str, List[str]]):
        self.values: np.ndarray = values
        self.column_labels: List[str] = column_labels
        self.intercept: bool = intercept
        self.level_catalog: Dict[str, List[str]] = level_catalog

    def __repr__(self):
        return f"DesignMatrix({self.values.shape[0]} x {self.p}, {self.column_labels})"

    @property
    def p(self) -> int:
        return self.values.shape[1]


def design_matrix(df: DataFrame, terms: Sequence[str], intercept: bool = True,
                  level_catalog: Optional[Dict[str, List[str]]] = None) -> DesignMatrix:
    """
    Numeric and binary terms give one column each. A categorical term with L
    levels gives L-1 indicator columns against its first level. Levels come from
    level_catalog when given (values outside it raise UnseenLevel), otherwise
    from the column schema.
    """
    for term in terms:
        if not df.has_column(term):
            raise UnknownColumn(f"Formula term {term} is not a column of the data")

    blocks = []
    labels = []
    catalog = {}
    if intercept:
        blocks.append(np.ones(df.n_rows))
        labels.append(INTERCEPT_LABEL)

    for term in terms:
        schema = df.schema(term)
        values = df.column(term)
        if schema.kind is ColumnKind.Categorical:
            if level_catalog is not None and term in level_catalog:
                levels = list(level_catalog[term])
                unseen = [v for v in dict.fromkeys(values.tolist()) if v not in levels]
                if unseen:
                    raise UnseenLevel(f"{term}={unseen[0]}")
            else:
                levels = list(schema.levels)
            catalog[term] = levels
            for level in levels[1:]:
                blocks.append((values == level).astype(np.float64))
                labels.append(f"{term}={level}")
        else:
            blocks.append(values.astype(np.float64))
            labels.append(term)

    if blocks:
        values = np.column_stack(blocks)
    else:
        values = np.zeros((df.n_rows, 0))
    return DesignMatrix(values, labels, intercept, catalog)


class RaggedRow(StratamatchError):
    pass


class TypeMismatch(StratamatchError):
    pass


class EmptyFile(StratamatchError):
    pass


class DuplicateColumn(StratamatchError):
    pass


class UnknownColumn(StratamatchError):
    pass


class FormulaSyntaxError(StratamatchError):
    pass


class DuplicateTerm(StratamatchError):
    pass


class UnseenLevel(StratamatchError):
    pass


class NonBinaryTreatment(StratamatchError):
    pass
