"""Tabular datasets: the Adult and COMPAS recipes, a minimal user-schema path and
the empirical group rates the fairness value functions are weighted with.

Every loader returns an immutable `Dataset` holding the encoded feature matrix,
integer labels, the binarized protected attribute, the feature groups that act
as Shapley players and a per-row split tag.
"""
from collections import namedtuple
from enum import Enum
import json
import logging
import os
import re

import numpy as np
import pandas as pd

from fairshap.exceptions import DataFileError, DimensionMismatchError, EmptyCellError, \
    EmptySplitError, RowParseError, UnknownPlayerError

log = logging.getLogger("fairshap.dataset")

DEFAULT_SEED = 0
BUNDLE_VERSION = 1
BUNDLE_FORMAT = "fairshap-dataset"


class FeatureKind(Enum):
    CATEGORICAL = "categorical"
    CONTINUOUS = "continuous"


class Split(Enum):
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"


class Conditioning(Enum):
    NONE = "none"
    LABEL = "label"
    RESOLVING = "resolving-set"


FeatureSpec = namedtuple("FeatureSpec", ['name', 'kind', 'categories', 'is_protected'], defaults=[(), False])
FeatureGroup = namedtuple("FeatureGroup", ['player_name', 'column_indices'])
Standardization = namedtuple("Standardization", ['column', 'name', 'mean', 'std'])
SplitView = namedtuple("SplitView", ['X', 'y', 'a', 'rows'])


class GroupRates(namedtuple("GroupRates", ['conditioning', 'resolving', 'split', 'keys', 'rates',
                                           'cell_weights', 'row_cells', 'dropped'])):
    """Empirical P(a | cell) over the conditioning cells of one split

    keys: cell keys, `()` for no conditioning, `(y,)` for labels, one code per
    resolving player otherwise. rates[i] = (P(a=0 | keys[i]), P(a=1 | keys[i])).
    row_cells maps every row of the split to its cell index, -1 for dropped cells.
    """
    __slots__ = ()

    def index(self, key):
        try:
            return self.keys.index(tuple(key))
        except ValueError:
            raise EmptyCellError("Cell %s is not available for %s conditioning" % (tuple(key), self.conditioning.value), cells=[key])

    def rate(self, key, a):
        return float(self.rates[self.index(key)][int(a)])


#
# Adult
#
ADULT_COLUMNS = ['age', 'workclass', 'fnlwgt', 'education', 'education-num', 'marital-status',
                 'occupation', 'relationship', 'race', 'sex', 'capital-gain', 'capital-loss',
                 'hours-per-week', 'native-country', 'income']
ADULT_FEATURES = ['age', 'workclass', 'education', 'marital-status', 'occupation', 'relationship',
                  'race', 'sex', 'capital-gain', 'capital-loss', 'hours-per-week', 'native-country']
ADULT_CONTINUOUS = ('age', 'capital-gain', 'capital-loss', 'hours-per-week')
ADULT_KEPT_COUNTRIES = ('United-States', 'Mexico')
ADULT_LABELS = {'<=50K': 0, '>50K': 1}
ADULT_VALIDATION_FRACTION = 0.2

#
# COMPAS
#
COMPAS_REQUIRED = ['age', 'sex', 'race', 'c_charge_degree', 'priors_count', 'c_jail_in', 'c_jail_out',
                   'juv_fel_count', 'juv_misd_count', 'juv_other_count', 'two_year_recid',
                   'days_b_screening_arrest', 'is_recid', 'score_text']
COMPAS_RACES = ('African-American', 'Caucasian')
COMPAS_CHARGE_WINDOW_DAYS = 30
COMPAS_FRACTIONS = (0.6, 0.2, 0.2)


class Dataset:
    """Encoded tabular data, immutable once built"""

    def __init__(self, name, X, y, a, groups, split, standardization, specs, n_classes, column_names, protected):
        self.name = name
        self.X = np.ascontiguousarray(X, dtype=float)
        self.y = np.asarray(y, dtype=np.int64)
        self.a = np.asarray(a, dtype=np.int64)
        self.split = np.asarray(split, dtype='<U10')
        for array in (self.X, self.y, self.a, self.split):
            array.setflags(write=False)
        self.groups = tuple(FeatureGroup(g.player_name, tuple(int(c) for c in g.column_indices)) for g in groups)
        self.standardization = tuple(standardization)
        self.specs = tuple(specs)
        self.n_classes = int(n_classes)
        self.column_names = tuple(column_names)
        self.protected = protected

        if self.X.shape[0] != len(self.y) or len(self.y) != len(self.a) or len(self.a) != len(self.split):
            raise DimensionMismatchError("Dataset arrays disagree on row count")
        if self.X.shape[1] != len(self.column_names):
            raise DimensionMismatchError("Dataset has %s columns but %s column names" % (self.X.shape[1], len(self.column_names)))

    def __repr__(self):
        return "<%s name=%s rows=%s columns=%s players=%s>" % (self.__class__.__name__, self.name, self.n_rows, self.n_features, len(self.groups))

    @property
    def n_rows(self):
        return self.X.shape[0]

    @property
    def n_features(self):
        return self.X.shape[1]

    @property
    def players(self):
        return tuple(group.player_name for group in self.groups)

    @property
    def protected_group(self):
        """Group of the protected attribute, None when it was excluded from X"""
        for group in self.groups:
            if group.player_name == self.protected:
                return group
        return None

    def spec(self, name):
        for spec in self.specs:
            if spec.name == name:
                return spec
        raise UnknownPlayerError("No feature named %s in %s" % (name, self.name))

    def group_index(self, name):
        for index, group in enumerate(self.groups):
            if group.player_name == name:
                return index
        raise UnknownPlayerError("No player named %s in %s" % (name, self.name))

    def rows(self, split):
        return np.flatnonzero(self.split == Split(split).value)

    def view(self, split):
        rows = self.rows(split)
        if not len(rows):
            raise EmptySplitError("Split %s of %s is empty" % (Split(split).value, self.name))
        return SplitView(self.X[rows], self.y[rows], self.a[rows], rows)

    def group_codes(self, X, name):
        """Per-row code of one player: category index for categoricals, encoded value otherwise"""
        group = self.groups[self.group_index(name)]
        block = np.asarray(X)[:, list(group.column_indices)]
        if self.spec(name).kind is FeatureKind.CATEGORICAL:
            return np.argmax(block, axis=1)
        return block[:, 0]

    def decode_group(self, row, name):
        """Raw value of one player for one row of X"""
        spec = self.spec(name)
        group = self.groups[self.group_index(name)]
        block = self.X[row, list(group.column_indices)]
        if spec.kind is FeatureKind.CATEGORICAL:
            active = np.flatnonzero(block == 1.0)
            if len(active) != 1:
                raise RowParseError("Row %s has %s active categories for %s" % (row, len(active), name), row=row)
            return spec.categories[int(active[0])]
        for entry in self.standardization:
            if entry.column == group.column_indices[0]:
                return float(block[0] * entry.std + entry.mean)
        return float(block[0])

    def intervene(self, X, value):
        """do(protected = value): copy of X with the protected columns rewritten"""
        group = self.protected_group
        if group is None:
            raise UnknownPlayerError("Protected attribute %s is not part of X" % self.protected)
        X = np.array(X, dtype=float, copy=True)
        columns = list(group.column_indices)
        if len(columns) == 2:
            X[:, columns] = 0.0
            X[:, columns[int(value)]] = 1.0
            return X
        if len(columns) != 1:
            raise DimensionMismatchError("Protected group %s spans %s columns, expected a one-hot pair or a binary column" % (self.protected, len(columns)))
        encoded = float(value)
        for entry in self.standardization:
            if entry.column == columns[0]:
                encoded = (encoded - entry.mean) / entry.std
        X[:, columns[0]] = encoded
        return X

    def without_protected(self):
        """Same data with the protected group removed from X, a is kept"""
        group = self.protected_group
        if group is None:
            return self
        dropped = set(group.column_indices)
        keep = [c for c in range(self.n_features) if c not in dropped]
        remap = dict((old, new) for new, old in enumerate(keep))
        groups = [FeatureGroup(g.player_name, tuple(remap[c] for c in g.column_indices))
                  for g in self.groups if g.player_name != self.protected]
        standardization = [s._replace(column=remap[s.column]) for s in self.standardization if s.column in remap]
        return Dataset(self.name, self.X[:, keep], self.y, self.a, groups, self.split, standardization, self.specs,
                       self.n_classes, [self.column_names[c] for c in keep], self.protected)


def _check_specs(specs):
    protected = [spec for spec in specs if spec.is_protected]
    if len(protected) != 1:
        raise ValueError("Exactly one protected feature needed, got %s" % len(protected))
    for spec in specs:
        kind = FeatureKind(spec.kind)
        if kind is FeatureKind.CATEGORICAL and len(spec.categories) < 2:
            raise ValueError("Categorical feature %s needs at least two categories" % spec.name)
        if kind is FeatureKind.CONTINUOUS and len(spec.categories):
            raise ValueError("Continuous feature %s cannot list categories" % spec.name)
    if FeatureKind(protected[0].kind) is not FeatureKind.CATEGORICAL or len(protected[0].categories) != 2:
        raise ValueError("Protected feature %s must be categorical with two categories" % protected[0].name)
    return protected[0]


def _category_codes(series, spec):
    codes = pd.Categorical(series, categories=list(spec.categories)).codes
    unknown = np.flatnonzero(codes < 0)
    if len(unknown):
        row = int(unknown[0]) + 1
        raise RowParseError("Value %r of %s in row %s is not a known category" % (series.iloc[unknown[0]], spec.name, row), row=row)
    return codes.astype(np.int64)


def _encode(name, frame, specs, labels, n_classes, split_tags, include_protected=True):
    """One-hot encode categoricals and standardize continuous columns on training rows"""
    protected = _check_specs(specs)
    split_tags = np.asarray(split_tags, dtype='<U10')
    for split in Split:
        if not np.any(split_tags == split.value):
            raise EmptySplitError("Split %s of %s is empty after cleaning" % (split.value, name))
    train = split_tags == Split.TRAIN.value

    a = _category_codes(frame[protected.name], protected)
    columns, column_names, groups, standardization = [], [], [], []
    for spec in specs:
        if spec.is_protected and not include_protected:
            continue
        start = len(columns)
        if FeatureKind(spec.kind) is FeatureKind.CATEGORICAL:
            codes = _category_codes(frame[spec.name], spec)
            for index, category in enumerate(spec.categories):
                columns.append((codes == index).astype(float))
                column_names.append("%s=%s" % (spec.name, category))
        else:
            values = frame[spec.name].to_numpy(dtype=float)
            mean = float(values[train].mean())
            std = float(values[train].std())
            if std == 0.0:
                log.warning("Feature %s is constant on the training split, leaving it unscaled" % spec.name)
                std = 1.0
            columns.append((values - mean) / std)
            column_names.append(spec.name)
            standardization.append(Standardization(len(columns) - 1, spec.name, mean, std))
        groups.append(FeatureGroup(spec.name, tuple(range(start, len(columns)))))

    X = np.column_stack(columns)
    specs = [spec._replace(kind=FeatureKind(spec.kind), categories=tuple(spec.categories)) for spec in specs]
    dataset = Dataset(name, X, labels, a, groups, split_tags, standardization, specs, n_classes, column_names, protected.name)
    log.info("Encoded %s: %s rows, %s columns, %s players, split %s" % (
        name, dataset.n_rows, dataset.n_features, len(dataset.groups),
        dict((s.value, int(np.sum(split_tags == s.value))) for s in Split)))
    return dataset


def _read_csv(path, **kwargs):
    if not os.path.isfile(path):
        raise DataFileError("Raw file %s does not exist" % path)
    try:
        return pd.read_csv(path, **kwargs)
    except pd.errors.ParserError as e:
        match = re.search(r"line (\d+)", str(e))
        row = int(match.group(1)) if match else None
        raise RowParseError("Cannot parse %s: %s" % (path, e), row=row)


def _numeric(frame, column, path, row_offset=0):
    """Parse one column as numbers, reporting the first unparseable row"""
    raw = frame[column]
    values = pd.to_numeric(raw, errors='coerce')
    bad = np.flatnonzero(values.isna().to_numpy() & raw.notna().to_numpy())
    if len(bad):
        row = int(bad[0]) + 1 + row_offset
        raise RowParseError("Cannot parse %s=%r in %s data row %s" % (column, raw.iloc[bad[0]], path, row), row=row)
    return values


def _seeded_split(n_rows, fractions, seed):
    """Split tags for n_rows drawn from fractions (train, validation, test) with a seeded shuffle"""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("Split fractions must be three numbers summing to one, got %s" % (fractions,))
    permutation = np.random.default_rng(seed).permutation(n_rows)
    n_train = int(round(fractions[0] * n_rows))
    n_validation = int(round(fractions[1] * n_rows))
    tags = np.full(n_rows, Split.TEST.value, dtype='<U10')
    tags[permutation[:n_train]] = Split.TRAIN.value
    tags[permutation[n_train:n_train + n_validation]] = Split.VALIDATION.value
    return tags


def _read_adult_file(path):
    frame = _read_csv(path, header=None, names=ADULT_COLUMNS, skipinitialspace=True, na_values=['?'],
                      dtype=str, comment='|', skip_blank_lines=True)
    for column in ADULT_CONTINUOUS:
        frame[column] = _numeric(frame, column, path)
    before = len(frame)
    frame = frame.dropna(subset=ADULT_FEATURES + ['income']).reset_index(drop=True)
    log.info("Read %s: dropped %s of %s rows with missing values" % (path, before - len(frame), before))
    labels = frame['income'].str.rstrip('.').map(ADULT_LABELS)
    bad = np.flatnonzero(labels.isna().to_numpy())
    if len(bad):
        raise RowParseError("Unknown income label %r in %s" % (frame['income'].iloc[bad[0]], path), row=int(bad[0]) + 1)
    frame['income'] = labels.astype(np.int64)
    return frame


def load_adult(raw_train_path, raw_test_path, seed=DEFAULT_SEED, include_protected=True):
    """UCI Adult: drop fnlwgt and education-num and rows with missing values,
    fold native-country into United-States / Mexico / other, split 20% of the
    training file off as validation, protect sex (Female=0, Male=1)
    """
    train_frame = _read_adult_file(raw_train_path)
    test_frame = _read_adult_file(raw_test_path)
    if not len(train_frame) or not len(test_frame):
        raise EmptySplitError("Adult has no rows left after cleaning")

    permutation = np.random.default_rng(seed).permutation(len(train_frame))
    n_validation = int(round(ADULT_VALIDATION_FRACTION * len(train_frame)))
    train_tags = np.full(len(train_frame), Split.TRAIN.value, dtype='<U10')
    train_tags[permutation[:n_validation]] = Split.VALIDATION.value
    split_tags = np.concatenate([train_tags, np.full(len(test_frame), Split.TEST.value, dtype='<U10')])

    frame = pd.concat([train_frame, test_frame], ignore_index=True)
    frame['native-country'] = frame['native-country'].where(frame['native-country'].isin(ADULT_KEPT_COUNTRIES), 'other')

    specs = []
    for name in ADULT_FEATURES:
        if name in ADULT_CONTINUOUS:
            specs.append(FeatureSpec(name, FeatureKind.CONTINUOUS))
        elif name == 'sex':
            specs.append(FeatureSpec(name, FeatureKind.CATEGORICAL, ('Female', 'Male'), True))
        else:
            specs.append(FeatureSpec(name, FeatureKind.CATEGORICAL, tuple(sorted(frame[name].unique()))))
    return _encode("adult", frame, specs, frame['income'].to_numpy(), 2, split_tags, include_protected)


def load_compas(raw_path, seed=DEFAULT_SEED, include_protected=True):
    """ProPublica two-year COMPAS: charge within 30 days of arrest, African-American
    and Caucasian rows only, jail duration from the jail timestamps, 60/20/20 split,
    protect race (African-American=0, Caucasian=1)
    """
    frame = _read_csv(raw_path)
    missing = [column for column in COMPAS_REQUIRED if column not in frame.columns]
    if missing:
        raise DataFileError("Raw file %s lacks columns %s" % (raw_path, ", ".join(missing)))
    frame = frame[COMPAS_REQUIRED].copy()
    for column in ('age', 'priors_count', 'juv_fel_count', 'juv_misd_count', 'juv_other_count',
                   'two_year_recid', 'days_b_screening_arrest', 'is_recid'):
        frame[column] = _numeric(frame, column, raw_path)
    for column in ('c_jail_in', 'c_jail_out'):
        parsed = pd.to_datetime(frame[column], errors='coerce')
        bad = np.flatnonzero(parsed.isna().to_numpy() & frame[column].notna().to_numpy())
        if len(bad):
            raise RowParseError("Cannot parse %s=%r in %s data row %s" % (column, frame[column].iloc[bad[0]], raw_path, int(bad[0]) + 1), row=int(bad[0]) + 1)
        frame[column] = parsed

    before = len(frame)
    window = frame['days_b_screening_arrest'].abs() <= COMPAS_CHARGE_WINDOW_DAYS
    keep = window & (frame['is_recid'] != -1) & (frame['c_charge_degree'] != 'O') \
        & frame['score_text'].notna() & (frame['score_text'] != 'N/A') \
        & frame['race'].isin(COMPAS_RACES)
    frame = frame[keep.fillna(False)].copy()
    frame['jail_duration'] = ((frame['c_jail_out'] - frame['c_jail_in']).dt.total_seconds() / 86400.0).clip(lower=0.0)
    features = ['age', 'sex', 'race', 'c_charge_degree', 'priors_count', 'jail_duration',
                'juv_fel_count', 'juv_misd_count', 'juv_other_count']
    frame = frame.dropna(subset=features + ['two_year_recid']).reset_index(drop=True)
    log.info("Read %s: kept %s of %s rows after the ProPublica filters" % (raw_path, len(frame), before))
    if not len(frame):
        raise EmptySplitError("COMPAS has no rows left after cleaning")

    specs = [
        FeatureSpec('age', FeatureKind.CONTINUOUS),
        FeatureSpec('sex', FeatureKind.CATEGORICAL, ('Female', 'Male')),
        FeatureSpec('race', FeatureKind.CATEGORICAL, COMPAS_RACES, True),
        FeatureSpec('c_charge_degree', FeatureKind.CATEGORICAL, ('F', 'M')),
        FeatureSpec('priors_count', FeatureKind.CONTINUOUS),
        FeatureSpec('jail_duration', FeatureKind.CONTINUOUS),
        FeatureSpec('juv_fel_count', FeatureKind.CONTINUOUS),
        FeatureSpec('juv_misd_count', FeatureKind.CONTINUOUS),
        FeatureSpec('juv_other_count', FeatureKind.CONTINUOUS),
    ]
    split_tags = _seeded_split(len(frame), COMPAS_FRACTIONS, seed)
    return _encode("compas", frame, specs, frame['two_year_recid'].to_numpy(dtype=np.int64), 2, split_tags, include_protected)


def from_frame(frame, specs, label, split=None, fractions=(0.6, 0.2, 0.2), seed=DEFAULT_SEED, name="custom",
               include_protected=True, n_classes=None):
    """Encode a DataFrame against explicit FeatureSpecs

    label names an integer column with values 0..k-1. split names a column of
    train/validation/test tags; without it tags are drawn from fractions.
    """
    if not isinstance(frame, pd.DataFrame):
        raise ValueError("Need a DataFrame to encode, not %s" % type(frame))
    columns = [spec.name for spec in specs] + [label] + ([split] if split is not None else [])
    before = len(frame)
    frame = frame.dropna(subset=columns).reset_index(drop=True)
    if len(frame) != before:
        log.info("Dropped %s of %s rows with missing values" % (before - len(frame), before))
    labels = frame[label].to_numpy(dtype=np.int64)
    if n_classes is None:
        n_classes = int(labels.max()) + 1 if len(labels) else 2
    if len(labels) and (labels.min() < 0 or labels.max() >= n_classes):
        raise RowParseError("Labels of %s must lie in 0..%s" % (name, n_classes - 1))
    if split is not None:
        split_tags = frame[split].astype(str).to_numpy()
    else:
        split_tags = _seeded_split(len(frame), fractions, seed)
    return _encode(name, frame, specs, labels, max(int(n_classes), 2), split_tags, include_protected)


def synthetic_frame(n_rows=200, seed=DEFAULT_SEED):
    """Raw frame and FeatureSpecs of a five-feature binary task: a protected group,
    a proxy of it, a signal, a three-level categorical and a noise column"""
    rng = np.random.default_rng(seed)
    group = rng.integers(0, 2, n_rows)
    proxy = group + 0.5 * rng.standard_normal(n_rows)
    signal = rng.standard_normal(n_rows)
    level = rng.integers(0, 3, n_rows)
    noise = rng.standard_normal(n_rows)
    logit = 1.5 * signal + 0.75 * (2 * group - 1) + 0.5 * (level - 1) + 0.5 * rng.standard_normal(n_rows)
    frame = pd.DataFrame({
        'group': np.where(group == 1, 'g1', 'g0'),
        'proxy': proxy,
        'signal': signal,
        'level': np.array(['low', 'mid', 'high'])[level],
        'noise': noise,
        'label': (logit > 0).astype(np.int64),
    })
    specs = [
        FeatureSpec('group', FeatureKind.CATEGORICAL, ('g0', 'g1'), True),
        FeatureSpec('proxy', FeatureKind.CONTINUOUS),
        FeatureSpec('signal', FeatureKind.CONTINUOUS),
        FeatureSpec('level', FeatureKind.CATEGORICAL, ('low', 'mid', 'high')),
        FeatureSpec('noise', FeatureKind.CONTINUOUS),
    ]
    return frame, specs


def make_synthetic(n_rows=200, seed=DEFAULT_SEED, include_protected=True):
    frame, specs = synthetic_frame(n_rows, seed)
    return from_frame(frame, specs, 'label', seed=seed, name="synthetic", include_protected=include_protected, n_classes=2)


def _cell_codes(ds, view, conditioning, resolving):
    if conditioning is Conditioning.NONE:
        return np.zeros((len(view.rows), 0)), []
    if conditioning is Conditioning.LABEL:
        return view.y[:, None].astype(float), [True]
    if not resolving:
        return np.zeros((len(view.rows), 0)), []
    codes = [ds.group_codes(view.X, name).astype(float) for name in resolving]
    categorical = [FeatureKind(ds.spec(name).kind) is FeatureKind.CATEGORICAL for name in resolving]
    return np.column_stack(codes), categorical


def empirical_group_rates(ds, conditioning=Conditioning.NONE, split=Split.TRAIN, resolving=(), drop_empty=False):
    """P(a | cell) over the conditioning cells of a split

    A cell without members of both protected groups raises EmptyCellError
    listing every such cell, unless drop_empty is set, in which case those
    cells are left out and reported in `dropped`.
    """
    conditioning = Conditioning(conditioning)
    resolving = tuple(resolving)
    for name in resolving:
        ds.group_index(name)
    view = ds.view(split)
    codes, categorical = _cell_codes(ds, view, conditioning, resolving)
    if codes.shape[1]:
        unique, inverse = np.unique(codes, axis=0, return_inverse=True)
        inverse = np.asarray(inverse).reshape(-1)
    else:
        unique, inverse = np.zeros((1, 0)), np.zeros(len(view.rows), dtype=np.int64)

    keys, rates, weights, dropped = [], [], [], []
    row_cells = np.full(len(view.rows), -1, dtype=np.int64)
    for index, code_row in enumerate(unique):
        key = tuple(int(v) if is_categorical else float(v) for v, is_categorical in zip(code_row, categorical))
        members = inverse == index
        n_members = int(members.sum())
        n_protected = int(view.a[members].sum())
        if n_protected == 0 or n_protected == n_members:
            dropped.append(key)
            continue
        row_cells[members] = len(keys)
        keys.append(key)
        rates.append(((n_members - n_protected) / n_members, n_protected / n_members))
        weights.append(n_members / len(view.rows))

    if dropped and not drop_empty:
        raise EmptyCellError("Cells %s of %s lack one protected group" % (", ".join(str(k) for k in dropped), Split(split).value), cells=dropped)
    if dropped:
        log.warning("Dropped %s cells lacking one protected group: %s" % (len(dropped), dropped))
    if not keys:
        raise EmptyCellError("No conditioning cell of %s holds both protected groups" % Split(split).value, cells=dropped)
    return GroupRates(conditioning, resolving, Split(split), tuple(keys), np.array(rates), np.array(weights),
                      row_cells, tuple(dropped))


def _spec_to_dict(spec):
    return {'name': spec.name, 'kind': FeatureKind(spec.kind).value, 'categories': list(spec.categories), 'is_protected': spec.is_protected}


def save_bundle(ds, out_dir):
    """Write arrays as .npy files plus a JSON schema sidecar"""
    os.makedirs(out_dir, exist_ok=True)
    np.save(os.path.join(out_dir, "X.npy"), ds.X)
    np.save(os.path.join(out_dir, "y.npy"), ds.y)
    np.save(os.path.join(out_dir, "a.npy"), ds.a)
    np.save(os.path.join(out_dir, "split.npy"), ds.split)
    schema = {
        'format': BUNDLE_FORMAT,
        'version': BUNDLE_VERSION,
        'name': ds.name,
        'n_classes': ds.n_classes,
        'protected': ds.protected,
        'specs': [_spec_to_dict(spec) for spec in ds.specs],
        'groups': [{'player_name': g.player_name, 'column_indices': list(g.column_indices)} for g in ds.groups],
        'standardization': [s._asdict() for s in ds.standardization],
        'column_names': list(ds.column_names),
    }
    with open(os.path.join(out_dir, "schema.json"), "w") as handle:
        json.dump(schema, handle, indent=2, sort_keys=True)
        handle.write("\n")
    log.info("Saved %s bundle to %s" % (ds.name, out_dir))


def load_bundle(bundle_dir):
    schema_path = os.path.join(bundle_dir, "schema.json")
    if not os.path.isfile(schema_path):
        raise DataFileError("No dataset bundle in %s" % bundle_dir)
    with open(schema_path) as handle:
        schema = json.load(handle)
    if schema.get('format') != BUNDLE_FORMAT or schema.get('version') != BUNDLE_VERSION:
        raise DataFileError("Unsupported bundle %s version %s" % (schema.get('format'), schema.get('version')))
    arrays = dict((name, np.load(os.path.join(bundle_dir, name + ".npy"), allow_pickle=False)) for name in ('X', 'y', 'a', 'split'))
    specs = [FeatureSpec(s['name'], FeatureKind(s['kind']), tuple(s['categories']), s['is_protected']) for s in schema['specs']]
    groups = [FeatureGroup(g['player_name'], tuple(g['column_indices'])) for g in schema['groups']]
    standardization = [Standardization(**s) for s in schema['standardization']]
    return Dataset(schema['name'], arrays['X'], arrays['y'], arrays['a'], groups, arrays['split'], standardization,
                   specs, schema['n_classes'], schema['column_names'], schema['protected'])
