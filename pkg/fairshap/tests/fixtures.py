"""Small datasets and helpers shared by the test cases"""
import os
import unittest
from unittest import mock

import numpy as np
import pandas as pd

from fairshap.dataset import FeatureKind, FeatureSpec, from_frame

DATA_DIR = os.environ.get("FAIRSHAP_DATA_DIR")
SLOW = os.environ.get("FAIRSHAP_SLOW_TESTS") == "1"

TOY_SPECS = [
    FeatureSpec('group', FeatureKind.CATEGORICAL, ('g0', 'g1'), True),
    FeatureSpec('x', FeatureKind.CONTINUOUS),
    FeatureSpec('level', FeatureKind.CATEGORICAL, ('low', 'high')),
]


def requires_data(*names):
    """Skip unless FAIRSHAP_DATA_DIR holds every named raw file"""
    available = DATA_DIR is not None and all(os.path.isfile(os.path.join(DATA_DIR, name)) for name in names)
    return unittest.skipUnless(available, "needs %s in FAIRSHAP_DATA_DIR" % ", ".join(names))


def slow(test):
    return unittest.skipUnless(SLOW, "set FAIRSHAP_SLOW_TESTS=1 to run")(test)


def clean_environment(**values):
    """os.environ without FAIRSHAP_* variables, plus the given ones"""
    environment = dict((k, v) for k, v in os.environ.items() if not k.startswith("FAIRSHAP_"))
    environment.update(values)
    return mock.patch.dict(os.environ, environment, clear=True)


def toy_frame(rows_per_split=8, seed=0):
    """Every (group, label) and (group, level) pair is present in each split"""
    rng = np.random.default_rng(seed)
    records = []
    for split in ('train', 'validation', 'test'):
        for i in range(rows_per_split):
            records.append({
                'group': 'g1' if i % 2 else 'g0',
                'x': float(rng.standard_normal()),
                'level': ('low', 'high')[(i // 2) % 2],
                'label': (i // 4) % 2,
                'split': split,
            })
    return pd.DataFrame(records)


def toy_dataset(rows_per_split=8, seed=0, include_protected=True, specs=TOY_SPECS):
    return from_frame(toy_frame(rows_per_split, seed), specs, 'label', split='split', name="toy",
                      include_protected=include_protected, n_classes=2)


def two_player_dataset(rows_per_split=8, seed=0):
    """Only the protected group and x"""
    return toy_dataset(rows_per_split, seed, specs=TOY_SPECS[:2])


def separable_dataset(n_rows=300, seed=0):
    """Label decided by the sign of x, the group independent of both"""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n_rows)
    x = np.where(np.abs(x) < 0.2, np.sign(x) * 0.2 + x, x)
    frame = pd.DataFrame({
        'group': np.where(rng.integers(0, 2, n_rows) == 1, 'g1', 'g0'),
        'x': x,
        'level': np.where(rng.integers(0, 2, n_rows) == 1, 'high', 'low'),
        'label': (x > 0).astype(np.int64),
    })
    return from_frame(frame, TOY_SPECS, 'label', seed=seed, name="separable", n_classes=2)


def ks_statistic(first, second):
    """Two-sample Kolmogorov-Smirnov distance"""
    first, second = np.sort(first), np.sort(second)
    points = np.concatenate([first, second])
    cdf_first = np.searchsorted(first, points, side='right') / len(first)
    cdf_second = np.searchsorted(second, points, side='right') / len(second)
    return float(np.max(np.abs(cdf_first - cdf_second)))
