"""
Containers for point-treatment and longitudinal data.

Both containers keep estimator-visible columns and oracle (counterfactual)
columns in separate stores. Oracle columns are written only by the simulators
and can only be read through the explicit ``oracle`` accessor, so an
estimating function indexing ``data['y1']`` fails loudly instead of peeking at
a counterfactual.
"""
import re
from dataclasses import dataclass
from typing import Any, NamedTuple

import numpy as np

from eqsandwich.exceptions import UnorderedRecords

__all__ = ['PointRow', 'Dataset', 'PersonHistory', 'LongitudinalDataset']

_COVARIATE = re.compile(r'^l(\d+)$')


def _frozen(values, dtype=float):
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


def _check_binary(a, label):
    if not np.all((a == 0) | (a == 1)):
        raise ValueError(f'{label} must be binary (0 or 1).')


def _covariate_names(names):
    found = [(int(match.group(1)), name) for name in names
             for match in [_COVARIATE.match(name)] if match]
    return tuple(name for _, name in sorted(found))


class PointRow(NamedTuple):
    """
    One point-treatment observation ``(y, a, l)``.
    """
    y: float
    a: int
    l: np.ndarray


class Dataset:
    """
    Point-treatment data, one row per independent subject.

    Parameters
    ----------
    columns : mapping of str to array-like
        Estimator-visible columns, all of the same length. Treatment ``a``,
        when present, must be binary.
    oracle : mapping of str to array-like, optional
        Counterfactual columns known only in simulation.

    Examples
    --------
    >>> from eqsandwich.datasets import Dataset
    >>> data = Dataset({'y': [2., 4., 0., 0.], 'a': [1, 1, 0, 0]})
    >>> len(data)
    4
    >>> float(data['y'].mean())
    1.5
    """
    def __init__(self, columns, oracle=None):
        self._columns = {name: _frozen(values) for name, values in columns.items()}
        self._oracle = {name: _frozen(values) for name, values in (oracle or {}).items()}
        lengths = {arr.shape[0] for arr in (*self._columns.values(), *self._oracle.values())}
        if len(lengths) > 1:
            raise ValueError(f'All columns must have the same length, got {sorted(lengths)}.')
        for name, arr in (*self._columns.items(), *self._oracle.items()):
            if arr.ndim != 1:
                raise ValueError(f'Column {name} must be 1D.')
            if not np.all(np.isfinite(arr)):
                raise ValueError(f'Column {name} has non-finite entries.')
        if 'a' in self._columns:
            _check_binary(self._columns['a'], 'Treatment column a')
        self._n = lengths.pop() if lengths else 0

    def __len__(self):
        return self._n

    def __contains__(self, name):
        return name in self._columns

    def __getitem__(self, name):
        if name in self._columns:
            return self._columns[name]
        if name in self._oracle:
            raise KeyError(f'{name} is an oracle column; read it with Dataset.oracle().')
        raise KeyError(f'No column named {name}.')

    def __repr__(self):
        return f'Dataset(n={self._n}, columns={list(self._columns)})'

    @property
    def columns(self):
        return tuple(self._columns)

    @property
    def oracle_columns(self):
        return tuple(self._oracle)

    @property
    def covariate_names(self):
        """
        Covariate columns ``l1, l2, ...`` in numeric order.
        """
        return _covariate_names(self._columns)

    def covariates(self, names):
        """
        Stack the named columns into an ``(n, len(names))`` array.
        """
        if not names:
            return np.zeros((self._n, 0))
        return np.column_stack([self[name] for name in names])

    def oracle(self, name):
        """
        Counterfactual column ``name``; only simulators populate these.
        """
        return self._oracle[name]

    def take(self, indices):
        """
        New dataset made of the rows ``indices`` (with repetition, for resampling).
        """
        indices = np.asarray(indices, dtype=int)
        return Dataset({name: arr[indices] for name, arr in self._columns.items()},
                       {name: arr[indices] for name, arr in self._oracle.items()})

    def row(self, i):
        return PointRow(float(self['y'][i]), int(self['a'][i]),
                        self.covariates(self.covariate_names)[i])

    @classmethod
    def from_rows(cls, rows):
        """
        Build a dataset from `PointRow` objects; covariates become ``l1..lm``.
        """
        rows = list(rows)
        covariates = np.array([np.atleast_1d(row.l) for row in rows], dtype=float)
        columns = {'y': [row.y for row in rows], 'a': [row.a for row in rows]}
        for j in range(covariates.shape[1] if covariates.ndim == 2 else 0):
            columns[f'l{j + 1}'] = covariates[:, j]
        return cls(columns)


@dataclass(frozen=True)
class PersonHistory:
    """
    One person's longitudinal record.

    ``l`` and ``a`` cover decision times ``k = 0..K``; ``y`` covers outcome
    times ``k = 0..K+1``.
    """
    id: Any
    l: np.ndarray
    a: np.ndarray
    y: np.ndarray

    @property
    def horizon(self):
        return self.a.shape[0] - 1

    @property
    def t_start(self):
        treated = np.flatnonzero(self.a == 1)
        return float(treated[0]) if treated.size else np.inf


class LongitudinalDataset:
    """
    Balanced longitudinal panel stored in wide form; the person is the i.i.d. unit.

    Parameters
    ----------
    y : array-like, shape (n, K+2)
        Outcomes at ``k = 0..K+1``.
    a : array-like, shape (n, K+1)
        Binary treatment at decision times ``k = 0..K``.
    l : array-like, shape (n, K+1, m)
        Covariates at decision times.
    ids : array-like, optional
        Person identifiers, defaults to ``0..n-1``.
    covariate_names : sequence of str, optional
        Names of the ``m`` covariates, defaults to ``l1..lm``.
    oracle : mapping of str to array-like, optional
        Counterfactual arrays with leading dimension n.
    """
    def __init__(self, y, a, l, ids=None, covariate_names=None, oracle=None):
        self.y = _frozen(y)
        self.a = _frozen(a)
        l = np.array(l, dtype=float)
        if l.ndim == 2:
            l = l[:, :, np.newaxis]
        self.l = _frozen(l)

        n = self.y.shape[0]
        if self.y.ndim != 2 or self.a.ndim != 2 or self.l.ndim != 3:
            raise ValueError('Expected y (n, K+2), a (n, K+1) and l (n, K+1, m) arrays.')
        if self.a.shape != (n, self.y.shape[1] - 1) or self.l.shape[:2] != self.a.shape:
            raise ValueError(f'Inconsistent shapes y {self.y.shape}, a {self.a.shape}, '
                             f'l {self.l.shape}.')
        if not (np.all(np.isfinite(self.y)) and np.all(np.isfinite(self.l))):
            raise ValueError('Outcomes and covariates must be finite.')
        _check_binary(self.a, 'Treatment a')

        self.ids = _frozen(np.arange(n) if ids is None else ids, dtype=None)
        if covariate_names is None:
            covariate_names = [f'l{j + 1}' for j in range(self.l.shape[2])]
        self.covariate_names = tuple(covariate_names)
        if len(self.covariate_names) != self.l.shape[2]:
            raise ValueError('One covariate name is needed per covariate.')
        self._oracle = {name: _frozen(values) for name, values in (oracle or {}).items()}

    def __len__(self):
        return self.y.shape[0]

    def __repr__(self):
        return (f'LongitudinalDataset(n={len(self)}, horizon={self.horizon}, '
                f'covariates={list(self.covariate_names)})')

    @property
    def horizon(self):
        """
        Last decision time K.
        """
        return self.a.shape[1] - 1

    @property
    def first_treatment(self):
        """
        Integer index of the first treated time, ``K+1`` for never treated.
        """
        treated = self.a == 1
        return np.where(treated.any(axis=1), treated.argmax(axis=1), self.horizon + 1)

    @property
    def t_start(self):
        """
        First treated time as float, ``inf`` for never treated.
        """
        first = self.first_treatment.astype(float)
        first[first > self.horizon] = np.inf
        return first

    @property
    def at_risk(self):
        """
        ``(n, K+1)`` mask of decision times with no earlier treatment.
        """
        return self.first_treatment[:, np.newaxis] >= np.arange(self.horizon + 1)

    @property
    def is_absorbing(self):
        return bool(np.all(np.diff(self.a, axis=1) >= 0))

    @property
    def oracle_columns(self):
        return tuple(self._oracle)

    def oracle(self, name):
        return self._oracle[name]

    def covariate(self, name):
        """
        ``(n, K+1)`` history of one covariate.
        """
        return self.l[:, :, self.covariate_names.index(name)]

    def person(self, i):
        return PersonHistory(self.ids[i], self.l[i], self.a[i], self.y[i])

    def take(self, indices):
        """
        New panel made of the persons ``indices`` (with repetition, for resampling).
        """
        indices = np.asarray(indices, dtype=int)
        return LongitudinalDataset(self.y[indices], self.a[indices], self.l[indices],
                                   ids=self.ids[indices],
                                   covariate_names=self.covariate_names,
                                   oracle={name: arr[indices] for name, arr in self._oracle.items()})

    @classmethod
    def from_long(cls, ids, k, a, y, l, covariate_names=None):
        """
        Build a panel from long-format records sorted by ``(id, k)``.

        Every person must have rows ``k = 0..K+1``. Treatment and covariates on
        the final row ``k = K+1`` carry no information and are dropped.

        Raises
        ------
        UnorderedRecords
            If a person's rows are not contiguous or ``k`` does not run ``0..K+1``.
        """
        ids = np.asarray(ids)
        k = np.asarray(k)
        l = np.array(l, dtype=float)
        if l.ndim == 1:
            l = l[:, np.newaxis]
        if ids.size == 0:
            raise ValueError('No longitudinal records.')

        change = np.flatnonzero(ids[1:] != ids[:-1]) + 1
        starts = np.concatenate([[0], change])
        ends = np.concatenate([change, [ids.size]])
        firsts = ids[starts]
        if len(set(firsts.tolist())) != firsts.size:
            raise UnorderedRecords('Records of a person are not contiguous; sort by (id, k).')
        lengths = ends - starts
        if np.any(lengths != lengths[0]):
            raise ValueError('Panel is unbalanced: every person needs rows k = 0..K+1.')
        n, width = starts.size, int(lengths[0])
        if width < 2:
            raise ValueError('Each person needs at least rows k = 0 and k = 1.')

        if not np.array_equal(k.reshape(n, width), np.tile(np.arange(width), (n, 1))):
            raise UnorderedRecords('Time index k must run 0..K+1 in increasing order '
                                   'within each person.')

        return cls(np.asarray(y, dtype=float).reshape(n, width),
                   np.asarray(a, dtype=float).reshape(n, width)[:, :-1],
                   l.reshape(n, width, l.shape[1])[:, :-1, :],
                   ids=firsts, covariate_names=covariate_names)
