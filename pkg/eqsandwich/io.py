"""
Reading datasets from CSV and writing run outputs.

Point data CSVs have a header row with ``y``, ``a`` and covariates
``l1..lm``; longitudinal CSVs are in long format with ``id, k, a, y, l1..lm``
sorted by ``(id, k)``.
"""
import json
from pathlib import Path

import numpy as np
from astropy.table import Table

from eqsandwich import log
from eqsandwich.constants import Thresholds
from eqsandwich.datasets import Dataset, LongitudinalDataset

__all__  = ['read_point_csv', 'read_longitudinal_csv', 'read_dataset', 'longitudinal_to_table',
            'point_to_table', 'write_json', 'write_table', 'fit_table', 'diagnostics_table',
            'bootstrap_table']


def _read_table(filename, required):
    table = Table.read(str(filename), format='ascii.csv')
    missing = [name for name in required if name not in table.colnames]
    if missing:
        raise KeyError(f'{filename} is missing columns {", ".join(missing)}.')
    for name in table.colnames:
        if getattr(table[name], 'mask', None) is not None and np.any(table[name].mask):
            raise ValueError(f'Column {name} of {filename} has missing values.')
    return table


def _covariate_columns(table):
    names = [name for name in table.colnames
             if name.startswith('l') and name[1:].isdigit()]
    return sorted(names, key=lambda name: int(name[1:]))


def read_point_csv(filename):
    """
    Read point treatment data.

    Parameters
    ----------
    filename : `str` or `pathlib.Path`

    Returns
    -------
    `~eqsandwich.datasets.Dataset`
        Every numeric column of the file.

    Raises
    ------
    KeyError
        If ``y`` or ``a`` is missing.
    """
    table = _read_table(filename, ('y', 'a'))
    columns = {name: np.asarray(table[name], dtype=float) for name in table.colnames}
    data = Dataset(columns)
    log.info(f'Read {len(data)} rows from {filename}')
    return data


def read_longitudinal_csv(filename):
    """
    Read long-format longitudinal data.

    Every person needs rows ``k = 0..K+1``; ``a`` and the covariates on the
    last row are ignored.

    Returns
    -------
    `~eqsandwich.datasets.LongitudinalDataset`

    Raises
    ------
    UnorderedRecords
        If the rows are not sorted by ``(id, k)``.
    """
    table = _read_table(filename, ('id', 'k', 'a', 'y'))
    names = _covariate_columns(table)
    if names:
        l = np.column_stack([np.asarray(table[name], dtype=float) for name in names])
    else:
        l = np.zeros((len(table), 0))
    data = LongitudinalDataset.from_long(np.asarray(table['id']), np.asarray(table['k']),
                                         np.asarray(table['a'], dtype=float),
                                         np.asarray(table['y'], dtype=float), l,
                                         covariate_names=names)
    horizon = Thresholds().get('max_horizon')
    if data.horizon > horizon:
        raise ValueError(f'Horizon {data.horizon} exceeds the supported {horizon}.')
    log.info(f'Read {len(data)} persons with horizon {data.horizon} from {filename}')
    return data


def read_dataset(filename, data_format='point'):
    if data_format == 'point':
        return read_point_csv(filename)
    if data_format == 'longitudinal':
        return read_longitudinal_csv(filename)
    raise ValueError(f'Unknown data format {data_format}.')


def point_to_table(data):
    """
    Estimator-visible columns of a point dataset; oracle columns are not written.
    """
    return Table([data[name] for name in data.columns], names=data.columns)


def longitudinal_to_table(data):
    """
    Long-format table of a longitudinal panel, the inverse of `read_longitudinal_csv`.

    The last row of each person repeats the final treatment and covariates.
    """
    n, width = data.y.shape
    a = np.concatenate([data.a, data.a[:, -1:]], axis=1)
    l = np.concatenate([data.l, data.l[:, -1:, :]], axis=1)
    columns = [np.repeat(data.ids, width), np.tile(np.arange(width), n),
               a.ravel(), data.y.ravel()]
    columns += [l[:, :, j].ravel() for j in range(l.shape[2])]
    return Table(columns, names=['id', 'k', 'a', 'y', *data.covariate_names])


def write_json(filename, doc):
    """
    Write ``doc`` with sorted keys and fixed indentation so reruns are byte-identical.
    """
    Path(filename).write_text(json.dumps(doc, sort_keys=True, indent=2, allow_nan=False) + '\n')


def write_table(filename, table):
    table.write(str(filename), format='ascii.csv', overwrite=True)


def fit_table(fit, level=0.95):
    """
    Human-readable table of estimates with standard errors and Wald intervals
    for every available variance estimator.
    """
    doc = fit.to_dict(level)
    rows = []
    for name, interval in doc['intervals'].items():
        covariance = getattr(fit.report, name)
        for j, parameter in enumerate(fit.parameter_names):
            rows.append((parameter, fit.params.psi[j], name, float(np.sqrt(covariance[j, j])),
                         interval['lower'][j], interval['upper'][j]))
    names = ['parameter', 'estimate', 'variance', 'std_error', 'ci_lower', 'ci_upper']
    return Table(rows=rows, names=names) if rows else Table(names=names)


def diagnostics_table(diagnostics):
    """
    Gap, pass threshold and status of each score identity check.
    """
    thresholds = Thresholds()
    status = diagnostics.status()
    rows = [(gap, float(getattr(diagnostics, gap)), thresholds.get('diagnostic_pass'),
             thresholds.get('diagnostic_warn'), status[gap]) for gap in status]
    return Table(rows=rows, names=['gap', 'value', 'pass_below', 'warn_below', 'status'])


def bootstrap_table(result, parameter_names):
    table = Table()
    table['replicate'] = np.arange(result.replicate_estimates.shape[0])
    for j, name in enumerate(parameter_names):
        table[name] = result.replicate_estimates[:, j]
    return table
