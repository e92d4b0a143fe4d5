import numpy as np
import pytest

from eqsandwich.datasets import Dataset, LongitudinalDataset, PersonHistory, PointRow
from eqsandwich.exceptions import UnorderedRecords


@pytest.fixture
def point_data():
    return Dataset({'y': [1.0, 2.0, 3.0], 'a': [1, 0, 1], 'l10': [0.1, 0.2, 0.3],
                    'l2': [5.0, 6.0, 7.0]},
                   oracle={'y1': [1.0, 2.5, 3.0], 'y0': [0.5, 2.0, 2.0]})


def test_dataset_columns(point_data):
    assert len(point_data) == 3
    assert point_data.columns == ('y', 'a', 'l10', 'l2')
    assert point_data.covariate_names == ('l2', 'l10')
    assert point_data.oracle_columns == ('y1', 'y0')
    assert 'y1' not in point_data
    assert np.array_equal(point_data.covariates(['l2', 'l10'])[0], [5.0, 0.1])
    assert point_data.covariates([]).shape == (3, 0)


def test_oracle_only_through_accessor(point_data):
    with pytest.raises(KeyError, match='oracle'):
        point_data['y1']
    with pytest.raises(KeyError):
        point_data['missing']
    assert np.array_equal(point_data.oracle('y1'), [1.0, 2.5, 3.0])


def test_dataset_is_read_only(point_data):
    with pytest.raises(ValueError):
        point_data['y'][0] = 10.0


def test_take_keeps_oracle_aligned(point_data):
    sample = point_data.take([2, 2, 0])
    assert len(sample) == 3
    assert np.array_equal(sample['y'], [3.0, 3.0, 1.0])
    assert np.array_equal(sample.oracle('y0'), [2.0, 2.0, 0.5])


def test_row_and_from_rows(point_data):
    row = point_data.row(1)
    assert isinstance(row, PointRow)
    assert row.y == 2.0 and row.a == 0
    assert np.array_equal(row.l, [6.0, 0.2])

    rebuilt = Dataset.from_rows([PointRow(1.0, 1, [0.5, 1.5]), PointRow(0.0, 0, [0.1, 0.2])])
    assert rebuilt.columns == ('y', 'a', 'l1', 'l2')
    assert np.array_equal(rebuilt['l2'], [1.5, 0.2])


@pytest.mark.parametrize('columns', [{'y': [1.0, 2.0], 'a': [0, 2]},
                                     {'y': [1.0, 2.0], 'a': [0, 1, 1]},
                                     {'y': [1.0, np.nan], 'a': [0, 1]}])
def test_dataset_validation(columns):
    with pytest.raises(ValueError):
        Dataset(columns)


def panel():
    """
    Three persons, K = 2: treated from k=1, never treated, treated from k=0.
    """
    y = np.arange(12, dtype=float).reshape(3, 4)
    a = np.array([[0, 1, 1], [0, 0, 0], [1, 1, 1]])
    l = np.arange(9, dtype=float).reshape(3, 3)
    return LongitudinalDataset(y, a, l, ids=[10, 11, 12])


def test_panel_treatment_times():
    data = panel()
    assert data.horizon == 2
    assert np.array_equal(data.first_treatment, [1, 3, 0])
    assert np.array_equal(data.t_start, [1.0, np.inf, 0.0])
    assert np.array_equal(data.at_risk, [[True, True, False], [True, True, True],
                                         [True, False, False]])
    assert data.is_absorbing
    assert data.covariate_names == ('l1',)
    assert np.array_equal(data.covariate('l1'), np.arange(9).reshape(3, 3))


def test_panel_person_and_take():
    data = panel()
    person = data.person(0)
    assert isinstance(person, PersonHistory)
    assert person.id == 10
    assert person.horizon == 2
    assert person.t_start == 1
    assert data.person(1).t_start == np.inf

    sample = data.take([1, 1])
    assert len(sample) == 2
    assert np.array_equal(sample.ids, [11, 11])


def test_panel_not_absorbing():
    data = LongitudinalDataset(np.zeros((1, 3)), [[1, 0]], np.zeros((1, 2)))
    assert not data.is_absorbing


def test_panel_shape_checks():
    with pytest.raises(ValueError):
        LongitudinalDataset(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        LongitudinalDataset(np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((2, 2)),
                            covariate_names=['l1', 'l2'])


def long_records():
    ids = [7, 7, 7, 9, 9, 9]
    k = [0, 1, 2, 0, 1, 2]
    a = [0, 1, 1, 0, 0, 0]
    y = [1.0, 2.0, 5.0, 0.0, 1.0, 1.0]
    l = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6]
    return ids, k, a, y, l


def test_from_long():
    data = LongitudinalDataset.from_long(*long_records())
    assert len(data) == 2
    assert data.horizon == 1
    assert np.array_equal(data.ids, [7, 9])
    assert np.array_equal(data.y, [[1.0, 2.0, 5.0], [0.0, 1.0, 1.0]])
    assert np.array_equal(data.a, [[0, 1], [0, 0]])
    assert np.array_equal(data.covariate('l1'), [[0.1, 0.2], [0.4, 0.5]])


def test_from_long_unordered_time():
    ids, k, a, y, l = long_records()
    k = [0, 2, 1, 0, 1, 2]
    with pytest.raises(UnorderedRecords):
        LongitudinalDataset.from_long(ids, k, a, y, l)


def test_from_long_interleaved_persons():
    ids, k, a, y, l = long_records()
    ids = [7, 9, 7, 9, 7, 9]
    with pytest.raises(UnorderedRecords):
        LongitudinalDataset.from_long(ids, k, a, y, l)


def test_from_long_unbalanced():
    ids, k, a, y, l = long_records()
    with pytest.raises(ValueError, match='unbalanced'):
        LongitudinalDataset.from_long(ids[:-1], k[:-1], a[:-1], y[:-1], l[:-1])
