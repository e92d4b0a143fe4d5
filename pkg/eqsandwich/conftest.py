# This file is used to configure the behavior of pytest when using the Astropy
# test infrastructure.
import pytest

try:
    from pytest_astropy_header.display import PYTEST_HEADER_MODULES, TESTED_VERSIONS
except ImportError:
    PYTEST_HEADER_MODULES = {}
    TESTED_VERSIONS = {}

try:
    from eqsandwich import __version__ as version
except ImportError:
    version = 'unknown'

# Packages whose versions are shown in the pytest header.
PYTEST_HEADER_MODULES.pop('h5py', None)
PYTEST_HEADER_MODULES.pop('Matplotlib', None)
PYTEST_HEADER_MODULES.pop('Pandas', None)
PYTEST_HEADER_MODULES['xarray'] = 'xarray'
PYTEST_HEADER_MODULES['pathos'] = 'pathos'
TESTED_VERSIONS['eqsandwich'] = version


def pytest_addoption(parser):
    parser.addoption('--runslow', action='store_true', default=False,
                     help='run the full-size Monte Carlo checks')


def pytest_configure(config):
    config.addinivalue_line('markers', 'slow: full-size Monte Carlo check, needs --runslow')


def pytest_collection_modifyitems(config, items):
    if config.getoption('--runslow'):
        return
    skip_slow = pytest.mark.skip(reason='needs --runslow')
    for item in items:
        if 'slow' in item.keywords:
            item.add_marker(skip_slow)
