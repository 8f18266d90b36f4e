"""
pytest wiring for the Django test suite: mirrors detector.test_runner.AnomalyTestRunner
(settings, test databases, and skipping ``slow``-tagged tests unless AVFM_RUN_SLOW_TESTS is set).
"""
import os

import django

os.environ.setdefault('DJANGO_SETTINGS_MODULE', 'config.settings')
django.setup()

import pytest  # noqa: E402
from django.conf import settings  # noqa: E402
from django.test.utils import setup_databases, setup_test_environment, teardown_databases, teardown_test_environment  # noqa: E402

_db_state = None


def pytest_sessionstart(session):
    global _db_state
    setup_test_environment()
    _db_state = setup_databases(verbosity=0, interactive=False)


def pytest_sessionfinish(session, exitstatus):
    if _db_state is not None:
        teardown_databases(_db_state, verbosity=0)
        teardown_test_environment()


def pytest_collection_modifyitems(config, items):
    if settings.AVFM_RUN_SLOW_TESTS:
        return
    skip_slow = pytest.mark.skip(reason='slow test; set AVFM_RUN_SLOW_TESTS to run')
    for item in items:
        tags = set(getattr(item.cls, 'tags', ()) or ())
        tags |= set(getattr(getattr(item, 'obj', None), 'tags', ()) or ())
        if 'slow' in tags:
            item.add_marker(skip_slow)
