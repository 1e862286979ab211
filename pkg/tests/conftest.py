import pytest


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running test (paper-scale data or training)")
