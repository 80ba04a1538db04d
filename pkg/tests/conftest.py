import pytest


def pytest_configure(config):
    config.addinivalue_line(
        "markers", "slow: long-running learning-trend acceptance experiments")
